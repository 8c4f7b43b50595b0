"""Diagonal Fisher estimation and the quadratic anchoring penalty.

The Fisher diagonal for a finished task is a weighted mean of squared
per-sample gradients over that task's replay buffer, where each sample's
weight grows with its difficulty (1 + loss / max loss, so between 1 and 2).
Past tasks then contribute sum_i F_i * (theta_i - anchor_i)^2 to the
training loss of every later task.
"""

from dataclasses import dataclass

import numpy as np

from .tensorcore import Tensor


@dataclass
class FisherMap:
    task_id: int
    values: dict  # param id -> np.ndarray, same shape as the parameter
    sample_count: int


@dataclass
class Anchor:
    task_id: int
    values: dict  # param id -> np.ndarray snapshot


def difficulty_weight(loss, max_loss):
    """Replay-difficulty weight in [1, 2]; a degenerate buffer weighs 1."""
    if loss < 0 or max_loss < 0:
        raise ValueError("losses must be non-negative")
    if loss > max_loss:
        raise ValueError(f"loss {loss} exceeds max_loss {max_loss}")
    if max_loss == 0.0:
        return 1.0
    return 1.0 + loss / max_loss


def compute_fisher(sample_loss_fn, params, entries, task_id, weighted=True):
    """Weighted mean of squared gradients over a task's buffer entries.

    sample_loss_fn(entry) must rebuild the per-sample segmentation loss
    graph (no penalty terms) from the live `params`. Parameters that never
    receive gradient keep a zero Fisher value.
    """
    if not entries:
        raise ValueError("cannot compute Fisher over an empty buffer")
    max_loss = max(e.difficulty for e in entries)
    acc = {pid: np.zeros(p.shape) for pid, p in params.items()}
    total_w = 0.0
    for e in entries:
        w = difficulty_weight(e.difficulty, max_loss) if weighted else 1.0
        for p in params.values():
            p.grad = None
        loss = sample_loss_fn(e)
        loss.backward()
        for pid, p in params.items():
            if p.grad is not None:
                acc[pid] += w * p.grad * p.grad
        total_w += w
    for p in params.values():
        p.grad = None
    values = {pid: a / total_w for pid, a in acc.items()}
    return FisherMap(task_id=task_id, values=values, sample_count=len(entries))


def snapshot_anchor(params, task_id):
    """Copy of the given parameters, taken at a task boundary."""
    return Anchor(task_id=task_id,
                  values={pid: p.data.copy() for pid, p in params.items()})


def ewc_penalty(live, anchors, fishers):
    """Sum over past tasks of F * (theta - anchor)^2, as a graph scalar.

    Each anchor covers only the parameters that were trainable during its
    source task; parameters outside that set contribute nothing for that
    task. Anchors and Fisher maps must pair up one-to-one by task.
    """
    if len(anchors) != len(fishers):
        raise ValueError("anchors and fishers must align")
    total = Tensor(0.0)
    for anchor, fisher in zip(anchors, fishers):
        if anchor.task_id != fisher.task_id:
            raise ValueError("anchor/fisher task mismatch")
        for pid, ref in anchor.values.items():
            if pid not in live:
                raise KeyError(f"live parameter set is missing {pid}")
            f = fisher.values[pid]
            diff = live[pid] - Tensor(ref)
            total = total + (Tensor(f) * diff.square()).sum()
    return total
