"""Hard-sample replay buffers and replay weighting.

Each finished task keeps its most difficult training samples (highest mean
per-pixel cross-entropy under that task's final weights). At replay time a
task is chosen with probability proportional to a temporal-decay weight,
optionally boosted by its average Fisher importance; within a task, harder
entries are favoured.
"""

import numpy as np

from .losses import bce_np
from .model import patchify, patchify_masks
from .tensorcore import no_grad


class BufferEntry:
    def __init__(self, image, mask, task_id, difficulty, index):
        self.image = np.array(image, dtype=np.float64)
        self.mask = np.array(mask, dtype=np.float64)
        self.task_id = task_id
        self.difficulty = float(difficulty)
        self.index = int(index)


class TaskMemory:
    """Buffer entries for one task, sorted by descending difficulty."""

    def __init__(self, task_id, entries):
        self.task_id = task_id
        self.entries = list(entries)
        self.fisher_avg = 0.0
        self.replay_weight = 0.0

    @property
    def max_difficulty(self):
        return max(e.difficulty for e in self.entries) if self.entries else 0.0


def score_difficulty(model, adapter, sample, tokens):
    """Mean per-pixel BCE of the model's prediction on one sample."""
    with no_grad():
        logits = model.forward_patches(patchify(sample.image), tokens, adapter)
    return bce_np(logits.data.reshape(-1),
                  patchify_masks(sample.mask).reshape(-1))


def score_difficulties(model, adapter, images, masks_flat, tokens):
    """Vector of per-sample difficulties for a stacked dataset."""
    with no_grad():
        logits = model.forward_patches(patchify(images), tokens, adapter)
    z = logits.data.reshape(masks_flat.shape[0], -1)
    return np.array([bce_np(z[i], masks_flat[i]) for i in range(z.shape[0])])


def build_buffer(samples, scores, task_id, r_memory):
    """Keep the top floor(len * r_memory) hardest samples, at least one.

    Ties on difficulty break toward the lower dataset index, so the buffer
    is deterministic for any score vector.
    """
    if not (0.0 < r_memory <= 1.0):
        raise ValueError(f"r_memory {r_memory} outside (0, 1]")
    if len(samples) == 0:
        raise ValueError("empty dataset")
    if len(scores) != len(samples):
        raise ValueError("one score per sample required")
    k = max(1, int(np.floor(len(samples) * r_memory)))
    order = sorted(range(len(samples)), key=lambda i: (-scores[i], i))
    entries = [BufferEntry(samples[i].image, samples[i].mask, task_id,
                           scores[i], i) for i in order[:k]]
    return TaskMemory(task_id, entries)


def average_fisher(fisher_map):
    """Flat mean over every parameter element in the Fisher map."""
    total = 0.0
    count = 0
    for arr in fisher_map.values.values():
        total += float(arr.sum())
        count += arr.size
    if count == 0:
        raise ValueError("empty Fisher map")
    return total / count


def replay_weight(task, t_current, fisher_avg, boost_alpha):
    """Temporal decay 1 / (T - t), boosted by average Fisher importance."""
    if task >= t_current:
        raise ValueError(f"task {task} is not in the past of {t_current}")
    if fisher_avg < 0:
        raise ValueError("negative Fisher average")
    return (1.0 / (t_current - task)) * (1.0 + boost_alpha * fisher_avg)


def sample_replay(memories, n, rng, uniform_within=False):
    """Draw n buffer entries with replacement.

    Tasks are chosen with probability proportional to their replay weight;
    a task with weight 0 or an empty buffer is never drawn. Within a task,
    entries are drawn proportionally to 1 + difficulty / max_difficulty
    (uniform when uniform_within is set or all difficulties are 0).
    """
    if n == 0:
        return []
    active = [(t, m) for t, m in sorted(memories.items())
              if m.entries and m.replay_weight > 0.0]
    if not active:
        raise ValueError("no replayable task memories")
    weights = np.array([m.replay_weight for _, m in active])
    probs = weights / weights.sum()
    picks = rng.choice(len(active), size=n, p=probs)
    counts = np.bincount(picks, minlength=len(active))
    out = []
    for slot, (t, m) in enumerate(active):
        c = int(counts[slot])
        if c == 0:
            continue
        if uniform_within or m.max_difficulty == 0.0:
            inner = np.full(len(m.entries), 1.0)
        else:
            inner = np.array([1.0 + e.difficulty / m.max_difficulty
                              for e in m.entries])
        inner /= inner.sum()
        for i in rng.choice(len(m.entries), size=c, p=inner):
            out.append(m.entries[i])
    return out
