"""Continual training loop: allocate an adapter, train with replayed hard
samples and quadratic anchoring, consolidate, evaluate every task seen.

The five ablation modes form a ladder, each switching on one more mechanism
on top of the previous one:

  sequential  one shared adapter, plain fine-tuning task after task
  ewc         prompt-similarity adapter routing plus quadratic anchoring
              (Fisher accumulated without difficulty weights)
  replay      adds mixed batches drawn from per-task hard-sample buffers,
              task choice by temporal decay only
  fisher      replay task weights additionally boosted by average Fisher
  bidirectional  difficulty feeds both directions: Fisher accumulation is
              difficulty-weighted and within-task replay favours hard
              samples ("full" is an accepted alias)
"""

import hashlib
from dataclasses import dataclass

import numpy as np

from .adapters import AdapterBank, trainable_count
from .consolidation import compute_fisher, ewc_penalty, snapshot_anchor
from .losses import batched_losses
from .memory import (average_fisher, build_buffer, replay_weight,
                     sample_replay, score_difficulties)
from .metrics import ResultsMatrix, dice
from .model import (FreezeViolation, N_PATCHES, PATCH_PIXELS, patchify,
                    patchify_masks, predict_masks, pretrained_base, tokenize)
from .optim import AdamW
from .taskgen import cached_dataset, pretext_dataset
from .tensorcore import NonFiniteError

MODES = ("sequential", "ewc", "replay", "fisher", "bidirectional")

# RNG stream ids, combined with (experiment seed, task id)
_RNG_ADAPTER = 0
_RNG_BATCH = 1
_RNG_REPLAY = 2


class DivergenceError(RuntimeError):
    """Training produced non-finite numbers."""


@dataclass(frozen=True)
class ModeFlags:
    allocation: bool          # route by prompt similarity vs one shared adapter
    ewc: bool                 # quadratic anchoring to past-task weights
    replay: bool              # mix buffered samples into every batch
    fisher_boost: bool        # replay task weights scaled by average Fisher
    weighted_fisher: bool     # difficulty weights inside Fisher accumulation
    difficulty_replay: bool   # within-task draws favour harder entries

    @property
    def needs_buffer(self):
        # anchoring needs a buffer to estimate Fisher on, replay to draw from
        return self.ewc or self.replay


_MODE_TABLE = {
    "sequential": ModeFlags(False, False, False, False, False, False),
    "ewc": ModeFlags(True, True, False, False, False, False),
    "replay": ModeFlags(True, True, True, False, False, False),
    "fisher": ModeFlags(True, True, True, True, False, False),
    "bidirectional": ModeFlags(True, True, True, True, True, True),
}
# "full" is an accepted alias for the complete method
_MODE_TABLE["full"] = _MODE_TABLE["bidirectional"]


def mode_flags(mode):
    if mode not in _MODE_TABLE:
        raise ValueError(f"unknown mode {mode!r}; choose from {MODES}")
    return _MODE_TABLE[mode]


@dataclass
class TrainConfig:
    mode: str = "bidirectional"
    lr: float = 8e-4
    weight_decay: float = 8e-5
    batch_size: int = 16
    max_epochs: int = 30
    patience: int = 5
    replay_ratio: float = 0.4
    lambda_ewc: float = 500.0
    memory_ratio: float = 0.15
    tau: float = 0.75
    rank: int = 8
    lora_alpha: float = 16.0
    boost_alpha: float = 0.5
    seed: int = 43
    d_v: int = 32
    d_t: int = 32
    pretrain_steps: int = 2000

    def __post_init__(self):
        mode_flags(self.mode)
        if self.batch_size < 1:
            raise ValueError("batch_size must be positive")
        if not (0.0 <= self.replay_ratio < 1.0):
            raise ValueError(f"replay_ratio {self.replay_ratio} not in [0, 1)")
        if not (0.0 < self.memory_ratio <= 1.0):
            raise ValueError(f"memory_ratio {self.memory_ratio} not in (0, 1]")
        if self.max_epochs < 1 or self.patience < 1:
            raise ValueError("max_epochs and patience must be positive")
        if self.lambda_ewc < 0 or self.boost_alpha < 0:
            raise ValueError("penalty strengths must be non-negative")
        if self.rank < 1:
            raise ValueError("rank must be positive")
        if not (-1.0 <= self.tau <= 1.0):
            raise ValueError(f"tau {self.tau} is not a valid cosine threshold")


def derive_rng(seed, stream, task_id):
    """Independent generator per (experiment seed, purpose, task)."""
    return np.random.default_rng(
        np.random.SeedSequence([seed, stream, task_id]))


def replay_quota(batch_size, replay_ratio, have_memories):
    """Replay slots per mixed batch: round half up, never the whole batch."""
    if not have_memories or replay_ratio == 0.0:
        return 0
    q = int(np.floor(batch_size * replay_ratio + 0.5))
    return min(q, batch_size - 1)


def adapter_fingerprint(adapter):
    """Content hash of an adapter's weights, for locality assertions."""
    h = hashlib.sha256()
    for name in sorted(adapter.a):
        h.update(adapter.a[name].data.tobytes())
        h.update(adapter.b[name].data.tobytes())
    return h.hexdigest()


class RunLog:
    """Append-only training trace; the CLI serialises it to disk."""

    def __init__(self):
        self.epochs = []
        self.allocations = []
        self.consolidations = []

    def epoch(self, **row):
        self.epochs.append(row)

    def allocation(self, **row):
        self.allocations.append(row)

    def consolidation(self, **row):
        self.consolidations.append(row)


class ContinualState:
    """Everything a continual run produces, checkpointable at task
    boundaries."""

    def __init__(self, config, specs, model, bank, pretrain_dice):
        self.config = config
        self.specs = list(specs)
        self.model = model
        self.bank = bank
        self.pretrain_dice = float(pretrain_dice)
        self.memories = {}    # task id -> TaskMemory
        self.fishers = []     # FisherMap per consolidated task, in order
        self.anchors = []     # Anchor per consolidated task, same order
        self.results = ResultsMatrix(len(specs), [s.name for s in specs])
        self.tokens = {}      # task id -> token ids
        self.decisions = []   # AllocationDecision per task, in order
        self.completed = 0

    def trainables_for(self, adapter):
        out = dict(adapter.params())
        out.update(self.model.shared_params())
        return out

    def live_params(self):
        """Every parameter any anchor may refer to."""
        out = dict(self.bank.all_params())
        out.update(self.model.shared_params())
        return out


def evaluate_task(model, adapter, tokens, samples):
    """Mean Dice of binarised predictions over a sample list."""
    images = np.stack([s.image for s in samples])
    targets = patchify_masks(np.stack([s.mask for s in samples])) > 0.5
    preds = predict_masks(model, images, tokens, adapter)
    return float(np.mean([dice(preds[i], targets[i])
                          for i in range(len(samples))]))


def _group_replay(entries):
    groups = {}
    for e in entries:
        groups.setdefault(e.task_id, []).append(e)
    return dict(sorted(groups.items()))


def _mixed_loss(state, idx, patches, masks_flat, tokens, adapter, replayed,
                flags):
    """Batch objective: sample-count-weighted group means plus anchoring.

    Replayed entries run through their own task's tokens and adapter, so one
    graph per group; weighting each group mean by its share of the batch
    makes the total an exact mean over all samples in the mixed batch.
    """
    cfg = state.config
    groups = [(np.ascontiguousarray(patches[idx].reshape(-1, PATCH_PIXELS)),
               masks_flat[idx], tokens, adapter)]
    for t, entries in _group_replay(replayed).items():
        imgs = np.stack([e.image for e in entries])
        gm = np.stack([e.mask for e in entries])
        groups.append((patchify(imgs), patchify_masks(gm),
                       state.tokens[t], state.bank.adapter_for(t)))
    total_n = sum(g[1].shape[0] for g in groups)
    loss = None
    for p_stack, m_flat, toks, adpt in groups:
        logits = state.model.forward_patches(p_stack, toks, adpt)
        ce, dc = batched_losses(logits, m_flat)
        term = (m_flat.shape[0] / total_n) * (ce + dc)
        loss = term if loss is None else loss + term
    if flags.ewc and state.anchors:
        penalty = ewc_penalty(state.live_params(), state.anchors,
                              state.fishers)
        loss = loss + cfg.lambda_ewc * penalty
    return loss


def train_task(state, task_id, data, log=None):
    """Train one task end to end, then consolidate and evaluate.

    Returns the allocation decision. Any non-finite value in a forward or
    backward pass surfaces as DivergenceError.
    """
    if task_id != state.completed:
        raise ValueError(
            f"tasks must run in order; expected {state.completed}, "
            f"got {task_id}")
    spec = state.specs[task_id]
    try:
        return _run_task(state, task_id, data, log)
    except NonFiniteError as exc:
        raise DivergenceError(f"task {spec.name} diverged: {exc}") from exc


def _run_task(state, task_id, data, log):
    cfg = state.config
    flags = mode_flags(cfg.mode)
    spec = state.specs[task_id]
    model, bank = state.model, state.bank

    tokens = tokenize(spec.prompt)
    state.tokens[task_id] = tokens
    emb = model.embed_text(spec.prompt)
    rng_adapter = derive_rng(cfg.seed, _RNG_ADAPTER, task_id)
    if flags.allocation:
        decision = bank.allocate(task_id, emb, cfg.tau, rng_adapter)
    else:
        decision = bank.assign_shared(task_id, emb, rng_adapter)
    state.decisions.append(decision)
    adapter = bank.adapter_for(task_id)

    # adapters not in play this task must come out bit-identical
    frozen_prints = {aid: adapter_fingerprint(ad)
                     for aid, ad in bank.adapters.items()
                     if aid != adapter.adapter_id}

    trainables = state.trainables_for(adapter)
    aux = [p for pid, p in state.live_params().items()
           if pid not in trainables]
    opt = AdamW(trainables, lr=cfg.lr, weight_decay=cfg.weight_decay)

    count, fraction = trainable_count(model, adapter)
    if log:
        log.allocation(
            task=spec.name, task_id=task_id, kind=decision.kind,
            adapter=decision.adapter_id, similarity=decision.similarity,
            matched_task=decision.matched_task,
            similarities={state.specs[t].name: s
                          for t, s in decision.similarities.items()},
            trainable_count=count, trainable_fraction=fraction)

    train = data["train"]
    n = len(train)
    images = np.stack([s.image for s in train])
    masks_flat = patchify_masks(np.stack([s.mask for s in train]))
    patches = patchify(images).reshape(n, N_PATCHES, PATCH_PIXELS)

    rng_batch = derive_rng(cfg.seed, _RNG_BATCH, task_id)
    rng_replay = derive_rng(cfg.seed, _RNG_REPLAY, task_id)
    quota = replay_quota(cfg.batch_size, cfg.replay_ratio,
                         flags.replay and bool(state.memories))
    cur_bs = cfg.batch_size - quota

    best_dice = -np.inf
    best_arrays = None
    best_epoch = -1
    stale = 0
    epochs_run = 0
    early_stopped = False

    for epoch in range(cfg.max_epochs):
        perm = rng_batch.permutation(n)
        step_losses = []
        for start in range(0, n, cur_bs):
            idx = perm[start:start + cur_bs]
            replayed = sample_replay(
                state.memories, quota, rng_replay,
                uniform_within=not flags.difficulty_replay) if quota else []
            opt.zero_grad()
            for p in aux:
                p.grad = None
            loss = _mixed_loss(state, idx, patches, masks_flat, tokens,
                               adapter, replayed, flags)
            step_losses.append(loss.item())
            loss.backward()
            opt.step()
        epochs_run = epoch + 1
        val_dice = evaluate_task(model, adapter, tokens, data["val"])
        improved = val_dice > best_dice
        if improved:
            best_dice = val_dice
            best_epoch = epoch
            best_arrays = {pid: p.data.copy()
                           for pid, p in trainables.items()}
            stale = 0
        else:
            stale += 1
        if log:
            log.epoch(task=spec.name, task_id=task_id, epoch=epoch,
                      train_loss=float(np.mean(step_losses)),
                      val_dice=val_dice, improved=improved)
        if stale >= cfg.patience:
            early_stopped = True
            break

    # roll back to the checkpoint that scored best on validation
    for pid, p in trainables.items():
        p.data = best_arrays[pid].copy()

    if flags.needs_buffer:
        scores = score_difficulties(model, adapter, images, masks_flat,
                                    tokens)
        memory = build_buffer(train, scores, task_id, cfg.memory_ratio)

        def entry_loss(e):
            logits = model.forward_patches(patchify(e.image), tokens,
                                           adapter)
            m = patchify_masks(e.mask)
            ce, dc = batched_losses(logits, m)
            return ce + dc

        fisher = compute_fisher(entry_loss, trainables, memory.entries,
                                task_id, weighted=flags.weighted_fisher)
        memory.fisher_avg = average_fisher(fisher)
        state.memories[task_id] = memory
        state.fishers.append(fisher)
        state.anchors.append(snapshot_anchor(trainables, task_id))

        t_now = task_id + 1
        for t, mem in state.memories.items():
            mem.replay_weight = replay_weight(
                t, t_now,
                mem.fisher_avg if flags.fisher_boost else 0.0,
                cfg.boost_alpha if flags.fisher_boost else 0.0)

    for t in range(task_id + 1):
        test_dice = evaluate_task(model, bank.adapter_for(t),
                                  state.tokens[t], cached_test(state, t))
        state.results.record(task_id, t, test_dice)

    model.check_base_intact()
    for aid, before in frozen_prints.items():
        if adapter_fingerprint(bank.adapters[aid]) != before:
            raise FreezeViolation(
                f"adapter {aid} changed while task {spec.name} "
                f"trained {adapter.adapter_id}")

    state.completed = task_id + 1
    if log:
        log.consolidation(
            task=spec.name, task_id=task_id, best_epoch=best_epoch,
            epochs_run=epochs_run, early_stopped=early_stopped,
            best_val_dice=best_dice,
            buffer_size=len(state.memories[task_id].entries)
            if task_id in state.memories else 0,
            fisher_avg=state.memories[task_id].fisher_avg
            if task_id in state.memories else None,
            replay_weights={state.specs[t].name: m.replay_weight
                            for t, m in sorted(state.memories.items())},
            avg_dice=state.results.avg_dice(task_id))
    return decision


# Test-split access with the same process-wide cache the run itself uses;
# kept separate so checkpoint resume never needs the original sample lists.
def cached_test(state, task_id):
    return cached_dataset(state.specs[task_id])["test"]


def init_state(config, specs):
    """Pretrain (or fetch the cached) backbone and set up an empty run."""
    pretext = pretext_dataset()
    model, pre_dice = pretrained_base(pretext, steps=config.pretrain_steps,
                                      d_v=config.d_v, d_t=config.d_t)
    bank = AdapterBank(model.lora_targets, rank=config.rank,
                       alpha=config.lora_alpha)
    return ContinualState(config, specs, model, bank, pre_dice)


def run_sequence(config, specs, log=None, state=None, datasets=None,
                 after_task=None):
    """Run (or resume) the whole task sequence.

    datasets, when given, must be a list of {"train": [...], "val": [...]}
    aligned with specs; otherwise each task's data comes from the generator
    cache. after_task(state, task_id) runs at each boundary, e.g. to write
    a checkpoint.
    """
    if state is None:
        state = init_state(config, specs)
    for task_id in range(state.completed, len(state.specs)):
        data = (datasets[task_id] if datasets is not None
                else cached_dataset(state.specs[task_id]))
        train_task(state, task_id, data, log)
        if after_task is not None:
            after_task(state, task_id)
    return state
