"""Low-rank adapters and prompt-similarity routing.

One adapter is a pair (B, A) per eligible weight matrix, contributing
(alpha / rank) * B @ A on top of the frozen base weight. B starts at zero,
so a freshly allocated adapter leaves the forward pass bit-identical to the
backbone. New tasks either reuse the adapter of the most similar previous
prompt (cosine above the threshold) or get a fresh one.
"""

from dataclasses import dataclass, field

import numpy as np

from .tensorcore import Tensor


def cosine_similarity(a, b):
    """Cosine between two prompt embeddings (already unit norm)."""
    va, vb = a.vector, b.vector
    na, nb = np.linalg.norm(va), np.linalg.norm(vb)
    if na == 0.0 or nb == 0.0:
        raise ValueError("zero-norm embedding")
    return float(va @ vb / (na * nb))


class LoraAdapter:
    """Per-target low-rank deltas. A is (rank, in), B is (out, rank)."""

    def __init__(self, adapter_id, target_shapes, rank, alpha, rng):
        self.adapter_id = adapter_id
        self.rank = rank
        self.alpha = float(alpha)
        self.owner_tasks = []
        self.a = {}
        self.b = {}
        for name, (k_in, d_out) in target_shapes.items():
            bound = 1.0 / np.sqrt(k_in)
            self.a[name] = Tensor(rng.uniform(-bound, bound, (rank, k_in)),
                                  requires_grad=True)
            self.b[name] = Tensor(np.zeros((d_out, rank)), requires_grad=True)

    @property
    def scaling(self):
        return self.alpha / self.rank

    def delta(self, name):
        """In-graph low-rank update for one target, shaped (in, out)."""
        return self.scaling * (self.b[name] @ self.a[name]).transpose()

    def apply(self, base):
        """Effective weights: base (in, out) plus the low-rank update."""
        out = {}
        for name, w in base.items():
            if name not in self.a:
                raise KeyError(f"{name} is not an adapter target")
            out[name] = w + self.delta(name)
        return out

    def params(self):
        prefix = f"adapter.{self.adapter_id}"
        out = {}
        for name in self.a:
            out[f"{prefix}.{name}.a"] = self.a[name]
            out[f"{prefix}.{name}.b"] = self.b[name]
        return out

    @property
    def num_elements(self):
        return sum(t.size for t in self.a.values()) \
            + sum(t.size for t in self.b.values())


@dataclass
class AllocationDecision:
    task_id: int
    kind: str  # "new" or "reuse"
    adapter_id: str
    similarity: float | None = None
    matched_task: int | None = None
    similarities: dict = field(default_factory=dict)


class AdapterBank:
    """All adapters created so far, plus the task -> adapter routing table."""

    def __init__(self, target_shapes, rank=8, alpha=16.0):
        self.target_shapes = dict(target_shapes)
        self.rank = rank
        self.alpha = alpha
        self.adapters = {}
        self.assignment = {}
        self.prompts = {}

    def _fresh(self, rng):
        aid = f"a{len(self.adapters)}"
        adapter = LoraAdapter(aid, self.target_shapes, self.rank, self.alpha,
                              rng)
        self.adapters[aid] = adapter
        return adapter

    def allocate(self, task_id, prompt_emb, tau, rng):
        """Route a task to an adapter by prompt similarity.

        Reuse requires the best cosine to strictly exceed tau; ties on the
        maximum break toward the lowest task id. Never touches the weights
        of existing adapters.
        """
        if task_id in self.assignment:
            raise ValueError(f"task {task_id} already allocated")
        sims = {}
        best_task = None
        best = -np.inf
        for t in sorted(self.prompts):
            s = cosine_similarity(prompt_emb, self.prompts[t])
            sims[t] = s
            if s > best:
                best, best_task = s, t
        if best_task is not None and best > tau:
            aid = self.assignment[best_task]
            self.adapters[aid].owner_tasks.append(task_id)
            decision = AllocationDecision(task_id, "reuse", aid,
                                          similarity=best,
                                          matched_task=best_task,
                                          similarities=sims)
        else:
            adapter = self._fresh(rng)
            adapter.owner_tasks.append(task_id)
            decision = AllocationDecision(task_id, "new", adapter.adapter_id,
                                          similarities=sims)
        self.assignment[task_id] = decision.adapter_id
        self.prompts[task_id] = prompt_emb
        return decision

    def assign_shared(self, task_id, prompt_emb, rng):
        """Single-adapter routing used by the naive sequential mode."""
        if task_id in self.assignment:
            raise ValueError(f"task {task_id} already allocated")
        if not self.adapters:
            adapter = self._fresh(rng)
        else:
            adapter = self.adapters["a0"]
        adapter.owner_tasks.append(task_id)
        self.assignment[task_id] = adapter.adapter_id
        self.prompts[task_id] = prompt_emb
        return AllocationDecision(task_id, "reuse" if task_id else "new",
                                  adapter.adapter_id)

    def adapter_for(self, task_id):
        return self.adapters[self.assignment[task_id]]

    def all_params(self):
        out = {}
        for adapter in self.adapters.values():
            out.update(adapter.params())
        return out


def trainable_count(model, adapter):
    """Element count of the active adapter plus shared trainables, and its
    fraction of the backbone's total parameter count."""
    shared = sum(p.size for p in model.shared_params().values())
    count = adapter.num_elements + shared
    return count, count / model.total_parameters()
