"""Single-file checkpoint container for a continual run.

Layout: 8-byte magic, little-endian uint64 header length, JSON header, then
the raw parameter payload. The header carries a tensor index (name, shape,
byte offset), run metadata, and a SHA-256 of the payload. All buffers are
little-endian float64, concatenated in sorted name order, so files written
on any platform compare byte-for-byte.

Checkpoints are cut at task boundaries only, and every random stream is
re-derived from (seed, purpose, task), so resuming from a checkpoint
reproduces a straight-through run bit for bit.
"""

import hashlib
import json
import os
import struct
from dataclasses import asdict

import numpy as np

from .adapters import AdapterBank, LoraAdapter
from .consolidation import Anchor, FisherMap
from .memory import BufferEntry, TaskMemory
from .metrics import ResultsMatrix
from .model import BiModalSegmenter, PromptEmbedding, PRETRAIN_SEED
from .taskgen import TaskSpec
from .trainer import ContinualState, TrainConfig

MAGIC = b"CLFORGE1"
FORMAT_VERSION = 1


class CheckpointError(RuntimeError):
    """Corrupt, truncated, or incompatible checkpoint file."""


def write_container(path, arrays, meta):
    """Write named float64 arrays plus a JSON metadata block atomically."""
    index = []
    chunks = []
    offset = 0
    for name in sorted(arrays):
        buf = np.ascontiguousarray(arrays[name], dtype="<f8").tobytes()
        index.append({"name": name,
                      "shape": list(np.asarray(arrays[name]).shape),
                      "offset": offset})
        chunks.append(buf)
        offset += len(buf)
    payload = b"".join(chunks)
    header = {"version": FORMAT_VERSION,
              "tensors": index,
              "meta": meta,
              "payload_sha256": hashlib.sha256(payload).hexdigest()}
    header_bytes = json.dumps(header, sort_keys=True).encode()
    tmp = path + ".tmp"
    with open(tmp, "wb") as f:
        f.write(MAGIC)
        f.write(struct.pack("<Q", len(header_bytes)))
        f.write(header_bytes)
        f.write(payload)
    os.replace(tmp, path)


def read_container(path):
    """Read a container back; verifies magic, version, and payload hash."""
    with open(path, "rb") as f:
        blob = f.read()
    if len(blob) < len(MAGIC) + 8:
        raise CheckpointError("file too short for a checkpoint header")
    if blob[:len(MAGIC)] != MAGIC:
        raise CheckpointError("bad magic; not a checkpoint file")
    (hlen,) = struct.unpack("<Q", blob[len(MAGIC):len(MAGIC) + 8])
    hstart = len(MAGIC) + 8
    if len(blob) < hstart + hlen:
        raise CheckpointError("truncated checkpoint header")
    try:
        header = json.loads(blob[hstart:hstart + hlen])
    except ValueError as exc:
        raise CheckpointError(f"unreadable header: {exc}") from exc
    if header.get("version") != FORMAT_VERSION:
        raise CheckpointError(
            f"unsupported checkpoint version {header.get('version')}")
    payload = blob[hstart + hlen:]
    if hashlib.sha256(payload).hexdigest() != header["payload_sha256"]:
        raise CheckpointError("payload checksum mismatch")
    arrays = {}
    for entry in header["tensors"]:
        shape = tuple(entry["shape"])
        count = int(np.prod(shape)) if shape else 1
        start = entry["offset"]
        end = start + 8 * count
        if end > len(payload):
            raise CheckpointError(f"tensor {entry['name']} out of bounds")
        arrays[entry["name"]] = np.frombuffer(
            payload[start:end], dtype="<f8").reshape(shape).copy()
    return arrays, header["meta"]


def save_state(state, path):
    """Serialise a ContinualState at a task boundary."""
    arrays = {}
    for name, p in state.model.params.items():
        arrays[f"model.{name}"] = p.data
    for pid, p in state.bank.all_params().items():
        arrays[pid] = p.data
    for t, emb in state.bank.prompts.items():
        arrays[f"prompt.{t}"] = emb.vector
    for t, mem in state.memories.items():
        arrays[f"memory.{t}.images"] = np.stack(
            [e.image for e in mem.entries])
        arrays[f"memory.{t}.masks"] = np.stack([e.mask for e in mem.entries])
        arrays[f"memory.{t}.difficulty"] = np.array(
            [e.difficulty for e in mem.entries])
    for fm in state.fishers:
        for pid, arr in fm.values.items():
            arrays[f"fisher.{fm.task_id}.{pid}"] = arr
    for an in state.anchors:
        for pid, arr in an.values.items():
            arrays[f"anchor.{an.task_id}.{pid}"] = arr
    arrays["results"] = state.results.to_array()

    adapters_meta = {
        aid: {"owner_tasks": list(ad.owner_tasks)}
        for aid, ad in state.bank.adapters.items()}
    meta = {
        "config": asdict(state.config),
        "specs": [asdict(s) for s in state.specs],
        "completed": state.completed,
        "pretrain_dice": state.pretrain_dice,
        "assignment": {str(t): aid
                       for t, aid in state.bank.assignment.items()},
        "adapters": adapters_meta,
        "tokens": {str(t): list(v) for t, v in state.tokens.items()},
        "memory": {str(t): {"indices": [e.index for e in mem.entries],
                            "fisher_avg": mem.fisher_avg,
                            "replay_weight": mem.replay_weight}
                   for t, mem in state.memories.items()},
        "fisher_tasks": [{"task_id": fm.task_id,
                          "sample_count": fm.sample_count,
                          "params": sorted(fm.values)}
                         for fm in state.fishers],
        "anchor_tasks": [{"task_id": an.task_id,
                          "params": sorted(an.values)}
                         for an in state.anchors],
        "decisions": [
            {"task_id": d.task_id, "kind": d.kind,
             "adapter_id": d.adapter_id, "similarity": d.similarity,
             "matched_task": d.matched_task,
             "similarities": {str(t): s for t, s in d.similarities.items()}}
            for d in state.decisions],
    }
    write_container(path, arrays, meta)


def load_state(path):
    """Rebuild a ContinualState ready for run_sequence to resume."""
    from .adapters import AllocationDecision

    arrays, meta = read_container(path)
    config = TrainConfig(**meta["config"])
    specs = []
    for raw in meta["specs"]:
        raw = dict(raw)
        raw["size_range"] = tuple(raw["size_range"])
        raw["counts"] = tuple(raw["counts"])
        specs.append(TaskSpec(**raw))

    model = BiModalSegmenter.build(seed=PRETRAIN_SEED, d_v=config.d_v,
                                   d_t=config.d_t)
    try:
        model.load_state_arrays(
            {n: arrays[f"model.{n}"] for n in model.params})
    except KeyError as exc:
        raise CheckpointError(f"missing model tensor: {exc}") from exc
    model.freeze_base()

    bank = AdapterBank(model.lora_targets, rank=config.rank,
                       alpha=config.lora_alpha)
    filler = np.random.default_rng(0)
    for aid in sorted(meta["adapters"], key=lambda a: int(a[1:])):
        adapter = LoraAdapter(aid, bank.target_shapes, bank.rank, bank.alpha,
                              filler)
        for name in adapter.a:
            try:
                adapter.a[name].data = arrays[f"adapter.{aid}.{name}.a"].copy()
                adapter.b[name].data = arrays[f"adapter.{aid}.{name}.b"].copy()
            except KeyError as exc:
                raise CheckpointError(
                    f"missing adapter tensor: {exc}") from exc
        adapter.owner_tasks = list(meta["adapters"][aid]["owner_tasks"])
        bank.adapters[aid] = adapter
    bank.assignment = {int(t): aid for t, aid in meta["assignment"].items()}
    bank.prompts = {int(t): PromptEmbedding(arrays[f"prompt.{t}"])
                    for t in meta["assignment"]}

    state = ContinualState(config, specs, model, bank, meta["pretrain_dice"])
    state.completed = int(meta["completed"])
    state.tokens = {int(t): list(v) for t, v in meta["tokens"].items()}
    state.results = ResultsMatrix.from_array(arrays["results"],
                                             [s.name for s in specs])

    for t_str, mm in meta["memory"].items():
        t = int(t_str)
        images = arrays[f"memory.{t}.images"]
        masks = arrays[f"memory.{t}.masks"]
        diffs = arrays[f"memory.{t}.difficulty"]
        entries = [BufferEntry(images[i], masks[i], t, diffs[i],
                               mm["indices"][i])
                   for i in range(images.shape[0])]
        mem = TaskMemory(t, entries)
        mem.fisher_avg = float(mm["fisher_avg"])
        mem.replay_weight = float(mm["replay_weight"])
        state.memories[t] = mem

    for fm in meta["fisher_tasks"]:
        values = {pid: arrays[f"fisher.{fm['task_id']}.{pid}"]
                  for pid in fm["params"]}
        state.fishers.append(FisherMap(task_id=fm["task_id"], values=values,
                                       sample_count=fm["sample_count"]))
    for an in meta["anchor_tasks"]:
        values = {pid: arrays[f"anchor.{an['task_id']}.{pid}"]
                  for pid in an["params"]}
        state.anchors.append(Anchor(task_id=an["task_id"], values=values))

    state.decisions = [
        AllocationDecision(
            task_id=d["task_id"], kind=d["kind"],
            adapter_id=d["adapter_id"], similarity=d["similarity"],
            matched_task=d["matched_task"],
            similarities={int(t): s
                          for t, s in d["similarities"].items()})
        for d in meta["decisions"]]
    return state
