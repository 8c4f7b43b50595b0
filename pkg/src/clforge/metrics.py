"""Evaluation: Dice overlap, the stage-by-task results matrix, forgetting."""

import csv
import io
import json
import os

import numpy as np


def dice(pred, target):
    """Dice overlap of two binary masks; two empty masks count as 1.0."""
    pred = np.asarray(pred).astype(bool)
    target = np.asarray(target).astype(bool)
    if pred.shape != target.shape:
        raise ValueError(f"mask shapes differ: {pred.shape} vs {target.shape}")
    p = int(pred.sum())
    t = int(target.sum())
    if p == 0 and t == 0:
        return 1.0
    inter = int(np.logical_and(pred, target).sum())
    return 2.0 * inter / (p + t)


class ResultsMatrix:
    """Test Dice per task, recorded after each training stage.

    Entry (s, i) is the Dice of task i measured after task s finished
    training; only i <= s is defined. Stages and tasks are 0-based.
    """

    def __init__(self, n_tasks, task_names=None):
        if n_tasks < 1:
            raise ValueError("need at least one task")
        self.n_tasks = n_tasks
        self.task_names = list(task_names) if task_names else [
            f"task{i}" for i in range(n_tasks)]
        if len(self.task_names) != n_tasks:
            raise ValueError("task_names length mismatch")
        self.values = {}

    def record(self, stage, task, value):
        if not (0 <= task <= stage < self.n_tasks):
            raise ValueError(f"invalid cell ({stage}, {task})")
        if not (0.0 <= value <= 1.0):
            raise ValueError(f"dice {value} outside [0, 1]")
        self.values[(stage, task)] = float(value)

    def get(self, stage, task):
        return self.values[(stage, task)]

    @property
    def completed_stages(self):
        by_stage = {}
        for (s, i) in self.values:
            by_stage.setdefault(s, set()).add(i)
        done = [s for s, tasks in by_stage.items()
                if tasks == set(range(s + 1))]
        return max(done) + 1 if done else 0

    def avg_dice(self, stage=None):
        """Mean Dice over tasks seen so far, at the given (default last) stage."""
        if stage is None:
            stage = self.completed_stages - 1
        if stage < 0:
            raise ValueError("no completed stage")
        return float(np.mean([self.get(stage, i) for i in range(stage + 1)]))

    def forgetting(self):
        """Per-task forgetting rate in percent, its average, and warnings.

        For each task except the last: 100 * (peak - final) / peak, where
        peak is the best Dice the task ever reached at or after its own
        stage and final is its Dice after the last stage. Tasks whose peak
        is zero are excluded with a warning.
        """
        last = self.completed_stages - 1
        if last < 1:
            raise ValueError("forgetting needs at least two completed stages")
        per_task = {}
        warnings = []
        for i in range(last):
            peak = max(self.get(s, i) for s in range(i, last + 1))
            final = self.get(last, i)
            if peak <= 0.0:
                warnings.append(
                    f"task {self.task_names[i]} never exceeded Dice 0; "
                    "excluded from forgetting")
                continue
            per_task[self.task_names[i]] = 100.0 * (peak - final) / peak
        avg = float(np.mean(list(per_task.values()))) if per_task else 0.0
        return per_task, avg, warnings

    def to_array(self):
        arr = np.full((self.n_tasks, self.n_tasks), np.nan)
        for (s, i), v in self.values.items():
            arr[s, i] = v
        return arr

    @classmethod
    def from_array(cls, arr, task_names=None):
        arr = np.asarray(arr)
        m = cls(arr.shape[0], task_names)
        for s in range(arr.shape[0]):
            for i in range(s + 1):
                if not np.isnan(arr[s, i]):
                    m.values[(s, i)] = float(arr[s, i])
        return m


def matrix_to_csv(matrix):
    buf = io.StringIO()
    w = csv.writer(buf)
    w.writerow(["stage", "task", "dice"])
    for (s, i) in sorted(matrix.values):
        w.writerow([s, i, repr(matrix.values[(s, i)])])
    return buf.getvalue()


def matrix_from_csv(text, task_names=None):
    rows = list(csv.reader(io.StringIO(text)))
    if not rows or rows[0] != ["stage", "task", "dice"]:
        raise ValueError("metrics CSV header must be stage,task,dice")
    cells = [(int(s), int(i), float(d)) for s, i, d in rows[1:]]
    if not cells:
        raise ValueError("metrics CSV has no data rows")
    n = max(s for s, _, _ in cells) + 1
    m = ResultsMatrix(n, task_names)
    for s, i, d in cells:
        m.values[(s, i)] = d
    return m


def build_summary(matrix, extras=None):
    """Summary dict for a completed experiment; raises if nothing finished."""
    if matrix.completed_stages == 0:
        raise ValueError("refusing to report an empty experiment")
    summary = {"version": 1,
               "task_names": matrix.task_names,
               "avg_dice": matrix.avg_dice()}
    if matrix.completed_stages >= 2:
        per_task, avg, warnings = matrix.forgetting()
        summary["per_task_forgetting"] = per_task
        summary["avg_forgetting"] = avg
        if warnings:
            summary["forgetting_warnings"] = warnings
    if extras:
        summary.update(extras)
    return summary


def emit_report(matrix, out_dir, extras=None):
    """Write metrics.csv and summary.json; returns the summary dict.

    The summary is built before anything is written, so a crashed run never
    leaves partial report files behind.
    """
    summary = build_summary(matrix, extras)
    csv_text = matrix_to_csv(matrix)
    os.makedirs(out_dir, exist_ok=True)
    with open(os.path.join(out_dir, "metrics.csv"), "w") as f:
        f.write(csv_text)
    with open(os.path.join(out_dir, "summary.json"), "w") as f:
        json.dump(summary, f, indent=2, sort_keys=True)
        f.write("\n")
    return summary
