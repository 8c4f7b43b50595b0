"""Command-line front end: run experiments, ablate, sweep the routing
threshold, export datasets, regenerate reports, self-test.

Every output is deterministic in (config, seed): no timestamps, sorted JSON
keys, repr-round-tripped floats. Exit codes: 0 ok, 2 configuration error,
3 training divergence, 4 self-test failure.
"""

import argparse
import csv
import io
import json
import os
import sys
from dataclasses import asdict, dataclass, fields

import numpy as np

from .checkpoint import CheckpointError, save_state
from .metrics import build_summary, emit_report, matrix_from_csv
from .taskgen import export_dataset, load_suite
from .trainer import (MODES, DivergenceError, RunLog, TrainConfig,
                      mode_flags, run_sequence)

TAU_GRID = (0.3, 0.5, 0.75, 0.9)


class ConfigError(ValueError):
    """Invalid experiment configuration; message names the field."""


@dataclass
class ExperimentConfig:
    """JSON-facing experiment description; one TrainConfig per seed."""

    suite: str
    mode: str
    seeds: tuple
    out_dir: str
    tau: float = 0.75
    lr: float = 8e-4
    weight_decay: float = 8e-5
    batch_size: int = 16
    max_epochs: int = 30
    patience: int = 5
    r_replay: float = 0.4
    lambda_ewc: float = 500.0
    r_memory: float = 0.15
    rank: int = 8
    lora_alpha: float = 16.0
    boost_alpha: float = 0.5
    d_v: int = 32
    d_t: int = 32
    pretrain_steps: int = 2000

    def __post_init__(self):
        mode_flags(self.mode)  # raises on unknown mode
        seeds = tuple(self.seeds)
        if not seeds:
            raise ConfigError("field 'seeds' must list at least one seed")
        if any(not isinstance(s, int) or isinstance(s, bool) for s in seeds):
            raise ConfigError("field 'seeds' must contain integers")
        self.seeds = seeds
        self.train_config(seeds[0])  # validates all numeric ranges

    def train_config(self, seed):
        try:
            return TrainConfig(
                mode=self.mode, lr=self.lr, weight_decay=self.weight_decay,
                batch_size=self.batch_size, max_epochs=self.max_epochs,
                patience=self.patience, replay_ratio=self.r_replay,
                lambda_ewc=self.lambda_ewc, memory_ratio=self.r_memory,
                tau=self.tau, rank=self.rank, lora_alpha=self.lora_alpha,
                boost_alpha=self.boost_alpha, seed=seed, d_v=self.d_v,
                d_t=self.d_t, pretrain_steps=self.pretrain_steps)
        except ValueError as exc:
            raise ConfigError(str(exc)) from exc


_REQUIRED = ("suite", "mode", "seeds", "out_dir")


def load_config(path, overrides=None):
    """Parse and validate a JSON experiment config.

    Precedence: file < CLFORGE_OUT env var < command-line overrides.
    """
    try:
        with open(path) as f:
            raw = json.load(f)
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    except ValueError as exc:
        raise ConfigError(f"config {path} is not valid JSON: {exc}") from exc
    if not isinstance(raw, dict):
        raise ConfigError("config must be a JSON object")
    known = {f.name for f in fields(ExperimentConfig)}
    unknown = sorted(set(raw) - known)
    if unknown:
        raise ConfigError(f"unknown config field(s): {', '.join(unknown)}")
    missing = [k for k in _REQUIRED if k not in raw]
    if missing:
        raise ConfigError(f"missing required field(s): {', '.join(missing)}")
    if "CLFORGE_OUT" in os.environ:
        raw["out_dir"] = os.environ["CLFORGE_OUT"]
    for key, value in (overrides or {}).items():
        if value is not None:
            raw[key] = value
    try:
        return ExperimentConfig(**raw)
    except ConfigError:
        raise
    except (TypeError, ValueError) as exc:
        raise ConfigError(str(exc)) from exc


def _parse_seeds(text):
    try:
        return [int(s) for s in text.split(",") if s.strip()]
    except ValueError as exc:
        raise ConfigError(f"--seeds expects comma-separated integers: "
                          f"{text!r}") from exc


# -- per-seed output writers -------------------------------------------------

def _write_training_log(log, path):
    with open(path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["task_id", "task", "epoch", "train_loss", "val_dice",
                    "improved"])
        for row in log.epochs:
            w.writerow([row["task_id"], row["task"], row["epoch"],
                        repr(row["train_loss"]), repr(row["val_dice"]),
                        int(row["improved"])])


def _write_jsonl(rows, path):
    with open(path, "w") as f:
        for row in rows:
            f.write(json.dumps(row, sort_keys=True) + "\n")


def run_one_seed(exp, seed, out_dir, checkpoint=False):
    """Full continual run for one seed; writes the per-seed artefacts."""
    specs = load_suite(exp.suite)
    cfg = exp.train_config(seed)
    log = RunLog()
    os.makedirs(out_dir, exist_ok=True)
    after = None
    if checkpoint:
        ckpt_path = os.path.join(out_dir, "checkpoint.bin")
        after = lambda state, task_id: save_state(state, ckpt_path)
    state = run_sequence(cfg, specs, log=log, after_task=after)

    fractions = [row["trainable_fraction"] for row in log.allocations]
    extras = {
        "suite": exp.suite, "mode": exp.mode, "seed": seed, "tau": exp.tau,
        "pretrain_dice": state.pretrain_dice,
        "n_adapters": len(state.bank.adapters),
        "n_new": sum(1 for d in state.decisions if d.kind == "new"),
        "n_reuse": sum(1 for d in state.decisions if d.kind == "reuse"),
        "trainable_fraction_max": max(fractions),
    }
    summary = emit_report(state.results, out_dir, extras)
    _write_training_log(log, os.path.join(out_dir, "training_log.csv"))
    _write_jsonl(log.allocations, os.path.join(out_dir, "allocations.jsonl"))
    _write_jsonl(log.consolidations,
                 os.path.join(out_dir, "consolidation.jsonl"))
    meta = {
        "config": asdict(exp),
        "seed": seed,
        "task_names": [s.name for s in specs],
        "prompts": [s.prompt for s in specs],
        "summary_extras": extras,
        "assignment": {str(t): aid
                       for t, aid in state.bank.assignment.items()},
    }
    with open(os.path.join(out_dir, "run_meta.json"), "w") as f:
        json.dump(meta, f, indent=2, sort_keys=True)
        f.write("\n")
    return state, summary


def _aggregate(per_seed):
    """Mean and population stddev of Dice and forgetting across seeds."""
    dices = [s["avg_dice"] for s in per_seed.values()]
    out = {"per_seed": per_seed,
           "avg_dice_mean": float(np.mean(dices)),
           "avg_dice_std": float(np.std(dices))}
    frs = [s["avg_forgetting"] for s in per_seed.values()
           if "avg_forgetting" in s]
    if frs:
        out["avg_forgetting_mean"] = float(np.mean(frs))
        out["avg_forgetting_std"] = float(np.std(frs))
    return out


def _run_all_seeds(exp, out_dir, checkpoint=False):
    per_seed = {}
    for seed in exp.seeds:
        _, summary = run_one_seed(exp, seed, os.path.join(out_dir,
                                                          f"seed{seed}"),
                                  checkpoint=checkpoint)
        per_seed[str(seed)] = {
            k: summary[k] for k in
            ("avg_dice", "avg_forgetting", "n_adapters", "n_new", "n_reuse",
             "trainable_fraction_max") if k in summary}
    return _aggregate(per_seed)


# -- subcommands -------------------------------------------------------------

def cmd_run(args):
    exp = load_config(args.config, _flag_overrides(args))
    agg = _run_all_seeds(exp, exp.out_dir, checkpoint=args.checkpoint)
    agg.update({"suite": exp.suite, "mode": exp.mode, "tau": exp.tau,
                "seeds": list(exp.seeds)})
    os.makedirs(exp.out_dir, exist_ok=True)
    with open(os.path.join(exp.out_dir, "aggregate.json"), "w") as f:
        json.dump(agg, f, indent=2, sort_keys=True)
        f.write("\n")
    fr = agg.get("avg_forgetting_mean")
    print(f"suite={exp.suite} mode={exp.mode} seeds={list(exp.seeds)}")
    print(f"avg dice {agg['avg_dice_mean']:.4f} "
          f"+- {agg['avg_dice_std']:.4f}" +
          (f"   avg forgetting {fr:.3f}% +- {agg['avg_forgetting_std']:.3f}"
           if fr is not None else ""))
    return 0


def cmd_ablate(args):
    exp = load_config(args.config, _flag_overrides(args))
    ladder = []
    for mode in MODES:
        mode_exp = ExperimentConfig(**{**asdict(exp), "mode": mode})
        agg = _run_all_seeds(mode_exp, os.path.join(exp.out_dir, mode))
        ladder.append({"mode": mode,
                       "avg_dice": agg["avg_dice_mean"],
                       "avg_fr": agg.get("avg_forgetting_mean")})
    base = ladder[0]
    for row in ladder:
        row["delta_dice"] = row["avg_dice"] - base["avg_dice"]
        row["delta_fr"] = (row["avg_fr"] - base["avg_fr"]
                           if row["avg_fr"] is not None
                           and base["avg_fr"] is not None else None)
    out = {"suite": exp.suite, "seeds": list(exp.seeds), "tau": exp.tau,
           "ladder": ladder}
    os.makedirs(exp.out_dir, exist_ok=True)
    with open(os.path.join(exp.out_dir, "ablation.json"), "w") as f:
        json.dump(out, f, indent=2, sort_keys=True)
        f.write("\n")
    print(f"{'mode':<14}{'avg_dice':>10}{'d_dice':>9}"
          f"{'avg_fr%':>10}{'d_fr':>9}")
    for row in ladder:
        fr = "-" if row["avg_fr"] is None else f"{row['avg_fr']:.3f}"
        dfr = "-" if row["delta_fr"] is None else f"{row['delta_fr']:+.3f}"
        print(f"{row['mode']:<14}{row['avg_dice']:>10.4f}"
              f"{row['delta_dice']:>+9.4f}{fr:>10}{dfr:>9}")
    return 0


def cmd_sweep_tau(args):
    exp = load_config(args.config, _flag_overrides(args))
    taus = args.grid if args.grid else list(TAU_GRID)
    for tau in taus:
        if not (0.0 < tau < 1.0):
            raise ConfigError(f"sweep tau {tau} outside (0, 1)")
    rows = []
    for tau in taus:
        tau_exp = ExperimentConfig(**{**asdict(exp), "tau": tau})
        agg = _run_all_seeds(tau_exp,
                             os.path.join(exp.out_dir, f"tau_{tau}"))
        seed0 = agg["per_seed"][str(exp.seeds[0])]
        n_tasks = seed0["n_new"] + seed0["n_reuse"]
        rows.append({"tau": tau,
                     "n_adapters": seed0["n_adapters"],
                     "new_fraction": seed0["n_new"] / n_tasks,
                     "reuse_fraction": seed0["n_reuse"] / n_tasks,
                     "avg_dice": agg["avg_dice_mean"],
                     "avg_fr": agg.get("avg_forgetting_mean")})
    out = {"suite": exp.suite, "mode": exp.mode, "seeds": list(exp.seeds),
           "rows": rows}
    os.makedirs(exp.out_dir, exist_ok=True)
    with open(os.path.join(exp.out_dir, "tau_sweep.json"), "w") as f:
        json.dump(out, f, indent=2, sort_keys=True)
        f.write("\n")
    print(f"{'tau':>6}{'adapters':>10}{'new%':>8}{'reuse%':>8}"
          f"{'avg_dice':>10}{'avg_fr%':>10}")
    for r in rows:
        fr = "-" if r["avg_fr"] is None else f"{r['avg_fr']:.3f}"
        print(f"{r['tau']:>6}{r['n_adapters']:>10}"
              f"{100 * r['new_fraction']:>8.0f}"
              f"{100 * r['reuse_fraction']:>8.0f}"
              f"{r['avg_dice']:>10.4f}{fr:>10}")
    return 0


def cmd_gen_tasks(args):
    specs = load_suite(args.suite)
    manifest = export_dataset(specs, args.out)
    total = sum(s["count"] for t in manifest["tasks"]
                for s in t["splits"].values())
    print(f"wrote {len(manifest['tasks'])} tasks, {total} samples, "
          f"manifest.json to {args.out}")
    return 0


def cmd_report(args):
    run_dir = args.run
    try:
        with open(os.path.join(run_dir, "metrics.csv")) as f:
            csv_text = f.read()
        with open(os.path.join(run_dir, "run_meta.json")) as f:
            meta = json.load(f)
    except OSError as exc:
        raise ConfigError(f"not a finished run directory: {exc}") from exc
    matrix = matrix_from_csv(csv_text, meta.get("task_names"))
    summary = build_summary(matrix, meta.get("summary_extras"))
    rendered = json.dumps(summary, indent=2, sort_keys=True) + "\n"
    stored_path = os.path.join(run_dir, "summary.json")
    print(rendered, end="")
    if os.path.exists(stored_path):
        with open(stored_path) as f:
            stored = f.read()
        if stored != rendered:
            print("report mismatch: stored summary.json differs from the "
                  "one recomputed from metrics.csv", file=sys.stderr)
            return 2
    if args.write:
        with open(stored_path, "w") as f:
            f.write(rendered)
    return 0


def cmd_selftest(args):
    failures = _selftest_checks(verbose=not args.quiet)
    if failures:
        for name, msg in failures:
            print(f"FAIL {name}: {msg}", file=sys.stderr)
        return 4
    print("selftest: all checks passed")
    return 0


def _selftest_checks(verbose=True):
    """Fast oracle suite over the closed-form pieces; no training involved."""
    from .adapters import LoraAdapter
    from .consolidation import (Anchor, FisherMap, difficulty_weight,
                                ewc_penalty)
    from .memory import (TaskMemory, BufferEntry, average_fisher,
                         build_buffer, replay_weight, sample_replay)
    from .metrics import ResultsMatrix, dice
    from .tensorcore import Tensor, finite_diff_check

    failures = []

    def check(name, fn):
        try:
            fn()
            if verbose:
                print(f"ok   {name}")
        except Exception as exc:  # noqa: BLE001 - report, do not crash
            failures.append((name, str(exc)))

    def c_autodiff():
        rng = np.random.default_rng(5)
        w1 = Tensor(rng.normal(size=(6, 8)), requires_grad=True)
        w2 = Tensor(rng.normal(size=(8, 3)), requires_grad=True)
        x = rng.normal(size=(4, 6))
        y = rng.uniform(size=(4, 3))

        def loss():
            p = ((Tensor(x) @ w1).relu() @ w2).sigmoid()
            return ((p - Tensor(y)).square()).sum()

        err = finite_diff_check(loss, {"w1": w1, "w2": w2}, h=1e-5)
        assert err < 1e-4, f"gradient check error {err:.3e}"

    def c_adapter():
        rng = np.random.default_rng(0)
        ad = LoraAdapter("a0", {"w": (6, 4)}, rank=2, alpha=16.0, rng=rng)
        base = Tensor(rng.normal(size=(6, 4)))
        eff = ad.apply({"w": base})["w"]
        assert np.array_equal(eff.data, base.data), "zero-init not identity"
        ad.b["w"].data = rng.normal(size=(4, 2))
        manual = (16.0 / 2) * (ad.b["w"].data @ ad.a["w"].data).T
        got = ad.delta("w").data
        assert np.max(np.abs(got - manual)) < 1e-12, "scaling mismatch"

    def c_replay_weight():
        assert abs(replay_weight(3, 5, 1.0, 0.5) - 0.75) < 1e-12
        assert abs(replay_weight(3, 5, 0.5, 0.5) - 0.625) < 1e-12
        assert abs(replay_weight(4, 5, 0.0, 0.5) - 1.0) < 1e-12

    def c_average_fisher():
        fm = FisherMap(0, {"a": np.array([1.0, 3.0]),
                           "b": np.array([[2.0, 6.0]])}, 1)
        assert abs(average_fisher(fm) - 3.0) < 1e-12

    def c_difficulty_weight():
        assert difficulty_weight(0.5, 1.0) == 1.5
        assert difficulty_weight(0.0, 2.0) == 1.0
        assert difficulty_weight(2.0, 2.0) == 2.0
        assert difficulty_weight(0.0, 0.0) == 1.0

    def c_dice_fr():
        p = np.zeros(8, dtype=bool)
        g = np.zeros(8, dtype=bool)
        p[:2] = True
        g[1:3] = True
        assert abs(dice(p, g) - 0.5) < 1e-12
        m = ResultsMatrix(2)
        m.record(0, 0, 0.8)
        m.record(1, 0, 0.72)
        m.record(1, 1, 0.9)
        per, avg, _ = m.forgetting()
        assert abs(per["task0"] - 10.0) < 1e-12 and abs(avg - 10.0) < 1e-12

    def c_ewc():
        live = {"w": Tensor(np.array([1.0, 2.0]), requires_grad=True)}
        anchor = Anchor(0, {"w": np.array([1.0, 2.0])})
        fisher = FisherMap(0, {"w": np.array([3.0, 4.0])}, 1)
        assert ewc_penalty(live, [anchor], [fisher]).item() == 0.0
        live2 = {"w": Tensor(np.array([2.0, 0.0]), requires_grad=True)}
        v = ewc_penalty(live2, [anchor], [fisher]).item()
        assert abs(v - (3.0 * 1.0 + 4.0 * 4.0)) < 1e-12

    def c_buffer():
        class S:
            def __init__(self, v):
                self.image = np.full((2, 2), v)
                self.mask = np.zeros((2, 2))
        scores = [0.3, 0.9, 0.9, 0.1, 0.5]
        mem = build_buffer([S(i) for i in range(5)], scores, 0, 0.5)
        assert [e.index for e in mem.entries] == [1, 2]

    def c_sampler():
        rng = np.random.default_rng(9)
        mems = {}
        for t, w in ((0, 0.25), (1, 0.75)):
            e = BufferEntry(np.zeros((2, 2)), np.zeros((2, 2)), t, 0.0, 0)
            m = TaskMemory(t, [e])
            m.replay_weight = w
            mems[t] = m
        draws = sample_replay(mems, 20000, rng, uniform_within=True)
        frac = sum(1 for e in draws if e.task_id == 1) / len(draws)
        assert abs(frac - 0.75) < 0.03, f"sampler fraction {frac:.3f}"

    check("autodiff-gradients", c_autodiff)
    check("adapter-identity-scaling", c_adapter)
    check("replay-weight-formula", c_replay_weight)
    check("average-fisher-flat-mean", c_average_fisher)
    check("difficulty-weight-bounds", c_difficulty_weight)
    check("dice-and-forgetting-cases", c_dice_fr)
    check("anchoring-penalty", c_ewc)
    check("buffer-hardest-selection", c_buffer)
    check("replay-sampler-distribution", c_sampler)
    return failures


# -- argument plumbing -------------------------------------------------------

def _flag_overrides(args):
    out = {}
    if getattr(args, "mode", None):
        out["mode"] = args.mode
    if getattr(args, "tau", None) is not None:
        out["tau"] = args.tau
    if getattr(args, "seeds", None):
        out["seeds"] = _parse_seeds(args.seeds)
    if getattr(args, "out", None):
        out["out_dir"] = args.out
    return out


def _add_config_flags(p):
    p.add_argument("-c", "--config", required=True,
                   help="experiment config JSON")
    p.add_argument("--mode", help="override the training mode")
    p.add_argument("--tau", type=float,
                   help="override the reuse threshold")
    p.add_argument("--seeds", help="override seeds, comma-separated")
    p.add_argument("--out", help="override the output directory")


def build_parser():
    p = argparse.ArgumentParser(
        prog="clforge",
        description="Continual segmentation with prompt-routed low-rank "
                    "adapters and Fisher-coupled replay.")
    sub = p.add_subparsers(dest="command", required=True)

    pr = sub.add_parser("run", help="run one experiment across seeds")
    _add_config_flags(pr)
    pr.add_argument("--checkpoint", action="store_true",
                    help="write a checkpoint at every task boundary")
    pr.set_defaults(fn=cmd_run)

    pa = sub.add_parser("ablate", help="run the five-mode ladder")
    _add_config_flags(pa)
    pa.set_defaults(fn=cmd_ablate)

    ps = sub.add_parser("sweep-tau", help="sweep the reuse threshold")
    _add_config_flags(ps)
    ps.add_argument("--grid", type=lambda s: [float(x)
                                              for x in s.split(",")],
                    help="comma-separated tau values "
                         f"(default {','.join(str(t) for t in TAU_GRID)})")
    ps.set_defaults(fn=cmd_sweep_tau)

    pg = sub.add_parser("gen-tasks", help="export a suite's datasets")
    pg.add_argument("--suite", required=True,
                    help="suite name or spec JSON path")
    pg.add_argument("--out", required=True, help="output directory")
    pg.set_defaults(fn=cmd_gen_tasks)

    pp = sub.add_parser("report",
                        help="recompute a run's summary from metrics.csv")
    pp.add_argument("--run", required=True, help="finished per-seed run dir")
    pp.add_argument("--write", action="store_true",
                    help="rewrite summary.json from the recomputation")
    pp.set_defaults(fn=cmd_report)

    pt = sub.add_parser("selftest", help="run the fast oracle checks")
    pt.add_argument("--quiet", action="store_true")
    pt.set_defaults(fn=cmd_selftest)
    return p


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.fn(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    except CheckpointError as exc:
        print(f"checkpoint error: {exc}", file=sys.stderr)
        return 2
    except DivergenceError as exc:
        print(f"divergence: {exc}", file=sys.stderr)
        return 3


if __name__ == "__main__":
    sys.exit(main())
