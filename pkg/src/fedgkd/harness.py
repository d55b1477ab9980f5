"""Experiment harness: build data, run the federation loop, write artifacts,
and run the built-in verification suites."""
from __future__ import annotations

import csv
import json
import time
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import data as data_mod
from . import diagnostics, federation, losses, nn, seeding
from .config import ExperimentConfig
from .data import Dataset, PartitionSpec
from .federation import ClientDivergenceError, RoundRecord, RunContext


class ExperimentFailure(RuntimeError):
    """A round failed; artifacts on disk carry the structured error."""


def build_datasets(cfg: ExperimentConfig) -> tuple[Dataset, Dataset]:
    """(train, test) datasets per the config's dataset section."""
    if cfg.dataset.kind == "toy":
        pool = data_mod.gen_toy_dataset(
            cfg.dataset.n_train + cfg.dataset.n_test,
            seeding.derive_seed(cfg.fed.master_seed, seeding.DATA),
        )
        train = pool.subset(np.arange(cfg.dataset.n_train))
        test = pool.subset(np.arange(cfg.dataset.n_train, pool.n))
        return train, test
    train = data_mod.load_csv_dataset(cfg.dataset.path, cfg.dataset.num_classes)
    test = data_mod.load_csv_dataset(cfg.dataset.test_path, cfg.dataset.num_classes)
    if train.input_dim != cfg.model.input_dim:
        raise ValueError(
            f"csv has {train.input_dim} feature columns but model input width is {cfg.model.input_dim}"
        )
    return train, test


def build_context(cfg: ExperimentConfig) -> RunContext:
    train, test = build_datasets(cfg)
    shards = data_mod.make_client_shards(train, cfg.partition)
    return RunContext(
        cfg=cfg.fed,
        spec=cfg.model,
        shards=shards,
        test_set=test,
        workers=cfg.workers,
        diagnostics=cfg.diagnostics,
        probe_c=cfg.probe_c,
    )


@dataclass
class RunArtifacts:
    output_dir: Path
    summary: dict
    records: list[RoundRecord]


def run_experiment(cfg: ExperimentConfig) -> RunArtifacts:
    """Run the configured experiment, writing metrics.jsonl, timings.jsonl,
    partition_audit.json, config_resolved.json, summary.json and a final
    checkpoint into the output directory. Raises ExperimentFailure (after
    recording a structured error) if any round fails."""
    out = Path(cfg.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    (out / "config_resolved.json").write_text(json.dumps(cfg.resolved_dict(), indent=2) + "\n", encoding="utf-8")

    ctx = build_context(cfg)
    audit = {
        "alpha": cfg.partition.alpha,
        "num_clients": cfg.partition.num_clients,
        "seed": cfg.partition.seed,
        "clients": data_mod.partition_audit(ctx.shards, cfg.dataset.num_classes),
    }
    (out / "partition_audit.json").write_text(json.dumps(audit, indent=2) + "\n", encoding="utf-8")

    records: list[RoundRecord] = []
    started = time.perf_counter()
    state = federation.init_server_state(ctx)
    with open(out / "metrics.jsonl", "w", encoding="utf-8") as metrics_f, open(
        out / "timings.jsonl", "w", encoding="utf-8"
    ) as timings_f:
        for _ in range(cfg.fed.rounds):
            try:
                state, record = federation.run_round(state, ctx)
            except ClientDivergenceError as exc:
                failure = {"round": exc.round_index, "failed": True, "client_id": exc.client_id, "error": str(exc)}
                metrics_f.write(json.dumps(failure) + "\n")
                summary = {"failed": True, "error": str(exc), "rounds_completed": len(records)}
                (out / "summary.json").write_text(json.dumps(summary, indent=2) + "\n", encoding="utf-8")
                raise ExperimentFailure(str(exc)) from exc
            records.append(record)
            metrics_f.write(json.dumps(record.metrics_dict()) + "\n")
            timings_f.write(json.dumps({"round": record.round, "wall_time_s": record.wall_time_s}) + "\n")

    nn.save_checkpoint(out / "checkpoint.fgkd", cfg.model, state.params)
    summary = summarize_records(records)
    summary.update(
        {
            "strategy": cfg.fed.strategy,
            "seed": cfg.fed.master_seed,
            "total_wall_time_s": time.perf_counter() - started,
        }
    )
    (out / "summary.json").write_text(json.dumps(summary, indent=2) + "\n", encoding="utf-8")
    return RunArtifacts(output_dir=out, summary=summary, records=records)


def summarize_records(records: list[RoundRecord]) -> dict:
    accs = [r.test_accuracy for r in records]
    best = int(np.argmax(accs))
    return {
        "rounds": len(records),
        "best_accuracy": records[best].test_accuracy,
        "best_round": records[best].round,
        "final_accuracy": records[-1].test_accuracy,
        "final_round": records[-1].round,
    }


def read_metrics(path) -> list[dict]:
    rows = []
    with open(path, "r", encoding="utf-8") as f:
        for line in f:
            line = line.strip()
            if line:
                rows.append(json.loads(line))
    return rows


def summarize(directory) -> dict:
    """Summarize one run directory (metrics.jsonl inside) or a directory of runs.

    Writes curves.csv (round, accuracy column per run) beside the metrics and
    returns the summary mapping."""
    root = Path(directory)
    if (root / "metrics.jsonl").exists():
        run_dirs = {root.name or "run": root}
    else:
        run_dirs = {p.name: p for p in sorted(root.iterdir()) if (p / "metrics.jsonl").exists()}
    if not run_dirs:
        raise FileNotFoundError(f"no metrics.jsonl under {root}")

    summaries = {}
    curves: dict[str, dict[int, float]] = {}
    for name, run in run_dirs.items():
        rows = [r for r in read_metrics(run / "metrics.jsonl") if not r.get("failed")]
        if not rows:
            summaries[name] = {"failed": True}
            continue
        accs = [r["test_accuracy"] for r in rows]
        best = int(np.argmax(accs))
        summaries[name] = {
            "rounds": len(rows),
            "best_accuracy": rows[best]["test_accuracy"],
            "best_round": rows[best]["round"],
            "final_accuracy": rows[-1]["test_accuracy"],
            "final_round": rows[-1]["round"],
        }
        curves[name] = {r["round"]: r["test_accuracy"] for r in rows}

    all_rounds = sorted({t for c in curves.values() for t in c})
    csv_path = root / "curves.csv"
    with open(csv_path, "w", newline="", encoding="utf-8") as f:
        writer = csv.writer(f)
        writer.writerow(["round"] + list(curves))
        for t in all_rounds:
            writer.writerow([t] + [curves[name].get(t, "") for name in curves])
    return {"runs": summaries, "curves_csv": str(csv_path)}


# ---------------------------------------------------------------------------
# built-in verification suites


@dataclass
class CheckResult:
    suite: str
    name: str
    passed: bool
    detail: str = ""


VERIFY_SUITES = ("gradients", "kl", "reductions", "partition")


def _verify_gradients() -> list[CheckResult]:
    out = []
    spec = nn.MlpSpec((3, 6, 4))
    for kind in diagnostics.FD_LOSS_KINDS:
        report = diagnostics.finite_diff_check(spec, kind, seed=7, n_points=20)
        ok = report.max_rel_error < 1e-4
        detail = f"max rel err {report.max_rel_error:.2e}"
        if not ok:
            detail += f" at {report.worst_layer}"
        out.append(CheckResult("gradients", f"finite-difference {kind}", ok, detail))
    return out


def _verify_kl() -> list[CheckResult]:
    import math

    rng = np.random.default_rng(11)
    worst = 0.0
    for _ in range(1000):
        c = int(rng.integers(2, 8))
        p = rng.dirichlet(np.ones(c))
        q = rng.dirichlet(np.ones(c))
        got = losses.kl_div(p, q)
        want = sum(pi * math.log(max(pi, losses.EPS) / max(qi, losses.EPS)) for pi, qi in zip(p, q) if pi > 0)
        worst = max(worst, abs(got - want))
    results = [CheckResult("kl", "closed-form agreement (1000 pairs)", worst < 1e-10, f"max abs diff {worst:.2e}")]
    p = np.random.default_rng(3).dirichlet(np.ones(5))
    results.append(CheckResult("kl", "identity KL(p||p) == 0", losses.kl_div(p, p) == 0.0))
    return results


def _toy_config(strategy: str, **overrides) -> ExperimentConfig:
    from .config import build_config

    raw = {
        "strategy": strategy,
        "seed": 5,
        "dataset": {"kind": "toy", "n_train": 240, "n_test": 120},
        "model": {"layer_widths": [2, 8, 8, 4]},
        "partition": {"alpha": 0.5, "num_clients": 3, "val_fraction": 0.1},
        "federation": {"rounds": 3, "local_epochs": 2, "batch_size": 32, "participation": 1.0, "buffer_size": 5},
        "output_dir": "unused",
    }
    for key, value in overrides.items():
        section, _, leaf = key.partition(".")
        if leaf:
            raw.setdefault(section, {})[leaf] = value
        else:
            raw[section] = value
    return build_config(raw)


def _run_in_memory(cfg: ExperimentConfig):
    ctx = build_context(cfg)
    state, records = federation.run_federation(ctx)
    return state.params, [(r.test_accuracy, r.test_loss, r.mean_train_loss) for r in records]


def _verify_reductions() -> list[CheckResult]:
    out = []
    base_params, base_metrics = _run_in_memory(_toy_config("fedavg"))

    gkd0_params, gkd0_metrics = _run_in_memory(_toy_config("fedgkd", **{"distill.gamma": 0.0}))
    ok = bool(np.array_equal(gkd0_params, base_params)) and gkd0_metrics == base_metrics
    out.append(CheckResult("reductions", "fedgkd(gamma=0) == fedavg", ok))

    prox0_params, prox0_metrics = _run_in_memory(_toy_config("fedprox", **{"prox.mu": 0.0}))
    ok = bool(np.array_equal(prox0_params, base_params)) and prox0_metrics == base_metrics
    out.append(CheckResult("reductions", "fedprox(mu=0) == fedavg", ok))

    gkd1_params, gkd1_metrics = _run_in_memory(_toy_config("fedgkd", **{"federation.buffer_size": 1}))
    vote1_params, vote1_metrics = _run_in_memory(_toy_config("fedgkd_vote", **{"federation.buffer_size": 1}))
    ok = bool(np.array_equal(vote1_params, gkd1_params)) and vote1_metrics == gkd1_metrics
    out.append(CheckResult("reductions", "fedgkd_vote(M=1) == fedgkd(M=1)", ok))
    return out


def _verify_partition() -> list[CheckResult]:
    out = []
    rng = np.random.default_rng(23)
    cover_ok = True
    detail = ""
    for trial in range(12):
        n = int(rng.integers(40, 400))
        c = int(rng.integers(2, 6))
        ds = Dataset(rng.standard_normal((n, 2)), rng.integers(0, c, n), c)
        spec = PartitionSpec(
            alpha=float(rng.choice([0.05, 0.1, 1.0, 10.0])),
            num_clients=int(rng.integers(1, min(12, n) + 1)),
            seed=int(rng.integers(0, 2**31)),
        )
        index_lists = data_mod.dirichlet_partition_indices(ds, spec)
        pooled = np.sort(np.concatenate(index_lists))
        if not np.array_equal(pooled, np.arange(n)) or any(idx.size == 0 for idx in index_lists):
            cover_ok = False
            detail = f"trial {trial}: cover broken"
            break
    out.append(CheckResult("partition", "disjoint cover (12 random partitions)", cover_ok, detail))

    tv_low, tv_high = [], []
    for s in range(8):
        ds = data_mod.gen_toy_dataset(400, seed=100 + s)
        for alpha, sink in ((0.1, tv_high), (10.0, tv_low)):
            shards = data_mod.dirichlet_partition(ds, PartitionSpec(alpha=alpha, num_clients=8, seed=s))
            sink.append(data_mod.max_client_tv_distance(shards, 4))
    mono = float(np.mean(tv_high)) > float(np.mean(tv_low))
    out.append(
        CheckResult(
            "partition",
            "heterogeneity monotone in alpha",
            mono,
            f"mean max-TV alpha=0.1: {np.mean(tv_high):.3f} vs alpha=10: {np.mean(tv_low):.3f}",
        )
    )
    return out


def verify(suites: list[str] | None = None) -> list[CheckResult]:
    """Run the built-in verification suites; returns per-check results."""
    selected = list(VERIFY_SUITES) if not suites else suites
    unknown = [s for s in selected if s not in VERIFY_SUITES]
    if unknown:
        raise ValueError(f"unknown verify suite(s) {unknown}; choose from {VERIFY_SUITES}")
    runners = {
        "gradients": _verify_gradients,
        "kl": _verify_kl,
        "reductions": _verify_reductions,
        "partition": _verify_partition,
    }
    results = []
    for suite in selected:
        results.extend(runners[suite]())
    return results
