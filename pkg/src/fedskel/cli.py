"""Configuration-driven command line front end.

Subcommands: generate (data caches), train (one federated run), compare
(several strategies on the same seed and data), analyze (CKA, coefficient
drift, plot series from a finished run), eval (re-evaluate checkpoints).

Exit codes: 0 success, 2 config error, 3 runtime/NaN abort, 4 I/O error.
"""

from __future__ import annotations

import argparse
import csv
import json
import os
import sys
from pathlib import Path

import numpy as np

from . import checkpoint as ckpt
from .config import ExperimentConfig, config_from_dict, dump_resolved, load_config
from .data import generate, make_federation_suite, save_cache, load_cache
from .errors import ConfigError, FedskelError, TrainingAborted
from .federation import RoundReport, build_experiment, run_experiment
from .metrics import block_cka_report, knn_accuracy, linear_accuracy

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_RUNTIME = 3
EXIT_IO = 4

ENV_OUT = "FEDSKEL_OUT"


def _fmt(value: float) -> str:
    return f"{value:.8g}"


def _out_root(args, cfg: ExperimentConfig) -> Path:
    if args.out:
        return Path(args.out)
    if os.environ.get(ENV_OUT):
        return Path(os.environ[ENV_OUT])
    return Path(cfg.out_dir)


def _run_dir(args, cfg: ExperimentConfig) -> Path:
    stem = Path(args.config).stem
    return _out_root(args, cfg) / f"{stem}_{cfg.federation.strategy}_s{cfg.seed}"


def _apply_overrides(cfg: ExperimentConfig, args) -> ExperimentConfig:
    return cfg.with_overrides(
        seed=args.seed,
        strategy=args.strategy,
        rounds=args.rounds,
        jobs=args.jobs,
    )


# ---------------------------------------------------------------------------
# Subcommands
# ---------------------------------------------------------------------------

def cmd_generate(args, cfg: ExperimentConfig) -> int:
    data_dir = _out_root(args, cfg) / "data"
    specs = make_federation_suite(
        cfg.federation.n_clients,
        cfg.data.profile,
        cfg.seed,
        graph=cfg.skeleton_graph(),
        base_samples=cfg.data.base_samples,
        classes_per_client=cfg.data.classes_per_client,
        sigma=cfg.data.sigma,
        rewire_edges=cfg.data.rewire_edges,
        frames=cfg.data.frames,
        include_unseen=cfg.eval.unseen,
    )
    manifest = []
    for spec in specs:
        path = data_dir / f"client_{spec.client_id}.bin"
        save_cache(path, spec, generate(spec))
        manifest.append(
            {
                "client": spec.client_id,
                "file": path.name,
                "spec_hash": spec.spec_hash(),
                "total_samples": spec.total_samples,
            }
        )
    manifest_path = data_dir / "manifest.json"
    manifest_path.write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    print(f"wrote {len(specs)} client caches to {data_dir}")
    return EXIT_OK


class _MetricsWriter:
    """Crash-safe incremental CSV: every round is flushed as a complete block."""

    def __init__(self, path: Path):
        path.parent.mkdir(parents=True, exist_ok=True)
        self.fh = open(path, "w", newline="")
        self.writer = csv.writer(self.fh)
        self.writer.writerow(["round", "client", "protocol", "metric", "value"])
        self.fh.flush()

    def write_report(self, report: RoundReport) -> None:
        for cid, losses in report.client_losses.items():
            for name in ("ce", "kd", "reg", "total"):
                self.writer.writerow(
                    [report.round, cid, "train", f"loss_{name}", _fmt(losses[name])]
                )
        if report.client_accuracy is not None:
            for cid, acc in report.client_accuracy.items():
                self.writer.writerow([report.round, cid, "linear", "accuracy", _fmt(acc)])
        self.fh.flush()

    def write_row(self, row: list) -> None:
        self.writer.writerow(row)
        self.fh.flush()

    def close(self) -> None:
        self.fh.close()


def _train_once(cfg: ExperimentConfig, run_dir: Path) -> int:
    run_dir.mkdir(parents=True, exist_ok=True)
    dump_resolved(cfg, run_dir / "config.json")
    metrics = _MetricsWriter(run_dir / "metrics.csv")
    log = open(run_dir / "round_log.txt", "w")

    def on_report(report: RoundReport) -> None:
        metrics.write_report(report)
        mean_total = float(
            np.mean([l["total"] for l in report.client_losses.values()])
        )
        log.write(
            f"round {report.round}: mean_loss={mean_total:.6f} "
            f"wall={report.wall_time:.3f}s\n"
        )
        log.flush()

    try:
        result = run_experiment(cfg, on_report=on_report)
    except TrainingAborted as exc:
        log.write(f"aborted: {exc}\n")
        metrics.close()
        log.close()
        print(f"training aborted: {exc}", file=sys.stderr)
        return EXIT_RUNTIME

    if result.unseen is not None:
        metrics.write_row(
            [result.unseen.round, "unseen", "knn", "accuracy", _fmt(result.unseen.accuracy)]
        )
    metrics.close()
    log.close()

    with open(run_dir / "coeffs.csv", "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["round", "client", "block", "alpha", "beta", "gamma"])
        for row in result.coeff_log:
            writer.writerow([row[0], row[1], row[2], _fmt(row[3]), _fmt(row[4]), _fmt(row[5])])

    ckpt_dir = run_dir / "checkpoints"
    ckpt.save_checkpoint(ckpt_dir / "server.ckpt", result.server.params)
    for client, local in zip(result.clients, result.final_local_params):
        ckpt.save_checkpoint(ckpt_dir / f"client_{client.id}.ckpt", client.params)
        ckpt.save_checkpoint(ckpt_dir / f"client_{client.id}_local.ckpt", local)
    return EXIT_OK


def cmd_train(args, cfg: ExperimentConfig) -> int:
    run_dir = _run_dir(args, cfg)
    code = _train_once(cfg, run_dir)
    if code == EXIT_OK:
        print(f"run complete: {run_dir}")
    return code


def cmd_compare(args, cfg: ExperimentConfig) -> int:
    strategies = args.strategies
    if not strategies:
        raise ConfigError("compare: provide at least one strategy via --strategies")
    out_dir = _out_root(args, cfg) / f"compare_{Path(args.config).stem}_s{cfg.seed}"
    out_dir.mkdir(parents=True, exist_ok=True)

    columns = []  # (strategy, {client: final_acc}, {client: rolling_std})
    for idx, strategy in enumerate(strategies):
        scfg = cfg.with_overrides(strategy=strategy)
        result = run_experiment(scfg)
        eval_rounds = [r for r in result.reports if r.client_accuracy is not None]
        final = eval_rounds[-1].client_accuracy
        tail = eval_rounds[-max(1, len(eval_rounds) // 4):]
        stds = {
            cid: float(np.std([r.client_accuracy[cid] for r in tail]))
            for cid in final
        }
        columns.append((f"{strategy}#{idx}" if strategies.count(strategy) > 1 else strategy,
                        final, stds))

    clients = sorted(columns[0][1])
    base = columns[0][1]
    csv_path = out_dir / "compare.csv"
    with open(csv_path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["strategy", "client", "final_accuracy", "delta_vs_first", "rolling_std"])
        for name, final, stds in columns:
            for cid in clients:
                writer.writerow(
                    [name, cid, _fmt(final[cid]), _fmt(final[cid] - base[cid]), _fmt(stds[cid])]
                )

    lines = [f"{'client':>8} " + " ".join(f"{name:>18}" for name, _, _ in columns)]
    for cid in clients:
        cells = []
        for name, final, _ in columns:
            delta = final[cid] - base[cid]
            cells.append(f"{final[cid]:.4f} ({delta:+.4f})")
        lines.append(f"{cid:>8} " + " ".join(f"{c:>18}" for c in cells))
    mean_cells = []
    for name, final, _ in columns:
        mean = float(np.mean(list(final.values())))
        base_mean = float(np.mean(list(base.values())))
        mean_cells.append(f"{mean:.4f} ({mean - base_mean:+.4f})")
    lines.append(f"{'mean':>8} " + " ".join(f"{c:>18}" for c in mean_cells))
    table = "\n".join(lines) + "\n"
    (out_dir / "compare.txt").write_text(table)
    print(table, end="")
    print(f"comparison written to {out_dir}")
    return EXIT_OK


def _load_run(args, cfg: ExperimentConfig) -> tuple[Path, ExperimentConfig]:
    run_dir = _run_dir(args, cfg)
    resolved = run_dir / "config.json"
    if resolved.exists():
        cfg = config_from_dict(json.loads(resolved.read_text()))
    if not (run_dir / "checkpoints").exists():
        raise ConfigError(f"no checkpoints under {run_dir}; run 'train' first")
    return run_dir, cfg


def cmd_analyze(args, cfg: ExperimentConfig) -> int:
    run_dir, cfg = _load_run(args, cfg)
    exp = build_experiment(cfg)
    model_cfg, parts = exp.cfg, exp.parts

    local_params = [
        ckpt.load_checkpoint(run_dir / "checkpoints" / f"client_{c.id}_local.ckpt")
        for c in exp.clients
    ]
    # Shared probe pool: a fixed draw from the union of all clients' test sets.
    pool_x = np.concatenate([c.data.test_x for c in exp.clients])
    rng = np.random.default_rng(np.random.SeedSequence([cfg.seed, 205]))
    take = min(96, pool_x.shape[0])
    probe = pool_x[rng.choice(pool_x.shape[0], size=take, replace=False)]
    report = block_cka_report(local_params, model_cfg, parts, probe)
    for matrix in report:
        with open(run_dir / f"cka_block{matrix.block}.csv", "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["block", "client_i", "client_j", "cka"])
            n = matrix.values.shape[0]
            for i in range(n):
                for j in range(n):
                    writer.writerow([matrix.block, i, j, _fmt(matrix.values[i, j])])

    # Coefficient drift relative to the pre-training values (round = -1).
    coeff_rows = []
    coeffs_path = run_dir / "coeffs.csv"
    if coeffs_path.exists():
        with open(coeffs_path, newline="") as fh:
            coeff_rows = list(csv.DictReader(fh))
    if coeff_rows:
        initial, final = {}, {}
        for row in coeff_rows:
            key = (int(row["client"]), int(row["block"]))
            vals = (float(row["alpha"]), float(row["beta"]), float(row["gamma"]))
            if int(row["round"]) == -1:
                initial[key] = vals
            final[key] = vals
        with open(run_dir / "coeff_drift.csv", "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["client", "block", "d_alpha", "d_beta", "d_gamma"])
            for key in sorted(final):
                deltas = [f - i for f, i in zip(final[key], initial[key])]
                writer.writerow([key[0], key[1]] + [_fmt(d) for d in deltas])

    # Plot-ready accuracy series, one file per client.
    with open(run_dir / "metrics.csv", newline="") as fh:
        metric_rows = [
            r
            for r in csv.DictReader(fh)
            if r["protocol"] == "linear" and r["metric"] == "accuracy"
        ]
    by_client: dict[str, list[tuple[int, str]]] = {}
    for row in metric_rows:
        by_client.setdefault(row["client"], []).append((int(row["round"]), row["value"]))
    for cid, series in by_client.items():
        with open(run_dir / f"series_accuracy_client{cid}.csv", "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["round", "accuracy"])
            for rnd, value in sorted(series):
                writer.writerow([rnd, value])
    print(f"analysis written to {run_dir}")
    return EXIT_OK


def cmd_eval(args, cfg: ExperimentConfig) -> int:
    run_dir, cfg = _load_run(args, cfg)
    exp = build_experiment(cfg)
    server = ckpt.load_checkpoint(run_dir / "checkpoints" / "server.ckpt")
    rows = []
    for client in exp.clients:
        params = ckpt.load_checkpoint(run_dir / "checkpoints" / f"client_{client.id}.ckpt")
        result = linear_accuracy(
            server, params, exp.cfg, exp.parts,
            client.data.test_x, client.test_local_y, client=str(client.id),
            calibration_x=client.data.train_x,
        )
        rows.append(result)
    if exp.unseen_data is not None:
        rows.append(
            knn_accuracy(
                server, exp.cfg, exp.parts,
                exp.unseen_data.train_x, exp.unseen_data.train_y,
                exp.unseen_data.test_x, exp.unseen_data.test_y,
                k=exp.knn_k,
            )
        )
    with open(run_dir / "eval.csv", "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["client", "protocol", "accuracy"])
        for r in rows:
            writer.writerow([r.client, r.protocol, _fmt(r.accuracy)])
    for r in rows:
        print(f"{r.protocol:>7} client={r.client}: {r.accuracy:.4f}")
    return EXIT_OK


# ---------------------------------------------------------------------------
# Entry point
# ---------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="fedskel",
        description="Federated skeleton-action-recognition simulator",
    )
    sub = parser.add_subparsers(dest="command", required=True)
    for name, fn in (
        ("generate", cmd_generate),
        ("train", cmd_train),
        ("compare", cmd_compare),
        ("analyze", cmd_analyze),
        ("eval", cmd_eval),
    ):
        p = sub.add_parser(name)
        p.add_argument("--config", required=True, help="path to the TOML config")
        p.add_argument("--seed", type=int, default=None)
        p.add_argument("--strategy", default=None, choices=["fedavg", "fedprox", "fedbn", "fsar"])
        p.add_argument("--rounds", type=int, default=None)
        p.add_argument("--jobs", type=int, default=None)
        p.add_argument("--out", default=None, help="output root directory")
        if name == "compare":
            p.add_argument("--strategies", nargs="+", required=True)
        p.set_defaults(fn=fn)
    return parser


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        cfg = load_config(args.config)
        cfg = _apply_overrides(cfg, args)
        return args.fn(args, cfg)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except TrainingAborted as exc:
        print(f"training aborted: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    except OSError as exc:
        print(f"I/O error: {exc}", file=sys.stderr)
        return EXIT_IO
    except FedskelError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
