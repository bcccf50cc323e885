"""Command-line driver: ``metahrl {train-meta,adapt,baseline,ablate,scale,report}``.

Exit codes: 0 success, 2 invalid configuration, 3 numeric failure,
4 missing or incompatible checkpoint.
"""

from __future__ import annotations

import argparse
import json
import sys
import time
from pathlib import Path

import numpy as np

from . import __version__
from .config import ExperimentConfig, table1_defaults
from .env import N_SLICES
from .errors import CheckpointError, ConfigError, DomainError, NumericError
from .hrl import SLICE_NAMES, HRLAgent
from .meta import MetaLog, meta_adapt, meta_train, run_baseline
from .metrics import empirical_cdf, jain_index, shots_to_converge, write_csv
from .nn import load_networks, save_networks

EXIT_OK, EXIT_CONFIG, EXIT_NUMERIC, EXIT_CHECKPOINT = 0, 2, 3, 4

ABLATION_VARIANTS = ("uniform_meta", "static_var", "adaptive_var")
PAPER_ABLATION = {
    "uniform_meta": {"normalized_reward": 0.78, "shots_to_converge": 28},
    "static_var": {"normalized_reward": 0.81, "shots_to_converge": 22},
    "adaptive_var": {"normalized_reward": 0.84, "shots_to_converge": 17},
}
PAPER_SCALE = {"baseline": [7, 30], "row": [15, 100], "iterations_change_pct": 32.0, "reward_change": -0.01}


def write_jsonl(path, rows) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w") as fh:
        for row in rows:
            fh.write(json.dumps(row, sort_keys=True, default=float) + "\n")
    return path


def write_manifest(out: Path, cfg: ExperimentConfig, command: str, extra: dict | None = None) -> Path:
    manifest = {
        "command": command,
        "version": __version__,
        "config_sha256": cfg.digest(),
        "config": cfg.to_dict(),
        "seeds": [int(s) for s in cfg.seeds],
        "table1_defaults": table1_defaults(),
    }
    manifest.update(extra or {})
    out.mkdir(parents=True, exist_ok=True)
    path = out / "manifest.json"
    path.write_text(json.dumps(manifest, indent=2, sort_keys=True, default=str) + "\n")
    return path


def write_meta_log(out: Path, log: MetaLog, seed: int) -> None:
    header = ("seed",) + MetaLog.HEADER
    write_csv(out / "train_log.csv", header, [(seed,) + row for row in log.table()])
    write_jsonl(out / "train_log.jsonl", [{"seed": seed, **r} for r in log.rows])


def check_checkpoint(nets: dict, cfg: ExperimentConfig, ue_count: int) -> None:
    expected = HRLAgent.create(ue_count, np.random.default_rng(0), cfg.meta_config().hrl).params()
    if set(nets) != set(expected):
        raise CheckpointError(f"checkpoint networks {sorted(nets)} differ from {sorted(expected)}")
    for name, p in expected.items():
        if not nets[name].same_shape(p):
            raise CheckpointError(f"network {name} has widths {nets[name].widths}, config expects {p.widths}")


# -- subcommands -----------------------------------------------------------


def cmd_train_meta(cfg: ExperimentConfig, out: Path) -> None:
    mc = cfg.meta_config()
    for seed in cfg.seeds:
        tasks, _ = cfg.tasks(seed)
        sdir = out / f"seed_{seed}"

        def checkpoint(t, meta, log, sdir=sdir):
            if cfg.checkpoint_every and (t + 1) % cfg.checkpoint_every == 0:
                sdir.mkdir(parents=True, exist_ok=True)
                save_networks(sdir / f"meta_{t + 1:05d}.ckpt", meta.params)

        meta, log = meta_train(tasks, mc, seed, on_iteration=checkpoint)
        sdir.mkdir(parents=True, exist_ok=True)
        save_networks(sdir / "meta.ckpt", meta.params)
        write_meta_log(sdir, log, seed)
    write_manifest(out, cfg, "train-meta")


def _slice_rows(seed, shots, res, extra=()):
    rows = []
    eps = res.final_episodes
    kn = np.mean([ep.kpis_norm.mean(axis=0) for ep in eps], axis=0)
    kr = np.mean([ep.kpis.mean(axis=0) for ep in eps], axis=0)
    for s in range(N_SLICES):
        rows.append((seed, shots, *extra, SLICE_NAMES[s], res.final_reward, kn[s], kr[s]))
    return rows


def _fairness(res) -> float:
    rates = np.concatenate([ep.rates.mean(axis=0) for ep in res.final_episodes])
    try:
        return jain_index(rates)
    except DomainError:
        return 0.0


def cmd_adapt(cfg: ExperimentConfig, out: Path, checkpoint: str | None) -> None:
    mc = cfg.meta_config()
    rows, cdf_rows, trace_rows = [], [], []
    for seed in cfg.seeds:
        _, held = cfg.tasks(seed)
        path = Path(checkpoint) if checkpoint else out / f"seed_{seed}" / "meta.ckpt"
        nets = load_networks(path)
        check_checkpoint(nets, cfg, held.ue_count)
        for shots in cfg.shots:
            res = meta_adapt(nets, held, int(shots), mc, seed)
            rows.extend(_slice_rows(seed, shots, res))
            trace_rows.extend((seed, shots, i + 1, r) for i, r in enumerate(res.trace))
            slice_of = res.final_episodes[0].slice_of
            rates = np.stack([ep.rates for ep in res.final_episodes])
            for s in range(N_SLICES):
                vals = rates[..., slice_of == s].ravel()
                if vals.size:
                    cdf_rows.extend((seed, shots, SLICE_NAMES[s], v, f) for v, f in empirical_cdf(vals))
    write_csv(out / "adapt.csv", ("seed", "shots", "slice", "reward", "kpi_normalized", "kpi_raw"), rows)
    write_csv(out / "adapt_trace.csv", ("seed", "shots", "shot", "reward"), trace_rows)
    write_csv(out / "adapt_rate_cdf.csv", ("seed", "shots", "slice", "value", "fraction"), cdf_rows)
    write_manifest(out, cfg, "adapt", {"checkpoint": str(checkpoint) if checkpoint else None})


def cmd_baseline(cfg: ExperimentConfig, out: Path, kind: str | None) -> None:
    kind = kind or cfg.algorithm
    mc = cfg.meta_config()
    shots = cfg.adapt_shots
    rows, trace_rows = [], []
    for seed in cfg.seeds:
        tasks, held = cfg.tasks(seed)
        res = run_baseline(kind, tasks, held, mc, shots, seed)
        rows.extend(_slice_rows(seed, shots, res.adapt, (kind,)))
        trace_rows.extend((seed, kind, i + 1, r) for i, r in enumerate(res.adapt.trace))
        if res.meta_log is not None:
            write_meta_log(out / f"seed_{seed}" / kind, res.meta_log, seed)
    write_csv(out / "baseline.csv", ("seed", "shots", "kind", "slice", "reward", "kpi_normalized", "kpi_raw"), rows)
    write_csv(out / "baseline_trace.csv", ("seed", "kind", "shot", "reward"), trace_rows)
    write_manifest(out, cfg, "baseline", {"kind": kind})


def run_ablation(cfg: ExperimentConfig, seed: int) -> list[dict]:
    """The three weighting variants on one seed; rewards normalized by the best variant of that seed."""
    mc = cfg.meta_config()
    tasks, held = cfg.tasks(seed)
    shots = cfg.adapt_shots
    out = []
    for variant in ABLATION_VARIANTS:
        res = run_baseline(variant, tasks, held, mc, shots, seed)
        out.append(
            {
                "seed": seed,
                "variant": variant,
                "reward": res.adapt.final_reward,
                "shots_to_converge": shots_to_converge(res.adapt.trace) if res.adapt.trace else 0,
                "jain": _fairness(res.adapt),
                "result": res,
            }
        )
    best = max(r["reward"] for r in out)
    for r in out:
        r["normalized_reward"] = r["reward"] / best if best > 0 else 0.0
    return out


def cmd_ablate(cfg: ExperimentConfig, out: Path) -> None:
    rows = []
    for seed in cfg.seeds:
        rows.extend(run_ablation(cfg, seed))
    header = ("seed", "variant", "reward", "normalized_reward", "shots_to_converge", "jain")
    write_csv(out / "ablation.csv", header, [tuple(r[h] for h in header) for r in rows])
    summary = {
        v: {
            "normalized_reward_mean": float(np.mean([r["normalized_reward"] for r in rows if r["variant"] == v])),
            "shots_to_converge_mean": float(np.mean([r["shots_to_converge"] for r in rows if r["variant"] == v])),
            "jain_mean": float(np.mean([r["jain"] for r in rows if r["variant"] == v])),
        }
        for v in ABLATION_VARIANTS
    }
    (out / "ablation_summary.json").write_text(
        json.dumps({"measured": summary, "paper_reference": PAPER_ABLATION}, indent=2, sort_keys=True) + "\n"
    )
    write_manifest(out, cfg, "ablate", {"paper_reference": PAPER_ABLATION})


def run_scale_point(cfg: ExperimentConfig, seed: int, n_du: int, n_ue: int) -> dict:
    """Meta-train with ``n_du`` tasks of ``n_ue // n_du`` UEs each; RBs per DU scale with UEs per DU."""
    base = cfg.base_task()
    ue_per_du = max(N_SLICES, n_ue // n_du)
    rb = max(1, round(base.rb_count * ue_per_du / base.ue_count))
    sub = cfg.with_overrides(n_tasks=n_du, scenario={**cfg.scenario, "ue_count": ue_per_du, "rb_count": rb})
    tasks, _ = sub.tasks(seed)
    stamps = []

    def tick(t, meta, log):
        stamps.append(time.perf_counter())

    start = time.perf_counter()
    meta, log = meta_train(tasks, sub.meta_config(), seed, on_iteration=tick)
    deltas = np.diff([start] + stamps)
    trace = log.mean_reward_per_iteration()
    tail = trace[-max(1, len(trace) // 10) :]
    return {
        "seed": seed,
        "n_du": n_du,
        "n_ue": n_ue,
        "ue_per_du": ue_per_du,
        "rb_per_du": rb,
        "iterations_to_converge": shots_to_converge(trace) if len(trace) else 0,
        "normalized_reward": float(np.mean(tail) / N_SLICES) if len(trace) else 0.0,
        "seconds_per_meta_update": float(np.mean(deltas)) if len(deltas) else 0.0,
    }


def cmd_scale(cfg: ExperimentConfig, out: Path) -> None:
    rows = []
    for seed in cfg.seeds:
        pts = [run_scale_point(cfg, seed, int(a), int(b)) for a, b in cfg.scale_points]
        base = pts[0]
        for p in pts:
            it0 = base["iterations_to_converge"]
            p["iterations_change_pct"] = 100.0 * (p["iterations_to_converge"] - it0) / it0 if it0 else 0.0
            p["reward_change"] = p["normalized_reward"] - base["normalized_reward"]
        rows.extend(pts)
    header = ("seed", "n_du", "n_ue", "ue_per_du", "rb_per_du", "iterations_to_converge", "iterations_change_pct", "normalized_reward", "reward_change")
    write_csv(out / "scale.csv", header, [tuple(r[h] for h in header) for r in rows])
    # wall-clock numbers vary run to run, so they stay out of the CSV
    write_jsonl(out / "scale_timing.jsonl", [{k: r[k] for k in ("seed", "n_du", "n_ue", "seconds_per_meta_update")} for r in rows])
    write_manifest(out, cfg, "scale", {"paper_reference": PAPER_SCALE})


def cmd_report(out: Path) -> dict:
    """Summarise whichever result CSVs exist under ``out`` into report.json and print it."""
    import csv

    report = {}
    for name in ("train_log", "adapt", "baseline", "ablation", "scale"):
        files = sorted(out.rglob(f"{name}.csv"))
        if not files:
            continue
        rows = []
        for f in files:
            with f.open() as fh:
                rows.extend(csv.DictReader(fh))
        entry = {"files": [str(f.relative_to(out)) for f in files], "rows": len(rows)}
        num = "reward" if rows and "reward" in rows[0] else "normalized_reward" if rows and "normalized_reward" in rows[0] else None
        if num:
            vals = np.array([float(r[num]) for r in rows])
            entry[f"{num}_mean"] = float(vals.mean())
        report[name] = entry
    if not report:
        raise ConfigError(f"no result files under {out}")
    (out / "report.json").write_text(json.dumps(report, indent=2, sort_keys=True) + "\n")
    print(json.dumps(report, indent=2, sort_keys=True))
    return report


# -- entry point -----------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="metahrl", description="Meta-trained hierarchical DDPG for O-RAN slicing experiments.")
    p.add_argument("--version", action="version", version=__version__)
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp):
        sp.add_argument("--config", help="YAML experiment config")
        sp.add_argument("--seed", type=int, help="run only this seed")
        sp.add_argument("--out", help="output directory (overrides out_dir)")
        sp.add_argument("--workers", type=int, help="parallel task workers (capped by METAHRL_MAX_WORKERS)")
        return sp

    common(sub.add_parser("train-meta", help="meta-train and write logs, checkpoints and a manifest"))
    ad = common(sub.add_parser("adapt", help="adapt a meta checkpoint to the held-out task at each shot count"))
    ad.add_argument("--checkpoint", help="checkpoint path (default OUT/seed_N/meta.ckpt)")
    bl = common(sub.add_parser("baseline", help="run one comparison scheme"))
    bl.add_argument("--kind", help="scratch, transfer, multitask, uniform_meta, static_var or adaptive_var")
    common(sub.add_parser("ablate", help="compare uniform, static and adaptive task weighting"))
    common(sub.add_parser("scale", help="sweep (N_DU, N_UE) points"))
    rp = sub.add_parser("report", help="summarise result files in a directory")
    rp.add_argument("--out", required=True)
    return p


def _load(args) -> tuple[ExperimentConfig, Path]:
    cfg = ExperimentConfig.load(args.config) if args.config else ExperimentConfig()
    over = {}
    if args.seed is not None:
        over["seeds"] = [args.seed]
    if args.workers is not None:
        over["workers"] = args.workers
    if args.out is not None:
        over["out_dir"] = args.out
    cfg = cfg.with_overrides(**over)
    return cfg, Path(cfg.out_dir)


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        if args.command == "report":
            cmd_report(Path(args.out))
            return EXIT_OK
        cfg, out = _load(args)
        if args.command == "train-meta":
            cmd_train_meta(cfg, out)
        elif args.command == "adapt":
            cmd_adapt(cfg, out, args.checkpoint)
        elif args.command == "baseline":
            cmd_baseline(cfg, out, args.kind)
        elif args.command == "ablate":
            cmd_ablate(cfg, out)
        elif args.command == "scale":
            cmd_scale(cfg, out)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except CheckpointError as exc:
        print(f"checkpoint error: {exc}", file=sys.stderr)
        return EXIT_CHECKPOINT
    except (NumericError, FloatingPointError) as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
