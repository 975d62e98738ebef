"""Command-line entry point.

Commands: gen-data, train, verify, gradcheck, ablate, export-features.
Exit codes: 0 success, 1 runtime/verification failure, 2 usage/config error.
Every artifact-producing command writes a run manifest (config, git describe,
seed, status) even when it fails, with the failing stage recorded.
"""

from __future__ import annotations

import argparse
import csv
import json
import statistics
import subprocess
import sys
from pathlib import Path

import numpy as np

from . import theory
from .data import Dataset
from .model import forward_batch, load_checkpoint
from .pseudo_labels import load_table
from .trainer import (
    ConfigError,
    StageError,
    TrainConfig,
    apply_overrides,
    build_dataset,
    intra_class_spread,
    load_config,
    run_pipeline,
    stage1_supervised,
    stage2_joint,
)

EXIT_OK = 0
EXIT_FAILURE = 1
EXIT_USAGE = 2

ALPHA_SWEEP = (0.1, 0.2, 0.3, 0.4, 0.5)
BETA_SWEEP = (0.01, 0.02, 0.03, 0.04, 0.05)

STRATEGY_CELLS = {
    # rounds are taken from the config for every cell except single_round
    "single_round": {"rounds": 1, "repredict": False, "decay": False},
    "repeat": {"repredict": False, "decay": False},
    "repeat_repredict": {"repredict": True, "decay": False},
    "repeat_decay": {"repredict": False, "decay": True},
    "full_schedule": {"repredict": True, "decay": True},
}


def _git_describe() -> str | None:
    try:
        out = subprocess.run(
            ["git", "describe", "--always", "--dirty"],
            capture_output=True,
            text=True,
            timeout=10,
        )
    except (OSError, subprocess.TimeoutExpired):
        return None
    return out.stdout.strip() if out.returncode == 0 else None


def _write_manifest(out_dir: Path, cfg: TrainConfig, command: str, status: str,
                    failure_stage: str | None) -> None:
    out_dir.mkdir(parents=True, exist_ok=True)
    doc = {
        "command": command,
        "config": cfg.to_dict(),
        "git_describe": _git_describe(),
        "seed": cfg.seed,
        "status": status,
        "failure_stage": failure_stage,
    }
    (out_dir / "manifest.json").write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n")


def _load_cfg(args) -> TrainConfig:
    cfg = load_config(args.config)
    if args.override:
        cfg = apply_overrides(cfg, args.override)
    return cfg


def cmd_gen_data(args) -> int:
    cfg = _load_cfg(args)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    split, test = build_dataset(cfg.data, cfg.seed)
    split.base.to_csv(out / "train.csv")
    test.to_csv(out / "test.csv")
    print(f"wrote {split.base.n_examples} train / {test.n_examples} test rows to {out}")
    return EXIT_OK


def cmd_train(args) -> int:
    cfg = _load_cfg(args)
    out = Path(args.out)
    try:
        run_pipeline(cfg, out_dir=out)
    except StageError as exc:
        _write_manifest(out, cfg, "train", "failed", exc.stage)
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_FAILURE
    _write_manifest(out, cfg, "train", "ok", None)
    print(f"run complete; artifacts in {out}")
    return EXIT_OK


def cmd_verify(args) -> int:
    cfg = _load_cfg(args)
    out = Path(args.out)
    ckpt = out / "checkpoint_stage2.json"
    table_path = out / "pseudo_table.json"
    if not ckpt.exists() or not table_path.exists():
        print(
            f"error: missing artifacts in {out} "
            f"(need checkpoint_stage2.json and pseudo_table.json)",
            file=sys.stderr,
        )
        return EXIT_USAGE
    params = load_checkpoint(ckpt)
    table = load_table(table_path)
    split, _ = build_dataset(cfg.data, cfg.seed)
    doc = theory.run_verification(params, table, split, cfg.loss, seed=cfg.seed)
    (out / "verification.json").write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n")
    for name, entry in doc.items():
        if isinstance(entry, dict):
            mark = "PASS" if entry["pass"] else "FAIL"
            tag = "" if entry.get("asserted", True) else " (informational)"
            print(f"{mark} {name}{tag}")
    return EXIT_OK if doc["all_pass"] else EXIT_FAILURE


def cmd_gradcheck(args) -> int:
    cfg = _load_cfg(args)
    worst = theory.finite_diff_suite(cfg.seed, args.trials)
    tol = {path: (1e-5 if path == "params:deep" else 1e-6) for path in worst}
    ok = all(worst[p] < tol[p] for p in worst)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    (out / "gradcheck.json").write_text(
        json.dumps(
            {"worst_rel_err": worst, "tolerance": tol, "pass": ok},
            indent=2,
            sort_keys=True,
        )
        + "\n"
    )
    for path in sorted(worst):
        mark = "PASS" if worst[path] < tol[path] else "FAIL"
        print(f"{mark} {path}: worst rel err {worst[path]:.3e} (tol {tol[path]:.0e})")
    return EXIT_OK if ok else EXIT_FAILURE


def _cell_configs(cfg: TrainConfig, grid: str) -> list[tuple[str, TrainConfig]]:
    cells = []
    if grid == "strategy":
        for name, opts in STRATEGY_CELLS.items():
            cell = cfg.copy()
            if "rounds" in opts:
                cell.stage2.rounds = opts["rounds"]
            cell.stage2.repredict_between_rounds = opts["repredict"]
            cell.stage2.decay_between_rounds = opts["decay"]
            cells.append((name, cell))
    elif grid == "alpha":
        for a in ALPHA_SWEEP:
            cell = cfg.copy()
            cell.loss.alpha = a
            cells.append((f"alpha={a}", cell))
    elif grid == "beta":
        for b in BETA_SWEEP:
            cell = cfg.copy()
            cell.loss.beta = b
            cells.append((f"beta={b}", cell))
    elif grid == "lc":
        for variant in ("kl_pred_pseudo", "kl_pseudo_pred", "l2"):
            cell = cfg.copy()
            cell.loss.variant = variant
            cells.append((variant, cell))
    else:
        raise ConfigError(f"unknown grid {grid!r}")
    return cells


def run_ablation(cfg: TrainConfig, grid: str, n_seeds: int) -> list[dict]:
    """Run every grid cell over ``n_seeds`` derived seeds; one summary row per cell."""
    rows = []
    for name, cell in _cell_configs(cfg, grid):
        test_errors = []
        pseudo_errors = []
        for k in range(n_seeds):
            run_cfg = cell.copy()
            run_cfg.seed = cfg.seed + k
            result = run_pipeline(run_cfg)
            test_errors.append(1.0 - result.report.rows[-1].test_acc)
            s2 = result.report.stage_rows(2)
            pseudo_errors.append(1.0 - s2[-1].unlabeled_pseudo_acc if s2 else float("nan"))
        rows.append(
            {
                "grid": grid,
                "cell": name,
                "n_seeds": n_seeds,
                "median_test_error": statistics.median(test_errors),
                "mean_test_error": statistics.fmean(test_errors),
                "min_test_error": min(test_errors),
                "max_test_error": max(test_errors),
                "median_pseudo_error": statistics.median(pseudo_errors),
            }
        )
    return rows


def cmd_ablate(args) -> int:
    cfg = _load_cfg(args)
    out = Path(args.out)
    try:
        rows = run_ablation(cfg, args.grid, args.seeds)
    except StageError as exc:
        _write_manifest(out, cfg, "ablate", "failed", exc.stage)
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_FAILURE
    out.mkdir(parents=True, exist_ok=True)
    with (out / "ablation.csv").open("w", newline="") as f:
        writer = csv.DictWriter(f, fieldnames=list(rows[0].keys()))
        writer.writeheader()
        for row in rows:
            writer.writerow(
                {k: (repr(v) if isinstance(v, float) else v) for k, v in row.items()}
            )
    _write_manifest(out, cfg, "ablate", "ok", None)
    for row in rows:
        print(
            f"{row['cell']}: median test error {row['median_test_error']:.4f} "
            f"over {row['n_seeds']} seeds"
        )
    return EXIT_OK


def _export_features_csv(params, ds: Dataset, labeled_mask: np.ndarray, path: Path) -> None:
    feats = forward_batch(params, ds.features).features
    with path.open("w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(["x", "y", "label", "is_labeled"])
        for row, lab, is_lab in zip(feats, ds.labels, labeled_mask):
            writer.writerow([repr(float(row[0])), repr(float(row[1])), int(lab), int(is_lab)])


def cmd_export_features(args) -> int:
    cfg = _load_cfg(args)
    if not cfg.arch.hidden_dims or cfg.arch.hidden_dims[-1] != 2:
        print(
            "error: export-features needs a 2-D penultimate layer "
            f"(hidden_dims={list(cfg.arch.hidden_dims)})",
            file=sys.stderr,
        )
        return EXIT_USAGE
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    try:
        split, test = build_dataset(cfg.data, cfg.seed)
        labeled_mask = np.zeros(split.base.n_examples, dtype=bool)
        labeled_mask[split.labeled_idx] = True
        params = stage1_supervised(cfg, split, test)
        _export_features_csv(params, split.base, labeled_mask, out / "features_before.csv")
        before = {
            "labeled": intra_class_spread(
                forward_batch(params, split.base.features[split.labeled_idx]).features,
                split.base.labels[split.labeled_idx],
                split.base.num_classes,
            ),
            "unlabeled": intra_class_spread(
                forward_batch(params, split.base.features[split.unlabeled_idx]).features,
                split.base.labels[split.unlabeled_idx],
                split.base.num_classes,
            ),
        }
        params, _ = stage2_joint(cfg, params, split, test)
        _export_features_csv(params, split.base, labeled_mask, out / "features_after.csv")
        after = {
            "labeled": intra_class_spread(
                forward_batch(params, split.base.features[split.labeled_idx]).features,
                split.base.labels[split.labeled_idx],
                split.base.num_classes,
            ),
            "unlabeled": intra_class_spread(
                forward_batch(params, split.base.features[split.unlabeled_idx]).features,
                split.base.labels[split.unlabeled_idx],
                split.base.num_classes,
            ),
        }
    except StageError as exc:
        _write_manifest(out, cfg, "export-features", "failed", exc.stage)
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_FAILURE
    summary = {
        "spread_before": before,
        "spread_after": after,
        "compaction_ratio": {
            k: after[k] / before[k] for k in before
        },
    }
    (out / "export_summary.json").write_text(json.dumps(summary, indent=2, sort_keys=True) + "\n")
    _write_manifest(out, cfg, "export-features", "ok", None)
    for k in ("labeled", "unlabeled"):
        print(f"{k} compaction ratio (after/before): {summary['compaction_ratio'][k]:.4f}")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="pseudograd",
        description="Train and verify pseudo-label-as-logits semi-supervised models.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    def add_common(p):
        p.add_argument("--config", required=True, help="JSON config path")
        p.add_argument("--out", required=True, help="output directory")
        p.add_argument(
            "--override",
            action="append",
            default=[],
            metavar="K=V",
            help="config override, e.g. loss.alpha=0.2 (repeatable)",
        )

    add_common(sub.add_parser("gen-data", help="materialize the configured dataset as CSV"))
    add_common(sub.add_parser("train", help="run the full three-stage pipeline"))
    add_common(sub.add_parser("verify", help="run theory checks against saved artifacts"))
    p = sub.add_parser("gradcheck", help="finite-difference gradient verification")
    add_common(p)
    p.add_argument("--trials", type=int, default=100, help="instances per gradient path")
    p = sub.add_parser("ablate", help="run a comparison grid")
    add_common(p)
    p.add_argument("--seeds", type=int, default=5, help="seeds per grid cell")
    p.add_argument(
        "--grid",
        choices=["strategy", "alpha", "beta", "lc"],
        default="strategy",
        help="which grid to sweep",
    )
    add_common(sub.add_parser("export-features", help="dump 2-D features before/after joint training"))
    return parser


COMMANDS = {
    "gen-data": cmd_gen_data,
    "train": cmd_train,
    "verify": cmd_verify,
    "gradcheck": cmd_gradcheck,
    "ablate": cmd_ablate,
    "export-features": cmd_export_features,
}


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return COMMANDS[args.command](args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except StageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_FAILURE


if __name__ == "__main__":
    sys.exit(main())
