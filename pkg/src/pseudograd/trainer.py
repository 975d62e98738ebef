"""Three-stage training pipeline with the reprediction/decay schedule.

Stage 1 trains the backbone on labeled examples only (cross entropy).
Stage 2 jointly optimizes network weights and unlabeled pseudo-logits under
L = alpha*Lc + beta*Le, in rounds: (re)predict pseudo-logits, train for a
fixed number of epochs, then decay the network learning rate. Stage 3
finetunes on all examples with hard targets taken from the final pseudo
table.

Derived RNG streams (all from the one run seed): 0 dataset generation,
1 split sampling, 2 parameter init, 10/11/12 per-stage batch shuffling.
Synthetic test sets use seed+1 so the train set matches the bare generator
call for the same seed.
"""

from __future__ import annotations

import csv
import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import theory
from .data import Dataset, SplitDataset, gen_gaussian_blobs, gen_two_moons, load_idx, split_per_class
from .loss import (
    LossConfig,
    grad_wrt_logits_rows,
    grad_wrt_pseudo_logits_rows,
    loss_terms_rows,
)
from .model import (
    Architecture,
    ModelParams,
    backward,
    forward_batch,
    init_params,
)
from .numerics import InvalidInputError, RandomStream, clamped_log, entropy_rows, softmax_rows
from .optimizer import decay_lr, init_opt_state, pseudo_step, sgd_nesterov_step
from .pseudo_labels import (
    DEFAULT_INIT_K,
    PseudoTable,
    hard_labels,
    init_pseudo,
    pseudo_probs_rows,
    repredict,
)

MOMENTUM = 0.9

# Report sentinel for "not applicable in this stage" (rows must stay finite).
NA = -1.0


class ConfigError(ValueError):
    """A configuration document is malformed or inconsistent."""


class StageError(RuntimeError):
    """A pipeline stage failed; carries the stage name for error reporting."""

    def __init__(self, stage: str, original: BaseException):
        super().__init__(f"{stage} failed: {original}")
        self.stage = stage
        self.original = original


# ---------------------------------------------------------------------------
# Configuration


@dataclass
class DataSpec:
    kind: str = "blobs"  # blobs | moons | idx
    n_classes: int = 3
    n_per_class: int = 200
    dim: int = 2
    spread: float = 0.5
    noise: float = 0.1
    images: str | None = None
    labels: str | None = None
    test_images: str | None = None
    test_labels: str | None = None
    take_first: int | None = None
    holdout: int = 0
    labeled_per_class: int = 4
    test_n_per_class: int = 200
    standardize: bool = False
    data_seed: int | None = None
    split_seed: int | None = None

    def __post_init__(self):
        if self.kind not in ("blobs", "moons", "idx"):
            raise ConfigError(f"data.kind must be blobs|moons|idx, got {self.kind!r}")
        if self.kind == "idx" and (not self.images or not self.labels):
            raise ConfigError("data.kind 'idx' requires images and labels paths")


@dataclass
class ArchSpec:
    hidden_dims: tuple[int, ...] = (32, 16)
    activation: str = "relu"
    head_bias: bool = False

    def __post_init__(self):
        self.hidden_dims = tuple(int(h) for h in self.hidden_dims)


@dataclass
class StageOneConfig:
    epochs: int = 60
    lr: float = 0.1
    wd: float = 0.0
    batch: int = 32


@dataclass
class StageTwoConfig:
    epochs_per_round: int | None = None  # defaults to reprediction_period
    rounds: int = 3
    lr0: float = 0.05
    lr_decay_factor: float = 0.1
    reprediction_period: int = 75
    batch: int = 128
    labeled_fraction_per_batch: float = 0.5
    wd: float = 0.0
    repredict_between_rounds: bool = True
    decay_between_rounds: bool = True
    pseudo_init_k: float = DEFAULT_INIT_K

    def __post_init__(self):
        if self.rounds < 1:
            raise ConfigError("stage2.rounds must be >= 1")
        if self.reprediction_period < 1:
            raise ConfigError("stage2.reprediction_period must be >= 1")
        if not 0.0 <= self.labeled_fraction_per_batch <= 1.0:
            raise ConfigError("stage2.labeled_fraction_per_batch must be in [0, 1]")

    @property
    def epochs(self) -> int:
        return (
            self.reprediction_period
            if self.epochs_per_round is None
            else self.epochs_per_round
        )


@dataclass
class StageThreeConfig:
    epochs: int = 40
    lr: float = 0.01
    wd: float = 0.0
    batch: int = 64


@dataclass
class TrainConfig:
    data: DataSpec = field(default_factory=DataSpec)
    arch: ArchSpec = field(default_factory=ArchSpec)
    loss: LossConfig = field(default_factory=LossConfig)
    stage1: StageOneConfig = field(default_factory=StageOneConfig)
    stage2: StageTwoConfig = field(default_factory=StageTwoConfig)
    stage3: StageThreeConfig = field(default_factory=StageThreeConfig)
    seed: int = 0

    def to_dict(self) -> dict:
        doc = {
            "data": asdict(self.data),
            "arch": {
                "hidden_dims": list(self.arch.hidden_dims),
                "activation": self.arch.activation,
                "head_bias": self.arch.head_bias,
            },
            "loss": {
                "alpha": self.loss.alpha,
                "beta": self.loss.beta,
                "lambda": self.loss.lam,
                "variant": self.loss.variant,
            },
            "stage1": asdict(self.stage1),
            "stage2": asdict(self.stage2),
            "stage3": asdict(self.stage3),
            "seed": self.seed,
        }
        return doc

    def copy(self) -> "TrainConfig":
        return config_from_dict(self.to_dict())


def _build_section(cls, doc: dict, section: str, rename: dict | None = None):
    if not isinstance(doc, dict):
        raise ConfigError(f"{section} must be an object")
    rename = rename or {}
    known = {f.name for f in cls.__dataclass_fields__.values() if f.init} | set(rename)
    kwargs = {}
    for key, value in doc.items():
        if key not in known:
            raise ConfigError(f"unknown key {section}.{key}")
        kwargs[rename.get(key, key)] = value
    try:
        return cls(**kwargs)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"invalid {section} section: {exc}") from exc


def config_from_dict(doc: dict) -> TrainConfig:
    if not isinstance(doc, dict):
        raise ConfigError("config root must be an object")
    known = {"data", "arch", "loss", "stage1", "stage2", "stage3", "seed"}
    unknown = set(doc) - known
    if unknown:
        raise ConfigError(f"unknown top-level keys: {sorted(unknown)}")
    cfg = TrainConfig(
        data=_build_section(DataSpec, doc.get("data", {}), "data"),
        arch=_build_section(ArchSpec, doc.get("arch", {}), "arch"),
        loss=_build_section(
            LossConfig, doc.get("loss", {}), "loss", rename={"lambda": "lam"}
        ),
        stage1=_build_section(StageOneConfig, doc.get("stage1", {}), "stage1"),
        stage2=_build_section(StageTwoConfig, doc.get("stage2", {}), "stage2"),
        stage3=_build_section(StageThreeConfig, doc.get("stage3", {}), "stage3"),
        seed=int(doc.get("seed", 0)),
    )
    return cfg


def load_config(path) -> TrainConfig:
    path = Path(path)
    if not path.exists():
        raise ConfigError(f"config file not found: {path}")
    try:
        doc = json.loads(path.read_text())
    except json.JSONDecodeError as exc:
        raise ConfigError(
            f"{path}: invalid JSON at line {exc.lineno}, column {exc.colno}: {exc.msg}"
        ) from exc
    return config_from_dict(doc)


def apply_overrides(cfg: TrainConfig, overrides: list[str]) -> TrainConfig:
    """Apply `section.key=value` overrides; values are coerced to the type of
    the value they replace."""
    doc = cfg.to_dict()
    for item in overrides:
        if "=" not in item:
            raise ConfigError(f"override {item!r} is not of the form key=value")
        path, raw = item.split("=", 1)
        keys = path.split(".")
        node = doc
        for k in keys[:-1]:
            if not isinstance(node, dict) or k not in node:
                raise ConfigError(f"override references unknown key {path!r}")
            node = node[k]
        leaf = keys[-1]
        if not isinstance(node, dict) or leaf not in node:
            raise ConfigError(f"override references unknown key {path!r}")
        node[leaf] = _coerce_like(node[leaf], raw, path)
    return config_from_dict(doc)


def _coerce_like(current, raw: str, path: str):
    if isinstance(current, bool):
        if raw.lower() in ("true", "1"):
            return True
        if raw.lower() in ("false", "0"):
            return False
        raise ConfigError(f"override {path}: expected boolean, got {raw!r}")
    if isinstance(current, int) and not isinstance(current, bool):
        try:
            return int(raw)
        except ValueError as exc:
            raise ConfigError(f"override {path}: expected integer, got {raw!r}") from exc
    if isinstance(current, float):
        try:
            return float(raw)
        except ValueError as exc:
            raise ConfigError(f"override {path}: expected number, got {raw!r}") from exc
    if isinstance(current, list):
        try:
            return json.loads(raw)
        except json.JSONDecodeError as exc:
            raise ConfigError(f"override {path}: expected JSON list, got {raw!r}") from exc
    if current is None:
        # untyped optional: try int, then float, then string
        for cast in (int, float):
            try:
                return cast(raw)
            except ValueError:
                pass
        return raw
    return raw


# ---------------------------------------------------------------------------
# Report


REPORT_COLUMNS = [
    "stage",
    "epoch",
    "lr",
    "loss_total",
    "loss_lc",
    "loss_le",
    "labeled_acc",
    "unlabeled_pseudo_acc",
    "test_acc",
    "mean_entropy_pred",
    "mean_entropy_pseudo",
    "max_sum_drift",
    "link_residual_p50",
    "link_residual_p90",
    "link_residual_p99",
]


@dataclass
class ReportRow:
    stage: int
    epoch: int
    lr: float
    loss_total: float
    loss_lc: float
    loss_le: float
    labeled_acc: float
    unlabeled_pseudo_acc: float
    test_acc: float
    mean_entropy_pred: float
    mean_entropy_pseudo: float
    max_sum_drift: float
    link_residual_p50: float
    link_residual_p90: float
    link_residual_p99: float


class Report:
    """Per-epoch metric rows; -1.0 marks fields not applicable to a stage."""

    def __init__(self):
        self.rows: list[ReportRow] = []

    def add(self, row: ReportRow) -> None:
        for name, value in asdict(row).items():
            if isinstance(value, float) and not math.isfinite(value):
                raise InvalidInputError(f"report field {name} is not finite")
        if self.rows:
            last = self.rows[-1]
            if (row.stage, row.epoch) <= (last.stage, last.epoch):
                raise InvalidInputError("report rows must be monotone in (stage, epoch)")
        self.rows.append(row)

    def to_csv(self, path) -> None:
        with Path(path).open("w", newline="") as f:
            writer = csv.writer(f)
            writer.writerow(REPORT_COLUMNS)
            for row in self.rows:
                d = asdict(row)
                writer.writerow(
                    [
                        d[c] if c in ("stage", "epoch") else repr(float(d[c]))
                        for c in REPORT_COLUMNS
                    ]
                )

    def stage_rows(self, stage: int) -> list[ReportRow]:
        return [r for r in self.rows if r.stage == stage]


# ---------------------------------------------------------------------------
# Dataset assembly


def build_dataset(spec: DataSpec, seed: int) -> tuple[SplitDataset, Dataset]:
    """Materialize (train split, test set) from a data spec."""
    data_seed = spec.data_seed if spec.data_seed is not None else seed
    split_seed = spec.split_seed if spec.split_seed is not None else seed
    if spec.kind == "blobs":
        train = gen_gaussian_blobs(
            spec.n_classes, spec.n_per_class, spec.dim, spec.spread, data_seed
        )
        test = gen_gaussian_blobs(
            spec.n_classes, spec.test_n_per_class, spec.dim, spec.spread, data_seed + 1
        )
    elif spec.kind == "moons":
        train = gen_two_moons(spec.n_per_class, spec.noise, data_seed)
        test = gen_two_moons(spec.test_n_per_class, spec.noise, data_seed + 1)
    else:
        full = load_idx(spec.images, spec.labels)
        if spec.test_images and spec.test_labels:
            test = load_idx(spec.test_images, spec.test_labels)
            n_train = spec.take_first or full.n_examples
            train = Dataset(full.features[:n_train], full.labels[:n_train], full.num_classes)
        elif spec.holdout > 0:
            n_avail = full.n_examples - spec.holdout
            n_train = min(spec.take_first or n_avail, n_avail)
            if n_train < 1:
                raise ConfigError("holdout leaves no training rows")
            train = Dataset(full.features[:n_train], full.labels[:n_train], full.num_classes)
            test = Dataset(
                full.features[-spec.holdout :],
                full.labels[-spec.holdout :],
                full.num_classes,
            )
        else:
            raise ConfigError("idx data needs test_images/test_labels or holdout > 0")
    if spec.standardize:
        mean = train.features.mean(axis=0)
        std = train.features.std(axis=0)
        std[std < 1e-12] = 1.0
        train = Dataset((train.features - mean) / std, train.labels, train.num_classes)
        test = Dataset((test.features - mean) / std, test.labels, test.num_classes)
    split = split_per_class(train, spec.labeled_per_class, split_seed)
    return split, test


# ---------------------------------------------------------------------------
# Shared training machinery


class _CyclingPool:
    """Deterministic shuffled index pool that reshuffles when exhausted."""

    def __init__(self, idx: np.ndarray, stream: RandomStream):
        self.idx = np.asarray(idx, dtype=np.int64)
        self.stream = stream
        self.order = self.idx[stream.permutation(self.idx.size)]
        self.pos = 0

    def take(self, k: int) -> np.ndarray:
        out = np.empty(k, dtype=np.int64)
        filled = 0
        while filled < k:
            if self.pos >= self.order.size:
                self.order = self.idx[self.stream.permutation(self.idx.size)]
                self.pos = 0
            n = min(k - filled, self.order.size - self.pos)
            out[filled : filled + n] = self.order[self.pos : self.pos + n]
            self.pos += n
            filled += n
        return out


def predict_probs(params: ModelParams, x: np.ndarray, chunk: int = 8192) -> np.ndarray:
    """Chunked forward returning p_hat rows."""
    outs = []
    for lo in range(0, x.shape[0], chunk):
        outs.append(forward_batch(params, x[lo : lo + chunk]).p_hat)
    return np.vstack(outs) if outs else np.zeros((0, params.arch.num_classes))


def accuracy(params: ModelParams, x: np.ndarray, y: np.ndarray) -> float:
    if x.shape[0] == 0:
        return float("nan")
    pred = predict_probs(params, x).argmax(axis=1)
    return float((pred == y).mean())


def _ce_rows(p_hat: np.ndarray, targets: np.ndarray) -> np.ndarray:
    return -clamped_log(p_hat[np.arange(p_hat.shape[0]), targets])


def _ce_grad_rows(p_hat: np.ndarray, targets: np.ndarray) -> np.ndarray:
    g = p_hat.copy()
    g[np.arange(g.shape[0]), targets] -= 1.0
    return g


def _supervised_epochs(
    params, opt, features, targets, epochs, batch, stream, on_epoch=None
):
    """Cross-entropy epochs over a fixed example set (stages 1 and 3)."""
    n = features.shape[0]
    for ep in range(epochs):
        order = stream.permutation(n)
        ce_sum = 0.0
        ent_sum = 0.0
        for lo in range(0, n, batch):
            rows = order[lo : lo + batch]
            trace = forward_batch(params, features[rows])
            t = targets[rows]
            ce_sum += float(_ce_rows(trace.p_hat, t).sum())
            ent_sum += float(entropy_rows(trace.p_hat).sum())
            grad_y = _ce_grad_rows(trace.p_hat, t) / rows.size
            grads = backward(trace, grad_y, params)
            sgd_nesterov_step(params, grads, opt)
        if on_epoch is not None:
            on_epoch(ep, ce_sum / n, ent_sum / n)
    return params


def _eval_row(
    stage: int,
    epoch: int,
    lr: float,
    loss_total: float,
    loss_lc: float,
    loss_le: float,
    params: ModelParams,
    split: SplitDataset,
    test: Dataset | None,
    table: PseudoTable | None,
    cfg: TrainConfig,
) -> ReportRow:
    feats = split.base.features
    labeled_acc = accuracy(
        params, feats[split.labeled_idx], split.base.labels[split.labeled_idx]
    )
    test_acc = accuracy(params, test.features, test.labels) if test is not None else NA
    unl = split.unlabeled_idx
    if unl.size:
        p_hat_unl = predict_probs(params, feats[unl])
        mean_ent_pred = float(entropy_rows(p_hat_unl).mean())
    else:
        mean_ent_pred = NA
    pseudo_acc = mean_ent_pseudo = drift = p50 = p90 = p99 = NA
    if table is not None and unl.size:
        hard = hard_labels(table)[unl]
        pseudo_acc = float((hard == split.hidden_truth(unl)).mean())
        mean_ent_pseudo = float(entropy_rows(pseudo_probs_rows(table, unl)).mean())
        drift = float(table.sum_drift()[unl].max())
        if cfg.loss.variant == "kl_pred_pseudo":
            res = np.abs(theory.link_residuals(params, table, split, cfg.loss))
            p50, p90, p99 = (float(np.quantile(res, q)) for q in (0.5, 0.9, 0.99))
    return ReportRow(
        stage,
        epoch,
        lr,
        loss_total,
        loss_lc,
        loss_le,
        labeled_acc,
        pseudo_acc,
        test_acc,
        mean_ent_pred,
        mean_ent_pseudo,
        drift,
        p50,
        p90,
        p99,
    )


# ---------------------------------------------------------------------------
# Stages


def stage1_supervised(
    cfg: TrainConfig,
    split: SplitDataset,
    test: Dataset | None = None,
    report: Report | None = None,
) -> ModelParams:
    """Supervised warmup on the labeled subset only."""
    if split.n_labeled == 0:
        raise InvalidInputError("stage 1 requires a non-empty labeled set")
    arch = resolve_arch(cfg.arch, split.base)
    params = init_params(arch, cfg.seed)
    opt = init_opt_state(params, cfg.stage1.lr, MOMENTUM, cfg.stage1.wd)
    stream = RandomStream(cfg.seed, stream_id=10)
    feats = split.base.features[split.labeled_idx]
    targets = split.labeled_targets()

    def on_epoch(ep, ce, ent):
        if report is not None:
            report.add(
                _eval_row(1, ep + 1, opt.lr, ce, ce, 0.0, params, split, test, None, cfg)
            )

    _supervised_epochs(
        params, opt, feats, targets, cfg.stage1.epochs, cfg.stage1.batch, stream, on_epoch
    )
    return params


def _mixed_batch_plan(
    split: SplitDataset, batch: int, frac: float
) -> tuple[int, int, int]:
    """(batches per epoch, labeled quota, unlabeled quota) for stage-2 epochs.

    An epoch covers the union once: the larger pool passes through fully,
    the smaller one cycles.
    """
    n_total = split.base.n_examples
    n_batches = max(1, math.ceil(n_total / batch))
    if split.n_unlabeled == 0:
        return n_batches, batch, 0
    if split.n_labeled == 0:
        return n_batches, 0, batch
    lab_quota = int(round(batch * frac))
    lab_quota = min(max(lab_quota, 1), batch - 1)
    return n_batches, lab_quota, batch - lab_quota


@dataclass
class StageTwoStats:
    """Per-epoch aggregates from one joint-training epoch."""

    loss_total: float
    loss_lc: float
    loss_le: float
    head_grad_norm: float  # epoch mean of the batch head-weight gradient norm


def _joint_epoch(
    params: ModelParams,
    table: PseudoTable,
    split: SplitDataset,
    lcfg: LossConfig,
    opt,
    batch: int,
    frac: float,
    lab_pool: _CyclingPool | None,
    unl_pool: _CyclingPool | None,
) -> StageTwoStats:
    n_batches, lab_q, unl_q = _mixed_batch_plan(split, batch, frac)
    feats = split.base.features
    tot = lc_s = le_s = hn = 0.0
    n_seen = 0
    for _ in range(n_batches):
        parts = []
        if lab_q and lab_pool is not None:
            parts.append(lab_pool.take(lab_q))
        if unl_q and unl_pool is not None:
            parts.append(unl_pool.take(unl_q))
        rows = np.concatenate(parts)
        trace = forward_batch(params, feats[rows])
        p_tilde = softmax_rows(table.logits[rows])
        lc_rows, le_rows = loss_terms_rows(trace.p_hat, p_tilde, lcfg)
        lc_s += float(np.sum(lc_rows))
        le_s += float(np.sum(le_rows))
        tot += float(np.sum(lcfg.alpha * lc_rows + lcfg.beta * le_rows))
        n_seen += rows.size
        # joint step from one shared forward pass; gradients of the batch-mean loss
        grad_y = grad_wrt_logits_rows(trace.p_hat, p_tilde, lcfg) / rows.size
        grads = backward(trace, grad_y, params)
        hn += float(np.linalg.norm(grads.head_w))
        sgd_nesterov_step(params, grads, opt)
        pgrads = grad_wrt_pseudo_logits_rows(trace.p_hat, p_tilde, lcfg) / rows.size
        pseudo_step(table, pgrads, lcfg.lam, rows)
    return StageTwoStats(tot / n_seen, lc_s / n_seen, le_s / n_seen, hn / n_batches)


def stage2_joint(
    cfg: TrainConfig,
    params: ModelParams,
    split: SplitDataset,
    test: Dataset | None = None,
    report: Report | None = None,
    epoch_hook=None,
    table: PseudoTable | None = None,
) -> tuple[ModelParams, PseudoTable]:
    """Joint optimization of weights and pseudo-logits with the round schedule.

    Each round: (re)predict pseudo-logits, train ``epochs`` epochs, then decay
    the network learning rate. The first round's prediction is the table
    initialization itself; passing an existing ``table`` continues a previous
    joint-training run instead. ``epoch_hook(round, epoch, params, table,
    stats)`` runs after every epoch, before report emission; a truthy return
    value stops the stage early (used for convergence-gated training).
    """
    s2 = cfg.stage2
    opt = init_opt_state(params, s2.lr0, MOMENTUM, s2.wd)
    stream = RandomStream(cfg.seed, stream_id=11)
    if table is None:
        table = init_pseudo(split, params, s2.pseudo_init_k)
    lab_pool = _CyclingPool(split.labeled_idx, stream) if split.n_labeled else None
    unl_pool = _CyclingPool(split.unlabeled_idx, stream) if split.n_unlabeled else None
    epoch_global = 0
    for rnd in range(s2.rounds):
        if rnd > 0 and s2.repredict_between_rounds:
            table = repredict(table, split, params)
        for _ in range(s2.epochs):
            stats = _joint_epoch(
                params,
                table,
                split,
                cfg.loss,
                opt,
                s2.batch,
                s2.labeled_fraction_per_batch,
                lab_pool,
                unl_pool,
            )
            epoch_global += 1
            stop = epoch_hook(rnd, epoch_global, params, table, stats) if epoch_hook else None
            if report is not None:
                report.add(
                    _eval_row(
                        2,
                        epoch_global,
                        opt.lr,
                        stats.loss_total,
                        stats.loss_lc,
                        stats.loss_le,
                        params,
                        split,
                        test,
                        table,
                        cfg,
                    )
                )
            if stop:
                return params, table
        if s2.decay_between_rounds and rnd < s2.rounds - 1:
            decay_lr(opt, s2.lr_decay_factor)
    return params, table


def stage3_finetune(
    cfg: TrainConfig,
    params: ModelParams,
    table: PseudoTable,
    split: SplitDataset,
    test: Dataset | None = None,
    report: Report | None = None,
) -> ModelParams:
    """Hard-target finetune on all examples; the pseudo table is read-only."""
    targets = hard_labels(table)
    targets[split.labeled_idx] = split.labeled_targets()
    opt = init_opt_state(params, cfg.stage3.lr, MOMENTUM, cfg.stage3.wd)
    stream = RandomStream(cfg.seed, stream_id=12)

    def on_epoch(ep, ce, ent):
        if report is not None:
            report.add(
                _eval_row(3, ep + 1, opt.lr, ce, ce, 0.0, params, split, test, table, cfg)
            )

    _supervised_epochs(
        params,
        opt,
        split.base.features,
        targets,
        cfg.stage3.epochs,
        cfg.stage3.batch,
        stream,
        on_epoch,
    )
    return params


def resolve_arch(spec: ArchSpec, ds: Dataset) -> Architecture:
    return Architecture(
        input_dim=ds.input_dim,
        hidden_dims=spec.hidden_dims,
        num_classes=ds.num_classes,
        activation=spec.activation,
        head_bias=spec.head_bias,
    )


@dataclass
class PipelineResult:
    report: Report
    params: ModelParams
    table: PseudoTable
    split: SplitDataset
    test: Dataset
    stage1_params: ModelParams  # snapshot taken before joint training


def run_pipeline(cfg: TrainConfig, out_dir=None) -> PipelineResult:
    """Execute stages 1 -> 2 -> 3; optionally write artifacts to ``out_dir``.

    Artifacts: report.csv, pseudo_table.csv, checkpoint_stage{1,2,3}.json,
    pseudo_table.json. The whole run is deterministic per (config, seed).
    Stage failures are re-raised as StageError with the stage name.
    """
    from .model import save_checkpoint
    from .pseudo_labels import export_csv, save_table

    try:
        split, test = build_dataset(cfg.data, cfg.seed)
    except Exception as exc:
        raise StageError("data", exc) from exc
    report = Report()
    out = Path(out_dir) if out_dir is not None else None
    try:
        params = stage1_supervised(cfg, split, test, report)
    except Exception as exc:
        raise StageError("stage1", exc) from exc
    stage1_snapshot = params.copy()
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
        save_checkpoint(params, out / "checkpoint_stage1.json")
    try:
        params, table = stage2_joint(cfg, params, split, test, report)
    except Exception as exc:
        raise StageError("stage2", exc) from exc
    if out is not None:
        save_checkpoint(params, out / "checkpoint_stage2.json")
        save_table(table, out / "pseudo_table.json")
        export_csv(table, out / "pseudo_table.csv")
    try:
        params = stage3_finetune(cfg, params, table, split, test, report)
    except Exception as exc:
        raise StageError("stage3", exc) from exc
    if out is not None:
        save_checkpoint(params, out / "checkpoint_stage3.json")
        report.to_csv(out / "report.csv")
    return PipelineResult(report, params, table, split, test, stage1_snapshot)


def intra_class_spread(features: np.ndarray, labels: np.ndarray, num_classes: int) -> float:
    """Mean distance to the class centroid, averaged over classes.

    The compaction ratio (spread after joint training / spread before) drops
    below 1 when same-class features cluster more tightly.
    """
    spreads = []
    for k in range(num_classes):
        rows = features[labels == k]
        if rows.shape[0] < 2:
            continue
        centroid = rows.mean(axis=0)
        spreads.append(float(np.linalg.norm(rows - centroid, axis=1).mean()))
    if not spreads:
        raise InvalidInputError("no class has enough members to measure spread")
    return float(np.mean(spreads))
