"""Dice-loss training: schedule, optimiser, per-fold training and cross-validation."""
from __future__ import annotations

import json
import logging
import math
import time
from dataclasses import asdict, dataclass, field, replace
from fractions import Fraction
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from . import network as net
from .errors import ConfigurationError, ContractError, DataError, DivergenceError, ShapeError
from .evaluation import confusion, dice
from .io.manifest import DatasetManifest
from .io.nifti import atomic_write
from .preprocess import load_preprocessed

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 50
    initial_lr: float = 0.01
    batch_size: int = 13
    iterations_per_epoch: Optional[int] = None  # None: ceil(training slices / batch_size)
    momentum: float = 0.99
    nesterov: bool = True
    weight_decay: float = 3e-5
    dice_smooth: float = 1e-5
    batch_dice: bool = True
    seed: int = 0
    folds: int = 5
    test_folds: tuple[int, ...] = (3, 4)
    cv_mode: str = "per-fold"  # or "single-model"

    def __post_init__(self):
        object.__setattr__(self, "test_folds", tuple(int(f) for f in self.test_folds))
        if self.epochs < 1:
            raise ConfigurationError("epochs must be >= 1")
        if self.batch_size < 1:
            raise ConfigurationError("batch_size must be >= 1")
        if not self.initial_lr > 0:
            raise ConfigurationError("initial_lr must be > 0")
        if self.iterations_per_epoch is not None and self.iterations_per_epoch < 1:
            raise ConfigurationError(f"iterations_per_epoch must be >= 1, got {self.iterations_per_epoch}")
        if not 0 <= self.momentum < 1:
            raise ConfigurationError("momentum must be in [0, 1)")
        if self.cv_mode not in ("per-fold", "single-model"):
            raise ConfigurationError(f"unknown cv_mode {self.cv_mode!r}")
        if any(not 0 <= f < self.folds for f in self.test_folds):
            raise ConfigurationError(f"test folds {self.test_folds} outside 0..{self.folds - 1}")

    def to_json(self) -> dict:
        d = asdict(self)
        d["test_folds"] = list(self.test_folds)
        return d

    @classmethod
    def from_json(cls, d: dict) -> "TrainConfig":
        return cls(**d)


# --------------------------------------------------------------------------
# loss


def _check_dice_inputs(probs, target):
    if probs.ndim != 4 or probs.shape[1] != 2:
        raise ShapeError(f"probabilities must be (B, 2, H, W), got {probs.shape}")
    if target.shape != (probs.shape[0],) + probs.shape[2:]:
        raise ShapeError(f"target shape {target.shape} does not match probabilities {probs.shape}")


def soft_dice_loss_and_grad(probs: np.ndarray, target: np.ndarray, smooth: float = 1e-5, batch_dice: bool = True):
    """Soft dice loss on the foreground channel and its gradient wrt ``probs``.

    ``1 - (2 sum(p t) + s) / (sum(p) + sum(t) + s)``, with sums pooled over the
    whole batch when ``batch_dice``; otherwise per sample and averaged.
    """
    _check_dice_inputs(probs, target)
    p = probs[:, 1]
    t = target.astype(probs.dtype)
    axes = (0, 1, 2) if batch_dice else (1, 2)
    inter = (p * t).sum(axis=axes, keepdims=True)
    denom = p.sum(axis=axes, keepdims=True) + t.sum(axis=axes, keepdims=True) + smooth
    num = 2 * inter + smooth
    losses = 1 - num / denom
    dp = -(2 * t * denom - num) / denom**2
    grad = np.zeros_like(probs)
    if batch_dice:
        grad[:, 1] = dp
        return float(losses.ravel()[0]), grad
    grad[:, 1] = dp / p.shape[0]
    return float(losses.mean()), grad


def soft_dice_loss(probs, target, smooth: float = 1e-5, batch_dice: bool = True) -> float:
    return soft_dice_loss_and_grad(probs, target, smooth, batch_dice)[0]


def softmax_backward(probs: np.ndarray, dprobs: np.ndarray) -> np.ndarray:
    return probs * (dprobs - (probs * dprobs).sum(axis=1, keepdims=True))


def dice_loss_from_logits(logits, target, smooth: float = 1e-5, batch_dice: bool = True):
    """Loss and gradient wrt the logits."""
    probs = net.softmax_probabilities(logits)
    loss, dp = soft_dice_loss_and_grad(probs, target, smooth, batch_dice)
    return loss, softmax_backward(probs, dp)


# --------------------------------------------------------------------------
# schedule and optimiser


def lr_exact(epoch: int, config: TrainConfig) -> Fraction:
    """Linear decay ``lr0 * (1 - epoch / epochs)`` in rational arithmetic.

    ``lr0`` is taken at its decimal value, so the schedule is an exact
    arithmetic progression and 0.01 -> 0.005 -> 0.0002 come out exactly.
    """
    if not 0 <= epoch < config.epochs:
        raise ContractError(f"epoch {epoch} outside [0, {config.epochs})")
    return Fraction(repr(config.initial_lr)) * (config.epochs - epoch) / config.epochs


def lr_at(epoch: int, config: TrainConfig) -> float:
    """Correctly rounded float of :func:`lr_exact`."""
    return float(lr_exact(epoch, config))


@dataclass
class TrainState:
    params: net.NetworkParams
    momentum: dict = field(default_factory=dict)
    epoch: int = 0
    iteration: int = 0
    rng: np.random.Generator = field(default_factory=lambda: np.random.default_rng(0))
    losses: list = field(default_factory=list)

    @classmethod
    def fresh(cls, params: net.NetworkParams, seed: int = 0) -> "TrainState":
        return cls(params, {k: np.zeros_like(v) for k, v in params.items()}, rng=np.random.default_rng(seed))


def optimizer_step(state: TrainState, grads, lr: float, config: TrainConfig) -> TrainState:
    """SGD with momentum: ``m <- mu m + g``; classical ``p <- p - lr m`` or
    Nesterov ``p <- p - lr (g + mu m)``.  Weight decay is folded into ``g``."""
    mu = config.momentum
    new_params, new_mom = net.NetworkParams(), {}
    for k, p in state.params.items():
        g = np.asarray(grads[k])
        if g.shape != p.shape:
            raise ShapeError(f"gradient for {k} has shape {g.shape}, parameter has {p.shape}")
        if not np.isfinite(g).all():
            bad = int(np.count_nonzero(~np.isfinite(g)))
            raise DivergenceError(
                f"non-finite gradient in {k} ({bad} of {g.size} entries) at epoch {state.epoch}, iteration {state.iteration}"
            )
        if config.weight_decay:
            g = g + config.weight_decay * p
        m = mu * state.momentum.get(k, np.zeros_like(p)) + g
        step = g + mu * m if config.nesterov else m
        new_params[k] = (p - lr * step).astype(p.dtype, copy=False)
        new_mom[k] = m.astype(p.dtype, copy=False)
    return replace(state, params=new_params, momentum=new_mom, iteration=state.iteration + 1)


# --------------------------------------------------------------------------
# fitting on in-memory slices


@dataclass
class EpochRecord:
    epoch: int
    lr: float
    train_loss: float
    val_dice: Optional[float]
    wallclock_s: float


def iterations_per_epoch(config: TrainConfig, n_slices: int) -> int:
    if config.iterations_per_epoch is not None:
        return config.iterations_per_epoch
    return max(1, math.ceil(n_slices / config.batch_size))


def predict_masks(cfg: net.NetworkConfig, params, images: np.ndarray, batch: int = 8) -> np.ndarray:
    """Binary foreground masks for (S, H, W) slices: argmax over classes."""
    out = []
    for i in range(0, len(images), batch):
        logits = net.forward(cfg, params, images[i : i + batch, None]).logits
        out.append(np.argmax(logits, axis=1).astype(np.uint8))
    return np.concatenate(out) if out else np.zeros((0,) + images.shape[1:], np.uint8)


def mean_case_dice(cfg, params, cases: Sequence[tuple[np.ndarray, np.ndarray]]) -> Optional[float]:
    """Mean over cases of the 3-D hard dice in patch space."""
    if not cases:
        return None
    scores = [dice(confusion(predict_masks(cfg, params, img), seg)) for img, seg in cases]
    return float(np.mean(scores))


def fit(
    cfg: net.NetworkConfig,
    config: TrainConfig,
    images: np.ndarray,
    masks: np.ndarray,
    val_cases: Sequence[tuple[np.ndarray, np.ndarray]] = (),
    params: Optional[net.NetworkParams] = None,
    on_epoch=None,
) -> tuple[TrainState, list[EpochRecord], Optional[net.NetworkParams]]:
    """Train on stacked slices ``images`` (S, H, W) with binary ``masks``.

    Returns the final state, per-epoch records and the params of the epoch
    with the best validation dice (None without validation cases).
    """
    if len(images) == 0:
        raise DataError("no training slices")
    net.check_input(cfg, images[:1, None])
    n_iter = iterations_per_epoch(config, len(images))
    state = TrainState.fresh(params if params is not None else net.init_params(cfg), config.seed)
    records, best, best_score = [], None, -1.0
    t0 = time.perf_counter()
    for epoch in range(config.epochs):
        state.epoch = epoch
        lr = lr_at(epoch, config)
        losses = []
        for _ in range(n_iter):
            idx = state.rng.integers(0, len(images), size=config.batch_size)
            x = images[idx][:, None]
            result = net.forward(cfg, state.params, x, train=True)
            loss, dlogits = dice_loss_from_logits(result.logits, masks[idx], config.dice_smooth, config.batch_dice)
            if not math.isfinite(loss):
                raise DivergenceError(f"non-finite loss at epoch {epoch}, iteration {state.iteration}")
            grads = net.backward(cfg, state.params, result, dlogits)
            del result
            state = optimizer_step(state, grads, lr, config)
            losses.append(loss)
        state.losses.append(float(np.mean(losses)))
        val = mean_case_dice(cfg, state.params, val_cases)
        if val is not None and val > best_score:
            best_score, best = val, state.params.copy()
        rec = EpochRecord(epoch, lr, state.losses[-1], val, round(time.perf_counter() - t0, 3))
        records.append(rec)
        log.info("epoch %d lr %.5f loss %.4f val_dice %s", epoch, lr, rec.train_loss, val)
        if on_epoch is not None:
            on_epoch(rec)
    return state, records, best


# --------------------------------------------------------------------------
# folds


@dataclass
class FoldResult:
    fold: Optional[int]
    final_checkpoint: Path
    best_checkpoint: Optional[Path]
    log_path: Path
    records: list


def _load_cases(manifest: DatasetManifest, case_ids, preprocessed_dir):
    out = []
    for cid in case_ids:
        case = load_preprocessed(preprocessed_dir, cid)
        if case.mask is None:
            raise DataError(f"preprocessed case {cid!r} has no segmentation")
        out.append((case.image, case.mask))
    return out


def split_case_ids(manifest: DatasetManifest, fold: Optional[int], exclude_folds: Sequence[int] = ()):
    """(train ids, validation ids) for a held-out ``fold``; ``None`` trains on everything."""
    if fold is not None and any(c.fold_index is None for c in manifest.cases):
        raise ConfigurationError("manifest has cases without fold assignment; run assign_folds first")
    train, val = [], []
    for c in manifest.cases:
        if c.split_tag == "test" or c.mask_path is None:
            continue
        if fold is not None and c.fold_index == fold:
            val.append(c.case_id)
        elif c.fold_index not in exclude_folds:
            train.append(c.case_id)
    return train, val


def train_fold(
    manifest: DatasetManifest,
    fold: Optional[int],
    net_cfg: net.NetworkConfig,
    train_cfg: TrainConfig,
    preprocessed_dir,
    out_dir,
    exclude_folds: Sequence[int] = (),
) -> FoldResult:
    """Train one model with ``fold`` held out for validation and write its artifacts.

    Writes ``final.ckpt``, ``best.ckpt`` (when validating) and ``log.jsonl`` to ``out_dir``.
    """
    train_ids, val_ids = split_case_ids(manifest, fold, exclude_folds)
    if not train_ids:
        raise DataError(f"fold {fold}: no training cases")
    # fail on missing data before any optimisation work
    for cid in train_ids + val_ids:
        if not (Path(preprocessed_dir) / f"{cid}.json").is_file():
            raise DataError(f"missing preprocessed case {cid!r} in {preprocessed_dir}")
    train_cases = _load_cases(manifest, train_ids, preprocessed_dir)
    val_cases = _load_cases(manifest, val_ids, preprocessed_dir)
    images = np.concatenate([img for img, _ in train_cases]).astype(np.float32)
    masks = np.concatenate([seg for _, seg in train_cases])

    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    log_path = out_dir / "log.jsonl"
    lines: list[str] = []

    def write_log(rec: EpochRecord):
        lines.append(json.dumps(asdict(rec), sort_keys=True))
        atomic_write(log_path, ("\n".join(lines) + "\n").encode())

    state, records, best = fit(net_cfg, train_cfg, images, masks, val_cases, on_epoch=write_log)
    extra = {"train": train_cfg.to_json(), "fold": fold, "train_cases": train_ids, "val_cases": val_ids}
    final = out_dir / "final.ckpt"
    net.save_checkpoint(final, net_cfg, state.params, {**extra, "kind": "final"})
    best_path = None
    if best is not None:
        best_path = out_dir / "best.ckpt"
        net.save_checkpoint(best_path, net_cfg, best, {**extra, "kind": "best"})
    return FoldResult(fold, final, best_path, log_path, records)


@dataclass
class CVSummary:
    mode: str
    test_folds: tuple[int, ...]
    runs: list  # [{"model_fold", "eval_fold", "dice", "checkpoint"}]
    max_dice: Optional[float]
    note: str = "max_dice is the highest per-fold score, following the reporting convention of the reference study"

    def to_json(self) -> dict:
        return {
            "mode": self.mode,
            "test_folds": list(self.test_folds),
            "runs": self.runs,
            "max_dice": self.max_dice,
            "max_dice_note": self.note,
        }


def run_cross_validation(
    manifest: DatasetManifest,
    net_cfg: net.NetworkConfig,
    train_cfg: TrainConfig,
    preprocessed_dir,
    out_dir,
    folds: Optional[Sequence[int]] = None,
) -> CVSummary:
    """Train per-fold models and evaluate on the designated test folds.

    ``per-fold`` mode trains one model per requested fold (that fold held out)
    and evaluates each test fold with its own model.  ``single-model`` trains
    once with every test fold excluded and evaluates that model on each test fold.
    """
    out_dir = Path(out_dir)
    runs = []
    if train_cfg.cv_mode == "per-fold":
        requested = list(train_cfg.test_folds) if folds is None else list(folds)
        for f in requested:
            res = train_fold(manifest, f, net_cfg, train_cfg, preprocessed_dir, out_dir / f"fold_{f}")
            if f in train_cfg.test_folds or len(requested) == 1:
                ckpt = res.best_checkpoint or res.final_checkpoint
                runs.append(_eval_run(manifest, f, f, ckpt, preprocessed_dir))
    else:
        held = list(train_cfg.test_folds)
        res = train_fold(manifest, held[0], net_cfg, train_cfg, preprocessed_dir, out_dir / "single", exclude_folds=held)
        ckpt = res.best_checkpoint or res.final_checkpoint
        for f in held:
            runs.append(_eval_run(manifest, None, f, ckpt, preprocessed_dir))
    scores = [r["dice"] for r in runs if r["dice"] is not None]
    summary = CVSummary(train_cfg.cv_mode, train_cfg.test_folds, runs, max(scores) if scores else None)
    atomic_write(out_dir / "cv_summary.json", (json.dumps(summary.to_json(), indent=2, sort_keys=True) + "\n").encode())
    return summary


def _eval_run(manifest, model_fold, eval_fold, ckpt, preprocessed_dir) -> dict:
    cfg, params, _ = net.load_checkpoint(ckpt)
    ids = [c.case_id for c in manifest.fold_cases(eval_fold) if c.mask_path is not None]
    cases = _load_cases(manifest, ids, preprocessed_dir)
    return {
        "model_fold": model_fold,
        "eval_fold": eval_fold,
        "dice": mean_case_dice(cfg, params, cases),
        "cases": ids,
        "checkpoint": str(ckpt),
    }
