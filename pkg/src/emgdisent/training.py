"""Losses, lambda schedules and the alternating two-step training loop."""

from __future__ import annotations

import csv
import json
import logging
import math
import warnings
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np

from .autodiff import SGD, Tensor, softmax_cross_entropy
from .data import FoldPlan, Recording, WindowedDataset, build_fold
from .network import DualBranchModel, ForwardOutputs, Variant, build_model, forward, save_checkpoint

logger = logging.getLogger(__name__)


class ConfigError(ValueError):
    pass


class TrainingDivergedError(RuntimeError):
    """A loss went non-finite; ``snapshot`` holds the state at the failure."""

    def __init__(self, message: str, snapshot: dict):
        super().__init__(message)
        self.snapshot = snapshot


@dataclass
class TrainConfig:
    variant: str = "proposed"
    epochs: int = 100
    batch_size: int = 256
    learning_rate: float = 0.001
    lambda_s_init: float = 0.0
    lambda_s_max: float = 0.1
    lambda_p_init: float = 1.0
    lambda_p_max: float = 1.5
    seed: int = 0
    iterations_per_step: int = 1
    # adversarial-path classifier gradients are scaled by lambda as well
    scale_adversarial_heads: bool = True
    track_best: bool = False

    def validate(self) -> "TrainConfig":
        try:
            Variant(self.variant)
        except ValueError:
            raise ConfigError(f"variant must be one of {[v.value for v in Variant]}, got {self.variant!r}")
        if self.epochs < 1:
            raise ConfigError(f"epochs must be >= 1, got {self.epochs}")
        if self.batch_size < 2:
            raise ConfigError(f"batch_size must be >= 2, got {self.batch_size}")
        if not self.learning_rate > 0:
            raise ConfigError(f"learning_rate must be > 0, got {self.learning_rate}")
        if self.iterations_per_step < 1:
            raise ConfigError(f"iterations_per_step must be >= 1, got {self.iterations_per_step}")
        for which in ("s", "p"):
            lo, hi = getattr(self, f"lambda_{which}_init"), getattr(self, f"lambda_{which}_max")
            if not 0 <= lo <= hi:
                raise ConfigError(f"need 0 <= lambda_{which}_init <= lambda_{which}_max, got {lo}, {hi}")
        return self

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        extra = set(d) - set(cls.__dataclass_fields__)
        if extra:
            raise ConfigError(f"unknown train config field(s): {sorted(extra)}")
        return cls(**d).validate()

    @classmethod
    def from_json(cls, path) -> "TrainConfig":
        return cls.from_dict(json.loads(Path(path).read_text()))

    def to_json(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n")


def lambda_schedule(p: float, init: float, maximum: float) -> float:
    """``init + p * (max - init)``; ``p`` outside [0, 1] is clamped with a warning."""
    if p < 0 or p > 1:
        warnings.warn(f"training progress {p} outside [0, 1]; clamped", stacklevel=2)
        p = min(max(p, 0.0), 1.0)
    return init + p * (maximum - init)


def progress(epoch_number: int, total_epochs: int) -> float:
    """Relative progress of the 1-based ``epoch_number``; the last epoch is 1."""
    return epoch_number / total_epochs


def lambdas_at(config: TrainConfig, epoch_number: int) -> tuple[float, float]:
    p = progress(epoch_number, config.epochs)
    return (lambda_schedule(p, config.lambda_s_init, config.lambda_s_max),
            lambda_schedule(p, config.lambda_p_init, config.lambda_p_max))


@dataclass
class LossBundle:
    """Cross-entropy losses for whichever paths a forward pass computed."""

    L_p_cls: Optional[Tensor] = None
    L_s_cls: Optional[Tensor] = None
    L_s_adv: Optional[Tensor] = None
    L_p_adv: Optional[Tensor] = None

    def values(self) -> dict[str, Optional[float]]:
        return {k: (None if v is None else float(v.data)) for k, v in vars(self).items()}

    def total(self) -> Tensor:
        terms = [t for t in vars(self).values() if t is not None]
        out = terms[0]
        for t in terms[1:]:
            out = out + t
        return out


def compute_losses(outputs: ForwardOutputs, pattern_onehot, subject_onehot=None,
                   reduction: str = "mean") -> LossBundle:
    """Unweighted cross-entropies for every path present in ``outputs``.

    The lambda weighting of the adversarial terms happens inside the gradient
    reversal layers, so nothing is weighted here.
    """
    def ce(logits, y, name):
        if y is None:
            raise ValueError(f"{name} needs labels that weren't given")
        loss, _ = softmax_cross_entropy(logits, y, reduction)
        return loss

    b = LossBundle()
    if outputs.logits_p is not None:
        b.L_p_cls = ce(outputs.logits_p, pattern_onehot, "L_p_cls")
    if outputs.logits_s is not None:
        b.L_s_cls = ce(outputs.logits_s, subject_onehot, "L_s_cls")
    if outputs.logits_adv_s is not None:
        b.L_s_adv = ce(outputs.logits_adv_s, subject_onehot, "L_s_adv")
    if outputs.logits_adv_p is not None:
        b.L_p_adv = ce(outputs.logits_adv_p, pattern_onehot, "L_p_adv")
    return b


# parameters each step's optimizer owns, by variant
_STEP1 = {
    Variant.PROPOSED: ("extractor", "encoder_p", "bottleneck_p", "classifier_p", "classifier_s"),
    Variant.PONLY: ("extractor", "encoder_p", "bottleneck_p", "classifier_p", "classifier_s"),
    Variant.MTL: ("extractor", "encoder_p", "bottleneck_p", "classifier_p"),
    Variant.ERM: ("extractor", "encoder_p", "bottleneck_p", "classifier_p"),
}
_STEP2 = {
    Variant.PROPOSED: ("extractor", "encoder_s", "bottleneck_s", "classifier_s", "classifier_p"),
    Variant.MTL: ("extractor", "encoder_s", "bottleneck_s", "classifier_s"),
}
_STEP1_PATHS = {Variant.PROPOSED: {"p", "adv_s"}, Variant.PONLY: {"p", "adv_s"},
                Variant.MTL: {"p"}, Variant.ERM: {"p"}}
_STEP2_PATHS = {Variant.PROPOSED: {"s", "adv_p"}, Variant.MTL: {"s"}}

LOG_COLUMNS = ["epoch", "lambda_s", "lambda_p", "L_p_cls", "L_s_cls", "L_s_adv", "L_p_adv",
               "train_pattern_acc", "train_subject_acc"]


@dataclass
class TrainState:
    epoch: int
    rng: np.random.Generator
    optimizer1: SGD
    optimizer2: Optional[SGD]
    history: list[dict] = field(default_factory=list)
    best: Optional[dict] = None

    @property
    def progress(self) -> float:
        return self.history[-1]["progress"] if self.history else 0.0


def init_state(model: DualBranchModel, config: TrainConfig) -> TrainState:
    v = model.variant
    if v is not Variant(config.variant):
        raise ConfigError(f"model variant {v.value} != config variant {config.variant}")
    opt1 = SGD(model.parameters(*_STEP1[v]), config.learning_rate)
    opt2 = SGD(model.parameters(*_STEP2[v]), config.learning_rate) if v in _STEP2 else None
    return TrainState(epoch=0, rng=np.random.default_rng(config.seed), optimizer1=opt1, optimizer2=opt2)


def _check_finite(losses: LossBundle, state: TrainState, batch: int, step: int) -> None:
    vals = losses.values()
    if any(v is not None and not math.isfinite(v) for v in vals.values()):
        snap = {"epoch": state.epoch + 1, "batch": batch, "step": step, "losses": vals}
        raise TrainingDivergedError(f"non-finite loss at epoch {state.epoch + 1}, batch {batch}, step {step}: {vals}",
                                    snap)


def batches(n: int, batch_size: int, rng: np.random.Generator) -> list[np.ndarray]:
    """Shuffled index batches; a trailing batch smaller than 2 is dropped (batch norm)."""
    order = rng.permutation(n)
    out = [order[i:i + batch_size] for i in range(0, n, batch_size)]
    return [b for b in out if len(b) >= 2]


def train_epoch(model: DualBranchModel, dataset: WindowedDataset, state: TrainState,
                config: TrainConfig, trace: Optional[list] = None) -> dict:
    """One pass over ``dataset``; returns the epoch's log row.

    Per batch: step 1 updates the pattern side (pattern loss plus the
    subject-adversarial loss through the pattern branch's reversal layer);
    step 2, on a fresh forward pass of the same batch, updates the subject
    side. ``trace``, if given, receives a per-step record of gradients of
    every optimized parameter (for equivalence tests).
    """
    v = model.variant
    epoch_number = state.epoch + 1
    lam_s, lam_p = lambdas_at(config, epoch_number)
    sums = {k: 0.0 for k in ("L_p_cls", "L_s_cls", "L_s_adv", "L_p_adv")}
    seen = {k: 0 for k in sums}
    correct_p = correct_s = n_p = n_s = 0

    def run_step(step, paths, opt, xb, yp, ys, b):
        nonlocal correct_p, correct_s, n_p, n_s
        model.zero_grad()
        out = forward(model, xb, "train", (lam_s, lam_p), rng=state.rng, paths=paths,
                      scale_adversarial_heads=config.scale_adversarial_heads)
        losses = compute_losses(out, yp, ys)
        _check_finite(losses, state, b, step)
        losses.total().backward()
        if trace is not None:
            trace.append({"epoch": epoch_number, "batch": b, "step": step,
                          "grads": {k: p.grad.copy() for k, p in opt.params.items()}})
        opt.step()
        for k, val in losses.values().items():
            if val is not None:
                sums[k] += val * len(xb)
                seen[k] += len(xb)
        labels_p = yp.argmax(axis=1)
        if out.logits_p is not None:
            correct_p += int((out.logits_p.data.argmax(axis=1) == labels_p).sum())
            n_p += len(xb)
        if out.logits_s is not None:
            correct_s += int((out.logits_s.data.argmax(axis=1) == ys.argmax(axis=1)).sum())
            n_s += len(xb)

    needs_subject = v is not Variant.ERM
    for b, idx in enumerate(batches(len(dataset), config.batch_size, state.rng)):
        xb = dataset.windows[idx]
        yp = dataset.pattern_onehot(idx)
        ys = dataset.subject_onehot(idx) if needs_subject else None
        for _ in range(config.iterations_per_step):
            run_step(1, _STEP1_PATHS[v], state.optimizer1, xb, yp, ys, b)
        if state.optimizer2 is not None:
            for _ in range(config.iterations_per_step):
                run_step(2, _STEP2_PATHS[v], state.optimizer2, xb, yp, ys, b)

    state.epoch = epoch_number
    row = {"epoch": epoch_number, "progress": progress(epoch_number, config.epochs),
           "lambda_s": lam_s, "lambda_p": lam_p}
    for k in sums:
        row[k] = sums[k] / seen[k] if seen[k] else None
    row["train_pattern_acc"] = correct_p / n_p if n_p else None
    row["train_subject_acc"] = correct_s / n_s if n_s else None
    state.history.append(row)
    return row


def fit(model: DualBranchModel, dataset: WindowedDataset, config: TrainConfig,
        state: Optional[TrainState] = None, validation: Optional[WindowedDataset] = None,
        on_epoch=None) -> TrainState:
    """Run ``config.epochs`` epochs (continuing from ``state`` if given)."""
    config.validate()
    if len(dataset) < 2:
        raise ConfigError("training split needs at least 2 windows")
    if model.n_patterns != dataset.n_patterns:
        raise ConfigError(f"model has {model.n_patterns} pattern classes, data has {dataset.n_patterns}")
    if model.variant is not Variant.ERM and model.n_subjects != dataset.n_subjects:
        raise ConfigError(f"model has {model.n_subjects} subject classes, data has {dataset.n_subjects}")
    state = state or init_state(model, config)
    while state.epoch < config.epochs:
        row = train_epoch(model, dataset, state, config)
        if config.track_best and validation is not None:
            from .network import predict_proba

            acc = float(np.mean(predict_proba(model, validation.windows).argmax(1) == validation.pattern_index))
            if state.best is None or acc > state.best["accuracy"]:
                state.best = {"epoch": row["epoch"], "accuracy": acc,
                              "params": {k: t.data.copy() for k, t in model.parameters().items()}}
        logger.info("epoch %d/%d %s", row["epoch"], config.epochs,
                    {k: v for k, v in row.items() if k not in ("epoch",)})
        if on_epoch is not None:
            on_epoch(row)
    return state


def _fmt(v) -> str:
    if v is None:
        return ""
    if isinstance(v, float):
        return repr(v)
    return str(v)


def write_log(history: list[dict], path) -> Path:
    path = Path(path)
    with open(path, "w", newline="") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(LOG_COLUMNS)
        for row in history:
            w.writerow([_fmt(row.get(c)) for c in LOG_COLUMNS])
    return path


@dataclass
class TrainResult:
    model: DualBranchModel
    state: TrainState
    train_set: WindowedDataset
    test_set: WindowedDataset
    checkpoint: Optional[Path] = None
    log: Optional[Path] = None


def train(recordings: list[Recording], plan: FoldPlan, fold_index: int, config: TrainConfig,
          out_dir=None, window: int = 408, step: int = 20, normalize_channels: bool = True,
          exclude_subjects=(), model: Optional[DualBranchModel] = None) -> TrainResult:
    """Build the fold's splits, train, and (with ``out_dir``) write the
    checkpoint, the per-epoch CSV log and the resolved config."""
    config.validate()
    train_set, test_set = build_fold(recordings, plan, fold_index, window, step, normalize_channels,
                                     exclude_subjects)
    if model is None:
        model = build_model(config.variant, train_set.n_patterns, max(train_set.n_subjects, 2),
                            config.seed, window, train_set.windows.shape[2])
    state = fit(model, train_set, config)
    result = TrainResult(model, state, train_set, test_set)
    if out_dir is not None:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        meta = {
            "fold": fold_index,
            "fold_plan": plan.to_dict(),
            "gesture_ids": train_set.gesture_ids,
            "train_subjects": train_set.train_subjects,
            "test_subjects": plan.test_subjects(fold_index),
            "window": window,
            "step": step,
            "normalize": normalize_channels,
            "channel_mean": None if train_set.mean is None else [float(x) for x in train_set.mean],
            "channel_std": None if train_set.std is None else [float(x) for x in train_set.std],
            "exclude_subjects": sorted(int(s) for s in exclude_subjects),
            "train_config": config.to_dict(),
        }
        result.checkpoint = save_checkpoint(model, out / "checkpoint.ckpt", meta)
        result.log = write_log(state.history, out / "train_log.csv")
        config.to_json(out / "config.json")
    return result
