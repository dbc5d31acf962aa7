"""Dual-branch adversarial network and its baseline variants.

Layout (shapes for the default 408x8 window)::

    X (N, 408, 8)
      -> extractor: conv k5 8->32, BN, ReLU, pool2        (N, 204, 32)
      -> encoder  : conv k3 32->64, BN, ReLU, pool2       (N, 102, 64)
                    conv k5 64->128, BN, ReLU, pool2      (N, 51, 128)
      -> bottleneck: flatten 6528 -> linear 256, BN, ReLU, dropout 0.5
      -> classifier: linear 256 -> K

The pattern and subject branches are identical up to classifier width. The
two classifiers are shared between their main path and the opposite branch's
adversarial path (behind a gradient reversal layer).
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path
from typing import Optional

import numpy as np

from .autodiff import (
    BatchNormState,
    DimensionError,
    Tensor,
    batchnorm,
    conv1d,
    dropout,
    flatten,
    gradient_reversal,
    linear,
    maxpool1d,
    relu,
    scale_gradient,
    softmax,
)

WINDOW_LENGTH = 408
N_CHANNELS = 8
EXTRACTOR_CHANNELS = 32
ENCODER_CHANNELS = (64, 128)
ENCODER_KERNELS = (3, 5)
EXTRACTOR_KERNEL = 5
BOTTLENECK_UNITS = 256
DROPOUT_RATE = 0.5


class Variant(str, Enum):
    PROPOSED = "proposed"
    ERM = "erm"
    PONLY = "ponly"
    MTL = "mtl"

    @property
    def has_subject_branch(self) -> bool:
        return self in (Variant.PROPOSED, Variant.MTL)

    @property
    def has_subject_head(self) -> bool:
        return self is not Variant.ERM

    @property
    def adversarial(self) -> bool:
        return self in (Variant.PROPOSED, Variant.PONLY)


class UnsupportedVariantError(ValueError):
    """The requested path or feature doesn't exist in this model variant."""


def _he_uniform(rng: np.random.Generator, shape: tuple, fan_in: int) -> np.ndarray:
    bound = np.sqrt(6.0 / fan_in)
    return rng.uniform(-bound, bound, size=shape).astype(np.float32)


class ConvBlock:
    """conv -> batchnorm -> relu -> maxpool(2, 2), same padding."""

    def __init__(self, cin: int, cout: int, kernel: int, rng: np.random.Generator):
        self.padding = kernel // 2
        self.weight = Tensor(_he_uniform(rng, (cout, cin, kernel), cin * kernel), requires_grad=True)
        self.bias = Tensor(np.zeros(cout, np.float32), requires_grad=True)
        self.gamma = Tensor(np.ones(cout, np.float32), requires_grad=True)
        self.beta = Tensor(np.zeros(cout, np.float32), requires_grad=True)
        self.bn = BatchNormState.create(cout)

    def __call__(self, x: Tensor, mode: str) -> Tensor:
        h = conv1d(x, self.weight, self.bias, self.padding)
        h = batchnorm(h, self.gamma, self.beta, self.bn, mode)
        return maxpool1d(relu(h), 2, 2)

    def parameters(self) -> dict[str, Tensor]:
        return {"conv.weight": self.weight, "conv.bias": self.bias, "bn.gamma": self.gamma, "bn.beta": self.beta}

    def bn_states(self) -> dict[str, BatchNormState]:
        return {"bn": self.bn}


class Bottleneck:
    """flatten -> linear -> batchnorm -> relu -> dropout."""

    def __init__(self, fan_in: int, units: int, rng: np.random.Generator, rate: float = DROPOUT_RATE):
        self.rate = rate
        self.weight = Tensor(_he_uniform(rng, (units, fan_in), fan_in), requires_grad=True)
        self.bias = Tensor(np.zeros(units, np.float32), requires_grad=True)
        self.gamma = Tensor(np.ones(units, np.float32), requires_grad=True)
        self.beta = Tensor(np.zeros(units, np.float32), requires_grad=True)
        self.bn = BatchNormState.create(units)

    def __call__(self, x: Tensor, mode: str, rng: Optional[np.random.Generator]) -> Tensor:
        h = linear(flatten(x), self.weight, self.bias)
        h = relu(batchnorm(h, self.gamma, self.beta, self.bn, mode))
        return dropout(h, self.rate, mode, rng)

    def parameters(self) -> dict[str, Tensor]:
        return {"fc.weight": self.weight, "fc.bias": self.bias, "bn.gamma": self.gamma, "bn.beta": self.beta}

    def bn_states(self) -> dict[str, BatchNormState]:
        return {"bn": self.bn}


class Classifier:
    """Linear layer producing logits; softmax lives in the loss / outputs."""

    def __init__(self, fan_in: int, n_classes: int, rng: np.random.Generator):
        self.weight = Tensor(_he_uniform(rng, (n_classes, fan_in), fan_in), requires_grad=True)
        self.bias = Tensor(np.zeros(n_classes, np.float32), requires_grad=True)

    def __call__(self, z: Tensor, grad_scale: Optional[float] = None) -> Tensor:
        w, b = self.weight, self.bias
        if grad_scale is not None:
            w, b = scale_gradient(w, grad_scale), scale_gradient(b, grad_scale)
        return linear(z, w, b)

    def parameters(self) -> dict[str, Tensor]:
        return {"weight": self.weight, "bias": self.bias}

    def bn_states(self) -> dict[str, BatchNormState]:
        return {}


class Encoder:
    def __init__(self, rng: np.random.Generator):
        cin = EXTRACTOR_CHANNELS
        self.blocks = []
        for cout, k in zip(ENCODER_CHANNELS, ENCODER_KERNELS):
            self.blocks.append(ConvBlock(cin, cout, k, rng))
            cin = cout

    def __call__(self, x: Tensor, mode: str) -> Tensor:
        for block in self.blocks:
            x = block(x, mode)
        return x

    def parameters(self) -> dict[str, Tensor]:
        return {f"block{i}.{k}": v for i, b in enumerate(self.blocks) for k, v in b.parameters().items()}

    def bn_states(self) -> dict[str, BatchNormState]:
        return {f"block{i}.{k}": v for i, b in enumerate(self.blocks) for k, v in b.bn_states().items()}


def encoded_length(window_length: int) -> int:
    """Time steps left after the extractor and both encoder pools."""
    return window_length // 2 // 2 // 2


# component name -> index used to derive its private init stream
_COMPONENT_STREAMS = {"extractor": 0, "encoder_p": 1, "bottleneck_p": 2, "classifier_p": 3,
                      "encoder_s": 4, "bottleneck_s": 5, "classifier_s": 6}


class DualBranchModel:
    """Parameter container for one of the four variants.

    Components absent from a variant are ``None``. Each component is
    initialized from its own seed stream, so shared components start out
    identical across variants built with the same seed.
    """

    def __init__(self, variant, n_patterns: int, n_subjects: int, seed: int = 0,
                 window_length: int = WINDOW_LENGTH, n_channels: int = N_CHANNELS):
        self.variant = Variant(variant)
        if n_patterns < 2 or n_subjects < 2:
            raise ValueError("need at least 2 patterns and 2 subjects")
        if encoded_length(window_length) < 1:
            raise DimensionError(f"window length {window_length} too short for three pooling stages")
        self.n_patterns = n_patterns
        self.n_subjects = n_subjects
        self.seed = seed
        self.window_length = window_length
        self.n_channels = n_channels
        self.flat_features = encoded_length(window_length) * ENCODER_CHANNELS[-1]

        def rng(name):
            return np.random.default_rng([seed, _COMPONENT_STREAMS[name]])

        v = self.variant
        self.extractor = ConvBlock(n_channels, EXTRACTOR_CHANNELS, EXTRACTOR_KERNEL, rng("extractor"))
        self.encoder_p = Encoder(rng("encoder_p"))
        self.bottleneck_p = Bottleneck(self.flat_features, BOTTLENECK_UNITS, rng("bottleneck_p"))
        self.classifier_p = Classifier(BOTTLENECK_UNITS, n_patterns, rng("classifier_p"))
        self.encoder_s = Encoder(rng("encoder_s")) if v.has_subject_branch else None
        self.bottleneck_s = (Bottleneck(self.flat_features, BOTTLENECK_UNITS, rng("bottleneck_s"))
                             if v.has_subject_branch else None)
        self.classifier_s = Classifier(BOTTLENECK_UNITS, n_subjects, rng("classifier_s")) if v.has_subject_head else None

    def components(self) -> dict[str, object]:
        names = ["extractor", "encoder_p", "bottleneck_p", "classifier_p", "encoder_s", "bottleneck_s", "classifier_s"]
        return {n: getattr(self, n) for n in names if getattr(self, n) is not None}

    def parameters(self, *components: str) -> dict[str, Tensor]:
        """Named parameters, optionally restricted to some components."""
        comps = self.components()
        wanted = components or tuple(comps)
        out = {}
        for name in wanted:
            if name not in comps:
                continue
            for k, t in comps[name].parameters().items():
                out[f"{name}.{k}"] = t
        return out

    def bn_states(self) -> dict[str, BatchNormState]:
        return {f"{name}.{k}": s for name, c in self.components().items() for k, s in c.bn_states().items()}

    def parameter_count(self) -> int:
        return sum(t.size for t in self.parameters().values())

    def zero_grad(self) -> None:
        for t in self.parameters().values():
            t.grad = None

    def astype(self, dtype) -> "DualBranchModel":
        """Convert parameters and statistics in place (float64 for gradient checks)."""
        for t in self.parameters().values():
            t.data = t.data.astype(dtype)
        for s in self.bn_states().values():
            s.mean = s.mean.astype(dtype)
            s.var = s.var.astype(dtype)
        return self


def build_model(variant, n_patterns: int, n_subjects: int, seed: int = 0,
                window_length: int = WINDOW_LENGTH, n_channels: int = N_CHANNELS) -> DualBranchModel:
    return DualBranchModel(variant, n_patterns, n_subjects, seed, window_length, n_channels)


ALL_PATHS = frozenset({"p", "s", "adv_s", "adv_p"})


@dataclass
class ForwardOutputs:
    """Intermediate features and logits of one forward pass.

    Probability views (``y_p`` and friends) are softmax of the stored logits.
    Paths that weren't computed are ``None``.
    """

    z: Tensor
    z_p: Optional[Tensor] = None
    z_s: Optional[Tensor] = None
    logits_p: Optional[Tensor] = None
    logits_s: Optional[Tensor] = None
    logits_adv_s: Optional[Tensor] = None
    logits_adv_p: Optional[Tensor] = None
    shapes: dict = field(default_factory=dict)

    @staticmethod
    def _probs(t: Optional[Tensor]) -> Optional[np.ndarray]:
        return None if t is None else softmax(t.data)

    @property
    def y_p(self):
        return self._probs(self.logits_p)

    @property
    def y_s(self):
        return self._probs(self.logits_s)

    @property
    def y_adv_s(self):
        return self._probs(self.logits_adv_s)

    @property
    def y_adv_p(self):
        return self._probs(self.logits_adv_p)


def available_paths(variant: Variant) -> frozenset:
    v = Variant(variant)
    paths = {"p"}
    if v.has_subject_branch:
        paths.add("s")
    if v is Variant.PROPOSED:
        paths |= {"adv_s", "adv_p"}
    if v is Variant.PONLY:
        paths.add("adv_s")
    return frozenset(paths)


def forward(model: DualBranchModel, batch, mode: str = "train", lambdas: tuple[float, float] = (0.0, 0.0),
            rng: Optional[np.random.Generator] = None, paths=None,
            scale_adversarial_heads: bool = True) -> ForwardOutputs:
    """Run the network.

    ``lambdas`` is ``(lambda_s, lambda_p)``: ``lambda_s`` drives the reversal
    layer between the pattern bottleneck and the subject classifier,
    ``lambda_p`` the one between the subject bottleneck and the pattern
    classifier. ``paths`` selects which of ``{"p", "s", "adv_s", "adv_p"}`` to
    compute (default: all the variant has); branches not needed by any
    selected path are skipped entirely, so their batch-norm statistics and
    dropout draws are untouched.

    With ``scale_adversarial_heads`` the classifier parameters reached through
    an adversarial path get their gradient scaled by the same lambda, so a
    zero lambda removes the adversarial term completely.
    """
    x = batch if isinstance(batch, Tensor) else Tensor(batch)
    expected = (model.window_length, model.n_channels)
    if x.data.ndim != 3 or x.shape[1:] != expected:
        raise DimensionError(f"forward: expected (N, {expected[0]}, {expected[1]}), got {x.shape}")
    have = available_paths(model.variant)
    paths = have if paths is None else frozenset(paths)
    missing = paths - have
    if missing:
        raise UnsupportedVariantError(f"variant {model.variant.value} has no path(s) {sorted(missing)}")
    lam_s, lam_p = lambdas

    shapes = {"input": x.shape}
    z = model.extractor(x, mode)
    shapes["extractor"] = z.shape
    out = ForwardOutputs(z=z, shapes=shapes)

    if paths & {"p", "adv_s"}:
        e = model.encoder_p(z, mode)
        shapes["encoder_p"] = e.shape
        out.z_p = model.bottleneck_p(e, mode, rng)
        shapes["z_p"] = out.z_p.shape
    if paths & {"s", "adv_p"}:
        e = model.encoder_s(z, mode)
        shapes["encoder_s"] = e.shape
        out.z_s = model.bottleneck_s(e, mode, rng)
        shapes["z_s"] = out.z_s.shape

    if "p" in paths:
        out.logits_p = model.classifier_p(out.z_p)
    if "s" in paths:
        out.logits_s = model.classifier_s(out.z_s)
    if "adv_s" in paths:
        scale = lam_s if scale_adversarial_heads else None
        out.logits_adv_s = model.classifier_s(gradient_reversal(out.z_p, lam_s), grad_scale=scale)
    if "adv_p" in paths:
        scale = lam_p if scale_adversarial_heads else None
        out.logits_adv_p = model.classifier_p(gradient_reversal(out.z_s, lam_p), grad_scale=scale)
    return out


def _chunks(n: int, size: int):
    for start in range(0, n, size):
        yield slice(start, min(start + size, n))


def predict_proba(model: DualBranchModel, windows: np.ndarray, head: str = "p", chunk: int = 256) -> np.ndarray:
    """Eval-mode class probabilities from the pattern (``"p"``) or subject (``"s"``) head."""
    if head not in ("p", "s"):
        raise ValueError(f"head must be 'p' or 's', got {head!r}")
    rows = []
    for sl in _chunks(len(windows), chunk):
        out = forward(model, windows[sl], "eval", paths={head})
        rows.append(out.y_p if head == "p" else out.y_s)
    return np.concatenate(rows) if rows else np.zeros((0, model.n_patterns if head == "p" else model.n_subjects))


def export_features(model: DualBranchModel, windows, which: str = "pattern", chunk: int = 256) -> np.ndarray:
    """Eval-mode features: ``original`` (flattened extractor output),
    ``pattern`` (z_p) or ``subject`` (z_s)."""
    windows = windows.data if isinstance(windows, Tensor) else np.asarray(windows, dtype=np.float32)
    if which == "subject" and not model.variant.has_subject_branch:
        raise UnsupportedVariantError(f"variant {model.variant.value} has no subject-specific features")
    if which not in ("original", "pattern", "subject"):
        raise ValueError(f"unknown feature kind {which!r}")
    rows = []
    for sl in _chunks(len(windows), chunk):
        x = Tensor(windows[sl])
        z = model.extractor(x, "eval")
        if which == "original":
            rows.append(z.data.reshape(z.shape[0], -1))
        elif which == "pattern":
            rows.append(model.bottleneck_p(model.encoder_p(z, "eval"), "eval", None).data)
        else:
            rows.append(model.bottleneck_s(model.encoder_s(z, "eval"), "eval", None).data)
    return np.concatenate(rows)


# -- checkpoints ---------------------------------------------------------------

_MAGIC = b"EMGDCKPT"
_VERSION = 1


class CheckpointError(ValueError):
    pass


def save_checkpoint(model: DualBranchModel, path, metadata: Optional[dict] = None) -> Path:
    """Write parameters and BN statistics to a single byte-stable file.

    Layout: 8-byte magic, uint32 version, uint64 header length, UTF-8 JSON
    header (sorted keys), then every array as little-endian raw bytes in
    header order.
    """
    path = Path(path)
    arrays: list[tuple[str, str, np.ndarray]] = []
    for name, t in model.parameters().items():
        arrays.append((name, "param", t.data))
    for name, s in model.bn_states().items():
        arrays.append((name + ".running_mean", "bn_mean", s.mean))
        arrays.append((name + ".running_var", "bn_var", s.var))
    entries, blobs, offset = [], [], 0
    for name, kind, arr in arrays:
        a = np.ascontiguousarray(arr, dtype=arr.dtype.newbyteorder("<"))
        raw = a.tobytes()
        entries.append({"name": name, "kind": kind, "shape": list(a.shape), "dtype": a.dtype.str,
                        "offset": offset, "nbytes": len(raw)})
        blobs.append(raw)
        offset += len(raw)
    header = {
        "variant": model.variant.value,
        "seed": model.seed,
        "n_patterns": model.n_patterns,
        "n_subjects": model.n_subjects,
        "window_length": model.window_length,
        "n_channels": model.n_channels,
        "bn_updates": {name: s.updates for name, s in model.bn_states().items()},
        "tensors": entries,
        "metadata": metadata or {},
    }
    head = json.dumps(header, sort_keys=True, separators=(",", ":")).encode("utf-8")
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "wb") as f:
        f.write(_MAGIC)
        f.write(struct.pack("<IQ", _VERSION, len(head)))
        f.write(head)
        for raw in blobs:
            f.write(raw)
    return path


def load_checkpoint(path) -> tuple[DualBranchModel, dict]:
    """Inverse of :func:`save_checkpoint`; returns ``(model, metadata)``."""
    path = Path(path)
    try:
        blob = path.read_bytes()
    except OSError as exc:
        raise CheckpointError(f"cannot read checkpoint {path}: {exc}") from exc
    if blob[:8] != _MAGIC:
        raise CheckpointError(f"{path} is not a checkpoint file")
    version, hlen = struct.unpack("<IQ", blob[8:20])
    if version != _VERSION:
        raise CheckpointError(f"{path}: unsupported checkpoint version {version}")
    header = json.loads(blob[20:20 + hlen].decode("utf-8"))
    body = memoryview(blob)[20 + hlen:]
    model = build_model(header["variant"], header["n_patterns"], header["n_subjects"], header["seed"],
                        header["window_length"], header["n_channels"])
    params = model.parameters()
    states = model.bn_states()
    for e in header["tensors"]:
        arr = np.frombuffer(body[e["offset"]:e["offset"] + e["nbytes"]], dtype=np.dtype(e["dtype"]))
        arr = arr.reshape(e["shape"]).astype(np.dtype(e["dtype"]).newbyteorder("="))
        name = e["name"]
        if e["kind"] == "param":
            if name not in params or params[name].shape != arr.shape:
                raise CheckpointError(f"{path}: unexpected parameter {name} {arr.shape}")
            params[name].data = arr.copy()
        else:
            base = name.rsplit(".", 1)[0]
            if base not in states:
                raise CheckpointError(f"{path}: unexpected batch-norm state {name}")
            if e["kind"] == "bn_mean":
                states[base].mean = arr.copy()
            else:
                states[base].var = arr.copy()
    for name, n in header.get("bn_updates", {}).items():
        states[name].updates = n
    return model, header["metadata"]
