"""Recordings, sliding windows, subject-wise folds and the synthetic generator."""

from __future__ import annotations

import csv
import json
import logging
import warnings
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Iterable, Optional, Sequence

import numpy as np

logger = logging.getLogger(__name__)

WINDOW_SAMPLES = 408
STEP_SAMPLES = 20
N_FOLDS = 4
STD_FLOOR = 1e-8


class DataError(ValueError):
    """Invalid dataset content or configuration."""


@dataclass
class Recording:
    subject_id: int
    gesture_id: int
    trial_id: int
    sample_rate: float
    signal: np.ndarray  # (T, D) float32

    @property
    def n_samples(self) -> int:
        return self.signal.shape[0]

    @property
    def n_channels(self) -> int:
        return self.signal.shape[1]


def sliding_window(recording: Recording, window_samples: int = WINDOW_SAMPLES,
                   step_samples: int = STEP_SAMPLES) -> np.ndarray:
    """Cut a recording into windows starting at 0, step, 2*step, ...

    Returns an array ``(n, window_samples, D)``; the trailing partial window is
    dropped. A recording shorter than one window yields an empty array and a
    warning.
    """
    if window_samples < 1 or step_samples < 1:
        raise ValueError("window and step must be positive")
    sig = recording.signal
    t, d = sig.shape
    if t < window_samples:
        warnings.warn(
            f"recording subject={recording.subject_id} gesture={recording.gesture_id} "
            f"trial={recording.trial_id} has {t} samples < window {window_samples}; skipped",
            stacklevel=2,
        )
        return np.zeros((0, window_samples, d), dtype=sig.dtype)
    count = (t - window_samples) // step_samples + 1
    view = np.lib.stride_tricks.sliding_window_view(sig, window_samples, axis=0)  # (T-W+1, D, W)
    return np.ascontiguousarray(view[::step_samples][:count].transpose(0, 2, 1))


def window_count(n_samples: int, window_samples: int = WINDOW_SAMPLES, step_samples: int = STEP_SAMPLES) -> int:
    if n_samples < window_samples:
        return 0
    return (n_samples - window_samples) // step_samples + 1


@dataclass
class FoldPlan:
    """Subject -> fold assignment for subject-wise cross-validation."""

    assignments: dict[int, int]
    seed: int
    n_folds: int = N_FOLDS

    def test_subjects(self, fold: int) -> list[int]:
        self._check(fold)
        return sorted(s for s, f in self.assignments.items() if f == fold)

    def train_subjects(self, fold: int) -> list[int]:
        self._check(fold)
        return sorted(s for s, f in self.assignments.items() if f != fold)

    def group_sizes(self) -> list[int]:
        return [sum(1 for f in self.assignments.values() if f == k) for k in range(self.n_folds)]

    def _check(self, fold: int) -> None:
        if not 0 <= fold < self.n_folds:
            raise DataError(f"fold index {fold} outside 0..{self.n_folds - 1}")

    def to_dict(self) -> dict:
        return {"seed": self.seed, "n_folds": self.n_folds,
                "assignments": {str(k): v for k, v in sorted(self.assignments.items())}}

    @classmethod
    def from_dict(cls, d: dict) -> "FoldPlan":
        return cls({int(k): int(v) for k, v in d["assignments"].items()}, int(d["seed"]), int(d["n_folds"]))


def make_folds(subject_ids: Sequence[int], n_folds: int = N_FOLDS, seed: int = 0) -> FoldPlan:
    """Shuffle subjects with ``seed`` and deal them round-robin into folds."""
    ids = [int(s) for s in subject_ids]
    if len(set(ids)) != len(ids):
        dupes = sorted({s for s in ids if ids.count(s) > 1})
        raise DataError(f"duplicate subject ids: {dupes}")
    if len(ids) < n_folds:
        raise DataError(f"{len(ids)} subjects cannot fill {n_folds} folds")
    order = np.random.default_rng(seed).permutation(sorted(ids))
    return FoldPlan({int(s): i % n_folds for i, s in enumerate(order)}, seed, n_folds)


@dataclass
class WindowedDataset:
    """Windows plus labels for one split of one fold.

    ``pattern_index`` indexes ``gesture_ids``; ``subject_index`` indexes
    ``train_subjects`` and is -1 for subjects outside the training split,
    whose identity is kept in ``subject_id`` for grouping only.
    """

    windows: np.ndarray  # (N, L, D) float32
    pattern_index: np.ndarray  # (N,) int
    subject_id: np.ndarray  # (N,) int
    subject_index: np.ndarray  # (N,) int, -1 if not a training subject
    gesture_ids: list[int]
    train_subjects: list[int]
    split: str = "train"
    mean: Optional[np.ndarray] = None
    std: Optional[np.ndarray] = None
    normalized: bool = False

    def __len__(self) -> int:
        return len(self.windows)

    @property
    def n_patterns(self) -> int:
        return len(self.gesture_ids)

    @property
    def n_subjects(self) -> int:
        return len(self.train_subjects)

    @property
    def gesture_of(self) -> np.ndarray:
        return np.asarray(self.gesture_ids)[self.pattern_index]

    def pattern_onehot(self, idx=slice(None)) -> np.ndarray:
        return np.eye(self.n_patterns, dtype=np.float32)[self.pattern_index[idx]]

    def subject_onehot(self, idx=slice(None)) -> np.ndarray:
        si = self.subject_index[idx]
        if np.any(si < 0):
            raise DataError("subject one-hot labels exist only for training subjects")
        return np.eye(self.n_subjects, dtype=np.float32)[si]

    def subset(self, idx) -> "WindowedDataset":
        return WindowedDataset(self.windows[idx], self.pattern_index[idx], self.subject_id[idx],
                               self.subject_index[idx], self.gesture_ids, self.train_subjects,
                               self.split, self.mean, self.std, self.normalized)


def channel_stats(windows: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Per-channel mean and (floored) std over every sample of every window."""
    flat = windows.reshape(-1, windows.shape[-1]).astype(np.float64)
    return flat.mean(axis=0), np.maximum(flat.std(axis=0), STD_FLOOR)


def normalize(dataset: WindowedDataset, mean: Optional[np.ndarray] = None,
              std: Optional[np.ndarray] = None) -> WindowedDataset:
    """Z-score each channel with training-split statistics.

    Uses ``mean``/``std`` if given, else the statistics stored on the dataset.
    """
    mean = dataset.mean if mean is None else np.asarray(mean, dtype=np.float64)
    std = dataset.std if std is None else np.asarray(std, dtype=np.float64)
    if mean is None or std is None:
        raise DataError("normalization needs training-split statistics")
    std = np.maximum(std, STD_FLOOR)
    w = ((dataset.windows - mean) / std).astype(np.float32)
    out = dataset.subset(slice(None))
    out.windows, out.mean, out.std, out.normalized = w, mean, std, True
    return out


def _windows_for(recordings: Iterable[Recording], window: int, step: int):
    parts, gestures, subjects = [], [], []
    for rec in recordings:
        w = sliding_window(rec, window, step)
        if len(w):
            parts.append(w)
            gestures.append(np.full(len(w), rec.gesture_id))
            subjects.append(np.full(len(w), rec.subject_id))
    return parts, gestures, subjects


def build_split(recordings: Sequence[Recording], subjects: Sequence[int], gesture_ids: Sequence[int],
                train_subjects: Sequence[int], split: str, window: int = WINDOW_SAMPLES,
                step: int = STEP_SAMPLES) -> WindowedDataset:
    """Window every recording of ``subjects``, ordered by (subject, gesture, trial)."""
    wanted = set(subjects)
    recs = sorted((r for r in recordings if r.subject_id in wanted),
                  key=lambda r: (r.subject_id, r.gesture_id, r.trial_id))
    parts, gestures, subj = _windows_for(recs, window, step)
    d = recordings[0].n_channels if recordings else 0
    if parts:
        windows = np.concatenate(parts).astype(np.float32, copy=False)
        g = np.concatenate(gestures)
        s = np.concatenate(subj)
    else:
        windows = np.zeros((0, window, d), np.float32)
        g = s = np.zeros(0, dtype=int)
    gmap = {gid: i for i, gid in enumerate(gesture_ids)}
    smap = {sid: i for i, sid in enumerate(train_subjects)}
    unknown = set(g.tolist()) - set(gmap)
    if unknown:
        raise DataError(f"gesture ids {sorted(unknown)} not in the label space {list(gesture_ids)}")
    pattern_index = np.array([gmap[x] for x in g.tolist()], dtype=np.int64)
    subject_index = np.array([smap.get(x, -1) for x in s.tolist()], dtype=np.int64)
    return WindowedDataset(windows, pattern_index, s.astype(np.int64), subject_index,
                           list(gesture_ids), list(train_subjects), split)


def build_fold(recordings: Sequence[Recording], plan: FoldPlan, fold: int, window: int = WINDOW_SAMPLES,
               step: int = STEP_SAMPLES, normalize_channels: bool = True,
               exclude_subjects: Iterable[int] = ()) -> tuple[WindowedDataset, WindowedDataset]:
    """Training and test datasets for one fold.

    Normalization statistics come from the training windows only and are
    applied to both splits.
    """
    excluded = set(exclude_subjects)
    recordings = [r for r in recordings if r.subject_id not in excluded]
    gesture_ids = sorted({r.gesture_id for r in recordings})
    train_subjects = [s for s in plan.train_subjects(fold) if s not in excluded]
    test_subjects = [s for s in plan.test_subjects(fold) if s not in excluded]
    train = build_split(recordings, train_subjects, gesture_ids, train_subjects, "train", window, step)
    test = build_split(recordings, test_subjects, gesture_ids, train_subjects, "test", window, step)
    if len(train) == 0:
        raise DataError(f"fold {fold} has no training windows")
    mean, std = channel_stats(train.windows)
    train.mean = test.mean = mean
    train.std = test.std = std
    if normalize_channels:
        train, test = normalize(train), normalize(test)
    return train, test


# -- synthetic generator -----------------------------------------------------------


@dataclass
class SynthConfig:
    """Knobs for the synthetic multi-subject EMG generator.

    ``mixing`` is the subject-mixing strength alpha; ``noise`` is sigma.
    """

    n_subjects: int = 8
    n_gestures: int = 4
    trials: int = 3
    duration: float = 1.0
    sample_rate: float = 2048.0
    noise: float = 0.1
    mixing: float = 0.5
    seed: int = 0
    n_channels: int = 8
    components: int = 3
    band: tuple = (20.0, 200.0)

    def validate(self) -> "SynthConfig":
        for name in ("n_subjects", "n_gestures", "trials"):
            if int(getattr(self, name)) < 2:
                raise DataError(f"{name} must be >= 2, got {getattr(self, name)}")
        if self.n_channels < 1:
            raise DataError(f"n_channels must be >= 1, got {self.n_channels}")
        if self.noise < 0:
            raise DataError(f"noise must be >= 0, got {self.noise}")
        if self.mixing < 0:
            raise DataError(f"mixing must be >= 0, got {self.mixing}")
        if self.sample_rate <= 0:
            raise DataError(f"sample_rate must be > 0, got {self.sample_rate}")
        if self.duration <= 0:
            raise DataError(f"duration must be > 0, got {self.duration}")
        lo, hi = self.band
        if not 0 < lo < hi <= self.sample_rate / 2:
            raise DataError(f"band must satisfy 0 < low < high <= Nyquist, got {self.band}")
        return self

    @classmethod
    def from_dict(cls, d: dict) -> "SynthConfig":
        known = set(cls.__dataclass_fields__)
        extra = set(d) - known
        if extra:
            raise DataError(f"unknown synth config field(s): {sorted(extra)}")
        d = dict(d)
        if "band" in d:
            d["band"] = tuple(d["band"])
        return cls(**d).validate()

    def to_dict(self) -> dict:
        d = asdict(self)
        d["band"] = list(self.band)
        return d


# stream tags for independent generator substreams
_GESTURE, _SUBJECT, _TRIAL, _NOISE = 1, 2, 3, 4


def _gesture_source(cfg: SynthConfig, g: int, trial: int, t: np.ndarray) -> np.ndarray:
    """Latent (T, D) source for gesture ``g``: per channel, a sum of sinusoids in
    ``cfg.band`` under a slow amplitude envelope. Frequencies, amplitudes and
    envelopes depend on the gesture; the trial only shifts phases."""
    rng = np.random.default_rng([cfg.seed, _GESTURE, g])
    d, k = cfg.n_channels, cfg.components
    lo, hi = cfg.band
    freqs = rng.uniform(lo, hi, size=(d, k))
    amps = rng.uniform(0.2, 1.0, size=(d, k)) * rng.uniform(0.1, 1.0, size=(d, 1))
    env_freq = rng.uniform(0.5, 3.0, size=d)
    env_depth = rng.uniform(0.2, 0.8, size=d)
    trial_rng = np.random.default_rng([cfg.seed, _TRIAL, g, trial])
    phases = trial_rng.uniform(0, 2 * np.pi, size=(d, k))
    env_phase = trial_rng.uniform(0, 2 * np.pi, size=d)
    carrier = np.sin(2 * np.pi * freqs[None] * t[:, None, None] + phases[None])  # (T, D, K)
    s = (carrier * amps[None]).sum(axis=2)
    env = 1.0 + env_depth * np.sin(2 * np.pi * env_freq * t[:, None] + env_phase)
    return s * env


def subject_transform(cfg: SynthConfig, u: int) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Mixing matrix ``I + alpha*R``, per-channel gain and offset for subject ``u``.

    Gain and offset deviations are scaled by alpha too, so alpha = 0 makes
    every subject identical.
    """
    rng = np.random.default_rng([cfg.seed, _SUBJECT, u])
    d = cfg.n_channels
    a = np.eye(d) + cfg.mixing * rng.standard_normal((d, d))
    gain = np.exp(cfg.mixing * 0.3 * rng.standard_normal(d))
    offset = cfg.mixing * 0.5 * rng.standard_normal(d)
    return a, gain, offset


def synthesize(cfg: SynthConfig) -> list[Recording]:
    """Generate recordings ``X(t) = gain * (A_u s_g(t)) + offset_u + noise``.

    Output is ordered by (subject, gesture, trial) and fully determined by
    the seed. Subject ids start at 1, gesture ids at 1, trial ids at 1.
    """
    cfg.validate()
    n = int(round(cfg.duration * cfg.sample_rate))
    t = np.arange(n) / cfg.sample_rate
    sources = {(g, r): _gesture_source(cfg, g, r, t)
               for g in range(1, cfg.n_gestures + 1) for r in range(1, cfg.trials + 1)}
    out = []
    for u in range(1, cfg.n_subjects + 1):
        a, gain, offset = subject_transform(cfg, u)
        for g in range(1, cfg.n_gestures + 1):
            for r in range(1, cfg.trials + 1):
                x = (sources[(g, r)] @ a.T) * gain + offset
                if cfg.noise > 0:
                    x = x + cfg.noise * np.random.default_rng([cfg.seed, _NOISE, u, g, r]).standard_normal(x.shape)
                out.append(Recording(u, g, r, float(cfg.sample_rate), x.astype(np.float32)))
    return out


# -- interchange format ----------------------------------------------------------

MANIFEST = "manifest.json"


def recording_filename(rec: Recording) -> str:
    return f"s{rec.subject_id:03d}_g{rec.gesture_id:02d}_t{rec.trial_id:02d}.f32"


def save_dataset(recordings: Sequence[Recording], directory, exclude_subjects: Sequence[int] = (),
                 extra: Optional[dict] = None) -> Path:
    """Write ``manifest.json`` plus one little-endian float32 file per recording."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    entries = []
    for rec in recordings:
        name = recording_filename(rec)
        np.ascontiguousarray(rec.signal, dtype="<f4").tofile(directory / name)
        entries.append({"subject_id": int(rec.subject_id), "gesture_id": int(rec.gesture_id),
                        "trial_id": int(rec.trial_id), "sample_rate": float(rec.sample_rate),
                        "channels": int(rec.n_channels), "samples": int(rec.n_samples), "file": name})
    manifest = {"version": 1, "exclude_subjects": [int(s) for s in exclude_subjects], "recordings": entries}
    if extra:
        manifest.update(extra)
    path = directory / MANIFEST
    path.write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    return path


_REQUIRED = ("subject_id", "gesture_id", "trial_id", "sample_rate", "channels", "file", "samples")


def _read_csv(path: Path, channels: int) -> np.ndarray:
    with open(path, newline="") as f:
        reader = csv.reader(f)
        header = next(reader, None)
        expected = [f"ch{i}" for i in range(channels)]
        if header is None or [h.strip() for h in header] != expected:
            raise DataError(f"{path}: header {header} does not match expected {expected}")
        rows = []
        for lineno, row in enumerate(reader, start=2):
            if len(row) != channels:
                raise DataError(f"{path}: line {lineno} has {len(row)} columns, manifest says {channels}")
            rows.append([float(v) for v in row])
    return np.asarray(rows, dtype=np.float32).reshape(-1, channels)


def load_manifest(path) -> list[Recording]:
    """Read a dataset directory (or its ``manifest.json``) into recordings.

    Optional top-level ``subjects`` / ``gestures`` lists restrict the ids a
    recording may use. Recordings of subjects in ``exclude_subjects`` are
    dropped.
    """
    path = Path(path)
    manifest_path = path / MANIFEST if path.is_dir() else path
    if not manifest_path.exists():
        raise DataError(f"manifest not found: {manifest_path}")
    try:
        manifest = json.loads(manifest_path.read_text())
    except json.JSONDecodeError as exc:
        raise DataError(f"{manifest_path}: invalid JSON ({exc})") from exc
    root = manifest_path.parent
    allowed_subjects = set(manifest["subjects"]) if "subjects" in manifest else None
    allowed_gestures = set(manifest["gestures"]) if "gestures" in manifest else None
    excluded = set(manifest.get("exclude_subjects", []))
    recordings = []
    for i, e in enumerate(manifest.get("recordings", [])):
        missing = [k for k in _REQUIRED if k not in e]
        if missing:
            raise DataError(f"{manifest_path}: recording #{i} lacks {missing}")
        sid, gid = int(e["subject_id"]), int(e["gesture_id"])
        if allowed_subjects is not None and sid not in allowed_subjects:
            raise DataError(f"{e['file']}: unknown subject id {sid}")
        if allowed_gestures is not None and gid not in allowed_gestures:
            raise DataError(f"{e['file']}: unknown gesture id {gid}")
        if sid in excluded:
            continue
        file = root / e["file"]
        if not file.exists():
            raise DataError(f"recording file missing: {file}")
        channels, samples = int(e["channels"]), int(e["samples"])
        if file.suffix.lower() == ".csv":
            sig = _read_csv(file, channels)
        else:
            raw = np.fromfile(file, dtype="<f4")
            if raw.size != channels * samples:
                raise DataError(f"{file}: holds {raw.size} values, manifest expects "
                                f"{samples} x {channels} = {samples * channels}")
            sig = raw.reshape(samples, channels).astype(np.float32)
        if sig.shape != (samples, channels):
            raise DataError(f"{file}: shape {sig.shape} != manifest ({samples}, {channels})")
        recordings.append(Recording(sid, gid, int(e["trial_id"]), float(e["sample_rate"]), sig))
    if not recordings:
        raise DataError(f"{manifest_path}: no recordings")
    return recordings


def manifest_exclusions(path) -> list[int]:
    path = Path(path)
    manifest_path = path / MANIFEST if path.is_dir() else path
    return list(json.loads(manifest_path.read_text()).get("exclude_subjects", []))
