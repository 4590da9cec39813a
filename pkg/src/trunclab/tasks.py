"""Benchmark tasks and their metrics.

pattern_gen  one Gaussian input channel, target ``sum_p sin(2 pi t / p)`` for
             p in (10, 40, 70, 100), unit amplitude and zero phase, t = 0..T-1
             indexing the readout rows; mse on every step.  Training uses a
             single frozen input realisation per seed; the test variant adds
             zero-mean Gaussian noise to it.
dms          delayed match-to-sample: two binary cues of ``cue_len`` steps
             separated by ``delay`` steps, then one response step carrying a
             two-class cross-entropy target (1 = match, 0 = non-match).
             Channel 0 is on while a cue equals 1, channel 1 while it equals 0.
             The batch always holds all four cue pairs.
seq_mnist    28 rows of 28 pixels fed one row per step; the class is read out
             at the last step.
"""
from __future__ import annotations

import gzip
import math
import os
import struct
from dataclasses import dataclass, field, asdict
from pathlib import Path
from typing import Optional

import numpy as np

from .core import LossSpec, NeuronConfig, Trajectory
from .errors import ConfigurationError, IngestionError

PATTERN_PERIODS = (10, 40, 70, 100)
IMAGE_MAGIC = 2051
LABEL_MAGIC = 2049
TASKS = ("pattern_gen", "dms", "seq_mnist")


@dataclass
class TaskBatch:
    inputs: np.ndarray            # (B, T, N_in)
    targets: np.ndarray           # (B, |mask|, N_out) floats for mse, (B, |mask|) ints for cross-entropy
    spec: LossSpec
    meta: dict = field(default_factory=dict)

    @property
    def T(self) -> int:
        return self.inputs.shape[1]


_DEFAULTS = {
    "pattern_gen": dict(n_hidden=30, n_in=1, n_out=1, T=50, n_adaptive=0, activation="relu"),
    "dms": dict(n_hidden=100, n_in=2, n_out=2, T=None, n_adaptive=50, activation="relu"),
    "seq_mnist": dict(n_hidden=128, n_in=28, n_out=10, T=28, n_adaptive=0, activation="relu"),
}


@dataclass
class TaskConfig:
    """Task choice and network sizing; ``None`` fields take per-task defaults."""
    task: str = "pattern_gen"
    n_hidden: Optional[int] = None
    n_adaptive: Optional[int] = None
    T: Optional[int] = None
    activation: Optional[str] = None
    alpha: float = 0.0
    tau_b: float = 20.0
    cue_len: int = 2
    delay: int = 16
    test_noise_sigma: Optional[float] = None    # pattern: None draws from U(0, 0.2) per run
    n_test_delays: int = 5
    mnist_dir: Optional[str] = None
    n_train: int = 2000
    n_test: int = 1000
    mnist_noise_sigma: float = 0.2
    batch_size: Optional[int] = None             # None: full batch

    def __post_init__(self):
        if self.task not in TASKS:
            raise ConfigurationError(f"unknown task {self.task!r}; expected one of {TASKS}")
        if self.delay < 1:
            raise ConfigurationError("dms delay must be >= 1")
        d = _DEFAULTS[self.task]
        for key in ("n_hidden", "n_adaptive", "T", "activation"):
            if getattr(self, key) is None:
                setattr(self, key, d[key])
        if self.task == "dms":
            self.T = 2 * self.cue_len + self.delay + 1
        if self.n_hidden < 1 or self.T < 1:
            raise ConfigurationError("sizes must be positive")

    @property
    def beta(self) -> float:
        return math.exp(-1.0 / self.tau_b) if self.n_adaptive else 0.0

    def neuron_config(self) -> NeuronConfig:
        d = _DEFAULTS[self.task]
        return NeuronConfig(n_hidden=self.n_hidden, n_in=d["n_in"], n_out=d["n_out"],
                            n_adaptive=self.n_adaptive, alpha=self.alpha, beta=self.beta,
                            activation=self.activation)

    @property
    def is_classification(self) -> bool:
        return self.task != "pattern_gen"

    def to_dict(self) -> dict:
        return asdict(self)


# ---------------------------------------------------------------------------
# Pattern generation
# ---------------------------------------------------------------------------

def pattern_target(T: int) -> np.ndarray:
    t = np.arange(T, dtype=float)
    return sum(np.sin(2.0 * np.pi * t / p) for p in PATTERN_PERIODS)


def gen_pattern(cfg: TaskConfig, seed: int, test_noise_sigma: Optional[float] = None) -> TaskBatch:
    """Full-batch pattern task: one frozen input realisation per seed.

    With ``test_noise_sigma`` the same realisation is returned with additive
    Gaussian noise (drawn from an independent stream of the same seed).
    """
    T = cfg.T
    x = np.random.default_rng([seed, 0]).standard_normal((1, T, 1))
    meta = {"task": "pattern_gen", "seed": seed, "noise_sigma": 0.0, "T": T}
    if test_noise_sigma is not None:
        noise = np.random.default_rng([seed, 1]).standard_normal(x.shape)
        x = x + float(test_noise_sigma) * noise
        meta["noise_sigma"] = float(test_noise_sigma)
    y = pattern_target(T).reshape(1, T, 1)
    return TaskBatch(x, y, LossSpec.full(T, "mse"), meta)


# ---------------------------------------------------------------------------
# Delayed match-to-sample
# ---------------------------------------------------------------------------

DMS_CUES = ((0, 0), (0, 1), (1, 0), (1, 1))


def gen_dms(cfg: TaskConfig, seed: int = 0, test_delay: Optional[int] = None) -> TaskBatch:
    """All four cue pairs; ``test_delay`` replaces the training delay."""
    delay = cfg.delay if test_delay is None else int(test_delay)
    if delay < 1:
        raise ConfigurationError("delay must be >= 1")
    c = cfg.cue_len
    T = 2 * c + delay + 1
    x = np.zeros((4, T, 2))
    labels = np.zeros((4, 1), dtype=int)
    for k, (c1, c2) in enumerate(DMS_CUES):
        x[k, :c, 0 if c1 == 1 else 1] = 1.0
        x[k, c + delay: 2 * c + delay, 0 if c2 == 1 else 1] = 1.0
        labels[k, 0] = int(c1 == c2)
    meta = {"task": "dms", "seed": seed, "delay": delay, "T": T, "cue_len": c,
            "classes": {"0": "non-match", "1": "match"}}
    return TaskBatch(x, labels, LossSpec.last("cross_entropy"), meta)


def sample_test_delays(cfg: TaskConfig, seed: int, n: Optional[int] = None) -> list:
    """Test delays drawn uniformly from [delay, 2 * delay]."""
    n = cfg.n_test_delays if n is None else n
    rng = np.random.default_rng([seed, 2])
    return [int(d) for d in rng.integers(cfg.delay, 2 * cfg.delay + 1, size=n)]


# ---------------------------------------------------------------------------
# MNIST (IDX format)
# ---------------------------------------------------------------------------

@dataclass
class MnistDataset:
    images: np.ndarray   # (n, rows, cols) in [0, 1]
    labels: np.ndarray   # (n,) int

    def __len__(self):
        return len(self.labels)

    def subset(self, idx) -> "MnistDataset":
        return MnistDataset(self.images[idx], self.labels[idx])

    def batch(self, idx=None, noise_sigma: float = 0.0, rng: Optional[np.random.Generator] = None) -> TaskBatch:
        """Row-by-row sequences with the class read out at the last step."""
        images = self.images if idx is None else self.images[idx]
        labels = self.labels if idx is None else self.labels[idx]
        x = images.astype(float)
        if noise_sigma:
            rng = rng if rng is not None else np.random.default_rng(0)
            x = x + noise_sigma * rng.standard_normal(x.shape)
        return TaskBatch(x, labels.reshape(-1, 1).astype(int), LossSpec.last("cross_entropy"),
                         {"task": "seq_mnist", "noise_sigma": float(noise_sigma), "T": x.shape[1]})


def _open(path):
    path = Path(path)
    with open(path, "rb") as fh:
        raw = fh.read()
    if raw[:2] == b"\x1f\x8b":
        raw = gzip.decompress(raw)
    return raw


def _read_idx(path, magic: int, ndim: int):
    raw = _open(path)
    header = 4 + 4 * ndim
    if len(raw) < header:
        raise IngestionError(f"file too short for an IDX header ({len(raw)} bytes)", offset=len(raw), path=path)
    got = struct.unpack(">I", raw[:4])[0]
    if got != magic:
        raise IngestionError(f"bad magic number {got} (expected {magic})", offset=0, path=path)
    dims = struct.unpack(">" + "I" * ndim, raw[4:header])
    size = int(np.prod(dims))
    if len(raw) < header + size:
        raise IngestionError(f"truncated data: need {size} bytes after the header, found {len(raw) - header}",
                             offset=len(raw), path=path)
    if len(raw) > header + size:
        raise IngestionError(f"{len(raw) - header - size} trailing bytes", offset=header + size, path=path)
    return np.frombuffer(raw, dtype=np.uint8, count=size, offset=header).reshape(dims)


def load_mnist(images_path, labels_path) -> MnistDataset:
    """Parse big-endian IDX image (magic 2051) and label (magic 2049) files.

    Files may be gzip-compressed.  Pixels are scaled to [0, 1].
    """
    images = _read_idx(images_path, IMAGE_MAGIC, 3)
    labels = _read_idx(labels_path, LABEL_MAGIC, 1)
    if images.shape[0] != labels.shape[0]:
        raise IngestionError(f"{images.shape[0]} images but {labels.shape[0]} labels", offset=4, path=labels_path)
    if labels.size and labels.max() > 9:
        bad = int(np.argmax(labels > 9))
        raise IngestionError(f"label {labels[bad]} out of range", offset=8 + bad, path=labels_path)
    return MnistDataset(images.astype(float) / 255.0, labels.astype(int))


def write_idx_images(path, images, compress: Optional[bool] = None):
    """Write uint8 images (n, rows, cols); floats in [0, 1] are scaled by 255."""
    a = np.asarray(images)
    if a.dtype != np.uint8:
        a = np.clip(np.rint(a * 255.0), 0, 255).astype(np.uint8)
    payload = struct.pack(">IIII", IMAGE_MAGIC, *a.shape) + a.tobytes()
    _write(path, payload, compress)


def write_idx_labels(path, labels, compress: Optional[bool] = None):
    a = np.asarray(labels).astype(np.uint8)
    payload = struct.pack(">II", LABEL_MAGIC, a.shape[0]) + a.tobytes()
    _write(path, payload, compress)


def _write(path, payload: bytes, compress):
    path = Path(path)
    if compress is None:
        compress = path.suffix == ".gz"
    with open(path, "wb") as fh:
        fh.write(gzip.compress(payload, mtime=0) if compress else payload)


MNIST_FILES = {
    "train": ("train-images-idx3-ubyte.gz", "train-labels-idx1-ubyte.gz"),
    "test": ("t10k-images-idx3-ubyte.gz", "t10k-labels-idx1-ubyte.gz"),
}


def mnist_data_dir(explicit: Optional[str] = None) -> Path:
    """Explicit path, else $TRUNCLAB_DATA/mnist, else ./data/mnist."""
    if explicit:
        return Path(explicit)
    env = os.environ.get("TRUNCLAB_DATA")
    if env:
        return Path(env) / "mnist"
    return Path("data") / "mnist"


def load_mnist_split(split: str, data_dir=None) -> MnistDataset:
    d = mnist_data_dir(data_dir)
    img, lab = MNIST_FILES[split]
    for name in (img, lab):
        if not (d / name).exists() and (d / name[:-3]).exists():
            img, lab = img[:-3], lab[:-3]
    return load_mnist(d / img, d / lab)


# ---------------------------------------------------------------------------
# Metrics
# ---------------------------------------------------------------------------

def accuracy(traj: Trajectory, targets, spec: LossSpec) -> float:
    """Classification: fraction of examples whose argmax readout at the last
    masked step matches the target class.  Regression: masked mse
    (``0.5 * mean squared error`` normalised like the loss)."""
    idx = spec.indices(traj.T)
    if spec.kind == "cross_entropy":
        t = np.asarray(targets)
        labels = t[:, -1] if np.issubdtype(t.dtype, np.integer) else np.argmax(t[:, -1], axis=-1)
        pred = np.argmax(traj.y_hat[:, idx[-1]], axis=-1)
        return float(np.mean(pred == labels.ravel()))
    y = np.asarray(targets, dtype=float).reshape(traj.batch_size, len(idx), -1)
    diff = traj.y_hat[:, idx] - y
    return float(0.5 * np.sum(diff * diff) / (spec.denominator(traj.T) * traj.batch_size))


def generalization_gap(train_metric: float, test_metric: float, task: str) -> float:
    """Higher is worse for every task: train - test accuracy for classification,
    test - train error for the regression task."""
    if task == "pattern_gen":
        return float(test_metric - train_metric)
    return float(train_metric - test_metric)
