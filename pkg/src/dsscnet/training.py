"""Class-weighted training with Adam, checkpoints and cross-corpus fine-tuning."""
from __future__ import annotations

import csv
import hashlib
import json
import logging
import struct
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Iterable

import numpy as np

from . import tensor as T
from .model import ArchConfig, Model, build

log = logging.getLogger(__name__)

__all__ = [
    "TrainConfig",
    "Dataset",
    "derive_class_weights",
    "resolve_class_weights",
    "weighted_cross_entropy",
    "cross_entropy_from_probs",
    "Adam",
    "NonFiniteGradientError",
    "train",
    "evaluate_loss",
    "finetune",
    "Checkpoint",
    "save_checkpoint",
    "load_checkpoint",
    "write_log_csv",
]


@dataclass(frozen=True)
class TrainConfig:
    batch_size: int = 16
    learning_rate: float = 1e-3
    epochs: int = 10
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_eps: float = 1e-8
    seed: int = 0
    class_weight_mode: str = "derived"
    class_weights: tuple[float, ...] | None = None

    def validate(self) -> list[str]:
        errors = []
        if self.batch_size < 1:
            errors.append(f"batch_size must be >= 1, got {self.batch_size}")
        if self.epochs < 1:
            errors.append(f"epochs must be >= 1, got {self.epochs}")
        if not self.learning_rate > 0 and self.learning_rate != 0:
            errors.append(f"learning_rate must be > 0, got {self.learning_rate}")
        if self.class_weight_mode not in ("derived", "uniform", "explicit"):
            errors.append(f"class_weight_mode must be derived|uniform|explicit, got {self.class_weight_mode!r}")
        if self.class_weight_mode == "explicit" and not self.class_weights:
            errors.append("class_weight_mode 'explicit' needs class_weights")
        return errors

    def to_dict(self) -> dict:
        d = asdict(self)
        if d["class_weights"] is not None:
            d["class_weights"] = list(d["class_weights"])
        return d


@dataclass
class Dataset:
    """Single-plane feature images with labels; planes are replicated to the
    model's channel count when batched."""

    planes: np.ndarray  # (N, H, W)
    labels: np.ndarray  # (N,)
    ids: list[str] = field(default_factory=list)
    speakers: list[str] = field(default_factory=list)

    def __post_init__(self):
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if len(self.planes) != len(self.labels):
            raise ValueError("planes and labels differ in length")
        if not self.ids:
            self.ids = [str(i) for i in range(len(self.labels))]

    def __len__(self) -> int:
        return len(self.labels)

    def batch(self, idx, channels: int = 3, dtype=np.float32) -> np.ndarray:
        p = self.planes[idx].astype(dtype, copy=False)
        return np.repeat(p[:, None], channels, axis=1)

    def subset(self, idx) -> "Dataset":
        idx = np.asarray(idx, dtype=np.intp)
        return Dataset(
            self.planes[idx],
            self.labels[idx],
            [self.ids[i] for i in idx],
            [self.speakers[i] for i in idx] if self.speakers else [],
        )

    def class_counts(self, n_classes: int) -> np.ndarray:
        return np.bincount(self.labels, minlength=n_classes)


# --------------------------------------------------------------------------
# loss


def derive_class_weights(counts: Iterable[int], normalize: bool = True) -> np.ndarray:
    """``w_c = N / (C * N_c)``, optionally rescaled to mean 1."""
    counts = np.asarray(list(counts), dtype=np.float64)
    if np.any(counts <= 0):
        missing = [i for i, c in enumerate(counts) if c <= 0]
        raise ValueError(
            f"class(es) {missing} have no samples; use class_weight_mode 'uniform' or 'explicit'"
        )
    w = counts.sum() / (len(counts) * counts)
    return w / w.mean() if normalize else w


def resolve_class_weights(config: TrainConfig, counts: np.ndarray) -> np.ndarray:
    n = len(counts)
    if config.class_weight_mode == "uniform":
        return np.ones(n)
    if config.class_weight_mode == "explicit":
        w = np.asarray(config.class_weights, dtype=np.float64)
        if w.shape != (n,) or np.any(w <= 0):
            raise ValueError(f"explicit class_weights must be {n} positive values, got {list(w)}")
        return w
    return derive_class_weights(counts)


def weighted_cross_entropy(logits, labels, weights):
    """Mean over the batch of ``-w[y] * log softmax(logits)[y]``.

    ``logits`` is ``(N, C)`` or ``(C,)``; works on arrays or tape variables.
    """
    z = T._data(logits)
    single = z.ndim == 1
    z2 = z[None] if single else z
    y = np.atleast_1d(np.asarray(labels, dtype=np.intp))
    w = np.asarray(weights, dtype=z.dtype)
    n, c = z2.shape
    if y.shape != (n,) or np.any(y < 0) or np.any(y >= c):
        raise ValueError(f"labels must be {n} class indices below {c}, got {y}")
    shifted = z2 - z2.max(axis=1, keepdims=True)
    logp = shifted - np.log(np.exp(shifted).sum(axis=1, keepdims=True))
    wy = w[y]
    loss = np.asarray(-(wy * logp[np.arange(n), y]).sum() / n, dtype=z.dtype)

    tape = T._tape_of(logits)
    if tape is None:
        return loss

    def backward(g, needs):
        grad = np.exp(logp)
        grad[np.arange(n), y] -= 1.0
        grad *= (g * wy / n)[:, None]
        return (grad[0] if single else grad,)

    return tape.record(loss, (logits,), backward)


def cross_entropy_from_probs(probs, label: int, weight: float = 1.0) -> float:
    """``-weight * log(probs[label])`` for a single probability vector."""
    p = float(np.asarray(probs)[label])
    return -weight * np.log(p) if p > 0 else np.inf


# --------------------------------------------------------------------------
# optimizer


class NonFiniteGradientError(FloatingPointError):
    def __init__(self, path: str):
        super().__init__(f"non-finite gradient for parameter {path!r}")
        self.path = path


class Adam:
    """Adam with bias correction. Moments live alongside the parameters."""

    def __init__(self, lr: float = 1e-3, beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.m: dict[str, np.ndarray] = {}
        self.v: dict[str, np.ndarray] = {}
        self.t = 0

    @classmethod
    def from_config(cls, config: TrainConfig) -> "Adam":
        return cls(config.learning_rate, config.adam_beta1, config.adam_beta2, config.adam_eps)

    def step(self, params: dict[str, np.ndarray], grads: dict[str, np.ndarray]) -> None:
        for path, g in grads.items():
            if not np.all(np.isfinite(g)):
                raise NonFiniteGradientError(path)
        self.t += 1
        bc1 = 1.0 - self.beta1**self.t
        bc2 = 1.0 - self.beta2**self.t
        for path, g in grads.items():
            p = params[path]
            if path not in self.m:
                self.m[path] = np.zeros_like(p)
                self.v[path] = np.zeros_like(p)
            m, v = self.m[path], self.v[path]
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * (g * g)
            update = (self.lr / bc1) * m / (np.sqrt(v / bc2) + self.eps)
            p -= update.astype(p.dtype, copy=False)


# --------------------------------------------------------------------------
# training loop


def _batches(n: int, batch_size: int, rng: np.random.Generator | None):
    order = rng.permutation(n) if rng is not None else np.arange(n)
    for i in range(0, n, batch_size):
        yield order[i : i + batch_size]


def train(
    model: Model,
    dataset: Dataset,
    config: TrainConfig,
    class_weights: np.ndarray | None = None,
    optimizer: Adam | None = None,
    split: str = "train",
) -> tuple[Model, list[dict]]:
    """Train ``model`` in place; return it with one log row per epoch.

    Log rows carry ``epoch, split, loss, accuracy`` where loss is the
    sample-weighted mean of batch losses and accuracy is measured on the
    training-mode predictions made during the epoch.
    """
    errors = config.validate()
    if errors:
        raise ValueError("invalid TrainConfig: " + "; ".join(errors))
    if len(dataset) == 0:
        raise ValueError("cannot train on an empty dataset")
    n_classes = model.config.n_classes
    if dataset.labels.min() < 0 or dataset.labels.max() >= n_classes:
        raise ValueError(f"labels must lie in [0, {n_classes}), got range "
                         f"[{dataset.labels.min()}, {dataset.labels.max()}]")
    if class_weights is None:
        class_weights = resolve_class_weights(config, dataset.class_counts(n_classes))
    opt = optimizer or Adam.from_config(config)
    rng = np.random.default_rng(config.seed)
    channels = model.config.in_channels

    rows = []
    for epoch in range(1, config.epochs + 1):
        total_loss = 0.0
        correct = 0
        for idx in _batches(len(dataset), config.batch_size, rng):
            xb = dataset.batch(idx, channels, model.dtype)
            yb = dataset.labels[idx]
            tape = T.GradTape()
            logits, _ = model.forward_taped(tape, xb, training=True)
            loss = weighted_cross_entropy(logits, yb, class_weights)
            grads = tape.backward(loss)
            opt.step(model.params, grads)
            total_loss += float(loss.data) * len(idx)
            correct += int((logits.data.argmax(axis=1) == yb).sum())
        row = {
            "epoch": epoch,
            "split": split,
            "loss": total_loss / len(dataset),
            "accuracy": correct / len(dataset),
        }
        log.info("epoch %d loss %.4f acc %.4f", epoch, row["loss"], row["accuracy"])
        rows.append(row)
    return model, rows


def evaluate_loss(model: Model, dataset: Dataset, class_weights=None, batch_size: int = 32) -> float:
    """Eval-mode weighted cross-entropy averaged over all samples."""
    n_classes = model.config.n_classes
    w = np.ones(n_classes) if class_weights is None else class_weights
    total = 0.0
    for idx in _batches(len(dataset), batch_size, None):
        out = model.forward(dataset.batch(idx, model.config.in_channels, model.dtype))
        total += float(weighted_cross_entropy(out.logits, dataset.labels[idx], w)) * len(idx)
    return total / len(dataset)


def write_log_csv(rows: list[dict], path) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=["epoch", "split", "loss", "accuracy"])
        writer.writeheader()
        for r in rows:
            writer.writerow({k: r[k] for k in writer.fieldnames})


# --------------------------------------------------------------------------
# checkpoints

CKPT_MAGIC = b"DSCK"
CKPT_VERSION = 1
_DTYPES = {1: np.dtype("<f4"), 2: np.dtype("<f8")}
_DTYPE_CODES = {np.dtype("float32"): 1, np.dtype("float64"): 2}


@dataclass
class Checkpoint:
    arch: ArchConfig
    params: T.ParamSet
    bn_state: dict[str, T.BatchNormState]
    optimizer: Adam | None = None
    provenance: dict = field(default_factory=dict)

    def to_model(self) -> Model:
        return Model(self.arch, self.params.copy(), {k: s.copy() for k, s in self.bn_state.items()})


def _canonical_json(obj) -> bytes:
    return json.dumps(obj, sort_keys=True, separators=(",", ":")).encode("utf-8")


def config_hash(obj) -> str:
    return hashlib.sha256(_canonical_json(obj)).hexdigest()[:16]


def save_checkpoint(path, model: Model, optimizer: Adam | None = None, provenance: dict | None = None) -> Path:
    tensors: dict[str, np.ndarray] = {}
    for k, v in model.params.items():
        tensors[f"param/{k}"] = v
    bn_meta = {}
    for k, s in model.bn_state.items():
        tensors[f"bn/{k}/mean"] = s.mean
        tensors[f"bn/{k}/var"] = s.var
        bn_meta[k] = {"momentum": s.momentum, "eps": s.eps}
    adam_meta = None
    if optimizer is not None:
        adam_meta = {"lr": optimizer.lr, "beta1": optimizer.beta1, "beta2": optimizer.beta2,
                     "eps": optimizer.eps, "t": optimizer.t}
        for k in optimizer.m:
            tensors[f"adam/m/{k}"] = optimizer.m[k]
            tensors[f"adam/v/{k}"] = optimizer.v[k]
    header = _canonical_json({
        "arch": model.config.to_dict(),
        "bn": bn_meta,
        "adam": adam_meta,
        "provenance": provenance or {},
    })
    parts = [CKPT_MAGIC, struct.pack("<HI", CKPT_VERSION, len(header)), header,
             struct.pack("<I", len(tensors))]
    for name in sorted(tensors):
        arr = np.asarray(tensors[name])
        code = _DTYPE_CODES.get(arr.dtype)
        if code is None:
            raise TypeError(f"cannot serialize {name} with dtype {arr.dtype}")
        key = name.encode("utf-8")
        parts.append(struct.pack("<H", len(key)) + key)
        parts.append(struct.pack("<BB", code, arr.ndim) + struct.pack(f"<{arr.ndim}I", *arr.shape))
        parts.append(np.ascontiguousarray(arr, dtype=_DTYPES[code]).tobytes())
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_bytes(b"".join(parts))
    return path


def load_checkpoint(path) -> Checkpoint:
    blob = Path(path).read_bytes()
    if blob[:4] != CKPT_MAGIC:
        raise ValueError(f"{path}: not a checkpoint (bad magic)")
    version, hlen = struct.unpack_from("<HI", blob, 4)
    if version != CKPT_VERSION:
        raise ValueError(f"{path}: unsupported checkpoint version {version}")
    pos = 10
    header = json.loads(blob[pos : pos + hlen])
    pos += hlen
    (count,) = struct.unpack_from("<I", blob, pos)
    pos += 4
    tensors = {}
    for _ in range(count):
        (klen,) = struct.unpack_from("<H", blob, pos)
        pos += 2
        name = blob[pos : pos + klen].decode("utf-8")
        pos += klen
        code, ndim = struct.unpack_from("<BB", blob, pos)
        pos += 2
        shape = struct.unpack_from(f"<{ndim}I", blob, pos)
        pos += 4 * ndim
        dt = _DTYPES[code]
        size = int(np.prod(shape, dtype=np.int64)) if ndim else 1
        arr = np.frombuffer(blob, dtype=dt, count=size, offset=pos).reshape(shape)
        pos += size * dt.itemsize
        tensors[name] = arr.astype(dt.newbyteorder("="), copy=True)

    arch = ArchConfig.from_dict(header["arch"])
    params = T.ParamSet()
    bn = {}
    for name, arr in tensors.items():
        if name.startswith("param/"):
            params[name[6:]] = arr
    for k, meta in header["bn"].items():
        bn[k] = T.BatchNormState(tensors[f"bn/{k}/mean"], tensors[f"bn/{k}/var"], meta["momentum"], meta["eps"])
    # restore build order so forward/backward and re-saves are unaffected
    order = list(build(arch, 0, dtype=np.float32).params)
    params = T.ParamSet({k: params[k] for k in order})
    opt = None
    if header["adam"] is not None:
        a = header["adam"]
        opt = Adam(a["lr"], a["beta1"], a["beta2"], a["eps"])
        opt.t = a["t"]
        for name, arr in tensors.items():
            if name.startswith("adam/m/"):
                opt.m[name[7:]] = arr
            elif name.startswith("adam/v/"):
                opt.v[name[7:]] = arr
    return Checkpoint(arch, params, bn, opt, header["provenance"])


# --------------------------------------------------------------------------
# transfer


def finetune(
    checkpoint: Checkpoint,
    dataset: Dataset,
    config: TrainConfig,
    n_classes: int | None = None,
    class_weights: np.ndarray | None = None,
    arch: ArchConfig | None = None,
) -> tuple[Model, list[dict]]:
    """Load every backbone, SE and residual parameter from ``checkpoint`` and
    keep training on ``dataset``. A class-count change re-initializes the
    head from ``config.seed``; nothing is frozen.

    ``arch`` is the requested target architecture (defaults to the
    checkpoint's); any width that differs from the checkpoint is an error.
    """
    source = checkpoint.arch
    if arch is None:
        arch = source
    n_classes = arch.n_classes if n_classes is None else n_classes
    target_arch = ArchConfig.from_dict({**arch.to_dict(), "n_classes": n_classes})
    dtype = next(iter(checkpoint.params.values())).dtype
    fresh = build(target_arch, config.seed, dtype=dtype)
    mismatched = []
    for k, v in fresh.params.items():
        if k.startswith("head."):
            continue
        have = checkpoint.params.get(k)
        if have is None or have.shape != v.shape:
            mismatched.append(f"{k}: checkpoint {None if have is None else have.shape} vs model {v.shape}")
    for k in checkpoint.params:
        if not k.startswith("head.") and k not in fresh.params:
            mismatched.append(f"{k}: in checkpoint but not in the target model")
    if mismatched:
        raise ValueError("checkpoint is incompatible with the target architecture: " + "; ".join(mismatched))
    params = T.ParamSet()
    for k, v in fresh.params.items():
        if k.startswith("head.") and n_classes != source.n_classes:
            params[k] = v
        else:
            params[k] = checkpoint.params[k].copy()
    model = Model(target_arch, params, {k: s.copy() for k, s in checkpoint.bn_state.items()})
    return train(model, dataset, config, class_weights=class_weights, split="finetune")
