"""DSSCNet and its ablation variants.

Layer order: ``[conv -> batchnorm -> relu -> maxpool] x len(conv_filters)``,
optional squeeze-and-excitation over the last feature map, global average
pooling to a vector, a stack of fully connected residual blocks, and a dense
classification head.
"""
from __future__ import annotations

from dataclasses import asdict, dataclass, field, replace

import numpy as np

from . import tensor as T
from .dsp import MelImage

__all__ = [
    "ArchConfig",
    "PRESETS",
    "preset",
    "desk_clone",
    "Model",
    "Output",
    "build",
    "se_block",
    "residual_stack",
]


@dataclass(frozen=True)
class ArchConfig:
    conv_filters: tuple[int, ...] = (64, 128, 256)
    use_se: bool = True
    se_reduction: int = 16
    rb_widths: tuple[int, ...] = (256, 512, 1024)
    n_classes: int = 4
    input_size: int = 128
    in_channels: int = 3
    kernel_size: int = 3

    def __post_init__(self):
        object.__setattr__(self, "conv_filters", tuple(int(c) for c in self.conv_filters))
        object.__setattr__(self, "rb_widths", tuple(int(w) for w in self.rb_widths))

    def validate(self) -> list[str]:
        errors = []
        if not self.conv_filters:
            errors.append("conv_filters must list at least one layer")
        if any(c <= 0 for c in self.conv_filters):
            errors.append(f"conv_filters must be positive, got {list(self.conv_filters)}")
        if any(w <= 0 for w in self.rb_widths):
            errors.append(f"rb_widths must be positive, got {list(self.rb_widths)}")
        if self.n_classes < 2:
            errors.append(f"n_classes must be at least 2, got {self.n_classes}")
        if self.kernel_size % 2 == 0 or self.kernel_size < 1:
            errors.append(f"kernel_size must be odd and positive, got {self.kernel_size}")
        if self.conv_filters:
            stride = 2 ** len(self.conv_filters)
            if self.input_size % stride:
                errors.append(
                    f"input_size {self.input_size} is not divisible by {stride} "
                    f"({len(self.conv_filters)} pooling stages)"
                )
            if self.use_se and (self.se_reduction < 1 or self.conv_filters[-1] % self.se_reduction):
                errors.append(
                    f"SE channels {self.conv_filters[-1]} are not divisible by "
                    f"se_reduction {self.se_reduction}"
                )
        return errors

    @property
    def embedding_dim(self) -> int:
        return self.rb_widths[-1] if self.rb_widths else self.conv_filters[-1]

    def to_dict(self) -> dict:
        d = asdict(self)
        d["conv_filters"] = list(self.conv_filters)
        d["rb_widths"] = list(self.rb_widths)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ArchConfig":
        return cls(**d)


PRESETS: dict[str, ArchConfig] = {
    "C1": ArchConfig(),
    "C2": ArchConfig(use_se=False),
    "C3": ArchConfig(conv_filters=(128, 256)),
    "C4": ArchConfig(conv_filters=(256,), rb_widths=(256, 512)),
    "C5": ArchConfig(rb_widths=(512, 1024)),
    "C6": ArchConfig(rb_widths=(1024,)),
    "cnn_se_baseline": ArchConfig(rb_widths=()),
}


def preset(name: str, n_classes: int = 4, **overrides) -> ArchConfig:
    try:
        base = PRESETS[name]
    except KeyError:
        raise KeyError(f"unknown preset {name!r}; choose from {sorted(PRESETS)}") from None
    return replace(base, n_classes=n_classes, **overrides)


def desk_clone(config: ArchConfig, width_divisor: int = 8, input_size: int = 32) -> ArchConfig:
    """Shrink every conv and residual width by ``width_divisor`` and the input
    to ``input_size``, keeping the layer structure. The SE reduction drops to
    the largest divisor of the new channel count not above the original."""
    filters = tuple(max(1, c // width_divisor) for c in config.conv_filters)
    widths = tuple(max(1, w // width_divisor) for w in config.rb_widths)
    r = config.se_reduction
    while filters and filters[-1] % r:
        r -= 1
    return replace(config, conv_filters=filters, rb_widths=widths, input_size=input_size, se_reduction=max(r, 1))


# --------------------------------------------------------------------------
# building blocks


def se_block(x_fe, w1, w2):
    """Squeeze (global average pool), excite (``sigmoid(w2 @ relu(w1 @ z))``)
    and rescale each channel of ``x_fe``. Returns ``(x_se, s)``."""
    squeezed = T.global_avg_pool(x_fe)
    s = T.sigmoid(T.dense(T.relu(T.dense(squeezed, w1, None)), w2, None))
    return T.channel_scale(x_fe, s), s


def residual_stack(v, params, widths, prefix: str = "rb"):
    """Fully connected residual blocks ``relu(f(v) + skip(v))`` with
    ``f = fc2(relu(fc1(v)))``; ``skip`` is identity when the width is kept and
    a learned projection otherwise."""
    for j, _ in enumerate(widths):
        p = f"{prefix}{j}."
        u = T.dense(v, params[p + "fc1.weight"], params[p + "fc1.bias"])
        u = T.dense(T.relu(u), params[p + "fc2.weight"], params[p + "fc2.bias"])
        skip = v
        if p + "proj.weight" in params:
            skip = T.dense(v, params[p + "proj.weight"], None)
        v = T.relu(T.add(u, skip))
    return v


# --------------------------------------------------------------------------
# model


@dataclass
class Output:
    logits: np.ndarray
    probs: np.ndarray
    embedding: np.ndarray
    features: np.ndarray | None = None
    se_scale: np.ndarray | None = None


@dataclass
class Model:
    config: ArchConfig
    params: T.ParamSet
    bn_state: dict[str, T.BatchNormState] = field(default_factory=dict)

    @property
    def dtype(self):
        return next(iter(self.params.values())).dtype

    def param_count(self) -> int:
        return self.params.count()

    def copy(self) -> "Model":
        return Model(self.config, self.params.copy(), {k: s.copy() for k, s in self.bn_state.items()})

    def astype(self, dtype) -> "Model":
        params = T.ParamSet({k: v.astype(dtype) for k, v in self.params.items()})
        bn = {
            k: T.BatchNormState(s.mean.astype(dtype), s.var.astype(dtype), s.momentum, s.eps)
            for k, s in self.bn_state.items()
        }
        return Model(self.config, params, bn)

    # -- forward passes ----------------------------------------------------

    def _check_input(self, x) -> np.ndarray:
        if isinstance(x, MelImage):
            x = x.planes
        x = np.asarray(x)
        cfg = self.config
        want = (cfg.in_channels, cfg.input_size, cfg.input_size)
        if x.shape[-3:] != want or x.ndim not in (3, 4):
            raise T.ShapeError(f"model expects input {want} (optionally batched), got {x.shape}")
        if x.ndim == 3:
            x = x[None]
        return x.astype(self.dtype, copy=False)

    def _forward(self, x, p, training: bool, keep_features: bool = False):
        cfg = self.config
        h = x
        for i, _ in enumerate(cfg.conv_filters):
            h = T.conv2d(h, p[f"conv{i}.weight"], None, padding="same")
            h = T.batchnorm2d(h, p[f"bn{i}.scale"], p[f"bn{i}.shift"], self.bn_state[f"bn{i}"], training)
            # relu and max-pooling commute; pooling first shrinks the relu work 4x
            h = T.relu(T.maxpool2d(h))
        x_fe = h
        s = None
        if cfg.use_se:
            h, s = se_block(h, p["se.w1"], p["se.w2"])
        v = T.global_avg_pool(h)
        v = residual_stack(v, p, cfg.rb_widths)
        logits = T.dense(v, p["head.weight"], p["head.bias"])
        return logits, v, (x_fe if keep_features else None), s

    def forward_features(self, x) -> np.ndarray:
        """Conv backbone output for one image or a batch (eval mode)."""
        single = isinstance(x, MelImage) or np.ndim(x) == 3
        x = self._check_input(x)
        h = x
        for i, _ in enumerate(self.config.conv_filters):
            h = T.conv2d(h, self.params[f"conv{i}.weight"], None, padding="same")
            h = T.batchnorm2d(h, self.params[f"bn{i}.scale"], self.params[f"bn{i}.shift"], self.bn_state[f"bn{i}"], False)
            h = T.relu(T.maxpool2d(h))
        return h[0] if single else h

    def forward(self, x, training: bool = False, keep_features: bool = False) -> Output:
        """Untaped forward pass on ``(3, S, S)`` or ``(N, 3, S, S)`` input."""
        xb = self._check_input(x)
        logits, emb, feats, s = self._forward(xb, self.params, training, keep_features)
        return Output(logits, T.softmax(logits), emb, feats, s)

    def forward_taped(self, tape: T.GradTape, x, training: bool = True):
        """Forward pass with every parameter registered on ``tape``.

        Returns ``(logits_var, embedding_var)``.
        """
        xb = self._check_input(x)
        p = {k: tape.param(k, v) for k, v in self.params.items()}
        logits, emb, _, _ = self._forward(xb, p, training)
        return logits, emb

    def classify(self, x) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        """Eval-mode ``(probs, logits, embedding)``; unbatched in, unbatched out."""
        single = isinstance(x, MelImage) or np.ndim(x) == 3
        out = self.forward(x, training=False)
        if single:
            return out.probs[0], out.logits[0], out.embedding[0]
        return out.probs, out.logits, out.embedding

    def predict(self, x, batch_size: int = 32) -> np.ndarray:
        x = np.asarray(x)
        preds = []
        for i in range(0, len(x), batch_size):
            preds.append(np.argmax(self.forward(x[i : i + batch_size]).probs, axis=1))
        return np.concatenate(preds) if preds else np.zeros(0, dtype=int)


def _uniform(rng, shape, fan_in, gain):
    bound = np.sqrt(gain / fan_in)
    return rng.uniform(-bound, bound, size=shape)


def build(config: ArchConfig, seed: int = 0, dtype=np.float32) -> Model:
    """Assemble and initialize a model deterministically from ``seed``.

    Layers feeding a ReLU use a uniform bound of ``sqrt(6 / fan_in)``; the
    rest use ``sqrt(3 / fan_in)``. Biases and batchnorm shifts start at zero,
    batchnorm scales at one.
    """
    errors = config.validate()
    if errors:
        raise ValueError("invalid ArchConfig: " + "; ".join(errors))
    rng = np.random.default_rng(seed)
    params = T.ParamSet()
    bn = {}
    k = config.kernel_size
    c_in = config.in_channels
    for i, c_out in enumerate(config.conv_filters):
        params[f"conv{i}.weight"] = _uniform(rng, (c_out, c_in, k, k), c_in * k * k, 6.0)
        params[f"bn{i}.scale"] = np.ones(c_out)
        params[f"bn{i}.shift"] = np.zeros(c_out)
        bn[f"bn{i}"] = T.BatchNormState.fresh(c_out, dtype)
        c_in = c_out
    if config.use_se:
        hidden = c_in // config.se_reduction
        params["se.w1"] = _uniform(rng, (hidden, c_in), c_in, 6.0)
        params["se.w2"] = _uniform(rng, (c_in, hidden), hidden, 3.0)
    d = c_in
    for j, width in enumerate(config.rb_widths):
        p = f"rb{j}."
        params[p + "fc1.weight"] = _uniform(rng, (width, d), d, 6.0)
        params[p + "fc1.bias"] = np.zeros(width)
        params[p + "fc2.weight"] = _uniform(rng, (width, width), width, 3.0)
        params[p + "fc2.bias"] = np.zeros(width)
        if width != d:
            params[p + "proj.weight"] = _uniform(rng, (width, d), d, 3.0)
        d = width
    params["head.weight"] = _uniform(rng, (config.n_classes, d), d, 3.0)
    params["head.bias"] = np.zeros(config.n_classes)
    params = T.ParamSet({k_: v.astype(dtype) for k_, v in params.items()})
    return Model(config, params, bn)
