"""Disparity regression network built on the autodiff engine.

Layout, input to output:

* a multi-scale pyramid of parallel dilated 3x3 convolutions applied to the
  raw view stack, concatenated along channels;
* one depthwise-separable encoder layer;
* a trunk of residual blocks, each summing a single separable shortcut with
  three stacked separable layers;
* a 1x1 head producing one disparity channel.

Every layer except the head is followed by batch normalization and ReLU.
All convolutions use stride 1 and "same" zero padding, so the output keeps
the input's spatial size.
"""
from __future__ import annotations

import os
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Dict, Iterable, List, Optional, Sequence, Tuple, Union

import numpy as np

from .autodiff import (
    BatchNormState,
    ConvSpec,
    Graph,
    Tensor,
    add,
    batch_norm,
    concat,
    conv2d,
    depthwise_separable_conv,
    relu,
    serialize,
)

VARIANTS = (9, 25, 81)
MODES = ("training", "inference")


@dataclass(frozen=True)
class PyramidConfig:
    dilations: Tuple[int, ...] = (1, 1, 2, 4, 8, 16)
    channels: int = 64
    kernel: int = 3

    def __post_init__(self):
        object.__setattr__(self, "dilations", tuple(int(d) for d in self.dilations))
        if not self.dilations or any(d < 1 for d in self.dilations):
            raise ValueError(f"dilation rates must be positive, got {self.dilations}")
        if self.channels < 1:
            raise ValueError(f"branch channels must be positive, got {self.channels}")
        if self.kernel < 1 or self.kernel % 2 == 0:
            raise ValueError(f"kernel must be odd and positive, got {self.kernel}")

    @property
    def branches(self) -> int:
        return len(self.dilations)

    @property
    def out_channels(self) -> int:
        return self.branches * self.channels


@dataclass(frozen=True)
class ModelConfig:
    variant: int = 9
    pyramid: PyramidConfig = field(default_factory=PyramidConfig)
    encoder_channels: int = 162
    residual_blocks: int = 6
    trunk_channels: int = 162
    seed: int = 0
    bn_momentum: float = 0.1
    bn_epsilon: float = 1e-5

    def __post_init__(self):
        if self.variant not in VARIANTS:
            raise ValueError(f"variant must be one of {VARIANTS}, got {self.variant}")
        for name in ("encoder_channels", "residual_blocks", "trunk_channels"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be positive, got {getattr(self, name)}")
        if not 0 < self.bn_momentum <= 1 or self.bn_epsilon <= 0:
            raise ValueError("batch norm momentum must be in (0, 1] and epsilon positive")

    @property
    def in_channels(self) -> int:
        return 3 * self.variant

    def to_text(self) -> str:
        items = {
            "variant": self.variant,
            "dilations": ",".join(map(str, self.pyramid.dilations)),
            "branch_channels": self.pyramid.channels,
            "kernel": self.pyramid.kernel,
            "encoder_channels": self.encoder_channels,
            "residual_blocks": self.residual_blocks,
            "trunk_channels": self.trunk_channels,
            "seed": self.seed,
            "bn_momentum": repr(self.bn_momentum),
            "bn_epsilon": repr(self.bn_epsilon),
        }
        return "".join(f"{k}={v}\n" for k, v in items.items())

    @classmethod
    def from_text(cls, text: str) -> "ModelConfig":
        kv = parse_key_values(text)
        known = {"variant", "dilations", "branch_channels", "kernel", "encoder_channels",
                 "residual_blocks", "trunk_channels", "seed", "bn_momentum", "bn_epsilon"}
        unknown = sorted(set(kv) - known)
        if unknown:
            raise ValueError(f"unknown model config keys: {', '.join(unknown)}")
        pyr = PyramidConfig(
            dilations=tuple(int(v) for v in kv.pop("dilations", "1,1,2,4,8,16").split(",")),
            channels=int(kv.pop("branch_channels", 64)),
            kernel=int(kv.pop("kernel", 3)),
        )
        ints = {k: int(kv[k]) for k in ("variant", "encoder_channels", "residual_blocks",
                                        "trunk_channels", "seed") if k in kv}
        floats = {k: float(kv[k]) for k in ("bn_momentum", "bn_epsilon") if k in kv}
        return cls(pyramid=pyr, **ints, **floats)


def parse_key_values(text: str) -> Dict[str, str]:
    """Parse ``key=value`` lines; blank lines and ``#`` comments are skipped."""
    out: Dict[str, str] = {}
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ValueError(f"line {lineno}: expected key=value, got {raw!r}")
        key, value = (s.strip() for s in line.split("=", 1))
        if key in out:
            raise ValueError(f"line {lineno}: duplicate key {key!r}")
        out[key] = value
    return out


# ------------------------------------------------------------ accounting


def receptive_field(pyramid: PyramidConfig) -> int:
    """Widest pyramid branch footprint, ``k + (k - 1)(d - 1)``."""
    k = pyramid.kernel
    return max(k + (k - 1) * (d - 1) for d in pyramid.dilations)


def count_parameters(config: ModelConfig) -> int:
    """Closed-form trainable scalar count for ``config`` (no model is built)."""
    pyr = config.pyramid
    k2 = pyr.kernel ** 2
    total = pyr.branches * (config.in_channels * k2 * pyr.channels + 2 * pyr.channels)

    def separable(c_in: int, c_out: int) -> int:
        return c_in * 9 + c_in * c_out + 2 * c_out

    total += separable(pyr.out_channels, config.encoder_channels)
    c_in = config.encoder_channels
    c = config.trunk_channels
    for _ in range(config.residual_blocks):
        total += 2 * separable(c_in, c_in) + 2 * separable(c_in, c)
        c_in = c
    return total + c + 1


# Published parameter counts per input-view variant, the calibration targets.
TARGET_COUNTS = {9: 0.83e6, 25: 0.99e6, 81: 1.57e6}


def calibrate_trunk_width(variant: int, target: Optional[float] = None,
                          branch_channels: int = 64, residual_blocks: int = 6,
                          widths: Iterable[int] = range(8, 513)) -> int:
    """Trunk width whose parameter count lands nearest ``target``.

    Encoder and trunk share the width; ties go to the narrower model.
    """
    target = TARGET_COUNTS[variant] if target is None else target
    pyr = PyramidConfig(channels=branch_channels)

    def miss(c: int) -> float:
        cfg = ModelConfig(variant=variant, pyramid=pyr, encoder_channels=c,
                          residual_blocks=residual_blocks, trunk_channels=c)
        return abs(count_parameters(cfg) - target)

    return min(widths, key=lambda c: (miss(c), c))


# Widths below are frozen outputs of calibrate_trunk_width; a test re-runs
# the sweep to keep them honest. "desk" is a narrow model sized for
# single-core CPU training runs.
PRESETS: Dict[str, Dict[int, Dict[str, int]]] = {
    "full": {
        9: dict(branch_channels=64, encoder_channels=162, trunk_channels=162, residual_blocks=6),
        25: dict(branch_channels=64, encoder_channels=161, trunk_channels=161, residual_blocks=6),
        81: dict(branch_channels=64, encoder_channels=161, trunk_channels=161, residual_blocks=6),
    },
    "desk": {
        v: dict(branch_channels=16, encoder_channels=32, trunk_channels=32, residual_blocks=6)
        for v in VARIANTS
    },
}


def preset(name: str, variant: int = 9, seed: int = 0,
           dilations: Sequence[int] = (1, 1, 2, 4, 8, 16)) -> ModelConfig:
    """Named width preset for ``variant``."""
    if name not in PRESETS:
        raise ValueError(f"unknown preset {name!r}; choose from {sorted(PRESETS)}")
    if variant not in VARIANTS:
        raise ValueError(f"variant must be one of {VARIANTS}, got {variant}")
    p = dict(PRESETS[name][variant])
    pyr = PyramidConfig(dilations=tuple(dilations), channels=p.pop("branch_channels"))
    return ModelConfig(variant=variant, pyramid=pyr, seed=seed, **p)


# ---------------------------------------------------------------- model


@dataclass(frozen=True)
class LayerRecord:
    """Audit entry for one convolutional layer."""

    name: str
    kind: str  # "conv", "separable" or "head"
    in_channels: int
    out_channels: int
    kernel: int
    dilation: int
    batch_norm: bool
    relu: bool
    bias: bool


def _he_uniform(rng: np.random.Generator, shape, fan_in: int) -> np.ndarray:
    bound = np.sqrt(6.0 / fan_in)
    return rng.uniform(-bound, bound, size=shape)


class Model:
    """Built network: parameters in a :class:`Graph`, BN states, audit records."""

    def __init__(self, config: ModelConfig, dtype=np.float32):
        self.config = config
        self.graph = Graph()
        self.bn: Dict[str, BatchNormState] = {}
        self.layers: List[LayerRecord] = []
        self.mode = "training"
        self._dtype = np.dtype(dtype)
        self._build(np.random.default_rng(config.seed))

    # construction --------------------------------------------------------

    def _param(self, name: str, value: np.ndarray) -> Tensor:
        return self.graph.add_parameter(name, value, dtype=self._dtype)

    def _norm(self, name: str, channels: int) -> None:
        gamma = self._param(f"{name}.bn.gamma", np.ones(channels))
        beta = self._param(f"{name}.bn.beta", np.zeros(channels))
        self.bn[name] = BatchNormState.create(gamma, beta, momentum=self.config.bn_momentum,
                                              epsilon=self.config.bn_epsilon)

    def _conv(self, rng, name: str, c_in: int, c_out: int, k: int, dilation: int) -> None:
        self._param(f"{name}.weight", _he_uniform(rng, (c_out, c_in, k, k), c_in * k * k))
        self._norm(name, c_out)
        self.layers.append(LayerRecord(name, "conv", c_in, c_out, k, dilation, True, True, False))

    def _separable(self, rng, name: str, c_in: int, c_out: int) -> None:
        self._param(f"{name}.depthwise", _he_uniform(rng, (c_in, 1, 3, 3), 9))
        self._param(f"{name}.pointwise", _he_uniform(rng, (c_out, c_in, 1, 1), c_in))
        self._norm(name, c_out)
        self.layers.append(LayerRecord(name, "separable", c_in, c_out, 3, 1, True, True, False))

    def _build(self, rng: np.random.Generator) -> None:
        cfg = self.config
        pyr = cfg.pyramid
        for i, d in enumerate(pyr.dilations):
            self._conv(rng, f"pyramid.{i}", cfg.in_channels, pyr.channels, pyr.kernel, d)
        self._separable(rng, "encoder", pyr.out_channels, cfg.encoder_channels)
        c_in = cfg.encoder_channels
        for b in range(cfg.residual_blocks):
            self._separable(rng, f"blocks.{b}.shortcut", c_in, cfg.trunk_channels)
            for j in range(3):
                c_out = cfg.trunk_channels if j == 2 else c_in
                self._separable(rng, f"blocks.{b}.main.{j}", c_in, c_out)
            c_in = cfg.trunk_channels
        c = cfg.trunk_channels
        self._param("head.weight", _he_uniform(rng, (1, c, 1, 1), c))
        self._param("head.bias", np.zeros(1))
        self.layers.append(LayerRecord("head", "head", c, 1, 1, 1, False, False, True))

    # state ---------------------------------------------------------------

    @property
    def dtype(self) -> np.dtype:
        return self._dtype

    def set_mode(self, mode: str) -> "Model":
        """Switch every BN layer between batch and running statistics."""
        if mode not in MODES:
            raise ValueError(f"mode must be one of {MODES}, got {mode!r}")
        self.mode = mode
        for state in self.bn.values():
            state.training = mode == "training"
        return self

    def astype(self, dtype) -> "Model":
        self._dtype = np.dtype(dtype)
        self.graph.astype(self._dtype)
        return self

    def parameters(self) -> Dict[str, Tensor]:
        return self.graph.parameters

    def state_dict(self) -> Dict[str, np.ndarray]:
        """Parameters plus BN running statistics, as plain arrays."""
        out = {name: p.data.copy() for name, p in self.graph.parameters.items()}
        for name, st in self.bn.items():
            out[f"{name}.bn.running_mean"] = st.running_mean.copy()
            out[f"{name}.bn.running_var"] = st.running_var.copy()
        return out

    def load_state_dict(self, state: Dict[str, np.ndarray]) -> None:
        expected = set(self.state_dict())
        missing = sorted(expected - set(state))
        if missing:
            raise ValueError(f"state is missing {len(missing)} entries, e.g. {missing[0]!r}")
        for name, p in self.graph.parameters.items():
            arr = np.asarray(state[name])
            if arr.shape != p.shape:
                raise ValueError(f"{name}: shape {arr.shape} != model shape {p.shape}")
            p.data = arr.astype(self._dtype, copy=True)
            p.grad = None
        for name, st in self.bn.items():
            st.running_mean = np.asarray(state[f"{name}.bn.running_mean"], dtype=np.float64).copy()
            st.running_var = np.asarray(state[f"{name}.bn.running_var"], dtype=np.float64).copy()

    # forward -------------------------------------------------------------

    def _apply_conv(self, x: Tensor, rec: LayerRecord) -> Tensor:
        p = self.graph.parameters
        if rec.kind == "conv":
            spec = ConvSpec.same(rec.kernel, rec.in_channels, rec.out_channels, rec.dilation)
            y = conv2d(x, p[f"{rec.name}.weight"], None, spec)
        else:
            spec = ConvSpec.same(3, rec.in_channels, rec.out_channels)
            y = depthwise_separable_conv(x, p[f"{rec.name}.depthwise"], p[f"{rec.name}.pointwise"], spec)
        return relu(batch_norm(y, self.bn[rec.name]))

    def _as_input(self, x) -> Tensor:
        if not isinstance(x, Tensor):
            x = Tensor(np.asarray(x), dtype=self._dtype)
        elif x.dtype != self._dtype:
            x = Tensor(x.data, dtype=self._dtype)
        if x.ndim != 4:
            raise ValueError(f"input must be (batch, channels, height, width), got shape {x.shape}")
        if x.shape[1] != self.config.in_channels:
            raise ValueError(
                f"input channels {x.shape[1]} != expected {self.config.in_channels} "
                f"(3 x {self.config.variant} views)")
        return x

    def pyramid_outputs(self, x) -> List[Tensor]:
        """Per-branch activations (after BN and ReLU), one tensor per dilation."""
        x = self._as_input(x)
        return [self._apply_conv(x, rec) for rec in self.layers[:self.config.pyramid.branches]]

    def forward(self, x, mode: Optional[str] = None) -> Tensor:
        """Predict disparity, shape (N, 1, H, W), in pixels per view step."""
        if mode is not None:
            self.set_mode(mode)
        records = {rec.name: rec for rec in self.layers}
        h = concat(self.pyramid_outputs(x), axis=1)
        h = self._apply_conv(h, records["encoder"])
        for b in range(self.config.residual_blocks):
            short = self._apply_conv(h, records[f"blocks.{b}.shortcut"])
            main = h
            for j in range(3):
                main = self._apply_conv(main, records[f"blocks.{b}.main.{j}"])
            h = add(short, main)
        p = self.graph.parameters
        c = self.config.trunk_channels
        return conv2d(h, p["head.weight"], p["head.bias"], ConvSpec(1, c, 1, has_bias=True))

    __call__ = forward

    def receptive_radius(self) -> int:
        """Pixels beyond which an input change cannot reach an output pixel."""
        pyr = self.config.pyramid
        return (receptive_field(pyr) - 1) // 2 + 1 + 3 * self.config.residual_blocks


def build_model(config: ModelConfig, dtype=np.float32) -> Model:
    """Construct a model with seeded He-uniform weights, gamma=1, beta=0, zero head bias."""
    return Model(config, dtype=dtype)


def forward(model: Model, x, mode: str = "inference") -> Tensor:
    return model.forward(x, mode)


def param_count(model: Model) -> int:
    """Trainable scalars: conv weights, head bias, BN gamma and beta."""
    return int(sum(p.data.size for p in model.graph.parameters.values()))


# ---------------------------------------------------------- persistence

PathLike = Union[str, os.PathLike]


def sidecar_path(path: PathLike) -> Path:
    path = Path(path)
    return path.with_name(path.name + ".cfg")


def save_model(model: Model, path: PathLike, extra: Optional[Dict[str, np.ndarray]] = None,
               extra_text: str = "") -> None:
    """Write weights and BN statistics plus a ``key=value`` config sidecar."""
    arrays = model.state_dict()
    if extra:
        arrays.update(extra)
    serialize.save(path, arrays)
    sidecar_path(path).write_text(model.config.to_text() + extra_text)


def read_sidecar(path: PathLike) -> Tuple[ModelConfig, Dict[str, str]]:
    """Model config and any remaining ``key=value`` entries from a checkpoint sidecar."""
    side = sidecar_path(path)
    if not side.exists():
        raise FileNotFoundError(f"checkpoint config sidecar not found: {side}")
    kv = parse_key_values(side.read_text())
    model_keys = {k: v for k, v in kv.items() if "." not in k}
    rest = {k: v for k, v in kv.items() if "." in k}
    text = "".join(f"{k}={v}\n" for k, v in model_keys.items())
    return ModelConfig.from_text(text), rest


def load_model(path: PathLike, dtype=np.float32) -> Model:
    config, _ = read_sidecar(path)
    model = build_model(config, dtype=dtype)
    arrays = serialize.load(path)
    model.load_state_dict(arrays)
    return model.set_mode("inference")
