"""Training loop: augmented batches, step-decay schedule, optimizers, checkpoints.

An epoch visits every training sample under all 8 flip/color combinations,
each with its own random crop, in a shuffled order. All randomness for epoch
``e`` comes from ``numpy.random.default_rng([seed, e])``, so an epoch's
batches depend only on the seed, the epoch index and the data; resuming
from a checkpoint therefore needs no generator state beyond the epoch.
"""
from __future__ import annotations

import csv
import io
import math
import os
import time
from dataclasses import dataclass, field, fields, replace
from pathlib import Path
from typing import Dict, Iterator, List, Optional, Sequence, Tuple, Union

import numpy as np

from .autodiff import Tensor, backward, no_grad, serialize
from .lightfield import Sample, ViewPattern, apply_combo, augment, augmentation_combos, load_scene, \
    read_grid_hint, scene_dirs
from .losses import LossWeights, MetricsReport, combined_loss
from .model import Model, build_model, load_model, parse_key_values, preset, read_sidecar, save_model

PathLike = Union[str, os.PathLike]

OPTIMIZERS = ("adam", "sgd")


@dataclass(frozen=True)
class TrainConfig:
    lr0: float = 1e-3
    decay_factor: float = 0.5
    decay_period: int = 10
    lr_floor: float = 1e-7
    patch_size: int = 64
    batch_size: int = 8
    optimizer: str = "adam"
    adam_betas: Tuple[float, float] = (0.9, 0.999)
    adam_epsilon: float = 1e-8
    seed: int = 0
    loss_weights: LossWeights = field(default_factory=LossWeights)
    max_epochs: Optional[int] = None
    grad_clip: float = 5.0
    augment: bool = True
    model_preset: str = "desk"
    variant: int = 9
    val_fraction: float = 0.1
    record_timing: bool = True

    def __post_init__(self):
        if not 0 < self.decay_factor < 1:
            raise ValueError(f"decay_factor must be in (0, 1), got {self.decay_factor}")
        if not 0 < self.lr_floor < self.lr0:
            raise ValueError(f"need 0 < lr_floor < lr0, got {self.lr_floor} and {self.lr0}")
        if self.decay_period < 1 or self.patch_size < 1 or self.batch_size < 1:
            raise ValueError("decay_period, patch_size and batch_size must be positive")
        if self.optimizer not in OPTIMIZERS:
            raise ValueError(f"optimizer must be one of {OPTIMIZERS}, got {self.optimizer!r}")
        if self.max_epochs is not None and self.max_epochs < 0:
            raise ValueError("max_epochs must be non-negative")
        if self.grad_clip < 0:
            raise ValueError("grad_clip must be >= 0 (0 disables clipping)")
        if not 0 <= self.val_fraction < 1:
            raise ValueError(f"val_fraction must be in [0, 1), got {self.val_fraction}")

    # key=value text form -------------------------------------------------

    def to_text(self, prefix: str = "") -> str:
        lines = []
        for f in fields(self):
            v = getattr(self, f.name)
            if isinstance(v, LossWeights):
                v = ",".join(repr(w) for w in v.as_tuple())
            elif isinstance(v, tuple):
                v = ",".join(repr(x) for x in v)
            elif isinstance(v, bool):
                v = "true" if v else "false"
            elif v is None:
                v = "none"
            elif isinstance(v, float):
                v = repr(v)
            lines.append(f"{prefix}{f.name}={v}\n")
        return "".join(lines)

    @classmethod
    def from_mapping(cls, kv: Dict[str, str]) -> "TrainConfig":
        types = {f.name: f for f in fields(cls)}
        unknown = sorted(set(kv) - set(types))
        if unknown:
            raise ValueError(f"unknown training config keys: {', '.join(unknown)}")
        values = {}
        defaults = cls()
        for key, text in kv.items():
            current = getattr(defaults, key)
            try:
                values[key] = _parse_value(text, current, key)
            except ValueError as exc:
                raise ValueError(f"{key}: {exc}") from None
        return cls(**values)

    @classmethod
    def from_text(cls, text: str) -> "TrainConfig":
        return cls.from_mapping(parse_key_values(text))

    @classmethod
    def from_file(cls, path: PathLike) -> "TrainConfig":
        return cls.from_text(Path(path).read_text())


def _parse_value(text: str, current, key: str):
    if key == "loss_weights":
        parts = [float(t) for t in text.split(",")]
        if len(parts) != 3:
            raise ValueError(f"expected three comma-separated weights, got {text!r}")
        return LossWeights(*parts)
    if key == "adam_betas":
        parts = tuple(float(t) for t in text.split(","))
        if len(parts) != 2:
            raise ValueError(f"expected two comma-separated betas, got {text!r}")
        return parts
    if key == "max_epochs":
        return None if text.lower() in ("none", "") else int(text)
    if isinstance(current, bool):
        if text.lower() not in ("true", "false", "1", "0", "yes", "no"):
            raise ValueError(f"expected a boolean, got {text!r}")
        return text.lower() in ("true", "1", "yes")
    if isinstance(current, int):
        return int(text)
    if isinstance(current, float):
        return float(text)
    return text


def lr_schedule(epoch: int, config: TrainConfig = TrainConfig()) -> Optional[float]:
    """Step-decayed learning rate for ``epoch``, or ``None`` once it drops below the floor."""
    if epoch < 0:
        raise ValueError(f"epoch must be >= 0, got {epoch}")
    lr = config.lr0 * config.decay_factor ** (epoch // config.decay_period)
    return None if lr < config.lr_floor else lr


# ----------------------------------------------------------------- data


@dataclass
class Dataset:
    """Samples tagged ``train`` or ``val``."""

    samples: List[Sample]
    splits: List[str]

    def __post_init__(self):
        if len(self.samples) != len(self.splits):
            raise ValueError("one split tag per sample is required")
        bad = sorted(set(self.splits) - {"train", "val"})
        if bad:
            raise ValueError(f"unknown split tags {bad}")
        train = {s.name for s, t in zip(self.samples, self.splits) if t == "train"}
        val = {s.name for s, t in zip(self.samples, self.splits) if t == "val"}
        overlap = train & val
        if overlap:
            raise ValueError(f"samples in both splits: {sorted(overlap)[:3]}")

    def split(self, tag: str) -> List[Sample]:
        return [s for s, t in zip(self.samples, self.splits) if t == tag]

    @classmethod
    def from_samples(cls, samples: Sequence[Sample], val_fraction: float = 0.0,
                     seed: int = 0) -> "Dataset":
        """Hold out ``round(val_fraction * n)`` samples chosen by a seeded permutation."""
        n = len(samples)
        n_val = int(round(val_fraction * n))
        if n_val >= n and n > 0:
            n_val = n - 1
        order = np.random.default_rng([seed, 1 << 20]).permutation(n)
        val = set(order[:n_val].tolist())
        return cls(list(samples), ["val" if i in val else "train" for i in range(n)])


def load_samples(root: PathLike, variant: int = 9) -> List[Sample]:
    """Every scene under ``root`` as a training sample for ``variant``."""
    dirs = scene_dirs(root)
    if not dirs:
        raise FileNotFoundError(f"no scene directories under {root}")
    pattern = ViewPattern.for_variant(variant)
    return [load_scene(d, read_grid_hint(d)).sample(pattern) for d in dirs]


def load_dataset(root: PathLike, config: TrainConfig) -> Dataset:
    return Dataset.from_samples(load_samples(root, config.variant), config.val_fraction, config.seed)


def validate_samples(samples: Sequence[Sample], config: TrainConfig, channels: int) -> None:
    if not samples:
        raise ValueError("training split is empty")
    for s in samples:
        if min(s.size) < config.patch_size:
            raise ValueError(f"sample {s.name!r} size {s.size} is smaller than patch {config.patch_size}")
        if s.input.shape[0] != channels:
            raise ValueError(f"sample {s.name!r} has {s.input.shape[0]} channels, model expects {channels}")


def make_batches(samples: Sequence[Sample], config: TrainConfig,
                 epoch: int) -> Iterator[Tuple[np.ndarray, np.ndarray]]:
    """Shuffled ``(inputs, targets)`` batches for one epoch.

    Inputs are ``(B, C, P, P)`` float32, targets ``(B, 1, P, P)`` float32.
    """
    if not samples:
        raise ValueError("dataset is empty")
    rng = np.random.default_rng([config.seed, epoch])
    combos = augmentation_combos() if config.augment else [("identity", False)]
    items = [(i, c) for i in range(len(samples)) for c in range(len(combos))]
    order = rng.permutation(len(items))
    p = config.patch_size
    for start in range(0, len(order), config.batch_size):
        xs, ys = [], []
        for k in order[start:start + config.batch_size]:
            i, c = items[k]
            s = samples[i]
            h, w = s.size
            if h < p or w < p:
                raise ValueError(f"sample {s.name!r} size {s.size} is smaller than patch {p}")
            y0 = int(rng.integers(0, h - p + 1))
            x0 = int(rng.integers(0, w - p + 1))
            out = augment(s, "crop", x0, y0, p)
            out = apply_combo(out, *combos[c])
            xs.append(out.input)
            ys.append(out.target[None])
        yield np.stack(xs), np.stack(ys).astype(np.float32)


# ----------------------------------------------------------- optimizers


class Adam:
    def __init__(self, params: Dict[str, Tensor], betas=(0.9, 0.999), eps: float = 1e-8):
        self.params = params
        self.beta1, self.beta2 = betas
        self.eps = eps
        self.t = 0
        self.m = {k: np.zeros_like(p.data) for k, p in params.items()}
        self.v = {k: np.zeros_like(p.data) for k, p in params.items()}

    def step(self, grads: Dict[str, np.ndarray], lr: float) -> None:
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        c1 = 1 - b1 ** self.t
        c2 = 1 - b2 ** self.t
        for k, p in self.params.items():
            g = grads[k]
            m, v = self.m[k], self.v[k]
            m *= b1
            m += (1 - b1) * g
            v *= b2
            v += (1 - b2) * g * g
            p.data -= (lr / c1) * m / (np.sqrt(v / c2) + self.eps)

    def state_dict(self) -> Dict[str, np.ndarray]:
        out = {"opt.t": np.array([self.t], dtype=np.int64)}
        for k in self.params:
            out[f"opt.m.{k}"] = self.m[k]
            out[f"opt.v.{k}"] = self.v[k]
        return out

    def load_state_dict(self, state: Dict[str, np.ndarray]) -> None:
        self.t = int(state["opt.t"][0])
        for k in self.params:
            self.m[k] = state[f"opt.m.{k}"].copy()
            self.v[k] = state[f"opt.v.{k}"].copy()


class SGD:
    def __init__(self, params: Dict[str, Tensor]):
        self.params = params

    def step(self, grads: Dict[str, np.ndarray], lr: float) -> None:
        for k, p in self.params.items():
            p.data -= lr * grads[k]

    def state_dict(self) -> Dict[str, np.ndarray]:
        return {}

    def load_state_dict(self, state: Dict[str, np.ndarray]) -> None:
        pass


def make_optimizer(model: Model, config: TrainConfig):
    if config.optimizer == "adam":
        return Adam(model.graph.parameters, config.adam_betas, config.adam_epsilon)
    return SGD(model.graph.parameters)


def clip_gradients(grads: Dict[str, np.ndarray], max_norm: float) -> float:
    """Rescale ``grads`` in place to global L2 norm ``max_norm``; returns the original norm."""
    norm = math.sqrt(sum(float(np.sum(np.square(g, dtype=np.float64))) for g in grads.values()))
    if max_norm > 0 and norm > max_norm:
        factor = max_norm / (norm + 1e-12)
        for g in grads.values():
            g *= factor
    return norm


class TrainingAborted(RuntimeError):
    def __init__(self, epoch: int, step: int, message: str):
        super().__init__(f"training aborted at epoch {epoch}, step {step}: {message}")
        self.epoch = epoch
        self.step = step


def train_step(model: Model, optimizer, x: np.ndarray, y: np.ndarray, lr: float,
               config: TrainConfig) -> float:
    """One forward/backward/update; returns the batch loss before the update."""
    model.set_mode("training")
    loss = combined_loss(model.forward(x), y, config.loss_weights)
    value = loss.item()
    if not math.isfinite(value):
        return value
    grads = backward(model.graph, loss)
    clip_gradients(grads, config.grad_clip)
    optimizer.step(grads, lr)
    return value


# ---------------------------------------------------------- evaluation


def predict(model: Model, stack: np.ndarray) -> np.ndarray:
    """Inference-mode disparity for a ``(C, H, W)`` or ``(N, C, H, W)`` stack."""
    batch = stack[None] if stack.ndim == 3 else stack
    model.set_mode("inference")
    with no_grad():
        out = model.forward(batch).data[:, 0]
    return out[0] if stack.ndim == 3 else out


def evaluate(model: Union[Model, PathLike], samples: Sequence[Sample],
             record_timing: bool = True) -> Tuple[List[MetricsReport], MetricsReport]:
    """Per-scene metrics on full images plus their mean."""
    if not isinstance(model, Model):
        model = load_model(model)
    if not samples:
        raise ValueError("no samples to evaluate")
    reports = []
    for s in samples:
        if s.input.shape[0] != model.config.in_channels:
            raise ValueError(f"sample {s.name!r} has {s.input.shape[0]} channels, "
                             f"model expects {model.config.in_channels}")
        t0 = time.perf_counter()
        pred = predict(model, s.input)
        seconds = time.perf_counter() - t0 if record_timing else 0.0
        reports.append(MetricsReport.compute(s.name, pred, s.target, seconds=seconds))
    return reports, MetricsReport.mean(reports)


# ---------------------------------------------------------------- loop

LOG_HEADER = ("epoch", "lr", "train_loss", "val_mse_x100", "seconds")


@dataclass
class EpochLog:
    epoch: int
    lr: float
    train_loss: float
    val_mse_x100: Optional[float]
    seconds: float

    def row(self) -> List[str]:
        val = "" if self.val_mse_x100 is None else f"{self.val_mse_x100:.6f}"
        return [str(self.epoch), repr(self.lr), f"{self.train_loss:.8f}", val, f"{self.seconds:.3f}"]


def log_to_csv(rows: Sequence[EpochLog]) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(LOG_HEADER)
    for r in rows:
        writer.writerow(r.row())
    return buf.getvalue()


def log_from_csv(text: str) -> List[EpochLog]:
    rows = list(csv.reader(io.StringIO(text)))
    if not rows or tuple(rows[0]) != LOG_HEADER:
        raise ValueError("not a training log (header mismatch)")
    return [EpochLog(int(r[0]), float(r[1]), float(r[2]), float(r[3]) if r[3] else None, float(r[4]))
            for r in rows[1:]]


def checkpoint_name(epoch: int) -> str:
    return f"ckpt_epoch{epoch:04d}.bin"


@dataclass
class TrainResult:
    model: Model
    log: List[EpochLog]
    best_epoch: Optional[int]
    step_losses: List[float]
    out_dir: Optional[Path]


def save_checkpoint(path: PathLike, model: Model, optimizer, epoch: int, config: TrainConfig) -> None:
    extra = dict(optimizer.state_dict())
    extra["meta.epoch"] = np.array([epoch], dtype=np.int64)
    extra["meta.seed"] = np.array([config.seed], dtype=np.int64)
    save_model(model, path, extra, config.to_text(prefix="train."))


def read_train_config(path: PathLike) -> TrainConfig:
    _, rest = read_sidecar(path)
    return TrainConfig.from_mapping({k[len("train."):]: v for k, v in rest.items()
                                     if k.startswith("train.")})


def train(model: Optional[Model], dataset: Union[Dataset, Sequence[Sample]], config: TrainConfig,
          out_dir: Optional[PathLike] = None, resume: Optional[PathLike] = None,
          max_steps: Optional[int] = None, progress=None) -> TrainResult:
    """Run epochs until the schedule stops, ``max_epochs`` or ``max_steps`` is reached.

    With ``out_dir`` set, a checkpoint per epoch, ``best.bin`` (lowest
    validation error, or lowest training loss without a validation split)
    and ``log.csv`` are written there. ``resume`` continues from a
    checkpoint written by an earlier call with the same data and config.
    """
    if not isinstance(dataset, Dataset):
        dataset = Dataset(list(dataset), ["train"] * len(dataset))
    if model is None:
        model = build_model(preset(config.model_preset, config.variant, config.seed))
    train_set = dataset.split("train")
    val_set = dataset.split("val")
    validate_samples(train_set, config, model.config.in_channels)
    optimizer = make_optimizer(model, config)
    out = Path(out_dir) if out_dir is not None else None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)

    log: List[EpochLog] = []
    start = 0
    best: Optional[Tuple[float, int]] = None
    if resume is not None:
        state = serialize.load(resume)
        model.load_state_dict(state)
        optimizer.load_state_dict(state)
        start = int(state["meta.epoch"][0]) + 1
        log_path = Path(resume).parent / "log.csv"
        if log_path.exists():
            log = [r for r in log_from_csv(log_path.read_text()) if r.epoch < start]
        for r in log:
            score = r.val_mse_x100 if r.val_mse_x100 is not None else r.train_loss
            if best is None or score < best[0]:
                best = (score, r.epoch)

    step_losses: List[float] = []
    steps = 0
    epoch = start
    while max_steps is None or steps < max_steps:
        if config.max_epochs is not None and epoch >= config.max_epochs:
            break
        lr = lr_schedule(epoch, config)
        if lr is None:
            break
        t0 = time.perf_counter()
        losses = []
        for step, (x, y) in enumerate(make_batches(train_set, config, epoch)):
            value = train_step(model, optimizer, x, y, lr, config)
            if not math.isfinite(value):
                raise TrainingAborted(epoch, step, f"non-finite loss {value}")
            losses.append(value)
            steps += 1
            if max_steps is not None and steps >= max_steps:
                break
        step_losses.extend(losses)
        val = evaluate(model, val_set, record_timing=False)[1].mse_x100 if val_set else None
        seconds = time.perf_counter() - t0 if config.record_timing else 0.0
        entry = EpochLog(epoch, lr, float(np.mean(losses)), val, seconds)
        log.append(entry)
        score = val if val is not None else entry.train_loss
        improved = best is None or score < best[0]
        if improved:
            best = (score, epoch)
        if out is not None:
            path = out / checkpoint_name(epoch)
            save_checkpoint(path, model, optimizer, epoch, config)
            if improved:
                save_checkpoint(out / "best.bin", model, optimizer, epoch, config)
            (out / "log.csv").write_text(log_to_csv(log))
        if progress is not None:
            progress(entry)
        epoch += 1
    return TrainResult(model, log, best[1] if best else None, step_losses, out)
