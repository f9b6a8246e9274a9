"""Online-learned single-output-channel convolutional layer.

Lowers convolution to a matrix product by unfolding receptive-field
patches into columns, evaluates the weighted squared-error objective and
its gradient in the lowered representation, and runs the preconditioned
update stage over a fixed-capacity weighted sample set.
"""

from __future__ import annotations

import struct
from collections import deque
from dataclasses import dataclass, field

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .errors import ConfigError, DimensionError, InputError, ProtocolError
from .linalg import as_vector
from .optimizers import GdConfig
from .rls import RlsConfig, RlsState, init_state, update_precision

# Regularizer default for the conv precision state.
DEFAULT_CONV_DELTA = 0.1

STORAGE_MODES = ("full", "reduced")


@dataclass
class FeatureMap:
    """Dense (channel, row, col) feature values."""

    data: np.ndarray

    def __post_init__(self):
        self.data = np.asarray(self.data, dtype=np.float64)
        if self.data.ndim != 3:
            raise DimensionError(f"feature map must be 3-D, got shape {self.data.shape}")
        if min(self.data.shape) < 1:
            raise DimensionError(f"feature map dimensions must be positive, got {self.data.shape}")
        if not np.isfinite(self.data).all():
            raise InputError("feature map contains non-finite entries")

    @property
    def channels(self) -> int:
        return self.data.shape[0]

    @property
    def height(self) -> int:
        return self.data.shape[1]

    @property
    def width(self) -> int:
        return self.data.shape[2]


@dataclass
class ConvLayer:
    """Single-output-channel convolution: kernel (c, kh, kw), stride, padding."""

    kernel: np.ndarray
    stride: int = 1
    padding: int = 0

    def __post_init__(self):
        self.kernel = np.asarray(self.kernel, dtype=np.float64)
        if self.kernel.ndim != 3:
            raise DimensionError(f"kernel must be 3-D, got shape {self.kernel.shape}")
        if not np.isfinite(self.kernel).all():
            raise InputError("kernel contains non-finite entries")
        if self.stride < 1:
            raise ConfigError("stride must be positive")
        if self.padding < 0:
            raise ConfigError("padding must be non-negative")

    @property
    def patch_dim(self) -> int:
        c, kh, kw = self.kernel.shape
        return c * kh * kw


def unroll_kernel(kernel: np.ndarray) -> np.ndarray:
    """Kernel as a length-p row in (channel, kernel row, kernel col) order."""
    return np.asarray(kernel, dtype=np.float64).reshape(-1)


def roll_kernel(vec: np.ndarray, shape: tuple[int, int, int]) -> np.ndarray:
    """Inverse of unroll_kernel."""
    vec = as_vector(vec, "kernel vector")
    c, kh, kw = shape
    if vec.size != c * kh * kw:
        raise DimensionError(f"vector length {vec.size} != kernel size {c * kh * kw}")
    return vec.reshape(shape)


def output_shape(fm: FeatureMap, layer: ConvLayer) -> tuple[int, int]:
    c, kh, kw = layer.kernel.shape
    if fm.channels != c:
        raise DimensionError(f"feature channels {fm.channels} != kernel channels {c}")
    h_pad = fm.height + 2 * layer.padding
    w_pad = fm.width + 2 * layer.padding
    if kh > h_pad or kw > w_pad:
        raise ConfigError(
            f"kernel ({kh}, {kw}) larger than padded input ({h_pad}, {w_pad})"
        )
    return ((h_pad - kh) // layer.stride + 1, (w_pad - kw) // layer.stride + 1)


def im2col(fm: FeatureMap, layer: ConvLayer) -> np.ndarray:
    """Patch matrix (p, M): column k is the zero-padded receptive field of
    output position k, rows in (channel, kernel row, kernel col) order."""
    h_out, w_out = output_shape(fm, layer)
    c, kh, kw = layer.kernel.shape
    data = fm.data
    if layer.padding:
        data = np.pad(
            data,
            ((0, 0), (layer.padding, layer.padding), (layer.padding, layer.padding)),
        )
    # windows: (c, rows, cols, kh, kw); stride-subsample the spatial axes.
    windows = sliding_window_view(data, (kh, kw), axis=(1, 2))
    windows = windows[:, :: layer.stride, :: layer.stride]
    # -> (rows, cols, c, kh, kw) -> (M, p) -> (p, M)
    cols = windows.transpose(1, 2, 0, 3, 4).reshape(h_out * w_out, c * kh * kw)
    return np.ascontiguousarray(cols.T)


def conv_forward(fm: FeatureMap, layer: ConvLayer) -> np.ndarray:
    """Confidence map (h', w') via the lowered matrix product."""
    h_out, w_out = output_shape(fm, layer)
    return (unroll_kernel(layer.kernel) @ im2col(fm, layer)).reshape(h_out, w_out)


@dataclass
class WeightedSample:
    """Feature map with its target confidence map and per-position weights."""

    features: FeatureMap
    target: np.ndarray  # (h', w')
    gamma: np.ndarray   # (h', w'), non-negative

    def __post_init__(self):
        self.target = np.asarray(self.target, dtype=np.float64)
        self.gamma = np.asarray(self.gamma, dtype=np.float64)
        for name, arr in (("target", self.target), ("gamma", self.gamma)):
            if arr.ndim != 2:
                raise DimensionError(f"{name} must be 2-D, got shape {arr.shape}")
            if not np.isfinite(arr).all():
                raise InputError(f"{name} contains non-finite entries")
        if self.target.shape != self.gamma.shape:
            raise DimensionError(
                f"target shape {self.target.shape} != gamma shape {self.gamma.shape}"
            )
        if (self.gamma < 0).any():
            raise InputError("gamma weights must be non-negative")


def _check_sample(sample: WeightedSample, layer: ConvLayer) -> None:
    shape = output_shape(sample.features, layer)
    if sample.target.shape != shape:
        raise DimensionError(
            f"target shape {sample.target.shape} != conv output shape {shape}"
        )


@dataclass
class SampleSet:
    """Fixed-capacity weighted sample store; oldest-first eviction."""

    capacity: int
    samples: list[WeightedSample] = field(default_factory=list)
    weights: list[float] = field(default_factory=list)

    def __post_init__(self):
        if self.capacity < 1:
            raise ConfigError("sample set capacity must be positive")
        if not self.weights:
            self.weights = [1.0] * len(self.samples)
        if len(self.weights) != len(self.samples):
            raise DimensionError("one weight per sample required")
        if any(w < 0 for w in self.weights):
            raise InputError("sample weights must be non-negative")
        while len(self.samples) > self.capacity:
            self.samples.pop(0)
            self.weights.pop(0)

    def insert(self, sample: WeightedSample, weight: float = 1.0) -> bool:
        """Append a sample; returns True when the oldest one was evicted."""
        if weight < 0:
            raise InputError("sample weight must be non-negative")
        self.samples.append(sample)
        self.weights.append(float(weight))
        if len(self.samples) > self.capacity:
            self.samples.pop(0)
            self.weights.pop(0)
            return True
        return False

    def __len__(self) -> int:
        return len(self.samples)


def _lowered(sample_set: SampleSet, layer: ConvLayer):
    """Yield (gamma flat, target flat, patch matrix) per sample, with the
    per-sample weight folded into gamma."""
    if len(sample_set) == 0:
        raise InputError("sample set is empty")
    for sample, weight in zip(sample_set.samples, sample_set.weights):
        _check_sample(sample, layer)
        yield (
            weight * sample.gamma.reshape(-1),
            sample.target.reshape(-1),
            im2col(sample.features, layer),
        )


def conv_loss(sample_set: SampleSet, layer: ConvLayer, lambda_d: float = 0.0) -> float:
    """Weighted squared-error objective in the lowered representation.

    sum_j sum_k gamma_jk (y_jk - w^T x_jk)^2 + (lambda_d / 2) ||W||^2.
    """
    if lambda_d < 0:
        raise ConfigError("weight decay must be non-negative")
    w_vec = unroll_kernel(layer.kernel)
    total = 0.0
    for gamma, target, cols in _lowered(sample_set, layer):
        resid = target - w_vec @ cols
        total += float(gamma @ resid**2)
    return total + 0.5 * lambda_d * float(np.sum(layer.kernel**2))


def conv_gradient(
    sample_set: SampleSet, layer: ConvLayer, lambda_d: float = 0.0
) -> np.ndarray:
    """Exact kernel-shaped gradient of conv_loss."""
    if lambda_d < 0:
        raise ConfigError("weight decay must be non-negative")
    w_vec = unroll_kernel(layer.kernel)
    grad = np.zeros_like(w_vec)
    for gamma, target, cols in _lowered(sample_set, layer):
        resid = w_vec @ cols - target
        grad += cols @ (2.0 * gamma * resid)
    grad += lambda_d * w_vec
    return roll_kernel(grad, layer.kernel.shape)


def conv_virtual_input(sample_set: SampleSet, layer: ConvLayer) -> np.ndarray:
    """Weighted virtual input over all columns of all samples:
    (1 / sqrt(N M)) sum_j sum_k sqrt(gamma_jk) x_jk."""
    total = None
    n_cols = None
    for gamma, _, cols in _lowered(sample_set, layer):
        n_cols = cols.shape[1]
        part = cols @ np.sqrt(gamma)
        total = part if total is None else total + part
    return total / np.sqrt(len(sample_set) * n_cols)


@dataclass
class ConvRlsState:
    """Precision state over the patch dimension with a storage-mode switch.

    Reduced mode stores the precision matrix in a 16-bit floating
    representation between updates; arithmetic always runs in full width.
    """

    state: RlsState
    storage: str = "full"

    def __post_init__(self):
        if self.storage not in STORAGE_MODES:
            raise ConfigError(f"unknown storage mode {self.storage!r}")

    def clone(self) -> "ConvRlsState":
        return ConvRlsState(self.state.clone(), self.storage)


def init_conv_state(
    layer: ConvLayer,
    delta: float = DEFAULT_CONV_DELTA,
    beta: float = 1.0,
    storage: str = "full",
) -> ConvRlsState:
    cfg = RlsConfig(input_dim=layer.patch_dim, output_dim=1, beta=beta, delta=delta)
    return ConvRlsState(init_state(cfg), storage)


def _store(state: RlsState, storage: str) -> RlsState:
    if storage == "reduced":
        state = RlsState(
            state.p_mat.astype(np.float16).astype(np.float64), state.step, state.config
        )
    return state


def conv_update_stage(
    layer: ConvLayer,
    sample_set: SampleSet,
    conv_state: ConvRlsState,
    config: GdConfig,
) -> tuple[ConvLayer, ConvRlsState]:
    """Preconditioned update stage for the conv kernel.

    Advances the precision matrix once with the weighted virtual input,
    then runs the configured number of steps of
    f(W) <- f(W) - eta f(grad) P with the data gradient at each iterate;
    weight decay enters through the multiplicative factor W (I - eta lambda P).
    """
    x_bar = conv_virtual_input(sample_set, layer)
    state = _store(update_precision(conv_state.state, x_bar), conv_state.storage)
    w_vec = unroll_kernel(layer.kernel).copy()
    shape = layer.kernel.shape
    for _ in range(config.iterations):
        current = ConvLayer(roll_kernel(w_vec, shape), layer.stride, layer.padding)
        grad = unroll_kernel(conv_gradient(sample_set, current))
        if config.weight_decay:
            grad = grad + config.weight_decay * w_vec
        w_vec = w_vec - config.learning_rate * grad @ state.p_mat
    new_layer = ConvLayer(roll_kernel(w_vec, shape), layer.stride, layer.padding)
    return new_layer, ConvRlsState(state, conv_state.storage)


@dataclass
class ConvSessionConfig:
    update_cfg: GdConfig
    update_period: int = 20
    sample_capacity: int = 50

    def __post_init__(self):
        if self.update_period < 1:
            raise ConfigError("update period must be positive")
        if self.sample_capacity < 1:
            raise ConfigError("sample capacity must be positive")


@dataclass
class ConvSessionEvent:
    t: int
    sample: WeightedSample | None = None
    sample_weight: float = 1.0
    update_flag: bool = True
    hard_negative: bool = False


def run_conv_session(
    layer: ConvLayer,
    conv_state: ConvRlsState,
    events: list[ConvSessionEvent],
    cfg: ConvSessionConfig,
) -> tuple[ConvLayer, list[tuple]]:
    """Session controller for the conv update stage.

    Flagged samples enter the fixed-capacity set; the update stage fires
    when (t - 1) mod update_period == 0 or on a hard negative. The audit
    log records ("insert", t), ("evict", t), ("hard_negative", t) and
    ("update", t) entries in order.
    """
    audit: list[tuple] = []
    memory = SampleSet(cfg.sample_capacity)
    steps: deque = deque()
    conv_state = conv_state.clone()
    last_t = None
    for event in events:
        if last_t is not None and event.t <= last_t:
            raise ProtocolError(f"event step {event.t} does not increase past {last_t}")
        last_t = event.t
        if event.sample is not None and event.update_flag:
            evicted = memory.insert(event.sample, event.sample_weight)
            steps.append(event.t)
            audit.append(("insert", event.t))
            if evicted:
                audit.append(("evict", steps.popleft()))
        fire = (event.t - 1) % cfg.update_period == 0 or event.hard_negative
        if fire and len(memory) > 0:
            if event.hard_negative:
                audit.append(("hard_negative", event.t))
            audit.append(("update", event.t))
            layer, conv_state = conv_update_stage(layer, memory, conv_state, cfg.update_cfg)
    return layer, audit


# --- binary fixtures ---------------------------------------------------
#
# Self-describing container: 4 magic bytes, little-endian int32 dims,
# little-endian float64 payload in C order.

_MAGIC_FEATURE = b"RLSF"
_MAGIC_SAMPLE = b"RLSW"


def _pack_array(arr: np.ndarray) -> bytes:
    return arr.astype("<f8").tobytes(order="C")


def write_feature_map(path, fm: FeatureMap) -> None:
    with open(path, "wb") as fh:
        fh.write(_MAGIC_FEATURE)
        fh.write(struct.pack("<3i", *fm.data.shape))
        fh.write(_pack_array(fm.data))


def read_feature_map(path) -> FeatureMap:
    with open(path, "rb") as fh:
        if fh.read(4) != _MAGIC_FEATURE:
            raise InputError(f"{path}: not a feature-map container")
        c, h, w = struct.unpack("<3i", fh.read(12))
        data = np.frombuffer(fh.read(8 * c * h * w), dtype="<f8").reshape(c, h, w)
    return FeatureMap(data.copy())


def write_weighted_sample(path, sample: WeightedSample) -> None:
    with open(path, "wb") as fh:
        fh.write(_MAGIC_SAMPLE)
        fh.write(struct.pack("<5i", *sample.features.data.shape, *sample.target.shape))
        fh.write(_pack_array(sample.features.data))
        fh.write(_pack_array(sample.target))
        fh.write(_pack_array(sample.gamma))


def read_weighted_sample(path) -> WeightedSample:
    with open(path, "rb") as fh:
        if fh.read(4) != _MAGIC_SAMPLE:
            raise InputError(f"{path}: not a weighted-sample container")
        c, h, w, th, tw = struct.unpack("<5i", fh.read(20))
        fm = np.frombuffer(fh.read(8 * c * h * w), dtype="<f8").reshape(c, h, w)
        target = np.frombuffer(fh.read(8 * th * tw), dtype="<f8").reshape(th, tw)
        gamma = np.frombuffer(fh.read(8 * th * tw), dtype="<f8").reshape(th, tw)
    return WeightedSample(FeatureMap(fm.copy()), target.copy(), gamma.copy())
