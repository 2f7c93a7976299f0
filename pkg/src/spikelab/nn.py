"""Leaky integrate-and-fire layers and multi-timestep network execution.

A network is an ordered list of layer descriptors. Spiking layers emit binary
activations through a hard threshold whose backward pass substitutes a
surrogate derivative, so input gradients survive backpropagation through
time. The forward pass can optionally record per-layer spike maps and build
differentiable firing-rate tensors for selected layers.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .errors import PreconditionError
from .tensor import Tensor, _accumulate, _node


# -- firing ------------------------------------------------------------------

SURROGATES = ("rectangular", "atan")
RESETS = ("hard", "soft")


@dataclass(frozen=True)
class LIFConfig:
    """Neuron parameters: multiplicative leak, threshold, reset and surrogate."""

    tau: float = 0.2
    threshold: float = 1.0
    reset: str = "hard"
    surrogate: str = "rectangular"
    width: float = 1.0   # rectangular window width
    slope: float = 2.0   # atan steepness

    def __post_init__(self):
        if not 0.0 < self.tau < 1.0:
            raise ValueError("tau must lie in (0, 1)")
        if self.threshold <= 0.0:
            raise ValueError("threshold must be positive")
        if self.reset not in RESETS:
            raise ValueError(f"reset must be one of {RESETS}")
        if self.surrogate not in SURROGATES:
            raise ValueError(f"surrogate must be one of {SURROGATES}")
        if self.width <= 0.0 or self.slope <= 0.0:
            raise ValueError("surrogate width/slope must be positive")


def surrogate_grad(u: np.ndarray, cfg: LIFConfig) -> np.ndarray:
    """Backward-pass stand-in for the threshold derivative, evaluated at u."""
    v = u - cfg.threshold
    if cfg.surrogate == "rectangular":
        return (np.abs(v) < cfg.width / 2).astype(u.dtype) / np.asarray(cfg.width, u.dtype)
    half_pi_slope = np.pi * cfg.slope / 2.0
    return (cfg.slope / (2.0 * (1.0 + (half_pi_slope * v) ** 2))).astype(u.dtype)


def smooth_fire_value(u: np.ndarray, cfg: LIFConfig) -> np.ndarray:
    """Smooth firing curve whose derivative equals ``surrogate_grad``.

    Used in place of the hard threshold when validating the gradient path
    against finite differences.
    """
    v = u - cfg.threshold
    if cfg.surrogate == "rectangular":
        return np.clip(v / cfg.width + 0.5, 0.0, 1.0).astype(u.dtype)
    return (0.5 + np.arctan(np.pi * cfg.slope * v / 2.0) / np.pi).astype(u.dtype)


def fire(u: Tensor, cfg: LIFConfig, mode: str = "spike") -> Tensor:
    """Threshold the membrane potential into spikes.

    ``mode='spike'`` is the real forward (binary output, surrogate backward);
    ``mode='smooth'`` swaps in the smooth curve for gradient validation.
    """
    if mode == "spike":
        data = (u.data >= cfg.threshold).astype(u.data.dtype)
        op = "heaviside"
    elif mode == "smooth":
        data = smooth_fire_value(u.data, cfg)
        op = "smooth_fire"
    else:
        raise ValueError(f"unknown fire mode {mode!r}")

    def backward():
        _accumulate(u, out.grad * surrogate_grad(u.data, cfg))

    out = _node(data, (u,), op, backward)
    return out


def lif_step(u_prev: Tensor, s_prev: Tensor, current: Tensor, cfg: LIFConfig,
             mode: str = "spike") -> tuple[Tensor, Tensor]:
    """One membrane update: leak + integrate, reset by last spike, fire.

    Hard reset zeroes the carried potential of neurons that fired; soft reset
    subtracts the threshold instead. Ties at the threshold fire.
    """
    if current.data.shape != u_prev.data.shape:
        raise ValueError(f"current shape {current.data.shape} != state shape "
                         f"{u_prev.data.shape}")
    if cfg.reset == "hard":
        u = cfg.tau * u_prev * (1.0 - s_prev) + current
    else:
        u = cfg.tau * u_prev + current - cfg.threshold * s_prev
    s = fire(u, cfg, mode)
    return s, u


def spike_rate(maps: np.ndarray) -> np.ndarray:
    """Per-neuron firing rate of a (T, n) binary spike map."""
    maps = np.asarray(maps)
    if not np.isin(maps, (0.0, 1.0)).all():
        raise ValueError("spike map must be binary")
    return maps.mean(axis=0)


# -- layer descriptors ---------------------------------------------------------


@dataclass(frozen=True)
class Linear:
    in_features: int
    out_features: int
    bias: bool = True


@dataclass(frozen=True)
class Conv2d:
    in_channels: int
    out_channels: int
    kernel: int
    stride: int = 1
    padding: int = 0
    bias: bool = True


@dataclass(frozen=True)
class AvgPool2d:
    kernel: int
    stride: int | None = None


@dataclass(frozen=True)
class Flatten:
    pass


@dataclass(frozen=True)
class LIF:
    cfg: LIFConfig = field(default_factory=LIFConfig)


@dataclass
class SpikeRecord:
    """Binary spike maps per LIF layer, (T, batch, neurons) each."""

    maps: dict[int, np.ndarray]
    timesteps: int

    def rates(self, layer: int) -> np.ndarray:
        """Per-sample firing rates (batch, neurons) for one layer."""
        return self.maps[layer].mean(axis=0)


@dataclass
class ForwardResult:
    logits: Tensor
    record: SpikeRecord | None
    rates: dict[int, Tensor]

    @property
    def predictions(self) -> np.ndarray:
        return self.logits.data.argmax(axis=1)


class Network:
    """Ordered layer stack executed for T timesteps with rate-decoded logits.

    The tail after the last LIF layer forms the decision head; its per-step
    outputs are averaged over time into the logits. Parameters live in a
    plain dict keyed ``"{layer_index}.weight"`` / ``"{layer_index}.bias"``.
    """

    def __init__(self, layers, input_shape):
        self.layers = list(layers)
        self.input_shape = tuple(input_shape)
        self.shapes = self._infer_shapes()
        self.lif_indices = [i for i, l in enumerate(self.layers) if isinstance(l, LIF)]
        if self.lif_indices and self.lif_indices[-1] == len(self.layers) - 1:
            raise ValueError("network must end in a non-spiking decision head")

    @property
    def decision_depth(self) -> int:
        """Number of trailing non-spiking layers."""
        if not self.lif_indices:
            return len(self.layers)
        return len(self.layers) - 1 - self.lif_indices[-1]

    def neuron_count(self, layer: int) -> int:
        return int(np.prod(self.shapes[layer]))

    def _infer_shapes(self):
        shape = self.input_shape
        shapes = []
        for i, layer in enumerate(self.layers):
            if isinstance(layer, Linear):
                if len(shape) != 1 or shape[0] != layer.in_features:
                    raise ValueError(f"layer {i}: linear expects ({layer.in_features},), got {shape}")
                shape = (layer.out_features,)
            elif isinstance(layer, Conv2d):
                if len(shape) != 3 or shape[0] != layer.in_channels:
                    raise ValueError(f"layer {i}: conv expects {layer.in_channels}-channel 3-d input, got {shape}")
                c, h, w = shape
                oh = (h + 2 * layer.padding - layer.kernel) // layer.stride + 1
                ow = (w + 2 * layer.padding - layer.kernel) // layer.stride + 1
                if oh < 1 or ow < 1:
                    raise ValueError(f"layer {i}: conv output collapses to zero size")
                shape = (layer.out_channels, oh, ow)
            elif isinstance(layer, AvgPool2d):
                stride = layer.stride or layer.kernel
                c, h, w = shape
                shape = (c, (h - layer.kernel) // stride + 1, (w - layer.kernel) // stride + 1)
            elif isinstance(layer, Flatten):
                shape = (int(np.prod(shape)),)
            elif isinstance(layer, LIF):
                pass
            else:
                raise TypeError(f"unknown layer descriptor {layer!r}")
            shapes.append(shape)
        return shapes

    def init_params(self, rng: np.random.Generator, gain: float = 1.0) -> dict[str, Tensor]:
        params: dict[str, Tensor] = {}
        for i, layer in enumerate(self.layers):
            if isinstance(layer, Linear):
                std = gain * np.sqrt(2.0 / layer.in_features)
                params[f"{i}.weight"] = Tensor(
                    rng.normal(0.0, std, (layer.in_features, layer.out_features)).astype(np.float32),
                    requires_grad=True)
                if layer.bias:
                    params[f"{i}.bias"] = Tensor(np.zeros(layer.out_features, np.float32),
                                                 requires_grad=True)
            elif isinstance(layer, Conv2d):
                fan_in = layer.in_channels * layer.kernel * layer.kernel
                std = gain * np.sqrt(2.0 / fan_in)
                params[f"{i}.weight"] = Tensor(
                    rng.normal(0.0, std, (layer.out_channels, layer.in_channels,
                                          layer.kernel, layer.kernel)).astype(np.float32),
                    requires_grad=True)
                if layer.bias:
                    params[f"{i}.bias"] = Tensor(np.zeros(layer.out_channels, np.float32),
                                                 requires_grad=True)
        return params

    def forward(self, params: dict[str, Tensor], x, *, record: bool = False,
                rate_layers=(), fire_mode: str = "spike") -> ForwardResult:
        """Run all layers for every timestep of ``x`` (shape (T, batch, ...)).

        ``rate_layers`` selects LIF layers whose firing rates are returned as
        graph-connected tensors, which is what attack objectives differentiate
        through.
        """
        if not isinstance(x, Tensor):
            x = Tensor(x)
        if x.data.ndim < 3:
            raise ValueError("input must be (T, batch, features...)")
        if tuple(x.data.shape[2:]) != self.input_shape:
            raise ValueError(f"input features {x.data.shape[2:]} != expected "
                             f"{self.input_shape}")
        timesteps, batch = x.data.shape[0], x.data.shape[1]
        rate_layers = tuple(rate_layers)
        for l in rate_layers:
            if l not in self.lif_indices:
                raise PreconditionError(f"layer {l} is not a spiking layer")

        dtype = x.data.dtype
        membranes: dict[int, Tensor] = {}
        last_spikes: dict[int, Tensor] = {}
        for l in self.lif_indices:
            zeros = np.zeros((batch,) + self.shapes[l], dtype)
            membranes[l] = Tensor(zeros, dtype=dtype)
            last_spikes[l] = Tensor(zeros.copy(), dtype=dtype)

        logit_sum: Tensor | None = None
        rate_sums: dict[int, Tensor] = {}
        maps: dict[int, list[np.ndarray]] = {l: [] for l in self.lif_indices} if record else {}

        for t in range(timesteps):
            h = T.take_step(x, t)
            for i, layer in enumerate(self.layers):
                if isinstance(layer, Linear):
                    h = h @ params[f"{i}.weight"]
                    if layer.bias:
                        h = h + params[f"{i}.bias"]
                elif isinstance(layer, Conv2d):
                    h = T.conv2d(h, params[f"{i}.weight"],
                                 params.get(f"{i}.bias"),
                                 stride=layer.stride, padding=layer.padding)
                elif isinstance(layer, AvgPool2d):
                    h = T.avgpool2d(h, layer.kernel, layer.stride)
                elif isinstance(layer, Flatten):
                    h = T.reshape(h, (batch, -1))
                else:  # LIF
                    s, u = lif_step(membranes[i], last_spikes[i], h, layer.cfg,
                                    mode=fire_mode)
                    membranes[i], last_spikes[i] = u, s
                    h = s
                    if record:
                        maps[i].append(s.data.reshape(batch, -1).copy())
                    if i in rate_layers:
                        flat = T.reshape(s, (batch, -1))
                        rate_sums[i] = flat if i not in rate_sums else rate_sums[i] + flat
            logit_sum = h if logit_sum is None else logit_sum + h

        logits = (1.0 / timesteps) * logit_sum
        rates = {l: (1.0 / timesteps) * acc for l, acc in rate_sums.items()}
        rec = None
        if record:
            rec = SpikeRecord({l: np.stack(m) for l, m in maps.items()}, timesteps)
        return ForwardResult(logits, rec, rates)


# -- reference architectures -----------------------------------------------------


def build_architecture(name: str, input_shape, n_classes: int,
                       cfg: LIFConfig | None = None) -> Network:
    """Construct one of the stock victim networks by name."""
    cfg = cfg or LIFConfig()
    if name == "convnet":
        c, h, w = input_shape
        layers = [
            Conv2d(c, 8, 3, padding=1), LIF(cfg),
            AvgPool2d(2),
            Conv2d(8, 8, 3, padding=1), LIF(cfg),
            AvgPool2d(2),
            Flatten(),
            Linear(8 * (h // 4) * (w // 4), n_classes),
        ]
    elif name == "mlp":
        (features,) = (int(np.prod(input_shape)),)
        layers = [
            Flatten() if len(input_shape) > 1 else None,
            Linear(features, 48), LIF(cfg),
            Linear(48, 32), LIF(cfg),
            Linear(32, n_classes),
        ]
        layers = [l for l in layers if l is not None]
    else:
        raise ValueError(f"unknown architecture {name!r}")
    return Network(layers, input_shape)


ARCHITECTURES = ("convnet", "mlp")
