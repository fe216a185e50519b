"""Differentiable building blocks on top of torch autograd.

Layers are described by a ``LayerSpec`` and evaluated functionally with
``apply_layer(spec, x, params)``; ``Layer`` wraps the same thing as a
``torch.nn.Module`` so models can be composed the usual way. Gradients come
from torch's reverse-mode engine through ``backward``, which adds the
contract checks the training code relies on. ``adam_step`` is a plain
re-implementation of Adam with L2 regularization folded into the gradient.

Values cross the public boundary as float64 numpy arrays; inside a model
any torch dtype works (float32 for training, float64 for gradient checks).
"""

from __future__ import annotations

import enum
import math
from dataclasses import dataclass, field
from typing import Callable, Mapping

import numpy as np
import torch
import torch.nn.functional as F

from .dataio import ConfigError, read_container, write_container
from .tensor3 import ShapeError

SELU_ALPHA = 1.6732632423543772
SELU_SCALE = 1.0507009873554805


class ContractError(RuntimeError):
    pass


class LayerKind(str, enum.Enum):
    DENSE = "Dense"
    CONV1D = "Conv1d"
    CONV_TRANSPOSE1D = "ConvTranspose1d"
    INSTANCE_NORM1D = "InstanceNorm1d"
    BATCH_NORM1D = "BatchNorm1d"
    SELU = "SELU"
    SIGMOID = "Sigmoid"
    SOFTMAX = "Softmax"
    REFLECTION_PAD1 = "ReflectionPad1"
    ADAPTIVE_AVG_POOL1D = "AdaptiveAvgPool1d"
    GUMBEL_SOFTMAX = "GumbelSoftmax"


@dataclass(frozen=True)
class LayerSpec:
    kind: LayerKind
    in_size: int = 0        # features for Dense, channels otherwise
    out_size: int = 0
    kernel: int = 1
    stride: int = 1
    padding: int = 0
    output_padding: int = 0
    pool_size: int = 0
    temperature: float = 1.0
    eps: float = 1e-5
    momentum: float = 0.1

    def __post_init__(self):
        object.__setattr__(self, "kind", LayerKind(self.kind))
        k = self.kind
        if k in (LayerKind.DENSE, LayerKind.CONV1D, LayerKind.CONV_TRANSPOSE1D):
            if self.in_size < 1 or self.out_size < 1:
                raise ConfigError(f"{k.value} needs positive in/out sizes")
        if k in (LayerKind.CONV1D, LayerKind.CONV_TRANSPOSE1D):
            if self.kernel < 1 or self.stride < 1 or self.padding < 0:
                raise ConfigError(f"bad {k.value} geometry")
            if k is LayerKind.CONV_TRANSPOSE1D and not 0 <= self.output_padding < self.stride:
                raise ConfigError("output_padding must be smaller than stride")
        if k in (LayerKind.INSTANCE_NORM1D, LayerKind.BATCH_NORM1D) and self.in_size < 1:
            raise ConfigError(f"{k.value} needs a channel count")
        if k is LayerKind.ADAPTIVE_AVG_POOL1D and self.pool_size < 1:
            raise ConfigError("pool_size must be >= 1")
        if k is LayerKind.GUMBEL_SOFTMAX and not self.temperature > 0:
            raise ConfigError(f"temperature must be > 0, got {self.temperature}")

    def out_length(self, length: int) -> int:
        """Time length after this layer."""
        k = self.kind
        if k is LayerKind.CONV1D:
            return (length + 2 * self.padding - self.kernel) // self.stride + 1
        if k is LayerKind.CONV_TRANSPOSE1D:
            return (length - 1) * self.stride - 2 * self.padding + self.kernel + self.output_padding
        if k is LayerKind.REFLECTION_PAD1:
            return length + 2
        if k is LayerKind.ADAPTIVE_AVG_POOL1D:
            return self.pool_size
        return length


def dense(n_in: int, n_out: int) -> LayerSpec:
    return LayerSpec(LayerKind.DENSE, n_in, n_out)


def conv1d(c_in: int, c_out: int, kernel: int = 3, stride: int = 1, padding: int = 0) -> LayerSpec:
    return LayerSpec(LayerKind.CONV1D, c_in, c_out, kernel, stride, padding)


def down_conv(c_in: int, c_out: int) -> LayerSpec:
    """Kernel 3, stride 2, padding 1: halves an even length."""
    return conv1d(c_in, c_out, 3, 2, 1)


def up_conv(c_in: int, c_out: int) -> LayerSpec:
    """Transposed kernel 3, stride 2, padding 1, output padding 1: doubles the length."""
    return LayerSpec(LayerKind.CONV_TRANSPOSE1D, c_in, c_out, 3, 2, 1, 1)


def instance_norm(channels: int) -> LayerSpec:
    return LayerSpec(LayerKind.INSTANCE_NORM1D, channels)


def batch_norm(channels: int) -> LayerSpec:
    return LayerSpec(LayerKind.BATCH_NORM1D, channels)


def simple(kind: LayerKind | str, **kw) -> LayerSpec:
    return LayerSpec(LayerKind(kind), **kw)


# ------------------------------------------------------------------ params


def init_params(spec: LayerSpec, generator: torch.Generator | None = None,
                dtype: torch.dtype = torch.float32) -> dict[str, torch.Tensor]:
    """Fresh parameters: fan-in scaled uniform weights (unit variance gain,
    suited to SELU), zero biases, identity affine for norms."""
    k = spec.kind

    def uniform(shape, fan_in):
        bound = math.sqrt(3.0 / fan_in)
        return (torch.rand(shape, generator=generator, dtype=dtype) * 2 - 1) * bound

    if k is LayerKind.DENSE:
        return {"weight": uniform((spec.out_size, spec.in_size), spec.in_size),
                "bias": torch.zeros(spec.out_size, dtype=dtype)}
    if k is LayerKind.CONV1D:
        fan = spec.in_size * spec.kernel
        return {"weight": uniform((spec.out_size, spec.in_size, spec.kernel), fan),
                "bias": torch.zeros(spec.out_size, dtype=dtype)}
    if k is LayerKind.CONV_TRANSPOSE1D:
        # each output sample sees about in*kernel/stride inputs
        fan = max(1, spec.in_size * spec.kernel // spec.stride)
        return {"weight": uniform((spec.in_size, spec.out_size, spec.kernel), fan),
                "bias": torch.zeros(spec.out_size, dtype=dtype)}
    if k in (LayerKind.INSTANCE_NORM1D, LayerKind.BATCH_NORM1D):
        return {"weight": torch.ones(spec.in_size, dtype=dtype),
                "bias": torch.zeros(spec.in_size, dtype=dtype)}
    return {}


def init_running(spec: LayerSpec, dtype: torch.dtype = torch.float32) -> dict[str, torch.Tensor]:
    if spec.kind is not LayerKind.BATCH_NORM1D:
        return {}
    return {"mean": torch.zeros(spec.in_size, dtype=dtype),
            "var": torch.ones(spec.in_size, dtype=dtype)}


# ----------------------------------------------------------------- forward


def selu(x: torch.Tensor) -> torch.Tensor:
    """SELU with the canonical constants (torch's fused kernel uses the same)."""
    return F.selu(x)


def _need_channels(spec: LayerSpec, x: torch.Tensor):
    if x.dim() != 3 or x.shape[1] != spec.in_size:
        raise ShapeError(f"{spec.kind.value} expects (B, {spec.in_size}, L), got {tuple(x.shape)}")


def gumbel_softmax_sample(logits: torch.Tensor, temperature: float = 1.0, seed: int | None = None,
                          generator: torch.Generator | None = None) -> torch.Tensor:
    """Soft Gumbel-softmax sample over the last axis.

    ``softmax((logits + g) / temperature)`` with g standard Gumbel noise.
    Pass either a seed or a generator; with neither the global torch RNG is used.
    """
    if not temperature > 0:
        raise ConfigError(f"temperature must be > 0, got {temperature}")
    logits = torch.as_tensor(logits)
    if not logits.is_floating_point():
        logits = logits.to(torch.float64)
    if generator is None and seed is not None:
        generator = torch.Generator().manual_seed(int(seed))
    u = torch.rand(logits.shape, generator=generator, dtype=logits.dtype)
    tiny = torch.finfo(logits.dtype).tiny
    u = u.clamp(min=tiny, max=1.0 - torch.finfo(logits.dtype).eps)
    g = -torch.log(-torch.log(u))
    return torch.softmax((logits + g) / temperature, dim=-1)


def apply_layer(spec: LayerSpec, x: torch.Tensor, params: Mapping[str, torch.Tensor] | None = None,
                *, training: bool = True, running: Mapping[str, torch.Tensor] | None = None,
                generator: torch.Generator | None = None) -> torch.Tensor:
    """Forward value of one layer.

    Conv and norm layers take (B, C, L). Dense and the pointwise kinds act on
    the last axis of any shape. ``running`` holds batch-norm running stats;
    in training mode they are updated in place.
    """
    k = spec.kind
    params = params or {}
    if k is LayerKind.DENSE:
        if x.dim() < 1 or x.shape[-1] != spec.in_size:
            raise ShapeError(f"Dense expects last axis {spec.in_size}, got {tuple(x.shape)}")
        return F.linear(x, params["weight"], params["bias"])
    if k is LayerKind.CONV1D:
        _need_channels(spec, x)
        if spec.out_length(x.shape[2]) < 1:
            raise ShapeError(f"input length {x.shape[2]} too short for kernel {spec.kernel}")
        return F.conv1d(x, params["weight"], params["bias"], stride=spec.stride, padding=spec.padding)
    if k is LayerKind.CONV_TRANSPOSE1D:
        _need_channels(spec, x)
        return F.conv_transpose1d(x, params["weight"], params["bias"], stride=spec.stride,
                                  padding=spec.padding, output_padding=spec.output_padding)
    if k is LayerKind.INSTANCE_NORM1D:
        _need_channels(spec, x)
        return F.instance_norm(x, weight=params.get("weight"), bias=params.get("bias"), eps=spec.eps)
    if k is LayerKind.BATCH_NORM1D:
        _need_channels(spec, x)
        if training and x.shape[0] < 2:
            raise ConfigError("BatchNorm1d in training mode needs a batch of at least 2")
        rm = running.get("mean") if running else None
        rv = running.get("var") if running else None
        use_batch = training or rm is None
        return F.batch_norm(x, rm, rv, params.get("weight"), params.get("bias"),
                            training=use_batch, momentum=spec.momentum, eps=spec.eps)
    if k is LayerKind.SELU:
        return selu(x)
    if k is LayerKind.SIGMOID:
        return torch.sigmoid(x)
    if k is LayerKind.SOFTMAX:
        return torch.softmax(x, dim=-1)
    if k is LayerKind.REFLECTION_PAD1:
        if x.dim() != 3 or x.shape[2] < 2:
            raise ShapeError(f"ReflectionPad1 needs (B, C, L>=2), got {tuple(x.shape)}")
        return F.pad(x, (1, 1), mode="reflect")
    if k is LayerKind.ADAPTIVE_AVG_POOL1D:
        if x.dim() != 3:
            raise ShapeError(f"AdaptiveAvgPool1d needs (B, C, L), got {tuple(x.shape)}")
        return F.adaptive_avg_pool1d(x, spec.pool_size)
    if k is LayerKind.GUMBEL_SOFTMAX:
        return gumbel_softmax_sample(x, spec.temperature, generator=generator)
    raise ConfigError(f"unknown layer kind {k}")


class Layer(torch.nn.Module):
    """Module wrapper around a LayerSpec and its parameters."""

    def __init__(self, spec: LayerSpec, generator: torch.Generator | None = None,
                 dtype: torch.dtype = torch.float32):
        super().__init__()
        self.spec = spec
        self.weights = torch.nn.ParameterDict(
            {n: torch.nn.Parameter(t) for n, t in init_params(spec, generator, dtype).items()})
        for n, t in init_running(spec, dtype).items():
            self.register_buffer(f"running_{n}", t)

    def forward(self, x, generator: torch.Generator | None = None):
        running = None
        if self.spec.kind is LayerKind.BATCH_NORM1D:
            running = {"mean": self.running_mean, "var": self.running_var}
        return apply_layer(self.spec, x, dict(self.weights), training=self.training,
                           running=running, generator=generator)

    def extra_repr(self):
        return self.spec.kind.value


def sequential(*specs: LayerSpec, generator: torch.Generator | None = None) -> torch.nn.Sequential:
    return torch.nn.Sequential(*(Layer(s, generator) for s in specs))


# ---------------------------------------------------------------- gradients


def _named(params) -> dict[str, torch.Tensor]:
    if isinstance(params, torch.nn.Module):
        return dict(params.named_parameters())
    if isinstance(params, Mapping):
        return dict(params)
    return {str(i): p for i, p in enumerate(params)}


def backward(loss: torch.Tensor, params, *, retain_graph: bool = False,
             accumulate: bool = False) -> dict[str, torch.Tensor]:
    """Gradients of a scalar loss for every parameter.

    Parameters the loss does not depend on get exact zeros. The gradients
    are returned by name and, with ``accumulate``, also added to ``.grad``.
    """
    if not isinstance(loss, torch.Tensor) or loss.numel() != 1:
        shape = tuple(loss.shape) if isinstance(loss, torch.Tensor) else type(loss).__name__
        raise ContractError(f"backward needs a scalar loss, got {shape}")
    if not torch.isfinite(loss).all():
        raise ContractError(f"loss is not finite: {float(loss.detach())}")
    named = _named(params)
    live = {n: p for n, p in named.items() if p.requires_grad}
    grads = {}
    if live and loss.requires_grad:
        got = torch.autograd.grad(loss.reshape(()), list(live.values()), allow_unused=True,
                                  retain_graph=retain_graph)
        grads = dict(zip(live.keys(), got))
    out = {}
    for n, p in named.items():
        g = grads.get(n)
        out[n] = torch.zeros_like(p) if g is None else g
        if accumulate:
            p.grad = out[n].detach().clone() if p.grad is None else p.grad + out[n].detach()
    return out


def finite_difference_error(fn: Callable[[], torch.Tensor], tensors: Mapping[str, torch.Tensor],
                            n_coords: int = 100, h: float = 1e-5, seed: int = 0,
                            floor: float = 1e-6, refine: int = 0) -> dict[str, float]:
    """Largest relative gap between autograd and central differences.

    For each named tensor ``n_coords`` random entries are perturbed by +-h
    (all of them when the tensor is smaller). The error of one coordinate is
    |analytic - numeric| / max(|analytic|, |numeric|, floor). Run in float64.

    With ``refine`` > 0 a coordinate keeps its best agreement over the steps
    h, h/10, ..., h/10**refine. A SELU input within h of zero spoils only
    the larger steps, while a wrong analytic gradient misses at every step.
    """
    rng = np.random.default_rng(seed)
    names = list(tensors)
    for t in tensors.values():
        t.requires_grad_(True)
    analytic = backward(fn(), tensors)
    steps = [h / 10 ** j for j in range(refine + 1)]
    worst = {}
    with torch.no_grad():
        for n in names:
            flat = tensors[n].view(-1)
            idx = rng.choice(flat.numel(), size=min(n_coords, flat.numel()), replace=False)
            err = 0.0
            for i in idx:
                a = float(analytic[n].reshape(-1)[i])
                old = float(flat[i])
                best = math.inf
                for step in steps:
                    flat[i] = old + step
                    up = float(fn())
                    flat[i] = old - step
                    down = float(fn())
                    flat[i] = old
                    num = (up - down) / (2 * step)
                    best = min(best, abs(a - num) / max(abs(a), abs(num), floor))
                    if best <= 1e-6:
                        break
                err = max(err, best)
            worst[n] = err
    return worst


# ------------------------------------------------------------------- Adam


@dataclass
class AdamState:
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)
    t: int = 0


def adam_step(params: Mapping[str, torch.Tensor], grads: Mapping[str, torch.Tensor],
              state: AdamState, lr: float, weight_decay: float = 0.0,
              betas: tuple[float, float] = (0.9, 0.999), eps: float = 1e-8) -> AdamState:
    """One in-place Adam update.

    The L2 term ``weight_decay * w`` is added to the gradient before the
    moment estimates, the classic (coupled) form.
    """
    if not lr > 0:
        raise ConfigError(f"learning rate must be > 0, got {lr}")
    b1, b2 = betas
    state.t += 1
    c1 = 1.0 - b1 ** state.t
    c2 = 1.0 - b2 ** state.t
    with torch.no_grad():
        for name, p in params.items():
            g = grads[name]
            if weight_decay:
                g = g + weight_decay * p
            m = state.m.get(name)
            if m is None:
                m = state.m[name] = torch.zeros_like(p)
                state.v[name] = torch.zeros_like(p)
            v = state.v[name]
            m.mul_(b1).add_(g, alpha=1.0 - b1)
            v.mul_(b2).addcmul_(g, g, value=1.0 - b2)
            denom = (v / c2).sqrt_().add_(eps)
            p.addcdiv_(m, denom, value=-lr / c1)
    return state


class Adam:
    """Adam over a fixed set of named parameters."""

    def __init__(self, params, lr: float = 1e-3, weight_decay: float = 0.0,
                 betas: tuple[float, float] = (0.9, 0.999), eps: float = 1e-8):
        if not lr > 0:
            raise ConfigError(f"learning rate must be > 0, got {lr}")
        self.params = _named(params)
        self.lr, self.weight_decay, self.betas, self.eps = lr, weight_decay, betas, eps
        self.state = AdamState()

    def step(self, grads: Mapping[str, torch.Tensor]):
        adam_step(self.params, grads, self.state, self.lr, self.weight_decay, self.betas, self.eps)

    def state_tensors(self, prefix: str) -> dict[str, np.ndarray]:
        out = {f"{prefix}.t": np.array([float(self.state.t)])}
        for n in self.state.m:
            out[f"{prefix}.m.{n}"] = self.state.m[n].detach().double().numpy()
            out[f"{prefix}.v.{n}"] = self.state.v[n].detach().double().numpy()
        return out

    def load_state_tensors(self, prefix: str, tensors: Mapping[str, np.ndarray]):
        self.state = AdamState(t=int(tensors[f"{prefix}.t"][0]))
        for n, p in self.params.items():
            key = f"{prefix}.m.{n}"
            if key in tensors:
                self.state.m[n] = torch.as_tensor(tensors[key], dtype=p.dtype).clone()
                self.state.v[n] = torch.as_tensor(tensors[f"{prefix}.v.{n}"], dtype=p.dtype).clone()


# ------------------------------------------------------------- checkpoints


def module_tensors(module: torch.nn.Module, prefix: str = "") -> dict[str, np.ndarray]:
    """Parameters and buffers as float64 arrays, keyed by dotted name."""
    return {prefix + n: t.detach().to(torch.float64).numpy().copy()
            for n, t in module.state_dict().items() if t.is_floating_point()}


def load_module_tensors(module: torch.nn.Module, tensors: Mapping[str, np.ndarray], prefix: str = ""):
    own = module.state_dict()
    missing = [n for n, t in own.items() if t.is_floating_point() and prefix + n not in tensors]
    if missing:
        raise KeyError(f"checkpoint lacks {missing[:3]}{'...' if len(missing) > 3 else ''}")
    new = {n: (torch.as_tensor(tensors[prefix + n], dtype=t.dtype) if t.is_floating_point() else t)
           for n, t in own.items()}
    module.load_state_dict(new)


def save_params(path, tensors: Mapping[str, np.ndarray], meta: dict | None = None):
    m = {"kind": "parameters"}
    m.update(meta or {})
    return write_container(path, m, dict(tensors))


def load_params(path) -> tuple[dict, dict[str, np.ndarray]]:
    meta, tensors = read_container(path)
    if meta.get("kind") != "parameters":
        raise ValueError(f"{path}: not a parameter file")
    return meta, tensors
