"""Convolution blocks: the plain two-conv block and the recurrent residual block.

A block is described by a :class:`BlockSpec`. :func:`init_block` creates its
parameters (a dict of relative name -> :class:`Parameter`) and batch-norm
running buffers; :func:`block_forward` applies it.

Recurrent convolution unit with ``t`` time steps, weights shared across steps::

    f   = conv3x3(x; w_f)
    o_1 = relu(bn(f))
    o_s = relu(bn(f + conv3x3(o_{s-1}; w_r)))      s = 2..t

so ``t=1`` is a plain conv-bn-relu with no recurrent weight, and every ``t >= 2``
has the same parameters. The batch-norm affine pair is shared across steps
while statistics (and running buffers) are kept per step.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Mapping

import numpy as np

from .errors import ConfigError
from .tensor import Parameter, Tensor, add, batchnorm, conv2d, relu

BLOCK_KINDS = ("plain", "rrcl")


@dataclass(frozen=True)
class BlockSpec:
    kind: str
    in_channels: int
    out_channels: int
    t: int = 2

    def __post_init__(self):
        if self.kind not in BLOCK_KINDS:
            raise ConfigError(f"unknown block kind {self.kind!r}; expected one of {BLOCK_KINDS}")
        if self.in_channels < 1 or self.out_channels < 1:
            raise ConfigError(f"block channels must be >= 1, got {self.in_channels}->{self.out_channels}")
        if self.t < 1:
            raise ConfigError(f"time step t must be >= 1, got {self.t}")


def he_uniform(rng: np.random.Generator, shape: tuple[int, ...], fan_in: int) -> np.ndarray:
    limit = np.sqrt(6.0 / fan_in)
    return rng.uniform(-limit, limit, size=shape)


def conv_params(rng, prefix: str, cin: int, cout: int, k: int) -> dict[str, Parameter]:
    return {
        "w": Parameter(f"{prefix}.w", he_uniform(rng, (cout, cin, k, k), cin * k * k)),
        "b": Parameter(f"{prefix}.b", np.zeros(cout)),
    }


def _bn(prefix: str, channels: int, steps: int, params: dict, buffers: dict, key: str) -> None:
    params[f"{key}.gamma"] = Parameter(f"{prefix}.{key}.gamma", np.ones(channels))
    params[f"{key}.beta"] = Parameter(f"{prefix}.{key}.beta", np.zeros(channels))
    buffers[f"{key}.mean"] = np.zeros((steps, channels))
    buffers[f"{key}.var"] = np.ones((steps, channels))


def init_block(spec: BlockSpec, rng: np.random.Generator, prefix: str = "block"):
    """Create ``(params, buffers)`` for ``spec``; parameter names are prefixed."""
    params: dict[str, Parameter] = {}
    buffers: dict[str, np.ndarray] = {}
    cin, cout = spec.in_channels, spec.out_channels
    if spec.kind == "plain":
        for i, (a, b) in enumerate([(cin, cout), (cout, cout)], start=1):
            p = conv_params(rng, f"{prefix}.conv{i}", a, b, 3)
            params[f"conv{i}.w"], params[f"conv{i}.b"] = p["w"], p["b"]
            _bn(prefix, cout, 1, params, buffers, f"bn{i}")
        return params, buffers

    p = conv_params(rng, f"{prefix}.entry", cin, cout, 1)
    params["entry.w"], params["entry.b"] = p["w"], p["b"]
    for u in (1, 2):
        pf = conv_params(rng, f"{prefix}.rcl{u}.f", cout, cout, 3)
        params[f"rcl{u}.wf"], params[f"rcl{u}.bf"] = pf["w"], pf["b"]
        if spec.t >= 2:
            pr = conv_params(rng, f"{prefix}.rcl{u}.r", cout, cout, 3)
            params[f"rcl{u}.wr"], params[f"rcl{u}.br"] = pr["w"], pr["b"]
        _bn(prefix, cout, spec.t, params, buffers, f"rcl{u}.bn")
    return params, buffers


def block_param_count(spec: BlockSpec) -> int:
    """Exact scalar count of a block's trainable parameters (closed form)."""
    cin, cout = spec.in_channels, spec.out_channels
    if spec.kind == "plain":
        return (9 * cin * cout + cout) + (9 * cout * cout + cout) + 2 * (2 * cout)
    convs_per_unit = 2 if spec.t >= 2 else 1
    unit = convs_per_unit * (9 * cout * cout + cout) + 2 * cout
    return (cin * cout + cout) + 2 * unit


def rcl_unit(
    x: Tensor,
    params: Mapping[str, Tensor],
    buffers: Mapping[str, np.ndarray] | None,
    t: int,
    train: bool = True,
    unit: str = "rcl1",
) -> Tensor:
    """One recurrent convolution unit unrolled over ``t`` steps."""
    if t < 1:
        raise ConfigError(f"time step t must be >= 1, got {t}")
    gamma, beta = params[f"{unit}.bn.gamma"], params[f"{unit}.bn.beta"]
    mean = buffers[f"{unit}.bn.mean"] if buffers is not None else None
    var = buffers[f"{unit}.bn.var"] if buffers is not None else None

    def norm(z, step):
        rm = mean[step] if mean is not None else None
        rv = var[step] if var is not None else None
        return relu(batchnorm(z, gamma, beta, rm, rv, train=train))

    feed = conv2d(x, params[f"{unit}.wf"], params[f"{unit}.bf"], padding=1)
    out = norm(feed, 0)
    for step in range(1, t):
        rec = conv2d(out, params[f"{unit}.wr"], params[f"{unit}.br"], padding=1)
        out = norm(add(feed, rec), step)
    return out


def rrcl_block(x: Tensor, params, buffers, spec: BlockSpec, train: bool = True) -> Tensor:
    """Recurrent residual block: 1x1 projection, two RCL units, residual add."""
    if spec.kind != "rrcl":
        raise ConfigError(f"rrcl_block called with kind {spec.kind!r}")
    proj = conv2d(x, params["entry.w"], params["entry.b"])
    y = rcl_unit(proj, params, buffers, spec.t, train, unit="rcl1")
    y = rcl_unit(y, params, buffers, spec.t, train, unit="rcl2")
    return add(proj, y)


def plain_block(x: Tensor, params, buffers, spec: BlockSpec, train: bool = True) -> Tensor:
    if spec.kind != "plain":
        raise ConfigError(f"plain_block called with kind {spec.kind!r}")
    for i in (1, 2):
        x = conv2d(x, params[f"conv{i}.w"], params[f"conv{i}.b"], padding=1)
        rm = buffers[f"bn{i}.mean"][0] if buffers is not None else None
        rv = buffers[f"bn{i}.var"][0] if buffers is not None else None
        x = relu(batchnorm(x, params[f"bn{i}.gamma"], params[f"bn{i}.beta"], rm, rv, train=train))
    return x


def block_forward(x: Tensor, params, buffers, spec: BlockSpec, train: bool = True) -> Tensor:
    if spec.kind == "plain":
        return plain_block(x, params, buffers, spec, train)
    return rrcl_block(x, params, buffers, spec, train)
