"""Nested encoder-decoder grid with dense skip pathways and depth heads.

Node ``X(m, n)`` sits at down-sampling level ``m`` and position ``n`` along
the skip pathway. Its input is::

    n == 0:  maxpool(X(m-1, 0))            (the raw image for m == 0)
    n >  0:  concat(X(m,0), ..., X(m,n-1), up(X(m+1, n-1)))

Heads ``sigmoid(conv1x1(X(0, q)))`` for q = 1..D give one probability map per
depth. Nodes are ordered by anti-diagonal ``m + n`` so the sub-network of depth
q is a prefix of the full plan.
"""
from __future__ import annotations

from dataclasses import asdict, dataclass
from typing import Mapping, NamedTuple, Sequence

import numpy as np

from .blocks import BLOCK_KINDS, BlockSpec, block_forward, block_param_count, conv_params, he_uniform, init_block
from .errors import ConfigError, ShapeError
from .tensor import Parameter, Tensor, concat_channels, conv2d, maxpool_2x2, mean_of, no_grad, sigmoid, upsample_2x

SKIP_STYLES = ("dense", "simple")


class NodeId(NamedTuple):
    m: int
    n: int

    def __str__(self) -> str:
        return f"X({self.m},{self.n})"

    @property
    def key(self) -> str:
        return f"X{self.m}_{self.n}"


class Edge(NamedTuple):
    kind: str  # "input" | "pool" | "same" | "up"
    src: NodeId | None = None

    def __str__(self) -> str:
        if self.kind == "input":
            return "input"
        if self.kind == "same":
            return str(self.src)
        return f"{self.kind} {self.src}"


@dataclass(frozen=True)
class ArchitectureConfig:
    depth: int = 4
    filters: tuple[int, ...] = (32, 64, 128, 256, 512)
    block_kind: str = "rrcl"
    t: int = 2
    num_classes: int = 1
    deep_supervision: bool = True
    skip_style: str = "dense"
    in_channels: int = 1

    def __post_init__(self):
        object.__setattr__(self, "filters", tuple(int(f) for f in self.filters))
        if self.depth < 1:
            raise ConfigError(f"depth must be >= 1, got {self.depth}")
        if len(self.filters) != self.depth + 1:
            raise ConfigError(f"filters needs depth+1 = {self.depth + 1} entries, got {len(self.filters)}")
        if any(f < 1 for f in self.filters):
            raise ConfigError(f"filters must be positive, got {self.filters}")
        if self.block_kind not in BLOCK_KINDS:
            raise ConfigError(f"block_kind must be one of {BLOCK_KINDS}, got {self.block_kind!r}")
        if self.skip_style not in SKIP_STYLES:
            raise ConfigError(f"skip_style must be one of {SKIP_STYLES}, got {self.skip_style!r}")
        if self.t < 1:
            raise ConfigError(f"t must be >= 1, got {self.t}")
        if self.num_classes < 1 or self.in_channels < 1:
            raise ConfigError("num_classes and in_channels must be >= 1")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["filters"] = list(self.filters)
        return d

    @classmethod
    def from_dict(cls, d: Mapping) -> "ArchitectureConfig":
        unknown = set(d) - set(cls.__dataclass_fields__)
        if unknown:
            raise ConfigError(f"unknown architecture keys: {sorted(unknown)}")
        return cls(**d)


@dataclass(frozen=True)
class GraphPlan:
    depth: int
    nodes: tuple[NodeId, ...]
    inputs: Mapping[NodeId, tuple[Edge, ...]]
    heads: tuple[NodeId, ...]
    skip_style: str = "dense"


def build_plan(config: ArchitectureConfig) -> GraphPlan:
    d = config.depth
    inputs: dict[NodeId, tuple[Edge, ...]] = {}

    def encoder(m: int) -> tuple[Edge, ...]:
        return (Edge("input"),) if m == 0 else (Edge("pool", NodeId(m - 1, 0)),)

    if config.skip_style == "dense":
        nodes = []
        for diag in range(d + 1):
            for n in range(diag + 1):
                m = diag - n
                node = NodeId(m, n)
                nodes.append(node)
                if n == 0:
                    inputs[node] = encoder(m)
                else:
                    same = tuple(Edge("same", NodeId(m, k)) for k in range(n))
                    inputs[node] = same + (Edge("up", NodeId(m + 1, n - 1)),)
        heads = tuple(NodeId(0, q) for q in range(1, d + 1))
    else:
        nodes = [NodeId(m, 0) for m in range(d + 1)]
        for m in range(d + 1):
            inputs[NodeId(m, 0)] = encoder(m)
        for m in range(d - 1, -1, -1):
            node = NodeId(m, d - m)
            nodes.append(node)
            inputs[node] = (Edge("same", NodeId(m, 0)), Edge("up", NodeId(m + 1, d - m - 1)))
        heads = (NodeId(0, d),)
    return GraphPlan(d, tuple(nodes), inputs, heads, config.skip_style)


def prune(plan: GraphPlan, q: int) -> GraphPlan:
    """Sub-plan of depth ``q``: nodes with m + n <= q and the single head X(0,q)."""
    if not 1 <= q <= plan.depth:
        raise ConfigError(f"prune depth q must be in 1..{plan.depth}, got {q}")
    if plan.skip_style != "dense" and q != plan.depth:
        raise ConfigError("only dense plans embed lower-depth sub-networks")
    nodes = tuple(v for v in plan.nodes if v.m + v.n <= q)
    return GraphPlan(plan.depth, nodes, {v: plan.inputs[v] for v in nodes}, (NodeId(0, q),), plan.skip_style)


def dump_plan(plan: GraphPlan) -> str:
    """Plain-text adjacency listing, one ``X(m,n) <- [...]`` line per node."""
    lines = []
    for v in plan.nodes:
        line = f"{v} <- [{', '.join(str(e) for e in plan.inputs[v])}]"
        if v in plan.heads:
            line += " head"
        lines.append(line)
    return "\n".join(lines) + "\n"


def node_in_channels(config: ArchitectureConfig, plan: GraphPlan, v: NodeId) -> int:
    f = config.filters
    edges = plan.inputs[v]
    if edges[0].kind == "input":
        return config.in_channels
    if edges[0].kind == "pool":
        return f[v.m - 1]
    # every same-level and up-sampled input arrives with filters[m] channels
    return len(edges) * f[v.m]


def _up_count(f_lo: int, f_hi: int) -> int:
    return 4 * f_lo * f_hi + f_hi


def parameter_table(config: ArchitectureConfig) -> list[tuple[str, int]]:
    """Per-component parameter counts in plan order (blocks, up-samplers, heads)."""
    plan = build_plan(config)
    f = config.filters
    rows = []
    for v in plan.nodes:
        spec = BlockSpec(config.block_kind, node_in_channels(config, plan, v), f[v.m], config.t)
        rows.append((f"{v} block", block_param_count(spec)))
        if plan.inputs[v][-1].kind == "up":
            rows.append((f"{v} up", _up_count(f[v.m + 1], f[v.m])))
    for h in plan.heads:
        rows.append((f"head {h}", f[0] * config.num_classes + config.num_classes))
    return rows


def count_parameters(config: ArchitectureConfig) -> int:
    return sum(c for _, c in parameter_table(config))


# Reference architectures with published sizes, all with the [32, 64, 128, 256, 512] schedule.
PRESETS: dict[str, tuple[str, ArchitectureConfig, float]] = {
    "unet": ("U-NET", ArchitectureConfig(block_kind="plain", skip_style="simple"), 7.0e6),
    "r2unet": ("R2U-NET", ArchitectureConfig(block_kind="rrcl", skip_style="simple", t=2), 16.7e6),
    "unetpp": ("U-NET++", ArchitectureConfig(block_kind="plain", skip_style="dense"), 9.0e6),
    "r2upp_t1": ("R2U++", ArchitectureConfig(block_kind="rrcl", skip_style="dense", t=1), 9.7e6),
    "r2upp_t2": ("R2U++", ArchitectureConfig(block_kind="rrcl", skip_style="dense", t=2), 18.0e6),
}


class ForwardResult(NamedTuple):
    nodes: dict[NodeId, Tensor]
    heads: dict[int, Tensor]


def head(x: Tensor, params: Mapping[str, Tensor], num_classes: int | None = None) -> Tensor:
    """1x1 convolution to ``num_classes`` channels followed by a sigmoid."""
    w = params["w"]
    if num_classes is not None and w.shape[0] != num_classes:
        raise ShapeError(f"head weight has {w.shape[0]} outputs, expected {num_classes}")
    return sigmoid(conv2d(x, w, params["b"]))


def ensemble(head_outputs: Sequence[Tensor]) -> Tensor:
    if not head_outputs:
        raise ShapeError("ensemble of an empty list")
    return mean_of(head_outputs)


class NestedUNet:
    """Parameters and buffers for every node of a plan, plus the forward pass."""

    def __init__(self, config: ArchitectureConfig, seed: int = 0):
        self.config = config
        self.plan = build_plan(config)
        rng = np.random.default_rng(seed)
        f = config.filters
        self.params: dict[str, Parameter] = {}
        self.buffers: dict[str, np.ndarray] = {}
        self.specs: dict[NodeId, BlockSpec] = {}
        self.block_params: dict[NodeId, dict[str, Parameter]] = {}
        self.block_buffers: dict[NodeId, dict[str, np.ndarray]] = {}
        self.up_params: dict[NodeId, dict[str, Parameter]] = {}
        self.head_params: dict[int, dict[str, Parameter]] = {}

        for v in self.plan.nodes:
            spec = BlockSpec(config.block_kind, node_in_channels(config, self.plan, v), f[v.m], config.t)
            params, buffers = init_block(spec, rng, prefix=v.key)
            self.specs[v] = spec
            self.block_params[v] = params
            self.block_buffers[v] = buffers
            for p in params.values():
                self.params[p.name] = p
            for rel, buf in buffers.items():
                self.buffers[f"{v.key}.{rel}"] = buf
            if self.plan.inputs[v][-1].kind == "up":
                cin, cout = f[v.m + 1], f[v.m]
                up = {
                    "w": Parameter(f"{v.key}.up.w", he_uniform(rng, (cin, cout, 2, 2), cin)),
                    "b": Parameter(f"{v.key}.up.b", np.zeros(cout)),
                }
                self.up_params[v] = up
                self.params.update({p.name: p for p in up.values()})
        for h in self.plan.heads:
            hp = conv_params(rng, f"head{h.n}", f[0], config.num_classes, 1)
            self.head_params[h.n] = hp
            self.params.update({p.name: p for p in hp.values()})

    def parameters(self) -> list[Parameter]:
        return list(self.params.values())

    def num_parameters(self) -> int:
        return sum(p.data.size for p in self.params.values())

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.zero_grad()

    def check_input(self, x: Tensor) -> None:
        if x.ndim != 4:
            raise ShapeError(f"network input must be NCHW, got shape {x.shape}")
        factor = 2 ** self.config.depth
        if x.shape[2] % factor or x.shape[3] % factor:
            raise ShapeError(f"input spatial dims {x.shape[2:]} must be divisible by 2^depth = {factor}")
        if x.shape[1] != self.config.in_channels:
            raise ShapeError(f"input has {x.shape[1]} channels, model expects {self.config.in_channels}")

    def forward(self, x, plan: GraphPlan | None = None, train: bool = False) -> ForwardResult:
        x = x if isinstance(x, Tensor) else Tensor(x)
        self.check_input(x)
        plan = plan or self.plan
        acts: dict[NodeId, Tensor] = {}
        for v in plan.nodes:
            feeds = []
            for e in plan.inputs[v]:
                if e.kind == "input":
                    feeds.append(x)
                elif e.kind == "pool":
                    feeds.append(maxpool_2x2(acts[e.src])[0])
                elif e.kind == "same":
                    feeds.append(acts[e.src])
                else:
                    up = self.up_params[v]
                    feeds.append(upsample_2x(acts[e.src], up["w"], up["b"]))
            inp = feeds[0] if len(feeds) == 1 else concat_channels(feeds)
            acts[v] = block_forward(inp, self.block_params[v], self.block_buffers[v], self.specs[v], train)
        heads = {h.n: head(acts[h], self.head_params[h.n], self.config.num_classes) for h in plan.heads}
        return ForwardResult(acts, heads)

    __call__ = forward

    def predict(self, x, mode: str | int = "ensemble") -> np.ndarray:
        """Inference-mode probabilities: ``"ensemble"`` or a depth ``q``."""
        with no_grad():
            if mode == "ensemble":
                res = self.forward(x, train=False)
                return ensemble([res.heads[q] for q in sorted(res.heads)]).data
            q = int(mode)
            plan = prune(self.plan, q) if self.plan.skip_style == "dense" else self.plan
            return self.forward(x, plan=plan, train=False).heads[q].data

    def state(self) -> list[tuple[str, np.ndarray, str]]:
        """Ordered ``(name, array, kind)`` entries for serialisation."""
        out = [(name, p.data, "param") for name, p in self.params.items()]
        out += [(name, b, "buffer") for name, b in self.buffers.items()]
        return out

    def load_state(self, arrays: Mapping[str, np.ndarray]) -> None:
        for name, p in self.params.items():
            p.data[...] = arrays[name]
        for name, b in self.buffers.items():
            b[...] = arrays[name]


def forward(plan: GraphPlan, model: NestedUNet, x, train: bool = False) -> ForwardResult:
    return model.forward(x, plan=plan, train=train)
