"""Explicit detector topology shared by the model builder, pruner, and cost accounting.

The graph records widths, kernel sizes, strides, and wiring; tensor weights
live in the torch module built from it. Its JSON form is the stable contract
between a checkpoint and downstream tooling.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

from .errors import GraphError

INPUT_ID = "image"
INPUT_CHANNELS = 3

NODE_KINDS = ("conv", "norm", "activation", "add", "concat", "head")


@dataclass
class GraphNode:
    id: str
    kind: str
    inputs: list[str]
    in_channels: int
    out_channels: int
    kernel_size: int = 0
    stride: int = 1
    bias: bool = False
    prunable: bool = True


@dataclass
class ModelGraph:
    """Acyclic node list in topological order (inputs always precede users)."""

    nodes: list[GraphNode] = field(default_factory=list)

    def __post_init__(self) -> None:
        self._by_id = {n.id: n for n in self.nodes}

    # -- lookups ---------------------------------------------------------

    def node(self, node_id: str) -> GraphNode:
        try:
            return self._by_id[node_id]
        except KeyError:
            raise GraphError(f"unknown node {node_id!r}") from None

    def __contains__(self, node_id: str) -> bool:
        return node_id in self._by_id

    def width(self, node_id: str) -> int:
        if node_id == INPUT_ID:
            return INPUT_CHANNELS
        return self.node(node_id).out_channels

    def successors(self) -> dict[str, list[str]]:
        succ: dict[str, list[str]] = {INPUT_ID: []}
        for n in self.nodes:
            succ.setdefault(n.id, [])
        for n in self.nodes:
            for src in n.inputs:
                succ[src].append(n.id)
        return succ

    def conv_nodes(self) -> list[GraphNode]:
        return [n for n in self.nodes if n.kind in ("conv", "head")]

    def head_nodes(self) -> list[GraphNode]:
        return [n for n in self.nodes if n.kind == "head"]

    def head_strides(self) -> list[int]:
        strides = self.cumulative_strides()
        return sorted(strides[n.id] for n in self.head_nodes())

    # -- derived geometry --------------------------------------------------

    def cumulative_strides(self) -> dict[str, int]:
        """Per-node downsampling factor relative to the input image."""
        strides = {INPUT_ID: 1}
        for n in self.nodes:
            first = strides[n.inputs[0]]
            if n.kind in ("conv", "head"):
                strides[n.id] = first * n.stride
            else:
                strides[n.id] = first
        return strides

    def spatial_sizes(self, input_hw: tuple[int, int]) -> dict[str, tuple[int, int]]:
        h, w = input_hw
        sizes = {}
        for node_id, s in self.cumulative_strides().items():
            if h % s or w % s:
                raise GraphError(f"input {h}x{w} not divisible by stride {s} at {node_id!r}")
            sizes[node_id] = (h // s, w // s)
        return sizes

    def producing_conv(self, node_id: str) -> GraphNode:
        """Walk back through norm/activation chains to the conv that owns the channels."""
        n = self.node(node_id)
        seen = 0
        while n.kind in ("norm", "activation"):
            n = self.node(n.inputs[0])
            seen += 1
            if seen > len(self.nodes):
                raise GraphError("norm/activation chain does not terminate at a conv")
        if n.kind not in ("conv", "head"):
            raise GraphError(f"{node_id!r} is not produced by a conv (found {n.kind})")
        return n

    def activation_for_conv(self, conv_id: str) -> str:
        """Follow the conv -> norm -> activation chain forward to its activation node."""
        succ = self.successors()
        cur = self.node(conv_id)
        if cur.kind not in ("conv", "head"):
            raise GraphError(f"{conv_id!r} is not a conv node")
        node_id = conv_id
        while True:
            nexts = [s for s in succ[node_id] if self.node(s).kind in ("norm", "activation")]
            if not nexts:
                break
            node_id = nexts[0]
        if self.node(node_id).kind != "activation":
            raise GraphError(f"conv {conv_id!r} has no downstream activation")
        return node_id

    def default_tap_nodes(self) -> list[str]:
        """Activation outputs of every prunable conv (backbone + neck)."""
        return [
            self.activation_for_conv(n.id)
            for n in self.nodes
            if n.kind == "conv" and n.prunable
        ]

    # -- validation --------------------------------------------------------

    def validate(self) -> None:
        seen: set[str] = {INPUT_ID}
        if len({n.id for n in self.nodes}) != len(self.nodes):
            raise GraphError("duplicate node ids")
        for n in self.nodes:
            if n.id == INPUT_ID:
                raise GraphError(f"node id {INPUT_ID!r} is reserved")
            if n.kind not in NODE_KINDS:
                raise GraphError(f"{n.id}: unknown kind {n.kind!r}")
            if not n.inputs:
                raise GraphError(f"{n.id}: no inputs")
            for src in n.inputs:
                if src not in seen:
                    # catches cycles, forward references, and unknown ids alike
                    raise GraphError(f"{n.id}: input {src!r} does not precede it")
            in_widths = [self.width(src) for src in n.inputs]
            if n.kind in ("conv", "head"):
                if len(n.inputs) != 1:
                    raise GraphError(f"{n.id}: conv takes exactly one input")
                if n.kernel_size < 1 or n.stride < 1 or n.out_channels < 1:
                    raise GraphError(f"{n.id}: bad conv geometry")
                if n.in_channels != in_widths[0]:
                    raise GraphError(
                        f"{n.id}: in_channels {n.in_channels} != producer width {in_widths[0]}"
                    )
            elif n.kind in ("norm", "activation"):
                if len(n.inputs) != 1 or n.stride != 1:
                    raise GraphError(f"{n.id}: norm/activation must be a stride-1 pass-through")
                if n.in_channels != in_widths[0] or n.out_channels != in_widths[0]:
                    raise GraphError(f"{n.id}: width must match its input")
            elif n.kind == "add":
                if len(n.inputs) < 2 or len(set(in_widths)) != 1:
                    raise GraphError(f"{n.id}: add requires >=2 equal-width inputs")
                if n.out_channels != in_widths[0]:
                    raise GraphError(f"{n.id}: add width mismatch")
            elif n.kind == "concat":
                if len(n.inputs) < 2:
                    raise GraphError(f"{n.id}: concat requires >=2 inputs")
                if n.out_channels != sum(in_widths):
                    raise GraphError(f"{n.id}: concat width must sum inputs")
            seen.add(n.id)

        strides = self.cumulative_strides()
        for n in self.nodes:
            if n.kind in ("add", "concat"):
                s = {strides[src] for src in n.inputs}
                if len(s) != 1:
                    raise GraphError(f"{n.id}: junction inputs at different strides {s}")
            if n.kind == "conv":
                s = strides[n.id]
                if s < 1 or (s & (s - 1)) != 0:
                    raise GraphError(f"{n.id}: cumulative stride {s} is not a power of 2")

    # -- serialization -------------------------------------------------------

    def to_json_dict(self) -> dict:
        return {"nodes": [asdict(n) for n in self.nodes]}

    @classmethod
    def from_json_dict(cls, data: dict) -> "ModelGraph":
        graph = cls([GraphNode(**n) for n in data["nodes"]])
        graph.validate()
        return graph

    def save_json(self, path: str | Path) -> None:
        Path(path).write_text(json.dumps(self.to_json_dict(), indent=2, sort_keys=True))

    @classmethod
    def load_json(cls, path: str | Path) -> "ModelGraph":
        return cls.from_json_dict(json.loads(Path(path).read_text()))
