"""Channel-removal planning and structurally safe application.

Conv outputs that are forced to share channel indices (e.g. both inputs of a
residual add) form one pruning group; a plan removes the same sorted index set
from every member and from every consumer's input slices, with concat inputs
remapped by offset.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import torch

from .detector import ToyDetector
from .errors import ConfigurationError, GraphError, PlanError
from .graph import INPUT_ID, GraphNode, ModelGraph
from .metrics import count_flops, count_params
from .saliency import ImportanceTable

_INPUT_SPACE = "__input__"


@dataclass
class PruningGroup:
    root: str
    members: list[str]
    width: int
    prunable: bool


# --------------------------------------------------------------------------
# channel spaces
# --------------------------------------------------------------------------

class _SpaceIndex:
    """Union-find over conv output spaces plus per-node segment lists."""

    def __init__(self, graph: ModelGraph):
        graph.validate()
        self.graph = graph
        self._parent: dict[str, str] = {_INPUT_SPACE: _INPUT_SPACE}
        self.segments: dict[str, list[tuple[str, int]]] = {
            INPUT_ID: [(_INPUT_SPACE, 3)]
        }
        for node in graph.nodes:
            if node.kind in ("conv", "head"):
                self._parent[node.id] = node.id
                self.segments[node.id] = [(node.id, node.out_channels)]
            elif node.kind in ("norm", "activation"):
                self.segments[node.id] = self.segments[node.inputs[0]]
            elif node.kind == "add":
                base = self.segments[node.inputs[0]]
                for src in node.inputs[1:]:
                    other = self.segments[src]
                    if [w for _, w in base] != [w for _, w in other]:
                        raise GraphError(f"{node.id}: add inputs segment differently")
                    for (a, _), (b, _) in zip(base, other):
                        self._union(a, b)
                self.segments[node.id] = base
            elif node.kind == "concat":
                segs: list[tuple[str, int]] = []
                for src in node.inputs:
                    segs.extend(self.segments[src])
                self.segments[node.id] = segs

    def _find(self, x: str) -> str:
        while self._parent[x] != x:
            self._parent[x] = self._parent[self._parent[x]]
            x = self._parent[x]
        return x

    def _union(self, a: str, b: str) -> None:
        ra, rb = self._find(a), self._find(b)
        if ra != rb:
            # deterministic root: lexicographically smaller id wins
            lo, hi = sorted((ra, rb))
            self._parent[hi] = lo

    def root_of(self, conv_id: str) -> str:
        return self._find(conv_id)

    def resolved_segments(self, node_id: str) -> list[tuple[str, int]]:
        return [(self._find(owner) if owner != _INPUT_SPACE else _INPUT_SPACE, w)
                for owner, w in self.segments[node_id]]

    def groups(self) -> list[PruningGroup]:
        members: dict[str, list[str]] = {}
        for node in self.graph.conv_nodes():
            members.setdefault(self._find(node.id), []).append(node.id)
        out = []
        for root in sorted(members):
            ids = sorted(members[root])
            widths = {self.graph.node(i).out_channels for i in ids}
            if len(widths) != 1:
                raise GraphError(f"group {root}: member widths differ: {widths}")
            prunable = all(
                self.graph.node(i).kind == "conv" and self.graph.node(i).prunable
                for i in ids
            )
            out.append(PruningGroup(root=min(ids), members=ids,
                                    width=widths.pop(), prunable=prunable))
        return out


def build_groups(graph: ModelGraph) -> list[PruningGroup]:
    return _SpaceIndex(graph).groups()


# --------------------------------------------------------------------------
# plans
# --------------------------------------------------------------------------

@dataclass
class PruningPlan:
    rate: float
    input_size: int
    groups: dict[str, dict]  # root -> {members, width, removals, keep}
    params_before: int
    params_after: int
    flops_before: int
    flops_after: int
    meta: dict = field(default_factory=dict)

    def removals(self) -> dict[str, list[int]]:
        return {root: list(g["removals"]) for root, g in self.groups.items()}

    def to_json_dict(self) -> dict:
        return {
            "rate": self.rate,
            "input_size": self.input_size,
            "groups": self.groups,
            "cost": {
                "params_before": self.params_before,
                "params_after": self.params_after,
                "flops_before": self.flops_before,
                "flops_after": self.flops_after,
            },
            "meta": self.meta,
        }

    def dumps(self) -> str:
        return json.dumps(self.to_json_dict(), indent=2, sort_keys=True)

    def save(self, path: str | Path) -> None:
        Path(path).write_text(self.dumps())

    @classmethod
    def from_json_dict(cls, data: dict) -> "PruningPlan":
        cost = data["cost"]
        return cls(
            rate=data["rate"],
            input_size=data["input_size"],
            groups=data["groups"],
            params_before=cost["params_before"],
            params_after=cost["params_after"],
            flops_before=cost["flops_before"],
            flops_after=cost["flops_after"],
            meta=data.get("meta", {}),
        )

    @classmethod
    def load(cls, path: str | Path) -> "PruningPlan":
        return cls.from_json_dict(json.loads(Path(path).read_text()))

    def validate_against(self, graph: ModelGraph) -> None:
        actual = {g.root: g for g in build_groups(graph)}
        for root, entry in self.groups.items():
            if root not in actual:
                raise PlanError(f"plan group {root!r} not present in graph")
            group = actual[root]
            if not group.prunable and entry["removals"]:
                raise PlanError(f"plan prunes unprunable group {root!r}")
            if sorted(entry["members"]) != group.members:
                raise PlanError(f"plan group {root!r} members differ from graph")
            if entry["width"] != group.width:
                raise PlanError(
                    f"plan group {root!r} width {entry['width']} != graph {group.width}"
                )
            removals = entry["removals"]
            if len(set(removals)) != len(removals):
                raise PlanError(f"group {root!r}: duplicate removal indices")
            if any(not (0 <= r < group.width) for r in removals):
                raise PlanError(f"group {root!r}: removal index out of range")
            if group.width - len(removals) < 1:
                raise PlanError(f"group {root!r}: would remove every channel")


def group_scores(tables: dict[str, ImportanceTable], group: PruningGroup):
    """Elementwise sum of member tables: coupled channels live or die together."""
    total = None
    for member in group.members:
        if member not in tables:
            raise PlanError(f"no importance table for prunable layer {member!r}")
        scores = tables[member].scores
        if len(scores) != group.width:
            raise PlanError(
                f"table for {member!r} has {len(scores)} channels, group width is "
                f"{group.width}"
            )
        total = scores.copy() if total is None else total + scores
    return total


def make_plan(tables: dict[str, ImportanceTable], groups: list[PruningGroup],
              rate: float, graph: ModelGraph, input_size: int = 128,
              meta: dict | None = None) -> PruningPlan:
    """Remove the floor(rate * width) lowest-scoring channels per prunable group."""
    if not (0.0 <= rate < 1.0):
        raise ConfigurationError(f"pruning rate must be in [0, 1), got {rate}")
    plan_groups: dict[str, dict] = {}
    for group in groups:
        if not group.prunable:
            continue
        scores = group_scores(tables, group)
        k = min(int(math.floor(rate * group.width)), group.width - 1)
        order = sorted(range(group.width), key=lambda i: (scores[i], i))
        removals = sorted(order[:k])
        plan_groups[group.root] = {
            "members": list(group.members),
            "width": group.width,
            "removals": removals,
            "keep": group.width - len(removals),
        }
    pruned = prune_graph(graph, _kept_from_removals(graph, plan_groups))
    plan = PruningPlan(
        rate=rate,
        input_size=input_size,
        groups=plan_groups,
        params_before=count_params(graph),
        params_after=count_params(pruned),
        flops_before=count_flops(graph, input_size),
        flops_after=count_flops(pruned, input_size),
        meta=meta or {},
    )
    plan.validate_against(graph)
    return plan


def plan_from_removals(removals: dict[str, list[int]], graph: ModelGraph,
                       input_size: int = 128, meta: dict | None = None) -> PruningPlan:
    """Plan with explicitly chosen removal indices (keyed by group root)."""
    groups = {g.root: g for g in build_groups(graph)}
    plan_groups = {}
    for root, idxs in removals.items():
        if root not in groups:
            raise PlanError(f"unknown group root {root!r}")
        g = groups[root]
        plan_groups[root] = {
            "members": list(g.members),
            "width": g.width,
            "removals": sorted(set(int(i) for i in idxs)),
            "keep": g.width - len(set(idxs)),
        }
    pruned = prune_graph(graph, _kept_from_removals(graph, plan_groups))
    plan = PruningPlan(
        rate=0.0,
        input_size=input_size,
        groups=plan_groups,
        params_before=count_params(graph),
        params_after=count_params(pruned),
        flops_before=count_flops(graph, input_size),
        flops_after=count_flops(pruned, input_size),
        meta=meta or {},
    )
    plan.validate_against(graph)
    return plan


# --------------------------------------------------------------------------
# application
# --------------------------------------------------------------------------

def _kept_from_removals(graph: ModelGraph, plan_groups: dict[str, dict]
                        ) -> dict[str, list[int]]:
    index = _SpaceIndex(graph)
    kept = {}
    for group in index.groups():
        removed = set(plan_groups.get(group.root, {}).get("removals", ()))
        kept[group.root] = [i for i in range(group.width) if i not in removed]
    kept[_INPUT_SPACE] = [0, 1, 2]
    return kept


def _kept_input_indices(index: _SpaceIndex, node: GraphNode,
                        kept: dict[str, list[int]]) -> list[int]:
    out: list[int] = []
    offset = 0
    for owner, width in index.resolved_segments(node.inputs[0]):
        out.extend(offset + i for i in kept[owner])
        offset += width
    return out


def prune_graph(graph: ModelGraph, kept: dict[str, list[int]]) -> ModelGraph:
    """Rebuild the graph with reduced widths; wiring and strides are unchanged."""
    index = _SpaceIndex(graph)
    new_width: dict[str, int] = {INPUT_ID: 3}

    def seg_width(node_id: str) -> int:
        return sum(len(kept[owner]) for owner, _ in index.resolved_segments(node_id))

    nodes = []
    for node in graph.nodes:
        if node.kind in ("conv", "head"):
            cin = seg_width(node.inputs[0])
            cout = len(kept[index.root_of(node.id)])
        elif node.kind in ("norm", "activation", "add"):
            cin = cout = seg_width(node.inputs[0])
        else:  # concat
            cin = cout = sum(seg_width(src) for src in node.inputs)
        nodes.append(GraphNode(node.id, node.kind, list(node.inputs), cin, cout,
                               node.kernel_size, node.stride, node.bias, node.prunable))
        new_width[node.id] = cout
    pruned = ModelGraph(nodes)
    pruned.validate()
    return pruned


def apply_plan(model: ToyDetector, graph: ModelGraph, plan: PruningPlan
               ) -> tuple[ToyDetector, ModelGraph]:
    """Return a pruned copy of the model; the original is never mutated."""
    plan.validate_against(graph)  # all-or-nothing: no surgery on a bad plan
    index = _SpaceIndex(graph)
    kept = _kept_from_removals(graph, plan.groups)
    new_graph = prune_graph(graph, kept)
    new_model = ToyDetector(new_graph, model.n_classes)

    with torch.no_grad():
        for node in graph.nodes:
            if node.kind in ("conv", "head"):
                src = model.blocks[node.id]
                dst = new_model.blocks[node.id]
                out_idx = torch.tensor(kept[index.root_of(node.id)], dtype=torch.long)
                in_idx = torch.tensor(_kept_input_indices(index, node, kept),
                                      dtype=torch.long)
                dst.weight.copy_(src.weight[out_idx][:, in_idx])
                if node.bias:
                    dst.bias.copy_(src.bias[out_idx])
            elif node.kind == "norm":
                src = model.blocks[node.id]
                dst = new_model.blocks[node.id]
                idx = torch.tensor(_kept_input_indices(index, node, kept),
                                   dtype=torch.long)
                dst.weight.copy_(src.weight[idx])
                dst.bias.copy_(src.bias[idx])
                dst.running_mean.copy_(src.running_mean[idx])
                dst.running_var.copy_(src.running_var[idx])
                dst.num_batches_tracked.copy_(src.num_batches_tracked)
    new_model.eval()
    return new_model, new_graph
