"""Sparse mixture-of-experts adapter mapping encoder frames into the decoder's embedding space.

Per frame: softmax over all router logits, keep the top-k experts (ties go to the
lower index), renormalise their probabilities into gate weights, run each kept
expert FFN, mix, project and layer-normalise. The load-balancing penalty uses the
full softmax, so every expert has a defined mean probability even if unselected.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import numerics as nx
from .numerics import Node, Tensor


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class AdapterConfig:
    d_in: int
    d_expert_hidden: int
    d_out: int
    num_experts: int = 4
    top_k: int = 2
    aux_weight: float = 0.01

    def __post_init__(self):
        for name in ("d_in", "d_expert_hidden", "d_out", "num_experts", "top_k"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be >= 1, got {getattr(self, name)}")
        if self.top_k > self.num_experts:
            raise ConfigError(f"top_k={self.top_k} exceeds num_experts={self.num_experts}")
        if not np.isfinite(self.aux_weight) or self.aux_weight < 0:
            raise ConfigError(f"aux_weight must be finite and >= 0, got {self.aux_weight}")


@dataclass
class RoutingReport:
    """Routing statistics for one batch of B routed frames."""

    probs: Tensor            # (B, E) full softmax
    selected: np.ndarray     # (B, k) expert ids, highest probability first
    gate_weights: Tensor     # (B, k) renormalised over the selected experts
    importance: Tensor       # (E,) mean routing probability per expert
    fractions: Tensor        # (E,) share of frames routed to each expert; sums to k
    probs_node: Node | None = field(default=None, repr=False, compare=False)

    @property
    def num_tokens(self) -> int:
        return self.probs.shape[0]

    @property
    def num_experts(self) -> int:
        return self.probs.shape[1]

    @property
    def top_k(self) -> int:
        return self.selected.shape[1]


def init_adapter_params(config: AdapterConfig, rng: np.random.Generator) -> dict[str, Node]:
    def glorot(fan_in, fan_out):
        return rng.normal(0.0, np.sqrt(2.0 / (fan_in + fan_out)), size=(fan_in, fan_out))

    c = config
    params = {"router.w": nx.parameter(glorot(c.d_in, c.num_experts))}
    for e in range(c.num_experts):
        params[f"expert.{e}.w1"] = nx.parameter(glorot(c.d_in, c.d_expert_hidden))
        params[f"expert.{e}.b1"] = nx.parameter(np.zeros((1, c.d_expert_hidden)))
        params[f"expert.{e}.w2"] = nx.parameter(glorot(c.d_expert_hidden, c.d_in))
        params[f"expert.{e}.b2"] = nx.parameter(np.zeros((1, c.d_in)))
    params["proj.w"] = nx.parameter(glorot(c.d_in, c.d_out))
    params["ln.gamma"] = nx.parameter(np.ones((1, c.d_out)))
    params["ln.beta"] = nx.parameter(np.zeros((1, c.d_out)))
    return params


def expected_shapes(config: AdapterConfig) -> dict[str, tuple[int, ...]]:
    c = config
    shapes = {"router.w": (c.d_in, c.num_experts)}
    for e in range(c.num_experts):
        shapes[f"expert.{e}.w1"] = (c.d_in, c.d_expert_hidden)
        shapes[f"expert.{e}.b1"] = (1, c.d_expert_hidden)
        shapes[f"expert.{e}.w2"] = (c.d_expert_hidden, c.d_in)
        shapes[f"expert.{e}.b2"] = (1, c.d_in)
    shapes["proj.w"] = (c.d_in, c.d_out)
    shapes["ln.gamma"] = (1, c.d_out)
    shapes["ln.beta"] = (1, c.d_out)
    return shapes


def check_params(params: dict[str, Node], config: AdapterConfig) -> None:
    want = expected_shapes(config)
    missing = sorted(set(want) - set(params))
    if missing:
        raise ConfigError(f"adapter params missing {missing}")
    for name, shape in want.items():
        if params[name].shape != shape:
            raise ConfigError(f"adapter param {name} has shape {params[name].shape}, config needs {shape}")


def _route(x: Node, params: dict[str, Node], top_k: int) -> tuple[RoutingReport, Node]:
    logits = nx.matmul(x, params["router.w"])
    if not np.all(np.isfinite(logits.value)):
        raise nx.NumericError("router logits are not finite")
    probs = nx.softmax(logits)
    p = probs.value
    num_tokens, num_experts = p.shape
    # stable sort on -p keeps the lower expert index first among ties
    selected = np.argsort(-p, axis=1, kind="stable")[:, :top_k]
    mask = np.zeros_like(p)
    mask[np.arange(num_tokens)[:, None], selected] = 1.0
    kept = nx.mul(probs, nx.constant(mask))
    gates = nx.div(kept, nx.row_sum(kept))
    counts = np.bincount(selected.reshape(-1), minlength=num_experts).astype(np.float64)
    report = RoutingReport(
        probs=p,
        selected=selected,
        gate_weights=np.take_along_axis(gates.value, selected, axis=1),
        importance=p.mean(axis=0),
        fractions=counts / num_tokens,
        probs_node=probs,
    )
    return report, gates


def route(x, params: dict[str, Node], config: AdapterConfig) -> RoutingReport:
    x = x if isinstance(x, Node) else nx.constant(x)
    if x.value.ndim != 2 or x.shape[1] != config.d_in:
        raise ConfigError(f"route expects (B, {config.d_in}) input, got {x.shape}")
    return _route(x, params, config.top_k)[0]


def expert_forward(x: Node, params: dict[str, Node], e: int) -> Node:
    h = nx.silu(nx.add(nx.matmul(x, params[f"expert.{e}.w1"]), params[f"expert.{e}.b1"]))
    return nx.add(nx.matmul(h, params[f"expert.{e}.w2"]), params[f"expert.{e}.b2"])


def adapt(x: Node, params: dict[str, Node], config: AdapterConfig) -> tuple[Node, RoutingReport]:
    """Adapted embeddings ``(B, d_out)`` and the routing report for frames ``x``.

    Gradients reach the router through the gate weights; the choice of which
    experts are kept is a discrete decision with no gradient.
    """
    check_params(params, config)
    x = x if isinstance(x, Node) else nx.constant(x)
    if x.value.ndim != 2 or x.shape[1] != config.d_in:
        raise ConfigError(f"adapt expects (B, {config.d_in}) input, got {x.shape}")
    report, gates = _route(x, params, config.top_k)
    num_tokens = x.shape[0]
    mixed = None
    for e in range(config.num_experts):
        rows = np.nonzero((report.selected == e).any(axis=1))[0]
        if rows.size == 0:
            continue
        out = expert_forward(nx.take_rows(x, rows), params, e)
        weight = nx.take_rows(nx.slice_cols(gates, e, e + 1), rows)
        part = nx.scatter_rows(nx.mul(out, weight), rows, num_tokens)
        mixed = part if mixed is None else nx.add(mixed, part)
    projected = nx.matmul(mixed, params["proj.w"])
    y = nx.layer_norm(projected, params["ln.gamma"], params["ln.beta"])
    return y, report


def aux_loss(report: RoutingReport) -> Node:
    """``E * sum_e mean_prob_e * routed_fraction_e``; differentiable through the mean probabilities."""
    num_experts = report.num_experts
    fractions = nx.constant(report.fractions[None, :])
    if report.probs_node is None:
        importance = nx.constant(report.importance[None, :])
    else:
        importance = nx.col_mean(report.probs_node)
    return nx.scale(nx.total(nx.mul(importance, fractions)), float(num_experts))


def expert_utilization(report: RoutingReport) -> Tensor:
    """Fraction of routed frames per expert (sums to k)."""
    return report.fractions.copy()
