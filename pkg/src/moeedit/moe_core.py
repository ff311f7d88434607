"""Synthetic Mixture-of-Experts layers and stacks.

Each expert is a SwiGLU-style gated FFN.  Its post-gate feature is the *key*
and ``w_down @ key`` the *value*, so ``w_down`` acts as a linear associative
memory that the editor rewrites.  A router picks the top-K experts by logit
and mixes their values with a softmax restricted to the selected set.

Layers are chained with a plain residual connection ``u_{l+1} = u_l + v_l``;
attention and normalization are deliberately absent.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path
from typing import NamedTuple, Sequence

import numpy as np
from scipy.special import expit

from .container import load_container, save_container


def silu(x: np.ndarray) -> np.ndarray:
    return x * expit(x)


def softmax(x: np.ndarray, axis: int = -1) -> np.ndarray:
    z = np.exp(x - np.max(x, axis=axis, keepdims=True))
    return z / np.sum(z, axis=axis, keepdims=True)


def _as_matrix(a, name: str) -> np.ndarray:
    a = np.asarray(a, dtype=np.float64)
    if a.ndim != 2:
        raise ValueError(f"{name} must be 2-D, got shape {a.shape}")
    if not np.all(np.isfinite(a)):
        raise ValueError(f"{name} has non-finite entries")
    return a


def _as_vector(u, d: int, what: str = "u") -> np.ndarray:
    u = np.asarray(u, dtype=np.float64)
    if u.ndim != 1 or u.shape[0] != d:
        raise ValueError(f"dimension mismatch: {what} has shape {u.shape}, expected ({d},)")
    if not np.all(np.isfinite(u)):
        raise ValueError(f"{what} has non-finite entries")
    return u


@dataclass(frozen=True)
class Expert:
    """Gated FFN ``w_down @ ((w_up @ u) * silu(w_gate @ u))``.

    ``w_up`` and ``w_gate`` are ``(d_k, d_model)``; ``w_down`` is ``(d_model, d_k)``.
    """

    w_up: np.ndarray
    w_gate: np.ndarray
    w_down: np.ndarray

    def __post_init__(self):
        up = _as_matrix(self.w_up, "w_up")
        gate = _as_matrix(self.w_gate, "w_gate")
        down = _as_matrix(self.w_down, "w_down")
        if up.shape != gate.shape:
            raise ValueError(f"w_up {up.shape} and w_gate {gate.shape} must share shape")
        if down.shape != (up.shape[1], up.shape[0]):
            raise ValueError(
                f"w_down has shape {down.shape}, expected {(up.shape[1], up.shape[0])}"
            )
        object.__setattr__(self, "w_up", up)
        object.__setattr__(self, "w_gate", gate)
        object.__setattr__(self, "w_down", down)

    @property
    def d_k(self) -> int:
        return self.w_up.shape[0]

    @property
    def d_model(self) -> int:
        return self.w_up.shape[1]


@dataclass(frozen=True)
class MoeLayer:
    router: np.ndarray  # (d_model, N); column n is the routing embedding of expert n
    experts: tuple[Expert, ...]
    top_k: int

    def __post_init__(self):
        router = _as_matrix(self.router, "router")
        experts = tuple(self.experts)
        if not experts:
            raise ValueError("a layer needs at least one expert")
        if router.shape[1] != len(experts):
            raise ValueError(
                f"router has {router.shape[1]} columns but layer has {len(experts)} experts"
            )
        d_model, d_k = experts[0].d_model, experts[0].d_k
        for n, e in enumerate(experts):
            if (e.d_model, e.d_k) != (d_model, d_k):
                raise ValueError(
                    f"expert {n} has dims (d_model={e.d_model}, d_k={e.d_k}), "
                    f"expected ({d_model}, {d_k})"
                )
        if router.shape[0] != d_model:
            raise ValueError(
                f"router d_model={router.shape[0]} does not match experts' d_model={d_model}"
            )
        if not 1 <= int(self.top_k) <= len(experts):
            raise ValueError(f"top_k must lie in [1, {len(experts)}], got {self.top_k}")
        object.__setattr__(self, "router", router)
        object.__setattr__(self, "experts", experts)
        object.__setattr__(self, "top_k", int(self.top_k))

    @property
    def n_experts(self) -> int:
        return len(self.experts)

    @property
    def d_model(self) -> int:
        return self.router.shape[0]

    @property
    def d_k(self) -> int:
        return self.experts[0].d_k

    def with_down(self, updates: dict[int, np.ndarray]) -> MoeLayer:
        """Copy of the layer with ``w_down`` replaced for the experts in ``updates``."""
        experts = list(self.experts)
        for n, w in updates.items():
            e = experts[n]
            experts[n] = Expert(e.w_up, e.w_gate, w)
        return MoeLayer(self.router, tuple(experts), self.top_k)


@dataclass(frozen=True)
class StackedModel:
    layers: tuple[MoeLayer, ...]
    seed: int | None = field(default=None, compare=False)

    def __post_init__(self):
        layers = tuple(self.layers)
        if not layers:
            raise ValueError("a model needs at least one layer")
        d = layers[0].d_model
        for i, layer in enumerate(layers):
            if layer.d_model != d:
                raise ValueError(f"layer {i} has d_model={layer.d_model}, expected {d}")
        object.__setattr__(self, "layers", layers)

    @property
    def d_model(self) -> int:
        return self.layers[0].d_model

    @property
    def n_layers(self) -> int:
        return len(self.layers)

    def replace_layer(self, index: int, layer: MoeLayer) -> StackedModel:
        layers = list(self.layers)
        layers[index] = layer
        return StackedModel(tuple(layers), seed=self.seed)

    def identical_to(self, other: StackedModel) -> bool:
        """Bit-exact comparison of every weight."""
        if self.n_layers != other.n_layers:
            return False
        for a, b in zip(self.layers, other.layers):
            if a.top_k != b.top_k or a.n_experts != b.n_experts:
                return False
            if not np.array_equal(a.router, b.router):
                return False
            for ea, eb in zip(a.experts, b.experts):
                for wa, wb in ((ea.w_up, eb.w_up), (ea.w_gate, eb.w_gate), (ea.w_down, eb.w_down)):
                    if wa.shape != wb.shape or not np.array_equal(wa, wb):
                        return False
        return True


class GateDecision(NamedTuple):
    selected: tuple[int, ...]  # sorted ascending
    weights: np.ndarray  # length N, zero off `selected`


class RoutingSnapshot(NamedTuple):
    logits: np.ndarray
    probs: np.ndarray  # full softmax over all N experts
    selected: tuple[int, ...]


class MoeOutput(NamedTuple):
    value: np.ndarray
    gates: GateDecision
    keys: dict[int, np.ndarray]


class StackTrace(NamedTuple):
    inputs: list[np.ndarray]
    outputs: list[np.ndarray]
    snapshots: list[RoutingSnapshot]


def top_k_indices(logits: np.ndarray, k: int) -> tuple[int, ...]:
    """Indices of the ``k`` largest logits, ties to the lowest index, sorted."""
    order = np.argsort(-logits, kind="stable")
    return tuple(sorted(int(i) for i in order[:k]))


def router_logits(layer: MoeLayer, u) -> np.ndarray:
    u = _as_vector(u, layer.d_model)
    return layer.router.T @ u


def gate(layer: MoeLayer, u) -> GateDecision:
    u = np.asarray(u, dtype=np.float64)
    if u.ndim != 1 or u.shape[0] != layer.d_model:
        raise ValueError(
            f"dimension mismatch: u has dimension {u.shape[-1] if u.ndim else 0}, "
            f"router embeddings have d_model={layer.d_model}"
        )
    s = router_logits(layer, u)
    selected = top_k_indices(s, layer.top_k)
    idx = list(selected)
    weights = np.zeros(layer.n_experts)
    weights[idx] = softmax(s[idx])
    return GateDecision(selected, weights)


def expert_forward(expert: Expert, u) -> tuple[np.ndarray, np.ndarray]:
    """Return ``(key, value)`` for one expert."""
    u = _as_vector(u, expert.d_model)
    key = (expert.w_up @ u) * silu(expert.w_gate @ u)
    return key, expert.w_down @ key


def moe_forward(layer: MoeLayer, u) -> MoeOutput:
    gates = gate(layer, u)
    value = np.zeros(layer.d_model)
    keys = {}
    for n in gates.selected:
        key, v = expert_forward(layer.experts[n], u)
        keys[n] = key
        value += gates.weights[n] * v
    return MoeOutput(value, gates, keys)


def snapshot(layer: MoeLayer, u) -> RoutingSnapshot:
    s = router_logits(layer, u)
    return RoutingSnapshot(s, softmax(s), top_k_indices(s, layer.top_k))


def stack_forward(model: StackedModel, u0, upto: int | None = None) -> StackTrace:
    """Run the residual stack from ``u0``.

    With ``upto`` set, stop after layer ``upto`` (inclusive).
    """
    u = _as_vector(u0, model.d_model, "u0")
    last = model.n_layers if upto is None else upto + 1
    inputs, outputs, snaps = [], [], []
    for layer in model.layers[:last]:
        out = moe_forward(layer, u)
        s = router_logits(layer, u)
        inputs.append(u)
        outputs.append(out.value)
        snaps.append(RoutingSnapshot(s, softmax(s), out.gates.selected))
        u = u + out.value
    return StackTrace(inputs, outputs, snaps)


class BatchTrace(NamedTuple):
    inputs: np.ndarray  # (layers, m, d_model)
    outputs: np.ndarray  # (layers, m, d_model)
    logits: np.ndarray  # (layers, m, N)
    selected: np.ndarray  # (layers, m, K), each row ascending


class LayerBatch(NamedTuple):
    outputs: np.ndarray  # (m, d_model)
    logits: np.ndarray  # (m, N)
    selected: np.ndarray  # (m, K), each row ascending
    gates: np.ndarray  # (m, K), aligned with ``selected``
    routed: dict  # expert -> (rows, slots, keys, values)


def layer_batch(layer: MoeLayer, U: np.ndarray) -> LayerBatch:
    """Vectorized ``moe_forward`` over the rows of ``U``."""
    S = U @ layer.router
    order = np.argsort(-S, axis=1, kind="stable")[:, : layer.top_k]
    sel = np.sort(order, axis=1)
    g = softmax(np.take_along_axis(S, sel, axis=1))
    V = np.zeros_like(U)
    routed = {}
    for n, e in enumerate(layer.experts):
        rows, slot = np.nonzero(sel == n)
        X = U[rows]
        keys = (X @ e.w_up.T) * silu(X @ e.w_gate.T)
        values = keys @ e.w_down.T
        V[rows] += g[rows, slot][:, None] * values
        routed[n] = (rows, slot, keys, values)
    return LayerBatch(V, S, sel, g, routed)


def forward_batch(model: StackedModel, prompts, upto: int | None = None) -> BatchTrace:
    """``stack_forward`` for many prompts at once (rows of ``prompts``)."""
    U = np.asarray(prompts, dtype=np.float64).reshape(-1, model.d_model)
    last = model.n_layers if upto is None else upto + 1
    ins, outs, logits, sels = [], [], [], []
    for layer in model.layers[:last]:
        lb = layer_batch(layer, U)
        ins.append(U)
        outs.append(lb.outputs)
        logits.append(lb.logits)
        sels.append(lb.selected)
        U = U + lb.outputs
    return BatchTrace(np.array(ins), np.array(outs), np.array(logits), np.array(sels))


def layer_inputs(model: StackedModel, prompts: Sequence, layer: int) -> np.ndarray:
    """Router inputs at ``layer`` for each prompt, stacked as rows."""
    _check_layer(model, layer)
    return forward_batch(model, prompts, upto=layer).inputs[layer]


def collect_all_keys(model: StackedModel, prompts: Sequence, layer: int) -> list[np.ndarray]:
    """``collect_keys`` for every expert of ``layer`` in a single forward pass."""
    _check_layer(model, layer)
    lay = model.layers[layer]
    if len(prompts) == 0:
        return [np.zeros((lay.d_k, 0)) for _ in lay.experts]
    routed = layer_batch(lay, layer_inputs(model, prompts, layer)).routed
    return [routed[n][2].T.copy() for n in range(lay.n_experts)]


def collect_keys(model: StackedModel, prompts: Sequence, layer: int, expert: int) -> np.ndarray:
    """Keys of ``expert`` at ``layer`` for the prompts that route to it, as columns."""
    _check_layer(model, layer)
    lay = model.layers[layer]
    if not 0 <= expert < lay.n_experts:
        raise IndexError(f"expert index {expert} out of range [0, {lay.n_experts})")
    cols = []
    for u in layer_inputs(model, prompts, layer) if len(prompts) else []:
        if expert in gate(lay, u).selected:
            cols.append(expert_forward(lay.experts[expert], u)[0])
    if not cols:
        return np.zeros((lay.d_k, 0))
    return np.column_stack(cols)


def _check_layer(model: StackedModel, layer: int) -> None:
    if not 0 <= layer < model.n_layers:
        raise IndexError(f"layer index {layer} out of range [0, {model.n_layers})")


def random_model(
    d_model: int, d_k: int, n_experts: int, top_k: int, n_layers: int, seed: int
) -> StackedModel:
    """I.i.d. Gaussian weights scaled by ``1/sqrt(fan_in)``."""
    if min(d_model, d_k, n_experts, top_k, n_layers) < 1:
        raise ValueError("all model dimensions must be positive")
    rng = np.random.default_rng(seed)
    layers = []
    for _ in range(n_layers):
        router = rng.standard_normal((d_model, n_experts)) / np.sqrt(d_model)
        experts = tuple(
            Expert(
                rng.standard_normal((d_k, d_model)) / np.sqrt(d_model),
                rng.standard_normal((d_k, d_model)) / np.sqrt(d_model),
                rng.standard_normal((d_model, d_k)) / np.sqrt(d_k),
            )
            for _ in range(n_experts)
        )
        layers.append(MoeLayer(router, experts, top_k))
    return StackedModel(tuple(layers), seed=seed)


def save_model(model: StackedModel, path: str | Path) -> Path:
    arrays = {}
    for l, layer in enumerate(model.layers):
        arrays[f"L{l}.router"] = layer.router
        for n, e in enumerate(layer.experts):
            arrays[f"L{l}.E{n}.w_up"] = e.w_up
            arrays[f"L{l}.E{n}.w_gate"] = e.w_gate
            arrays[f"L{l}.E{n}.w_down"] = e.w_down
    first = model.layers[0]
    meta = {
        "kind": "model",
        "d_model": model.d_model,
        "d_k": first.d_k,
        "n_experts": first.n_experts,
        "top_k": [layer.top_k for layer in model.layers],
        "n_layers": model.n_layers,
        "seed": model.seed,
    }
    return save_container(path, arrays, meta)


def load_model(path: str | Path) -> StackedModel:
    arrays, meta = load_container(path)
    if meta.get("kind") != "model":
        raise ValueError(f"{path}: container holds {meta.get('kind')!r}, not a model")
    layers = []
    for l in range(meta["n_layers"]):
        experts = tuple(
            Expert(arrays[f"L{l}.E{n}.w_up"], arrays[f"L{l}.E{n}.w_gate"], arrays[f"L{l}.E{n}.w_down"])
            for n in range(meta["n_experts"])
        )
        layers.append(MoeLayer(arrays[f"L{l}.router"], experts, meta["top_k"][l]))
    return StackedModel(tuple(layers), seed=meta["seed"])
