"""Routing-shift metrics and the first-order softmax prediction.

Top-K sets are compared with Jaccard similarity; full-softmax router
distributions are compared with KL divergence, which avoids the zero-support
problem of renormalized top-K weights.
"""

from __future__ import annotations

import io
from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np

from .moe_core import StackedModel, forward_batch, softmax

NORMALIZATION_TOL = 1e-10


def routing_similarity(pre: Iterable[int], post: Iterable[int]) -> float:
    pre, post = set(pre), set(post)
    if not pre or not post:
        raise ValueError("routing similarity needs two non-empty expert sets")
    return len(pre & post) / len(pre | post)


def kl_shift(g, g_post) -> float:
    """``KL(g || g_post)`` for strictly positive distributions."""
    g = np.asarray(g, dtype=np.float64)
    h = np.asarray(g_post, dtype=np.float64)
    if g.shape != h.shape:
        raise ValueError(f"distribution shapes differ: {g.shape} vs {h.shape}")
    for name, p in (("g", g), ("g_post", h)):
        if np.any(p <= 0):
            raise ValueError(f"{name} must be strictly positive")
        if abs(p.sum() - 1.0) > NORMALIZATION_TOL:
            raise ValueError(f"{name} sums to {p.sum():.15g}, not 1")
    return max(float(np.sum(g * (np.log(g) - np.log(h)))), 0.0)


def softmax_jacobian(s) -> np.ndarray:
    p = softmax(np.asarray(s, dtype=np.float64))
    return np.diag(p) - np.outer(p, p)


def predict_shift(E, s, du) -> np.ndarray:
    """Linearized change of the router distribution, ``J(s) E^T du``."""
    E = np.asarray(E, dtype=np.float64)
    s = np.asarray(s, dtype=np.float64)
    du = np.asarray(du, dtype=np.float64)
    if E.ndim != 2 or E.shape[1] != s.shape[0] or E.shape[0] != du.shape[0]:
        raise ValueError(
            f"dimension mismatch: E {E.shape}, logits {s.shape}, du {du.shape}"
        )
    return softmax_jacobian(s) @ (E.T @ du)


def actual_shift(E, s, du) -> np.ndarray:
    E = np.asarray(E, dtype=np.float64)
    s = np.asarray(s, dtype=np.float64)
    return softmax(s + E.T @ np.asarray(du, dtype=np.float64)) - softmax(s)


@dataclass
class RoutingShiftReport:
    layers: list[int]
    rs: np.ndarray  # (n_layers, n_prompts)
    kl: np.ndarray  # (n_layers, n_prompts)
    # first-order check on the router input perturbation, per layer
    pred_error: np.ndarray = field(default_factory=lambda: np.zeros((0, 0)))
    input_shift: np.ndarray = field(default_factory=lambda: np.zeros((0, 0)))

    @property
    def mean_rs(self) -> np.ndarray:
        return self.rs.mean(axis=1) if self.rs.size else np.ones(len(self.layers))

    @property
    def mean_kl(self) -> np.ndarray:
        return self.kl.mean(axis=1) if self.kl.size else np.zeros(len(self.layers))

    def window_means(self, width: int = 10) -> list[tuple[int, int, float, float]]:
        """``(first_layer, last_layer, mean_rs, mean_kl)`` over consecutive windows."""
        out = []
        for i in range(0, len(self.layers), width):
            sl = slice(i, i + width)
            out.append(
                (self.layers[sl][0], self.layers[sl][-1],
                 float(self.rs[sl].mean()), float(self.kl[sl].mean()))
            )
        return out

    def to_table(self) -> str:
        buf = io.StringIO()
        buf.write("layer\tprompt_id\trs\tkl\n")
        for a, layer in enumerate(self.layers):
            for p in range(self.rs.shape[1]):
                buf.write(f"{layer}\t{p}\t{self.rs[a, p]:.9g}\t{self.kl[a, p]:.9g}\n")
        buf.write("\n# summary\nlayer\tmean_rs\tmean_kl\n")
        for a, layer in enumerate(self.layers):
            buf.write(f"{layer}\t{self.mean_rs[a]:.9g}\t{self.mean_kl[a]:.9g}\n")
        return buf.getvalue()


def compare_routing(
    model_pre: StackedModel,
    model_post: StackedModel,
    prompts: Sequence,
    layers: Sequence[int] | None = None,
) -> RoutingShiftReport:
    """Per-layer RS and KL between the two models' routing on ``prompts``."""
    if model_pre.n_layers != model_post.n_layers or any(
        (a.n_experts, a.d_model, a.d_k, a.top_k) != (b.n_experts, b.d_model, b.d_k, b.top_k)
        for a, b in zip(model_pre.layers, model_post.layers)
    ):
        raise ValueError("models do not share an architecture")
    layers = list(range(model_pre.n_layers)) if layers is None else list(layers)
    shape = (len(layers), len(prompts))
    rs, kl = np.ones(shape), np.zeros(shape)
    err, shift = np.zeros(shape), np.zeros(shape)
    if len(prompts) == 0:
        return RoutingShiftReport(layers, rs, kl, err, shift)
    pre = forward_batch(model_pre, prompts)
    post = forward_batch(model_post, prompts)
    for a, l in enumerate(layers):
        g_pre, g_post = softmax(pre.logits[l]), softmax(post.logits[l])
        for p in range(len(prompts)):
            rs[a, p] = routing_similarity(pre.selected[l, p], post.selected[l, p])
            kl[a, p] = kl_shift(g_pre[p], g_post[p])
            du = post.inputs[l, p] - pre.inputs[l, p]
            predicted = predict_shift(model_pre.layers[l].router, pre.logits[l, p], du)
            err[a, p] = np.linalg.norm((g_post[p] - g_pre[p]) - predicted)
            shift[a, p] = np.linalg.norm(du)
    return RoutingShiftReport(layers, rs, kl, err, shift)
