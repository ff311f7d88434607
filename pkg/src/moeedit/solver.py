"""Projected editing objective and its two solvers.

The free variable is one ``(d_m, d_k)`` matrix per expert.  Example ``i`` of
the edit batch contributes ``|| sum_n g_in (W_n k_in + D_n Pk_in) - v_i ||^2``
where ``Pk_in`` is the projected key; a ridge term ``lam * sum ||D_n||^2``
keeps the problem strictly convex.

``solve_global`` solves the stacked ridge problem in one shot and serves as
the reference.  ``bcd_solve`` cycles over active experts in a seeded random
order, replacing each block by its exact minimizer with the others fixed.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from functools import cached_property
from pathlib import Path
from typing import NamedTuple, Sequence

import numpy as np
from scipy.linalg.lapack import dpotrf, dpotrs

from .container import load_container, save_container
from .moe_core import StackedModel, layer_batch, layer_inputs
from .nullspace import ProjectorSet

log = logging.getLogger(__name__)

GLOBAL_DIM_CAP = 4096
EARLY_STOP_RTOL = 1e-9
LOADING_BASE = 1e-10
LOADING_STEPS = 8


class SolverError(RuntimeError):
    pass


@dataclass(frozen=True)
class EditRequest:
    experts: tuple[int, ...]  # active experts, ascending
    gates: np.ndarray  # (|S|,)
    keys: np.ndarray  # (|S|, d_k)
    proj_keys: np.ndarray  # (|S|, d_k)
    values: np.ndarray  # (|S|, d_m), W_n k_in for the unedited layer
    target: np.ndarray  # (d_m,)
    residual: np.ndarray  # (d_m,), target minus the unedited output

    def gate_of(self, n: int) -> float:
        return float(self.gates[self.experts.index(n)]) if n in self.experts else 0.0


class _Block(NamedTuple):
    rows: np.ndarray  # example indices touching the expert
    gates: np.ndarray
    proj_keys: np.ndarray  # (|rows|, d_k)


@dataclass(frozen=True)
class EditBatch:
    layer: int
    requests: tuple[EditRequest, ...]
    projectors: ProjectorSet
    n_experts: int
    d_k: int
    d_m: int

    def __post_init__(self):
        for i, req in enumerate(self.requests):
            if any(not 0 <= n < self.n_experts for n in req.experts):
                raise ValueError(f"request {i} names an expert outside [0, {self.n_experts})")
            if req.keys.shape[1:] != (self.d_k,) or req.target.shape != (self.d_m,):
                raise ValueError(f"request {i} has inconsistent dimensions")

    def __len__(self) -> int:
        return len(self.requests)

    @cached_property
    def residuals(self) -> np.ndarray:
        """Base residuals stacked as rows, ``(m, d_m)``."""
        return np.array([r.residual for r in self.requests]).reshape(len(self), self.d_m)

    @cached_property
    def blocks(self) -> tuple[_Block, ...]:
        rows = [[] for _ in range(self.n_experts)]
        gs = [[] for _ in range(self.n_experts)]
        ks = [[] for _ in range(self.n_experts)]
        for i, req in enumerate(self.requests):
            for j, n in enumerate(req.experts):
                rows[n].append(i)
                gs[n].append(req.gates[j])
                ks[n].append(req.proj_keys[j])
        return tuple(
            _Block(
                np.array(rows[n], dtype=int),
                np.array(gs[n], dtype=np.float64),
                np.array(ks[n], dtype=np.float64).reshape(len(rows[n]), self.d_k),
            )
            for n in range(self.n_experts)
        )

    @cached_property
    def active_experts(self) -> list[int]:
        """Experts with non-zero gate mass in the batch, ascending."""
        return [n for n, b in enumerate(self.blocks) if np.sum(b.gates**2) > 0]

    def design_matrix(self) -> np.ndarray:
        """Stacked design vectors as columns, ``(N*d_k, m)``."""
        psi = np.zeros((self.n_experts * self.d_k, len(self)))
        for i, req in enumerate(self.requests):
            for j, n in enumerate(req.experts):
                psi[n * self.d_k : (n + 1) * self.d_k, i] = req.gates[j] * req.proj_keys[j]
        return psi


@dataclass
class UpdateSet:
    deltas: np.ndarray  # free variables, (N, d_m, d_k)
    written: np.ndarray  # deltas[n] @ P_n
    lam: float
    passes: int = 0
    seed: int | None = None
    objective: float = float("nan")
    trace: list[float] = field(default_factory=list)

    @classmethod
    def from_deltas(cls, deltas: np.ndarray, projectors: ProjectorSet, lam: float, **meta) -> UpdateSet:
        written = np.stack([deltas[n] @ projectors[n] for n in range(deltas.shape[0])])
        return cls(deltas, written, lam, **meta)

    @property
    def updated_experts(self) -> list[int]:
        return [n for n in range(self.deltas.shape[0]) if np.any(self.deltas[n])]


def assemble_batch(
    model: StackedModel,
    layer: int,
    prompts: Sequence,
    targets: Sequence,
    projectors: ProjectorSet,
) -> EditBatch:
    """Freeze keys, gates and base residuals of ``prompts`` at ``layer``."""
    lay = model.layers[layer]
    if len(projectors) != lay.n_experts or projectors.d_k != lay.d_k:
        raise ValueError(
            f"projector set ({len(projectors)} x d_k={projectors.d_k}) does not match layer "
            f"{layer} ({lay.n_experts} x d_k={lay.d_k})"
        )
    if len(prompts) != len(targets):
        raise ValueError(f"{len(prompts)} prompts but {len(targets)} targets")
    targets = [np.asarray(v, dtype=np.float64) for v in targets]
    for v in targets:
        if v.shape != (lay.d_model,):
            raise ValueError(f"target has shape {v.shape}, expected ({lay.d_model},)")
    requests = []
    if len(prompts):
        lb = layer_batch(lay, layer_inputs(model, prompts, layer))
        # position of example i inside expert n's routed rows
        where = {n: {int(r): p for p, r in enumerate(rows)} for n, (rows, *_) in lb.routed.items()}
        for i, v in enumerate(targets):
            experts = tuple(int(n) for n in lb.selected[i])
            keys = np.array([lb.routed[n][2][where[n][i]] for n in experts])
            values = np.array([lb.routed[n][3][where[n][i]] for n in experts])
            proj = np.array([projectors[n] @ k for n, k in zip(experts, keys)])
            requests.append(EditRequest(
                experts, lb.gates[i].copy(), keys, proj, values, v, v - lb.outputs[i]
            ))
    return EditBatch(layer, tuple(requests), projectors, lay.n_experts, lay.d_k, lay.d_model)


def _deltas_of(batch: EditBatch, updates) -> np.ndarray:
    if updates is None:
        return np.zeros((batch.n_experts, batch.d_m, batch.d_k))
    deltas = updates.deltas if isinstance(updates, UpdateSet) else np.asarray(updates, dtype=np.float64)
    if deltas.shape != (batch.n_experts, batch.d_m, batch.d_k):
        raise ValueError(
            f"updates have shape {deltas.shape}, expected {(batch.n_experts, batch.d_m, batch.d_k)}"
        )
    return deltas


def current_residuals(batch: EditBatch, updates=None) -> np.ndarray:
    """``r_i - sum_n g_in D_n Pk_in`` for every example, ``(m, d_m)``."""
    deltas = _deltas_of(batch, updates)
    rho = batch.residuals.copy()
    for i, req in enumerate(batch.requests):
        for j, n in enumerate(req.experts):
            rho[i] -= req.gates[j] * (deltas[n] @ req.proj_keys[j])
    return rho


def objective_value(batch: EditBatch, updates=None, lam: float = 0.0) -> float:
    deltas = _deltas_of(batch, updates)
    fit = 0.0
    for req in batch.requests:
        out = sum(
            req.gates[j] * (req.values[j] + deltas[n] @ req.proj_keys[j])
            for j, n in enumerate(req.experts)
        )
        fit += float(np.sum((out - req.target) ** 2))
    return fit + lam * float(np.sum(deltas**2))


def residual_excluding(batch: EditBatch, updates, n: int) -> np.ndarray:
    """Targets minus every other expert's edited contribution, ``(m, d_m)``."""
    if not 0 <= n < batch.n_experts:
        raise IndexError(f"expert index {n} out of range [0, {batch.n_experts})")
    deltas = _deltas_of(batch, updates)
    out = np.empty((len(batch), batch.d_m))
    for i, req in enumerate(batch.requests):
        r = req.target.copy()
        for j, l in enumerate(req.experts):
            if l != n:
                r -= req.gates[j] * (req.values[j] + deltas[l] @ req.proj_keys[j])
        out[i] = r
    return out


def block_system(batch: EditBatch, residuals, n: int, lam: float) -> tuple[np.ndarray, np.ndarray]:
    """Normal-equation pieces ``(M_n, B_n)`` for expert ``n``.

    ``residuals`` are the ``residual_excluding`` vectors.  Expert ``n``'s own
    unedited output ``g_in W_n k_in`` still has to be fitted, so it is removed
    first: ``y_i = r_i^(-n) - g_in W_n k_in``.  Then ``M_n = sum_i g_in^2 Pk Pk^T
    + lam I`` and ``B_n = sum_i g_in y_i Pk^T``, accumulated in batch order.
    """
    residuals = np.asarray(residuals, dtype=np.float64)
    M = lam * np.eye(batch.d_k)
    B = np.zeros((batch.d_m, batch.d_k))
    for i, req in enumerate(batch.requests):
        if n not in req.experts:
            continue
        j = req.experts.index(n)
        g, k = req.gates[j], req.proj_keys[j]
        M += (g * g) * np.outer(k, k)
        B += g * np.outer(residuals[i] - g * req.values[j], k)
    return M, B


def _cholesky(M: np.ndarray) -> np.ndarray | None:
    c, info = dpotrf(M, lower=1, clean=0)
    return c if info == 0 else None


def _solve_right(M: np.ndarray, B: np.ndarray) -> np.ndarray:
    """``B @ inv(M)`` for symmetric positive definite ``M`` via Cholesky.

    On failure the diagonal is loaded with ``1e-10 * trace(M) / d`` and the
    load doubled up to eight times.
    """
    d = M.shape[0]
    c = _cholesky(M)
    if c is None:
        load = LOADING_BASE * max(np.trace(M), 0.0) / d or LOADING_BASE
        for _ in range(LOADING_STEPS):
            c = _cholesky(M + load * np.eye(d))
            if c is not None:
                log.debug("Cholesky succeeded after diagonal loading %.3e", load)
                break
            load *= 2.0
        else:
            raise SolverError(f"Cholesky factorization failed after {LOADING_STEPS} loading steps")
    x, info = dpotrs(c, np.ascontiguousarray(B.T), lower=1)
    if info != 0:
        raise SolverError(f"triangular solve failed (info={info})")
    return x.T


def solve_block(batch: EditBatch, residuals, n: int, lam: float) -> np.ndarray:
    """Exact minimizer of the single-expert ridge subproblem, ``B_n @ inv(M_n)``."""
    if lam <= 0:
        raise ValueError(f"lam must be positive, got {lam}")
    M, B = block_system(batch, residuals, n, lam)
    return _solve_right(M, B)


def solve_global(batch: EditBatch, lam: float, max_dim: int = GLOBAL_DIM_CAP) -> UpdateSet:
    """Unique minimizer ``R Psi^T (Psi Psi^T + lam I)^-1`` of the stacked problem.

    Only one ``(N d_k)``-square system is factored; it is shared by all
    ``d_m`` output rows.
    """
    if lam <= 0:
        raise ValueError(f"lam must be positive, got {lam}")
    dim = batch.n_experts * batch.d_k
    if dim > max_dim:
        raise MemoryError(
            f"global solve needs a {dim}x{dim} system (N*d_k = {batch.n_experts}*{batch.d_k}), "
            f"above the cap of {max_dim}; use bcd_solve"
        )
    deltas = np.zeros((batch.n_experts, batch.d_m, batch.d_k))
    if len(batch):
        psi = batch.design_matrix()
        A = psi @ psi.T
        A[np.diag_indices_from(A)] += lam
        flat = _solve_right(A, batch.residuals.T @ psi.T)  # (d_m, N d_k)
        deltas = flat.reshape(batch.d_m, batch.n_experts, batch.d_k).transpose(1, 0, 2).copy()
    obj = objective_value(batch, deltas, lam)
    return UpdateSet.from_deltas(deltas, batch.projectors, lam, objective=obj, trace=[obj])


def bcd_solve(
    batch: EditBatch,
    lam: float,
    passes: int = 10,
    seed: int = 0,
    tol: float = EARLY_STOP_RTOL,
) -> UpdateSet:
    """Randomized block coordinate descent over the active experts.

    Starts from zero.  Each pass draws a fresh seeded permutation of the
    active experts and replaces each block by its exact minimizer.  The
    objective is recorded after every block update; iteration stops early
    when a full pass lowers it by less than ``tol`` relative.
    """
    if lam <= 0:
        raise ValueError(f"lam must be positive, got {lam}")
    if passes < 1:
        raise ValueError(f"passes must be >= 1, got {passes}")
    rng = np.random.default_rng(seed)
    deltas = np.zeros((batch.n_experts, batch.d_m, batch.d_k))
    sq_norms = np.zeros(batch.n_experts)
    rho = batch.residuals.copy()
    obj = float(np.sum(rho**2))
    trace = [obj]
    active = np.array(batch.active_experts, dtype=int)
    done = 0
    for _ in range(passes):
        start = obj
        for n in rng.permutation(active):
            rows, g, pk = batch.blocks[n]
            gk = g[:, None] * pk
            r_minus = rho[rows] + gk @ deltas[n].T
            M = gk.T @ gk
            M[np.diag_indices_from(M)] += lam
            new = _solve_right(M, r_minus.T @ gk)
            rho[rows] = r_minus - gk @ new.T
            deltas[n] = new
            sq_norms[n] = np.sum(new**2)
            obj = float(np.sum(rho**2) + lam * sq_norms.sum())
            trace.append(obj)
        done += 1
        if start - obj <= tol * start:
            break
    return UpdateSet.from_deltas(
        deltas, batch.projectors, lam, passes=done, seed=seed, objective=obj, trace=trace
    )


def objective_gradient(batch: EditBatch, updates, n: int, lam: float) -> np.ndarray:
    """Gradient of the objective w.r.t. expert ``n``'s block: ``2 (D_n M_n - B_n)``."""
    deltas = _deltas_of(batch, updates)
    M, B = block_system(batch, residual_excluding(batch, deltas, n), n, lam)
    return 2.0 * (deltas[n] @ M - B)


def fit_error(batch: EditBatch, updates) -> float:
    """Data term of the objective (no ridge penalty)."""
    return float(np.sum(current_residuals(batch, updates) ** 2))


def apply_updates(
    model: StackedModel, layer: int, updates: UpdateSet, projectors: ProjectorSet
) -> StackedModel:
    """New model with ``W_down[n] += D_n @ P_n`` for every updated expert."""
    lay = model.layers[layer]
    if updates.deltas.shape != (lay.n_experts, lay.d_model, lay.d_k):
        raise ValueError(
            f"updates have shape {updates.deltas.shape}, expected "
            f"{(lay.n_experts, lay.d_model, lay.d_k)}"
        )
    if len(projectors) != lay.n_experts or projectors.d_k != lay.d_k:
        raise ValueError("projector set does not match the layer")
    new_down = {}
    for n in updates.updated_experts:
        written = updates.deltas[n] @ projectors[n]
        if np.any(written):
            new_down[n] = lay.experts[n].w_down + written
    if not new_down:
        return model
    return model.replace_layer(layer, lay.with_down(new_down))


def save_updates(updates: UpdateSet, path: str | Path, layer: int | None = None) -> Path:
    meta = {
        "kind": "updates",
        "layer": layer,
        "lam": updates.lam,
        "passes": updates.passes,
        "seed": updates.seed,
        "objective": updates.objective,
        "shape": list(updates.deltas.shape),
    }
    arrays = {
        "deltas": updates.deltas,
        "written": updates.written,
        "objective_trace": np.asarray(updates.trace, dtype=np.float64),
    }
    return save_container(path, arrays, meta)


def load_updates(path: str | Path) -> UpdateSet:
    arrays, meta = load_container(path)
    if meta.get("kind") != "updates":
        raise ValueError(f"{path}: container holds {meta.get('kind')!r}, not updates")
    return UpdateSet(
        arrays["deltas"],
        arrays["written"],
        meta["lam"],
        passes=meta["passes"],
        seed=meta["seed"],
        objective=meta["objective"],
        trace=arrays["objective_trace"].tolist(),
    )
