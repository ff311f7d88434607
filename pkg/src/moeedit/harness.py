"""Synthetic editing experiments.

Everything here is a pure function of an :class:`ExperimentConfig`; wall-clock
fields are the only non-deterministic outputs.
"""

from __future__ import annotations

import logging
import math
import time
from dataclasses import dataclass, field, fields, replace
from typing import NamedTuple, Sequence

import numpy as np
from .moe_core import StackedModel, forward_batch, random_model, softmax
from .nullspace import ProjectorSet, build_projector_set
from .routing import RoutingShiftReport, compare_routing
from .solver import (
    EditBatch,
    EditRequest,
    UpdateSet,
    apply_updates,
    assemble_batch,
    bcd_solve,
    solve_global,
)

log = logging.getLogger(__name__)

SUCCESS_THRESHOLD = 0.1


@dataclass
class ExperimentConfig:
    d_model: int = 64
    d_k: int = 128
    n_experts: int = 16
    top_k: int = 4
    n_layers: int = 4
    edit_layers: list[int] = field(default_factory=lambda: [0, 1, 2])
    num_edits: int = 200
    batch_size: int = 20
    num_preservation: int = 100
    num_heldout: int = 200
    lam: float = 1.0
    passes: int = 10
    tau: float = 0.02
    target_magnitude: float = 0.5
    prompt_rank: int = 16  # prompts span a random subspace of this dimension; 0 = isotropic
    seed: int = 0
    solver: str = "bcd"  # bcd | global | both
    projection: bool = True
    # bench / sweep subcommands
    bench_n: list[int] = field(default_factory=lambda: [8, 16, 32])
    bench_d_k: int = 32
    bench_examples: int = 32
    bench_repetitions: int = 3
    sweep_passes: list[int] = field(default_factory=lambda: [2, 4, 6, 8, 10, 12])

    def __post_init__(self):
        self.edit_layers = sorted(int(l) for l in self.edit_layers)
        self.bench_n = [int(n) for n in self.bench_n]
        self.sweep_passes = [int(p) for p in self.sweep_passes]
        self.validate()

    def validate(self) -> None:
        if min(self.d_model, self.d_k, self.n_experts, self.top_k, self.n_layers) < 1:
            raise ValueError("model dimensions must be positive")
        if self.top_k > self.n_experts:
            raise ValueError(f"top_k={self.top_k} exceeds n_experts={self.n_experts}")
        if min(self.num_edits, self.num_preservation, self.num_heldout) < 0:
            raise ValueError("prompt counts must be non-negative")
        if self.batch_size < 1 or (self.num_edits and self.batch_size > self.num_edits):
            raise ValueError(
                f"batch_size={self.batch_size} must lie in [1, num_edits={self.num_edits}]"
            )
        if any(not 0 <= l < self.n_layers for l in self.edit_layers):
            raise ValueError(f"edit layers {self.edit_layers} fall outside [0, {self.n_layers})")
        if len(set(self.edit_layers)) != len(self.edit_layers):
            raise ValueError("edit layers must be distinct")
        if self.lam <= 0:
            raise ValueError(f"lam must be positive, got {self.lam}")
        if self.passes < 1:
            raise ValueError(f"passes must be >= 1, got {self.passes}")
        if not 0 <= self.prompt_rank <= self.d_model:
            raise ValueError(f"prompt_rank must lie in [0, d_model={self.d_model}], got {self.prompt_rank}")
        if self.tau < 0 or self.target_magnitude < 0:
            raise ValueError("tau and target_magnitude must be non-negative")
        if self.bench_n != sorted(self.bench_n) or self.sweep_passes != sorted(self.sweep_passes):
            raise ValueError("bench_n and sweep_passes must be ascending")
        if self.solver not in ("bcd", "global", "both"):
            raise ValueError(f"solver must be bcd, global or both, got {self.solver!r}")

    def as_dict(self) -> dict:
        return {f.name: getattr(self, f.name) for f in fields(self)}


class Instance(NamedTuple):
    model: StackedModel
    edit_prompts: np.ndarray
    preservation_prompts: np.ndarray
    heldout_prompts: np.ndarray


def _streams(seed: int, n: int) -> list[np.random.Generator]:
    return [np.random.default_rng(s) for s in np.random.SeedSequence(seed).spawn(n)]


def prompt_basis(d_model: int, rank: int, rng: np.random.Generator) -> np.ndarray:
    """``(rank, d_model)`` orthonormal rows scaled so prompts keep ``E|u|^2 = d_model``."""
    Q, _ = np.linalg.qr(rng.standard_normal((d_model, rank)))
    return Q.T * np.sqrt(d_model / rank)


def gen_instance(config: ExperimentConfig, seed: int | None = None) -> Instance:
    """Seeded model and three disjoint Gaussian prompt sets.

    All prompts share one distribution.  With ``prompt_rank > 0`` it is a
    degenerate Gaussian on a random subspace, so preservation keys carry
    information about held-out keys.
    """
    seed = config.seed if seed is None else seed
    model_rng, prompt_rng, basis_rng = _streams(seed, 3)
    model = random_model(
        config.d_model, config.d_k, config.n_experts, config.top_k, config.n_layers,
        seed=int(model_rng.integers(2**63)),
    )
    model = StackedModel(model.layers, seed=seed)
    total = config.num_edits + config.num_preservation + config.num_heldout
    if config.prompt_rank:
        basis = prompt_basis(config.d_model, config.prompt_rank, basis_rng)
        prompts = prompt_rng.standard_normal((total, config.prompt_rank)) @ basis
    else:
        prompts = prompt_rng.standard_normal((total, config.d_model))
    a = config.num_edits
    b = a + config.num_preservation
    return Instance(model, prompts[:a], prompts[a:b], prompts[b:])


def layer_outputs(model: StackedModel, prompts: Sequence, layer: int) -> np.ndarray:
    if len(prompts) == 0:
        return np.zeros((0, model.d_model))
    return forward_batch(model, prompts, upto=layer).outputs[layer]


def make_edit_targets(
    model: StackedModel, prompts: Sequence, layer: int, magnitude: float, seed: int
) -> np.ndarray:
    """Current layer output pushed ``magnitude * |output|`` along a random unit direction."""
    if magnitude < 0:
        raise ValueError(f"magnitude must be non-negative, got {magnitude}")
    outs = layer_outputs(model, prompts, layer)
    rng = np.random.default_rng(seed)
    dirs = rng.standard_normal(outs.shape)
    dirs /= np.linalg.norm(dirs, axis=1, keepdims=True)
    return outs + magnitude * np.linalg.norm(outs, axis=1, keepdims=True) * dirs


def _relative_residuals(model: StackedModel, prompts, targets, layer: int) -> np.ndarray:
    outs = layer_outputs(model, prompts, layer)
    num = np.linalg.norm(targets - outs, axis=1)
    den = np.linalg.norm(targets, axis=1)
    return np.divide(num, den, out=np.zeros_like(num), where=den > 0)


def preservation_drift(model_pre: StackedModel, model_post: StackedModel, prompts) -> np.ndarray:
    """Per-prompt max over layers of ``|v_post - v_pre| / |v_pre|``."""
    if len(prompts) == 0:
        return np.zeros(0)
    a = forward_batch(model_pre, prompts).outputs
    b = forward_batch(model_post, prompts).outputs
    num = np.linalg.norm(b - a, axis=2)
    den = np.maximum(np.linalg.norm(a, axis=2), np.finfo(float).tiny)
    return (num / den).max(axis=0)


@dataclass
class EditOutcome:
    batch: int
    layer: int
    pre_residual: np.ndarray
    post_residual: np.ndarray
    preservation_drift: float
    objective: float
    passes: int
    timings: dict[str, float]
    global_gap: float | None = None  # relative Frobenius gap BCD vs global, solver="both"

    @property
    def success_rate(self) -> float:
        if self.post_residual.size == 0:
            return 1.0
        return float(np.mean(self.post_residual < SUCCESS_THRESHOLD))


@dataclass
class SequentialResult:
    config: ExperimentConfig
    initial_model: StackedModel
    final_model: StackedModel
    instance: Instance
    projectors: dict[int, ProjectorSet]
    outcomes: list[EditOutcome]
    routing: dict[str, RoutingShiftReport]

    @property
    def mean_post_residual(self) -> float:
        res = [o.post_residual for o in self.outcomes if o.post_residual.size]
        return float(np.mean(np.concatenate(res))) if res else 0.0

    @property
    def max_preservation_drift(self) -> float:
        return max((o.preservation_drift for o in self.outcomes), default=0.0)

    @property
    def efficacy(self) -> float:
        rates = [o.success_rate for o in self.outcomes]
        return float(np.mean(rates)) if rates else 1.0


def build_projectors(config: ExperimentConfig, model: StackedModel, prompts) -> dict[int, ProjectorSet]:
    out = {}
    for layer in config.edit_layers:
        if config.projection:
            out[layer] = build_projector_set(model, prompts, layer, config.tau)
        else:
            out[layer] = ProjectorSet.identity(layer, config.n_experts, config.d_k)
    return out


def _solve(batch: EditBatch, config: ExperimentConfig, seed: int) -> tuple[UpdateSet, float | None]:
    if config.solver == "global":
        return solve_global(batch, config.lam), None
    upd = bcd_solve(batch, config.lam, passes=config.passes, seed=seed)
    if config.solver == "both":
        ref = solve_global(batch, config.lam).deltas
        scale = np.linalg.norm(ref)
        gap = float(np.linalg.norm(upd.deltas - ref) / scale) if scale > 0 else float(np.linalg.norm(upd.deltas))
        return upd, gap
    return upd, None


def run_sequential_edit(
    config: ExperimentConfig, routing_sets: Sequence[str] = ("preservation", "heldout")
) -> SequentialResult:
    """Edit every batch at every edit layer in ascending order.

    Projectors and per-layer targets come from the pre-edit model; keys,
    gates and residuals are re-read from the current model before each solve.
    """
    inst = gen_instance(config)
    model0 = inst.model
    projectors = build_projectors(config, model0, inst.preservation_prompts)
    n_batches = math.ceil(config.num_edits / config.batch_size) if config.num_edits else 0
    slices = [slice(b * config.batch_size, (b + 1) * config.batch_size) for b in range(n_batches)]
    target_rngs = _streams(config.seed + 1, config.n_layers)
    # per batch slice, so a zero-magnitude target reproduces the assembled output bit for bit
    targets = {
        l: [
            make_edit_targets(
                model0, inst.edit_prompts[rows], l, config.target_magnitude,
                seed=int(target_rngs[l].integers(2**63)),
            )
            for rows in slices
        ]
        for l in config.edit_layers
    }
    model = model0
    outcomes = []
    for b, rows in enumerate(slices):
        prompts = inst.edit_prompts[rows]
        batch_outcomes = []
        for layer in config.edit_layers:
            tgt = targets[layer][b]
            t0 = time.perf_counter()
            batch = assemble_batch(model, layer, prompts, tgt, projectors[layer])
            t1 = time.perf_counter()
            seed = int(np.random.SeedSequence([config.seed, b, layer]).generate_state(1)[0])
            try:
                updates, gap = _solve(batch, config, seed)
            except Exception as exc:
                raise RuntimeError(f"solver failed on batch {b}, layer {layer}: {exc}") from exc
            t2 = time.perf_counter()
            pre = np.array([
                np.linalg.norm(r.residual) / max(np.linalg.norm(r.target), np.finfo(float).tiny)
                for r in batch.requests
            ])
            model = apply_updates(model, layer, updates, projectors[layer])
            t3 = time.perf_counter()
            post = _relative_residuals(model, prompts, tgt, layer)
            batch_outcomes.append(EditOutcome(
                b, layer, pre, post, 0.0, updates.objective, updates.passes,
                {"assemble": t1 - t0, "solve": t2 - t1, "apply": t3 - t2}, gap,
            ))
        drift = preservation_drift(model0, model, inst.preservation_prompts)
        worst = float(drift.max()) if drift.size else 0.0
        for o in batch_outcomes:
            o.preservation_drift = worst
        outcomes.extend(batch_outcomes)
        log.info("batch %d/%d done, max preservation drift %.3e", b + 1, n_batches, worst)
    sets = {
        "preservation": inst.preservation_prompts,
        "heldout": inst.heldout_prompts,
        "edit": inst.edit_prompts,
    }
    routing = {name: compare_routing(model0, model, sets[name]) for name in routing_sets}
    return SequentialResult(config, model0, model, inst, projectors, outcomes, routing)


def random_batch(
    n_experts: int,
    d_k: int,
    d_m: int,
    n_examples: int,
    top_k: int,
    seed: int,
    active: int | None = None,
) -> EditBatch:
    """Edit batch with Gaussian keys and top-K softmax gates, identity projectors.

    With ``active`` set, routing is confined to the first ``active`` experts.
    """
    rng = np.random.default_rng(seed)
    pool = n_experts if active is None else active
    if not 1 <= top_k <= pool <= n_experts:
        raise ValueError(f"need 1 <= top_k <= active <= n_experts, got {top_k}, {pool}, {n_experts}")
    requests = []
    for _ in range(n_examples):
        s = rng.standard_normal(pool)
        experts = tuple(sorted(int(i) for i in np.argsort(-s, kind="stable")[:top_k]))
        gates = softmax(s[list(experts)])
        keys = rng.standard_normal((top_k, d_k))
        values = rng.standard_normal((top_k, d_m))
        target = rng.standard_normal(d_m)
        requests.append(
            EditRequest(experts, gates, keys, keys.copy(), values, target, target - gates @ values)
        )
    return EditBatch(0, tuple(requests), ProjectorSet.identity(0, n_experts, d_k), n_experts, d_k, d_m)


class BenchRow(NamedTuple):
    n_experts: int
    t_bcd_ms: float
    t_global_ms: float | None
    objective_bcd: float
    objective_global: float | None


def bench_solvers(
    n_values: Sequence[int],
    top_k: int = 4,
    d_k: int = 32,
    d_m: int = 64,
    n_examples: int = 32,
    lam: float = 1e-2,
    passes: int = 10,
    repetitions: int = 3,
    seed: int = 0,
    max_dim: int = 4096,
    active: int | None = None,
) -> list[BenchRow]:
    """Median wall time of both solvers on matched random batches per expert count."""
    if list(n_values) != sorted(n_values):
        raise ValueError("n_values must be ascending")
    rows = []
    for N in n_values:
        batch = random_batch(N, d_k, d_m, n_examples, top_k, seed, active=active)
        _ = batch.blocks, batch.active_experts  # index once, outside the timed region
        t_bcd, t_glob = [], []
        for _ in range(repetitions):
            t0 = time.perf_counter()
            upd = bcd_solve(batch, lam, passes=passes, seed=seed)
            t_bcd.append(time.perf_counter() - t0)
        glob_obj = None
        if N * d_k <= max_dim:
            for _ in range(repetitions):
                t0 = time.perf_counter()
                ref = solve_global(batch, lam, max_dim=max_dim)
                t_glob.append(time.perf_counter() - t0)
            glob_obj = ref.objective
        rows.append(BenchRow(
            N,
            1e3 * float(np.median(t_bcd)),
            1e3 * float(np.median(t_glob)) if t_glob else None,
            upd.objective,
            glob_obj,
        ))
    return rows


class SweepRow(NamedTuple):
    passes: int
    mean_residual: float
    preservation_drift: float


def passes_sweep(config: ExperimentConfig, passes_list: Sequence[int]) -> list[SweepRow]:
    if list(passes_list) != sorted(passes_list):
        raise ValueError("passes list must be ascending")
    rows = []
    for p in passes_list:
        res = run_sequential_edit(replace(config, passes=p, solver="bcd"), routing_sets=())
        rows.append(SweepRow(p, res.mean_post_residual, res.max_preservation_drift))
    return rows


@dataclass
class AblationReport:
    on: SequentialResult
    off: SequentialResult

    def summary(self) -> dict[str, dict[str, list[float]]]:
        out = {}
        for arm, res in (("on", self.on), ("off", self.off)):
            for name, rep in res.routing.items():
                out[f"{arm}.{name}"] = {
                    "mean_rs": rep.mean_rs.tolist(),
                    "mean_kl": rep.mean_kl.tolist(),
                }
        return out

    def mean(self, arm: str, name: str, metric: str) -> float:
        """Average of a routing metric over prompts and layers."""
        rep = getattr(self, arm).routing[name]
        return float(getattr(rep, metric).mean())

    def check_direction(self) -> list[str]:
        """Violations of ``RS(on) >= RS(off)`` and ``KL(on) <= KL(off)`` on held-out prompts."""
        problems = []
        rs_on, rs_off = self.mean("on", "heldout", "rs"), self.mean("off", "heldout", "rs")
        kl_on, kl_off = self.mean("on", "heldout", "kl"), self.mean("off", "heldout", "kl")
        if rs_on < rs_off:
            problems.append(f"held-out RS(on)={rs_on:.6g} < RS(off)={rs_off:.6g}")
        if kl_on > kl_off:
            problems.append(f"held-out KL(on)={kl_on:.6g} > KL(off)={kl_off:.6g}")
        if kl_off > 1e-6 and not kl_on < kl_off:
            problems.append("KL ordering not strict although KL(off) > 1e-6")
        return problems


def projection_ablation(config: ExperimentConfig) -> AblationReport:
    """Same edit sequence with and without null-space projection."""
    on = run_sequential_edit(replace(config, projection=True))
    off = run_sequential_edit(replace(config, projection=False))
    return AblationReport(on, off)
