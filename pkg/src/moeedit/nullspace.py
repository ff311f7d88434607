"""Per-expert null-space projectors built from preservation keys.

For expert ``n`` the preservation keys ``K0`` (one column per preservation
prompt routed to ``n``) span the directions whose outputs must stay fixed.
The projector keeps only eigen-directions of the key covariance whose
eigenvalue falls below ``tau``, so ``delta @ P @ k`` vanishes for every
preservation key ``k`` and any free update ``delta``.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path
from typing import NamedTuple, Sequence

import numpy as np

from .container import checksum, load_container, save_container
from .moe_core import StackedModel, collect_all_keys

DEFAULT_TAU = 0.02
SYMMETRY_TOL = 1e-10
NEGATIVE_EIG_TOL = 1e-10


class Projector(NamedTuple):
    matrix: np.ndarray
    retained_dim: int
    eigenvalues: np.ndarray  # covariance spectrum, descending


def covariance(K0) -> np.ndarray:
    """``K0 @ K0.T / max(m, 1)`` for a ``(d_k, m)`` key matrix."""
    K0 = np.asarray(K0, dtype=np.float64)
    if K0.ndim != 2:
        raise ValueError(f"K0 must be 2-D (d_k x m), got shape {K0.shape}")
    if not np.all(np.isfinite(K0)):
        raise ValueError("K0 has non-finite entries")
    cov = K0 @ K0.T / max(K0.shape[1], 1)
    return 0.5 * (cov + cov.T)


def build_projector(cov, tau: float = DEFAULT_TAU) -> Projector:
    """Orthogonal projector onto eigen-directions of ``cov`` with eigenvalue < ``tau``."""
    cov = np.asarray(cov, dtype=np.float64)
    if cov.ndim != 2 or cov.shape[0] != cov.shape[1]:
        raise ValueError(f"covariance must be square, got shape {cov.shape}")
    if tau < 0:
        raise ValueError(f"tau must be non-negative, got {tau}")
    scale = max(1.0, float(np.max(np.abs(cov), initial=0.0)))
    asym = float(np.max(np.abs(cov - cov.T), initial=0.0))
    if asym > SYMMETRY_TOL * scale:
        raise ValueError(f"covariance is not symmetric (max asymmetry {asym:.3e})")
    try:
        evals, evecs = np.linalg.eigh(cov)
    except np.linalg.LinAlgError as exc:
        raise RuntimeError(f"eigendecomposition failed: {exc}") from exc
    evals, evecs = evals[::-1], evecs[:, ::-1]
    if evals.size and evals[-1] < -NEGATIVE_EIG_TOL * scale:
        raise ValueError(f"covariance is not PSD (eigenvalue {evals[-1]:.3e})")
    evals = np.maximum(evals, 0.0)
    keep = evals < tau
    U0 = evecs[:, keep]
    P = U0 @ U0.T
    return Projector(0.5 * (P + P.T), int(keep.sum()), evals)


def project_keys(P, keys: Sequence) -> list[np.ndarray]:
    P = np.asarray(P, dtype=np.float64)
    out = []
    for k in keys:
        k = np.asarray(k, dtype=np.float64)
        if k.shape != (P.shape[1],):
            raise ValueError(f"dimension mismatch: key {k.shape} vs projector {P.shape}")
        out.append(P @ k)
    return out


@dataclass(frozen=True)
class ProjectorSet:
    """Projectors for every expert of one layer."""

    layer: int
    tau: float
    projectors: tuple[Projector, ...]
    sources: tuple[str, ...]  # checksum of each source covariance

    def __len__(self) -> int:
        return len(self.projectors)

    def __getitem__(self, n: int) -> np.ndarray:
        return self.projectors[n].matrix

    @property
    def d_k(self) -> int:
        return self.projectors[0].matrix.shape[0]

    @property
    def retained_dims(self) -> list[int]:
        return [p.retained_dim for p in self.projectors]

    @classmethod
    def identity(cls, layer: int, n_experts: int, d_k: int) -> ProjectorSet:
        """No preservation constraints: every projector is the identity."""
        eye = np.eye(d_k)
        p = Projector(eye, d_k, np.zeros(d_k))
        zero = checksum(np.zeros((d_k, d_k)))
        return cls(layer, 0.0, (p,) * n_experts, (zero,) * n_experts)

    @classmethod
    def from_covariances(cls, layer: int, covs: Sequence[np.ndarray], tau: float) -> ProjectorSet:
        projectors = tuple(build_projector(c, tau) for c in covs)
        return cls(layer, float(tau), projectors, tuple(checksum(c) for c in covs))


def build_projector_set(
    model: StackedModel, prompts: Sequence, layer: int, tau: float = DEFAULT_TAU
) -> ProjectorSet:
    """Projectors for ``layer`` from the keys the preservation ``prompts`` produce."""
    covs = [covariance(K0) for K0 in collect_all_keys(model, prompts, layer)]
    return ProjectorSet.from_covariances(layer, covs, tau)


def spectral_gap(cov, tau: float) -> tuple[float, float]:
    """Largest eigenvalue kept and smallest one removed at threshold ``tau``.

    Exact nullification of preservation keys needs the first to be ~0 and the
    second to be clearly above ``tau``.
    """
    evals = build_projector(cov, tau).eigenvalues
    kept = evals[evals < tau]
    removed = evals[evals >= tau]
    return (float(kept.max()) if kept.size else 0.0, float(removed.min()) if removed.size else np.inf)


def save_projectors(ps: ProjectorSet, path: str | Path) -> Path:
    arrays = {}
    for n, p in enumerate(ps.projectors):
        arrays[f"E{n}.P"] = p.matrix
        arrays[f"E{n}.eigenvalues"] = p.eigenvalues
    meta = {
        "kind": "projectors",
        "layer": ps.layer,
        "tau": ps.tau,
        "n_experts": len(ps),
        "retained_dim": ps.retained_dims,
        "source_checksum": list(ps.sources),
    }
    return save_container(path, arrays, meta)


def load_projectors(path: str | Path) -> ProjectorSet:
    arrays, meta = load_container(path)
    if meta.get("kind") != "projectors":
        raise ValueError(f"{path}: container holds {meta.get('kind')!r}, not projectors")
    projectors = tuple(
        Projector(arrays[f"E{n}.P"], meta["retained_dim"][n], arrays[f"E{n}.eigenvalues"])
        for n in range(meta["n_experts"])
    )
    return ProjectorSet(meta["layer"], meta["tau"], projectors, tuple(meta["source_checksum"]))
