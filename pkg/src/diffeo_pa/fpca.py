"""Univariate and multivariate functional PCA of momentum fields.

Univariate FPCA works on functions sampled on a shared grid and uses the
trapezoid quadrature weights ``w`` to turn the covariance operator into the
symmetric matrix ``W^{1/2} C W^{1/2}``.  Multivariate FPCA combines the
univariate scores of the temporal (x) and amplitude (y) momentum domains by
an eigen-analysis of their stacked score covariance.
"""

from __future__ import annotations

import json
import warnings
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from diffeo_pa.errors import ValidationError
from diffeo_pa.geodesics import MomentaField

DOMAINS = ("X", "Y", "Concatenated")


def trapezoid_weights(grid: np.ndarray) -> np.ndarray:
    grid = np.asarray(grid, dtype=float)
    h = np.diff(grid)
    w = np.zeros_like(grid)
    w[:-1] += 0.5 * h
    w[1:] += 0.5 * h
    return w


def select_count(eigenvalues: np.ndarray, target: float) -> int:
    """Smallest ``l`` with ``sum(ev[:l]) / sum(ev) >= target``; 0 if there is no variance."""
    ev = np.asarray(eigenvalues, dtype=float)
    if ev.size == 0:
        return 0
    cum = np.cumsum(ev)
    if not cum[-1] > 0:
        return 0
    ratio = cum / cum[-1]
    return int(np.argmax(ratio >= target) + 1)


def _cumulative_pve(ev: np.ndarray, total: float) -> np.ndarray:
    if not total > 0:
        return np.zeros_like(ev)
    return np.cumsum(ev) / total


def _fix_signs(vectors: np.ndarray) -> np.ndarray:
    """Flip each row so its largest-magnitude coordinate is positive."""
    vectors = np.array(vectors, dtype=float)
    if vectors.size == 0:
        return vectors
    idx = np.argmax(np.abs(vectors), axis=1)
    signs = np.sign(vectors[np.arange(len(vectors)), idx])
    signs[signs == 0] = 1.0
    return vectors * signs[:, None]


@dataclass(frozen=True)
class FunctionalSample:
    grid: np.ndarray
    data: np.ndarray
    domain_label: str = "X"
    quad_weights: np.ndarray | None = None
    ids: tuple | None = None

    def __post_init__(self):
        grid = np.asarray(self.grid, dtype=float)
        data = np.atleast_2d(np.asarray(self.data, dtype=float))
        if data.shape[1] != grid.size:
            raise ValidationError(f"data has {data.shape[1]} columns for a grid of {grid.size}")
        if data.shape[0] < 2:
            raise ValidationError("need at least two functions")
        if self.domain_label not in DOMAINS:
            raise ValidationError(f"unknown domain label {self.domain_label!r}")
        w = trapezoid_weights(grid) if self.quad_weights is None else np.asarray(self.quad_weights, dtype=float)
        if w.shape != grid.shape or np.any(w <= 0):
            raise ValidationError("quadrature weights must be positive, one per grid point")
        if self.ids is not None and len(self.ids) != data.shape[0]:
            raise ValidationError("ids must have one entry per function")
        object.__setattr__(self, "grid", grid)
        object.__setattr__(self, "data", data)
        object.__setattr__(self, "quad_weights", w)
        if self.ids is not None:
            object.__setattr__(self, "ids", tuple(self.ids))

    @property
    def n(self) -> int:
        return self.data.shape[0]


@dataclass
class FpcaModel:
    grid: np.ndarray
    quad_weights: np.ndarray
    mean: np.ndarray
    eigenfunctions: np.ndarray  # (K, P)
    eigenvalues: np.ndarray  # (K,)
    scores: np.ndarray  # (n, K)
    pve: np.ndarray  # (K,) cumulative
    all_eigenvalues: np.ndarray
    domain_label: str = "X"
    ids: tuple | None = None
    slices: dict = field(default_factory=dict)

    @property
    def n_components(self) -> int:
        return self.eigenvalues.size

    @property
    def total_variance(self) -> float:
        return float(self.all_eigenvalues.sum())

    def domain_slice(self, name: str) -> slice:
        return self.slices.get(name, slice(None))


@dataclass
class MfpcaModel:
    weights: np.ndarray  # (K, L) retained eigenvectors of Z
    eigenvalues: np.ndarray  # (L,)
    all_eigenvalues: np.ndarray  # (K,)
    all_weights: np.ndarray  # (K, K)
    Z: np.ndarray
    eigenfunctions: dict  # domain -> (L, P_j)
    scores: np.ndarray  # (n, L)
    pve: np.ndarray  # (L,) cumulative
    L: int
    block_sizes: dict
    grids: dict
    means: dict
    ids: tuple | None = None

    def weight_block(self, domain: str) -> np.ndarray:
        kx = self.block_sizes["X"]
        return self.weights[:kx] if domain == "X" else self.weights[kx:]


def _eigen_from_cov(cov: np.ndarray, w: np.ndarray):
    sw = np.sqrt(w)
    A = sw[:, None] * cov * sw[None, :]
    evals, evecs = np.linalg.eigh((A + A.T) / 2.0)
    order = np.argsort(evals)[::-1]
    evals, evecs = evals[order], evecs[:, order]
    scale = max(float(np.abs(evals).max(initial=0.0)), 1e-300)
    if evals.min(initial=0.0) < -1e-8 * scale:
        warnings.warn(f"covariance has negative eigenvalue {evals.min():.3e}; clipped to 0", RuntimeWarning)
    evals = np.clip(evals, 0.0, None)
    phi = (evecs / sw[:, None]).T
    return evals, phi


def _fit(grid, w, data, cov, pve_target, label, ids) -> FpcaModel:
    mean = data.mean(axis=0)
    centered = data - mean
    evals, phi = _eigen_from_cov(cov, w)
    # variance at the level of rounding in the data counts as none
    floor = (1e-12 * float(np.abs(data).max(initial=0.0))) ** 2 * float(w.sum())
    evals = np.where(evals > floor, evals, 0.0)
    K = select_count(evals, pve_target)
    phi = _fix_signs(phi[:K])
    scores = centered @ (w[:, None] * phi.T)
    return FpcaModel(
        grid=grid,
        quad_weights=w,
        mean=mean,
        eigenfunctions=phi,
        eigenvalues=evals[:K],
        scores=scores,
        pve=_cumulative_pve(evals[:K], evals.sum()),
        all_eigenvalues=evals,
        domain_label=label,
        ids=ids,
    )


def ufpca(sample: FunctionalSample, pve_target: float = 0.99) -> FpcaModel:
    """FPCA of a densely observed sample, truncated at ``pve_target`` variance explained.

    Eigenfunctions are orthonormal under the trapezoid inner product; scores
    are the quadrature projections of the centred functions.
    """
    if not 0 < pve_target <= 1:
        raise ValidationError("pve_target must lie in (0, 1]")
    centered = sample.data - sample.data.mean(axis=0)
    cov = centered.T @ centered / (sample.n - 1)
    return _fit(sample.grid, sample.quad_weights, sample.data, cov, pve_target, sample.domain_label, sample.ids)


def mfpca(model_x: FpcaModel, model_y: FpcaModel, pve_target: float = 0.90) -> MfpcaModel:
    """Combine two univariate fits into multivariate components.

    Stacks the univariate scores into ``Xi`` (n x K), eigen-analyses
    ``Z = Xi^T Xi / (n - 1)`` and keeps the smallest ``L`` reaching
    ``pve_target``.  Multivariate eigenfunctions and scores are the
    ``Z``-eigenvector-weighted combinations of the univariate ones.
    """
    if model_x.scores.shape[0] != model_y.scores.shape[0]:
        raise ValidationError("models were fit on different numbers of participants")
    if model_x.ids is not None and model_y.ids is not None and tuple(model_x.ids) != tuple(model_y.ids):
        raise ValidationError("models were fit on different participants or in a different order")
    if not 0 < pve_target <= 1:
        raise ValidationError("pve_target must lie in (0, 1]")
    n = model_x.scores.shape[0]
    kx, ky = model_x.n_components, model_y.n_components
    Xi = np.hstack([model_x.scores, model_y.scores])
    Z = Xi.T @ Xi / (n - 1)
    nu, c = np.linalg.eigh((Z + Z.T) / 2.0)
    order = np.argsort(nu)[::-1]
    nu, c = np.clip(nu[order], 0.0, None), c[:, order]
    psi_x_all = c[:kx].T @ model_x.eigenfunctions
    psi_y_all = c[kx:].T @ model_y.eigenfunctions
    # sign convention on the joint (x, y) eigenfunction
    joint = np.hstack([psi_x_all, psi_y_all])
    if joint.size:
        idx = np.argmax(np.abs(joint), axis=1)
        signs = np.sign(joint[np.arange(len(joint)), idx])
        signs[signs == 0] = 1.0
        c = c * signs[None, :]
        psi_x_all = psi_x_all * signs[:, None]
        psi_y_all = psi_y_all * signs[:, None]
    L = select_count(nu, pve_target)
    return MfpcaModel(
        weights=c[:, :L],
        eigenvalues=nu[:L],
        all_eigenvalues=nu,
        all_weights=c,
        Z=Z,
        eigenfunctions={"X": psi_x_all[:L], "Y": psi_y_all[:L]},
        scores=Xi @ c[:, :L],
        pve=_cumulative_pve(nu[:L], nu.sum()),
        L=L,
        block_sizes={"X": kx, "Y": ky},
        grids={"X": model_x.grid, "Y": model_y.grid},
        means={"X": model_x.mean, "Y": model_y.mean},
        ids=model_x.ids if model_x.ids is not None else model_y.ids,
    )


def joined_grid(grid_x: np.ndarray, grid_y: np.ndarray) -> np.ndarray:
    """Abscissae with the y-grid appended one x-spacing after the end of the x-grid."""
    gap = grid_x[-1] - grid_x[-2] if grid_x.size > 1 else 1.0
    return np.concatenate([grid_x, grid_y - grid_y[0] + grid_x[-1] + gap])


def _kernel_smoother(s: np.ndarray, bandwidth: float) -> np.ndarray:
    S = np.exp(-0.5 * ((s[:, None] - s[None, :]) / bandwidth) ** 2)
    return S / S.sum(axis=1, keepdims=True)


def concat_ufpca(
    sample_x: FunctionalSample,
    sample_y: FunctionalSample,
    pve_target: float = 0.99,
    *,
    bandwidth: float | None = None,
) -> FpcaModel:
    """Single FPCA on each subject's x-function followed by its y-function.

    Both halves keep their own quadrature weights.  With ``bandwidth`` set,
    the covariance surface is kernel-smoothed along the joined abscissa
    before the eigen-analysis, which is what a smoothing-based FPCA does when
    fed concatenated domains; smoothing straddles the artificial junction.
    """
    if sample_x.n != sample_y.n:
        raise ValidationError("samples have different numbers of functions")
    if sample_x.ids is not None and sample_y.ids is not None and sample_x.ids != sample_y.ids:
        raise ValidationError("samples list different participants or a different order")
    if not 0 < pve_target <= 1:
        raise ValidationError("pve_target must lie in (0, 1]")
    data = np.hstack([sample_x.data, sample_y.data])
    w = np.concatenate([sample_x.quad_weights, sample_y.quad_weights])
    grid = joined_grid(sample_x.grid, sample_y.grid)
    centered = data - data.mean(axis=0)
    cov = centered.T @ centered / (data.shape[0] - 1)
    if bandwidth is not None:
        if not bandwidth > 0:
            raise ValidationError("bandwidth must be positive")
        S = _kernel_smoother(grid, bandwidth)
        cov = S @ cov @ S.T
    model = _fit(grid, w, data, cov, pve_target, "Concatenated", sample_x.ids or sample_y.ids)
    px = sample_x.grid.size
    model.slices = {"X": slice(0, px), "Y": slice(px, px + sample_y.grid.size)}
    return model


def boundary_coupling(model, n_components: int | None = None) -> float:
    """Cross-domain covariance at the junction (last x point, first y point).

    Evaluated from the retained components:
    ``sum_l ev_l * f_l^X(end) * f_l^Y(start)``.
    """
    if isinstance(model, MfpcaModel):
        ev = model.eigenvalues
        fx = model.eigenfunctions["X"][:, -1]
        fy = model.eigenfunctions["Y"][:, 0]
    else:
        ev = model.eigenvalues
        fx = model.eigenfunctions[:, model.domain_slice("X")][:, -1]
        fy = model.eigenfunctions[:, model.domain_slice("Y")][:, 0]
    m = ev.size if n_components is None else n_components
    return float(np.sum(ev[:m] * fx[:m] * fy[:m]))


def pc_deformation(model: MfpcaModel, mean_field: MomentaField, l: int, scale: float | None = None) -> MomentaField:
    """Mean momenta displaced along multivariate component ``l`` (1-based).

    ``scale`` defaults to one standard deviation of the mode, ``sqrt(nu_l)``.
    """
    if not 1 <= l <= model.L:
        raise ValidationError(f"component index {l} outside 1..{model.L}")
    if scale is None:
        scale = float(np.sqrt(model.eigenvalues[l - 1]))
    psi = np.column_stack([model.eigenfunctions["X"][l - 1], model.eigenfunctions["Y"][l - 1]])
    if psi.shape != mean_field.momenta.shape:
        raise ValidationError("eigenfunction grid does not match the control points of mean_field")
    return MomentaField.from_momenta(
        mean_field.participant_id, mean_field.period, mean_field.control_points, mean_field.momenta + scale * psi
    )


def mean_momenta_field(model: MfpcaModel, control_points: np.ndarray, period: int = 0) -> MomentaField:
    momenta = np.column_stack([model.means["X"], model.means["Y"]])
    return MomentaField.from_momenta("mean", period, control_points, momenta)


def reconstruct(model, i: int, m: int):
    """Truncated Karhunen-Loeve reconstruction of subject ``i`` with ``m`` components.

    Returns an array for :class:`FpcaModel` and a ``{"X": ..., "Y": ...}``
    dict for :class:`MfpcaModel`.
    """
    if isinstance(model, MfpcaModel):
        if not 0 <= m <= model.L:
            raise ValidationError(f"m must lie in 0..{model.L}")
        rho = model.scores[i, :m]
        return {d: model.means[d] + rho @ model.eigenfunctions[d][:m] for d in ("X", "Y")}
    if not 0 <= m <= model.n_components:
        raise ValidationError(f"m must lie in 0..{model.n_components}")
    return model.mean + model.scores[i, :m] @ model.eigenfunctions[:m]


def momenta_samples(fields: Sequence[MomentaField], grid: np.ndarray | None = None):
    """Split a cohort of momentum fields into x- and y-domain functional samples.

    The functional grid defaults to the control-point abscissae of the first
    field; all fields must share the same number of control points.
    """
    if len(fields) < 2:
        raise ValidationError("need at least two momentum fields")
    P = fields[0].momenta.shape[0]
    if any(f.momenta.shape[0] != P for f in fields):
        raise ValidationError("momentum fields have different numbers of control points")
    if grid is None:
        grid = fields[0].control_points[:, 0]
    ids = tuple(f.participant_id for f in fields)
    mx = np.vstack([f.momenta[:, 0] for f in fields])
    my = np.vstack([f.momenta[:, 1] for f in fields])
    return FunctionalSample(grid, mx, "X", ids=ids), FunctionalSample(grid, my, "Y", ids=ids)


# --- export -----------------------------------------------------------------


def mfpca_to_dict(model: MfpcaModel, model_x: FpcaModel | None = None, model_y: FpcaModel | None = None) -> dict:
    out = {
        "L": model.L,
        "block_sizes": model.block_sizes,
        "grids": {d: g.tolist() for d, g in model.grids.items()},
        "means": {d: m.tolist() for d, m in model.means.items()},
        "eigenvalues": model.eigenvalues.tolist(),
        "all_eigenvalues": model.all_eigenvalues.tolist(),
        "weights": model.weights.tolist(),
        "eigenfunctions": {d: e.tolist() for d, e in model.eigenfunctions.items()},
        "pve": model.pve.tolist(),
    }
    for name, m in (("univariate_x", model_x), ("univariate_y", model_y)):
        if m is not None:
            out[name] = {
                "eigenvalues": m.eigenvalues.tolist(),
                "eigenfunctions": m.eigenfunctions.tolist(),
                "pve": m.pve.tolist(),
            }
    return out


def save_mfpca_json(path, model: MfpcaModel, model_x=None, model_y=None) -> None:
    with open(path, "w") as fh:
        json.dump(mfpca_to_dict(model, model_x, model_y), fh, indent=1)


def pve_table(models: dict[int, MfpcaModel], max_components: int | None = None) -> list[dict]:
    """Per-component PVE (%) for each period, one row per component."""
    n = max(m.L for m in models.values()) if max_components is None else max_components
    rows = []
    for l in range(n):
        row = {"component": f"PC{l + 1}"}
        for period, m in sorted(models.items()):
            total = m.all_eigenvalues.sum()
            row[f"period_{period}"] = (
                round(100.0 * m.all_eigenvalues[l] / total, 1) if l < m.all_eigenvalues.size and total > 0 else None
            )
        rows.append(row)
    return rows
