"""Covariate-projected tensor factor estimation.

Fits the semiparametric tensor factor model by iteratively projected SVD:
every mode update of the classical HOOI power iteration is projected onto
the sieve span of that mode's covariates, and the fitted core is rotated so
its mode-wise Gram matrices are diagonal with decreasing entries.  Modes
without covariates fall back to unprojected updates, so with no designs at
all the machinery reduces to plain HOOI.
"""

from __future__ import annotations

import json
import os
from dataclasses import dataclass, field

import numpy as np

from .sieve import (BasisSpec, SieveDesign, build_design, projector_apply,
                    read_covariates_csv, write_covariates_csv)
from .tensor import (check_tucker_ranks, eigenvalues_symmetric, fix_signs,
                     matricize, mode_product, multi_mode_product, read_tns,
                     top_left_singular_vectors, write_tns)

__all__ = [
    "EstimationError",
    "DegenerateCoreError",
    "RankExceedsSpanError",
    "HooiFit",
    "StefaFit",
    "orthonormal_basis",
    "subspace_distance",
    "hooi",
    "ipsvd_init",
    "ipsvd_iterate",
    "estimate_core",
    "calibrate",
    "estimate_loadings",
    "fit_stefa",
    "estimate_ranks",
    "save_fit",
    "load_fit",
]


class EstimationError(Exception):
    """Numeric failure during model fitting."""


class DegenerateCoreError(EstimationError):
    """Core matricization Gram is numerically singular (rank misspecification)."""


class RankExceedsSpanError(EstimationError):
    """Requested rank exceeds the dimension of the sieve span."""


def orthonormal_basis(a: np.ndarray) -> np.ndarray:
    """Orthonormal basis of the column space of ``a`` (SVD, rank-revealing)."""
    a = np.atleast_2d(np.asarray(a, dtype=float))
    u, s, _ = np.linalg.svd(a, full_matrices=False)
    if s.size == 0 or s[0] == 0.0:
        return u[:, :0]
    rank = int(np.sum(s > 1e-12 * s[0]))
    return u[:, :rank]


def subspace_distance(a: np.ndarray, b: np.ndarray) -> float:
    """Schatten-2 sin-theta distance sqrt(R - ||U^T V||_F^2) between column spaces.

    R is the column count of ``b`` (the reference); a rank-deficient ``a``
    contributes maximal angles for the missing directions.
    """
    u = orthonormal_basis(a)
    v = orthonormal_basis(np.atleast_2d(np.asarray(b, dtype=float)))
    # sines of the principal angles are the singular values of the residual
    # of v after projection onto span(u); this stays accurate near zero where
    # sqrt(R - ||u^T v||^2) loses half the significant digits
    resid = v - u @ (u.T @ v)
    s = np.linalg.svd(resid, compute_uv=False)
    return float(np.linalg.norm(s))


# ---------------------------------------------------------------------------
# fitted-model containers

@dataclass
class HooiFit:
    core: np.ndarray
    loadings: list            # per mode, I_m x R_m with A^T A / I = identity
    ranks: tuple
    iterations_used: int
    objective_trace: list
    converged: bool

    def reconstruct(self) -> np.ndarray:
        """Fitted signal: core contracted with the loadings on every mode."""
        return multi_mode_product(self.core, self.loadings)


@dataclass
class StefaFit:
    core: np.ndarray                  # calibrated core tensor
    g_loadings: list                  # per mode, G^T G / I = identity, in sieve span
    a_loadings: list                  # per mode full loadings
    gamma: list                       # per mode covariate-orthogonal parts
    sieve_coeffs: list                # per mode J x R coefficient matrix or None
    ranks: tuple
    iterations_used: int
    subspace_change_trace: list
    converged: bool
    identity_modes: tuple = ()
    flags: list = field(default_factory=list)
    diagnostics: dict = field(default_factory=dict)

    @property
    def order(self) -> int:
        return self.core.ndim

    def reconstruct(self) -> np.ndarray:
        """Fitted signal: core contracted with the full loadings on every mode."""
        return multi_mode_product(self.core, self.a_loadings)

    def reconstruct_g(self) -> np.ndarray:
        """Covariate-explained signal: core contracted with the G loadings."""
        return multi_mode_product(self.core, self.g_loadings)


# ---------------------------------------------------------------------------
# shared machinery

def _normalize_designs(designs, order) -> list:
    if designs is None:
        return [None] * order
    designs = list(designs)
    if len(designs) != order:
        raise ValueError(f"{len(designs)} designs given for order-{order} tensor")
    return designs


def _check_design_shapes(Y, designs) -> None:
    for m, d in enumerate(designs):
        if d is not None and d.n_rows != Y.shape[m]:
            raise ValueError(f"design for mode {m} has {d.n_rows} rows, tensor "
                             f"extent is {Y.shape[m]}")


def _check_rank_bounds(ranks, dims) -> tuple:
    ranks = tuple(int(r) for r in ranks)
    if len(ranks) != len(dims):
        raise ValueError(f"{len(ranks)} ranks given for order-{len(dims)} tensor")
    for m, (r, d) in enumerate(zip(ranks, dims)):
        if not 1 <= r <= d:
            raise ValueError(f"rank {r} for mode {m} not in [1, {d}]")
    return ranks


def _compress(Y: np.ndarray, designs, skip=()) -> np.ndarray:
    """Contract every covariate mode (except those in ``skip``) with its basis."""
    mats = {}
    for m, d in enumerate(designs):
        if d is not None and m not in skip:
            mats[m] = d.basis.T
    return multi_mode_product(Y, mats) if mats else Y


def _mode_update(Y, units, designs, mode, rank):
    """One projected power-iteration update: orthonormal factor for ``mode``."""
    mats = {j: units[j].T for j in range(Y.ndim) if j != mode and units[j] is not None}
    contracted = multi_mode_product(Y, mats)
    mat = matricize(contracted, mode)
    d = designs[mode]
    if d is not None:
        mat = projector_apply(d, mat)
    return top_left_singular_vectors(mat, rank)


def _sweep_changes(old, new, active):
    return max(subspace_distance(new[m], old[m]) for m in active)


# ---------------------------------------------------------------------------
# HOOI baseline

def hooi(Y: np.ndarray, ranks, max_iter: int = 50, tol: float = 1e-8) -> HooiFit:
    """Higher-order orthogonal iteration with HOSVD initialization.

    Loadings are scaled so ``A^T A / I_m`` is the identity, and the final
    core is rotated so each mode-wise core Gram is diagonal with decreasing
    entries (the same calibration used by the projected estimator).
    """
    Y = np.asarray(Y, dtype=float)
    if not np.all(np.isfinite(Y)):
        raise ValueError("tensor has non-finite entries")
    ranks = check_tucker_ranks(ranks, Y.shape)
    order = Y.ndim
    units = [top_left_singular_vectors(matricize(Y, m), ranks[m]) for m in range(order)]
    designs = [None] * order

    def objective(us):
        compressed = multi_mode_product(Y, {m: u.T for m, u in enumerate(us)})
        return float(np.prod(Y.shape) * np.sum(compressed ** 2))

    trace = [objective(units)]
    converged = False
    it = 0
    for it in range(1, max_iter + 1):
        prev = [u.copy() for u in units]
        for m in range(order):
            units[m] = _mode_update(Y, units, designs, m, ranks[m])
        trace.append(objective(units))
        if _sweep_changes(prev, units, range(order)) < tol:
            converged = True
            break

    scales = np.sqrt(np.asarray(Y.shape, dtype=float))
    loadings = [u * s for u, s in zip(units, scales)]
    core = estimate_core(Y, loadings)
    core, loadings, _ = calibrate(core, loadings)
    return HooiFit(core=core, loadings=loadings, ranks=ranks,
                   iterations_used=it, objective_trace=trace, converged=converged)


# ---------------------------------------------------------------------------
# iteratively projected SVD

def ipsvd_init(Y: np.ndarray, designs, ranks) -> list:
    """Projected spectral initialization: SVD of each matricization of the
    tensor projected onto every mode's sieve span."""
    Y = np.asarray(Y, dtype=float)
    designs = _normalize_designs(designs, Y.ndim)
    _check_design_shapes(Y, designs)
    ranks = _check_rank_bounds(ranks, Y.shape)
    for m, d in enumerate(designs):
        if d is not None and ranks[m] > d.rank:
            raise RankExceedsSpanError(
                f"rank exceeds sieve span (mode {m}: rank {ranks[m]} > span {d.rank})")

    compressed = _compress(Y, designs)
    factors = []
    for m in range(Y.ndim):
        d = designs[m]
        if d is not None:
            small = top_left_singular_vectors(matricize(compressed, m), ranks[m])
            u = fix_signs(d.basis @ small)
        else:
            partial = _compress(Y, designs, skip=(m,))
            u = top_left_singular_vectors(matricize(partial, m), ranks[m])
        factors.append(u * np.sqrt(Y.shape[m]))
    return factors


def ipsvd_iterate(Y: np.ndarray, designs, ranks, init, max_iter: int = 50,
                  tol: float = 1e-8, update_order=None, fixed_modes=()):
    """Projected power iterations (Gauss-Seidel over modes) from a warm start.

    Returns ``(factors, trace, converged)`` where ``trace`` holds the maximal
    per-sweep subspace change.
    """
    Y = np.asarray(Y, dtype=float)
    designs = _normalize_designs(designs, Y.ndim)
    ranks = _check_rank_bounds(ranks, Y.shape)
    scales = np.sqrt(np.asarray(Y.shape, dtype=float))
    units = [g / s for g, s in zip(init, scales)]
    active = [m for m in range(Y.ndim) if m not in fixed_modes]
    order = list(update_order) if update_order is not None else active

    trace = []
    converged = False
    it = 0
    for it in range(1, max_iter + 1):
        prev = [u.copy() for u in units]
        for m in order:
            units[m] = _mode_update(Y, units, designs, m, ranks[m])
        change = _sweep_changes(prev, units, active)
        trace.append(change)
        if change < tol:
            converged = True
            break
    factors = [u * s for u, s in zip(units, scales)]
    return factors, trace, converged


def estimate_core(Y: np.ndarray, factors) -> np.ndarray:
    """Least-squares core: Y contracted with every factor, divided by prod(I)."""
    Y = np.asarray(Y, dtype=float)
    for m, g in enumerate(factors):
        if g.shape[0] != Y.shape[m]:
            raise ValueError(f"factor for mode {m} has {g.shape[0]} rows, tensor "
                             f"extent is {Y.shape[m]}")
    contracted = multi_mode_product(Y, {m: g.T for m, g in enumerate(factors)})
    return contracted / float(np.prod(Y.shape))


def calibrate(core: np.ndarray, factors, fixed_modes=()):
    """Rotate core and factors so each mode-wise core Gram is diagonal with
    decreasing entries.  Returns ``(core, factors, flags)``."""
    core = np.asarray(core, dtype=float)
    rotations = []
    flags = []
    for m in range(core.ndim):
        if m in fixed_modes:
            rotations.append(np.eye(core.shape[m]))
            continue
        gram = matricize(core, m)
        gram = gram @ gram.T
        w, v = np.linalg.eigh(gram)
        w, v = w[::-1], v[:, ::-1]
        if w.size > 1 and w[0] > 0 and np.min(w[:-1] - w[1:]) < 1e-10 * w[0]:
            flags.append(f"identification unstable (mode {m} eigenvalue gap)")
        rotations.append(fix_signs(v))
    new_core = multi_mode_product(core, {m: q.T for m, q in enumerate(rotations)})
    new_factors = [g @ q for g, q in zip(factors, rotations)]
    return new_core, new_factors, flags


def estimate_loadings(Y: np.ndarray, designs, core: np.ndarray, g_loadings,
                      identity_modes=()):
    """Full loadings, their covariate-orthogonal parts, and sieve coefficients.

    The mode-m loading regresses the (other-mode projected) observation onto
    the core contracted with the other modes' G loadings; the orthogonal part
    is its residual after sieve projection.
    """
    Y = np.asarray(Y, dtype=float)
    designs = _normalize_designs(designs, Y.ndim)
    scales = np.sqrt(np.asarray(Y.shape, dtype=float))
    units = [g / s for g, s in zip(g_loadings, scales)]

    a_loadings, gammas, coeffs = [], [], []
    for m in range(Y.ndim):
        if m in identity_modes:
            a_loadings.append(np.eye(Y.shape[m]))
            gammas.append(np.zeros((Y.shape[m], Y.shape[m])))
            coeffs.append(None)
            continue
        gram = matricize(core, m)
        gram = gram @ gram.T
        w = eigenvalues_symmetric(gram)
        if w[-1] < 1e-12 * np.trace(gram):
            raise DegenerateCoreError(
                f"degenerate core (mode {m}): rank may be misspecified")
        mats = {j: units[j].T for j in range(Y.ndim) if j != m}
        numer = matricize(multi_mode_product(Y, mats), m) @ matricize(core, m).T
        a_m = numer @ np.linalg.pinv(gram, rcond=1e-12)
        a_m /= np.sqrt(np.prod(Y.shape) / Y.shape[m])
        a_loadings.append(a_m)

        d = designs[m]
        if d is None:
            gammas.append(a_m.copy())
            coeffs.append(None)
        else:
            gammas.append(a_m - projector_apply(d, a_m))
            b_m, *_ = np.linalg.lstsq(d.phi, g_loadings[m], rcond=1e-12)
            coeffs.append(b_m)
    return a_loadings, gammas, coeffs


def fit_stefa(Y: np.ndarray, designs=None, ranks=None, identity_modes=(),
              max_iter: int = 50, tol: float = 1e-8, update_order=None) -> StefaFit:
    """Full pipeline: projected init, projected power iterations, core
    projection, orthogonal calibration, and loading extraction.

    ``designs`` is a per-mode list of :class:`SieveDesign` or None (no
    covariates for that mode, meaning unprojected updates).  Modes listed in
    ``identity_modes`` are not compressed: their loading is the identity and
    their core extent equals the tensor extent.  ``ranks=None`` selects ranks
    by the eigenvalue-ratio estimator.
    """
    Y = np.asarray(Y, dtype=float)
    if not np.all(np.isfinite(Y)):
        raise ValueError("tensor has non-finite entries")
    order = Y.ndim
    designs = _normalize_designs(designs, order)
    _check_design_shapes(Y, designs)
    identity_modes = tuple(sorted(set(identity_modes)))
    for m in identity_modes:
        if designs[m] is not None:
            raise ValueError(f"mode {m} is both an identity mode and has covariates")

    if ranks is None:
        ranks = estimate_ranks(Y, designs, skip_modes=identity_modes)
    ranks = list(check_tucker_ranks(ranks, Y.shape))
    for m in identity_modes:
        ranks[m] = Y.shape[m]
    ranks = tuple(ranks)

    # identity modes get a placeholder rank in the init call (their factor is
    # overwritten with the identity just below)
    init_ranks = tuple(1 if m in identity_modes else r
                       for m, r in enumerate(ranks))
    init = ipsvd_init(Y, designs, init_ranks)
    for m in identity_modes:
        init[m] = np.sqrt(Y.shape[m]) * np.eye(Y.shape[m])
    factors, trace, converged = ipsvd_iterate(
        Y, designs, ranks, init, max_iter=max_iter, tol=tol,
        update_order=update_order, fixed_modes=identity_modes)
    core = estimate_core(Y, factors)
    core, factors, flags = calibrate(core, factors, fixed_modes=identity_modes)
    a_loadings, gammas, coeffs = estimate_loadings(
        Y, designs, core, factors, identity_modes=identity_modes)

    # identity modes keep the plain identity loading; fold its sqrt(I) scale
    # into the core so reconstruction conventions match the other modes
    for m in identity_modes:
        core = core * np.sqrt(Y.shape[m])
        factors[m] = np.eye(Y.shape[m])

    if all(d is None for d in designs):
        flags.append("no sieve projection")

    diagnostics = _fit_diagnostics(Y, designs, core, factors, gammas, identity_modes)
    return StefaFit(core=core, g_loadings=factors, a_loadings=a_loadings,
                    gamma=gammas, sieve_coeffs=coeffs, ranks=ranks,
                    iterations_used=len(trace), subspace_change_trace=trace,
                    converged=converged, identity_modes=identity_modes,
                    flags=flags, diagnostics=diagnostics)


def _fit_diagnostics(Y, designs, core, factors, gammas, identity_modes):
    per_mode = []
    for m in range(Y.ndim):
        g = factors[m]
        ortho = float(np.linalg.norm(g.T @ g / Y.shape[m] - np.eye(g.shape[1])))
        gram = matricize(core, m)
        gram = gram @ gram.T
        off = gram - np.diag(np.diag(gram))
        entry = {
            "g_orthonormality_residual": ortho,
            "core_gram_offdiagonal_mass": float(np.linalg.norm(off)),
            "identity_mode": m in identity_modes,
        }
        d = designs[m]
        if d is not None:
            gm = gammas[m]
            denom = np.linalg.norm(gm) or 1.0
            entry["gamma_sieve_orthogonality"] = float(
                np.linalg.norm(d.phi.T @ gm) / denom)
        per_mode.append(entry)
    return {"per_mode": per_mode}


# ---------------------------------------------------------------------------
# rank selection

def _round_half_away(x: float) -> int:
    return int(np.floor(x + 0.5))


def estimate_ranks(Y: np.ndarray, designs=None, k_max: int | None = None,
                   skip_modes=(), return_profile: bool = False):
    """Eigenvalue-ratio rank estimate per mode on the sieve-projected tensor.

    The ratio search runs over k up to ``min(I_m, prod I_other) / 2`` (nearest
    integer), further capped one below the structural rank of the projected
    matricization so the trailing exactly-zero eigenvalues never enter a
    denominator.  A floor of ``1e-12 * lambda_1`` guards the ratio on
    exactly-low-rank input, making the noiseless case select the true rank.
    """
    Y = np.asarray(Y, dtype=float)
    designs = _normalize_designs(designs, Y.ndim)
    _check_design_shapes(Y, designs)
    compressed = _compress(Y, designs)
    if not np.any(compressed):
        raise ValueError("projected tensor is zero; cannot estimate ranks")

    ranks = []
    profiles = []
    for m in range(Y.ndim):
        if m in skip_modes:
            ranks.append(Y.shape[m])
            profiles.append(np.array([]))
            continue
        d = designs[m]
        if d is not None:
            mat = matricize(compressed, m)   # already compressed on mode m
        else:
            mat = matricize(_compress(Y, designs, skip=(m,)), m)
        lam = np.clip(eigenvalues_symmetric(mat @ mat.T), 0.0, None)

        other = int(np.prod(Y.shape, dtype=np.int64)) // Y.shape[m]
        cap = _round_half_away(min(Y.shape[m], other) / 2.0)
        if k_max is not None:
            cap = min(cap, int(k_max))
        structural = min(mat.shape)
        if d is not None:
            structural = min(structural, d.rank)
        cap = max(1, min(cap, structural - 1, lam.size - 1))

        floor = 1e-12 * lam[0] if lam[0] > 0 else 1e-300
        ratios = lam[:cap] / np.maximum(lam[1:cap + 1], floor)
        ranks.append(int(np.argmax(ratios)) + 1)
        profiles.append(ratios)
    ranks = tuple(ranks)
    return (ranks, profiles) if return_profile else ranks


# ---------------------------------------------------------------------------
# fit persistence (used by the CLI)

def _write_matrix_csv(path, mat, prefix="c"):
    mat = np.atleast_2d(np.asarray(mat, dtype=float))
    header = ",".join(f"{prefix}{j + 1}" for j in range(mat.shape[1]))
    np.savetxt(path, mat, delimiter=",", header=header, comments="")


def _read_matrix_csv(path):
    return np.atleast_2d(np.loadtxt(path, delimiter=",", skiprows=1))


def save_fit(fit: StefaFit, designs, out_dir) -> None:
    """Write a fit directory: core, per-mode matrices, covariates, report."""
    os.makedirs(out_dir, exist_ok=True)
    write_tns(os.path.join(out_dir, "core.tns"), fit.core)
    basis = {}
    for m in range(fit.order):
        _write_matrix_csv(os.path.join(out_dir, f"g_loadings_mode{m + 1}.csv"),
                          fit.g_loadings[m], "g")
        _write_matrix_csv(os.path.join(out_dir, f"a_loadings_mode{m + 1}.csv"),
                          fit.a_loadings[m], "a")
        _write_matrix_csv(os.path.join(out_dir, f"gamma_mode{m + 1}.csv"),
                          fit.gamma[m], "gamma")
        if fit.sieve_coeffs[m] is not None:
            _write_matrix_csv(os.path.join(out_dir, f"sieve_coeffs_mode{m + 1}.csv"),
                              fit.sieve_coeffs[m], "b")
        d = designs[m] if designs else None
        if d is not None:
            write_covariates_csv(
                os.path.join(out_dir, f"covariates_mode{m + 1}.csv"), d.covariates)
            basis[str(m)] = {"family": d.spec.family, "degree": d.spec.degree,
                             "include_intercept": d.spec.include_intercept,
                             "domain": list(d.spec.domain)}
    report = {
        "ranks": list(fit.ranks),
        "iterations_used": fit.iterations_used,
        "subspace_change_trace": [float(x) for x in fit.subspace_change_trace],
        "converged": fit.converged,
        "identity_modes": list(fit.identity_modes),
        "flags": fit.flags,
        "diagnostics": fit.diagnostics,
        "basis": basis,
    }
    with open(os.path.join(out_dir, "report.json"), "w") as fh:
        json.dump(report, fh, indent=2)


def load_fit(fit_dir):
    """Read a fit directory back into ``(StefaFit, designs)``."""
    with open(os.path.join(fit_dir, "report.json")) as fh:
        report = json.load(fh)
    core = read_tns(os.path.join(fit_dir, "core.tns"))
    order = core.ndim
    g, a, gamma, coeffs, designs = [], [], [], [], []
    for m in range(order):
        g.append(_read_matrix_csv(os.path.join(fit_dir, f"g_loadings_mode{m + 1}.csv")))
        a.append(_read_matrix_csv(os.path.join(fit_dir, f"a_loadings_mode{m + 1}.csv")))
        gamma.append(_read_matrix_csv(os.path.join(fit_dir, f"gamma_mode{m + 1}.csv")))
        coeff_path = os.path.join(fit_dir, f"sieve_coeffs_mode{m + 1}.csv")
        coeffs.append(_read_matrix_csv(coeff_path) if os.path.exists(coeff_path) else None)
        info = report["basis"].get(str(m))
        if info is None:
            designs.append(None)
        else:
            spec = BasisSpec(family=info["family"], degree=info["degree"],
                             include_intercept=info["include_intercept"],
                             domain=tuple(info["domain"]))
            X, _ = read_covariates_csv(
                os.path.join(fit_dir, f"covariates_mode{m + 1}.csv"))
            designs.append(build_design(X, spec))
    fit = StefaFit(core=core, g_loadings=g, a_loadings=a, gamma=gamma,
                   sieve_coeffs=coeffs, ranks=tuple(report["ranks"]),
                   iterations_used=report["iterations_used"],
                   subspace_change_trace=report["subspace_change_trace"],
                   converged=report["converged"],
                   identity_modes=tuple(report["identity_modes"]),
                   flags=report["flags"], diagnostics=report["diagnostics"])
    return fit, designs
