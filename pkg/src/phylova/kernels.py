"""Per-covariate species covariance kernels and prior-precision algebra.

The species covariance of each covariate effect mixes the phylogenetic
correlation with independence through a per-covariate signal weight and a
scale. The joint prior over all covariate effects couples the per-covariate
Cholesky factors through a covariate correlation matrix; here that Cholesky
inverse is approximated by sparse factors, giving cheap quadratic forms,
traces and log-determinants for the bound.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.linalg import cho_factor, cho_solve, cholesky, solve_triangular

from .factors import SparseInvChol, build_factor, neighbor_sets
from .trees import Ordering, PhyloCorrelation, ordering as make_ordering


@dataclass(frozen=True, eq=False)
class SignalParams:
    """Per-covariate kernel parameters: scale (sd) > 0 and signal in [0, 1]."""

    scale: np.ndarray
    signal: np.ndarray
    shared_signal: bool = False

    def __post_init__(self):
        scale = np.atleast_1d(np.asarray(self.scale, dtype=np.float64))
        signal = np.atleast_1d(np.asarray(self.signal, dtype=np.float64))
        if signal.size == 1 and scale.size > 1:
            signal = np.full(scale.size, signal[0])
        object.__setattr__(self, "scale", scale)
        object.__setattr__(self, "signal", signal)
        if scale.size != signal.size:
            raise ValueError("scale and signal must have one entry per covariate")
        if np.any(scale <= 0):
            raise ValueError("scale must be positive")
        if np.any((signal < 0) | (signal > 1)):
            raise ValueError("signal must lie in [0, 1]")
        if self.shared_signal and not np.all(signal == signal[0]):
            raise ValueError("shared_signal requires equal signal entries")

    @property
    def p(self):
        return self.scale.size


def pagel_kernel(C, signal, scale, repulsion=False):
    """Entrywise accessor for scale^2 * (signal*C + (1-signal)*I).

    With repulsion=True the correlation matrix is replaced by its inverse,
    renormalized to unit diagonal, before mixing.
    """
    base = C.values if isinstance(C, PhyloCorrelation) else np.asarray(C, dtype=np.float64)
    if not 0.0 <= signal <= 1.0:
        raise ValueError("signal must lie in [0, 1]")
    if scale <= 0:
        raise ValueError("scale must be positive")
    if repulsion:
        base = repulsion_matrix(base)
    s2 = float(scale) ** 2
    sig = float(signal)

    def acc(rows, cols):
        eq = np.asarray(rows == cols, dtype=np.float64)
        return s2 * (sig * base[rows, cols] + (1.0 - sig) * eq)

    return acc


def pagel_matrix(C, signal, scale, repulsion=False):
    """Dense version of pagel_kernel."""
    base = C.values if isinstance(C, PhyloCorrelation) else np.asarray(C, dtype=np.float64)
    if repulsion:
        base = repulsion_matrix(base)
    m = base.shape[0]
    return scale**2 * (signal * base + (1.0 - signal) * np.eye(m))


def _pagel_derivative(base, scale):
    """Accessor for the derivative of the kernel with respect to signal."""
    s2 = float(scale) ** 2

    def acc(rows, cols):
        eq = np.asarray(rows == cols, dtype=np.float64)
        return s2 * (base[rows, cols] - eq)

    return acc


def repulsion_matrix(values):
    """Inverse correlation renormalized to unit diagonal."""
    values = np.asarray(values, dtype=np.float64)
    try:
        inv = cho_solve(cho_factor(values, lower=True), np.eye(values.shape[0]))
    except np.linalg.LinAlgError as exc:
        raise ValueError("correlation matrix is singular; cannot build repulsion kernel") from exc
    d = np.sqrt(np.diag(inv))
    out = inv / np.outer(d, d)
    np.fill_diagonal(out, 1.0)
    return out


# ---------------------------------------------------------------------------
# Covariate correlation matrix and its unconstrained parameterization
# ---------------------------------------------------------------------------


@dataclass(frozen=True, eq=False)
class CovariateCorrelation:
    """Correlation matrix over covariate effects with its parameter vector.

    The p(p-1)/2 unconstrained parameters fill the strict lower triangle of
    a unit-diagonal matrix whose rows are then normalized; the normalized
    rows form the Cholesky factor, so any parameter vector yields a valid
    correlation matrix and the map is invertible.
    """

    values: np.ndarray
    chol: np.ndarray
    params: np.ndarray
    diagonal: bool = False

    @property
    def p(self):
        return self.values.shape[0]


def corr_from_params(params, p, diagonal=False):
    if diagonal:
        eye = np.eye(p)
        return CovariateCorrelation(eye, eye.copy(), np.zeros(0), True)
    params = np.asarray(params, dtype=np.float64)
    if params.size != p * (p - 1) // 2:
        raise ValueError("wrong number of correlation parameters")
    L = np.zeros((p, p))
    L[0, 0] = 1.0
    pos = 0
    for i in range(1, p):
        row = params[pos : pos + i]
        pos += i
        norm = np.sqrt(1.0 + row @ row)
        L[i, :i] = row / norm
        L[i, i] = 1.0 / norm
    values = L @ L.T
    np.fill_diagonal(values, 1.0)
    return CovariateCorrelation(values, L, params.copy(), False)


def params_from_corr(values):
    """Invert corr_from_params; values must be a valid correlation matrix."""
    values = np.asarray(values, dtype=np.float64)
    p = values.shape[0]
    L = cholesky(values, lower=True)
    out = []
    for i in range(1, p):
        out.extend(L[i, :i] / L[i, i])
    return np.asarray(out)


def corr_param_grad(d_values, corr):
    """Chain a symmetric gradient on the correlation matrix to its parameters."""
    if corr.diagonal:
        return np.zeros(0)
    L, params, p = corr.chol, corr.params, corr.p
    dL = 2.0 * d_values @ L
    out = np.zeros_like(params)
    pos = 0
    for i in range(1, p):
        row = params[pos : pos + i]
        norm = np.sqrt(1.0 + row @ row)
        inner = dL[i, :i] @ row + dL[i, i]
        out[pos : pos + i] = dL[i, :i] / norm - row * (inner / norm**3)
        pos += i
    return out


# ---------------------------------------------------------------------------
# Joint prior over all covariate effects
# ---------------------------------------------------------------------------


@dataclass(frozen=True, eq=False)
class PriorFactor:
    """Sparse factorization of the joint effect prior at fixed parameters.

    One sparse inverse-Cholesky factor per covariate (consistent ordering),
    plus the inverse and log-determinant of the covariate correlation.
    All quadratic-form/trace inputs are taken in the factors' ordering
    coordinates.
    """

    factors: tuple
    signal: SignalParams
    corr: CovariateCorrelation
    corr_inv: np.ndarray
    logdet_corr: float

    @property
    def p(self):
        return len(self.factors)

    @property
    def m(self):
        return self.factors[0].n

    def log_det(self):
        """log det of the joint prior covariance."""
        return self.m * self.logdet_corr + sum(f.log_det_cov() for f in self.factors)

    def quad_form(self, a):
        """a' * Prior^{-1} * a for a (p, m) coefficient matrix."""
        a = np.asarray(a, dtype=np.float64)
        if a.shape != (self.p, self.m):
            raise ValueError(f"expected shape {(self.p, self.m)}")
        w = np.stack([f.matvec(a[k]) for k, f in enumerate(self.factors)])
        return float(np.sum(self.corr_inv * (w @ w.T)))

    def trace_with(self, row_cov, species_factor, species_diag):
        """trace of Prior^{-1} (row_cov x species_cov) for the low-rank-plus-
        diagonal species covariance."""
        row_cov = np.asarray(row_cov, dtype=np.float64)
        Ad = np.asarray(species_factor, dtype=np.float64).reshape(self.m, -1)
        D = np.asarray(species_diag, dtype=np.float64)
        if row_cov.shape != (self.p, self.p) or D.shape != (self.m,):
            raise ValueError("dimension mismatch")
        G = np.stack([f.matmat(Ad) for f in self.factors])  # (p, m, d)
        part1 = np.einsum("kjd,ljd->kl", G, G)
        supp = self.factors[0].supp
        uval = np.stack([f.uval for f in self.factors])
        Dsupp = D[supp]
        part2 = np.einsum("kjs,js,ljs->kl", uval, Dsupp, uval)
        return float(np.sum(self.corr_inv * row_cov * (part1 + part2)))


@dataclass(frozen=True, eq=False)
class PriorStructure:
    """Fixed conditioning structure reused across parameter updates.

    Neighbor sets are computed once from the correlation matrix; the Pagel
    transform is monotone in its off-diagonals, so nearest sets do not
    depend on the signal or scale parameters. Any repulsion transform must
    already be folded into the correlation matrix passed here.
    """

    C: PhyloCorrelation
    sets: "NeighborSets"

    @property
    def m(self):
        return self.sets.size.size

    def factorize(self, signal, corr, with_derivatives=False, workers=1):
        """Sparse prior factors at the given kernel parameters.

        Covariates sharing one signal value share the regression weights and
        unit-scale conditional variances (the scale cancels from the
        weights), so the per-row solves are done once and rescaled.
        """
        base = self.C.values
        p = signal.p
        factors = [None] * p
        groups = {}
        for k in range(p):
            groups.setdefault(float(signal.signal[k]), []).append(k)
        for sig, ks in groups.items():
            acc = pagel_kernel(base, sig, 1.0)
            dacc = _pagel_derivative(base, 1.0) if with_derivatives else None
            unit = build_factor(acc, self.sets, d_kernel=dacc, workers=workers)
            for k in ks:
                s2 = float(signal.scale[k]) ** 2
                factors[k] = SparseInvChol(
                    self.sets,
                    unit.wts,
                    s2 * unit.cond_var,
                    unit.d_wts,
                    None if unit.d_cond_var is None else s2 * unit.d_cond_var,
                )
        corr_inv, logdet = _corr_inverse(corr)
        return PriorFactor(tuple(factors), signal, corr, corr_inv, logdet)


def _corr_inverse(corr):
    L = corr.chol
    p = L.shape[0]
    Linv = solve_triangular(L, np.eye(p), lower=True)
    corr_inv = Linv.T @ Linv
    logdet = float(2.0 * np.sum(np.log(np.diag(L))))
    return corr_inv, logdet


def build_prior(C, order, nn, rule, signal, corr, repulsion=False, workers=1):
    """One-call prior construction: conditioning sets plus factors.

    With repulsion=True the correlation matrix is replaced by its normalized
    inverse before anything else (conditioning sets included).
    """
    if repulsion:
        C = PhyloCorrelation(repulsion_matrix(C.values), C.labels)
    sets = neighbor_sets(C, order, nn, rule)
    structure = PriorStructure(C, sets)
    return structure.factorize(signal, corr, workers=workers)


# ---------------------------------------------------------------------------
# Dense reporting quantities
# ---------------------------------------------------------------------------


def species_associations(C, signal, corr, x_i, x_i2=None, repulsion=False):
    """Between-species covariance of the linear predictor at two sites.

    Uses exact dense Cholesky factors of the per-covariate kernels; this is
    a reporting quantity, never part of the fitting loop.
    """
    x_i = np.asarray(x_i, dtype=np.float64)
    x_i2 = x_i if x_i2 is None else np.asarray(x_i2, dtype=np.float64)
    p = signal.p
    if x_i.shape != (p,) or x_i2.shape != (p,):
        raise ValueError("site covariate vectors must have one entry per covariate")
    m = C.n_species if isinstance(C, PhyloCorrelation) else C.shape[0]
    chols = []
    for k in range(p):
        Kk = pagel_matrix(C, signal.signal[k], signal.scale[k], repulsion)
        chols.append(cholesky(Kk, lower=True))
    out = np.zeros((m, m))
    for k in range(p):
        for l in range(p):
            coef = x_i[k] * x_i2[l] * corr.values[k, l]
            if coef != 0.0:
                out += coef * (chols[k] @ chols[l].T)
    return out


def lu_block_split(chol_k, chol_l, corr_kl):
    """Split a cross-covariate prior block into unit-lower and upper parts.

    The block chol_k @ chol_l.T * corr_kl factors as L1 @ U1 with
    L1 = chol_k scaled to unit diagonal and U1 carrying the diagonal.
    """
    d = np.diag(chol_k).copy()
    lower = chol_k / d[None, :]
    upper = d[:, None] * chol_l.T * corr_kl
    return lower, upper


def prior_dense(C, order, signal, corr, repulsion=False):
    """Dense joint prior covariance in ordering coordinates (oracle/report).

    Blocks (k, l) are corr[k, l] * chol(K_k) @ chol(K_l).T with the
    Cholesky factors taken in the permuted species order.
    """
    values = C.values if isinstance(C, PhyloCorrelation) else np.asarray(C)
    perm = order.perm if isinstance(order, Ordering) else np.asarray(order, dtype=np.int64)
    base = values[np.ix_(perm, perm)]
    p, m = signal.p, base.shape[0]
    chols = [
        cholesky(pagel_matrix(base, signal.signal[k], signal.scale[k], repulsion), lower=True)
        for k in range(p)
    ]
    out = np.zeros((p * m, p * m))
    for k in range(p):
        for l in range(p):
            out[k * m : (k + 1) * m, l * m : (l + 1) * m] = corr.values[k, l] * (chols[k] @ chols[l].T)
    return out
