"""Sparse approximate inverse Cholesky factors of a species covariance.

Each species (in a chosen ordering) is regressed on a small conditioning set
of predecessors; stacking the regression rows gives a sparse lower-triangular
factor U with U'U approximating the inverse covariance. Full conditioning
reproduces the exact dense factorization. Rows are computed independently
with a fixed per-row arithmetic order, so results are bitwise identical for
any worker count.
"""

from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from .trees import Ordering, PhyloCorrelation

MAX_NEIGHBORS = 64


class ConditioningError(RuntimeError):
    """A conditioning set produced a numerically singular regression."""


@dataclass(frozen=True, eq=False)
class NeighborSets:
    """Per-position conditioning sets under an ordering.

    nbr[j, :size[j]] holds the conditioning positions of position j
    (ascending, all < j); the remainder of each row is -1 padding.
    """

    perm: np.ndarray
    nbr: np.ndarray
    size: np.ndarray
    rule: str
    nn: int

    @property
    def n(self):
        return self.size.size

    def sets(self):
        return [self.nbr[j, : self.size[j]] for j in range(self.n)]


def neighbor_sets(C, order, nn, rule="nngp"):
    """Conditioning sets from a correlation matrix under an ordering.

    rule="nngp" picks, for each position, the predecessors with the largest
    correlation (ties broken by earlier position); rule="band" picks the
    immediately preceding positions regardless of correlation.
    """
    values = C.values if isinstance(C, PhyloCorrelation) else np.asarray(C)
    perm = order.perm if isinstance(order, Ordering) else np.asarray(order, dtype=np.int64)
    m = values.shape[0]
    if not 1 <= nn <= m - 1:
        raise ValueError(f"nn must be in [1, {m - 1}], got {nn}")
    if nn > MAX_NEIGHBORS and nn != m - 1:
        # nn == m-1 (full conditioning) stays available for exactness
        # diagnostics; truncated rules are capped to keep per-row solves small.
        raise ValueError(f"nn={nn} exceeds the supported maximum {MAX_NEIGHBORS}")
    if rule not in ("nngp", "band"):
        raise ValueError(f"unknown rule {rule!r}")
    Cp = values[np.ix_(perm, perm)]
    nbr = np.full((m, nn), -1, dtype=np.int64)
    size = np.minimum(np.arange(m), nn).astype(np.int64)
    for j in range(1, m):
        s = size[j]
        if rule == "band":
            chosen = np.arange(j - s, j)
        else:
            # argsort of negated similarity is stable, so equal similarities
            # keep ascending position order.
            chosen = np.argsort(-Cp[j, :j], kind="stable")[:s]
            chosen.sort()
        nbr[j, :s] = chosen
    return NeighborSets(perm, nbr, size, rule, nn)


@dataclass(frozen=True, eq=False)
class SparseInvChol:
    """Row-sparse factor U = F^{-1/2}(I - B) in ordering coordinates.

    wts[j] holds the regression weights of position j on its conditioning
    set (padding zero); cond_var[j] the positive conditional variance.
    supp/uval give the nonzero columns and values of each row of U; padding
    columns point at the row itself with value zero so gathers stay in range.
    Optional d_* arrays carry derivatives with respect to a scalar kernel
    parameter (same sparsity).
    """

    sets: NeighborSets
    wts: np.ndarray
    cond_var: np.ndarray
    d_wts: np.ndarray = None
    d_cond_var: np.ndarray = None
    supp: np.ndarray = field(init=False)
    uval: np.ndarray = field(init=False)

    def __post_init__(self):
        if np.any(self.cond_var <= 0):
            j = int(np.argmax(self.cond_var <= 0))
            raise ConditioningError(f"non-positive conditional variance at position {j}")
        m, nn = self.wts.shape
        supp = np.where(self.sets.nbr >= 0, self.sets.nbr, np.arange(m)[:, None])
        supp = np.concatenate([supp, np.arange(m)[:, None]], axis=1)
        inv_sqrt = 1.0 / np.sqrt(self.cond_var)
        uval = np.concatenate([-self.wts * inv_sqrt[:, None], inv_sqrt[:, None]], axis=1)
        object.__setattr__(self, "supp", supp)
        object.__setattr__(self, "uval", uval)

    @property
    def n(self):
        return self.cond_var.size

    def matvec(self, v):
        """U @ v for v in ordering coordinates."""
        v = np.asarray(v, dtype=np.float64)
        if v.shape != (self.n,):
            raise ValueError(f"expected a vector of length {self.n}")
        return np.einsum("js,js->j", self.uval, v[self.supp])

    def rmatvec(self, v):
        """U.T @ v for v in ordering coordinates."""
        v = np.asarray(v, dtype=np.float64)
        if v.shape != (self.n,):
            raise ValueError(f"expected a vector of length {self.n}")
        out = np.zeros(self.n)
        np.add.at(out, self.supp.ravel(), (self.uval * v[:, None]).ravel())
        return out

    def matmat(self, M):
        """U @ M for a (n, k) matrix."""
        M = np.asarray(M, dtype=np.float64)
        return np.einsum("js,jsk->jk", self.uval, M[self.supp])

    def rmatmat(self, M):
        """U.T @ M for a (n, k) matrix."""
        M = np.asarray(M, dtype=np.float64)
        out = np.zeros_like(M)
        np.add.at(out, self.supp.ravel(), (self.uval[:, :, None] * M[:, None, :]).reshape(-1, M.shape[1]))
        return out

    def log_det_cov(self):
        """log-determinant of the implied (approximate) covariance."""
        return float(np.sum(np.log(self.cond_var)))

    def to_dense(self):
        """Dense U in ordering coordinates (tests and diagnostics only)."""
        U = np.zeros((self.n, self.n))
        rows = np.repeat(np.arange(self.n), self.supp.shape[1])
        # Padding entries alias the diagonal with value zero; add instead of
        # assign so duplicates are safe.
        np.add.at(U, (rows, self.supp.ravel()), self.uval.ravel())
        return U


def _as_accessor(kernel):
    """Entrywise accessor acc(rows, cols) -> K[rows, cols] with broadcasting."""
    if callable(kernel):
        return kernel
    K = np.asarray(kernel, dtype=np.float64)
    return lambda rows, cols: K[rows, cols]


def _forward_sub(L, rhs):
    # Solves L y = rhs for batched lower-triangular L: (b, s, s) x (b, s).
    s = rhs.shape[1]
    y = np.empty_like(rhs)
    for i in range(s):
        acc = rhs[:, i]
        if i:
            acc = acc - np.einsum("bc,bc->b", L[:, i, :i], y[:, :i])
        y[:, i] = acc / L[:, i, i]
    return y


def _backward_sub(L, rhs):
    # Solves L.T x = rhs for batched lower-triangular L.
    s = rhs.shape[1]
    x = np.empty_like(rhs)
    for i in range(s - 1, -1, -1):
        acc = rhs[:, i]
        if i < s - 1:
            acc = acc - np.einsum("bc,bc->b", L[:, i + 1 :, i], x[:, i + 1 :])
        x[:, i] = acc / L[:, i, i]
    return x


def _cho_solve_batch(L, rhs):
    if L.shape[0] == 1:
        # Single large system: LAPACK triangular solves beat the python loop.
        from scipy.linalg import solve_triangular

        y = solve_triangular(L[0], rhs[0], lower=True)
        return solve_triangular(L[0], y, lower=True, trans=1)[None, :]
    return _backward_sub(L, _forward_sub(L, rhs))


def _build_rows(kernel, d_kernel, sets, rows, size, wts, cond, d_wts, d_cond):
    """Fill factor rows that share one conditioning-set size (fixed order)."""
    if size == 0:
        cond[rows] = kernel(rows, rows)
        if d_cond is not None:
            d_cond[rows] = d_kernel(rows, rows)
        return
    A = sets.nbr[rows, :size]
    # Gather blocks: KAA[b, i, j] = K[A[b, i], A[b, j]], KjA[b, i] = K[row_b, A[b, i]].
    KAA = _gather_block(kernel, A)
    KjA = _gather_cross(kernel, rows, A)
    Kjj = kernel(rows, rows)
    try:
        L = np.linalg.cholesky(KAA)
    except np.linalg.LinAlgError:
        bad = _first_non_spd(KAA)
        raise ConditioningError(
            f"conditioning set of position {int(rows[bad])} is numerically singular"
        ) from None
    b = _cho_solve_batch(L, KjA)
    f = Kjj - np.einsum("bs,bs->b", b, KjA)
    tiny = f <= 1e-12 * Kjj
    if np.any(tiny):
        j = int(rows[np.argmax(tiny)])
        raise ConditioningError(f"conditional variance collapsed at position {j}")
    wts[rows, :size] = b
    cond[rows] = f
    if d_cond is not None:
        dKAA = _gather_block(d_kernel, A)
        dKjA = _gather_cross(d_kernel, rows, A)
        dKjj = d_kernel(rows, rows)
        rhs = dKjA - np.einsum("bs,bst->bt", b, dKAA)
        d_wts[rows, :size] = _cho_solve_batch(L, rhs)
        d_cond[rows] = (
            dKjj
            - 2.0 * np.einsum("bs,bs->b", b, dKjA)
            + np.einsum("bs,bst,bt->b", b, dKAA, b)
        )


def _gather_block(acc, A):
    return acc(A[:, :, None], A[:, None, :])


def _gather_cross(acc, rows, A):
    return acc(rows[:, None], A)


def _first_non_spd(KAA):
    for i in range(KAA.shape[0]):
        try:
            np.linalg.cholesky(KAA[i])
        except np.linalg.LinAlgError:
            return i
    return 0


def build_factor(kernel, sets, d_kernel=None, workers=1):
    """Sparse approximate inverse Cholesky factor of a covariance kernel.

    kernel is a dense matrix in original coordinates or an entrywise
    accessor f(rows, cols); sets carries the ordering. When d_kernel is
    given, per-row derivatives of the weights and conditional variances
    with respect to the kernel's scalar parameter are stored alongside.
    Rows are independent; workers > 1 computes row groups concurrently
    with bitwise-identical results.
    """
    acc = _make_permuted_accessor(kernel, sets.perm)
    d_acc = _make_permuted_accessor(d_kernel, sets.perm) if d_kernel is not None else None
    m, nn = sets.nbr.shape
    wts = np.zeros((m, nn))
    cond = np.empty(m)
    d_wts = np.zeros((m, nn)) if d_acc is not None else None
    d_cond = np.empty(m) if d_acc is not None else None

    tasks = []
    for s in np.unique(sets.size):
        rows = np.flatnonzero(sets.size == s)
        if s == 0 or rows.size <= 256 or workers <= 1:
            tasks.append((int(s), rows))
        else:
            for chunk in np.array_split(rows, workers):
                if chunk.size:
                    tasks.append((int(s), chunk))

    def run(task):
        s, rows = task
        _build_rows(acc, d_acc, sets, rows, s, wts, cond, d_wts, d_cond)

    if workers > 1 and len(tasks) > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            list(pool.map(run, tasks))
    else:
        for task in tasks:
            run(task)
    return SparseInvChol(sets, wts, cond, d_wts, d_cond)


def _make_permuted_accessor(kernel, perm):
    if kernel is None:
        return None
    base = _as_accessor(kernel)
    return lambda rows, cols: base(perm[rows], perm[cols])


def approx_error(C, factor):
    """Frobenius distance of the implied precision times the permuted
    correlation matrix from the identity; zero iff the factor is exact."""
    values = C.values if isinstance(C, PhyloCorrelation) else np.asarray(C)
    if values.shape[0] != factor.n:
        raise ValueError("dimension mismatch between factor and matrix")
    perm = factor.sets.perm
    Cp = values[np.ix_(perm, perm)]
    U = factor.to_dense()
    return float(np.linalg.norm(U.T @ U @ Cp - np.eye(factor.n)))


def export_factor_csv(factor, path):
    """Diagnostic CSV of per-row conditioning sets, weights and variances."""
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("position,neighbors,weights,cond_var\n")
        for j in range(factor.n):
            s = factor.sets.size[j]
            nbrs = ";".join(str(int(x)) for x in factor.sets.nbr[j, :s])
            w = ";".join(f"{x:.6g}" for x in factor.wts[j, :s])
            fh.write(f"{j},{nbrs},{w},{factor.cond_var[j]:.6g}\n")
