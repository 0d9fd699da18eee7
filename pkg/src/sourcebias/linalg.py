"""Small dense linear algebra for diagonal-plus-low-rank covariance matrices.

Everything here works on plain ``numpy`` arrays. :class:`SymMatrix` is a thin,
read-only wrapper used where symmetry is part of the contract; it converts to
an array through ``np.asarray`` so it can be passed anywhere an array is
expected.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass

import numpy as np
import scipy.linalg as sla

from .errors import NotSpd, SingularBlock, SingularUpdate, ValidationError

# Singularity threshold, relative to the scale of the matrix being factorized.
PIVOT_TOL = 1e-12
# Largest tolerated asymmetry (relative) before a matrix is rejected as non-symmetric.
SYMMETRY_TOL = 1e-9


class SymMatrix:
    """Dense symmetric matrix, symmetrized on construction.

    The constructor averages ``m`` with its transpose and records the largest
    asymmetry it removed. Inputs whose asymmetry exceeds ``SYMMETRY_TOL``
    (relative to ``max(1, max|m|)``) are rejected.
    """

    __slots__ = ("entries", "max_asymmetry")

    def __init__(self, m, *, tol: float = SYMMETRY_TOL):
        if isinstance(m, SymMatrix):
            m = m.entries
        a = np.array(m, dtype=float, ndmin=2)
        if a.ndim != 2 or a.shape[0] != a.shape[1] or a.shape[0] < 1:
            raise ValidationError([("NOT_SQUARE", f"expected a non-empty square matrix, got shape {a.shape}")])
        asym = float(np.max(np.abs(a - a.T)))
        scale = max(1.0, float(np.max(np.abs(a))))
        if asym > tol * scale:
            raise ValidationError([("NOT_SYMMETRIC", f"max asymmetry {asym:.3g} exceeds tolerance")])
        a = 0.5 * (a + a.T)
        a.setflags(write=False)
        object.__setattr__(self, "entries", a)
        object.__setattr__(self, "max_asymmetry", asym)

    def __setattr__(self, name, value):
        raise AttributeError("SymMatrix is immutable")

    @property
    def dim(self) -> int:
        return self.entries.shape[0]

    @property
    def shape(self):
        return self.entries.shape

    def __array__(self, dtype=None, copy=None):
        if dtype is None:
            return self.entries
        return self.entries.astype(dtype)

    def __matmul__(self, other):
        return self.entries @ np.asarray(other)

    def __rmatmul__(self, other):
        return np.asarray(other) @ self.entries

    def __getitem__(self, idx):
        return self.entries[idx]

    def __eq__(self, other):
        return isinstance(other, SymMatrix) and np.array_equal(self.entries, other.entries)

    def __hash__(self):
        return hash(self.entries.tobytes())

    def __repr__(self):
        return f"SymMatrix({self.entries.tolist()!r})"


@dataclass(frozen=True)
class RankUpdate:
    """``base + left @ middle @ right.T`` with ``middle`` defaulting to the identity."""

    base: SymMatrix
    left_vectors: np.ndarray
    right_vectors: np.ndarray
    middle: SymMatrix | None = None

    def __post_init__(self):
        left = np.atleast_2d(np.asarray(self.left_vectors, dtype=float))
        right = np.atleast_2d(np.asarray(self.right_vectors, dtype=float))
        if left.shape[0] != self.base.dim:
            left, right = left.T, right.T
        if left.shape != right.shape:
            raise ValidationError([("BAD_SHAPE", "left and right vectors must have the same shape")])
        if left.shape[1] > self.base.dim:
            raise ValidationError([("BAD_RANK", "update rank exceeds dimension")])
        object.__setattr__(self, "left_vectors", left)
        object.__setattr__(self, "right_vectors", right)

    @property
    def rank(self) -> int:
        return self.left_vectors.shape[1]

    def dense(self) -> np.ndarray:
        mid = np.eye(self.rank) if self.middle is None else np.asarray(self.middle)
        return np.asarray(self.base) + self.left_vectors @ mid @ self.right_vectors.T

    def inverse(self, base_inverse=None) -> np.ndarray:
        """Invert through the Woodbury identity, given (or computing) the base inverse."""
        if base_inverse is None:
            base_inverse = dense_inverse(self.base)
        mid = np.eye(self.rank) if self.middle is None else np.asarray(self.middle)
        mid_inv = _checked_inverse(mid, SingularUpdate)
        return woodbury_inverse(base_inverse, self.left_vectors, mid_inv, self.right_vectors)


def _lu_checked(m: np.ndarray, exc):
    m = np.asarray(m, dtype=float)
    scale = float(np.max(np.abs(m))) if m.size else 0.0
    if scale == 0.0:
        raise exc("matrix is identically zero")
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", sla.LinAlgWarning)
        lu, piv = sla.lu_factor(m)
    pivots = np.abs(np.diag(lu))
    if pivots.min() <= PIVOT_TOL * scale:
        raise exc(f"pivot {pivots.min():.3g} below threshold (scale {scale:.3g})")
    return lu, piv


def checked_solve(m, rhs, exc=SingularBlock) -> np.ndarray:
    """Solve ``m @ x = rhs`` by partially pivoted LU, raising ``exc`` on a tiny pivot."""
    return sla.lu_solve(_lu_checked(m, exc), np.asarray(rhs, dtype=float))


def _checked_inverse(m, exc) -> np.ndarray:
    m = np.asarray(m, dtype=float)
    return checked_solve(m, np.eye(m.shape[0]), exc)


def dense_inverse(m) -> np.ndarray:
    """Plain LU inverse with the package's singularity threshold."""
    return _checked_inverse(m, SingularBlock)


def sherman_morrison_inverse(g_inverse, x, y) -> np.ndarray:
    """Inverse of ``G + x y^T`` given ``G^{-1}``.

    Raises
    ------
    SingularUpdate
        If ``|1 + y^T G^{-1} x| <= PIVOT_TOL``, in which case the update is singular.
    """
    g_inv = np.asarray(g_inverse, dtype=float)
    x = np.asarray(x, dtype=float).ravel()
    y = np.asarray(y, dtype=float).ravel()
    gx = g_inv @ x
    yg = y @ g_inv
    denom = 1.0 + y @ gx
    if abs(denom) <= PIVOT_TOL:
        raise SingularUpdate(f"1 + y'G^-1 x = {denom:.3g}")
    return g_inv - np.outer(gx, yg) / denom


def woodbury_inverse(g_inverse, u, middle_inverse, v) -> np.ndarray:
    """Inverse of ``G + u C v^T`` given ``G^{-1}`` and ``C^{-1}``.

    ``u`` and ``v`` are ``dim x r``; the only matrix factorized is the
    ``r x r`` capacitance ``C^{-1} + v^T G^{-1} u``.
    """
    g_inv = np.asarray(g_inverse, dtype=float)
    u = np.asarray(u, dtype=float).reshape(g_inv.shape[0], -1)
    v = np.asarray(v, dtype=float).reshape(g_inv.shape[0], -1)
    c_inv = np.atleast_2d(np.asarray(middle_inverse, dtype=float))
    if u.shape[1] == 0:
        return g_inv.copy()
    gu = g_inv @ u
    vg = v.T @ g_inv
    capacitance = c_inv + v.T @ gu
    return g_inv - gu @ checked_solve(capacitance, vg, SingularUpdate)


def block_inverse(a, b, c, d) -> np.ndarray:
    """Inverse of ``[[A, B], [C, D]]`` through the Schur complement of ``A``."""
    a = np.atleast_2d(np.asarray(a, dtype=float))
    d = np.atleast_2d(np.asarray(d, dtype=float))
    b = np.asarray(b, dtype=float).reshape(a.shape[0], d.shape[0])
    c = np.asarray(c, dtype=float).reshape(d.shape[0], a.shape[0])
    a_inv = _checked_inverse(a, SingularBlock)
    schur = d - c @ a_inv @ b
    s_inv = _checked_inverse(schur, SingularBlock)
    a_inv_b = a_inv @ b
    c_a_inv = c @ a_inv
    top_left = a_inv + a_inv_b @ s_inv @ c_a_inv
    top_right = -a_inv_b @ s_inv
    bottom_left = -s_inv @ c_a_inv
    return np.block([[top_left, top_right], [bottom_left, s_inv]])


def eigvalsh(m) -> np.ndarray:
    """Eigenvalues of a symmetric matrix, ascending."""
    return sla.eigh(np.asarray(m, dtype=float), eigvals_only=True)


def spd_check(m) -> tuple[bool, float, float]:
    """Return ``(is_spd, lambda_min, lambda_max)``.

    ``is_spd`` holds when ``lambda_min > PIVOT_TOL * max(1, lambda_max)``.
    """
    lam = eigvalsh(SymMatrix(m))
    lo, hi = float(lam[0]), float(lam[-1])
    return lo > PIVOT_TOL * max(1.0, hi), lo, hi


def require_spd(m, what: str = "matrix") -> None:
    ok, lo, _ = spd_check(m)
    if not ok:
        raise NotSpd(f"{what} is not positive definite (min eigenvalue {lo:.3g})")


def weyl_report(g, x) -> dict:
    """Evaluate the rank-one eigenvalue interlacing bounds for ``G + x x^T``.

    Keys ``lower_chain`` and ``upper_chain`` are the two asserted inequality
    chains (the upper end of the second read as ``lambda_1(G) + x'x``).
    ``lambda2_bound`` reports the sharper ``lambda_1(G + xx') <= lambda_2(G) + x'x``
    variant, which is informational only and may be ``False``; it is ``None``
    when ``G`` is 1x1.
    """
    g = np.asarray(SymMatrix(g))
    x = np.asarray(x, dtype=float).ravel()
    xx = float(x @ x)
    lam_g = eigvalsh(g)[::-1]
    lam_u = eigvalsh(g + np.outer(x, x))[::-1]
    g1, gn = lam_g[0], lam_g[-1]
    u1, un = lam_u[0], lam_u[-1]
    tol = 1e-10 * (1.0 + abs(u1) + abs(g1))
    lower_chain = (gn <= un + tol) and (un <= min(g1, gn + xx) + tol)
    upper_chain = (max(g1, gn + xx) <= u1 + tol) and (u1 <= g1 + xx + tol)
    lambda2 = None if lam_g.size < 2 else bool(u1 <= lam_g[1] + xx + tol)
    return {
        "lower_chain": bool(lower_chain),
        "upper_chain": bool(upper_chain),
        "lambda2_bound": lambda2,
        "eig_g": lam_g,
        "eig_updated": lam_u,
    }


def weyl_bounds_check(g, x) -> bool:
    """True iff both interlacing chains hold for ``G + x x^T`` (see :func:`weyl_report`)."""
    r = weyl_report(g, x)
    return r["lower_chain"] and r["upper_chain"]


def kronecker(a, b) -> np.ndarray:
    return np.kron(np.atleast_2d(a), np.atleast_2d(b))


def cholesky_logdet(m) -> float:
    """``log det m`` for SPD ``m`` via its Cholesky factor."""
    try:
        l_factor = sla.cholesky(np.asarray(m, dtype=float), lower=True)
    except sla.LinAlgError as exc:
        raise NotSpd(str(exc)) from exc
    return 2.0 * float(np.sum(np.log(np.diag(l_factor))))


def cholesky_solve(m, rhs) -> np.ndarray:
    try:
        factor = sla.cho_factor(np.asarray(m, dtype=float), lower=True)
    except sla.LinAlgError as exc:
        raise NotSpd(str(exc)) from exc
    return sla.cho_solve(factor, np.asarray(rhs, dtype=float))


def inverse_residual(m, m_inv) -> float:
    """``max |m @ m_inv - I|``."""
    m = np.asarray(m)
    return float(np.max(np.abs(m @ np.asarray(m_inv) - np.eye(m.shape[0]))))
