"""Dense matrix kernels: Jacobi SVD, Procrustes, Rodrigues, nuclear norm.

Every function accepts a single matrix or a stack of matrices with leading
batch axes (numpy convention, matrices live in the last two axes).
"""

from dataclasses import dataclass

import numpy as np
from numba import njit

from seqnr.errors import DegenerateConfigurationError, DomainError

JACOBI_TOL = 1e-12
JACOBI_MAX_SWEEPS = 60
SUBGRAD_RANK_RTOL = 1e-10
DEGENERATE_RTOL = 1e-10
RODRIGUES_SMALL_ANGLE = 1e-8


@dataclass(frozen=True)
class SvdResult:
    """Thin SVD ``a = U @ diag(sigma) @ V.T`` with ``k = min(m, n)``."""

    U: np.ndarray
    sigma: np.ndarray
    V: np.ndarray

    def reconstruct(self):
        return (self.U * self.sigma[..., None, :]) @ np.swapaxes(self.V, -1, -2)


@njit(cache=True)
def _one_sided_jacobi(a, tol, max_sweeps):
    # Hestenes: orthogonalise the columns of a (m >= n) by plane rotations.
    m, n = a.shape
    w = a.copy()
    v = np.eye(n)
    for _ in range(max_sweeps):
        rotated = False
        for p in range(n - 1):
            for q in range(p + 1, n):
                alpha = 0.0
                beta = 0.0
                gamma = 0.0
                for i in range(m):
                    alpha += w[i, p] * w[i, p]
                    beta += w[i, q] * w[i, q]
                    gamma += w[i, p] * w[i, q]
                if gamma == 0.0 or abs(gamma) <= tol * np.sqrt(alpha * beta):
                    continue
                rotated = True
                zeta = (beta - alpha) / (2.0 * gamma)
                if zeta >= 0.0:
                    t = 1.0 / (zeta + np.sqrt(1.0 + zeta * zeta))
                else:
                    t = -1.0 / (-zeta + np.sqrt(1.0 + zeta * zeta))
                c = 1.0 / np.sqrt(1.0 + t * t)
                s = c * t
                for i in range(m):
                    wp = w[i, p]
                    wq = w[i, q]
                    w[i, p] = c * wp - s * wq
                    w[i, q] = s * wp + c * wq
                for i in range(n):
                    vp = v[i, p]
                    vq = v[i, q]
                    v[i, p] = c * vp - s * vq
                    v[i, q] = s * vp + c * vq
        if not rotated:
            break
    return w, v


@njit(cache=True)
def _complete_column(u, j, m):
    # Replace column j of u by the standard basis vector with the largest
    # component outside span(u[:, :j]), orthonormalised twice.
    best = -1.0
    best_vec = np.zeros(m)
    for k in range(m):
        r = np.zeros(m)
        r[k] = 1.0
        for _ in range(2):
            for col in range(j):
                d = 0.0
                for i in range(m):
                    d += u[i, col] * r[i]
                for i in range(m):
                    r[i] -= d * u[i, col]
        nr = 0.0
        for i in range(m):
            nr += r[i] * r[i]
        if nr > best:
            best = nr
            best_vec = r.copy()
    nb = np.sqrt(best)
    for i in range(m):
        u[i, j] = best_vec[i] / nb


@njit(cache=True)
def _svd_tall(a, tol, max_sweeps):
    m, n = a.shape
    w, v = _one_sided_jacobi(a, tol, max_sweeps)
    sig = np.zeros(n)
    for j in range(n):
        acc = 0.0
        for i in range(m):
            acc += w[i, j] * w[i, j]
        sig[j] = np.sqrt(acc)
    order = np.argsort(-sig, kind="mergesort")
    s_sorted = sig[order]
    u = np.zeros((m, n))
    v_sorted = np.zeros((n, n))
    smax = s_sorted[0] if n > 0 else 0.0
    cutoff = smax * 4.0 * max(m, n) * 2.220446049250313e-16
    for jj in range(n):
        j = order[jj]
        for i in range(n):
            v_sorted[i, jj] = v[i, j]
        if s_sorted[jj] > cutoff and s_sorted[jj] > 0.0:
            for i in range(m):
                u[i, jj] = w[i, j] / s_sorted[jj]
        else:
            _complete_column(u, jj, m)
    # sign convention: largest-magnitude entry of every U column is positive
    for jj in range(n):
        imax = 0
        vmax = 0.0
        for i in range(m):
            if abs(u[i, jj]) > vmax:
                vmax = abs(u[i, jj])
                imax = i
        if u[imax, jj] < 0.0:
            for i in range(m):
                u[i, jj] = -u[i, jj]
            for i in range(n):
                v_sorted[i, jj] = -v_sorted[i, jj]
    return u, s_sorted, v_sorted


@njit(cache=True)
def _svd_batch(a, tol, max_sweeps):
    b, m, n = a.shape
    k = min(m, n)
    us = np.zeros((b, m, k))
    ss = np.zeros((b, k))
    vs = np.zeros((b, n, k))
    for idx in range(b):
        if m >= n:
            u, s, v = _svd_tall(a[idx], tol, max_sweeps)
            us[idx] = u
            vs[idx] = v
        else:
            # a.T = U' S V'^T  =>  a = V' S U'^T; U = V', V = U'
            u2, s, v2 = _svd_tall(a[idx].T.copy(), tol, max_sweeps)
            # re-impose the sign convention on the new U columns
            for j in range(k):
                imax = 0
                vmax = 0.0
                for i in range(m):
                    if abs(v2[i, j]) > vmax:
                        vmax = abs(v2[i, j])
                        imax = i
                if v2[imax, j] < 0.0:
                    for i in range(m):
                        v2[i, j] = -v2[i, j]
                    for i in range(n):
                        u2[i, j] = -u2[i, j]
            us[idx] = v2
            vs[idx] = u2
        ss[idx] = s
    return us, ss, vs


def _as_float_array(a):
    a = np.asarray(a, dtype=np.float64)
    if a.ndim < 2:
        raise DomainError(f"expected a matrix, got shape {a.shape}")
    if not np.all(np.isfinite(a)):
        raise DomainError("matrix contains non-finite entries")
    return a


def svd(a):
    """Thin singular value decomposition by one-sided cyclic Jacobi.

    Deterministic for a fixed input; singular values are returned in
    non-increasing order and the largest-magnitude entry of every column of
    ``U`` is positive.
    """
    a = _as_float_array(a)
    m, n = a.shape[-2:]
    if min(m, n) < 1:
        raise DomainError(f"empty matrix of shape {a.shape}")
    batch = a.shape[:-2]
    flat = np.ascontiguousarray(a.reshape((-1, m, n)))
    u, s, v = _svd_batch(flat, JACOBI_TOL, JACOBI_MAX_SWEEPS)
    k = min(m, n)
    return SvdResult(
        U=u.reshape(batch + (m, k)),
        sigma=s.reshape(batch + (k,)),
        V=v.reshape(batch + (n, k)),
    )


def procrustes_rotation(source, target):
    """Rotation ``R`` in SO(3) minimising ``||R @ source - target||_F``.

    ``source`` and ``target`` are ``(..., 3, P)`` and broadcast against each
    other. No translation or scaling is applied. Raises
    :class:`DegenerateConfigurationError` when ``target @ source.T`` has rank
    below two; ``err.frame`` is the flat batch index of the first offender.
    """
    source = np.asarray(source, dtype=np.float64)
    target = np.asarray(target, dtype=np.float64)
    if source.shape[-2] != 3 or target.shape[-2] != 3:
        raise DomainError("procrustes_rotation expects 3 x P point sets")
    m = target @ np.swapaxes(source, -1, -2)
    res = svd(m)
    sig = res.sigma
    bad = ~(sig[..., 1] > DEGENERATE_RTOL * sig[..., 0])
    if np.any(bad):
        first = int(np.flatnonzero(bad.reshape(-1))[0])
        raise DegenerateConfigurationError(
            f"rank of target @ source.T is below 2 (index {first}); "
            "rotation is not unique",
            frame=first,
        )
    u, v = res.U, res.V
    det = np.linalg.det(u @ np.swapaxes(v, -1, -2))
    u = u.copy()
    u[..., :, 2] *= np.where(det < 0.0, -1.0, 1.0)[..., None]
    return u @ np.swapaxes(v, -1, -2)


def cross_matrix(v):
    """Skew-symmetric ``[v]_x`` for ``v`` of shape ``(..., 3)``."""
    v = np.asarray(v, dtype=np.float64)
    k = np.zeros(v.shape[:-1] + (3, 3))
    k[..., 0, 1] = -v[..., 2]
    k[..., 0, 2] = v[..., 1]
    k[..., 1, 0] = v[..., 2]
    k[..., 1, 2] = -v[..., 0]
    k[..., 2, 0] = -v[..., 1]
    k[..., 2, 1] = v[..., 0]
    return k


def rodrigues(axis_angle):
    """Rotation matrix from an axis-angle vector (batched over leading axes)."""
    v = np.asarray(axis_angle, dtype=np.float64)
    if not np.all(np.isfinite(v)):
        raise DomainError("axis-angle vector contains non-finite entries")
    theta = np.linalg.norm(v, axis=-1)
    small = theta < RODRIGUES_SMALL_ANGLE
    safe = np.where(small, 1.0, theta)
    k_raw = cross_matrix(v)
    k2 = k_raw @ k_raw
    a = np.where(small, 1.0, np.sin(safe) / safe)
    b = np.where(small, 0.5, (1.0 - np.cos(safe)) / (safe * safe))
    return np.eye(3) + a[..., None, None] * k_raw + b[..., None, None] * k2


def rotation_angle(r):
    """Angle of a rotation matrix from its trace, in ``[0, pi]``."""
    tr = np.trace(r, axis1=-2, axis2=-1)
    return np.arccos(np.clip((tr - 1.0) / 2.0, -1.0, 1.0))


def nuclear_norm(a):
    """Sum of singular values."""
    return svd(a).sigma.sum(axis=-1)


def nuclear_norm_subgrad(a, rtol=SUBGRAD_RANK_RTOL):
    """``U @ V.T`` restricted to singular values above ``rtol * sigma_max``."""
    res = svd(a)
    keep = res.sigma > rtol * res.sigma[..., :1]
    u = res.U * keep[..., None, :]
    return u @ np.swapaxes(res.V, -1, -2)
