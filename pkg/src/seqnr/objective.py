"""Training losses and evaluation metrics.

Losses return :class:`~seqnr.autodiff.Tensor` values (one entry per sequence
when inputs carry a leading batch axis); metrics work on plain arrays of
shape ``(..., F, 3, P)`` and return one value per sequence.
"""

from dataclasses import dataclass
from typing import Optional

import numpy as np

from seqnr import autodiff as ad
from seqnr import gpa, linalg
from seqnr.errors import ContractViolation, DomainError

DEFAULT_ALPHA = 9.0
DEFAULT_BETA = 0.1

NO_FLIP = "off"
BEST_OF_FLIP = "best_of_flip"


@dataclass(frozen=True)
class LossWeights:
    alpha: float = DEFAULT_ALPHA
    beta: float = DEFAULT_BETA

    def __post_init__(self):
        if self.alpha < 0 or self.beta < 0:
            raise ContractViolation("loss weights must be non-negative")


@dataclass
class LossBreakdown:
    """Loss terms as tensors; ``total`` is exactly the weighted sum."""

    total: ad.Tensor
    reprojection: ad.Tensor
    nuclear: ad.Tensor
    mean_shape: Optional[ad.Tensor] = None

    def as_floats(self):
        out = {
            "total": float(np.mean(self.total.value)),
            "reprojection": float(np.mean(self.reprojection.value)),
            "nuclear": float(np.mean(self.nuclear.value)),
        }
        if self.mean_shape is not None:
            out["mean_shape"] = float(np.mean(self.mean_shape.value))
        return out


def _stacked(s):
    return ad.reshape(s, s.shape[:-2] + (s.shape[-2] * s.shape[-1],))


def reprojection_loss(w, r, s):
    """Unsquared Frobenius norm of ``W - Pi R S`` per sequence."""
    w, r, s = ad._lift(w), ad._lift(r), ad._lift(s)
    if w.shape[:-2] != s.shape[:-2] or w.shape[-1] != s.shape[-1] or w.shape[-2] != 2 \
            or r.shape[:-2] != s.shape[:-2] or s.shape[-2] != 3:
        raise ContractViolation(
            f"reprojection_loss: W {w.shape}, R {r.shape}, S {s.shape} are inconsistent")
    projected = r[..., :2, :] @ s
    return ad.frobenius_norm(w - projected, axis=(-3, -2, -1))


def nuclear_loss(s_tilde, tolerance=gpa.DEFAULT_TOLERANCE,
                 max_iterations=gpa.DEFAULT_MAX_ITERATIONS):
    """Nuclear norm of the aligned, stacked ``(F, 3P)`` shape matrix."""
    s_tilde = ad._lift(s_tilde)
    if s_tilde.shape[-3] < 2:
        raise ContractViolation("nuclear_loss needs at least two frames")
    aligned, _ = gpa.gpa_node(s_tilde, tolerance, max_iterations)
    return ad.nuclear_norm_node(_stacked(aligned))


def unaligned_nuclear_loss(s_tilde):
    s_tilde = ad._lift(s_tilde)
    return ad.nuclear_norm_node(_stacked(s_tilde))


def _polar_trace_grad(m):
    """Value and gradient of ``trace(R)`` for the Kabsch rotation ``R`` of ``m``.

    ``R = U' V.T`` with ``U' = U D`` and signed singular values ``s' = s D``;
    ``d trace(R) = <dM, U' G V.T>`` with
    ``G_ij = ((V.T U')_ji - (V.T U')_ij) / (s'_i + s'_j)``.
    """
    res = linalg.svd(m)
    u, s, v = res.U.copy(), res.sigma.copy(), res.V
    det = np.linalg.det(u @ np.swapaxes(v, -1, -2))
    flip = np.where(det < 0.0, -1.0, 1.0)
    u[..., :, 2] *= flip[..., None]
    s[..., 2] *= flip
    rot = u @ np.swapaxes(v, -1, -2)
    b = np.swapaxes(v, -1, -2) @ u
    denom = s[..., :, None] + s[..., None, :]
    denom = np.where(np.abs(denom) < 1e-12, np.inf, denom)
    g = (np.swapaxes(b, -1, -2) - b) / denom
    return np.trace(rot, axis1=-2, axis2=-1), u @ g @ np.swapaxes(v, -1, -2)


def mean_shape_loss(s):
    """``sum_i |(trace(R_i) - 1) / 2|`` with ``R_i`` the Procrustes rotation of
    frame ``i`` onto the frame mean.

    The backward differentiates through the rotation solve (derivative of the
    orthogonal polar factor), since with frozen rotations the value carries
    no dependence on the shapes.
    """
    s = ad._lift(s)
    sv = s.value
    if sv.shape[-1] < 3:
        raise ContractViolation("mean_shape_loss needs P >= 3")
    mean = sv.mean(axis=-3)
    # raises DegenerateConfigurationError on rank-deficient frames
    linalg.procrustes_rotation(sv, mean[..., None, :, :])
    m = mean[..., None, :, :] @ np.swapaxes(sv, -1, -2)
    trace, dtrace = _polar_trace_grad(m)
    cos_angle = (trace - 1.0) / 2.0
    value = np.abs(cos_angle).sum(axis=-1)
    n_frames = sv.shape[-3]

    def vjp(g):
        gamma = (np.asarray(g)[..., None, None, None] * 0.5
                 * np.sign(cos_angle)[..., None, None] * dtrace)
        grad = np.swapaxes(gamma, -1, -2) @ mean[..., None, :, :]
        grad = grad + ((gamma @ sv).sum(axis=-3) / n_frames)[..., None, :, :]
        return (grad,)

    return ad.custom_op("mean_shape_loss", value, (s,), vjp)


def total_loss(w, r, s_tilde, weights=LossWeights(), tolerance=gpa.DEFAULT_TOLERANCE,
               max_iterations=gpa.DEFAULT_MAX_ITERATIONS, align=True, use_nuclear=True,
               use_mean_shape=False):
    """``alpha * ||W - Pi R S~|| + beta * ||GPA(S~)||_*`` with ablation switches.

    ``align=False`` applies the nuclear norm to ``S~`` directly;
    ``use_nuclear=False`` drops the term without computing it;
    ``use_mean_shape=True`` puts the mean-shape loss in the ``beta`` slot
    instead of the nuclear term.
    """
    reproj = reprojection_loss(w, r, s_tilde)
    zero = ad.Tensor(np.zeros(reproj.shape))
    nuclear = zero
    mean_term = None
    total = ad.scale(reproj, weights.alpha)
    if use_mean_shape:
        mean_term = mean_shape_loss(s_tilde)
        total = total + ad.scale(mean_term, weights.beta)
    elif use_nuclear:
        nuclear = nuclear_loss(s_tilde, tolerance, max_iterations) if align \
            else unaligned_nuclear_loss(s_tilde)
        total = total + ad.scale(nuclear, weights.beta)
    return LossBreakdown(total=total, reprojection=reproj, nuclear=nuclear, mean_shape=mean_term)


# -- metrics ----------------------------------------------------------------


def _check_pair(s, truth):
    s = np.asarray(s, dtype=np.float64)
    truth = np.asarray(truth, dtype=np.float64)
    if s.shape != truth.shape:
        raise ContractViolation(f"shape mismatch: {s.shape} vs {truth.shape}")
    if s.ndim < 3:
        raise ContractViolation(f"expected (..., F, 3, P) shapes, got {s.shape}")
    return s, truth


def mpjpe(s, truth):
    """Mean per-joint position error, averaged over frames."""
    s, truth = _check_pair(s, truth)
    per_joint = np.sqrt(np.sum((s - truth) ** 2, axis=-2))
    return per_joint.mean(axis=-1).mean(axis=-1)


def e3d(s, truth):
    """Relative Frobenius reconstruction error per frame, averaged over frames."""
    s, truth = _check_pair(s, truth)
    ref = np.sqrt(np.sum(truth ** 2, axis=(-2, -1)))
    if np.any(ref == 0.0):
        raise DomainError("e3d is undefined for an all-zero ground-truth frame")
    err = np.sqrt(np.sum((s - truth) ** 2, axis=(-2, -1)))
    return (err / ref).mean(axis=-1)


def _pairwise_distances(frames):
    diff = frames[..., :, :, None] - frames[..., :, None, :]
    return np.sqrt(np.sum(diff ** 2, axis=-3))


def stress(s, truth):
    """``sum_{j<k} | |S_j - S_k| - |S*_j - S*_k| | / (P (P - 1))`` averaged over frames."""
    s, truth = _check_pair(s, truth)
    n_points = s.shape[-1]
    if n_points < 2:
        raise ContractViolation("stress needs at least two points")
    j, k = np.triu_indices(n_points, 1)
    d = _pairwise_distances(s)[..., j, k]
    d_star = _pairwise_distances(truth)[..., j, k]
    per_frame = np.abs(d - d_star).sum(axis=-1) / (n_points * (n_points - 1))
    return per_frame.mean(axis=-1)


def flip_depth(s):
    out = np.array(s, dtype=np.float64)
    out[..., 2, :] *= -1.0
    return out


def evaluate(s, truth, flip_mode=NO_FLIP):
    """MPJPE, Stress and e3D for one sequence ``(F, 3, P)``.

    With ``flip_mode="best_of_flip"`` the depth-negated prediction is scored
    too and the variant with the lower MPJPE is reported.
    """
    if flip_mode not in (NO_FLIP, BEST_OF_FLIP):
        raise ContractViolation(f"unknown flip mode {flip_mode!r}")
    s, truth = _check_pair(s, truth)
    report = {"mpjpe": float(mpjpe(s, truth)), "stress": float(stress(s, truth)),
              "e3d": float(e3d(s, truth)), "flipped": False}
    if flip_mode == BEST_OF_FLIP:
        sf = flip_depth(s)
        alt = float(mpjpe(sf, truth))
        if alt < report["mpjpe"]:
            report = {"mpjpe": alt, "stress": float(stress(sf, truth)),
                      "e3d": float(e3d(sf, truth)), "flipped": True}
    return report
