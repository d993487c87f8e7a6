"""Generalized Procrustes alignment of a shape sequence to its mean shape.

Shapes are arrays of shape ``(F, 3, P)`` (optionally with leading batch
axes). The stacked view used for rank arguments is ``(F, 3P)`` with row ``i``
holding the x-row, y-row and z-row of frame ``i`` back to back.
"""

from dataclasses import dataclass

import numpy as np

from seqnr import autodiff as ad
from seqnr import linalg
from seqnr.errors import ContractViolation, DegenerateConfigurationError
from seqnr.instrument import CALLS

DEFAULT_TOLERANCE = 1e-8
DEFAULT_MAX_ITERATIONS = 100
STOP_GRAD_ROTATION = "stop_grad_rotation"
LAST_STEP = "last_step"


@dataclass
class GpaResult:
    aligned: np.ndarray
    rotations: np.ndarray
    iterations: object
    residual_history: object
    mean: np.ndarray


def stacked(frames):
    """``(..., F, 3, P)`` -> ``(..., F, 3P)``."""
    frames = np.asarray(frames)
    return frames.reshape(frames.shape[:-2] + (frames.shape[-2] * frames.shape[-1],))


def unstacked(rows, points):
    rows = np.asarray(rows)
    return rows.reshape(rows.shape[:-1] + (3, points))


def center(frames):
    return frames - frames.mean(axis=-1, keepdims=True)


def mean_shape(aligned):
    """Arithmetic mean over the frame axis (``-3``)."""
    aligned = np.asarray(aligned, dtype=np.float64)
    if aligned.shape[-3] < 1:
        raise ContractViolation("mean_shape needs at least one frame")
    return aligned.mean(axis=-3)


def _frame_rank_ok(frames):
    sig = linalg.svd(frames).sigma
    return sig[..., 1] > linalg.DEGENERATE_RTOL * sig[..., 0]


def _check_frames(x):
    ok = _frame_rank_ok(x)
    if not np.all(ok):
        seq, frame = np.unravel_index(int(np.flatnonzero(~ok.reshape(-1))[0]), ok.shape)
        raise DegenerateConfigurationError(
            f"frame {frame} of sequence {seq} has rank below 2", frame=int(frame),
            sequence=int(seq))


def _rotations_to_mean(x, mean):
    try:
        return linalg.procrustes_rotation(x, mean[:, None])
    except DegenerateConfigurationError as exc:
        seq, frame = np.unravel_index(exc.frame, x.shape[:2])
        raise DegenerateConfigurationError(
            f"frame {frame} of sequence {seq} cannot be aligned to the mean shape "
            "(rank below 2)", frame=int(frame), sequence=int(seq)) from None


def gpa_align(frames, tolerance=DEFAULT_TOLERANCE, max_iterations=DEFAULT_MAX_ITERATIONS):
    """Rotate every frame onto the evolving mean shape until the mean settles.

    Frames are centered first and the centroid is not restored. Each
    iteration solves the rotation of every original frame onto the current
    mean, so ``rotations[i]`` is the total rotation applied to frame ``i``.
    Iteration stops when the mean moves less than ``tolerance`` in Frobenius
    norm, after ``max_iterations``, or when rounding makes the residual stop
    decreasing.

    Leading batch axes are allowed; sequences converge independently and
    the result for each equals that of aligning it alone.
    """
    x = np.asarray(frames, dtype=np.float64)
    if x.ndim < 3 or x.shape[-2] != 3:
        raise ContractViolation(f"expected (..., F, 3, P) frames, got {x.shape}")
    n_frames, _, n_points = x.shape[-3:]
    if n_frames < 2 or n_points < 3:
        raise ContractViolation(f"gpa_align needs F >= 2 and P >= 3, got F={n_frames}, P={n_points}")
    if max_iterations < 1:
        raise ContractViolation("max_iterations must be at least 1")
    CALLS["gpa_align"] += 1
    batch = x.shape[:-3]
    x = center(x.reshape((-1,) + x.shape[-3:]))
    n_seq = x.shape[0]
    _check_frames(x)

    mean = x.mean(axis=1)
    # a cancelling raw mean cannot anchor the alignment; start from frame 0
    bad_mean = ~_frame_rank_ok(mean)
    mean[bad_mean] = x[bad_mean, 0]

    rotations = np.broadcast_to(np.eye(3), (n_seq, n_frames, 3, 3)).copy()
    aligned = x.copy()
    history = [[] for _ in range(n_seq)]
    active = np.ones(n_seq, dtype=bool)
    for _ in range(max_iterations):
        idx = np.flatnonzero(active)
        if idx.size == 0:
            break
        rot = _rotations_to_mean(x[idx], mean[idx])
        cand = rot @ x[idx]
        new_mean = cand.mean(axis=1)
        residual = np.sum((cand - new_mean[:, None]) ** 2, axis=(1, 2, 3))
        change = np.sqrt(np.sum((new_mean - mean[idx]) ** 2, axis=(1, 2)))
        for k, s in enumerate(idx):
            if history[s] and residual[k] > history[s][-1]:
                active[s] = False
                continue
            history[s].append(float(residual[k]))
            rotations[s] = rot[k]
            aligned[s] = cand[k]
            mean[s] = new_mean[k]
            if change[k] < tolerance:
                active[s] = False

    iterations = np.array([len(h) for h in history])
    histories = [np.array(h) for h in history]
    result = GpaResult(
        aligned=aligned.reshape(batch + aligned.shape[1:]),
        rotations=rotations.reshape(batch + rotations.shape[1:]),
        iterations=int(iterations[0]) if not batch else iterations.reshape(batch),
        residual_history=histories[0] if not batch else histories,
        mean=mean.reshape(batch + mean.shape[1:]),
    )
    return result


def gpa_backward(upstream, rotations, mode=STOP_GRAD_ROTATION, inputs=None, mean=None,
                 step=1e-6):
    """Map a gradient w.r.t. the aligned shapes to one w.r.t. the inputs.

    The default one-step rule holds the rotations fixed: ``R_i.T @ g_i`` per
    frame. ``mode="last_step"`` additionally differentiates the final
    Procrustes solve ``S_i -> procrustes(S_i, mean) @ S_i`` (mean held fixed)
    by central differences; it needs ``inputs`` (centered) and ``mean`` and
    is meant for diagnostics only.
    """
    upstream = np.asarray(upstream, dtype=np.float64)
    rotations = np.asarray(rotations, dtype=np.float64)
    if upstream.shape[:-2] != rotations.shape[:-2] or upstream.shape[-2] != 3 \
            or rotations.shape[-2:] != (3, 3):
        raise ContractViolation(
            f"gpa_backward: gradient {upstream.shape} does not match rotations {rotations.shape}")
    if mode == STOP_GRAD_ROTATION:
        return np.swapaxes(rotations, -1, -2) @ upstream
    if mode != LAST_STEP:
        raise ContractViolation(f"unknown gpa backward mode {mode!r}")
    if inputs is None or mean is None:
        raise ContractViolation("last_step mode needs the centered inputs and the mean shape")
    inputs = np.asarray(inputs, dtype=np.float64)
    if inputs.shape != upstream.shape:
        raise ContractViolation("last_step inputs must match the gradient shape")
    mean = np.broadcast_to(np.asarray(mean, dtype=np.float64)[..., None, :, :], inputs.shape)
    g_flat = upstream.reshape((-1, 3, inputs.shape[-1]))
    x_flat = inputs.reshape(g_flat.shape)
    m_flat = mean.reshape(g_flat.shape)
    out = np.zeros_like(x_flat)
    for f in range(x_flat.shape[0]):
        frame = x_flat[f]
        for idx in np.ndindex(frame.shape):
            plus = frame.copy()
            minus = frame.copy()
            plus[idx] += step
            minus[idx] -= step
            fp = linalg.procrustes_rotation(plus, m_flat[f]) @ plus
            fm = linalg.procrustes_rotation(minus, m_flat[f]) @ minus
            out[f][idx] = np.sum(g_flat[f] * (fp - fm)) / (2.0 * step)
    return out.reshape(upstream.shape)


def gpa_node(frames, tolerance=DEFAULT_TOLERANCE, max_iterations=DEFAULT_MAX_ITERATIONS):
    """Tape node: aligned shapes as a tensor, plus the :class:`GpaResult`.

    Backward applies the one-step rule followed by the exact derivative of
    the internal centering. Used on the training path only.
    """
    frames = ad._lift(frames)
    result = gpa_align(frames.value, tolerance, max_iterations)
    rotations = result.rotations

    def vjp(g):
        back = gpa_backward(g, rotations)
        return (back - back.mean(axis=-1, keepdims=True),)

    return ad.custom_op("gpa", result.aligned, (frames,), vjp), result
