"""Gradient verification suite behind ``seqnr gradcheck``.

Every autodiff primitive and every model composite is compared against
central finite differences. The alignment layer's backward is approximate by
design, so it is scored by the cosine between its one-step gradient and a
finite-difference gradient of the composed map instead of a strict error.
"""

from dataclasses import dataclass

import numpy as np

from seqnr import autodiff as ad
from seqnr import gpa, linalg, model
from seqnr import objective as obj

PRIMITIVE_THRESHOLD = 1e-6
COMPOSITE_THRESHOLD = 1e-4
GPA_MIN_POSITIVE_FRACTION = 0.95
PRIMITIVE_POINTS = 10


@dataclass
class CheckRow:
    name: str
    kind: str
    value: float
    threshold: float
    passed: bool
    detail: str = ""


def _weighted(op, weights):
    return lambda x: ad.sum(op(x) * weights)


def _primitive_cases(rng):
    """``name -> (function factory, point sampler)``; factories take an rng."""
    a34 = lambda: rng.normal(size=(3, 4))  # noqa: E731
    away_from_zero = lambda: rng.choice([-1.0, 1.0], (3, 4)) * rng.uniform(0.1, 2.0, (3, 4))  # noqa: E731
    positive = lambda: rng.uniform(0.2, 3.0, (3, 4))  # noqa: E731

    def binary(op):
        def make():
            other = ad.Tensor(rng.normal(size=(3, 4)))
            w = rng.normal(size=(3, 4))
            return _weighted(lambda x: op(x, other) + op(other, x), w)
        return make

    def divide():
        other = ad.Tensor(rng.uniform(0.5, 2.0, (3, 4)) * rng.choice([-1.0, 1.0], (3, 4)))
        w = rng.normal(size=(3, 4))
        return _weighted(lambda x: ad.divide(x, other) + ad.divide(other, x * x + 1.0), w)

    def unary(op):
        def make():
            return _weighted(op, rng.normal(size=(3, 4)))
        return make

    def matmul():
        left = rng.normal(size=(2, 3))
        right = rng.normal(size=(4, 5))
        w = rng.normal(size=(2, 5))
        return lambda x: ad.sum(ad.matmul(ad.matmul(left, x), right) * w)

    def transpose():
        w = rng.normal(size=(4, 3))
        return lambda x: ad.sum(ad.transpose(x) * w)

    def reshape():
        w = rng.normal(size=(2, 6))
        return lambda x: ad.sum(ad.reshape(x, (2, 6)) * w)

    def concat():
        other = ad.Tensor(rng.normal(size=(2, 4)))
        w = rng.normal(size=(5, 4))
        return lambda x: ad.sum(ad.concat([x, other], axis=0) * w)

    def slice_():
        w = rng.normal(size=(2, 2))
        return lambda x: ad.sum(x[1:, ::2] * w)

    def take():
        idx = np.array([3, 0, 0, 2, 1])
        w = rng.normal(size=(3, 5))
        return lambda x: ad.sum(ad.take(x, idx, axis=1) * w)

    def reduce(op):
        def make():
            w = rng.normal(size=(4,))
            return lambda x: ad.sum(op(x, axis=0) * w) + op(x)
        return make

    def scale():
        c = float(rng.normal())
        return _weighted(lambda x: ad.scale(x, c), rng.normal(size=(3, 4)))

    def frobenius():
        w = rng.normal(size=(3,))
        return lambda x: ad.sum(ad.frobenius_norm(x, axis=1) * w) + ad.frobenius_norm(x)

    return {
        "add": (binary(ad.add), a34),
        "subtract": (binary(ad.subtract), a34),
        "hadamard": (binary(ad.hadamard), a34),
        "divide": (divide, a34),
        "scale": (scale, a34),
        "matmul": (matmul, a34),
        "transpose": (transpose, a34),
        "reshape": (reshape, a34),
        "concat": (concat, a34),
        "slice": (slice_, a34),
        "take": (take, a34),
        "sum": (reduce(ad.sum), a34),
        "mean": (reduce(ad.mean), a34),
        "sin": (unary(ad.sin), a34),
        "cos": (unary(ad.cos), a34),
        "exp": (unary(ad.exp), a34),
        "log": (unary(ad.log), positive),
        "sqrt": (unary(ad.sqrt), positive),
        "sigmoid": (unary(ad.sigmoid), a34),
        "relu": (unary(ad.relu), away_from_zero),
        "leaky_relu": (unary(ad.leaky_relu), away_from_zero),
        "frobenius_norm": (frobenius, a34),
    }


PRIMITIVES = tuple(_primitive_cases(np.random.default_rng(0)))


def check_primitive(name, step, rng):
    make, sample = _primitive_cases(rng)[name]
    worst = 0.0
    for _ in range(PRIMITIVE_POINTS):
        worst = max(worst, ad.gradcheck(make(), sample(), step))
    return CheckRow(name, "primitive", worst, PRIMITIVE_THRESHOLD, worst < PRIMITIVE_THRESHOLD)


# -- composites -------------------------------------------------------------

SMALL = model.ModelConfig(keypoints=5, feature_dim=8, basis_count=3, encoder_layers=2,
                          encoder_width=12, mlp_layers=4, toeplitz_rpe_width=4)


def random_params(config, rng):
    """Random parameters with non-zero biases so no activation sits on a kink."""
    params = model.init_params(config, int(rng.integers(1 << 31)))
    for name, value in params.items():
        if value.ndim < 2:
            params[name] = value + 0.3 * rng.normal(size=value.shape)
    return params


def _param_function(params, names, build):
    """Flatten ``params[names]`` into one vector; ``build(p)`` returns a scalar."""
    shapes = [params[n].shape for n in names]
    sizes = [int(np.prod(s)) for s in shapes]
    point = np.concatenate([np.ravel(params[n]) for n in names])

    def fn(x):
        p = model.as_constants(params)
        offset = 0
        for n, s, k in zip(names, shapes, sizes):
            p[n] = ad.reshape(x[offset:offset + k], s)
            offset += k
        return build(p)

    return fn, point


def _group(params, prefix):
    return [n for n in params if n.startswith(prefix)]


def composite_cases(rng):
    cfg = SMALL
    n_frames, n_points = 4, cfg.keypoints
    params = random_params(cfg, rng)
    const = model.as_constants(params)
    series = model.series_vector(n_frames)
    w_obs = rng.normal(size=(2, n_frames, 2, n_points))
    cases = {}

    w_enc = rng.normal(size=(n_frames, cfg.encoder_width))
    cases["encoder"] = (lambda x: ad.sum(model.encode(x, const) * w_enc), w_obs[0])
    cases["encoder.params"] = _param_function(
        params, _group(params, "encoder."), lambda p: ad.sum(model.encode(w_obs[0], p) * w_enc))

    feat = rng.normal(size=(n_frames, cfg.encoder_width))
    w_shape = rng.normal(size=(n_frames, 3, n_points))
    cases["predict_shape"] = (lambda x: ad.sum(model.predict_shape(x, const) * w_shape), feat)
    cases["predict_shape.params"] = _param_function(
        params, _group(params, "shape."), lambda p: ad.sum(model.predict_shape(feat, p) * w_shape))

    w_rot = rng.normal(size=(n_frames, 3, 3))
    cases["rotation_head"] = (
        lambda x: ad.sum(model.predict_rotation(x, const) * w_rot), feat)
    cases["rotation_head.params"] = _param_function(
        params, _group(params, "rotation."),
        lambda p: ad.sum(model.predict_rotation(feat, p) * w_rot))
    cases["rodrigues"] = (lambda x: ad.sum(model.rodrigues(x) * w_rot),
                          rng.normal(size=(n_frames, 3)))

    x_feat = rng.normal(size=(2, n_frames, cfg.feature_dim))
    w_feat = rng.normal(size=(2, n_frames, cfg.feature_dim))
    cases["gtu"] = (lambda x: ad.sum(model.gtu_mix(x, series, const) * w_feat), x_feat)
    cases["gtu.params"] = _param_function(
        params, _group(params, "gtu."),
        lambda p: ad.sum(model.gtu_mix(x_feat, series, p) * w_feat))

    w_out = rng.normal(size=(2, n_frames, 3, n_points))
    cases["remap_gs"] = (lambda x: ad.sum(model.remap_gs(x, const) * w_out), x_feat)
    cases["remap_gs.params"] = _param_function(
        params, _group(params, "remap."), lambda p: ad.sum(model.remap_gs(x_feat, p) * w_out))

    s_pt = rng.normal(size=(2, n_frames, 3, n_points))
    rot = linalg.rodrigues(rng.normal(size=(2, n_frames, 3)))
    cases["reprojection_loss"] = (
        lambda x: ad.sum(obj.reprojection_loss(w_obs, rot, x)), s_pt)
    cases["nuclear_norm"] = (lambda x: ad.nuclear_norm_node(x), rng.normal(size=(4, 6)))
    cases["mean_shape_loss"] = (lambda x: ad.sum(obj.mean_shape_loss(x)), s_pt[0])

    def full(p):
        _, s_tilde, r = model.forward_pipeline(w_obs, series, p)
        return ad.sum(obj.total_loss(w_obs, r, s_tilde, align=False).total)

    cases["full_model_loss"] = _param_function(params, list(params), full)
    return cases


COMPOSITES = tuple(composite_cases(np.random.default_rng(0)))


def check_composite(name, step, rng):
    fn, point = composite_cases(rng)[name]
    err = ad.gradcheck(fn, point, step)
    return CheckRow(name, "composite", err, COMPOSITE_THRESHOLD, err < COMPOSITE_THRESHOLD)


# -- one-step alignment gradient --------------------------------------------


def random_nonrigid_sequence(rng, n_frames, n_points, deformation=0.5):
    """Base shape plus per-frame deformation, each frame randomly rotated."""
    base = rng.normal(size=(3, n_points))
    frames = base + deformation * rng.normal(size=(n_frames, 3, n_points))
    axis_angle = rng.normal(size=(n_frames, 3))
    axis_angle *= rng.uniform(0, np.pi, (n_frames, 1)) / np.linalg.norm(axis_angle, axis=1, keepdims=True)
    return gpa.center(linalg.rodrigues(axis_angle) @ frames)


def gpa_cosine(frames, beta=obj.DEFAULT_BETA, step=1e-6, oracle_tolerance=1e-13,
               oracle_iterations=1000):
    """Cosine between the one-step gradient and central differences of
    ``beta * ||GPA(S)||_*`` for one centered sequence."""
    res = gpa.gpa_align(frames)
    n_points = frames.shape[-1]
    upstream = beta * gpa.unstacked(linalg.nuclear_norm_subgrad(gpa.stacked(res.aligned)), n_points)
    one_step = gpa.gpa_backward(upstream, res.rotations)

    coords = list(np.ndindex(frames.shape))
    probes = np.repeat(frames[None], 2 * len(coords), axis=0)
    for k, idx in enumerate(coords):
        probes[(2 * k,) + idx] += step
        probes[(2 * k + 1,) + idx] -= step
    aligned = gpa.gpa_align(probes, oracle_tolerance, oracle_iterations).aligned
    values = beta * linalg.nuclear_norm(gpa.stacked(aligned))
    fd = ((values[0::2] - values[1::2]) / (2.0 * step)).reshape(frames.shape)
    return float(np.sum(one_step * fd) / (np.linalg.norm(one_step) * np.linalg.norm(fd)))


def check_gpa(rng, trials=100, n_frames=8, n_points=6):
    cosines = np.array([gpa_cosine(random_nonrigid_sequence(rng, n_frames, n_points))
                        for _ in range(trials)])
    frac = float(np.mean(cosines > 0.0))
    return CheckRow("gpa_one_step", "cosine", frac, GPA_MIN_POSITIVE_FRACTION,
                    frac >= GPA_MIN_POSITIVE_FRACTION,
                    detail=f"median={np.median(cosines):.6f} min={cosines.min():.6f}")


def run(scope="all", op=None, step=1e-5, seed=1):
    """Run the selected checks; returns a list of :class:`CheckRow`."""
    rng = np.random.default_rng(seed)
    if scope == "op":
        if op in PRIMITIVES:
            return [check_primitive(op, step, rng)]
        if op in COMPOSITES:
            return [check_composite(op, step, rng)]
        if op in ("gpa", "gpa_one_step"):
            return [check_gpa(rng)]
        raise KeyError(op)
    rows = [check_primitive(name, step, rng) for name in PRIMITIVES]
    rows += [check_composite(name, step, rng) for name in COMPOSITES]
    rows.append(check_gpa(rng))
    return rows
