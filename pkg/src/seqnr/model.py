"""Single-frame lifting network and the sequence context layer.

Parameters live in a plain ``dict`` mapping names to float64 arrays (the
parameter store). Forward functions accept the same dict with values wrapped
as :class:`~seqnr.autodiff.Tensor` so the identical code serves training (tape
variables) and inference (constants).

Shapes: observations ``(..., F, 2, P)``, shapes ``(..., F, 3, P)``,
rotations ``(..., F, 3, 3)``. Weight matrices are stored ``(in, out)``.
"""

from dataclasses import asdict, dataclass

import numpy as np

from seqnr import autodiff as ad
from seqnr.errors import ContractViolation
from seqnr.instrument import CALLS

LEAKY_SLOPE = 0.01
DECAY_INIT = 0.9

# maps v -> vec([v]_x) so that v @ _CROSS reshaped to 3x3 is the cross matrix
_CROSS = np.zeros((3, 9))
_CROSS[2, 1], _CROSS[1, 2] = -1.0, 1.0
_CROSS[2, 3], _CROSS[0, 5] = 1.0, -1.0
_CROSS[1, 6], _CROSS[0, 7] = -1.0, 1.0


@dataclass(frozen=True)
class ModelConfig:
    keypoints: int
    feature_dim: int = 128
    basis_count: int = 10
    encoder_layers: int = 6
    encoder_width: int = 256
    mlp_layers: int = 4
    toeplitz_rpe_width: int = 32
    use_series_vector: bool = True

    def __post_init__(self):
        for name in ("keypoints", "feature_dim", "basis_count", "encoder_layers",
                     "encoder_width", "mlp_layers", "toeplitz_rpe_width"):
            if int(getattr(self, name)) < 1:
                raise ContractViolation(f"ModelConfig.{name} must be >= 1")

    def to_dict(self):
        return asdict(self)

    @classmethod
    def from_dict(cls, d):
        unknown = set(d) - set(cls.__dataclass_fields__)
        if unknown:
            raise ContractViolation(f"unknown model options: {', '.join(sorted(unknown))}")
        try:
            return cls(**d)
        except TypeError as exc:
            raise ContractViolation(f"invalid model config: {exc}") from None

    def parameter_shapes(self):
        """Ordered ``name -> shape`` inventory of every learnable array."""
        p3 = 3 * self.keypoints
        e, d, k, r = self.encoder_width, self.feature_dim, self.basis_count, self.toeplitz_rpe_width
        shapes = {
            "encoder.embed.weight": (2 * self.keypoints, e),
            "encoder.embed.bias": (e,),
        }
        for i in range(self.encoder_layers):
            shapes[f"encoder.block{i}.fc1.weight"] = (e, e)
            shapes[f"encoder.block{i}.fc1.bias"] = (e,)
            shapes[f"encoder.block{i}.fc2.weight"] = (e, e)
            shapes[f"encoder.block{i}.fc2.bias"] = (e,)
        shapes.update({
            "shape.coef.weight": (e, k),
            "shape.coef.bias": (k,),
            "shape.basis": (k, p3),
            "rotation.weight": (e, 3),
            "rotation.bias": (3,),
            "context.g.weight": (p3, d),
            "context.g.bias": (d,),
            "gtu.w_u": (d, d),
            "gtu.w_v": (d, d),
            "gtu.w_o": (d, d),
            "gtu.decay_logit": (),
            "gtu.rpe.fc1.weight": (1, r),
            "gtu.rpe.fc1.bias": (r,),
            "gtu.rpe.fc2.weight": (r, 1),
            "gtu.rpe.fc2.bias": (1,),
            "remap.glu.a.weight": (d, d),
            "remap.glu.a.bias": (d,),
            "remap.glu.b.weight": (d, d),
            "remap.glu.b.bias": (d,),
        })
        widths = [d] * self.mlp_layers + [p3]
        for i in range(self.mlp_layers):
            shapes[f"remap.mlp{i}.weight"] = (widths[i], widths[i + 1])
            shapes[f"remap.mlp{i}.bias"] = (widths[i + 1],)
        return shapes

    def parameter_count(self):
        return int(sum(int(np.prod(s)) for s in self.parameter_shapes().values()))


def init_params(config, seed=0):
    """Xavier-uniform weights, zero biases, Toeplitz decay at 0.9.

    The positional-encoding output bias starts at 1 so the initial mixing
    matrix is the pure decay kernel rather than all zeros.
    """
    rng = np.random.default_rng(seed)
    params = {}
    for name, shape in config.parameter_shapes().items():
        if name == "gtu.decay_logit":
            params[name] = np.array(np.log(DECAY_INIT / (1.0 - DECAY_INIT)))
        elif name == "gtu.rpe.fc2.bias":
            params[name] = np.ones(shape)
        elif len(shape) == 2:
            limit = np.sqrt(6.0 / (shape[0] + shape[1]))
            params[name] = rng.uniform(-limit, limit, size=shape)
        else:
            params[name] = np.zeros(shape)
    return params


def as_constants(params):
    return {k: ad.Tensor(np.asarray(v, dtype=np.float64)) for k, v in params.items()}


def series_vector(n_frames, all_ones=False):
    """Temporal index ``[1, ..., F]``; all ones for the ablation."""
    if all_ones:
        return np.ones(n_frames)
    return np.arange(1, n_frames + 1, dtype=np.float64)


def _linear(x, p, prefix, bias=True):
    y = x @ p[prefix + ".weight"]
    if bias:
        y = y + p[prefix + ".bias"]
    return y


def _act(x):
    return ad.leaky_relu(x, LEAKY_SLOPE)


def encode(w, p, layers=None):
    """Residual MLP encoder on centered 2D frames: ``(N, 2, P) -> (N, width)``."""
    w = ad._lift(w)
    n_points = w.shape[-1]
    w = w - ad.mean(w, axis=-1, keepdims=True)
    h = _linear(ad.reshape(w, w.shape[:-2] + (2 * n_points,)), p, "encoder.embed")
    i = 0
    while f"encoder.block{i}.fc1.weight" in p and (layers is None or i < layers):
        h = h + _linear(_act(_linear(h, p, f"encoder.block{i}.fc1")), p, f"encoder.block{i}.fc2")
        i += 1
    return h


def predict_shape(feature, p):
    """Two purely linear stages: basis weights, then weighted basis sum."""
    coef = _linear(feature, p, "shape.coef")
    flat = coef @ p["shape.basis"]
    n_points = flat.shape[-1] // 3
    return ad.reshape(flat, flat.shape[:-1] + (3, n_points))


def rodrigues(v):
    """Axis-angle tensor ``(..., 3)`` to rotation tensor ``(..., 3, 3)``."""
    v = ad._lift(v)
    theta2 = ad.sum(v * v, axis=-1, keepdims=True)
    small = theta2.value < 1e-16
    theta = ad.sqrt(ad.where(small, 1.0, theta2))
    a = ad.where(small, 1.0, ad.sin(theta) / theta)
    b = ad.where(small, 0.5, (1.0 - ad.cos(theta)) / (theta * theta))
    k = ad.reshape(v @ _CROSS, v.shape[:-1] + (3, 3))
    lead = v.shape[:-1] + (1, 1)
    return np.eye(3) + ad.reshape(a, lead) * k + ad.reshape(b, lead) * (k @ k)


def predict_rotation(feature, p):
    return rodrigues(_linear(feature, p, "rotation"))


def relative_offsets(series):
    series = np.asarray(series, dtype=np.float64)
    return series[:, None] - series[None, :]


def toeplitz_coefficients(series, p):
    """Mixing coefficient for each distinct offset ``L_i - L_j``.

    Returns ``(coefficients, offsets)``; for the arithmetic series the offsets
    are ``-(F-1) ... F-1``. ``t(d) = decay**|d| * rpe(d / F)``.
    """
    series = np.asarray(series, dtype=np.float64)
    offsets = np.unique(relative_offsets(series))
    rel = ad.Tensor((offsets / series.size)[:, None])
    h = _act(_linear(rel, p, "gtu.rpe.fc1"))
    rpe = ad.reshape(_linear(h, p, "gtu.rpe.fc2"), (offsets.size,))
    log_decay = ad.log(ad.sigmoid(p["gtu.decay_logit"]))
    decay_pow = ad.exp(log_decay * np.abs(offsets))
    return decay_pow * rpe, offsets


def toeplitz_matrix(series, p):
    """``T[i, j] = t(L_i - L_j)``; Toeplitz when ``L`` is arithmetic."""
    coef, offsets = toeplitz_coefficients(series, p)
    index = np.searchsorted(offsets, relative_offsets(series))
    return ad.take(coef, index, axis=0)


def gtu_mix(x, series, p):
    """Gated Toeplitz mixing ``((T @ (x W_v)) * sigmoid(x W_u)) W_o``.

    No additive term follows the mixing: temporal information enters only
    through ``T``.
    """
    CALLS["gtu_mix"] += 1
    x = ad._lift(x)
    if x.shape[-2] != len(series):
        raise ContractViolation(f"gtu_mix: {x.shape[-2]} frames but series of length {len(series)}")
    t = toeplitz_matrix(series, p)
    u = ad.sigmoid(x @ p["gtu.w_u"])
    v = x @ p["gtu.w_v"]
    return ((t @ v) * u) @ p["gtu.w_o"]


def lift_features(s_prime, p):
    """``g``: stacked shapes ``(..., F, 3, P)`` to features ``(..., F, D)``."""
    s_prime = ad._lift(s_prime)
    flat = ad.reshape(s_prime, s_prime.shape[:-2] + (3 * s_prime.shape[-1],))
    return _linear(flat, p, "context.g")


def remap_gs(x, p):
    """Gated linear unit then an MLP back to shapes ``(..., F, 3, P)``."""
    x = ad._lift(x)
    y = _linear(x, p, "remap.glu.a") * ad.sigmoid(_linear(x, p, "remap.glu.b"))
    i = 0
    while f"remap.mlp{i + 1}.weight" in p:
        y = _act(_linear(y, p, f"remap.mlp{i}"))
        i += 1
    y = _linear(y, p, f"remap.mlp{i}")
    n_points = y.shape[-1] // 3
    return ad.reshape(y, y.shape[:-1] + (3, n_points))


def forward_pipeline(w, series, p, use_context=True):
    """Observations -> (single-frame shapes, sequence shapes, rotations).

    ``w`` is ``(..., F, 2, P)``. Alignment is not part of this path.
    """
    w = ad._lift(w)
    if w.ndim < 3 or w.shape[-2] != 2:
        raise ContractViolation(f"expected observations (..., F, 2, P), got {w.shape}")
    if w.shape[-3] < 2:
        raise ContractViolation("forward_pipeline needs at least two frames")
    feature = encode(w, p)
    s_prime = predict_shape(feature, p)
    rotations = predict_rotation(feature, p)
    if not use_context:
        return s_prime, s_prime, rotations
    s_tilde = remap_gs(gtu_mix(lift_features(s_prime, p), series, p), p)
    return s_prime, s_tilde, rotations
