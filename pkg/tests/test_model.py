import numpy as np
import pytest

from seqnr import autodiff as ad
from seqnr import checks, linalg, model
from seqnr.errors import ContractViolation
from seqnr.instrument import CALLS

CFG = checks.SMALL


@pytest.fixture
def params(rng):
    return checks.random_params(CFG, rng)


def test_published_defaults():
    cfg = model.ModelConfig(keypoints=15)
    assert cfg.feature_dim == 128
    assert (cfg.basis_count, cfg.encoder_layers, cfg.encoder_width) == (10, 6, 256)
    assert (cfg.mlp_layers, cfg.toeplitz_rpe_width, cfg.use_series_vector) == (4, 32, True)


def test_parameter_count_hand_computed():
    p, e, d, k, r = 15, 256, 128, 10, 32
    embed = 2 * p * e + e
    blocks = 6 * 2 * (e * e + e)
    shape = e * k + k + k * 3 * p
    rotation = e * 3 + 3
    g = 3 * p * d + d
    gtu = 3 * d * d + 1 + (r + r) + (r + 1)
    glu = 2 * (d * d + d)
    mlp = 3 * (d * d + d) + d * 3 * p + 3 * p
    assert model.ModelConfig(keypoints=p).parameter_count() == \
        embed + blocks + shape + rotation + g + gtu + glu + mlp == 944734


def test_config_rejects_zero_counts():
    with pytest.raises(ContractViolation):
        model.ModelConfig(keypoints=0)
    with pytest.raises(ContractViolation):
        model.ModelConfig.from_dict({"keypoints": 4, "widht": 3})


def test_init_is_seeded():
    a = model.init_params(CFG, 3)
    b = model.init_params(CFG, 3)
    assert all(a[k].tobytes() == b[k].tobytes() for k in a)
    assert float(1 / (1 + np.exp(-a["gtu.decay_logit"]))) == pytest.approx(0.9)
    assert all(np.all(np.isfinite(v)) for v in a.values())


def test_encode_zero_input_bias_path(params):
    for i in range(CFG.encoder_layers):
        params[f"encoder.block{i}.fc2.weight"][:] = 0.0
        params[f"encoder.block{i}.fc2.bias"][:] = 0.0
    out = model.encode(np.zeros((3, 2, CFG.keypoints)), model.as_constants(params)).value
    np.testing.assert_array_equal(out, np.broadcast_to(params["encoder.embed.bias"], out.shape))


def test_encode_centers_input(params, rng):
    p = model.as_constants(params)
    w = rng.normal(size=(4, 2, CFG.keypoints))
    shifted = w + rng.normal(size=(4, 2, 1))
    np.testing.assert_allclose(model.encode(w, p).value, model.encode(shifted, p).value, atol=1e-12)


def test_predict_shape_one_hot(params):
    params["shape.coef.weight"][:] = 0.0
    for k in range(CFG.basis_count):
        params["shape.coef.bias"][:] = np.eye(CFG.basis_count)[k]
        s = model.predict_shape(np.zeros((1, CFG.encoder_width)), model.as_constants(params)).value
        np.testing.assert_array_equal(s[0], params["shape.basis"][k].reshape(3, CFG.keypoints))


def test_predict_shape_linear(params, rng):
    params["shape.coef.bias"][:] = 0.0
    p = model.as_constants(params)
    f1, f2 = rng.normal(size=(2, 1, CFG.encoder_width))
    lhs = model.predict_shape(2.0 * f1 - 0.5 * f2, p).value
    rhs = 2.0 * model.predict_shape(f1, p).value - 0.5 * model.predict_shape(f2, p).value
    np.testing.assert_allclose(lhs, rhs, atol=1e-12)


def test_rotation_zero_weights(params, rng):
    params["rotation.weight"][:] = 0.0
    params["rotation.bias"][:] = 0.0
    r = model.predict_rotation(rng.normal(size=(3, CFG.encoder_width)), model.as_constants(params)).value
    np.testing.assert_array_equal(r, np.broadcast_to(np.eye(3), (3, 3, 3)))


def test_rotation_invariants(params, rng):
    r = model.predict_rotation(rng.normal(size=(20, CFG.encoder_width)) * 5,
                               model.as_constants(params)).value
    np.testing.assert_allclose(r @ np.swapaxes(r, -1, -2), np.broadcast_to(np.eye(3), r.shape), atol=1e-9)
    np.testing.assert_allclose(np.linalg.det(r), 1.0, atol=1e-9)


def test_tensor_rodrigues_matches_numpy(rng):
    v = rng.normal(size=(10, 3))
    np.testing.assert_allclose(model.rodrigues(v).value, linalg.rodrigues(v), atol=1e-14)
    np.testing.assert_array_equal(model.rodrigues(np.zeros((1, 3))).value[0], np.eye(3))


def test_toeplitz_arithmetic_structure(params):
    t = model.toeplitz_matrix(model.series_vector(7), model.as_constants(params)).value
    for i in range(6):
        for j in range(6):
            assert t[i, j] == t[i + 1, j + 1]


def test_toeplitz_all_ones_constant(params):
    t = model.toeplitz_matrix(model.series_vector(5, all_ones=True), model.as_constants(params)).value
    assert np.all(t == t[0, 0])
    assert np.linalg.matrix_rank(t) <= 1


def test_toeplitz_forced_decay(params):
    params["gtu.decay_logit"] = np.array(0.0)
    params["gtu.rpe.fc1.weight"][:] = 0.0
    params["gtu.rpe.fc1.bias"][:] = 0.0
    params["gtu.rpe.fc2.weight"][:] = 0.0
    params["gtu.rpe.fc2.bias"][:] = 1.0
    coef, offsets = model.toeplitz_coefficients(model.series_vector(6), model.as_constants(params))
    np.testing.assert_array_equal(offsets, np.arange(-5, 6))
    np.testing.assert_allclose(coef.value, 0.5 ** np.abs(offsets), rtol=1e-15)


def test_gtu_identity_construction(params, rng):
    d = CFG.feature_dim
    params["gtu.decay_logit"] = np.array(-50.0)
    params["gtu.rpe.fc1.weight"][:] = 0.0
    params["gtu.rpe.fc1.bias"][:] = 0.0
    params["gtu.rpe.fc2.weight"][:] = 0.0
    params["gtu.rpe.fc2.bias"][:] = 1.0
    params["gtu.w_u"] = np.zeros((d, d))  # gate 0.5 everywhere
    params["gtu.w_v"] = np.eye(d)
    params["gtu.w_o"] = 2.0 * np.eye(d)
    x = rng.normal(size=(5, d))
    out = model.gtu_mix(x, model.series_vector(5), model.as_constants(params)).value
    np.testing.assert_allclose(out, x, atol=1e-18)


def test_gtu_constant_mixing_identical_rows(params, rng):
    row = rng.normal(size=CFG.feature_dim)
    x = np.tile(row, (6, 1))
    out = model.gtu_mix(x, model.series_vector(6, all_ones=True), model.as_constants(params)).value
    assert np.all(out == out[0])


def test_no_additive_term_after_mixing():
    names = [n for n in model.ModelConfig(keypoints=5).parameter_shapes() if n.startswith("gtu.")]
    assert sorted(n for n in names if not n.startswith("gtu.rpe.")) == \
        ["gtu.decay_logit", "gtu.w_o", "gtu.w_u", "gtu.w_v"]


def test_gtu_has_no_bias_offset(params, rng):
    # scaling v scales the output exactly: no constant term survives the mix
    p = model.as_constants(params)
    x = rng.normal(size=(4, CFG.feature_dim))
    base = model.gtu_mix(x, model.series_vector(4), p).value
    params2 = dict(params, **{"gtu.w_v": 3.0 * params["gtu.w_v"]})
    scaled = model.gtu_mix(x, model.series_vector(4), model.as_constants(params2)).value
    np.testing.assert_allclose(scaled, 3.0 * base, rtol=1e-12, atol=1e-14)


def test_remap_zero_final_layer(params, rng):
    last = CFG.mlp_layers - 1
    params[f"remap.mlp{last}.weight"][:] = 0.0
    params[f"remap.mlp{last}.bias"][:] = 0.0
    out = model.remap_gs(rng.normal(size=(3, CFG.feature_dim)), model.as_constants(params)).value
    assert out.shape == (3, 3, CFG.keypoints) and np.all(out == 0.0)


@pytest.mark.parametrize("d", [1, 3, 16])
def test_remap_shape_contract(d, rng):
    cfg = model.ModelConfig(keypoints=4, feature_dim=d, encoder_width=6, encoder_layers=1)
    out = model.remap_gs(rng.normal(size=(5, d)), model.as_constants(model.init_params(cfg))).value
    assert out.shape == (5, 3, 4)


def test_forward_pipeline_contract(params, rng):
    CALLS.clear()
    w = rng.normal(size=(6, 2, CFG.keypoints))
    p = model.as_constants(params)
    s_prime, s_tilde, r = model.forward_pipeline(w, model.series_vector(6), p)
    assert s_prime.shape == s_tilde.shape == (6, 3, CFG.keypoints)
    assert r.shape == (6, 3, 3)
    assert CALLS["gpa_align"] == 0
    again = model.forward_pipeline(w, model.series_vector(6), p)
    assert again[1].value.tobytes() == s_tilde.value.tobytes()


def test_forward_without_context(params, rng):
    w = rng.normal(size=(6, 2, CFG.keypoints))
    s_prime, s_tilde, _ = model.forward_pipeline(w, model.series_vector(6), model.as_constants(params),
                                                 use_context=False)
    assert s_prime is s_tilde


@pytest.mark.parametrize("name", [c for c in checks.COMPOSITES if c not in ("reprojection_loss",
                                                                              "nuclear_norm",
                                                                              "mean_shape_loss")])
def test_composite_gradients(name):
    row = checks.check_composite(name, 1e-5, np.random.default_rng(5))
    assert row.value < 1e-5 if name != "full_model_loss" else row.value < 1e-4, row
