import numpy as np
import pytest

from seqnr import data, model, trainer
from seqnr import objective as obj
from seqnr.errors import ContractViolation, TrainingDiverged
from seqnr.instrument import CALLS

MCFG = model.ModelConfig(keypoints=6, feature_dim=8, basis_count=3, encoder_layers=2,
                         encoder_width=16, mlp_layers=2, toeplitz_rpe_width=4)


@pytest.fixture(scope="module")
def small():
    return data.generate(data.SyntheticConfig(frames=12, points=6, noise_sigma=0.01, seed=1), 3)


def tcfg(**kw):
    base = {"steps": 6, "sequence_length": 5, "batch_size": 3, "seed": 2, "log_every": 2}
    return trainer.TrainConfig(**{**base, **kw})


def test_defaults():
    c = trainer.TrainConfig()
    assert (c.alpha, c.beta) == (9.0, 0.1)
    assert (c.gpa_tolerance, c.gpa_max_iterations) == (1e-8, 100)
    assert (c.learning_rate, c.adam_beta1, c.adam_beta2, c.adam_epsilon) == (1e-3, 0.9, 0.999, 1e-8)
    assert (c.steps, c.sequence_length, c.batch_size) == (3000, 16, 8)


def test_config_invariants():
    with pytest.raises(ContractViolation):
        trainer.TrainConfig(steps=0)
    with pytest.raises(ContractViolation):
        trainer.TrainConfig(learning_rate=0.0)
    with pytest.raises(ContractViolation):
        trainer.TrainConfig(ablation_mode="bogus")


def test_adam_zero_gradient():
    p = {"a": np.array([1.0, -2.0])}
    state = trainer.TrainState.fresh(p)
    trainer.adam_step(state, {"a": np.zeros(2)}, trainer.TrainConfig())
    np.testing.assert_array_equal(state.params["a"], p["a"])
    assert state.step == 1


def test_adam_first_step_magnitude():
    cfg = trainer.TrainConfig()
    state = trainer.TrainState.fresh({"a": np.zeros(3)})
    g = np.array([0.5, -2.0, 7.0])
    trainer.adam_step(state, {"a": g}, cfg)
    # m_hat = g, v_hat = g^2  ->  update = lr * g / (|g| + eps)
    np.testing.assert_allclose(state.params["a"], -cfg.learning_rate * g / (np.abs(g) + 1e-8), rtol=1e-12)


def test_adam_rejects_non_finite():
    state = trainer.TrainState.fresh({"w": np.zeros(2), "v": np.zeros(1)})
    with pytest.raises(TrainingDiverged, match="'v'"):
        trainer.adam_step(state, {"w": np.zeros(2), "v": np.array([np.nan])}, trainer.TrainConfig())


def test_training_is_deterministic(small, tmp_path):
    paths = []
    for k in range(2):
        c = tcfg(checkpoint_path=str(tmp_path / f"c{k}.json"), metrics_csv_path=str(tmp_path / f"m{k}.csv"))
        trainer.train(small, MCFG, c)
        paths.append((tmp_path / f"c{k}.json", tmp_path / f"m{k}.csv"))
    assert paths[0][0].read_bytes() == paths[1][0].read_bytes()
    assert paths[0][1].read_bytes() == paths[1][1].read_bytes()


def test_resume_is_bit_exact(small, tmp_path):
    full = tcfg(checkpoint_path=str(tmp_path / "full.json"), metrics_csv_path=str(tmp_path / "full.csv"))
    trainer.train(small, MCFG, full)
    first = tcfg(steps=3, checkpoint_path=str(tmp_path / "part.json"), metrics_csv_path=str(tmp_path / "part.csv"))
    trainer.train(small, MCFG, first)
    ckpt = trainer.load_checkpoint(tmp_path / "part.json")
    assert ckpt.state.step == 3
    second = tcfg(checkpoint_path=str(tmp_path / "part.json"), metrics_csv_path=str(tmp_path / "part.csv"))
    trainer.train(small, MCFG, second, resume=ckpt)
    assert (tmp_path / "full.json").read_bytes() == (tmp_path / "part.json").read_bytes()
    assert (tmp_path / "full.csv").read_bytes() == (tmp_path / "part.csv").read_bytes()


def test_checkpoint_round_trip_forward(small, tmp_path):
    ck = trainer.train(small, MCFG, tcfg(steps=2, checkpoint_path=str(tmp_path / "c.json")))
    back = trainer.load_checkpoint(tmp_path / "c.json")
    for k in ck.state.params:
        assert ck.state.params[k].tobytes() == back.state.params[k].tobytes()
    w = small.sequences[0].observations[:5]
    a = model.forward_pipeline(w, model.series_vector(5), model.as_constants(ck.state.params))[1].value
    b = model.forward_pipeline(w, model.series_vector(5), model.as_constants(back.state.params))[1].value
    assert a.tobytes() == b.tobytes()


def test_metrics_csv_header_and_steps(small, tmp_path):
    trainer.train(small, MCFG, tcfg(metrics_csv_path=str(tmp_path / "m.csv")))
    lines = (tmp_path / "m.csv").read_text().splitlines()
    assert lines[0] == "step,total,reprojection,nuclear,mpjpe,stress,e3d"
    assert [int(line.split(",")[0]) for line in lines[1:]] == [0, 2, 4]


EXPECTED_CALLS = {
    "none": (1, 1, 1), "no_gpa": (0, 1, 1), "no_context": (1, 0, 1),
    "allone_series": (1, 1, 1), "no_nuclear": (0, 1, 0), "mean_loss": (0, 1, 0),
}


@pytest.mark.parametrize("mode", trainer.ABLATION_MODES)
def test_ablation_isolation(small, mode, monkeypatch):
    seen = []
    original = model.series_vector
    monkeypatch.setattr(model, "series_vector", lambda n, all_ones=False: seen.append(all_ones) or original(n, all_ones))
    state = trainer.TrainState.fresh(model.init_params(MCFG, 0))
    CALLS.clear()
    terms = trainer.train_step(state, small, MCFG, tcfg(ablation_mode=mode))
    assert (CALLS["gpa_align"], CALLS["gtu_mix"], CALLS["nuclear_norm_node"]) == EXPECTED_CALLS[mode]
    assert seen == [mode == "allone_series"]
    if mode == "no_nuclear":
        assert terms["nuclear"] == 0.0 and terms["total"] == pytest.approx(9.0 * terms["reprojection"])
    if mode == "mean_loss":
        assert terms["total"] == pytest.approx(9.0 * terms["reprojection"] + 0.1 * terms["mean_shape"])


def crafted_oracle():
    """Rigid dataset with identity cameras and parameters whose output is the truth."""
    rng = np.random.default_rng(0)
    s0 = rng.normal(size=(3, 6))
    s0 -= s0.mean(axis=1, keepdims=True)
    shapes = np.repeat(s0[None], 10, axis=0)
    rots = np.repeat(np.eye(3)[None], 10, axis=0)
    ds = data.Dataset([data.Sequence(shapes[:, :2].copy(), shapes, rots)])
    params = model.init_params(MCFG, 0)
    last = MCFG.mlp_layers - 1
    params[f"remap.mlp{last}.weight"][:] = 0.0
    params[f"remap.mlp{last}.bias"][:] = s0.reshape(-1)
    params["rotation.weight"][:] = 0.0
    return ds, params


def test_oracle_model_scores_zero():
    ds, params = crafted_oracle()
    CALLS.clear()
    ckpt = trainer.Checkpoint(MCFG, tcfg(), trainer.TrainState.fresh(params))
    report = trainer.evaluate_checkpoint(ckpt, ds)
    assert report["aggregate"]["mpjpe"] < 1e-15
    assert CALLS["gpa_align"] == 0


def test_flip_recovers_mirrored_truth():
    ds, params = crafted_oracle()
    seq = ds.sequences[0]
    mirrored = data.Dataset([data.Sequence(seq.observations, obj.flip_depth(seq.shapes), seq.rotations)])
    ckpt = trainer.Checkpoint(MCFG, tcfg(), trainer.TrainState.fresh(params))
    assert trainer.evaluate_checkpoint(ckpt, mirrored)["aggregate"]["mpjpe"] > 0.1
    assert trainer.evaluate_checkpoint(ckpt, mirrored, obj.BEST_OF_FLIP)["aggregate"]["mpjpe"] < 1e-15


def test_evaluation_report_bytes_stable(small):
    ck = trainer.train(small, MCFG, tcfg(steps=2))
    a = trainer.report_csv(trainer.evaluate_checkpoint(ck, small))
    b = trainer.report_csv(trainer.evaluate_checkpoint(ck, small))
    assert a == b
    assert a.splitlines()[-1].startswith("all,")


def test_point_mismatch(small):
    cfg = model.ModelConfig(keypoints=7, feature_dim=4, encoder_width=4, encoder_layers=1)
    ckpt = trainer.Checkpoint(cfg, tcfg(), trainer.TrainState.fresh(model.init_params(cfg)))
    with pytest.raises(ContractViolation, match="P=7"):
        trainer.evaluate_checkpoint(ckpt, small)
    with pytest.raises(ContractViolation):
        trainer.train(small, cfg, tcfg())


def test_nan_loss_aborts(small):
    params = model.init_params(MCFG, 0)
    params["shape.basis"][0, 0] = np.nan
    state = trainer.TrainState.fresh(params)
    with pytest.raises(TrainingDiverged, match="step 0"):
        trainer.train_step(state, small, MCFG, tcfg(ablation_mode="no_nuclear"))
    state = trainer.TrainState.fresh(params)
    with pytest.raises(TrainingDiverged, match="step 0"):
        trainer.train_step(state, small, MCFG, tcfg())


def test_dataset_objective(small):
    params = model.init_params(MCFG, 0)
    value = trainer.dataset_objective(params, MCFG, tcfg(), small)
    assert np.isfinite(value) and value > 0
