"""Adam training loop, checkpoints, ablation routing and checkpoint evaluation."""

import csv
import json
import math
import os
from dataclasses import asdict, dataclass, fields, replace

import numpy as np

from seqnr import autodiff as ad
from seqnr import data as data_mod
from seqnr import gpa, model
from seqnr import objective as obj
from seqnr.errors import ContractViolation, DataFormatError, DomainError, TrainingDiverged, VersionError

CHECKPOINT_FORMAT = "seqnr-checkpoint"
CHECKPOINT_VERSION = 1

ABLATION_MODES = ("none", "no_gpa", "no_context", "allone_series", "no_nuclear", "mean_loss")
METRIC_COLUMNS = ("step", "total", "reprojection", "nuclear", "mpjpe", "stress", "e3d")


@dataclass(frozen=True)
class TrainConfig:
    steps: int = 3000
    learning_rate: float = 1e-3
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_epsilon: float = 1e-8
    alpha: float = obj.DEFAULT_ALPHA
    beta: float = obj.DEFAULT_BETA
    gpa_tolerance: float = gpa.DEFAULT_TOLERANCE
    gpa_max_iterations: int = gpa.DEFAULT_MAX_ITERATIONS
    ablation_mode: str = "none"
    sequence_length: int = 16
    batch_size: int = 8
    seed: int = 0
    log_every: int = 50
    checkpoint_path: str = None
    metrics_csv_path: str = None

    def __post_init__(self):
        if self.steps < 1:
            raise ContractViolation(f"steps must be >= 1 (got {self.steps})")
        if not self.learning_rate > 0:
            raise ContractViolation(f"learning_rate must be > 0 (got {self.learning_rate})")
        if self.ablation_mode not in ABLATION_MODES:
            raise ContractViolation(
                f"unknown ablation mode {self.ablation_mode!r}; choose from {', '.join(ABLATION_MODES)}")
        if self.log_every < 1:
            raise ContractViolation("log_every must be >= 1")
        if self.batch_size < 1:
            raise ContractViolation("batch_size must be >= 1")
        obj.LossWeights(self.alpha, self.beta)

    @property
    def weights(self):
        return obj.LossWeights(self.alpha, self.beta)

    def to_dict(self):
        return asdict(self)

    @classmethod
    def from_dict(cls, d):
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ContractViolation(f"unknown training options: {', '.join(sorted(unknown))}")
        try:
            return cls(**d)
        except TypeError as exc:
            raise ContractViolation(f"invalid training config: {exc}") from None


@dataclass
class TrainState:
    params: dict
    first_moment: dict
    second_moment: dict
    step: int = 0

    @classmethod
    def fresh(cls, params):
        return cls(params={k: np.array(v, dtype=np.float64) for k, v in params.items()},
                   first_moment={k: np.zeros_like(v, dtype=np.float64) for k, v in params.items()},
                   second_moment={k: np.zeros_like(v, dtype=np.float64) for k, v in params.items()})


def routing(mode):
    """Forward/loss switches for an ablation mode."""
    return {
        "use_context": mode != "no_context",
        "all_ones": mode == "allone_series",
        "align": mode != "no_gpa",
        "use_nuclear": mode != "no_nuclear",
        "use_mean_shape": mode == "mean_loss",
    }


def adam_step(state, grads, config):
    """Bias-corrected Adam update applied in place; returns ``state``."""
    for name, g in grads.items():
        if not np.all(np.isfinite(g)):
            raise TrainingDiverged(f"non-finite gradient for parameter '{name}' at step {state.step}")
    t = state.step + 1
    b1, b2 = config.adam_beta1, config.adam_beta2
    c1 = 1.0 - b1 ** t
    c2 = 1.0 - b2 ** t
    for name, g in grads.items():
        m = state.first_moment[name]
        v = state.second_moment[name]
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * (g * g)
        denom = np.sqrt(v / c2)
        denom += config.adam_epsilon
        step = m / c1
        step /= denom
        step *= config.learning_rate
        state.params[name] -= step
    state.step = t
    return state


def batch_loss(params, w, model_config, train_config, tape=None):
    """Mean per-sequence loss over a batch ``w`` of shape ``(B, L, 2, P)``.

    Returns ``(objective tensor, parameter tensors, LossBreakdown)``.
    """
    route = routing(train_config.ablation_mode)
    if tape is None:
        p = model.as_constants(params)
    else:
        p = {k: tape.variable(v, name=k) for k, v in params.items()}
    series = model.series_vector(w.shape[-3], all_ones=route["all_ones"])
    _, s_tilde, rot = model.forward_pipeline(w, series, p, use_context=route["use_context"])
    breakdown = obj.total_loss(
        w, rot, s_tilde, train_config.weights, train_config.gpa_tolerance,
        train_config.gpa_max_iterations, align=route["align"],
        use_nuclear=route["use_nuclear"], use_mean_shape=route["use_mean_shape"])
    objective = ad.scale(ad.sum(breakdown.total), 1.0 / w.shape[0])
    return objective, p, breakdown


def train_step(state, dataset, model_config, train_config, index=None):
    batch = data_mod.batch_at(dataset, state.step, train_config.sequence_length,
                              train_config.batch_size, train_config.seed, index)
    w = np.stack([b.observations for b in batch])
    tape = ad.Tape()
    try:
        objective, p, breakdown = batch_loss(state.params, w, model_config, train_config, tape)
    except DomainError as exc:
        raise TrainingDiverged(f"non-finite forward values at step {state.step}: {exc}") from None
    terms = breakdown.as_floats()
    if not math.isfinite(objective.item()):
        raise TrainingDiverged(f"non-finite loss at step {state.step}: {terms}")
    grads_map = ad.backward(objective)
    grads = {k: grads_map[t] for k, t in p.items()}
    adam_step(state, grads, train_config)
    return terms


# -- inference and evaluation -----------------------------------------------


def _window_starts(n_frames, length):
    starts = list(range(0, n_frames - length + 1, length))
    if starts[-1] + length < n_frames:
        starts.append(n_frames - length)
    return starts


def predict_sequences(params, model_config, train_config, dataset):
    """Camera-frame shapes ``R_i S~_i`` (centered) per sequence.

    Sequences are cut into windows of the training length; a frame covered
    by two windows takes the earlier window's prediction.
    """
    route = routing(train_config.ablation_mode)
    length = train_config.sequence_length
    p = model.as_constants(params)
    out = []
    for seq in dataset.sequences:
        if seq.points != model_config.keypoints:
            raise ContractViolation(
                f"checkpoint expects P={model_config.keypoints} but dataset has P={seq.points}")
        if seq.frames < length:
            raise ContractViolation(
                f"sequence with {seq.frames} frames is shorter than the window length {length}")
        starts = _window_starts(seq.frames, length)
        w = np.stack([seq.observations[s:s + length] for s in starts])
        series = model.series_vector(length, all_ones=route["all_ones"])
        _, s_tilde, rot = model.forward_pipeline(w, series, p, use_context=route["use_context"])
        cam = rot.value @ s_tilde.value
        cam = cam - cam.mean(axis=-1, keepdims=True)
        pred = np.empty((seq.frames, 3, seq.points))
        filled = np.zeros(seq.frames, dtype=bool)
        for k, s in enumerate(starts):
            sl = slice(s, s + length)
            take = ~filled[sl]
            pred[sl][take] = cam[k][take]
            filled[sl] = True
        out.append(pred)
    return out


def ground_truth_camera(seq):
    cam = seq.rotations @ seq.shapes
    return cam - cam.mean(axis=-1, keepdims=True)


def evaluate_params(params, model_config, train_config, dataset, flip_mode=obj.NO_FLIP):
    """Per-sequence metric reports and their mean (key ``"aggregate"``)."""
    dataset.require_ground_truth()
    preds = predict_sequences(params, model_config, train_config, dataset)
    rows = [obj.evaluate(pred, ground_truth_camera(seq), flip_mode)
            for pred, seq in zip(preds, dataset.sequences)]
    aggregate = {k: float(np.mean([r[k] for r in rows])) for k in ("mpjpe", "stress", "e3d")}
    return {"sequences": rows, "aggregate": aggregate}


def evaluate_checkpoint(checkpoint, dataset, flip_mode=obj.NO_FLIP):
    return evaluate_params(checkpoint.state.params, checkpoint.model_config,
                           checkpoint.train_config, dataset, flip_mode)


def report_csv(report):
    lines = ["sequence,mpjpe,stress,e3d,flipped"]
    for i, r in enumerate(report["sequences"]):
        lines.append(f"{i},{r['mpjpe']!r},{r['stress']!r},{r['e3d']!r},{int(r['flipped'])}")
    a = report["aggregate"]
    lines.append(f"all,{a['mpjpe']!r},{a['stress']!r},{a['e3d']!r},")
    return "\n".join(lines) + "\n"


def dataset_objective(params, model_config, train_config, dataset):
    """Mean loss over every admissible window (one exhaustive epoch)."""
    totals = []
    for batch in data_mod.batch_iter(dataset, train_config.sequence_length,
                                     train_config.batch_size, train_config.seed, exhaustive=True):
        w = np.stack([b.observations for b in batch])
        _, _, breakdown = batch_loss(params, w, model_config, train_config)
        totals.extend(np.atleast_1d(breakdown.total.value).tolist())
    return float(np.mean(totals))


# -- checkpoints ------------------------------------------------------------


@dataclass
class Checkpoint:
    model_config: model.ModelConfig
    train_config: TrainConfig
    state: TrainState


def _encode_arrays(arrays):
    return {k: {"shape": list(v.shape), "data": np.ravel(v).tolist()} for k, v in arrays.items()}


def _decode_arrays(d, where):
    out = {}
    for k, entry in d.items():
        try:
            out[k] = np.array(entry["data"], dtype=np.float64).reshape(entry["shape"])
        except (KeyError, TypeError, ValueError) as exc:
            raise DataFormatError(f"{where}.{k}: malformed array ({exc})") from None
    return out


_PATH_FIELDS = ("checkpoint_path", "metrics_csv_path")


def dumps_checkpoint(ckpt):
    doc = {
        "format": CHECKPOINT_FORMAT,
        "version": CHECKPOINT_VERSION,
        "model_config": ckpt.model_config.to_dict(),
        "train_config": {k: v for k, v in ckpt.train_config.to_dict().items() if k not in _PATH_FIELDS},
        "seed": ckpt.train_config.seed,
        "step": ckpt.state.step,
        "params": _encode_arrays(ckpt.state.params),
        "adam": {"first_moment": _encode_arrays(ckpt.state.first_moment),
                 "second_moment": _encode_arrays(ckpt.state.second_moment)},
    }
    return json.dumps(doc) + "\n"


def save_checkpoint(ckpt, path):
    tmp = f"{path}.tmp"
    with open(tmp, "w", encoding="utf-8") as fh:
        fh.write(dumps_checkpoint(ckpt))
    os.replace(tmp, path)


def load_checkpoint(path):
    with open(path, "r", encoding="utf-8") as fh:
        text = fh.read()
    try:
        doc = json.loads(text)
    except json.JSONDecodeError as exc:
        raise DataFormatError(f"{path}: malformed JSON at offset {exc.pos} (line {exc.lineno}, "
                              f"column {exc.colno}): {exc.msg}") from None
    if not isinstance(doc, dict) or doc.get("format") != CHECKPOINT_FORMAT:
        raise DataFormatError(f"{path}: not a {CHECKPOINT_FORMAT} document")
    if doc.get("version") != CHECKPOINT_VERSION:
        raise VersionError(f"{path}: checkpoint version {doc.get('version')!r} is not supported")
    try:
        mcfg = model.ModelConfig.from_dict(doc["model_config"])
        tcfg = TrainConfig.from_dict(doc["train_config"])
        params = _decode_arrays(doc["params"], "params")
        m = _decode_arrays(doc["adam"]["first_moment"], "adam.first_moment")
        v = _decode_arrays(doc["adam"]["second_moment"], "adam.second_moment")
        step = int(doc["step"])
    except (KeyError, TypeError) as exc:
        raise DataFormatError(f"{path}: missing or malformed field {exc}") from None
    expected = mcfg.parameter_shapes()
    if set(expected) != set(params) or any(tuple(expected[k]) != params[k].shape for k in params):
        raise DataFormatError(f"{path}: parameters do not match the stored model config")
    params = {k: params[k] for k in expected}
    return Checkpoint(mcfg, tcfg, TrainState(params, m, v, step))


# -- training loop ----------------------------------------------------------


def _metrics_row(step, terms, report):
    agg = report["aggregate"] if report else {}
    return [step, terms["total"], terms["reprojection"], terms["nuclear"],
            agg.get("mpjpe", ""), agg.get("stress", ""), agg.get("e3d", "")]


def train(dataset, model_config, train_config, resume=None, progress=None):
    """Run (or resume) training up to ``train_config.steps`` total steps.

    Writes a metrics CSV row every ``log_every`` steps (metrics measured
    with the parameters before that step's update) and a checkpoint at the end when paths are configured. Returns the final
    :class:`Checkpoint`.
    """
    if dataset.points != model_config.keypoints:
        raise ContractViolation(
            f"model expects P={model_config.keypoints} but dataset has P={dataset.points}")
    index = data_mod.window_index(dataset, train_config.sequence_length)
    if resume is not None:
        if resume.model_config != model_config:
            raise ContractViolation("resume checkpoint was trained with a different model config")
        state = TrainState.fresh(resume.state.params)
        state.first_moment = {k: np.array(v) for k, v in resume.state.first_moment.items()}
        state.second_moment = {k: np.array(v) for k, v in resume.state.second_moment.items()}
        state.step = resume.state.step
    else:
        state = TrainState.fresh(model.init_params(model_config, train_config.seed))
    has_truth = all(s.has_ground_truth for s in dataset.sequences)

    writer = None
    fh = None
    if train_config.metrics_csv_path:
        append = resume is not None and os.path.exists(train_config.metrics_csv_path)
        fh = open(train_config.metrics_csv_path, "a" if append else "w", newline="", encoding="utf-8")
        writer = csv.writer(fh, lineterminator="\n")
        if not append:
            writer.writerow(METRIC_COLUMNS)
    try:
        while state.step < train_config.steps:
            step = state.step
            log = step % train_config.log_every == 0
            report = None
            if log and has_truth:
                report = evaluate_params(state.params, model_config, train_config, dataset)
            terms = train_step(state, dataset, model_config, train_config, index)
            if log:
                row = _metrics_row(step, terms, report)
                if writer is not None:
                    writer.writerow([repr(x) if isinstance(x, float) else x for x in row])
                    fh.flush()
                if progress is not None:
                    progress(row)
    finally:
        if fh is not None:
            fh.close()
    ckpt = Checkpoint(model_config, replace(train_config), state)
    if train_config.checkpoint_path:
        save_checkpoint(ckpt, train_config.checkpoint_path)
    return ckpt
