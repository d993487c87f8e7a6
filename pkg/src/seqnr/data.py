"""Synthetic low-rank deforming sequences, projection, dataset files, batching.

Arrays use the library layout: observations ``(F, 2, P)``, shapes
``(F, 3, P)``, rotations ``(F, 3, 3)``. The JSON file stores points
point-major (``F x P x 2`` and ``F x P x 3``) instead.
"""

import json
from dataclasses import dataclass, field
from typing import NamedTuple, Optional

import numpy as np
from scipy.spatial.transform import Rotation, Slerp

from seqnr.errors import ContractViolation, DataFormatError, MissingGroundTruth, VersionError

FORMAT_NAME = "seqnr-dataset"
FORMAT_VERSION = 1

DEFAULT_SEQUENCE_LENGTH = 32
DEFAULT_BATCH_SIZE = 256


@dataclass(frozen=True)
class SyntheticConfig:
    frames: int
    points: int
    basis_count: int = 3
    coefficient_frequencies: int = 2
    camera_smoothness: int = 8
    noise_sigma: float = 0.0
    seed: int = 0

    def __post_init__(self):
        if self.frames < 2:
            raise ContractViolation(f"frames must satisfy F >= 2 (got {self.frames})")
        if self.points < 3:
            raise ContractViolation(f"points must satisfy P >= 3 (got {self.points})")
        if self.basis_count < 1:
            raise ContractViolation(f"basis count must be >= 1 (got {self.basis_count})")
        if self.coefficient_frequencies < 0:
            raise ContractViolation("coefficient_frequencies must be >= 0")
        if self.camera_smoothness < 1:
            raise ContractViolation("camera_smoothness must be >= 1")
        if not self.noise_sigma >= 0:
            raise ContractViolation(f"noise_sigma must be >= 0 (got {self.noise_sigma})")


@dataclass
class Sequence:
    observations: np.ndarray
    shapes: Optional[np.ndarray] = None
    rotations: Optional[np.ndarray] = None
    metadata: dict = field(default_factory=dict)

    @property
    def frames(self):
        return self.observations.shape[0]

    @property
    def points(self):
        return self.observations.shape[2]

    @property
    def has_ground_truth(self):
        return self.shapes is not None and self.rotations is not None


@dataclass
class Dataset:
    sequences: list

    def __len__(self):
        return len(self.sequences)

    @property
    def points(self):
        counts = {s.points for s in self.sequences}
        if len(counts) != 1:
            raise ContractViolation(f"sequences disagree on the point count: {sorted(counts)}")
        return counts.pop()

    def require_ground_truth(self):
        for i, s in enumerate(self.sequences):
            if not s.has_ground_truth:
                raise MissingGroundTruth(f"ground truth required: sequence {i} has no points3d/rotations")


def project_orthographic(shape, rotation):
    """First two rows of ``rotation @ shape`` (batched over leading axes)."""
    return (np.asarray(rotation) @ np.asarray(shape))[..., :2, :]


def _camera_path(rng, n_frames, spacing):
    keys = np.arange(0, n_frames - 1 + spacing, spacing)
    key_rots = Rotation.random(len(keys), random_state=rng)
    return Slerp(keys, key_rots)(np.arange(n_frames)).as_matrix()


def _generate_sequence(config, rng, index):
    n_frames, n_points, k = config.frames, config.points, config.basis_count
    basis = rng.normal(size=(k, 3, n_points))
    basis -= basis.mean(axis=-1, keepdims=True)
    basis /= np.linalg.norm(basis, axis=(1, 2), keepdims=True)

    t = np.arange(n_frames)
    coef = np.repeat(rng.normal(size=(k, 1)), n_frames, axis=1)
    for f in range(1, config.coefficient_frequencies + 1):
        amp = 0.5 * rng.normal(size=(k, 1)) / f
        phase = rng.uniform(0.0, 2.0 * np.pi, size=(k, 1))
        coef = coef + amp * np.sin(2.0 * np.pi * f * t / n_frames + phase)
    shapes = np.einsum("kf,kcp->fcp", coef, basis)

    rotations = _camera_path(rng, n_frames, config.camera_smoothness)
    obs = project_orthographic(shapes, rotations)
    if config.noise_sigma > 0:
        obs = obs + config.noise_sigma * rng.normal(size=obs.shape)
        obs = obs - obs.mean(axis=-1, keepdims=True)
    # noise-free frames are already centered (the basis is), and leaving them
    # untouched keeps W = Pi R S exact
    meta = {
        "index": index, "seed": config.seed, "basis_count": k,
        "coefficient_frequencies": config.coefficient_frequencies,
        "camera_smoothness": config.camera_smoothness, "noise_sigma": config.noise_sigma,
    }
    return Sequence(observations=obs, shapes=shapes, rotations=rotations, metadata=meta)


def generate(config, sequences=1):
    """Draw ``sequences`` independent sequences; deterministic under ``config.seed``."""
    if sequences < 1:
        raise ContractViolation("need at least one sequence")
    children = np.random.SeedSequence(config.seed).spawn(sequences)
    return Dataset([_generate_sequence(config, np.random.default_rng(c), i)
                    for i, c in enumerate(children)])


# -- file format ------------------------------------------------------------


def _sequence_to_json(seq):
    d = {
        "frames": seq.frames,
        "points": seq.points,
        "points2d": np.swapaxes(seq.observations, 1, 2).tolist(),
    }
    if seq.shapes is not None:
        d["points3d"] = np.swapaxes(seq.shapes, 1, 2).tolist()
    if seq.rotations is not None:
        d["rotations"] = seq.rotations.tolist()
    d["metadata"] = seq.metadata
    return d


def dumps_dataset(dataset):
    doc = {
        "format": FORMAT_NAME,
        "version": FORMAT_VERSION,
        "sequences": [_sequence_to_json(s) for s in dataset.sequences],
    }
    return json.dumps(doc) + "\n"


def save_dataset(dataset, path):
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(dumps_dataset(dataset))


def _array(entry, key, where, shape):
    if key not in entry:
        raise DataFormatError(f"{where}: missing field '{key}'")
    try:
        arr = np.array(entry[key], dtype=np.float64)
    except (TypeError, ValueError) as exc:
        raise DataFormatError(f"{where}.{key}: not a numeric array ({exc})") from None
    if arr.shape != shape:
        raise DataFormatError(f"{where}.{key}: expected shape {shape}, got {arr.shape}")
    return arr


def loads_dataset(text, source="<string>"):
    try:
        doc = json.loads(text)
    except json.JSONDecodeError as exc:
        raise DataFormatError(
            f"{source}: malformed JSON at offset {exc.pos} (line {exc.lineno}, "
            f"column {exc.colno}): {exc.msg}") from None
    if not isinstance(doc, dict) or doc.get("format") != FORMAT_NAME:
        raise DataFormatError(f"{source}: not a {FORMAT_NAME} document (field 'format')")
    if doc.get("version") != FORMAT_VERSION:
        raise VersionError(
            f"{source}: format version {doc.get('version')!r} is not supported "
            f"(expected {FORMAT_VERSION})")
    entries = doc.get("sequences")
    if not isinstance(entries, list) or not entries:
        raise DataFormatError(f"{source}: field 'sequences' must be a non-empty list")
    sequences = []
    for i, entry in enumerate(entries):
        where = f"{source}: sequences[{i}]"
        if not isinstance(entry, dict):
            raise DataFormatError(f"{where}: expected an object")
        try:
            n_frames, n_points = int(entry["frames"]), int(entry["points"])
        except (KeyError, TypeError, ValueError):
            raise DataFormatError(f"{where}: fields 'frames' and 'points' must be integers") from None
        obs = np.swapaxes(_array(entry, "points2d", where, (n_frames, n_points, 2)), 1, 2)
        shapes = rotations = None
        if "points3d" in entry:
            shapes = np.swapaxes(_array(entry, "points3d", where, (n_frames, n_points, 3)), 1, 2)
        if "rotations" in entry:
            rotations = _array(entry, "rotations", where, (n_frames, 3, 3))
        sequences.append(Sequence(np.ascontiguousarray(obs),
                                  None if shapes is None else np.ascontiguousarray(shapes),
                                  rotations, dict(entry.get("metadata", {}))))
    return Dataset(sequences)


def load_dataset(path):
    with open(path, "r", encoding="utf-8") as fh:
        text = fh.read()
    return loads_dataset(text, source=str(path))


# -- batching ---------------------------------------------------------------


class Window(NamedTuple):
    observations: np.ndarray
    sequence: int
    start: int
    stop: int


def window_index(dataset, sequence_length):
    shortest = min(s.frames for s in dataset.sequences)
    if sequence_length < 2 or sequence_length > shortest:
        raise ContractViolation(
            f"sequence_length {sequence_length} must lie in [2, {shortest}] "
            "(shortest sequence)")
    return [(i, start) for i, s in enumerate(dataset.sequences)
            for start in range(s.frames - sequence_length + 1)]


def _epoch_order(n, seed, epoch):
    return np.random.default_rng([seed, epoch]).permutation(n)


def batch_at(dataset, step, sequence_length=DEFAULT_SEQUENCE_LENGTH,
             batch_size=DEFAULT_BATCH_SIZE, seed=0, index=None):
    """The ``step``-th batch of the endless shuffled window stream.

    Epochs are independent seeded permutations of all admissible windows,
    laid end to end; batch ``k`` holds stream positions
    ``[k * batch_size, (k + 1) * batch_size)``.
    """
    if index is None:
        index = window_index(dataset, sequence_length)
    n = len(index)
    out = []
    cache = {}
    for pos in range(step * batch_size, (step + 1) * batch_size):
        epoch, offset = divmod(pos, n)
        if epoch not in cache:
            cache[epoch] = _epoch_order(n, seed, epoch)
        seq, start = index[cache[epoch][offset]]
        stop = start + sequence_length
        out.append(Window(dataset.sequences[seq].observations[start:stop], seq, start, stop))
    return out


def batch_iter(dataset, sequence_length=DEFAULT_SEQUENCE_LENGTH, batch_size=DEFAULT_BATCH_SIZE,
               seed=0, exhaustive=False):
    """Yield batches (lists of :class:`Window`).

    ``exhaustive=True`` yields exactly one epoch, every admissible window
    start once, the last batch possibly short. Otherwise the stream is
    endless.
    """
    index = window_index(dataset, sequence_length)
    if exhaustive:
        order = _epoch_order(len(index), seed, 0)
        for lo in range(0, len(order), batch_size):
            batch = []
            for k in order[lo:lo + batch_size]:
                seq, start = index[k]
                stop = start + sequence_length
                batch.append(Window(dataset.sequences[seq].observations[start:stop], seq, start, stop))
            yield batch
        return
    step = 0
    while True:
        yield batch_at(dataset, step, sequence_length, batch_size, seed, index)
        step += 1
