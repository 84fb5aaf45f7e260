"""Dataset ingestion, observation/future windowing, and a synthetic generator.

On-disk formats (one file = one motion):
  quat_csv   header `fps=<int>,joints=<J>,label=<string|none>`, then 4*J
             reals per line, (w, x, y, z) per joint.
  expmap_csv same header, 3*J exponential-map reals per line.

The synthetic generator emits phase-shifted sinusoidal joint rotations.
Every motion follows one trajectory family up to a fixed boundary frame,
then branches into one of `modes_per_condition` continuations (phase
continuation, phase reversal, faster variants), so the ground-truth
multi-modality of each observation prefix is known exactly.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .errors import ConfigError, ContractError, ParseError, SchemaError, ValidationError
from .pose import Motion, axis_angle_to_quat, canonicalize_frames, expmap_to_rotmat, rotmat_to_quat

OMEGA_BASE = 0.25  # rad/frame for class 0
OMEGA_STEP = 0.20  # spacing between class frequencies


@dataclass
class SynthSpec:
    n_classes: int = 2
    modes_per_condition: int = 2
    joints: int = 2
    frames: int = 32
    n_motions: int = 200
    noise_std: float = 0.0
    amplitude: float = 0.8
    fps: int = 25

    def __post_init__(self):
        for name in ("n_classes", "modes_per_condition", "joints", "frames", "n_motions"):
            if getattr(self, name) < 1:
                raise ContractError(f"SynthSpec: {name} must be >= 1")


@dataclass
class SynthInfo:
    """Generator bookkeeping that makes mode recovery exact."""

    spec: SynthSpec
    axes: np.ndarray          # (J, 3) unit rotation axes, shared by all motions
    boundary: int             # frame index where continuations branch


@dataclass
class MotionDataset:
    motions: list
    normalization: tuple | None = None  # (mean, std) per flattened channel
    class_names: list = field(default_factory=list)
    synth: SynthInfo | None = None

    def __post_init__(self):
        if not self.class_names:
            labels = sorted({m.label for m in self.motions if m.label is not None})
            self.class_names = labels

    @property
    def joints(self) -> int:
        return self.motions[0].j

    @property
    def fps(self) -> int:
        return self.motions[0].fps


@dataclass
class SamplePair:
    observation: Motion
    future: Motion
    source_label: str | None = None


# --- file io -----------------------------------------------------------------

def _parse_header(line: str, path, lineno: int):
    parts = line.strip().split(",")
    keys = ("fps", "joints", "label")
    if len(parts) != 3 or any("=" not in p for p in parts):
        raise ParseError(f"{path}:{lineno}: bad header {line.strip()!r}")
    vals = {}
    for key, part in zip(keys, parts):
        k, _, v = part.partition("=")
        if k != key:
            raise ParseError(f"{path}:{lineno}: expected {key}=..., got {part!r}")
        vals[key] = v
    try:
        fps = int(vals["fps"])
        joints = int(vals["joints"])
    except ValueError as e:
        raise ParseError(f"{path}:{lineno}: {e}") from None
    if fps <= 0 or joints <= 0:
        raise ParseError(f"{path}:{lineno}: fps and joints must be positive")
    label = None if vals["label"] == "none" else vals["label"]
    return fps, joints, label


def load_motion_file(path, format: str = "quat_csv") -> MotionDataset:
    """Read one motion file; rotations come back as canonical quaternions."""
    if format not in ("quat_csv", "expmap_csv"):
        raise ContractError(f"load_motion_file: unknown format {format!r}")
    per_joint = 4 if format == "quat_csv" else 3
    path = Path(path)
    lines = path.read_text(encoding="utf-8").splitlines()
    if not lines:
        raise ParseError(f"{path}:1: empty file")
    fps, joints, label = _parse_header(lines[0], path, 1)
    width = per_joint * joints
    rows = []
    for lineno, line in enumerate(lines[1:], start=2):
        if not line.strip():
            continue
        fields = line.split(",")
        if len(fields) != width:
            raise SchemaError(f"{path}:{lineno}: expected {width} values, got {len(fields)}")
        try:
            rows.append([float(f) for f in fields])
        except ValueError as e:
            raise ParseError(f"{path}:{lineno}: {e}") from None
    if not rows:
        raise ParseError(f"{path}:2: no frames")
    raw = np.asarray(rows, dtype=np.float64)
    if format == "quat_csv":
        try:
            frames = canonicalize_frames(raw.reshape(len(rows), joints, 4))
        except ValidationError as e:
            raise ParseError(f"{path}: {e}") from None
    else:
        exp = raw.reshape(len(rows), joints, 3)
        frames = np.empty((len(rows), joints, 4))
        for t in range(len(rows)):
            for j in range(joints):
                frames[t, j] = rotmat_to_quat(expmap_to_rotmat(exp[t, j]))
    motion = Motion(frames, fps=fps, label=label, extra={"source": path.name})
    return MotionDataset([motion])


def save_motion_file(motion: Motion, path) -> None:
    label = motion.label if motion.label is not None else "none"
    lines = [f"fps={motion.fps},joints={motion.j},label={label}"]
    for row in motion.flat():
        lines.append(",".join(repr(float(v)) for v in row))
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


def load_dataset_dir(path, format: str = "quat_csv") -> MotionDataset:
    """Load every .csv in a directory (sorted) as one dataset."""
    path = Path(path)
    files = sorted(p for p in path.iterdir() if p.suffix == ".csv")
    if not files:
        raise ParseError(f"{path}: no .csv motion files")
    motions = []
    for f in files:
        motions.extend(load_motion_file(f, format).motions)
    first = motions[0]
    for m in motions[1:]:
        if m.j != first.j or m.fps != first.fps:
            raise SchemaError(f"{path}: motions disagree on joints/fps "
                              f"({m.extra.get('source')} vs {first.extra.get('source')})")
    ds = MotionDataset(motions)
    meta = path / "synth_meta.json"
    if meta.exists():
        ds.synth = _load_synth_meta(meta, ds)
    return ds


def save_dataset_dir(ds: MotionDataset, path) -> list:
    """Write one quat_csv per motion (plus generator metadata if present).

    Returns the written file paths."""
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    written = []
    for i, m in enumerate(ds.motions):
        p = path / f"motion_{i:05d}.csv"
        save_motion_file(m, p)
        written.append(p)
    if ds.synth is not None:
        doc = {
            "spec": asdict(ds.synth.spec),
            "axes": ds.synth.axes.tolist(),
            "boundary": ds.synth.boundary,
            "motions": [{"class_idx": m.extra["class_idx"],
                         "mode_idx": m.extra["mode_idx"],
                         "phi0": m.extra["phi0"]} for m in ds.motions],
        }
        p = path / "synth_meta.json"
        p.write_text(json.dumps(doc, sort_keys=True, indent=1), encoding="utf-8")
        written.append(p)
    return written


def _load_synth_meta(meta_path, ds: MotionDataset) -> SynthInfo:
    doc = json.loads(Path(meta_path).read_text(encoding="utf-8"))
    spec = SynthSpec(**doc["spec"])
    if len(doc["motions"]) != len(ds.motions):
        raise SchemaError(f"{meta_path}: metadata covers {len(doc['motions'])} motions, "
                          f"directory has {len(ds.motions)}")
    for m, rec in zip(ds.motions, doc["motions"]):
        m.extra.update(rec)
    return SynthInfo(spec=spec, axes=np.asarray(doc["axes"]), boundary=int(doc["boundary"]))


# --- windowing ---------------------------------------------------------------

def make_windows(ds: MotionDataset, t_obs: int, t_fut: int, stride: int = 1) -> list:
    """Cut (observation, future) pairs; a motion of length T yields
    floor((T - t_obs - t_fut)/stride) + 1 pairs when it fits, else none."""
    if t_obs < 1 or t_fut < 1 or stride < 1:
        raise ContractError("make_windows: t_obs, t_fut, stride must all be >= 1")
    pairs = []
    for m in ds.motions:
        span = t_obs + t_fut
        if m.t < span:
            continue
        for start in range(0, m.t - span + 1, stride):
            pairs.append(SamplePair(observation=m.slice(start, start + t_obs),
                                    future=m.slice(start + t_obs, start + span),
                                    source_label=m.label))
    return pairs


def windows_to_arrays(pairs, dtype=np.float64):
    """Stack pairs into (obs[B, t_obs, 4J], fut[B, t_fut, 4J])."""
    if not pairs:
        raise ContractError("windows_to_arrays: empty pair list")
    obs = np.stack([p.observation.flat() for p in pairs]).astype(dtype)
    fut = np.stack([p.future.flat() for p in pairs]).astype(dtype)
    return obs, fut


# --- normalization -----------------------------------------------------------

def compute_normalization(ds: MotionDataset):
    """Per-channel mean/std over all frames; constant channels get std 1."""
    stacked = np.concatenate([m.flat() for m in ds.motions], axis=0)
    mean = stacked.mean(axis=0)
    std = stacked.std(axis=0)
    std[std == 0.0] = 1.0
    return mean, std


def normalize_channels(flat_frames, mean, std):
    return (flat_frames - mean) / std


def denormalize_channels(flat_frames, mean, std):
    return flat_frames * std + mean


# --- train/test split --------------------------------------------------------

def split_dataset(ds: MotionDataset, seed: int, test_frac: float = 0.1):
    """Split by subject id when motions carry one, else a seeded 90/10
    motion-level split. Returns (train, test)."""
    n = len(ds.motions)
    if n < 2:
        raise ContractError("split_dataset: need at least 2 motions")
    subjects = [m.extra.get("subject") for m in ds.motions]
    rng = np.random.default_rng(seed)
    if all(s is not None for s in subjects) and len(set(subjects)) >= 2:
        uniq = sorted(set(subjects))
        k = max(1, int(round(len(uniq) * test_frac)))
        test_subjects = set(rng.permutation(uniq)[:k].tolist())
        test_idx = [i for i, s in enumerate(subjects) if s in test_subjects]
    else:
        order = rng.permutation(n)
        k = max(1, int(round(n * test_frac)))
        test_idx = sorted(order[:k].tolist())
    test_set = set(test_idx)
    train = [m for i, m in enumerate(ds.motions) if i not in test_set]
    test = [m for i, m in enumerate(ds.motions) if i in test_set]
    out = []
    for subset in (train, test):
        d = MotionDataset(subset, normalization=ds.normalization,
                          class_names=list(ds.class_names), synth=ds.synth)
        out.append(d)
    return out[0], out[1]


# --- synthetic generator -----------------------------------------------------

def _mode_direction(mode: int) -> float:
    # 0 continues the phase, 1 reverses it, higher modes speed it up
    if mode == 0:
        return 1.0
    if mode == 1:
        return -1.0
    return 1.0 + 0.5 * mode


def _synth_angles(t, omega, phi0, boundary, mode, phase_offsets, amplitude):
    """Joint angles (len(t), J); continuous at the boundary frame."""
    t = np.asarray(t, dtype=np.float64)
    d = _mode_direction(mode)
    pre = phi0 + omega * t
    post = phi0 + omega * boundary + d * omega * (t - boundary)
    phase = np.where(t <= boundary, pre, post)
    return amplitude * np.sin(phase[:, None] + phase_offsets[None, :])


def _angles_to_quats(angles, axes):
    half = 0.5 * angles  # (T, J)
    w = np.cos(half)[..., None]
    xyz = np.sin(half)[..., None] * axes[None, :, :]
    return canonicalize_frames(np.concatenate([w, xyz], axis=-1))


def class_omega(class_idx: int) -> float:
    return OMEGA_BASE + OMEGA_STEP * class_idx


def synth_generate(spec: SynthSpec, seed: int) -> MotionDataset:
    """Deterministic multi-modal dataset; classes are frequency families,
    modes are branch choices at the boundary frame (see module docstring)."""
    rng = np.random.default_rng(seed)
    axes = rng.normal(size=(spec.joints, 3))
    axes /= np.linalg.norm(axes, axis=1, keepdims=True)
    phase_offsets = 2.0 * np.pi * np.arange(spec.joints) / spec.joints
    boundary = spec.frames // 2
    t = np.arange(spec.frames)
    motions = []
    for i in range(spec.n_motions):
        cls = i % spec.n_classes
        phi0 = float(rng.uniform(0.0, 2.0 * np.pi))
        mode = int(rng.integers(spec.modes_per_condition))
        angles = _synth_angles(t, class_omega(cls), phi0, boundary, mode,
                               phase_offsets, spec.amplitude)
        if spec.noise_std > 0:
            angles = angles + rng.normal(0.0, spec.noise_std, size=angles.shape)
        frames = _angles_to_quats(angles, axes)
        motions.append(Motion(frames, fps=spec.fps, label=f"class{cls}",
                              extra={"class_idx": cls, "mode_idx": mode, "phi0": phi0}))
    info = SynthInfo(spec=spec, axes=axes, boundary=boundary)
    return MotionDataset(motions, synth=info)


def mode_continuations(ds: MotionDataset, motion_index: int, t_fut: int) -> np.ndarray:
    """Noise-free continuations (M, t_fut, J, 4) of one motion from the
    boundary frame, one per ground-truth mode."""
    if ds.synth is None:
        raise ContractError("mode_continuations: dataset has no generator metadata")
    info = ds.synth
    m = ds.motions[motion_index]
    omega = class_omega(m.extra["class_idx"])
    phase_offsets = 2.0 * np.pi * np.arange(info.spec.joints) / info.spec.joints
    t = np.arange(info.boundary, info.boundary + t_fut)
    out = []
    for mode in range(info.spec.modes_per_condition):
        angles = _synth_angles(t, omega, m.extra["phi0"], info.boundary, mode,
                               phase_offsets, info.spec.amplitude)
        out.append(_angles_to_quats(angles, info.axes))
    return np.stack(out)


def assign_mode(ds: MotionDataset, motion_index: int, future_frames) -> int:
    """Nearest-trajectory mode assignment for a generated or real future."""
    fut = np.asarray(future_frames)
    conts = mode_continuations(ds, motion_index, fut.shape[0])
    dists = [float(np.linalg.norm(fut - c)) for c in conts]
    return int(np.argmin(dists))
