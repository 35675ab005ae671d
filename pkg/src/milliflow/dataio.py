"""Dataset serialization, frame preprocessing, sample pairing, clip
construction, and subject-level splits.

On-disk layout: `<root>/manifest.json` plus one directory per sequence holding
`frames.jsonl` (points, observed keypoints, ground-truth pose per frame) and
`labels.jsonl` (per-pair flow labels).  A binary mode stores the same records
with little-endian 64-bit floats and length-prefixed arrays; JSON numbers use
the shortest exact decimal form, so both modes round-trip bit-exactly.
"""

from __future__ import annotations

import dataclasses
import json
import logging
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import ConfigError, EmptyFrame, LengthMismatch, TooFewSubjects
from .labeling import FlowLabel
from .radar import RadarFrame
from .skeleton import OUT_OF_SET_ACTIVITIES, ObservedKeypoints, SkeletonPose

log = logging.getLogger(__name__)

PREPROCESS_BOX = ((-3.0, 3.0), (0.5, 5.0), (-1.5, 1.5))  # side, forward, height
INTENSITY_FLOOR = 0.5  # strict: intensity must exceed this
SAMPLE_SIZE = 128
CLIP_LENGTH = 5

_BINARY_MAGIC = b"MFLB"
_BINARY_VERSION = 1


@dataclass
class Sequence:
    subject_id: int
    activity_id: str
    scene_id: int
    frames: list  # RadarFrame per frame
    poses: list  # SkeletonPose per frame (ground truth)
    observed_kps: list  # ObservedKeypoints per frame
    labels: list | None = None  # FlowLabel per frame pair (n_frames - 1)

    def __post_init__(self):
        n = len(self.frames)
        if len(self.poses) != n or len(self.observed_kps) != n:
            raise LengthMismatch("frames, poses, observed_kps lengths differ")
        if self.labels is not None and len(self.labels) != n - 1:
            raise LengthMismatch(
                f"{n} frames need {n - 1} labels, got {len(self.labels)}"
            )

    @property
    def seq_id(self) -> str:
        return f"{self.subject_id:03d}_{self.activity_id}_{self.scene_id:02d}"

    @property
    def n_samples(self) -> int:
        return len(self.frames) - 1


@dataclass(frozen=True)
class Sample:
    source: RadarFrame
    target: RadarFrame
    label: FlowLabel
    clip_position: int = 0


@dataclass(frozen=True)
class SplitManifest:
    train_subjects: tuple
    val_subjects: tuple
    test_subjects: tuple
    out_of_set_sequences: tuple

    def partition_of(self, subject_id: int) -> str:
        if subject_id in self.train_subjects:
            return "train"
        if subject_id in self.val_subjects:
            return "val"
        if subject_id in self.test_subjects:
            return "test"
        raise ConfigError(f"subject {subject_id} not in any partition")

    def as_dict(self) -> dict:
        return {
            "train_subjects": list(self.train_subjects),
            "val_subjects": list(self.val_subjects),
            "test_subjects": list(self.test_subjects),
            "out_of_set_sequences": list(self.out_of_set_sequences),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "SplitManifest":
        return cls(
            train_subjects=tuple(d["train_subjects"]),
            val_subjects=tuple(d["val_subjects"]),
            test_subjects=tuple(d["test_subjects"]),
            out_of_set_sequences=tuple(d["out_of_set_sequences"]),
        )


# ----------------------------------------------------------------------
# preprocessing


def preprocess_indices(frame: RadarFrame, mode: str, seed: int = 0) -> np.ndarray:
    """Indices of the points a preprocessed frame keeps, in a stable order.

    Train/val resample to exactly SAMPLE_SIZE (without replacement when enough
    points survive the box/intensity gates, with replacement otherwise); test
    keeps every survivor.
    """
    if mode not in ("train", "val", "test"):
        raise ConfigError(f"unknown preprocessing mode {mode!r}")
    pts = frame.points
    keep = frame.intensities > INTENSITY_FLOOR
    for axis, (lo, hi) in enumerate(PREPROCESS_BOX):
        keep &= (pts[:, axis] >= lo) & (pts[:, axis] <= hi)
    idx = np.flatnonzero(keep)
    if idx.size == 0:
        raise EmptyFrame(f"no points survive preprocessing (frame {frame.frame_index})")
    if mode == "test":
        return idx
    rng = np.random.default_rng(seed)
    chosen = rng.choice(idx, size=SAMPLE_SIZE, replace=idx.size < SAMPLE_SIZE)
    return np.sort(chosen)


def preprocess(frame: RadarFrame, mode: str, seed: int = 0) -> RadarFrame:
    return frame.subset(preprocess_indices(frame, mode, seed))


def _frame_seed(seed: int, frame_index: int) -> np.random.SeedSequence:
    # the same frame must resample identically as a pair's target and as the
    # next pair's source, or temporal state sees a discontinuity
    return np.random.SeedSequence((seed, frame_index))


def pair_samples(seq: Sequence, mode: str, seed: int = 0) -> list[Sample]:
    """Consecutive frame pairs as training samples; labels follow the source
    frame's resampling.  Pairs whose frames lose every point are skipped."""
    if seq.labels is None:
        raise ConfigError(f"sequence {seq.seq_id} has no labels")
    samples = []
    for i in range(seq.n_samples):
        try:
            src_idx = preprocess_indices(seq.frames[i], mode, _frame_seed(seed, i))
            tgt_idx = preprocess_indices(seq.frames[i + 1], mode, _frame_seed(seed, i + 1))
        except EmptyFrame:
            log.warning("skipping empty pair %d of %s", i, seq.seq_id)
            continue
        samples.append(
            Sample(
                source=seq.frames[i].subset(src_idx),
                target=seq.frames[i + 1].subset(tgt_idx),
                label=seq.labels[i].subset(src_idx),
            )
        )
    return samples


def make_clips(samples: list[Sample]) -> list[list[Sample]]:
    """Chunk samples into consecutive, non-overlapping clips of CLIP_LENGTH;
    the remainder is dropped.  Clips never span a temporal gap."""
    runs, current = [], []
    for s in samples:
        if current and s.source.frame_index != current[-1].source.frame_index + 1:
            runs.append(current)
            current = []
        current.append(s)
    if current:
        runs.append(current)

    clips = []
    for run in runs:
        for start in range(0, len(run) - CLIP_LENGTH + 1, CLIP_LENGTH):
            clip = [
                dataclasses.replace(s, clip_position=j)
                for j, s in enumerate(run[start : start + CLIP_LENGTH])
            ]
            clips.append(clip)
    if not clips and samples:
        log.warning("fewer than %d samples; no clips produced", CLIP_LENGTH)
    return clips


# ----------------------------------------------------------------------
# splits


def split(sequences, seed: int = 0) -> SplitManifest:
    """Subject-disjoint 3:1:2 split; out-of-set activity sequences are listed
    separately regardless of their subject's partition."""
    seqs = list(sequences)
    subjects = sorted({s.subject_id for s in seqs})
    n = len(subjects)
    if n < 6:
        raise TooFewSubjects(f"need at least 6 subjects for a 3:1:2 split, got {n}")
    order = np.random.default_rng(seed).permutation(n)
    shuffled = [subjects[i] for i in order]
    n_val = max(1, round(n / 6))
    n_test = max(1, round(n / 3))
    n_train = n - n_val - n_test
    manifest = SplitManifest(
        train_subjects=tuple(sorted(shuffled[:n_train])),
        val_subjects=tuple(sorted(shuffled[n_train : n_train + n_val])),
        test_subjects=tuple(sorted(shuffled[n_train + n_val :])),
        out_of_set_sequences=tuple(
            sorted(s.seq_id for s in seqs if s.activity_id in OUT_OF_SET_ACTIVITIES)
        ),
    )
    return manifest


# ----------------------------------------------------------------------
# serialization


def _frame_record(frame: RadarFrame, pose: SkeletonPose, obs: ObservedKeypoints) -> dict:
    rec = {
        "frame_index": int(frame.frame_index),
        "timestamp": float(frame.timestamp),
        "points": np.column_stack([frame.points, frame.intensities]).tolist(),
        "keypoints": np.column_stack([obs.positions, obs.confidences]).tolist(),
        "pose_gt": pose.keypoints.tolist(),
    }
    if frame.prov_bone is not None:
        rec["bone_prov"] = [int(b) for b in frame.prov_bone]
    return rec


def _parse_frame_record(rec: dict):
    pts = np.asarray(rec["points"], dtype=np.float64).reshape(-1, 4)
    kps = np.asarray(rec["keypoints"], dtype=np.float64).reshape(-1, 4)
    prov = rec.get("bone_prov")
    frame = RadarFrame(
        points=pts[:, :3],
        intensities=pts[:, 3],
        frame_index=int(rec["frame_index"]),
        timestamp=float(rec["timestamp"]),
        prov_bone=None if prov is None else np.asarray(prov, dtype=np.int64),
    )
    pose = SkeletonPose(
        keypoints=np.asarray(rec["pose_gt"], dtype=np.float64),
        frame_index=int(rec["frame_index"]),
        timestamp=float(rec["timestamp"]),
    )
    obs = ObservedKeypoints(positions=kps[:, :3], confidences=kps[:, 3])
    return frame, pose, obs


def _label_record(label: FlowLabel) -> dict:
    return {
        "flows": label.flows.tolist(),
        "valid": [bool(v) for v in label.valid_mask],
        "bone": [int(b) for b in label.bone_assignment],
        "segment": [int(s) for s in label.segment_label],
    }


def _parse_label_record(rec: dict) -> FlowLabel:
    return FlowLabel(
        flows=np.asarray(rec["flows"], dtype=np.float64).reshape(-1, 3),
        valid_mask=np.asarray(rec["valid"], dtype=bool),
        bone_assignment=np.asarray(rec["bone"], dtype=np.int64),
        segment_label=np.asarray(rec["segment"], dtype=np.int64),
    )


def _write_array(f, arr: np.ndarray, fmt: str):
    flat = np.ascontiguousarray(arr, dtype=fmt)
    f.write(struct.pack("<I", flat.size))
    f.write(flat.tobytes())


def _read_array(f, fmt: str, shape=None) -> np.ndarray:
    (count,) = struct.unpack("<I", f.read(4))
    itemsize = np.dtype(fmt).itemsize
    arr = np.frombuffer(f.read(itemsize * count), dtype=fmt)
    return arr.reshape(shape) if shape is not None else arr


def _write_binary_frames(path: Path, seq: Sequence):
    with open(path, "wb") as f:
        f.write(_BINARY_MAGIC)
        f.write(struct.pack("<II", _BINARY_VERSION, len(seq.frames)))
        for frame, pose, obs in zip(seq.frames, seq.poses, seq.observed_kps):
            f.write(struct.pack("<I", int(frame.frame_index)))
            f.write(struct.pack("<d", float(frame.timestamp)))
            _write_array(f, np.column_stack([frame.points, frame.intensities]), "<f8")
            _write_array(f, np.column_stack([obs.positions, obs.confidences]), "<f8")
            _write_array(f, pose.keypoints, "<f8")
            f.write(struct.pack("<B", frame.prov_bone is not None))
            if frame.prov_bone is not None:
                _write_array(f, frame.prov_bone, "<q")


def _read_binary_frames(path: Path):
    frames, poses, observed = [], [], []
    with open(path, "rb") as f:
        if f.read(4) != _BINARY_MAGIC:
            raise ConfigError(f"{path} is not a binary sequence file")
        version, n = struct.unpack("<II", f.read(8))
        if version != _BINARY_VERSION:
            raise ConfigError(f"unsupported binary version {version}")
        for _ in range(n):
            (frame_index,) = struct.unpack("<I", f.read(4))
            (timestamp,) = struct.unpack("<d", f.read(8))
            pts = _read_array(f, "<f8").reshape(-1, 4)
            kps = _read_array(f, "<f8").reshape(-1, 4)
            pose_kp = _read_array(f, "<f8").reshape(-1, 3)
            (has_prov,) = struct.unpack("<B", f.read(1))
            prov = _read_array(f, "<q").astype(np.int64) if has_prov else None
            frames.append(
                RadarFrame(pts[:, :3].copy(), pts[:, 3].copy(), frame_index,
                           timestamp, prov)
            )
            poses.append(SkeletonPose(pose_kp.copy(), frame_index, timestamp))
            observed.append(ObservedKeypoints(kps[:, :3].copy(), kps[:, 3].copy()))
    return frames, poses, observed


def _write_binary_labels(path: Path, labels: list):
    with open(path, "wb") as f:
        f.write(_BINARY_MAGIC)
        f.write(struct.pack("<II", _BINARY_VERSION, len(labels)))
        for lab in labels:
            _write_array(f, lab.flows, "<f8")
            _write_array(f, lab.valid_mask, "<B")
            _write_array(f, lab.bone_assignment, "<q")
            _write_array(f, lab.segment_label, "<q")


def _read_binary_labels(path: Path) -> list:
    labels = []
    with open(path, "rb") as f:
        if f.read(4) != _BINARY_MAGIC:
            raise ConfigError(f"{path} is not a binary label file")
        version, n = struct.unpack("<II", f.read(8))
        if version != _BINARY_VERSION:
            raise ConfigError(f"unsupported binary version {version}")
        for _ in range(n):
            flows = _read_array(f, "<f8").reshape(-1, 3)
            valid = _read_array(f, "<B").astype(bool)
            bone = _read_array(f, "<q").astype(np.int64)
            segment = _read_array(f, "<q").astype(np.int64)
            labels.append(FlowLabel(flows.copy(), valid, bone, segment))
    return labels


def sequence_dir(root, seq_id: str) -> Path:
    return Path(root) / f"seq_{seq_id}"


def save_sequence(root, seq: Sequence, binary: bool = False) -> Path:
    out = sequence_dir(root, seq.seq_id)
    out.mkdir(parents=True, exist_ok=True)
    if binary:
        _write_binary_frames(out / "frames.bin", seq)
        if seq.labels is not None:
            _write_binary_labels(out / "labels.bin", seq.labels)
    else:
        with open(out / "frames.jsonl", "w") as f:
            for frame, pose, obs in zip(seq.frames, seq.poses, seq.observed_kps):
                f.write(json.dumps(_frame_record(frame, pose, obs),
                                   separators=(",", ":")) + "\n")
        if seq.labels is not None:
            with open(out / "labels.jsonl", "w") as f:
                for lab in seq.labels:
                    f.write(json.dumps(_label_record(lab),
                                       separators=(",", ":")) + "\n")
    return out


def save_labels(root, seq_id: str, labels: list, binary: bool = False) -> Path:
    """Write labels for an already stored sequence."""
    out = sequence_dir(root, seq_id)
    if not out.is_dir():
        raise ConfigError(f"no sequence stored under {out}")
    if binary:
        _write_binary_labels(out / "labels.bin", labels)
    else:
        with open(out / "labels.jsonl", "w") as f:
            for lab in labels:
                f.write(json.dumps(_label_record(lab),
                                   separators=(",", ":")) + "\n")
    return out


def _parse_seq_id(seq_id: str):
    try:
        subject, activity, scene = seq_id.split("_")
        return int(subject), activity, int(scene)
    except ValueError as e:
        raise ConfigError(f"malformed sequence id {seq_id!r}") from e


def load_sequence(root, seq_id: str) -> Sequence:
    src = sequence_dir(root, seq_id)
    subject, activity, scene = _parse_seq_id(seq_id)
    if (src / "frames.bin").exists():
        frames, poses, observed = _read_binary_frames(src / "frames.bin")
        labels = (
            _read_binary_labels(src / "labels.bin")
            if (src / "labels.bin").exists()
            else None
        )
    elif (src / "frames.jsonl").exists():
        frames, poses, observed = [], [], []
        with open(src / "frames.jsonl") as f:
            for line in f:
                frame, pose, obs = _parse_frame_record(json.loads(line))
                frames.append(frame)
                poses.append(pose)
                observed.append(obs)
        labels = None
        if (src / "labels.jsonl").exists():
            with open(src / "labels.jsonl") as f:
                labels = [_parse_label_record(json.loads(line)) for line in f]
    else:
        raise ConfigError(f"no frame data under {src}")
    return Sequence(subject, activity, scene, frames, poses, observed, labels)


def write_manifest(root, data: dict) -> Path:
    path = Path(root) / "manifest.json"
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w") as f:
        json.dump(data, f, indent=2, sort_keys=True)
        f.write("\n")
    return path


def read_manifest(root) -> dict:
    path = Path(root) / "manifest.json"
    if not path.exists():
        raise ConfigError(f"missing manifest: {path}")
    with open(path) as f:
        return json.load(f)


def list_sequences(root) -> list[str]:
    return sorted(p.name[4:] for p in Path(root).glob("seq_*") if p.is_dir())
