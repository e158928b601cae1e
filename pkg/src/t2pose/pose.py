"""128-slot pose layout, normalization and JSON-lines record I/O.

Slot layout (fixed, never reordered)::

    0   - 17   body  (18-point OpenPose order, see BODY_NAMES)
    18  - 85   face  (68-point iBUG order)
    86  - 106  left hand  (21 points: wrist + 4 per finger, thumb first)
    107 - 127  right hand

Coordinates are normalized image coordinates in [0, 1] with y pointing
down. A missing keypoint is stored as (0, 0) with ``exists=False``.
"""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass
from pathlib import Path
from typing import NamedTuple

import numpy as np

log = logging.getLogger(__name__)

N_SLOTS = 128
BODY = slice(0, 18)
FACE = slice(18, 86)
LEFT_HAND = slice(86, 107)
RIGHT_HAND = slice(107, 128)

BODY_NAMES = (
    "nose", "neck",
    "right_shoulder", "right_elbow", "right_wrist",
    "left_shoulder", "left_elbow", "left_wrist",
    "right_hip", "right_knee", "right_ankle",
    "left_hip", "left_knee", "left_ankle",
    "right_eye", "left_eye", "right_ear", "left_ear",
)

BODY_EDGES = (
    (1, 2), (1, 5), (2, 3), (3, 4), (5, 6), (6, 7),
    (1, 8), (8, 9), (9, 10), (1, 11), (11, 12), (12, 13),
    (1, 0), (0, 14), (14, 16), (0, 15), (15, 17),
)

_FACE_REGIONS = (
    ("jaw", 17), ("right_brow", 5), ("left_brow", 5), ("nose_bridge", 4),
    ("nose_base", 5), ("right_eye", 6), ("left_eye", 6),
    ("outer_lip", 12), ("inner_lip", 8),
)
FACE_NAMES = tuple(
    f"{region}_{i:02d}" for region, n in _FACE_REGIONS for i in range(n)
)

FINGERS = ("thumb", "index", "middle", "ring", "pinky")
_FINGER_JOINTS = {
    "thumb": ("cmc", "mcp", "ip", "tip"),
    "index": ("mcp", "pip", "dip", "tip"),
    "middle": ("mcp", "pip", "dip", "tip"),
    "ring": ("mcp", "pip", "dip", "tip"),
    "pinky": ("mcp", "pip", "dip", "tip"),
}
HAND_NAMES = ("wrist",) + tuple(f"{f}_{j}" for f in FINGERS for j in _FINGER_JOINTS[f])
# wrist -> joint1 -> joint2 -> joint3 -> tip, per finger (hand-local indices)
HAND_EDGES = tuple(
    edge
    for f in range(5)
    for edge in zip((0, 1 + 4 * f, 2 + 4 * f, 3 + 4 * f), (1 + 4 * f, 2 + 4 * f, 3 + 4 * f, 4 + 4 * f))
)

SLOT_NAMES = (
    tuple(f"body.{n}" for n in BODY_NAMES)
    + tuple(f"face.{n}" for n in FACE_NAMES)
    + tuple(f"left_hand.{n}" for n in HAND_NAMES)
    + tuple(f"right_hand.{n}" for n in HAND_NAMES)
)
assert len(SLOT_NAMES) == N_SLOTS


class PoseFormatError(ValueError):
    pass


class Keypoint(NamedTuple):
    x: float
    y: float
    exists: bool


class Pose:
    """Immutable 128-slot pose backed by a (128, 2) array and a (128,) mask."""

    __slots__ = ("_xy", "_exists")

    def __init__(self, xy, exists):
        xy = np.array(xy, dtype=np.float64).reshape(N_SLOTS, 2)
        exists = np.array(exists, dtype=bool).reshape(N_SLOTS)
        xy[~exists] = 0.0
        if exists.any():
            pts = xy[exists]
            if not np.all(np.isfinite(pts)) or pts.min() < 0 or pts.max() > 1:
                raise PoseFormatError("existing keypoints must lie in [0, 1]^2")
        xy.flags.writeable = False
        exists.flags.writeable = False
        self._xy = xy
        self._exists = exists

    @classmethod
    def empty(cls) -> Pose:
        return cls(np.zeros((N_SLOTS, 2)), np.zeros(N_SLOTS, dtype=bool))

    @classmethod
    def from_array(cls, arr) -> Pose:
        """Build from a (128, 3) array of (x, y, exists)."""
        arr = np.asarray(arr, dtype=np.float64)
        if arr.shape != (N_SLOTS, 3):
            raise PoseFormatError(f"expected shape (128, 3), got {arr.shape}")
        return cls(arr[:, :2], arr[:, 2] > 0.5)

    @property
    def xy(self) -> np.ndarray:
        return self._xy

    @property
    def exists(self) -> np.ndarray:
        return self._exists

    def to_array(self) -> np.ndarray:
        return np.column_stack([self._xy, self._exists.astype(np.float64)])

    @property
    def slots(self) -> tuple[Keypoint, ...]:
        return tuple(
            Keypoint(float(x), float(y), bool(e)) for (x, y), e in zip(self._xy, self._exists)
        )

    def __len__(self):
        return N_SLOTS

    def __getitem__(self, i) -> Keypoint:
        return Keypoint(float(self._xy[i, 0]), float(self._xy[i, 1]), bool(self._exists[i]))

    def __eq__(self, other):
        if not isinstance(other, Pose):
            return NotImplemented
        return np.array_equal(self._xy, other._xy) and np.array_equal(self._exists, other._exists)

    def __hash__(self):
        return hash((self._xy.tobytes(), self._exists.tobytes()))

    def __repr__(self):
        return f"Pose({int(self._exists.sum())} of {N_SLOTS} keypoints)"


@dataclass(frozen=True)
class PoseRecord:
    caption: str
    pose: Pose
    source_id: str | None = None

    def __post_init__(self):
        if not self.caption:
            raise PoseFormatError("caption must be non-empty")


@dataclass
class NormalizeStats:
    clamped: int = 0


_stats = NormalizeStats()


def normalize(raw_points, width, height, stats: NormalizeStats | None = None) -> Pose:
    """Map pixel-space (x, y, exists) triples onto the unit square.

    Out-of-frame points are clamped to the border and counted in ``stats``
    (module-level counter when omitted).
    """
    if width <= 0 or height <= 0:
        raise ValueError(f"image size must be positive, got {width}x{height}")
    raw = np.asarray(raw_points, dtype=np.float64)
    if raw.ndim != 2 or raw.shape[0] != N_SLOTS or raw.shape[1] != 3:
        got = raw.shape[0] if raw.ndim >= 1 else 0
        raise PoseFormatError(
            f"expected {N_SLOTS} points (18 body, 68 face, 21 left hand, 21 right hand), got {got}"
        )
    stats = _stats if stats is None else stats
    exists = raw[:, 2] > 0
    xy = raw[:, :2] / np.array([width, height], dtype=np.float64)
    outside = exists & np.any((xy < 0) | (xy > 1), axis=1)
    n_out = int(outside.sum())
    if n_out:
        stats.clamped += n_out
        log.warning("clamped %d out-of-frame keypoints", n_out)
    xy = np.clip(xy, 0.0, 1.0)
    return Pose(xy, exists)


# -- JSON lines -----------------------------------------------------------

def record_to_json(rec: PoseRecord) -> str:
    obj = {
        "caption": rec.caption,
        "keypoints": [[float(x), float(y), int(e)] for (x, y), e in zip(rec.pose.xy, rec.pose.exists)],
    }
    if rec.source_id is not None:
        obj["source_id"] = rec.source_id
    return json.dumps(obj, ensure_ascii=False)


def record_from_json(line: str, lineno: int = 1) -> PoseRecord:
    try:
        obj = json.loads(line)
    except json.JSONDecodeError as exc:
        raise PoseFormatError(f"malformed JSON at line {lineno}: {exc.msg}") from None
    if not isinstance(obj, dict) or "caption" not in obj or "keypoints" not in obj:
        raise PoseFormatError(f"line {lineno}: record needs 'caption' and 'keypoints'")
    kps = obj["keypoints"]
    if not isinstance(kps, list):
        raise PoseFormatError(f"line {lineno}: 'keypoints' must be a list")
    if len(kps) != N_SLOTS:
        raise PoseFormatError(f"expected {N_SLOTS} slots, got {len(kps)} at line {lineno}")
    try:
        arr = np.array(kps, dtype=np.float64)
    except (TypeError, ValueError):
        raise PoseFormatError(f"line {lineno}: keypoints must be [x, y, exists] triples") from None
    if arr.shape != (N_SLOTS, 3):
        raise PoseFormatError(f"line {lineno}: keypoints must be [x, y, exists] triples")
    try:
        pose = Pose(arr[:, :2], arr[:, 2] > 0.5)
        return PoseRecord(obj["caption"], pose, obj.get("source_id"))
    except PoseFormatError as exc:
        raise PoseFormatError(f"line {lineno}: {exc}") from None


def save_records(records, path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for rec in records:
            fh.write(record_to_json(rec) + "\n")


def load_records(path) -> list[PoseRecord]:
    out = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            out.append(record_from_json(line, lineno))
    return out


def poses_to_array(poses) -> np.ndarray:
    """Stack poses into a (N, 128, 3) float array."""
    return np.stack([p.to_array() for p in poses]) if poses else np.zeros((0, N_SLOTS, 3))


def layout_table() -> list[tuple[int, str]]:
    return list(enumerate(SLOT_NAMES))


def write_layout(path) -> None:
    Path(path).write_text("".join(f"{i}\t{n}\n" for i, n in layout_table()))
