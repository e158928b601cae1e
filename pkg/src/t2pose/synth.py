"""Procedural (caption, pose) corpora.

Each record is drawn from a uniformly chosen :class:`SceneSpec`, rendered
as one stick figure from joint templates and captioned from a small
grammar. Record ``i`` depends only on ``(seed, i)``.

Caption grammar (version 1)::

    caption  ::= one-person | two-people
    one-person ::= SUBJ1 " " POS " with " ARMS DETAIL
    two-people ::= SUBJ2 " " POS2 " with " ARMS DETAIL
                 | SUBJ2 " shaking hands" DETAIL
    SUBJ1  ::= "one person" | "a person" | "a single person"
    SUBJ2  ::= "two people" | "a pair of people"
    POS    ::= "on the left" | "on the left side" | "in the center"
             | "in the middle" | "on the right" | "on the right side"
    POS2   ::= "on either side" | "on both sides"
    ARMS   ::= "arms up" | "raised arms" | "arms down" | "lowered arms"
             | "arms out" | "outstretched arms"
    DETAIL ::= "" | ", face visible" | ", hands visible"
             | ", face and hands visible"

A pose holds a single person, so a two-person scene contributes the
figure on one side (left or right, chosen per record). Two-person
figures are drawn at 0.75x the single-person scale, centred at x=0.25
or x=0.75; single figures are centred at 0.22 / 0.5 / 0.78.
"""

from __future__ import annotations

import itertools
import re
from dataclasses import dataclass

import numpy as np

from .pose import FACE, LEFT_HAND, N_SLOTS, RIGHT_HAND, Pose, PoseRecord

GRAMMAR_VERSION = "1"
JITTER = 0.01

ARM_STATES = ("up", "down", "out", "shaking-hands")
POSITIONS = ("left", "center", "right", "both-sides")


@dataclass(frozen=True)
class SceneSpec:
    n_people: int
    arm_state: str
    position: str
    face_present: bool
    hands_present: bool

    def __post_init__(self):
        if self.n_people not in (1, 2):
            raise ValueError(f"n_people must be 1 or 2, got {self.n_people}")
        if self.arm_state not in ARM_STATES:
            raise ValueError(f"unknown arm_state {self.arm_state!r}")
        if self.position not in POSITIONS:
            raise ValueError(f"unknown position {self.position!r}")
        if self.arm_state == "shaking-hands" and self.n_people != 2:
            raise ValueError("shaking-hands requires n_people == 2")
        if (self.position == "both-sides") != (self.n_people == 2):
            raise ValueError("two-person scenes use position 'both-sides', single ones do not")


def all_specs() -> list[SceneSpec]:
    specs = []
    for face, hands in itertools.product((False, True), repeat=2):
        for pos, arms in itertools.product(("left", "center", "right"), ("up", "down", "out")):
            specs.append(SceneSpec(1, arms, pos, face, hands))
        for arms in ARM_STATES:
            specs.append(SceneSpec(2, arms, "both-sides", face, hands))
    return specs


_SPECS = all_specs()

SUBJ1 = ("one person", "a person", "a single person")
SUBJ2 = ("two people", "a pair of people")
POS_PHRASES = {
    "left": ("on the left", "on the left side"),
    "center": ("in the center", "in the middle"),
    "right": ("on the right", "on the right side"),
    "both-sides": ("on either side", "on both sides"),
}
ARM_PHRASES = {
    "up": ("arms up", "raised arms"),
    "down": ("arms down", "lowered arms"),
    "out": ("arms out", "outstretched arms"),
}
DETAILS = {
    (False, False): "",
    (True, False): ", face visible",
    (False, True): ", hands visible",
    (True, True): ", face and hands visible",
}

# fixed prompts for the benchmark and temperature studies
BENCHMARK_PROMPTS = (
    "one person on the left with arms up",
    "one person in the center with arms out",
    "one person on the right with arms down",
    "two people on either side with arms up",
    "two people shaking hands",
)


def caption_for(spec: SceneSpec, rng: np.random.Generator | None = None) -> str:
    """Caption a spec; ``rng`` picks paraphrases, ``None`` gives the canonical one."""

    def pick(options):
        return options[0] if rng is None else options[int(rng.integers(len(options)))]

    detail = DETAILS[(spec.face_present, spec.hands_present)]
    if spec.n_people == 2 and spec.arm_state == "shaking-hands":
        return f"{pick(SUBJ2)} shaking hands{detail}"
    subj = pick(SUBJ1 if spec.n_people == 1 else SUBJ2)
    return f"{subj} {pick(POS_PHRASES[spec.position])} with {pick(ARM_PHRASES[spec.arm_state])}{detail}"


def _alt(options):
    return "|".join(re.escape(o) for o in sorted(options, key=len, reverse=True))


_DETAIL_RE = r"(?P<detail>, face and hands visible|, face visible|, hands visible)?"
_ONE_RE = re.compile(
    rf"^(?:{_alt(SUBJ1)}) (?P<pos>{_alt(sum((POS_PHRASES[p] for p in ('left', 'center', 'right')), ()))})"
    rf" with (?P<arms>{_alt(sum(ARM_PHRASES.values(), ()))}){_DETAIL_RE}$"
)
_TWO_RE = re.compile(
    rf"^(?:{_alt(SUBJ2)}) (?:(?P<pos>{_alt(POS_PHRASES['both-sides'])}) with "
    rf"(?P<arms>{_alt(sum(ARM_PHRASES.values(), ()))})|(?P<shake>shaking hands)){_DETAIL_RE}$"
)


def parse_caption(caption: str) -> SceneSpec:
    """Invert :func:`caption_for`; raises ValueError on text outside the grammar."""
    lookup_pos = {ph: k for k, v in POS_PHRASES.items() for ph in v}
    lookup_arm = {ph: k for k, v in ARM_PHRASES.items() for ph in v}
    flags = {None: (False, False), ", face visible": (True, False),
             ", hands visible": (False, True), ", face and hands visible": (True, True)}
    m = _ONE_RE.match(caption)
    if m:
        face, hands = flags[m["detail"]]
        return SceneSpec(1, lookup_arm[m["arms"]], lookup_pos[m["pos"]], face, hands)
    m = _TWO_RE.match(caption)
    if m:
        face, hands = flags[m["detail"]]
        arms = "shaking-hands" if m["shake"] else lookup_arm[m["arms"]]
        return SceneSpec(2, arms, "both-sides", face, hands)
    raise ValueError(f"caption outside grammar v{GRAMMAR_VERSION}: {caption!r}")


# -- figure templates -------------------------------------------------------

# offsets from the neck at scale 1, image coordinates (y down); the person's
# right side is on the image left
_BODY_TEMPLATE = {
    0: (0.0, -0.07),                      # nose
    1: (0.0, 0.0),                        # neck
    2: (-0.06, 0.0), 5: (0.06, 0.0),      # shoulders
    8: (-0.035, 0.22), 11: (0.035, 0.22),   # hips
    9: (-0.04, 0.38), 12: (0.04, 0.38),   # knees
    10: (-0.045, 0.53), 13: (0.045, 0.53),  # ankles
    14: (-0.015, -0.085), 15: (0.015, -0.085),  # eyes
    16: (-0.035, -0.075), 17: (0.035, -0.075),  # ears
}

# (elbow offset from shoulder, wrist offset from elbow) for the image-left arm;
# the image-right arm mirrors x
_ARMS = {
    "up": ((-0.03, -0.085), (-0.01, -0.085)),
    "down": ((-0.015, 0.09), (-0.005, 0.085)),
    "out": ((-0.09, 0.0), (-0.085, 0.0)),
    "reach": ((0.08, 0.04), (0.08, 0.0)),   # towards image right
}

SINGLE_X = {"left": 0.22, "center": 0.5, "right": 0.78}
PAIR_X = (0.25, 0.75)
NECK_Y = 0.3
PAIR_SCALE = 0.75


def _face_template() -> np.ndarray:
    """68 iBUG-ordered points relative to the face centre, half-size (1, 1)."""
    pts = []
    t = np.linspace(0, 1, 17)
    th = np.pi * (1 - t)
    pts += list(zip(np.cos(th), np.sin(th) * 0.9 + 0.1))  # jaw
    for side in (-1, 1):  # right brow (image left) then left brow
        xs = np.linspace(0.8, 0.2, 5) if side < 0 else np.linspace(0.2, 0.8, 5)
        pts += [(side * x, -0.6 - 0.08 * np.sin(np.pi * (x - 0.2) / 0.6)) for x in xs]
    pts += [(0.0, y) for y in np.linspace(-0.45, -0.05, 4)]
    pts += [(x, 0.1) for x in np.linspace(-0.25, 0.25, 5)]
    for side in (-1, 1):
        a = np.linspace(0, 2 * np.pi, 6, endpoint=False)
        pts += list(zip(side * 0.45 + 0.18 * np.cos(a + np.pi), -0.35 + 0.07 * np.sin(a)))
    a = np.linspace(0, 2 * np.pi, 12, endpoint=False)
    pts += list(zip(0.4 * np.cos(a + np.pi), 0.45 + 0.14 * np.sin(a)))
    a = np.linspace(0, 2 * np.pi, 8, endpoint=False)
    pts += list(zip(0.3 * np.cos(a + np.pi), 0.45 + 0.06 * np.sin(a)))
    out = np.array(pts, dtype=np.float64)
    assert out.shape == (68, 2)
    return out


_FACE = _face_template()
_FACE_HALF = np.array([0.035, 0.045])


def _hand_points(wrist, direction, scale) -> np.ndarray:
    """21 hand points laid out along the forearm direction."""
    u = direction / (np.linalg.norm(direction) + 1e-12)
    v = np.array([-u[1], u[0]])
    pts = [wrist]
    spread = (-0.012, -0.006, 0.0, 0.006, 0.011)
    reach = (0.010, 0.018, 0.019, 0.018, 0.015)
    for f in range(5):
        base = wrist + scale * (u * (0.006 if f == 0 else 0.014) + v * spread[f])
        for j in range(1, 5):
            pts.append(base + scale * u * reach[f] * j / 4 + scale * v * (spread[f] * 0.3 * j / 4))
    return np.array(pts)


def _render_figure(cx, scale, arms_left, arms_right, face, hands, rng) -> Pose:
    """Place one figure; ``arms_left``/``arms_right`` are _ARMS keys per image side."""
    xy = np.zeros((N_SLOTS, 2))
    exists = np.zeros(N_SLOTS, dtype=bool)
    neck = np.array([cx + rng.normal(0, 0.02), NECK_Y + rng.normal(0, 0.02)])
    for i, off in _BODY_TEMPLATE.items():
        xy[i] = neck + scale * np.asarray(off)
    for sho, elb, wri, key, mirror in ((2, 3, 4, arms_left, 1.0), (5, 6, 7, arms_right, -1.0)):
        e_off, w_off = _ARMS[key]
        if key == "reach":
            mirror = 1.0 if sho == 5 else -1.0
        xy[elb] = xy[sho] + scale * np.array([mirror * e_off[0], e_off[1]])
        xy[wri] = xy[elb] + scale * np.array([mirror * w_off[0], w_off[1]])
    exists[:18] = True
    if face:
        centre = xy[0] + scale * np.array([0.0, 0.005])
        xy[FACE] = centre + scale * _FACE * _FACE_HALF
        exists[FACE] = True
    if hands:
        # person's left hand sits at body index 7, right hand at index 4
        xy[LEFT_HAND] = _hand_points(xy[7], xy[7] - xy[6], scale)
        xy[RIGHT_HAND] = _hand_points(xy[4], xy[4] - xy[3], scale)
        exists[LEFT_HAND] = True
        exists[RIGHT_HAND] = True
    xy = xy + rng.normal(0, JITTER, size=xy.shape)
    xy = np.clip(xy, 0.0, 1.0)
    return Pose(xy, exists)


def render_spec(spec: SceneSpec, rng: np.random.Generator) -> Pose:
    s = float(rng.uniform(0.9, 1.1))
    if spec.n_people == 1:
        return _render_figure(SINGLE_X[spec.position], s, spec.arm_state, spec.arm_state,
                              spec.face_present, spec.hands_present, rng)
    side = int(rng.integers(2))  # 0: figure on the left, 1: on the right
    cx = PAIR_X[side]
    s *= PAIR_SCALE
    if spec.arm_state == "shaking-hands":
        # reach towards the partner with the arm on the inner side
        left, right = ("down", "reach") if side == 0 else ("reach", "down")
    else:
        left = right = spec.arm_state
    return _render_figure(cx, s, left, right, spec.face_present, spec.hands_present, rng)


@dataclass(frozen=True)
class SynthCorpus:
    records: tuple
    seed: int
    grammar_version: str = GRAMMAR_VERSION

    def __len__(self):
        return len(self.records)


def generate_record(seed: int, i: int) -> tuple[PoseRecord, SceneSpec]:
    rng = np.random.default_rng([seed, i])
    spec = _SPECS[int(rng.integers(len(_SPECS)))]
    caption = caption_for(spec, rng)
    pose = render_spec(spec, rng)
    return PoseRecord(caption, pose, f"synth-v{GRAMMAR_VERSION}:{seed}:{i}"), spec


def generate_corpus(seed: int, size: int) -> SynthCorpus:
    if size < 1:
        raise ValueError(f"size must be >= 1, got {size}")
    return SynthCorpus(tuple(generate_record(seed, i)[0] for i in range(size)), seed)


def split(corpus, train_frac: float, seed: int | None = None):
    """Seeded shuffle, then cut; returns (train, eval) record lists."""
    if not 0 < train_frac < 1:
        raise ValueError(f"train_frac must be in (0, 1), got {train_frac}")
    records = list(corpus.records if isinstance(corpus, SynthCorpus) else corpus)
    if seed is None:
        seed = corpus.seed if isinstance(corpus, SynthCorpus) else 0
    perm = np.random.default_rng([seed, 0x5EED]).permutation(len(records))
    n_train = int(round(train_frac * len(records)))
    return [records[i] for i in perm[:n_train]], [records[i] for i in perm[n_train:]]
