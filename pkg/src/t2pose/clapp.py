"""Contrastive text/pose scorer.

Two towers map a caption and a pose into a shared unit sphere:

* text: masked mean of the token feature rows, then a 2-layer MLP
* pose: the flattened 128 x (x, y, exists) sequence, then a 2-layer MLP

The score of a pair is the cosine of the two embeddings, so it lies in
[-1, 1]. Training uses the symmetric InfoNCE loss over a batch of
pairs with pairwise distinct captions.
"""

from __future__ import annotations

import csv
import math
from dataclasses import asdict, dataclass

import numpy as np

from . import tensor as tn
from .checkpoint import load_tensors, read_sidecar, save_tensors, write_sidecar
from .nn import MLP, Module, param
from .pose import N_SLOTS, Pose
from .synth import parse_caption
from .text_features import D_TEXT, TextFeatures, encode_toy

LOGIT_SCALE_INIT = math.log(1 / 0.07)
LOGIT_SCALE_MAX = math.log(100.0)


class ClappError(ValueError):
    pass


@dataclass(frozen=True)
class ClappConfig:
    d_text: int = D_TEXT
    d_joint: int = 64
    d_hidden: int = 256

    def __post_init__(self):
        if min(self.d_text, self.d_joint, self.d_hidden) < 1:
            raise ClappError("all widths must be positive")


class ClappModel(Module):
    def __init__(self, cfg: ClappConfig | None = None, seed: int = 0):
        cfg = cfg or ClappConfig()
        self.config = cfg
        rng = np.random.default_rng(seed)
        self.text_mlp = MLP(cfg.d_text, cfg.d_hidden, cfg.d_joint, rng)
        self.pose_mlp = MLP(3 * N_SLOTS, cfg.d_hidden, cfg.d_joint, rng)
        self.logit_scale = param(np.array(LOGIT_SCALE_INIT))

    def clamp_scale(self) -> None:
        self.logit_scale.data = np.minimum(self.logit_scale.data, LOGIT_SCALE_MAX).astype(self.logit_scale.dtype)

    def embed_text(self, feats, mask=None) -> tn.Tensor:
        """(B, L, D) features with a (B, L) mask -> (B, d_joint) unit rows."""
        feats, mask = _text_batch(feats, mask)
        if feats.shape[-1] != self.config.d_text:
            raise ClappError(f"text feature dim {feats.shape[-1]} does not match d_text {self.config.d_text}")
        m = mask[..., None].astype(feats.dtype)
        pooled = (feats * m).sum(1) / np.maximum(m.sum(1), 1.0)
        return tn.l2_normalize(self.text_mlp(tn.Tensor(pooled.astype(self.logit_scale.dtype))))

    def embed_pose(self, poses) -> tn.Tensor:
        x = _pose_batch(poses)
        flat = x.reshape(x.shape[0], 3 * N_SLOTS).astype(self.logit_scale.dtype)
        return tn.l2_normalize(self.pose_mlp(tn.Tensor(flat)))

    def similarity(self, feats, mask, poses) -> np.ndarray:
        with tn.no_grad():
            return self.embed_text(feats, mask).data @ self.embed_pose(poses).data.T

    def save(self, path) -> None:
        save_tensors(path, self.state_dict())
        write_sidecar(path, {"kind": "clapp", "config": asdict(self.config)})

    @classmethod
    def load(cls, path) -> ClappModel:
        meta = read_sidecar(path)
        if meta.get("kind") != "clapp":
            raise ClappError(f"{path}: not a CLaPP checkpoint (kind={meta.get('kind')!r})")
        model = cls(ClappConfig(**meta["config"]))
        model.load_state_dict(load_tensors(path))
        return model


def _text_batch(feats, mask):
    if isinstance(feats, TextFeatures):
        return feats.features[None], feats.mask()[None]
    if isinstance(feats, (list, tuple)):
        return np.stack([f.features for f in feats]), np.stack([f.mask() for f in feats])
    feats = np.asarray(feats)
    if feats.ndim == 2:
        feats = feats[None]
    if mask is None:
        mask = np.ones(feats.shape[:2], dtype=bool)
    return feats, np.asarray(mask, dtype=bool).reshape(feats.shape[:2])


def _pose_batch(poses) -> np.ndarray:
    if isinstance(poses, Pose):
        return poses.to_array()[None]
    if isinstance(poses, (list, tuple)):
        return np.stack([p.to_array() if isinstance(p, Pose) else np.asarray(p) for p in poses])
    x = np.asarray(poses)
    return x[None] if x.ndim == 2 else x


def _features(prompt, d_text) -> TextFeatures:
    return prompt if isinstance(prompt, TextFeatures) else encode_toy(prompt, d_text)


def clapp_score(model: ClappModel, prompt, pose: Pose) -> float:
    """Cosine similarity of the caption and pose embeddings."""
    f = _features(prompt, model.config.d_text)
    return float(model.similarity(f.features[None], f.mask()[None], pose)[0, 0])


def scores(model: ClappModel, prompts, poses) -> np.ndarray:
    """Row-wise scores: prompt i against pose i."""
    feats = [_features(p, model.config.d_text) for p in prompts]
    with tn.no_grad():
        t = model.embed_text(feats).data
        p = model.embed_pose(list(poses)).data
    return np.sum(t * p, axis=1)


def symmetric_infonce(logits: tn.Tensor) -> tn.Tensor:
    """Mean of the row-wise and column-wise cross-entropy against the diagonal."""
    B = logits.shape[0]
    if B < 2 or logits.shape != (B, B):
        raise ClappError(f"contrastive loss needs a square batch with B >= 2, got {logits.shape}")
    eye = np.eye(B, dtype=logits.dtype)
    rows = tn.sum_(tn.log_softmax(logits, axis=1) * eye) * (-1.0 / B)
    cols = tn.sum_(tn.log_softmax(logits, axis=0) * eye) * (-1.0 / B)
    return (rows + cols) * 0.5


def contrastive_loss(model: ClappModel, feats, mask, poses) -> tn.Tensor:
    t = model.embed_text(feats, mask)
    p = model.embed_pose(poses)
    if t.shape[0] < 2:
        raise ClappError(f"contrastive loss needs batch size >= 2, got {t.shape[0]}")
    scale = tn.exp(model.logit_scale)
    return symmetric_infonce((t @ tn.transpose(p)) * scale)


def score_matrix(model: ClappModel, records) -> np.ndarray:
    """All-pairs scores: entry (i, j) is caption i against pose j."""
    feats = [encode_toy(r.caption, model.config.d_text) for r in records]
    with tn.no_grad():
        t = model.embed_text(feats).data
        p = model.embed_pose([r.pose for r in records]).data
    return np.clip(t @ p.T, -1.0, 1.0)


def write_matrix_csv(matrix: np.ndarray, captions, path) -> None:
    """Rows are captions, columns pose indices; first column holds the caption."""
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["caption"] + [f"pose_{j}" for j in range(matrix.shape[1])])
        for cap, row in zip(captions, matrix):
            w.writerow([cap] + [f"{v:.6f}" for v in row])


def diagonal_dominance(matrix: np.ndarray) -> np.ndarray:
    """Per row: diagonal entry beats every other entry in its row and column."""
    m = np.asarray(matrix)
    n = m.shape[0]
    out = np.empty(n, dtype=bool)
    for i in range(n):
        d = m[i, i]
        out[i] = np.all(np.delete(m[i], i) < d) and np.all(np.delete(m[:, i], i) < d)
    return out


class DistinctCaptionSampler:
    """Draws batches of record indices whose captions are pairwise distinct."""

    def __init__(self, captions, batch_size: int, rng: np.random.Generator):
        if batch_size < 2:
            raise ClappError(f"batch_size must be >= 2, got {batch_size}")
        self.captions = list(captions)
        n_distinct = len(set(self.captions))
        if n_distinct < batch_size:
            raise ClappError(f"only {n_distinct} distinct captions, cannot fill a batch of {batch_size}")
        self.batch_size = batch_size
        self.rng = rng

    def next_batch(self) -> np.ndarray:
        seen, out = set(), []
        for i in self.rng.permutation(len(self.captions)):
            c = self.captions[i]
            if c not in seen:
                seen.add(c)
                out.append(i)
                if len(out) == self.batch_size:
                    break
        return np.array(out)


def retrieval_accuracy(model: ClappModel, records, n_candidates: int = 64, seed: int = 0) -> float:
    """Top-1 text-to-pose retrieval within shuffled groups of ``n_candidates``.

    A hit means the retrieved pose's caption parses to the same scene as
    the query caption; several records in a group can share a scene and
    are indistinguishable by construction.
    """
    records = list(records)
    if len(records) < n_candidates:
        raise ClappError(f"need at least {n_candidates} records, got {len(records)}")
    order = np.random.default_rng(seed).permutation(len(records))
    specs = [parse_caption(r.caption) for r in records]
    hits = total = 0
    for g in range(len(records) // n_candidates):
        idx = order[g * n_candidates:(g + 1) * n_candidates]
        m = score_matrix(model, [records[i] for i in idx])
        best = np.argmax(m, axis=1)
        hits += sum(specs[idx[i]] == specs[idx[j]] for i, j in enumerate(best))
        total += n_candidates
    return hits / total
