"""Nearest-neighbour retrieval baseline and the generated-vs-retrieved benchmark.

For each held-out caption the benchmark builds two candidate poses: one
generated by the T2P model and one retrieved from the training corpus
by nearest caption embedding. Both are scored against the caption by
CLaPP; the report holds per-prompt scores, the win rate of the
generated arm (ties count half) and mean scores with normal-approximation
95% intervals, mean +- 2 * sd / sqrt(n).
"""

from __future__ import annotations

import csv
import json
import logging
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import tensor as tn
from .clapp import ClappModel, scores
from .pose import Pose
from .t2p import T2pModel
from .tempered import DEFAULT_CANDIDATES
from .text_features import encode_toy

log = logging.getLogger(__name__)

DEFAULT_TEMPERATURE = 0.3


class BenchmarkError(ValueError):
    pass


@dataclass
class KnnResult:
    indices: np.ndarray
    distances: np.ndarray
    poses: list
    note: str = ""


class KnnIndex:
    """Exhaustive cosine-distance index over unit-normalized embeddings."""

    def __init__(self, embeddings, poses, captions=None):
        emb = np.asarray(embeddings, dtype=np.float64)
        if emb.ndim != 2 or len(emb) != len(poses):
            raise BenchmarkError(f"need one embedding row per pose, got {emb.shape} for {len(poses)} poses")
        norms = np.linalg.norm(emb, axis=1, keepdims=True)
        if np.any(norms == 0):
            raise BenchmarkError("zero embedding vector cannot be normalized")
        self.embeddings = emb / norms
        self.poses = list(poses)
        self.captions = list(captions) if captions is not None else None

    def __len__(self):
        return len(self.poses)

    def query(self, q, k: int = 1) -> KnnResult:
        if k < 1:
            raise BenchmarkError(f"k must be >= 1, got {k}")
        if not len(self):
            raise BenchmarkError("index is empty")
        q = np.asarray(q, dtype=np.float64)
        q = q / np.linalg.norm(q)
        dist = 1.0 - self.embeddings @ q
        note = ""
        if k > len(self):
            note = f"k={k} exceeds index size {len(self)}; returning all entries"
            k = len(self)
        order = np.argsort(dist, kind="stable")[:k]  # ties keep insertion order
        return KnnResult(order, dist[order], [self.poses[i] for i in order], note)


def knn_retrieve(index: KnnIndex, query_embedding, k: int = 1) -> list:
    return index.query(query_embedding, k).poses


def build_index(model: ClappModel, records) -> KnnIndex:
    """Index training poses by the CLaPP text embedding of their captions."""
    captions = [r.caption for r in records]
    with tn.no_grad():
        emb = model.embed_text([encode_toy(c, model.config.d_text) for c in captions]).data
    return KnnIndex(emb, [r.pose for r in records], captions)


def win_rate(scores_a, scores_b) -> float:
    """Fraction of prompts where arm A scores higher; exact ties count 0.5."""
    a, b = np.asarray(scores_a, float), np.asarray(scores_b, float)
    if a.shape != b.shape or a.size == 0:
        raise BenchmarkError("win rate needs two equally long, non-empty score lists")
    return float((np.sum(a > b) + 0.5 * np.sum(a == b)) / a.size)


def confidence_interval(values) -> tuple[float, float]:
    """(mean, half-width) with half-width 2 * sd / sqrt(n), sd with ddof=1."""
    v = np.asarray(values, float)
    if v.size < 2:
        return float(v.mean()) if v.size else float("nan"), float("nan")
    return float(v.mean()), float(2 * v.std(ddof=1) / np.sqrt(v.size))


@dataclass
class PromptResult:
    index: int
    prompt: str
    score_a: float
    score_b: float

    @property
    def winner(self) -> str:
        if self.score_a > self.score_b:
            return "a"
        return "b" if self.score_b > self.score_a else "tie"


@dataclass
class BenchmarkReport:
    rows: list
    label_a: str = "t2p"
    label_b: str = "knn"
    temperature: float = DEFAULT_TEMPERATURE
    seed: int = 0
    k: int = 1
    meta: dict = field(default_factory=dict)

    @property
    def win_rate(self) -> float:
        return win_rate([r.score_a for r in self.rows], [r.score_b for r in self.rows])

    @property
    def mean_a(self):
        return confidence_interval([r.score_a for r in self.rows])[0]

    @property
    def mean_b(self):
        return confidence_interval([r.score_b for r in self.rows])[0]

    @property
    def half_width_a(self):
        return confidence_interval([r.score_a for r in self.rows])[1]

    @property
    def half_width_b(self):
        return confidence_interval([r.score_b for r in self.rows])[1]

    def summary(self) -> dict:
        return {
            "n_prompts": len(self.rows), "arms": [self.label_a, self.label_b],
            "win_rate": self.win_rate, "mean_a": self.mean_a, "ci_a": self.half_width_a,
            "mean_b": self.mean_b, "ci_b": self.half_width_b,
            "temperature": self.temperature, "seed": self.seed, "k": self.k, **self.meta,
        }

    def write_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["index", "prompt", f"score_{self.label_a}", f"score_{self.label_b}", "winner"])
            for r in self.rows:
                winner = {"a": self.label_a, "b": self.label_b, "tie": "tie"}[r.winner]
                w.writerow([r.index, r.prompt, f"{r.score_a:.6f}", f"{r.score_b:.6f}", winner])

    def write(self, out_dir, stem: str = "benchmark") -> dict:
        """CSV, JSON summary and SVG bar chart; returns the written paths."""
        from .plotting import plot_benchmark

        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        paths = {"csv": out / f"{stem}.csv", "json": out / f"{stem}_summary.json", "svg": out / f"{stem}.svg"}
        self.write_csv(paths["csv"])
        paths["json"].write_text(json.dumps(self.summary(), indent=2, sort_keys=True) + "\n")
        plot_benchmark(self, paths["svg"])
        return paths


def _generate_one(model: T2pModel, prompt: str, T: float, n_candidates: int, rng) -> Pose:
    feats = encode_toy(prompt, model.config.d_text)
    return model.generate(feats, T=T, n_candidates=n_candidates, rng=rng).poses[0]


def run_benchmark(t2p: T2pModel, clapp: ClappModel, train_records, eval_records,
                  T: float = DEFAULT_TEMPERATURE, seed: int = 0, k: int = 1,
                  n_candidates: int = DEFAULT_CANDIDATES, self_control: bool = False) -> BenchmarkReport:
    """Generated (arm A) against retrieved (arm B) poses, scored by CLaPP.

    With ``k > 1`` the retrieval arm keeps the best-scoring of its k
    neighbours. With ``self_control`` arm B is a second T2P generation
    from an independent random stream, so the expected win rate is 0.5.
    """
    eval_records = list(eval_records)
    if not eval_records:
        raise BenchmarkError("no evaluation records")
    if t2p.config.d_text != clapp.config.d_text:
        raise BenchmarkError(
            f"text dims differ: T2P d_text={t2p.config.d_text}, CLaPP d_text={clapp.config.d_text}")
    index = None if self_control else build_index(clapp, list(train_records))
    rows = []
    for i, rec in enumerate(eval_records):
        pose_a = _generate_one(t2p, rec.caption, T, n_candidates, np.random.default_rng([seed, i, 0]))
        if self_control:
            cands_b = [_generate_one(t2p, rec.caption, T, n_candidates, np.random.default_rng([seed, i, 1]))]
        else:
            q = clapp.embed_text(encode_toy(rec.caption, clapp.config.d_text))
            cands_b = index.query(q.data[0], k).poses
        sa = float(scores(clapp, [rec.caption], [pose_a])[0])
        sb = float(np.max(scores(clapp, [rec.caption] * len(cands_b), cands_b)))
        rows.append(PromptResult(i, rec.caption, sa, sb))
    report = BenchmarkReport(rows, "t2p", "t2p-control" if self_control else "knn", T, seed, k)
    log.info("benchmark: %d prompts, win rate %.3f", len(rows), report.win_rate)
    return report


def load_and_run(t2p_ckpt, clapp_ckpt, train_records, eval_records, **kw) -> BenchmarkReport:
    t2p = T2pModel.load(t2p_ckpt)
    clapp = ClappModel.load(clapp_ckpt)
    report = run_benchmark(t2p, clapp, train_records, eval_records, **kw)
    report.meta.update({"t2p_checkpoint": str(t2p_ckpt), "clapp_checkpoint": str(clapp_ckpt),
                        "t2p_config": asdict(t2p.config)})
    return report
