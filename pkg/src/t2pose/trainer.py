"""Training loops for the T2P model and the CLaPP scorer.

Both loops use Adam with global-norm gradient clipping, sample batches
from a seeded generator, and write a loss-curve CSV plus checkpoints
when an output directory is given. Runs are bit-reproducible for a
fixed seed on one platform.
"""

from __future__ import annotations

import csv
import json
import logging
import math
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import gmm
from . import tensor as tn
from .clapp import ClappModel, DistinctCaptionSampler, contrastive_loss, retrieval_accuracy
from .pose import PoseRecord
from .synth import SynthCorpus
from .t2p import T2pModel
from .text_features import encode_toy

log = logging.getLogger(__name__)


class TrainError(RuntimeError):
    pass


class NanLossError(TrainError):
    def __init__(self, step: int, terms: dict):
        self.step = step
        self.terms = terms
        super().__init__(f"non-finite loss at step {step}: {terms}")


@dataclass(frozen=True)
class TrainConfig:
    steps: int = 2000
    batch_size: int = 64
    learning_rate: float = 3e-4
    betas: tuple = (0.9, 0.999)
    eps: float = 1e-8
    grad_clip: float = 1.0
    seed: int = 0
    checkpoint_every: int = 0  # 0: final checkpoint only
    log_every: int = 100
    cosine_lr: bool = False

    def __post_init__(self):
        if self.steps < 0:
            raise ValueError(f"steps must be >= 0, got {self.steps}")
        if self.batch_size < 1:
            raise ValueError(f"batch_size must be >= 1, got {self.batch_size}")
        if self.learning_rate <= 0 or self.grad_clip <= 0:
            raise ValueError("learning_rate and grad_clip must be positive")

    def to_json(self) -> str:
        return json.dumps(asdict(self), sort_keys=True)

    def lr_at(self, step: int) -> float:
        if not self.cosine_lr or self.steps == 0:
            return self.learning_rate
        return 0.5 * self.learning_rate * (1 + math.cos(math.pi * step / self.steps))


class Adam:
    def __init__(self, params, betas=(0.9, 0.999), eps=1e-8):
        self.params = list(params)
        self.b1, self.b2 = betas
        self.eps = eps
        self.t = 0
        self.m = [np.zeros_like(p.data) for p in self.params]
        self.v = [np.zeros_like(p.data) for p in self.params]

    def step(self, lr: float) -> None:
        self.t += 1
        c1 = 1 - self.b1**self.t
        c2 = 1 - self.b2**self.t
        for p, m, v in zip(self.params, self.m, self.v):
            if p.grad is None:
                continue
            g = p.grad
            m *= self.b1
            m += (1 - self.b1) * g
            v *= self.b2
            v += (1 - self.b2) * (g * g)
            update = (lr / c1) * m / (np.sqrt(v / c2) + self.eps)
            p.data = (p.data - update).astype(p.dtype, copy=False)


def global_grad_norm(params) -> float:
    return math.sqrt(sum(float(np.sum(np.square(p.grad, dtype=np.float64))) for p in params if p.grad is not None))


def clip_grad_norm(params, max_norm: float) -> float:
    """Rescale grads so their global norm is at most ``max_norm``; returns the pre-clip norm."""
    norm = global_grad_norm(params)
    if norm > max_norm:
        scale = max_norm / (norm + 1e-12)
        for p in params:
            if p.grad is not None:
                p.grad = (p.grad * scale).astype(p.dtype)
    return norm


def smooth(values, window: int = 50) -> np.ndarray:
    """Trailing moving average (shorter windows at the start)."""
    v = np.asarray(values, dtype=np.float64)
    c = np.concatenate([[0.0], np.cumsum(v)])
    idx = np.arange(1, len(v) + 1)
    lo = np.maximum(idx - window, 0)
    return (c[idx] - c[lo]) / (idx - lo)


@dataclass
class TrainResult:
    model: object
    curve: list = field(default_factory=list)  # one dict per step
    metrics: dict = field(default_factory=dict)
    seconds: float = 0.0

    def losses(self) -> np.ndarray:
        return np.array([row["loss"] for row in self.curve])


def _records(corpus) -> list[PoseRecord]:
    records = list(corpus.records if isinstance(corpus, SynthCorpus) else corpus)
    if not records:
        raise TrainError("corpus is empty")
    return records


def encode_records(records, d_text: int):
    """Stack poses (N, 128, 3), text features (N, 32, D) and masks (N, 32)."""
    cache = {}
    for r in records:
        if r.caption not in cache:
            cache[r.caption] = encode_toy(r.caption, d_text)
    feats = [cache[r.caption] for r in records]
    poses = np.stack([r.pose.to_array() for r in records]).astype(np.float32)
    return poses, np.stack([f.features for f in feats]), np.stack([f.mask() for f in feats])


def write_curve(curve, path) -> None:
    if not curve:
        Path(path).write_text("step\n")
        return
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=list(curve[0]))
        w.writeheader()
        for row in curve:
            w.writerow({k: (f"{v:.8g}" if isinstance(v, float) else v) for k, v in row.items()})


def _loop(model, cfg: TrainConfig, next_batch, loss_fn, out_dir, name, after_step=None) -> TrainResult:
    out = Path(out_dir) if out_dir is not None else None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
    params = model.parameters()
    opt = Adam(params, cfg.betas, cfg.eps)
    curve = []
    t0 = time.perf_counter()
    for step in range(cfg.steps):
        batch = next_batch()
        model.zero_grad()
        total, terms = loss_fn(batch)
        value = float(total.item())
        if not math.isfinite(value):
            raise NanLossError(step, terms)
        tn.backward(total)
        norm = clip_grad_norm(params, cfg.grad_clip)
        lr = cfg.lr_at(step)
        opt.step(lr)
        if after_step is not None:
            after_step()
        curve.append({"step": step, "loss": value, **terms, "grad_norm": norm, "lr": lr})
        if cfg.log_every and step % cfg.log_every == 0:
            log.info("%s step %d loss %.4f", name, step, value)
        if out is not None and cfg.checkpoint_every and (step + 1) % cfg.checkpoint_every == 0:
            model.save(out / f"{name}_step{step + 1}.ckpt")
    if out is not None:
        write_curve(curve, out / f"{name}_loss.csv")
        model.save(out / f"{name}.ckpt")
        (out / f"{name}_train_config.json").write_text(cfg.to_json() + "\n")
    return TrainResult(model, curve, seconds=time.perf_counter() - t0)


class _EpochSampler:
    """Shuffled passes over the corpus without replacement inside a pass."""

    def __init__(self, n: int, batch_size: int, rng: np.random.Generator):
        self.n, self.b, self.rng = n, min(batch_size, n), rng
        self.order, self.pos = rng.permutation(n), 0

    def next_batch(self) -> np.ndarray:
        if self.pos + self.b > self.n:
            self.order, self.pos = self.rng.permutation(self.n), 0
        idx = self.order[self.pos:self.pos + self.b]
        self.pos += self.b
        return idx


def train_t2p(cfg: TrainConfig, corpus, model: T2pModel, out_dir=None) -> TrainResult:
    records = _records(corpus)
    poses, feats, _ = encode_records(records, model.config.d_text)
    sampler = _EpochSampler(len(records), cfg.batch_size, np.random.default_rng([cfg.seed, 1]))

    def loss_fn(idx):
        lb = model.loss(poses[idx], feats[idx])
        return lb.total, {"nll": lb.nll, "bce": lb.bce}

    return _loop(model, cfg, sampler.next_batch, loss_fn, out_dir, "t2p")


def train_clapp(cfg: TrainConfig, corpus, model: ClappModel, out_dir=None, eval_records=None) -> TrainResult:
    records = _records(corpus)
    if cfg.batch_size < 2:
        raise ValueError("CLaPP training needs batch_size >= 2")
    poses, feats, masks = encode_records(records, model.config.d_text)
    sampler = DistinctCaptionSampler([r.caption for r in records], cfg.batch_size,
                                     np.random.default_rng([cfg.seed, 2]))

    def loss_fn(idx):
        return contrastive_loss(model, feats[idx], masks[idx], poses[idx]), {}

    result = _loop(model, cfg, sampler.next_batch, loss_fn, out_dir, "clapp", after_step=model.clamp_scale)
    if eval_records is not None and len(eval_records) >= 64:
        result.metrics["retrieval_top1"] = retrieval_accuracy(model, eval_records, 64, seed=cfg.seed)
        log.info("held-out top-1 retrieval over 64 candidates: %.3f", result.metrics["retrieval_top1"])
    return result


# -- evaluation ---------------------------------------------------------------

def eval_nll(model: T2pModel, records, batch_size: int = 64) -> float:
    """Mean GMM negative log-likelihood per existing keypoint."""
    records = _records(records)
    poses, feats, _ = encode_records(records, model.config.d_text)
    K = model.config.K_mixtures
    total = count = 0.0
    for s in range(0, len(records), batch_size):
        x = poses[s:s + batch_size].astype(np.float64)
        raw, _ = model.step_outputs(x, feats[s:s + batch_size])
        lp = gmm.from_raw(raw, K).log_density(x[..., :2])
        e = x[..., 2] > 0.5
        total -= lp[e].sum()
        count += e.sum()
    return float(total / max(count, 1))


@dataclass(frozen=True)
class GlobalGmmBaseline:
    """A single 2-D diagonal GMM over all existing keypoints, ignoring text and slot."""

    params: gmm.GmmParams
    iterations: int

    def nll(self, records) -> float:
        pts = _keypoints(records)
        return float(-self.params.log_density(pts).mean())


def _keypoints(records) -> np.ndarray:
    arr = np.stack([r.pose.to_array() for r in _records(records)]).reshape(-1, 3)
    return arr[arr[:, 2] > 0.5, :2]


def fit_global_gmm(records, K: int = gmm.DEFAULT_K, iters: int = 200, seed: int = 0,
                   tol: float = 1e-7, n_init: int = 3) -> GlobalGmmBaseline:
    """Expectation-maximisation for a diagonal GMM; best of ``n_init`` random starts."""
    x = _keypoints(records)
    rng = np.random.default_rng(seed)
    best, best_ll = None, -np.inf
    for _ in range(n_init):
        params, it, ll = _em(x, x[rng.choice(len(x), K, replace=False)], iters, tol)
        if ll > best_ll:
            best, best_ll = GlobalGmmBaseline(params, it), ll
    return best


def _em(x, means, iters: int, tol: float):
    """Diagonal EM from the given means, shared variance and uniform weights."""
    K = len(means)
    means = np.array(means, dtype=np.float64)
    var = np.tile(x.var(0), (K, 1))
    w = np.full(K, 1.0 / K)
    prev = -np.inf
    it = 0
    for it in range(1, iters + 1):
        params = gmm.GmmParams(w, means, np.sqrt(var))
        comp = params._log_norm_const() - 0.5 * np.sum((x[:, None] - means) ** 2 / var, -1)
        ll = np.logaddexp.reduce(comp, axis=1)
        resp = np.exp(comp - ll[:, None])
        nk = resp.sum(0) + 1e-12
        w = nk / nk.sum()
        means = resp.T @ x / nk[:, None]
        var = np.maximum(resp.T @ (x * x) / nk[:, None] - means**2, 1e-6)
        mean_ll = ll.mean()
        if mean_ll - prev < tol:
            break
        prev = mean_ll
    params = gmm.GmmParams(w, means, np.sqrt(var))
    return params, it, float(params.log_density(x).mean())
