"""Text-to-pose autoregressive transformer with a GMM + existence head.

Sequence layout: attention slot 0 holds a learned begin-of-sequence
vector, slot t (t >= 1) holds the embedded keypoint t-1. The output at
slot t parameterizes keypoint t, so a forward pass over one pose yields
all 128 next-keypoint distributions at once (teacher forcing).

Each block is pre-norm: causal self-attention, cross-attention over the
text feature rows, then a 4x GELU feed-forward, each with a residual.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass

import numpy as np

from . import gmm
from . import tensor as tn
from .checkpoint import load_tensors, read_sidecar, save_tensors, write_sidecar
from .nn import LayerNorm, Linear, MLP, Module, param
from .pose import N_SLOTS, Pose
from .tempered import DEFAULT_CANDIDATES, check_temperature, tempered_sample
from .text_features import D_TEXT

SEQ_LEN = N_SLOTS
FF_MULT = 4


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class T2pConfig:
    n_layers: int = 4
    d_model: int = 128
    n_heads: int = 4
    K_mixtures: int = gmm.DEFAULT_K
    d_text: int = D_TEXT
    seq_len: int = SEQ_LEN
    dropout: float = 0.0

    def __post_init__(self):
        if self.d_model % self.n_heads:
            raise ConfigError(f"d_model {self.d_model} not divisible by n_heads {self.n_heads}")
        if self.seq_len != SEQ_LEN:
            raise ConfigError(f"seq_len must be {SEQ_LEN}, got {self.seq_len}")
        if self.dropout != 0.0:
            raise ConfigError("dropout is not implemented; use 0.0")
        if min(self.n_layers, self.K_mixtures, self.d_text) < 1:
            raise ConfigError("n_layers, K_mixtures and d_text must be positive")

    @property
    def head_width(self) -> int:
        return 5 * self.K_mixtures + 1

    def to_json(self) -> str:
        return json.dumps(asdict(self), sort_keys=True)


def count_params_formula(cfg: T2pConfig) -> int:
    """Closed-form parameter count (all linears carry biases)."""
    d, dt, h = cfg.d_model, cfg.d_text, cfg.head_width
    embed = 3 * d + d + d + SEQ_LEN * d  # input proj (w + b), BOS, positions
    per_layer = (
        2 * d                              # ln1
        + d * 3 * d + 3 * d + d * d + d    # self-attn qkv + out
        + 2 * d                            # ln2
        + d * d + d + dt * 2 * d + 2 * d + d * d + d  # cross-attn q, kv, out
        + 2 * d                            # ln3
        + d * FF_MULT * d + FF_MULT * d + FF_MULT * d * d + d  # feed-forward
    )
    head = 2 * d + d * h + h               # final ln + linear head
    return embed + cfg.n_layers * per_layer + head


class Block(Module):
    def __init__(self, cfg: T2pConfig, rng):
        d = cfg.d_model
        self.n_heads = cfg.n_heads
        self.ln1 = LayerNorm(d)
        self.qkv = Linear(d, 3 * d, rng)
        self.attn_out = Linear(d, d, rng, scale=0.5 / np.sqrt(d * cfg.n_layers))
        self.ln2 = LayerNorm(d)
        self.cq = Linear(d, d, rng)
        self.ckv = Linear(cfg.d_text, 2 * d, rng)
        self.cross_out = Linear(d, d, rng, scale=0.5 / np.sqrt(d * cfg.n_layers))
        self.ln3 = LayerNorm(d)
        self.mlp = MLP(d, FF_MULT * d, d, rng)

    def _heads(self, x: tn.Tensor) -> tn.Tensor:
        B, T, d = x.shape
        return tn.transpose(tn.reshape(x, (B, T, self.n_heads, d // self.n_heads)), (0, 2, 1, 3))

    def _merge(self, x: tn.Tensor) -> tn.Tensor:
        B, H, T, dh = x.shape
        return tn.reshape(tn.transpose(x, (0, 2, 1, 3)), (B, T, H * dh))

    def __call__(self, h: tn.Tensor, text: tn.Tensor, causal_mask: np.ndarray) -> tn.Tensor:
        d = h.shape[-1]
        dh = d // self.n_heads
        qkv = self.qkv(self.ln1(h))
        q, k, v = (self._heads(qkv[..., i * d:(i + 1) * d]) for i in range(3))
        att = (q @ tn.transpose(k, (0, 1, 3, 2))) * (1.0 / np.sqrt(dh))
        att = tn.softmax(tn.masked_fill(att, causal_mask, -np.inf))
        h = h + self.attn_out(self._merge(att @ v))

        q = self._heads(self.cq(self.ln2(h)))
        kv = self.ckv(text)
        k, v = self._heads(kv[..., :d]), self._heads(kv[..., d:])
        att = tn.softmax((q @ tn.transpose(k, (0, 1, 3, 2))) * (1.0 / np.sqrt(dh)))
        h = h + self.cross_out(self._merge(att @ v))
        return h + self.mlp(self.ln3(h))


@dataclass
class LossBreakdown:
    total: tn.Tensor
    nll: float        # mean over batch x steps of exists * GMM NLL
    bce: float        # mean over batch x steps of existence BCE
    nll_per_point: float  # GMM NLL averaged over existing keypoints only

    def as_dict(self):
        return {"loss": float(self.total.item()), "nll": self.nll, "bce": self.bce,
                "nll_per_point": self.nll_per_point}


@dataclass
class Generation:
    poses: list
    log_density: np.ndarray  # (B, 128) model log-density of each chosen point (nan if absent)
    exists: np.ndarray       # (B, 128)

    def mean_log_density(self) -> float:
        return float(np.nanmean(self.log_density))


class T2pModel(Module):
    def __init__(self, cfg: T2pConfig | None = None, seed: int = 0):
        cfg = cfg or T2pConfig()
        self.config = cfg
        rng = np.random.default_rng(seed)
        d = cfg.d_model
        self.in_proj = Linear(3, d, rng)
        self.bos = param(rng.normal(0, 0.02, size=d))
        self.pos = param(rng.normal(0, 0.02, size=(SEQ_LEN, d)))
        self.blocks = [Block(cfg, rng) for _ in range(cfg.n_layers)]
        self.ln_f = LayerNorm(d)
        self.head = Linear(d, cfg.head_width, rng, scale=0.02 / np.sqrt(d))
        K = cfg.K_mixtures
        b = np.zeros(cfg.head_width)
        b[K:3 * K] = 0.5  # means start mid-image
        b[3 * K:5 * K] = np.log(np.expm1(0.2))  # scales start near 0.2
        self.head.bias.data = b.astype(self.head.bias.dtype)

    # -- training path ------------------------------------------------
    def forward(self, poses, text) -> tn.Tensor:
        """Teacher-forced outputs of shape (B, 128, 5K + 1).

        ``poses`` is (B, 128, 3) (x, y, exists); ``text`` is (B, L, d_text).
        Unbatched inputs are accepted and get a batch axis of 1.
        """
        x = _as_pose_array(poses)
        text = np.asarray(getattr(text, "features", text))
        if text.ndim == 2:
            text = text[None]
        if text.shape[-1] != self.config.d_text:
            raise ConfigError(
                f"text feature dim {text.shape[-1]} does not match model d_text {self.config.d_text}")
        if text.shape[0] != x.shape[0]:
            raise ConfigError(f"batch mismatch: {x.shape[0]} poses vs {text.shape[0]} texts")
        dtype = self.pos.dtype
        B = x.shape[0]
        d = self.config.d_model
        emb = self.in_proj(tn.Tensor(x[:, :-1].astype(dtype)))
        bos = tn.broadcast_to(tn.reshape(self.bos, (1, 1, d)), (B, 1, d))
        h = tn.concat([bos, emb], axis=1) + self.pos
        mask = np.triu(np.ones((SEQ_LEN, SEQ_LEN), dtype=bool), k=1)
        t = tn.Tensor(text.astype(dtype))
        for blk in self.blocks:
            h = blk(h, t, mask)
        return self.head(self.ln_f(h))

    def step_outputs(self, poses, text):
        """Forward pass split into (gmm_raw, exist_logit) numpy arrays."""
        with tn.no_grad():
            out = self.forward(poses, text).data
        K = self.config.K_mixtures
        return out[..., :5 * K], out[..., 5 * K]

    def loss(self, poses, text) -> LossBreakdown:
        x = _as_pose_array(poses)
        out = self.forward(x, text)
        K = self.config.K_mixtures
        exists = x[..., 2].astype(out.dtype)
        logp = gmm.log_density_tensor(out[..., :5 * K], x[..., :2], K)
        nll = -(logp * exists)
        z = out[..., 5 * K]
        bce = tn.softplus(z) - z * exists
        total = tn.mean(nll + bce)
        n_exist = max(float(exists.sum()), 1.0)
        return LossBreakdown(
            total,
            float(nll.data.mean()),
            float(bce.data.mean()),
            float(nll.data.sum() / n_exist),
        )

    # -- inference path -----------------------------------------------
    def generate(self, text, T: float = 1.0, n_candidates: int = DEFAULT_CANDIDATES,
                 rng: np.random.Generator | None = None, exist_mode: str = "sample") -> Generation:
        """Autoregressive tempered generation for a batch of text features.

        ``text`` is (B, L, d_text), a single (L, d_text) matrix, a
        TextFeatures object, or a list of them.
        """
        T = check_temperature(T)
        if exist_mode not in ("sample", "threshold"):
            raise ValueError(f"exist_mode must be 'sample' or 'threshold', got {exist_mode!r}")
        rng = np.random.default_rng() if rng is None else rng
        text = _as_text_array(text)
        if text.shape[-1] != self.config.d_text:
            raise ConfigError(
                f"text feature dim {text.shape[-1]} does not match model d_text {self.config.d_text}")
        B = text.shape[0]
        K = self.config.K_mixtures
        cache = _Cache(self, text)
        inp = np.zeros((B, 3))
        xy = np.zeros((B, SEQ_LEN, 2))
        ex = np.zeros((B, SEQ_LEN), dtype=bool)
        logd = np.full((B, SEQ_LEN), np.nan)
        for t in range(SEQ_LEN):
            out = cache.step(t, inp)
            raw, logit = out[:, :5 * K].astype(np.float64), out[:, 5 * K].astype(np.float64)
            p_exist = 1.0 / (1.0 + np.exp(-logit))
            if exist_mode == "sample":
                e = rng.random(B) < p_exist
            else:
                e = p_exist >= 0.5
            params = gmm.from_raw(raw, K)
            pts = np.clip(tempered_sample(params, T, n_candidates, rng), 0.0, 1.0)
            pts[~e] = 0.0
            xy[:, t] = pts
            ex[:, t] = e
            if e.any():
                logd[e, t] = params.log_density(pts)[e]
            inp = np.column_stack([pts, e.astype(np.float64)])
        poses = [Pose(xy[b], ex[b]) for b in range(B)]
        return Generation(poses, logd, ex)

    # -- persistence --------------------------------------------------
    def save(self, path) -> None:
        save_tensors(path, self.state_dict())
        write_sidecar(path, {"kind": "t2p", "config": asdict(self.config)})

    @classmethod
    def load(cls, path) -> T2pModel:
        meta = read_sidecar(path)
        if meta.get("kind") != "t2p":
            raise ConfigError(f"{path}: not a T2P checkpoint (kind={meta.get('kind')!r})")
        model = cls(T2pConfig(**meta["config"]))
        model.load_state_dict(load_tensors(path))
        return model


def count_params(model: T2pModel) -> int:
    return model.num_params()


def _as_pose_array(poses) -> np.ndarray:
    if isinstance(poses, Pose):
        return poses.to_array()[None]
    if isinstance(poses, (list, tuple)) and poses and isinstance(poses[0], Pose):
        return np.stack([p.to_array() for p in poses])
    x = np.asarray(poses, dtype=np.float64)
    if x.ndim == 2:
        x = x[None]
    if x.shape[1:] != (SEQ_LEN, 3):
        raise ConfigError(f"poses must be (B, 128, 3), got {x.shape}")
    return x


def _as_text_array(text) -> np.ndarray:
    if isinstance(text, (list, tuple)):
        return np.stack([np.asarray(getattr(t, "features", t)) for t in text])
    arr = np.asarray(getattr(text, "features", text))
    return arr[None] if arr.ndim == 2 else arr


# -- incremental numpy inference ---------------------------------------------

def _ln(x, m: LayerNorm, eps=1e-5):
    mu = x.mean(-1, keepdims=True)
    xc = x - mu
    var = (xc * xc).mean(-1, keepdims=True)
    return xc / np.sqrt(var + eps) * m.gamma.data + m.beta.data


def _lin(x, m: Linear):
    return x @ m.weight.data + m.bias.data


def _gelu(x):
    return 0.5 * x * (1 + np.tanh(tn._GELU_C * (x + 0.044715 * (x * x * x))))


def _softmax(a):
    e = np.exp(a - a.max(-1, keepdims=True))
    return e / e.sum(-1, keepdims=True)


class _Cache:
    """Per-layer key/value cache for one batch of generations."""

    def __init__(self, model: T2pModel, text: np.ndarray):
        cfg = model.config
        self.model = model
        self.H = cfg.n_heads
        self.dh = cfg.d_model // cfg.n_heads
        dtype = model.pos.dtype
        B = text.shape[0]
        text = text.astype(dtype)
        self.k = [np.zeros((B, self.H, SEQ_LEN, self.dh), dtype) for _ in model.blocks]
        self.v = [np.zeros((B, self.H, SEQ_LEN, self.dh), dtype) for _ in model.blocks]
        self.ck, self.cv = [], []
        d = cfg.d_model
        for blk in model.blocks:
            kv = _lin(text, blk.ckv)
            self.ck.append(self._split(kv[..., :d]))
            self.cv.append(self._split(kv[..., d:]))

    def _split(self, x):
        B, T, _ = x.shape
        return x.reshape(B, T, self.H, self.dh).transpose(0, 2, 1, 3)

    def step(self, t: int, inp: np.ndarray) -> np.ndarray:
        m = self.model
        dtype = m.pos.dtype
        B = inp.shape[0]
        d = m.config.d_model
        if t == 0:
            h = np.broadcast_to(m.bos.data, (B, d)).astype(dtype)
        else:
            h = _lin(inp.astype(dtype), m.in_proj)
        h = (h + m.pos.data[t])[:, None, :]
        scale = 1.0 / np.sqrt(self.dh)
        for i, blk in enumerate(m.blocks):
            qkv = _lin(_ln(h, blk.ln1), blk.qkv)
            q, k, v = (self._split(qkv[..., j * d:(j + 1) * d]) for j in range(3))
            self.k[i][:, :, t] = k[:, :, 0]
            self.v[i][:, :, t] = v[:, :, 0]
            att = _softmax((q @ self.k[i][:, :, :t + 1].transpose(0, 1, 3, 2)) * scale)
            o = (att @ self.v[i][:, :, :t + 1]).transpose(0, 2, 1, 3).reshape(B, 1, d)
            h = h + _lin(o, blk.attn_out)
            q = self._split(_lin(_ln(h, blk.ln2), blk.cq))
            att = _softmax((q @ self.ck[i].transpose(0, 1, 3, 2)) * scale)
            o = (att @ self.cv[i]).transpose(0, 2, 1, 3).reshape(B, 1, d)
            h = h + _lin(o, blk.cross_out)
            hn = _ln(h, blk.ln3)
            h = h + _lin(_gelu(_lin(hn, blk.mlp.fc1)), blk.mlp.fc2)
        return _lin(_ln(h, m.ln_f), m.head)[:, 0]
