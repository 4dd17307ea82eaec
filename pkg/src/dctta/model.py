"""Vision transformer with domain-conditioned self-attention."""
from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field
from typing import Iterator

import numpy as np

from . import autograd as ag
from .autograd import Tensor
from .conditioners import ConditionerTriple, generate, init_generator, static_conditioners

LN_EPS = 1e-6
FORWARD_MODES = ("baseline", "dct", "static")

FROZEN = "frozen"
LN = "ln"
GENERATOR = "generator"


@dataclass
class ModelConfig:
    image_size: int = 16
    patch_size: int = 4
    channels: int = 1
    embed_dim: int = 32
    num_heads: int = 4
    depth: int = 4
    mlp_ratio: float = 2.0
    num_classes: int = 10

    def __post_init__(self):
        for name in ("image_size", "patch_size", "channels", "embed_dim", "num_heads", "num_classes"):
            if int(getattr(self, name)) <= 0:
                raise ValueError(f"model.{name} must be positive")
        if self.depth < 0:
            raise ValueError("model.depth must be non-negative")
        if self.image_size % self.patch_size:
            raise ValueError("model.image_size must be divisible by model.patch_size")
        if self.embed_dim % self.num_heads:
            raise ValueError("model.embed_dim must be divisible by model.num_heads")
        if self.mlp_ratio <= 0:
            raise ValueError("model.mlp_ratio must be positive")

    @property
    def grid(self) -> int:
        return self.image_size // self.patch_size

    @property
    def num_patches(self) -> int:
        return self.grid ** 2

    @property
    def seq_len(self) -> int:
        return self.num_patches + 1

    @property
    def head_dim(self) -> int:
        return self.embed_dim // self.num_heads

    @property
    def mlp_dim(self) -> int:
        return int(round(self.embed_dim * self.mlp_ratio))

    def to_dict(self) -> dict:
        return asdict(self)


def param_group(name: str) -> str:
    """Which partition a parameter name belongs to."""
    if name.startswith(("gen.", "static.")):
        return GENERATOR
    if name.endswith((".gamma", ".beta")):
        return LN
    return FROZEN


class ModelParams:
    """Ordered name -> Tensor mapping, partitioned into frozen / LN / generator sets."""

    def __init__(self, config: ModelConfig, tensors: dict[str, Tensor] | None = None):
        self.config = config
        self.tensors: dict[str, Tensor] = dict(tensors or {})

    def __getitem__(self, name: str) -> Tensor:
        return self.tensors[name]

    def __setitem__(self, name: str, value: Tensor) -> None:
        value.name = name
        self.tensors[name] = value

    def __contains__(self, name: str) -> bool:
        return name in self.tensors

    def __iter__(self) -> Iterator[str]:
        return iter(self.tensors)

    def items(self):
        return self.tensors.items()

    def names(self, group: str | None = None) -> list[str]:
        return [n for n in self.tensors if group is None or param_group(n) == group]

    @property
    def conditioner_kind(self) -> str | None:
        if any(n.startswith("gen.") for n in self.tensors):
            return "generator"
        if any(n.startswith("static.") for n in self.tensors):
            return "static"
        return None

    def generator(self, layer: int) -> tuple[Tensor, Tensor]:
        return self.tensors[f"gen.{layer}.weight"], self.tensors[f"gen.{layer}.bias"]

    def static(self, layer: int) -> tuple[Tensor, Tensor, Tensor]:
        return tuple(self.tensors[f"static.{layer}.{k}"] for k in "qkv")

    def copy(self) -> "ModelParams":
        return ModelParams(self.config, {n: Tensor(t.data, name=n, dtype=t.data.dtype)
                                         for n, t in self.tensors.items()})

    def astype(self, dtype) -> "ModelParams":
        return ModelParams(self.config, {n: Tensor(t.data, name=n, dtype=dtype) for n, t in self.tensors.items()})

    def set_trainable(self, names) -> None:
        wanted = set(names)
        for n, t in self.tensors.items():
            t.requires_grad = n in wanted
            t.grad = None

    def use_static_conditioners(self) -> "ModelParams":
        """Swap generators for zero-initialised, directly learnable conditioner vectors."""
        d = self.config.embed_dim
        out = {n: t for n, t in self.tensors.items() if not n.startswith("gen.")}
        for layer in range(self.config.depth):
            for k in "qkv":
                name = f"static.{layer}.{k}"
                out.setdefault(name, Tensor(np.zeros(d), name=name))
        return ModelParams(self.config, out)

    def use_generators(self) -> "ModelParams":
        out = {n: t for n, t in self.tensors.items() if not n.startswith("static.")}
        for layer, (w, b) in enumerate(init_generator(self.config)):
            out.setdefault(f"gen.{layer}.weight", w)
            out.setdefault(f"gen.{layer}.bias", b)
        return ModelParams(self.config, out)

    def size(self, names=None) -> int:
        names = self.tensors if names is None else names
        return int(np.sum([self.tensors[n].data.size for n in names]))


def init_params(config: ModelConfig, seed: int) -> ModelParams:
    """Random source-model initialisation; generators start at zero."""
    rng = np.random.default_rng(seed)
    d, c = config.embed_dim, config.num_classes
    pdim = config.patch_size ** 2 * config.channels
    hidden = config.mlp_dim
    p = ModelParams(config)

    def dense(name, fan_in, fan_out):
        p[f"{name}.weight"] = Tensor(rng.normal(0.0, 1.0 / math.sqrt(fan_in), (fan_in, fan_out)))
        p[f"{name}.bias"] = Tensor(np.zeros(fan_out))

    def norm(name):
        p[f"{name}.gamma"] = Tensor(np.ones(d))
        p[f"{name}.beta"] = Tensor(np.zeros(d))

    dense("patch", pdim, d)
    p["cls_token"] = Tensor(rng.normal(0.0, 0.02, (1, d)))
    p["pos_embed"] = Tensor(rng.normal(0.0, 0.02, (config.seq_len, d)))
    for layer in range(config.depth):
        pre = f"blocks.{layer}"
        norm(f"{pre}.ln1")
        for k in "qkvo":
            dense(f"{pre}.attn.{k}", d, d)
        norm(f"{pre}.ln2")
        dense(f"{pre}.mlp.fc1", d, hidden)
        dense(f"{pre}.mlp.fc2", hidden, d)
    norm("norm")
    dense("head", d, c)
    p["head.weight"] = Tensor(rng.normal(0.0, 0.02, (d, c)))
    for layer, (w, b) in enumerate(init_generator(config)):
        p[f"gen.{layer}.weight"] = w
        p[f"gen.{layer}.bias"] = b
    return p


@dataclass
class AttentionRecord:
    """Attention weights of one layer for a batch.

    ``weights`` is [b, h, m, m] where m = n + 1 when a conditioner row is
    present (its index is the last one) and m = n for plain attention.
    ``scores`` holds the unscaled query-key products before softmax.
    """

    layer: int
    weights: np.ndarray
    scores: np.ndarray
    has_conditioner: bool
    grid: int
    patch_size: int

    @property
    def num_tokens(self) -> int:
        return self.grid ** 2 + 1

    def token_weights(self) -> np.ndarray:
        """n x n weights with the conditioner row/column removed and rows renormalised."""
        w = self.weights
        if self.has_conditioner:
            w = w[..., :-1, :-1]
        return w / w.sum(axis=-1, keepdims=True)


@dataclass
class ForwardTrace:
    records: list[AttentionRecord] = field(default_factory=list)
    class_tokens: list[np.ndarray] = field(default_factory=list)
    conditioners: list[np.ndarray] = field(default_factory=list)


# ------------------------------------------------------------------ forward

def patchify(images: np.ndarray, config: ModelConfig) -> np.ndarray:
    """[b, H, W, ch] -> [b, N, p*p*ch], patches in row-major grid order."""
    images = np.asarray(images)
    if images.ndim == 3:
        images = images[..., None]
    b, h, w, ch = images.shape
    if h != config.image_size or w != config.image_size or ch != config.channels:
        raise ValueError(
            f"images are {h}x{w}x{ch}, model expects "
            f"{config.image_size}x{config.image_size}x{config.channels}")
    g, p = config.grid, config.patch_size
    x = images.reshape(b, g, p, g, p, ch).transpose(0, 1, 3, 2, 4, 5)
    return x.reshape(b, g * g, p * p * ch)


def patch_embed(images: np.ndarray, params: ModelParams) -> Tensor:
    cfg = params.config
    patches = Tensor(patchify(images, cfg))
    tokens = ag.matmul(patches, params["patch.weight"]) + params["patch.bias"]
    b = tokens.shape[0]
    cls = ag.add(Tensor(np.zeros((b, 1, cfg.embed_dim))), params["cls_token"])
    return ag.concat([cls, tokens], axis=1) + params["pos_embed"]


def attention_scores(q: Tensor, k: Tensor) -> Tensor:
    """Unscaled Q K^T over the last two axes."""
    return ag.matmul(q, ag.transpose(k))


def augment_qkv(q: Tensor, k: Tensor, v: Tensor, cond: ConditionerTriple) -> tuple[Tensor, Tensor, Tensor]:
    """Append each conditioner as the last row of its matrix (row axis = -2)."""
    axis = q.ndim - 2
    return (ag.concat([q, cond.q], axis=axis),
            ag.concat([k, cond.k], axis=axis),
            ag.concat([v, cond.v], axis=axis))


def conditioned_attention(q_aug: Tensor, k_aug: Tensor, v_aug: Tensor,
                          mask_conditioner_key: bool = False) -> tuple[Tensor, np.ndarray, np.ndarray]:
    """Attention over token rows plus one conditioner row.

    Returns the first n output rows together with the (n+1)x(n+1) weights and
    raw scores. With ``mask_conditioner_key`` the conditioner key column gets
    zero weight, i.e. its score is treated as -inf.
    """
    m = q_aug.shape[-2]
    n = m - 1
    raw = attention_scores(q_aug, k_aug)
    scaled = ag.scale(raw, 1.0 / math.sqrt(q_aug.shape[-1]))
    if mask_conditioner_key:
        w_tok = ag.softmax_rows(ag.slice_rows(scaled, 0, n, axis=scaled.ndim - 1))
        out = ag.matmul(w_tok, ag.slice_rows(v_aug, 0, n, axis=v_aug.ndim - 2))
        pad = np.zeros(w_tok.shape[:-1] + (1,), dtype=w_tok.data.dtype)
        weights = np.concatenate([w_tok.data, pad], axis=-1)
    else:
        w = ag.softmax_rows(scaled)
        out = ag.matmul(w, v_aug)
        weights = w.data
    return ag.slice_rows(out, 0, n, axis=out.ndim - 2), weights, raw.data


def plain_attention(q: Tensor, k: Tensor, v: Tensor) -> tuple[Tensor, np.ndarray, np.ndarray]:
    raw = attention_scores(q, k)
    w = ag.softmax_rows(ag.scale(raw, 1.0 / math.sqrt(q.shape[-1])))
    return ag.matmul(w, v), w.data, raw.data


def _linear(x: Tensor, params: ModelParams, name: str) -> Tensor:
    return ag.matmul(x, params[f"{name}.weight"]) + params[f"{name}.bias"]


def _conditioners(x1: Tensor, params: ModelParams, layer: int, mode: str) -> ConditionerTriple:
    if mode == "dct":
        if params.conditioner_kind != "generator":
            raise ValueError("dct mode needs generator parameters (gen.{l}.*)")
        cls = ag.slice_rows(x1, 0, 1, axis=1)
        return generate(cls, *params.generator(layer))
    vectors = params.static(layer) if params.conditioner_kind == "static" else None
    return static_conditioners(vectors, batch=x1.shape[0])


def block_forward(tokens: Tensor, params: ModelParams, layer: int, mode: str = "dct",
                  mask_conditioner_key: bool = False,
                  trace: ForwardTrace | None = None) -> tuple[Tensor, AttentionRecord]:
    """Pre-norm transformer block; conditioner rows are appended inside attention only."""
    if mode not in FORWARD_MODES:
        raise ValueError(f"unknown forward mode {mode!r}; expected one of {FORWARD_MODES}")
    cfg = params.config
    pre = f"blocks.{layer}"
    x1 = ag.layer_norm(tokens, params[f"{pre}.ln1.gamma"], params[f"{pre}.ln1.beta"], LN_EPS)
    q = _linear(x1, params, f"{pre}.attn.q")
    k = _linear(x1, params, f"{pre}.attn.k")
    v = _linear(x1, params, f"{pre}.attn.v")
    if mode == "baseline":
        qh, kh, vh = (ag.split_heads(t, cfg.num_heads) for t in (q, k, v))
        out, weights, raw = plain_attention(qh, kh, vh)
    else:
        cond = _conditioners(x1, params, layer, mode)
        if trace is not None:
            trace.conditioners.append(
                np.concatenate([cond.q.data, cond.k.data, cond.v.data], axis=-1)[:, 0, :])
        qa, ka, va = augment_qkv(q, k, v, cond)
        qh, kh, vh = (ag.split_heads(t, cfg.num_heads) for t in (qa, ka, va))
        out, weights, raw = conditioned_attention(qh, kh, vh, mask_conditioner_key)
    attn = _linear(ag.merge_heads(out), params, f"{pre}.attn.o")
    x = tokens + attn
    x2 = ag.layer_norm(x, params[f"{pre}.ln2.gamma"], params[f"{pre}.ln2.beta"], LN_EPS)
    hidden = ag.gelu(_linear(x2, params, f"{pre}.mlp.fc1"))
    x = x + _linear(hidden, params, f"{pre}.mlp.fc2")
    record = AttentionRecord(layer, weights, raw, mode != "baseline", cfg.grid, cfg.patch_size)
    return x, record


def model_forward(images: np.ndarray, params: ModelParams, mode: str = "dct",
                  mask_conditioner_key: bool = False,
                  trace: ForwardTrace | None = None) -> tuple[Tensor, list[AttentionRecord]]:
    """Logits [b, num_classes] and one attention record per layer."""
    cfg = params.config
    x = patch_embed(images, params)
    records = []
    for layer in range(cfg.depth):
        x, rec = block_forward(x, params, layer, mode, mask_conditioner_key, trace)
        records.append(rec)
        if trace is not None:
            trace.records.append(rec)
            trace.class_tokens.append(x.data[:, 0, :].copy())
    x = ag.layer_norm(x, params["norm.gamma"], params["norm.beta"], LN_EPS)
    cls = ag.reshape(ag.slice_rows(x, 0, 1, axis=1), (x.shape[0], cfg.embed_dim))
    return _linear(cls, params, "head"), records


def predict(images: np.ndarray, params: ModelParams, mode: str = "baseline", batch_size: int = 256) -> np.ndarray:
    """Argmax predictions without building a graph."""
    with _no_grad(params):
        out = [model_forward(images[i:i + batch_size], params, mode)[0].data.argmax(axis=1)
               for i in range(0, len(images), batch_size)]
    return np.concatenate(out) if out else np.zeros(0, dtype=np.int64)


class _no_grad:
    def __init__(self, params: ModelParams):
        self.params = params

    def __enter__(self):
        self.saved = {n: t.requires_grad for n, t in self.params.items()}
        for t in self.params.tensors.values():
            t.requires_grad = False

    def __exit__(self, *exc):
        for n, flag in self.saved.items():
            self.params[n].requires_grad = flag
