"""Toy encoder (ViT-like) and decoder (GPT-like) transformers.

Every layer is pre-norm: ``x + attn(ln1(x))`` then ``x + ff(ln2(x))``.  The
feed-forward sublayer is either a GELU MLP or a :class:`WeightlessBlock`
applied row by row.
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .autodiff import Parameter, Tensor, default_dtype, no_grad
from .weightless import WeightlessBlock, WeightlessBlockConfig, gaussian_thermometer

BLOCK_KINDS = ("mlp", "weightless")
MODEL_KINDS = ("decoder", "encoder")


@dataclass
class ModelConfig:
    kind: str = "decoder"
    n_layers: int = 2
    d_model: int = 64
    n_heads: int = 4
    context: int = 128
    vocab_size: int = 65
    num_classes: int = 10
    image_size: int = 32
    patch_size: int = 4
    channels: int = 3
    mlp_ratio: float = 4.0
    block_kind: str = "mlp"
    weightless: dict | None = None
    causal: bool | None = None
    seed: int = 0

    def __post_init__(self):
        if self.kind not in MODEL_KINDS:
            raise ValueError(f"kind must be one of {MODEL_KINDS}, got {self.kind!r}")
        if self.block_kind not in BLOCK_KINDS:
            raise ValueError(f"block_kind must be one of {BLOCK_KINDS}, got {self.block_kind!r}")
        if self.d_model % self.n_heads:
            raise ValueError(f"d_model {self.d_model} not divisible by n_heads {self.n_heads}")
        if self.context < 1 or self.mlp_ratio <= 0 or self.n_layers < 1:
            raise ValueError("context, n_layers and mlp_ratio must be positive")
        if self.kind == "encoder":
            if self.image_size % self.patch_size:
                raise ValueError("image_size must be a multiple of patch_size")
            self.context = (self.image_size // self.patch_size) ** 2
        if self.causal is None:
            self.causal = self.kind == "decoder"
        if self.block_kind == "weightless":
            self.weightless_config(0)   # validate early

    @property
    def head_dim(self) -> int:
        return self.d_model // self.n_heads

    @property
    def hidden_dim(self) -> int:
        return int(round(self.mlp_ratio * self.d_model))

    def weightless_config(self, layer_index: int) -> WeightlessBlockConfig:
        opts = dict(self.weightless or {})
        opts.setdefault("layer_widths", (4 * self.d_model, self.d_model))
        return WeightlessBlockConfig(
            num_features=self.d_model, output_dim=self.d_model,
            seed=self.seed * 1000 + 17 + layer_index, **opts)

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise KeyError(f"unknown model config keys: {sorted(unknown)}")
        return cls(**d)

    @classmethod
    def from_json(cls, path) -> "ModelConfig":
        return cls.from_dict(json.loads(Path(path).read_text()))


# ---------------------------------------------------------------------------
# modules
# ---------------------------------------------------------------------------

class Linear:
    def __init__(self, name: str, d_in: int, d_out: int, rng, std: float = 0.02):
        dtype = default_dtype()
        self.weight = Parameter(rng.normal(0.0, std, (d_in, d_out)), f"{name}.weight", dtype=dtype)
        self.bias = Parameter(np.zeros(d_out), f"{name}.bias", decay=False, dtype=dtype)

    def __call__(self, x: Tensor) -> Tensor:
        return x @ self.weight + self.bias

    def parameters(self):
        return [self.weight, self.bias]


class LayerNorm:
    def __init__(self, name: str, d: int, eps: float = 1e-5):
        dtype = default_dtype()
        self.gain = Parameter(np.ones(d), f"{name}.gain", decay=False, dtype=dtype)
        self.bias = Parameter(np.zeros(d), f"{name}.bias", decay=False, dtype=dtype)
        self.eps = eps

    def __call__(self, x: Tensor) -> Tensor:
        return ad.layer_norm(x, self.gain, self.bias, self.eps)

    def parameters(self):
        return [self.gain, self.bias]


class AttentionBlock:
    """Multi-head scaled dot-product self-attention with D x D projections."""

    def __init__(self, name: str, cfg: ModelConfig, rng):
        D = cfg.d_model
        self.n_heads = cfg.n_heads
        self.q = Linear(f"{name}.q", D, D, rng)
        self.k = Linear(f"{name}.k", D, D, rng)
        self.v = Linear(f"{name}.v", D, D, rng)
        self.proj = Linear(f"{name}.proj", D, D, rng, std=0.02 / math.sqrt(2 * cfg.n_layers))
        self.last_weights: np.ndarray | None = None

    def parameters(self):
        return self.q.parameters() + self.k.parameters() + self.v.parameters() + self.proj.parameters()

    def __call__(self, x: Tensor, causal: bool) -> Tensor:
        return attention_forward(x, self, causal)


def attention_forward(x: Tensor, blk: AttentionBlock, causal: bool) -> Tensor:
    """[B x N x D] (or [N x D]) -> same shape; causal masks strictly-future keys."""
    squeeze = x.ndim == 2
    if squeeze:
        x = x.reshape(1, *x.shape)
    B, N, D = x.shape
    if D != blk.q.weight.shape[0]:
        raise ValueError(f"attention expects width {blk.q.weight.shape[0]}, got {D}")
    H = blk.n_heads
    hd = D // H

    def heads(t):
        return t.reshape(B, N, H, hd).transpose(0, 2, 1, 3)

    q, k, v = heads(blk.q(x)), heads(blk.k(x)), heads(blk.v(x))
    att = (q @ k.swapaxes(-1, -2)) * (1.0 / math.sqrt(hd))
    if causal:
        mask = np.tril(np.ones((N, N), dtype=bool))
        att = ad.where(mask, att, Tensor(np.array(-np.inf, dtype=att.dtype)))
    w = ad.softmax(att, axis=-1)
    blk.last_weights = w.data
    y = (w @ v).transpose(0, 2, 1, 3).reshape(B, N, D)
    y = blk.proj(y)
    return y.reshape(N, D) if squeeze else y


class BaselineMLP:
    def __init__(self, name: str, cfg: ModelConfig, rng):
        self.fc1 = Linear(f"{name}.fc1", cfg.d_model, cfg.hidden_dim, rng)
        self.fc2 = Linear(f"{name}.fc2", cfg.hidden_dim, cfg.d_model, rng,
                          std=0.02 / math.sqrt(2 * cfg.n_layers))

    def parameters(self):
        return self.fc1.parameters() + self.fc2.parameters()

    def __call__(self, x: Tensor) -> Tensor:
        return self.fc2(ad.gelu(self.fc1(x)))


class WeightlessFF:
    """Weightless block over the flattened rows of [B x N x D]."""

    def __init__(self, name: str, cfg: ModelConfig, layer_index: int):
        self.block = WeightlessBlock(cfg.weightless_config(layer_index), prefix=f"{name}.")
        # prior for a pre-norm input until calibrated on data
        D, T = cfg.d_model, self.block.config.bits_per_feature
        self.block.encoder = gaussian_thermometer(np.zeros(D), np.ones(D), T)
        self.calibrate_next = False

    def parameters(self):
        return self.block.parameters()

    def __call__(self, x: Tensor) -> Tensor:
        shape = x.shape
        rows = x.reshape(-1, shape[-1])
        if self.calibrate_next:
            self.block.fit_encoder(rows.data)
            self.calibrate_next = False
        return self.block.forward(rows).reshape(*shape)


def feedforward(x: Tensor, layer) -> Tensor:
    """Apply a layer's feed-forward sublayer (MLP or weightless); residual is the caller's."""
    return layer.ff(x)


class TransformerLayer:
    def __init__(self, name: str, cfg: ModelConfig, rng, index: int):
        self.ln1 = LayerNorm(f"{name}.ln1", cfg.d_model)
        self.attn = AttentionBlock(f"{name}.attn", cfg, rng)
        self.ln2 = LayerNorm(f"{name}.ln2", cfg.d_model)
        if cfg.block_kind == "mlp":
            self.ff = BaselineMLP(f"{name}.mlp", cfg, rng)
        else:
            self.ff = WeightlessFF(f"{name}.wl", cfg, index)
        self.causal = cfg.causal

    def parameters(self):
        return self.ln1.parameters() + self.attn.parameters() + self.ln2.parameters() + self.ff.parameters()

    def __call__(self, x: Tensor) -> Tensor:
        x = x + self.attn(self.ln1(x), self.causal)
        return x + feedforward(self.ln2(x), self)


class QuWeiTModel:
    """Transformer stack whose feed-forward sublayers are MLPs or weightless blocks."""

    def __init__(self, cfg: ModelConfig):
        self.config = cfg
        rng = np.random.default_rng(cfg.seed)
        dtype = default_dtype()
        D = cfg.d_model
        if cfg.kind == "decoder":
            self.tok_emb = Parameter(rng.normal(0.0, 0.02, (cfg.vocab_size, D)), "tok_emb", dtype=dtype)
            n_pos = cfg.context
            n_out = cfg.vocab_size
        else:
            patch_dim = cfg.channels * cfg.patch_size ** 2
            self.patch = Linear("patch", patch_dim, D, rng)
            self.cls_token = Parameter(rng.normal(0.0, 0.02, (1, 1, D)), "cls_token", dtype=dtype)
            n_pos = cfg.context + 1
            n_out = cfg.num_classes
        self.pos_emb = Parameter(rng.normal(0.0, 0.02, (n_pos, D)), "pos_emb", dtype=dtype)
        self.layers = [TransformerLayer(f"h{i}", cfg, rng, i) for i in range(cfg.n_layers)]
        self.ln_f = LayerNorm("ln_f", D)
        self.head = Linear("head", D, n_out, rng)
        names = [p.name for p in self.parameters()]
        if len(set(names)) != len(names):
            raise RuntimeError("duplicate parameter names")

    # -- parameters -------------------------------------------------------
    def parameters(self) -> list[Parameter]:
        ps = [self.tok_emb] if self.config.kind == "decoder" else self.patch.parameters() + [self.cls_token]
        ps.append(self.pos_emb)
        for layer in self.layers:
            ps += layer.parameters()
        return ps + self.ln_f.parameters() + self.head.parameters()

    def named_parameters(self) -> dict[str, Parameter]:
        return {p.name: p for p in self.parameters()}

    def weightless_blocks(self) -> list[WeightlessBlock]:
        return [l.ff.block for l in self.layers if isinstance(l.ff, WeightlessFF)]

    def zero_grad(self):
        for p in self.parameters():
            p.grad = None

    # -- forward ------------------------------------------------------------
    def embed(self, inputs) -> Tensor:
        cfg = self.config
        if cfg.kind == "decoder":
            ids = np.asarray(inputs)
            if ids.ndim == 1:
                ids = ids[None, :]
            if ids.shape[1] > cfg.context:
                raise ValueError(f"sequence length {ids.shape[1]} exceeds context {cfg.context}")
            if ids.size and (ids.min() < 0 or ids.max() >= cfg.vocab_size):
                raise IndexError(f"token id out of vocabulary [0, {cfg.vocab_size})")
            return ad.embedding(self.tok_emb, ids) + self.pos_emb[: ids.shape[1]]
        img = np.asarray(inputs.data if isinstance(inputs, Tensor) else inputs, dtype=default_dtype())
        if img.ndim == 3:
            img = img[None]
        p, C, S = cfg.patch_size, cfg.channels, cfg.image_size
        if img.shape[1:] != (C, S, S):
            raise ValueError(f"expected images of shape ({C}, {S}, {S}), got {img.shape[1:]}")
        B, g = img.shape[0], S // p
        patches = img.reshape(B, C, g, p, g, p).transpose(0, 2, 4, 1, 3, 5).reshape(B, g * g, C * p * p)
        x = self.patch(Tensor(patches))
        cls = self.cls_token + Tensor(np.zeros((B, 1, cfg.d_model), dtype=x.dtype))
        # class token appended after the patch tokens
        return ad.concat([x, cls], axis=1) + self.pos_emb

    def forward(self, inputs, calibrate: bool = False) -> Tensor:
        """Decoder: next-token logits [B x N x V].  Encoder: class logits [B x classes]."""
        if calibrate:
            for layer in self.layers:
                if isinstance(layer.ff, WeightlessFF):
                    layer.ff.calibrate_next = True
        x = self.embed(inputs)
        for layer in self.layers:
            x = layer(x)
        x = self.ln_f(x)
        if self.config.kind == "encoder":
            x = x[:, -1, :]
        return self.head(x)

    __call__ = forward

    def loss(self, inputs, targets) -> Tensor:
        return ad.cross_entropy(self.forward(inputs), targets)

    def calibrate(self, inputs) -> None:
        """Fit every weightless block's thermometer on the activations it sees for ``inputs``."""
        with no_grad():
            self.forward(inputs, calibrate=True)


def model_forward(inputs, model: QuWeiTModel) -> Tensor:
    return model.forward(inputs)


def generate(model: QuWeiTModel, prompt, steps: int, temperature: float = 1.0, seed: int = 0) -> list[int]:
    """Autoregressive sampling; ``temperature == 0`` is greedy argmax."""
    cfg = model.config
    if cfg.kind != "decoder":
        raise ValueError("generate needs a decoder model")
    seq = [int(t) for t in prompt]
    if len(seq) > cfg.context:
        raise ValueError(f"prompt length {len(seq)} exceeds context {cfg.context}")
    if not seq:
        raise ValueError("prompt must contain at least one token")
    rng = np.random.default_rng(seed)
    with no_grad():
        for _ in range(steps):
            logits = model.forward(np.array(seq[-cfg.context:])[None]).data[0, -1].astype(np.float64)
            if temperature <= 0:
                nxt = int(np.argmax(logits))
            else:
                z = logits / temperature
                p = np.exp(z - z.max())
                p /= p.sum()
                nxt = int(rng.choice(len(p), p=p))
            seq.append(nxt)
    return seq


# ---------------------------------------------------------------------------
# workload analysis
# ---------------------------------------------------------------------------

@dataclass
class Stage:
    name: str
    params: int | None
    macs: int
    mlp: bool = False


@dataclass
class WorkloadBreakdown:
    stages: list[Stage] = field(default_factory=list)

    @property
    def total_params(self) -> int:
        return sum(s.params or 0 for s in self.stages)

    @property
    def total_macs(self) -> int:
        return sum(s.macs for s in self.stages)

    @property
    def mlp_param_fraction(self) -> float:
        return sum(s.params or 0 for s in self.stages if s.mlp) / self.total_params

    @property
    def mlp_mac_fraction(self) -> float:
        return sum(s.macs for s in self.stages if s.mlp) / self.total_macs

    def stage(self, name: str) -> Stage:
        for s in self.stages:
            if s.name == name:
                return s
        raise KeyError(name)

    def to_dict(self) -> dict:
        return {
            "stages": [asdict(s) for s in self.stages],
            "total_params": self.total_params,
            "total_macs_per_token": self.total_macs,
            "mlp_param_fraction": self.mlp_param_fraction,
            "mlp_mac_fraction": self.mlp_mac_fraction,
        }

    def to_text(self) -> str:
        rows = [("Layer", "# Parameters", "# MAC ops per token")]
        for s in self.stages:
            rows.append((s.name, "-" if s.params is None else f"{s.params:,}", f"{s.macs:,}"))
        rows.append(("Total", f"{self.total_params:,}", f"{self.total_macs:,}"))
        widths = [max(len(r[i]) for r in rows) for i in range(3)]
        lines = [f"{r[0]:<{widths[0]}}  {r[1]:>{widths[1]}}  {r[2]:>{widths[2]}}" for r in rows]
        lines.insert(1, "-" * len(lines[0]))
        lines.append(f"MLP share: {self.mlp_param_fraction:.1%} of parameters, "
                     f"{self.mlp_mac_fraction:.1%} of MACs")
        return "\n".join(lines)


def count_workload(cfg: ModelConfig) -> WorkloadBreakdown:
    """Per-stage parameters and per-token MACs of the attention and MLP GEMMs."""
    n, D, N = cfg.n_layers, cfg.d_model, cfg.context
    r = cfg.hidden_dim
    return WorkloadBreakdown([
        Stage("Q, K, V Projection", 3 * n * D * D, 3 * n * D * D),
        Stage("Q.K^T", None, n * D * N),
        Stage("SoftMax.V", None, n * N * D),
        Stage("Multi-head concat", n * D * D, n * D * D),
        Stage("Feed-forward 1 (MLP)", n * D * r, n * D * r, mlp=True),
        Stage("Feed-forward 2 (MLP)", n * r * D, n * r * D, mlp=True),
    ])
