"""Character-level corpus handling, AdamW, cosine schedule and the training loop."""

from __future__ import annotations

import csv
import logging
import math
import time
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np

from .autodiff import backward, no_grad
from .checkpoint import Checkpoint, make_checkpoint
from .transformer import QuWeiTModel

log = logging.getLogger(__name__)


class TrainingDiverged(RuntimeError):
    pass


# ---------------------------------------------------------------------------
# data
# ---------------------------------------------------------------------------

class TextDataset:
    """Byte/char-level corpus with a sorted vocabulary and a train/val split."""

    def __init__(self, text: str, split: float = 0.9):
        if not text:
            raise ValueError("corpus is empty")
        if not 0.0 < split <= 1.0:
            raise ValueError(f"split fraction must be in (0, 1], got {split}")
        self.text = text
        self.vocab = sorted(set(text))
        self.stoi = {c: i for i, c in enumerate(self.vocab)}
        self.ids = np.array([self.stoi[c] for c in text], dtype=np.int64)
        self.split = split
        n = int(math.floor(split * len(self.ids)))
        self.train = self.ids[:n]
        self.val = self.ids[n:]

    @property
    def vocab_size(self) -> int:
        return len(self.vocab)

    def encode(self, s: str) -> list[int]:
        return [self.stoi[c] for c in s]

    def decode(self, ids) -> str:
        return "".join(self.vocab[int(i)] for i in ids)


def load_corpus(path, split: float = 0.9) -> TextDataset:
    path = Path(path)
    try:
        text = path.read_text(encoding="utf-8")
    except OSError as exc:
        raise OSError(f"cannot read corpus {path}: {exc}") from exc
    if not text:
        raise ValueError(f"corpus {path} is empty")
    return TextDataset(text, split)


def sample_batch(data: np.ndarray, B: int, N: int, rng: np.random.Generator):
    """B random windows of length N; targets are the inputs shifted by one."""
    if len(data) < N + 1:
        raise ValueError(f"split has {len(data)} tokens, need at least {N + 1}")
    offsets = rng.integers(0, len(data) - N, size=B)
    idx = offsets[:, None] + np.arange(N)[None, :]
    return data[idx], data[idx + 1]


# ---------------------------------------------------------------------------
# optimisation
# ---------------------------------------------------------------------------

@dataclass
class TrainConfig:
    batch_size: int = 16
    context: int = 128
    steps: int = 2000
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.99
    weight_decay: float = 0.1
    eps: float = 1e-8
    warmup: int = 100
    min_lr: float = 1e-4
    grad_clip: float = 1.0
    seed: int = 1337
    eval_interval: int = 250
    eval_batches: int = 8
    split: float = 0.9

    def __post_init__(self):
        for name in ("batch_size", "context", "steps", "lr", "eps", "eval_interval", "eval_batches"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive")
        if self.warmup < 0 or self.warmup > self.steps:
            raise ValueError("warmup must lie in [0, steps]")

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        unknown = set(d) - {f.name for f in fields(cls)}
        if unknown:
            raise KeyError(f"unknown train config keys: {sorted(unknown)}")
        return cls(**d)


def lr_at(step: int, cfg: TrainConfig) -> float:
    """Linear warmup to ``lr`` then cosine decay to ``min_lr`` at ``steps``."""
    if step < cfg.warmup:
        return cfg.lr * step / cfg.warmup
    if step >= cfg.steps:
        return cfg.min_lr
    progress = (step - cfg.warmup) / max(1, cfg.steps - cfg.warmup)
    return cfg.min_lr + 0.5 * (1.0 + math.cos(math.pi * progress)) * (cfg.lr - cfg.min_lr)


@dataclass
class AdamWState:
    t: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)
    rejected: int = 0


def adamw_step(params, grads: dict, state: AdamWState, cfg: TrainConfig, lr: float) -> bool:
    """One decoupled-weight-decay Adam update in place.

    ``grads`` maps parameter name to gradient.  Returns False (and counts a
    rejection) when any gradient is non-finite; parameters are then untouched.
    """
    for p in params:
        g = grads.get(p.name)
        if g is not None and g.shape != p.shape:
            raise ValueError(f"gradient shape {g.shape} != parameter {p.name} shape {p.shape}")
        if g is not None and not np.all(np.isfinite(g)):
            state.rejected += 1
            log.warning("non-finite gradient in %s; step rejected (%d so far)", p.name, state.rejected)
            return False
    state.t += 1
    b1, b2 = cfg.beta1, cfg.beta2
    c1 = 1.0 - b1 ** state.t
    c2 = 1.0 - b2 ** state.t
    for p in params:
        g = grads.get(p.name)
        if g is None:
            g = np.zeros_like(p.data)
        m = state.m.get(p.name)
        if m is None:
            m = state.m[p.name] = np.zeros_like(p.data)
            state.v[p.name] = np.zeros_like(p.data)
        v = state.v[p.name]
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * g * g
        step_lr = lr * p.lr_mult
        if p.decay and cfg.weight_decay:
            p.data *= 1.0 - step_lr * cfg.weight_decay
        p.data -= (step_lr * (m / c1) / (np.sqrt(v / c2) + cfg.eps)).astype(p.dtype)
    return True


def clip_grads(grads: dict, max_norm: float) -> float:
    total = math.sqrt(sum(float(np.sum(g.astype(np.float64) ** 2)) for g in grads.values()))
    if max_norm > 0 and total > max_norm:
        scale = max_norm / (total + 1e-6)
        for k in grads:
            grads[k] = grads[k] * scale
    return total


# ---------------------------------------------------------------------------
# training loop
# ---------------------------------------------------------------------------

def estimate_loss(model: QuWeiTModel, data: np.ndarray, cfg: TrainConfig, seed: int) -> float:
    """Mean loss over ``eval_batches`` batches drawn from a fixed seed."""
    rng = np.random.default_rng(seed)
    losses = []
    with no_grad():
        for _ in range(cfg.eval_batches):
            x, y = sample_batch(data, cfg.batch_size, cfg.context, rng)
            losses.append(model.loss(x, y).item())
    return float(np.mean(losses))


@dataclass
class MetricRecord:
    step: int
    split: str
    loss: float
    lr: float
    wallclock: float


def write_metrics(records, path) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["step", "split", "loss", "lr", "wallclock"])
        for r in records:
            w.writerow([r.step, r.split, repr(r.loss), repr(r.lr), f"{r.wallclock:.3f}"])


def train(model: QuWeiTModel, ds: TextDataset, cfg: TrainConfig, metrics_path=None,
          progress=None) -> tuple[list[MetricRecord], Checkpoint]:
    """Train end to end; returns the metric log and the best-validation checkpoint."""
    if model.config.kind != "decoder":
        raise ValueError("train() drives decoder models on text; see vision_smoke_train for encoders")
    if cfg.context > model.config.context:
        raise ValueError("train context exceeds model context")
    rng = np.random.default_rng(cfg.seed)
    params = model.parameters()
    state = AdamWState()
    records: list[MetricRecord] = []
    start = time.perf_counter()
    best: Checkpoint | None = None
    best_val = math.inf
    bad_streak = 0

    if model.weightless_blocks():
        x, _ = sample_batch(ds.train, cfg.batch_size, cfg.context, rng)
        model.calibrate(x)

    def evaluate(step: int):
        nonlocal best, best_val
        lr = lr_at(step, cfg)
        for split, data in (("train", ds.train), ("val", ds.val)):
            loss = estimate_loss(model, data, cfg, seed=cfg.seed + 7919)
            records.append(MetricRecord(step, split, loss, lr, time.perf_counter() - start))
        val = records[-1].loss
        if progress:
            progress(f"step {step:5d}  train {records[-2].loss:.4f}  val {val:.4f}  lr {lr:.2e}")
        if val < best_val:
            best_val = val
            best = make_checkpoint(model, state, step, rng, cfg)

    for step in range(cfg.steps):
        if step % cfg.eval_interval == 0:
            evaluate(step)
        lr = lr_at(step, cfg)
        x, y = sample_batch(ds.train, cfg.batch_size, cfg.context, rng)
        model.zero_grad()
        loss = model.loss(x, y)
        lv = loss.item()
        if not math.isfinite(lv):
            bad_streak += 1
            if bad_streak >= 2:
                raise TrainingDiverged(f"loss non-finite twice in a row at step {step}")
            continue
        bad_streak = 0
        backward(loss)
        grads = {p.name: p.grad for p in params if p.grad is not None}
        clip_grads(grads, cfg.grad_clip)
        adamw_step(params, grads, state, cfg, lr)
    evaluate(cfg.steps)

    if metrics_path is not None:
        write_metrics(records, metrics_path)
    return records, best


# ---------------------------------------------------------------------------
# vision smoke test
# ---------------------------------------------------------------------------

def synthetic_patch_images(num: int, cfg, rng: np.random.Generator):
    """Two-class images: class 1 has a bright top-left quadrant, class 0 a bright bottom-right one."""
    C, S = cfg.channels, cfg.image_size
    y = rng.integers(0, 2, num)
    x = rng.normal(0.0, 0.3, (num, C, S, S))
    h = S // 2
    x[y == 1, :, :h, :h] += 1.0
    x[y == 0, :, h:, h:] += 1.0
    return x, y


def vision_smoke_train(model: QuWeiTModel, steps: int = 30, batch_size: int = 16, lr: float = 3e-3,
                       seed: int = 0) -> list[float]:
    """Train an encoder on the synthetic two-class task; returns the per-step losses."""
    if model.config.kind != "encoder":
        raise ValueError("vision_smoke_train needs an encoder model")
    rng = np.random.default_rng(seed)
    cfg = TrainConfig(batch_size=batch_size, steps=steps, lr=lr, warmup=0, min_lr=lr, seed=seed)
    params = model.parameters()
    state = AdamWState()
    if model.weightless_blocks():
        model.calibrate(synthetic_patch_images(batch_size, model.config, rng)[0])
    losses = []
    for _ in range(steps):
        x, y = synthetic_patch_images(batch_size, model.config, rng)
        model.zero_grad()
        loss = model.loss(x, y)
        losses.append(loss.item())
        backward(loss)
        grads = {p.name: p.grad for p in params if p.grad is not None}
        clip_grads(grads, cfg.grad_clip)
        adamw_step(params, grads, state, cfg, lr)
    return losses
