"""Differentiable weightless block: thermometer encoder, LUT layers, conditional summation.

Two forward paths share one set of parameters:

* ``hard-efd`` -- binary LUT reads; input gradients are single-point finite
  differences of the truth table at the observed address, entry gradients are
  straight-through (clipped to ``|theta| <= 1``).
* ``soft`` -- multilinear relaxation of every LUT with sigmoid-squashed
  entries, differentiated exactly by the tape.  Mostly used as a gradient
  oracle.

:meth:`WeightlessBlock.infer` is the lookup-only inference path and is
bit-identical to the hard forward.

LUT address convention: mapping position 0 is the most significant address
bit.  Packed truth tables (hex) put address 0 in the least significant bit.
"""

from __future__ import annotations

from dataclasses import dataclass, field, asdict
from statistics import NormalDist

import numpy as np
import scipy.sparse as sp

from .autodiff import Parameter, Tensor, custom_op, default_dtype, sigmoid, stack

MODES = ("hard-efd", "soft")
MAX_FAN_IN = 6


# ---------------------------------------------------------------------------
# thermometer encoding
# ---------------------------------------------------------------------------

@dataclass
class ThermometerEncoder:
    thresholds: np.ndarray          # [F, T], strictly increasing along T
    width: np.ndarray               # [F] surrogate width per feature

    def __post_init__(self):
        self.thresholds = np.atleast_2d(np.asarray(self.thresholds, dtype=np.float64))
        self.width = np.asarray(self.width, dtype=np.float64).reshape(-1)
        if self.thresholds.shape[1] < 1:
            raise ValueError("thermometer needs at least one threshold per feature")
        if np.any(np.diff(self.thresholds, axis=1) <= 0):
            raise ValueError("thresholds must be strictly increasing per feature")
        if self.width.shape != (self.num_features,) or np.any(self.width <= 0):
            raise ValueError("surrogate width must be positive, one per feature")

    @property
    def num_features(self) -> int:
        return self.thresholds.shape[0]

    @property
    def bits_per_feature(self) -> int:
        return self.thresholds.shape[1]


def _default_width(thresholds: np.ndarray, spread: np.ndarray) -> np.ndarray:
    if thresholds.shape[1] > 1:
        return np.diff(thresholds, axis=1).mean(axis=1)
    return np.where(spread > 0, spread, 1.0)


def gaussian_thermometer(mean, std, T: int) -> ThermometerEncoder:
    """Thresholds at the (t+1)/(T+1) quantiles of N(mean, std^2) per feature."""
    if T < 1:
        raise ValueError(f"need T >= 1, got {T}")
    mean = np.atleast_1d(np.asarray(mean, dtype=np.float64))
    std = np.atleast_1d(np.asarray(std, dtype=np.float64))
    z = np.array([NormalDist().inv_cdf((t + 1) / (T + 1)) for t in range(T)])
    u = np.array([-1.0 + 2.0 * (t + 1) / (T + 1) for t in range(T)])
    degenerate = ~(std > 0)
    thr = np.where(degenerate[:, None], mean[:, None] + u[None, :],
                   mean[:, None] + std[:, None] * z[None, :])
    return ThermometerEncoder(thr, _default_width(thr, np.where(degenerate, 0.0, std)))


def fit_thermometer(calibration, T: int) -> ThermometerEncoder:
    """Place T thresholds per feature from a calibration batch [S x F].

    Features with zero spread fall back to uniform thresholds over [c-1, c+1].
    """
    if T < 1:
        raise ValueError(f"need T >= 1, got {T}")
    data = calibration.data if isinstance(calibration, Tensor) else calibration
    data = np.asarray(data, dtype=np.float64)
    if data.ndim != 2 or data.shape[0] == 0:
        raise ValueError("calibration must be a non-empty [S x F] array")
    if data.shape[0] < 2:
        raise ValueError("calibration needs at least two samples")
    return gaussian_thermometer(data.mean(axis=0), data.std(axis=0), T)


def encode(x: Tensor, enc: ThermometerEncoder) -> Tensor:
    """Hard thermometer bits [..., F*T] with a triangular surrogate gradient."""
    if x.shape[-1] != enc.num_features:
        raise ValueError(f"encoder expects {enc.num_features} features, got {x.shape[-1]}")
    thr = enc.thresholds
    bits = (x.data[..., None] >= thr).astype(x.dtype)
    lead = x.shape[:-1]

    def bw(g):
        g = g.reshape(*lead, *thr.shape)
        w = enc.width[:, None]
        tri = np.maximum(0.0, 1.0 - np.abs(x.data[..., None] - thr) / w) / w
        return ((g * tri).sum(axis=-1),)

    return custom_op(bits.reshape(*lead, -1), (x,), bw, "thermometer")


def encode_soft(x: Tensor, enc: ThermometerEncoder) -> Tensor:
    """Sigmoid relaxation of the thermometer, slope 1/w at each threshold."""
    if x.shape[-1] != enc.num_features:
        raise ValueError(f"encoder expects {enc.num_features} features, got {x.shape[-1]}")
    lead = x.shape[:-1]
    thr = Tensor(enc.thresholds, dtype=x.dtype)
    w = Tensor(enc.width[:, None], dtype=x.dtype)
    z = (x.reshape(*lead, enc.num_features, 1) - thr) * (4.0 / w)
    return sigmoid(z).reshape(*lead, -1)


# ---------------------------------------------------------------------------
# LUT layers
# ---------------------------------------------------------------------------

def make_mapping(prev_width: int, num_luts: int, fan_in: int, rng: np.random.Generator) -> np.ndarray:
    """Round-robin over shuffled source indices; distinct sources within each LUT.

    Every source bit feeds at least floor(num_luts*fan_in/prev_width) LUT inputs.
    """
    if fan_in > prev_width:
        raise ValueError(f"fan-in {fan_in} exceeds input width {prev_width}")
    total = num_luts * fan_in
    need = total // prev_width
    for _ in range(100):
        reps = -(-total // prev_width) + 1
        stream = np.concatenate([rng.permutation(prev_width) for _ in range(reps)])
        for pos in range(total):
            start = pos - pos % fan_in
            used = stream[start:pos]
            if stream[pos] in used:
                for k in range(pos + 1, len(stream)):
                    if stream[k] not in used:
                        stream[pos], stream[k] = stream[k], stream[pos]
                        break
        mapping = stream[:total].reshape(num_luts, fan_in)
        counts = np.bincount(mapping.ravel(), minlength=prev_width)
        if counts.min() >= need:
            return mapping.astype(np.int64)
    raise RuntimeError("could not build a covering mapping")


class LutLayer:
    """``num_luts`` LUTs of ``fan_in`` inputs each, entries parameterised by ``theta``."""

    def __init__(self, mapping: np.ndarray, theta: Parameter, input_width: int):
        self.mapping = np.asarray(mapping, dtype=np.int64)
        self.theta = theta
        self.input_width = int(input_width)
        L, n = self.mapping.shape
        if theta.shape != (L, 2 ** n):
            raise ValueError(f"theta shape {theta.shape} does not match {L} LUTs of fan-in {n}")
        if not 1 <= n <= MAX_FAN_IN:
            raise ValueError(f"fan-in must be in 1..{MAX_FAN_IN}, got {n}")
        if self.mapping.min() < 0 or self.mapping.max() >= input_width:
            raise ValueError("mapping index out of range")
        if any(len(set(row)) != n for row in self.mapping.tolist()):
            raise ValueError("each LUT's sources must be distinct")
        self._shifts = np.array([1 << (n - 1 - j) for j in range(n)], dtype=np.int64)
        self._scatter = sp.csr_matrix(
            (np.ones(L * n), (np.arange(L * n), self.mapping.reshape(-1))),
            shape=(L * n, input_width))

    @property
    def num_luts(self) -> int:
        return self.mapping.shape[0]

    @property
    def fan_in(self) -> int:
        return self.mapping.shape[1]

    def addresses(self, bits: np.ndarray) -> np.ndarray:
        """Integer LUT addresses [R, L] from a 0/1 array [R, W]."""
        b = np.asarray(bits) > 0.5
        addr = np.zeros((b.shape[0], self.num_luts), dtype=np.int64)
        for j in range(self.fan_in):
            addr |= b[:, self.mapping[:, j]].astype(np.int64) * self._shifts[j]
        return addr

    def table(self) -> np.ndarray:
        """Hard truth table [L, 2^n] (bool), the sign of theta."""
        return self.theta.data > 0

    def init_hex(self) -> list[str]:
        return [pack_init(row) for row in self.table()]


def pack_init(row) -> str:
    """Pack a truth-table row into hex, address 0 in the least significant bit."""
    value = 0
    for a, bit in enumerate(row):
        if bit:
            value |= 1 << a
    digits = max(1, -(-len(row) // 4))
    return format(value, f"0{digits}x")


def unpack_init(text: str, fan_in: int) -> np.ndarray:
    value = int(text, 16)
    return np.array([(value >> a) & 1 for a in range(2 ** fan_in)], dtype=bool)


def _check_width(x: Tensor, layer: LutLayer):
    if x.ndim != 2 or x.shape[1] != layer.input_width:
        raise ValueError(f"LUT layer expects [R x {layer.input_width}] input, got {x.shape}")


def lut_forward_hard(bits: Tensor, layer: LutLayer) -> Tensor:
    """Binary lookup; the backward pass is :func:`lut_backward_efd`."""
    _check_width(bits, layer)
    addr = layer.addresses(bits.data)
    table = layer.table()
    L = layer.num_luts
    out = table[np.arange(L), addr].astype(bits.dtype)

    def bw(g):
        gt, gb = lut_backward_efd(g, addr, layer)
        return gb, gt

    return custom_op(out, (bits, layer.theta), bw, "lut_hard")


def lut_backward_efd(upstream: np.ndarray, addresses: np.ndarray | None, layer: LutLayer):
    """Entry and input gradients for a hard LUT layer.

    Entry gradient: straight-through onto the addressed entry, zero where
    ``|theta| > 1``.  Input gradient for mapped bit j: upstream times the
    difference of hard reads with bit j forced to 1 and to 0.
    """
    if addresses is None:
        raise ValueError("EFD backward needs the addresses saved by the forward pass")
    upstream = np.asarray(upstream)
    theta = layer.theta.data
    L, size = theta.shape
    n = layer.fan_in
    flat = addresses + (np.arange(L) * size)[None, :]
    live = (np.abs(theta.reshape(-1)[flat]) <= 1.0)
    grad_theta = np.bincount(flat.ravel(), weights=(upstream * live).ravel(),
                             minlength=L * size).reshape(L, size).astype(theta.dtype)

    table = layer.table().reshape(-1).astype(np.int8)
    contrib = np.empty((upstream.shape[0], L, n), dtype=upstream.dtype)
    for j in range(n):
        m = layer._shifts[j]
        diff = table[flat | m] - table[flat & ~m]
        contrib[:, :, j] = upstream * diff
    grad_bits = np.asarray(layer._scatter.T @ contrib.reshape(upstream.shape[0], L * n).T).T
    return grad_theta, grad_bits.astype(upstream.dtype, copy=False)


def lut_forward_soft(p: Tensor, layer: LutLayer, temperature: float = 1 / 3) -> Tensor:
    """Multilinear relaxation: sum_a sigmoid(theta[a]/tau) * P(address = a)."""
    _check_width(p, layer)
    if np.any(p.data < -1e-6) or np.any(p.data > 1 + 1e-6):
        raise ValueError("soft LUT inputs must lie in [0, 1]")
    R, L = p.shape[0], layer.num_luts
    P = p[:, layer.mapping]                      # [R, L, n]
    w = Tensor(np.ones((R, L, 1), dtype=p.dtype))
    for j in range(layer.fan_in):
        pj = P[:, :, j:j + 1]
        k = w.shape[-1]
        w = stack([w * (1.0 - pj), w * pj], axis=-1).reshape(R, L, 2 * k)
    s = sigmoid(layer.theta * (1.0 / temperature))
    return (w * s).sum(axis=-1)


# ---------------------------------------------------------------------------
# conditional summation
# ---------------------------------------------------------------------------

@dataclass
class ConditionalSummation:
    e: Parameter                      # [D, G] encoded values, trained in float
    scale: float | None = None
    levels: np.ndarray | None = None  # int8 [D, G]

    @property
    def output_dim(self) -> int:
        return self.e.shape[0]

    @property
    def group_size(self) -> int:
        return self.e.shape[1]

    @property
    def quantized(self) -> bool:
        return self.levels is not None

    def effective(self, dtype=None) -> np.ndarray:
        """Encoded values as used at inference (dequantized when quantized)."""
        dtype = dtype or self.e.dtype
        if self.levels is None:
            return self.e.data.astype(dtype, copy=False)
        return (self.levels.astype(np.float64) * self.scale).astype(dtype)


def cond_sum_forward(bits: Tensor, cs: ConditionalSummation) -> Tensor:
    """out[d] = sum_g bits[d*G + g] * e[d, g], accumulated in g order."""
    D, G = cs.output_dim, cs.group_size
    if bits.ndim != 2 or bits.shape[1] != D * G:
        raise ValueError(f"conditional summation expects width {D * G}, got {bits.shape}")
    R = bits.shape[0]
    b = bits.data.reshape(R, D, G)
    e = cs.effective(bits.dtype)
    out = np.zeros((R, D), dtype=bits.dtype)
    for g in range(G):
        out = out + b[:, :, g] * e[:, g]

    def bw(up):
        ge = (b * up[:, :, None]).sum(axis=0)
        gb = (e[None, :, :] * up[:, :, None]).reshape(R, D * G)
        return gb, ge

    return custom_op(out, (bits, cs.e), bw, "cond_sum")


def quantize_encodings(cs: ConditionalSummation) -> ConditionalSummation:
    """Symmetric int8 quantization with one scale per block (max|e| / 127)."""
    e = cs.e.data.astype(np.float64)
    m = float(np.abs(e).max()) if e.size else 0.0
    if m == 0.0:
        return ConditionalSummation(cs.e, 1.0, np.zeros(e.shape, dtype=np.int8))
    levels = np.clip(np.rint(e * 127.0 / m), -127, 127).astype(np.int8)
    return ConditionalSummation(cs.e, m / 127.0, levels)


# ---------------------------------------------------------------------------
# the block
# ---------------------------------------------------------------------------

@dataclass
class WeightlessBlockConfig:
    num_features: int
    layer_widths: tuple = (768, 192)
    output_dim: int = 192
    bits_per_feature: int = 8
    fan_in: int = 6
    group_size: int = 1
    training_mode: str = "hard-efd"
    seed: int = 0
    temperature: float = 1 / 3
    theta_lr_mult: float = 10.0   # entries start in [-1, 1] and must cross 0 to flip a bit

    def __post_init__(self):
        self.layer_widths = tuple(int(w) for w in self.layer_widths)
        if not self.layer_widths or min(self.layer_widths) < 1:
            raise ValueError("layer widths must be positive")
        if self.layer_widths[-1] != self.output_dim * self.group_size:
            raise ValueError(
                f"last LUT layer width {self.layer_widths[-1]} must equal "
                f"output_dim*group_size = {self.output_dim * self.group_size}")
        if not 1 <= self.fan_in <= MAX_FAN_IN:
            raise ValueError(f"fan-in must be in 1..{MAX_FAN_IN}")
        if self.bits_per_feature < 1 or self.num_features < 1:
            raise ValueError("num_features and bits_per_feature must be positive")
        if self.training_mode not in MODES:
            raise ValueError(f"training_mode must be one of {MODES}")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["layer_widths"] = list(self.layer_widths)
        return d


class WeightlessBlock:
    """Drop-in replacement for a transformer MLP operating on rows of F features."""

    def __init__(self, config: WeightlessBlockConfig, prefix: str = "", _init: bool = True):
        self.config = config
        self.prefix = prefix
        self.encoder: ThermometerEncoder | None = None
        self.layers: list[LutLayer] = []
        if not _init:
            return
        dtype = default_dtype()
        rng = np.random.default_rng(config.seed)
        width = config.num_features * config.bits_per_feature
        for i, L in enumerate(config.layer_widths):
            mapping = make_mapping(width, L, config.fan_in, rng)
            theta = Parameter(rng.uniform(-1.0, 1.0, (L, 2 ** config.fan_in)),
                              f"{prefix}theta{i}", lr_mult=config.theta_lr_mult, decay=False,
                              dtype=dtype)
            self.layers.append(LutLayer(mapping, theta, width))
            width = L
        e = rng.normal(0.0, 0.02, (config.output_dim, config.group_size))
        self.summation = ConditionalSummation(Parameter(e, f"{prefix}e", dtype=dtype))

    # -- bookkeeping ----------------------------------------------------
    def parameters(self) -> list[Parameter]:
        return [layer.theta for layer in self.layers] + [self.summation.e]

    def fit_encoder(self, calibration) -> ThermometerEncoder:
        self.encoder = fit_thermometer(calibration, self.config.bits_per_feature)
        return self.encoder

    def quantize(self) -> None:
        self.summation = quantize_encodings(self.summation)

    def _require_encoder(self) -> ThermometerEncoder:
        if self.encoder is None:
            raise RuntimeError("thermometer encoder not fitted; call fit_encoder() first")
        return self.encoder

    # -- forward paths --------------------------------------------------
    def forward(self, x: Tensor, mode: str | None = None) -> Tensor:
        """Training forward over rows [R x F] -> [R x D]."""
        mode = mode or self.config.training_mode
        if mode not in MODES:
            raise ValueError(f"mode must be one of {MODES}")
        enc = self._require_encoder()
        if mode == "hard-efd":
            h = encode(x, enc)
            for layer in self.layers:
                h = lut_forward_hard(h, layer)
        else:
            h = encode_soft(x, enc)
            for layer in self.layers:
                h = lut_forward_soft(h, layer, self.config.temperature)
        return cond_sum_forward(h, self.summation)

    __call__ = forward

    def output_bits(self, x) -> np.ndarray:
        """Final LUT layer bits [R, D*G] via integer-address lookups only."""
        enc = self._require_encoder()
        x = np.asarray(x)
        if x.ndim == 1:
            x = x[None, :]
        if x.shape[-1] != enc.num_features:
            raise ValueError(f"expected {enc.num_features} features, got {x.shape[-1]}")
        bits = (x[:, :, None] >= enc.thresholds).reshape(x.shape[0], -1)
        for layer in self.layers:
            addr = layer.addresses(bits)
            bits = layer.table()[np.arange(layer.num_luts), addr]
        return bits

    def infer(self, x, dtype=None) -> np.ndarray:
        """Lookup-and-conditional-add inference; bit-identical to the hard forward."""
        x = np.asarray(x)
        single = x.ndim == 1
        dtype = np.dtype(dtype or self.summation.e.dtype)
        x = x.astype(dtype, copy=False)
        bits = self.output_bits(x)
        R, D, G = bits.shape[0], self.summation.output_dim, self.summation.group_size
        b = bits.reshape(R, D, G)
        e = self.summation.effective(dtype)
        out = np.zeros((R, D), dtype=dtype)
        for g in range(G):
            out = np.where(b[:, :, g], out + e[:, g], out)
        return out[0] if single else out

    def infer_int(self, x) -> np.ndarray:
        """Integer sums of the selected int8 levels (caller applies the scale)."""
        if not self.summation.quantized:
            raise RuntimeError("encodings are not quantized")
        x = np.asarray(x)
        single = x.ndim == 1
        bits = self.output_bits(x.astype(self.summation.e.dtype, copy=False))
        R, D, G = bits.shape[0], self.summation.output_dim, self.summation.group_size
        lv = self.summation.levels.astype(np.int64)
        out = (bits.reshape(R, D, G) * lv[None]).sum(axis=-1)
        return out[0] if single else out

    # -- serialisation ----------------------------------------------------
    def to_fragment(self) -> dict:
        enc = self._require_encoder()
        cs = self.summation
        return {
            "name": self.prefix,
            "config": self.config.to_dict(),
            "thresholds": enc.thresholds.tolist(),
            "surrogate_width": enc.width.tolist(),
            "layers": [
                {"num_luts": l.num_luts, "fan_in": l.fan_in, "input_width": l.input_width,
                 "mapping": l.mapping.tolist(), "init": l.init_hex()}
                for l in self.layers
            ],
            "encodings": {
                "output_dim": cs.output_dim,
                "group_size": cs.group_size,
                "e": cs.e.data.astype(np.float64).tolist(),
                "scale": cs.scale,
                "levels": None if cs.levels is None else cs.levels.astype(int).tolist(),
            },
        }

    @classmethod
    def from_fragment(cls, frag: dict, dtype=None) -> "WeightlessBlock":
        """Frozen block rebuilt from a checkpoint fragment (theta = +/-1 from the packed signs)."""
        dtype = dtype or default_dtype()
        cfg = WeightlessBlockConfig(**frag["config"])
        blk = cls(cfg, prefix=frag.get("name", ""), _init=False)
        blk.encoder = ThermometerEncoder(np.array(frag["thresholds"]), np.array(frag["surrogate_width"]))
        for i, lf in enumerate(frag["layers"]):
            signs = np.stack([unpack_init(h, lf["fan_in"]) for h in lf["init"]])
            theta = Parameter(np.where(signs, 1.0, -1.0), f"{blk.prefix}theta{i}", decay=False, dtype=dtype)
            blk.layers.append(LutLayer(np.array(lf["mapping"]), theta, lf["input_width"]))
        enc = frag["encodings"]
        levels = None if enc["levels"] is None else np.array(enc["levels"], dtype=np.int8)
        blk.summation = ConditionalSummation(
            Parameter(np.array(enc["e"]), f"{blk.prefix}e", dtype=dtype), enc["scale"], levels)
        return blk
