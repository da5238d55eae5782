"""Versioned JSON checkpoints with a SHA-256 content digest.

Layout (all keys sorted, compact separators)::

    format_version   int
    model_config     ModelConfig fields
    train_config     TrainConfig fields or null
    parameters       {name: {"shape", "dtype", "data"}}
    weightless       list of block fragments (thresholds, mapping, packed
                     truth tables, encoded values, optional int8 levels)
    optimizer        {"t", "rejected", "m", "v"} or null
    step             int
    rng_state        numpy bit-generator state or null
    digest           sha256 hex of the canonical dump of everything above
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np

FORMAT_VERSION = 1


class CheckpointError(Exception):
    pass


class CheckpointCorrupt(CheckpointError):
    pass


class CheckpointVersionError(CheckpointError):
    pass


class CheckpointSchemaError(CheckpointError):
    pass


def canonical(payload: dict) -> bytes:
    return json.dumps(payload, sort_keys=True, separators=(",", ":"), allow_nan=False).encode("utf-8")


def digest_of(payload: dict) -> str:
    return hashlib.sha256(canonical(payload)).hexdigest()


def _pack(arr: np.ndarray) -> dict:
    return {"shape": list(arr.shape), "dtype": str(arr.dtype), "data": arr.astype(np.float64).ravel().tolist()}


def _unpack(d: dict) -> np.ndarray:
    return np.array(d["data"], dtype=np.float64).astype(d["dtype"]).reshape(d["shape"])


@dataclass
class Checkpoint:
    payload: dict
    digest: str

    @property
    def step(self) -> int:
        return self.payload["step"]

    @property
    def model_config(self) -> dict:
        return self.payload["model_config"]

    @property
    def weightless(self) -> list[dict]:
        return self.payload["weightless"]

    def fragment(self, block_index: int) -> dict:
        frags = self.payload["weightless"]
        if not 0 <= block_index < len(frags):
            raise CheckpointSchemaError(
                f"block index {block_index} out of range; checkpoint has {len(frags)} weightless blocks")
        return frags[block_index]


def make_checkpoint(model, opt_state=None, step: int = 0, rng=None, train_cfg=None) -> Checkpoint:
    payload = {
        "format_version": FORMAT_VERSION,
        "model_config": model.config.to_dict(),
        "train_config": None if train_cfg is None else asdict(train_cfg),
        "parameters": {p.name: _pack(p.data) for p in model.parameters()},
        "weightless": [b.to_fragment() for b in model.weightless_blocks()],
        "optimizer": None if opt_state is None else {
            "t": opt_state.t,
            "rejected": opt_state.rejected,
            "m": {k: _pack(v) for k, v in sorted(opt_state.m.items())},
            "v": {k: _pack(v) for k, v in sorted(opt_state.v.items())},
        },
        "step": int(step),
        "rng_state": None if rng is None else rng.bit_generator.state,
    }
    # normalise through JSON so in-memory and reloaded payloads compare equal
    payload = json.loads(canonical(payload))
    return Checkpoint(payload, digest_of(payload))


def save_checkpoint(ckpt: Checkpoint, path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_bytes(canonical({**ckpt.payload, "digest": ckpt.digest}))
    return path


def _validate(payload: dict) -> None:
    required = ("model_config", "parameters", "weightless", "step")
    missing = [k for k in required if k not in payload]
    if missing:
        raise CheckpointSchemaError(f"checkpoint missing fields: {missing}")
    cfg = payload["model_config"]
    if cfg.get("block_kind") == "weightless":
        n = int(cfg.get("n_layers", 0))
        if len(payload["weightless"]) != n:
            raise CheckpointSchemaError(
                f"weightless model with {n} layers has {len(payload['weightless'])} weightless fragments")


def load_checkpoint(path) -> Checkpoint:
    path = Path(path)
    raw = path.read_bytes()
    try:
        doc = json.loads(raw.decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CheckpointCorrupt(f"{path}: not a valid checkpoint document ({exc})") from exc
    if not isinstance(doc, dict) or "digest" not in doc:
        raise CheckpointCorrupt(f"{path}: digest missing")
    version = doc.get("format_version")
    if version != FORMAT_VERSION:
        raise CheckpointVersionError(f"{path}: format version {version}, expected {FORMAT_VERSION}")
    digest = doc.pop("digest")
    actual = digest_of(doc)
    if actual != digest:
        raise CheckpointCorrupt(f"{path}: digest mismatch (stored {digest[:12]}..., computed {actual[:12]}...)")
    _validate(doc)
    return Checkpoint(doc, digest)


def restore_model(ckpt: Checkpoint):
    """Rebuild a model whose forward pass is bit-identical to the saved one."""
    from .transformer import ModelConfig, QuWeiTModel
    from .weightless import ConditionalSummation, LutLayer, ThermometerEncoder

    _validate(ckpt.payload)
    model = QuWeiTModel(ModelConfig.from_dict(ckpt.model_config))
    params = model.named_parameters()
    stored = ckpt.payload["parameters"]
    if set(params) != set(stored):
        raise CheckpointSchemaError(
            f"parameter names differ: missing {sorted(set(params) - set(stored))}, "
            f"unexpected {sorted(set(stored) - set(params))}")
    for name, p in params.items():
        arr = _unpack(stored[name])
        if arr.shape != p.shape:
            raise CheckpointSchemaError(f"{name}: shape {arr.shape} != {p.shape}")
        p.data = arr.astype(p.dtype)
    for block, frag in zip(model.weightless_blocks(), ckpt.weightless):
        block.encoder = ThermometerEncoder(np.array(frag["thresholds"]), np.array(frag["surrogate_width"]))
        if len(frag["layers"]) != len(block.layers):
            raise CheckpointSchemaError(f"{block.prefix}: LUT layer count differs from the model config")
        block.layers = [LutLayer(np.array(lf["mapping"]), layer.theta, layer.input_width)
                        for layer, lf in zip(block.layers, frag["layers"])]
        enc = frag["encodings"]
        if enc["levels"] is not None:
            block.summation = ConditionalSummation(
                block.summation.e, enc["scale"], np.array(enc["levels"], dtype=np.int8))
    return model


def restore_optimizer(ckpt: Checkpoint):
    from .trainer import AdamWState

    opt = ckpt.payload.get("optimizer")
    if opt is None:
        return AdamWState()
    return AdamWState(t=opt["t"], rejected=opt["rejected"],
                      m={k: _unpack(v) for k, v in opt["m"].items()},
                      v={k: _unpack(v) for k, v in opt["v"].items()})
