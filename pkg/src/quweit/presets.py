"""Named model configurations."""

from __future__ import annotations

from .transformer import ModelConfig

PRESETS: dict[str, dict] = {
    "gpt3": dict(kind="decoder", n_layers=96, d_model=12288, n_heads=96, context=4096, vocab_size=50257),
    "ivit-t": dict(kind="encoder", n_layers=12, d_model=192, n_heads=3, image_size=224, patch_size=16,
                   num_classes=1000, weightless={"layer_widths": [768, 192], "bits_per_feature": 8}),
    "nano-shakespeare": dict(kind="decoder", n_layers=2, d_model=64, n_heads=4, context=128, vocab_size=65),
}


def preset(name: str, **overrides) -> ModelConfig:
    if name not in PRESETS:
        raise KeyError(f"unknown preset {name!r}; choose from {sorted(PRESETS)}")
    return ModelConfig.from_dict({**PRESETS[name], **overrides})
