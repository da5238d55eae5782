"""Where do the multiplications go?  Count per-token MACs for GPT-3 and a tiny ViT."""

from quweit.presets import preset
from quweit.transformer import count_workload

gpt3 = count_workload(preset("gpt3"))
print("GPT-3, one decoder layer, one token:")
print(gpt3.to_text())

# A vision encoder processes every patch token, so count the full 196-token layer.
vit = count_workload(preset("ivit-t", n_layers=1))
mlp = sum(s.macs for s in vit.stages if s.mlp)
total = sum(s.macs for s in vit.stages)
print(f"\nI-ViT-T layer: {mlp:,} of {total:,} MACs sit in the MLP ({mlp / total:.1%})")
print("Those are the multiplications a weightless block removes.")
