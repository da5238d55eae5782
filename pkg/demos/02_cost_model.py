"""Systolic array vs weightless PE: cycles and energy for one I-ViT-T encoder layer.

Power numbers in the bundled profiles were calibrated against published energy
figures, so matching them here checks the linear structure of the model rather
than predicting new hardware.
"""

from quweit import costmodel as cm
from quweit.presets import preset

profiles = cm.load_profiles()
cfg = preset("ivit-t")

rows = cm.mlp_vs_pe_table(profiles, cfg)
print("MLP on an a x a systolic array vs the weightless PE:")
print(cm.format_table(rows, ["method", "cycles", "fpga_energy_uj", "asic_energy_uj"]))

for target in ("fpga", "asic"):
    p = profiles[f"{target}-32x32"]
    base = cm.encoder_layer_report(cfg, p, use_weightless=False)
    ours = cm.encoder_layer_report(cfg, p, use_weightless=True)
    comp = cm.compare(base, ours)
    print(f"\n{target.upper()} 32x32, full layer:")
    print(cm.format_table(cm.stages_to_rows(ours), ["stage", "cycles", "energy_uj"]))
    print(f"baseline {comp.baseline_total_j * 1e6:.2f} uJ -> {comp.quweit_total_j * 1e6:.2f} uJ "
          f"({comp.ratio:.2f}x)")

# Accumulating over several cycles to time-match attention costs a little PE energy.
slow = cm.encoder_layer_report(cfg, profiles["fpga-32x32"], True, accumulation_factor=8)
print(f"\nwith 8-cycle accumulation the PE takes {slow[-1].cycles} cycles, {slow[-1].energy_uj:.2f} uJ")
