"""From a trained checkpoint to Verilog, and proof that the circuit matches the model."""

import sys
import tempfile
from pathlib import Path

import numpy as np

from quweit.checkpoint import make_checkpoint, restore_model
from quweit.codegen import build_netlist, emit_hdl, verify_equivalence
from quweit.presets import preset
from quweit.trainer import TrainConfig, TextDataset, train
from quweit.transformer import QuWeiTModel

text = Path(sys.argv[1]).read_text() if len(sys.argv) > 1 else "to be or not to be, that is the question\n" * 200
ds = TextDataset(text)
cfg = preset("nano-shakespeare", vocab_size=ds.vocab_size, block_kind="weightless", n_layers=1, d_model=16,
             n_heads=2, context=32)
_, ckpt = train(QuWeiTModel(cfg), ds, TrainConfig(steps=30, warmup=3, context=32, eval_interval=30,
                                                  eval_batches=2))

# Codegen needs integer encoded values.
model = restore_model(ckpt)
for blk in model.weightless_blocks():
    blk.quantize()
qckpt = make_checkpoint(model, step=ckpt.step)

nl = build_netlist(qckpt, 0)
print("cells:", nl.census())
hdl = emit_hdl(nl)
out = Path(tempfile.mkdtemp()) / f"{nl.name}.v"
out.write_text(hdl)
print(f"wrote {out} ({len(hdl.splitlines())} lines)")
print("\n".join(hdl.splitlines()[:12]))

rep = verify_equivalence(qckpt, 0, num_vectors=10_000)
print(f"\n{rep['vectors_tested']} vectors, {rep['mismatches']} mismatches")
assert rep["mismatches"] == 0 and np.all(np.isfinite(model.weightless_blocks()[0].summation.effective()))
