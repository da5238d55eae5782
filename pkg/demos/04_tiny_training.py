"""Train the nano decoder briefly with both feed-forward variants and sample text.

Set QUWEIT_DATA to point at a different character corpus.
"""

import os
import sys

from quweit.presets import preset
from quweit.trainer import TrainConfig, load_corpus, train
from quweit.transformer import QuWeiTModel, generate

steps = int(sys.argv[1]) if len(sys.argv) > 1 else 200
ds = load_corpus(os.environ.get("QUWEIT_DATA", "data/shakespeare_char/input.txt"))
cfg = TrainConfig(steps=steps, warmup=min(100, steps // 10), eval_interval=max(1, steps // 4), eval_batches=4)

for kind in ("mlp", "weightless"):
    model = QuWeiTModel(preset("nano-shakespeare", vocab_size=ds.vocab_size, block_kind=kind))
    print(f"\n== {kind}: {sum(p.data.size for p in model.parameters()):,} trainable values")
    recs, _ = train(model, ds, cfg, progress=print)
    ids = generate(model, ds.encode("ROMEO:"), 120, temperature=0.8, seed=0)
    print(ds.decode(ids))
