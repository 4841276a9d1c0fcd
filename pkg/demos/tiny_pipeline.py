"""
The whole pipeline at small size
==============================

Synthetic corpus, both training stages for both report variants, retrieval
and the marker-token count on generated reports. A few minutes on one
core. The ``qfl`` command runs the same steps at desk scale.
"""

import numpy as np

from qfl import evaluation as E
from qfl import trainer as TR
from qfl.corpus import CorpusConfig, Variant, report_body
from qfl.dataset import prepare
from qfl.lm import LmConfig

ds = prepare(CorpusConfig(n_cases=400, seed=0, feature_dim=48))
print({name: len(ds[name]) for name in ("train", "val", "test")}, "cases")
case = ds["train"][0]
print("full report:   ", case.text(Variant.FULL))
print("H&E-only report:", case.text(Variant.HE_ONLY))

model = dict(n_blocks=2, hidden_dim=32, n_heads=4)
s1 = TR.TrainConfig.stage1(epochs=15, batch_size=20, peak_lr=1e-3, warmup_steps=20, max_tiles_per_case=8)
stage1 = {v: TR.train_stage1(s1, ds, v, **model) for v in ("he_only", "full")}
table = E.cross_eval(stage1["he_only"], stage1["full"], ds["test"], ds.tokenizer, n_resamples=200)
print(table.to_csv())

# a small LM that has only ever read reports, then image-conditioned fine-tuning
lmcfg = LmConfig(vocab_size=ds.tokenizer.vocab_size, dim=32, n_layers=1, n_heads=4, max_len=ds.max_text_len())
lm = TR.pretrain_stub_lm([report_body(c, Variant.FULL, ds.tokenizer) for c in ds["train"]], lmcfg,
                         epochs=10, batch_size=32)
s2 = TR.TrainConfig.stage2(epochs=6, batch_size=20, warmup_steps=10, n_queries=16, max_tiles_per_case=8)
for variant in ("he_only", "full"):
    ck = TR.train_stage2(s2, ds, variant, stage1["full"], lm)
    generated = TR.generate_batch(ck, lm, [c.tiles for c in ds["test"]], max_len=60)
    rep = E.hallucination_report(variant, [c.case_id for c in ds["test"]], generated, ds.tokenizer.marker_ids)
    print(f"{variant}: mean marker tokens {rep.mean:.2f}, reports without any {rep.fraction_zero:.0%}")
    print("  e.g.", ds.tokenizer.detokenize([t for t in generated[0] if t != TR.EOS_ID]))
print("done")
