"""Synthetic imaging records and the quality-control pass.

Run: python demos/03_data_and_quality.py
"""
# %% Templated records are generated from scene parameters.
from collections import Counter

from okaf.datagen import generate
from okaf.quality import DESK_MIN_SIDE, ToyScorer, run_qc

samples = generate({"text": 4, "t2i": 20, "i2t": 30, "interleaved": 10}, seed=0, noise_fraction=0.3)
print(Counter(s.task for s in samples))
for s in samples[4:6] + samples[-3:]:
    print(f"{s.id:26s} {s.kind:15s} q={s.q!r:32.32s} a={s.a_t!r:.60s}")

# %% Coarse filter, score and keep the top half of the caption pairs.
res = run_qc(samples, ToyScorer(), min_side=DESK_MIN_SIDE)
print(f"kept {len(res.kept)} of {len(samples)}; rejections: {Counter(res.rejected.values())}")
worst = sorted(res.scored, key=lambda x: x.score_final)[:3]
for x in worst:
    print(f"low score {x.score_final:.3f}: {x.sample.a_t!r:.70s}")
