"""A three-stage curriculum on a small model, then a held-out evaluation.

Run: python demos/04_curriculum_and_eval.py   (about 30 s)
"""
# %% Data, quality control and a small model.
import json
import tempfile

from okaf import ModelConfig, UnifiedModel
from okaf.curriculum import StageConfig, default_stage, run_curriculum, split_by_category
from okaf.datagen import generate
from okaf.evaluation import ModelPredictor, evaluate, report_json
from okaf.quality import DESK_MIN_SIDE, ToyScorer, run_qc

train = run_qc(generate({"text": 10, "t2i": 40, "i2t": 60, "interleaved": 25}, seed=0),
               ToyScorer(), min_side=DESK_MIN_SIDE).kept
model = UnifiedModel(ModelConfig(width=32, depth=2, heads=2, seed=0))

# %% Stage 0 fits the autoencoder; stages 1 to 3 follow the recipe with shortened runs.
stages = [StageConfig.from_mapping({"steps": "40", "batch_size": "4"}, default_stage(k)) for k in (1, 2, 3)]
for s in stages:
    print(f"stage {s.stage_id}: lr {s.effective_lr:.1e}, vit frozen {s.freeze['vit']}, mixing "
          + ", ".join(f"{k} {v:.2f}" for k, v in s.mixing.items()))
with tempfile.TemporaryDirectory() as out:
    results = run_curriculum(model, split_by_category(train), stages, out_dir=out, vae_steps=300)
for r in results:
    ntp = [x.l_ntp for x in r.trace if x.has_ntp]
    flow = [x.l_flow for x in r.trace if x.has_flow]
    print(f"stage {r.stage_id}: NTP {ntp[0]:.2f} -> {ntp[-1]:.2f}, flow {flow[0]:.2f} -> {flow[-1]:.2f}")

# %% Evaluate on the held-out split. Short training gives low scores; the report format is the point.
test = generate({"t2i": 4, "i2t": 6, "interleaved": 10}, seed=0, split="test")
report = evaluate(ModelPredictor(model, steps=10, max_new_tokens=24), test, "test")
print(json.dumps(json.loads(report_json(report))["tasks"], indent=1))
