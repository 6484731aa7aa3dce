"""Autodiff engine and the two-expert backbone.

Run: python demos/01_autodiff_and_routing.py
"""
# %% Reverse-mode gradients agree with central differences.
import numpy as np

from okaf import ModelConfig, Tensor, UnifiedModel, grad_check
from okaf.model import ModalityTag, Mode, build_sequence
from okaf.tensor import layer_norm, no_grad

rng = np.random.default_rng(0)
x = Tensor(rng.normal(size=(3, 5)), requires_grad=True)
g = Tensor(np.ones(5), requires_grad=True)
b = Tensor(np.zeros(5), requires_grad=True)
w = rng.normal(size=(3, 5))
err = grad_check(lambda: (layer_norm(x, g, b) * w).sum(), [x, g, b])
print(f"layer norm: max relative gradient error {err:.2e}")

# %% A tiny unified model. Text and ViT tokens go to one expert, VAE latents to the other.
cfg = ModelConfig(width=16, depth=2, heads=2, vit_width=8, vit_depth=1, vit_heads=2, latent_dim=4, vocab=64)
model = UnifiedModel(cfg)
print(f"{len(model.params)} parameter tensors, {sum(p.size for p in model.params.values())} numbers")

z = Tensor(rng.normal(size=(4, cfg.latent_dim)))
seq = build_sequence([1, 7, 9, 2], None, z, Mode.GENERATE, flow_time=0.5)
print("tags:", seq.tags.tolist())
print("attention mask (row attends to column):")
print(seq.attn_mask.astype(int))

# %% Routing is hard: each token visits exactly one expert per layer.
model.expert_calls = {"und": 0, "gen": 0}
with no_grad():
    h = model.forward(seq)
print("expert calls:", model.expert_calls)
print("velocity rows:", model.predict_velocity(h, seq.positions_of(ModalityTag.VAE), 0.5).shape)
