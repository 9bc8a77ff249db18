"""The layer library and the assembled model: batchnorm, GRU cells, the
residual projector, spatial encoding, and a full forward pass at the
reference dimensions (2048+512 visual regions, 1024-d question, 2048-d scene
embedding).

Run: python demos/02_layers_and_model.py
"""

import numpy as np

from ramen import data as D
from ramen import model as M
from ramen import nn
from ramen.tensor import Tensor

rng = np.random.default_rng(0)

# --- batch normalization over pooled (batch x regions) rows ----------------
bn = nn.BatchNorm(4, dtype=np.float64)
x = Tensor(rng.standard_normal((32, 4)) * 3.0 + 5.0)
out = nn.batchnorm_forward(bn, x)
print("batchnorm column means ~0:", np.round(out.data.mean(axis=0), 8))
print("batchnorm column vars  ~1:", np.round(out.data.var(axis=0), 4))

# --- GRU cell: all-zero weights halve the previous state --------------------
cell = nn.GruCell.create(rng, in_size=3, hidden=4, dtype=np.float64)
for name in ("W_z", "W_r", "W_h", "U_z", "U_r", "U_h", "b_z", "b_r", "b_h"):
    getattr(cell, name).data[...] = 0.0
h_prev = Tensor(np.array([1.0, -2.0, 0.5, 4.0]))
h_next = nn.gru_step(cell, Tensor(np.zeros(3, dtype=np.float64)), h_prev)
print("\nzero-weight GRU: h' =", h_next.data, "(0.5 * h_prev)")

# --- spatial encoding: a 16x16 coordinate grid over the box -----------------
vec = M.encode_spatial((0.25, 0.25, 0.75, 0.75))
print(f"\nspatial encoding: length {vec.shape[0]}, range [{vec.min()}, {vec.max()}]")

# --- the full model at reference dimensions ---------------------------------
cfg = M.RamenConfig(num_answers=28, vocab_size=len(D.VOCAB))
print(f"\nreference config: regions {cfg.region_dim}-d, fused {cfg.fused_dim}-d, "
      f"projector {cfg.projector_width}-d, scene embedding {cfg.head_in}-d")
print(f"parameter count: {M.parameter_count(cfg):,}")

net = M.RamenModel(cfg, seed=0).eval()
regions = Tensor(rng.standard_normal((15, cfg.region_dim)).astype(np.float32))
tokens = D.tokenize("how many red cubes are there")
logits = M.forward(net, regions, tokens)
print(f"forward pass: 15 regions + {len(tokens)}-token question -> {logits.shape[0]} logits")

# --- ablation variants share the same interface -----------------------------
for ablation in M.ABLATIONS:
    ab_cfg = M.RamenConfig(
        num_answers=10, vocab_size=len(D.VOCAB), visual_dim=32, spatial_dim=512,
        question_dim=16, projector_width=16, aggregator_hidden=16,
        pre_classifier_width=32, embed_dim=8, ablation=ablation,
    )
    ab_net = M.RamenModel(ab_cfg, seed=1).eval()
    small = Tensor(rng.standard_normal((15, ab_cfg.region_dim)).astype(np.float32))
    out = M.forward(ab_net, small, tokens)
    print(f"  {ablation:18s} projector in {ab_cfg.fused_dim:4d}, "
          f"aggregator in {ab_cfg.aggregator_in if ablation != 'mean_pool' else '-':>4}, "
          f"logits {out.shape[0]}")
