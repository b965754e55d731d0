"""Cross-modal attention up close.

One stream supplies queries, the other keys and values. The returned
attention tensor is the post-softmax weight matrix, so you can inspect
which key frames each query frame listened to.
"""

import numpy as np

from crossmodal.layers import SeqBatch
from crossmodal.model import CrossModalAttention, ModelConfig

rng = np.random.default_rng(7)
cfg = ModelConfig.tiny(heads=2, head_dim=4)
block = CrossModalAttention(cfg, rng)

queries = SeqBatch.single(rng.normal(size=(4, cfg.model_dim)))   # e.g. audio frames
keys = SeqBatch.single(rng.normal(size=(6, cfg.model_dim)))      # e.g. text tokens

out, attn = block(queries, keys)
print("output follows the query stream:", out.x.shape)
print("attention shape [heads x Tq x Tk]:", attn.shape)
print("\nhead 0 attention (rows are query frames, columns key frames):")
with np.printoptions(precision=3, suppress=True):
    print(attn[0])
print("row sums:", attn.sum(axis=-1).round(9).tolist())

# --- masked keys receive exactly zero weight -----------------------------------

padded = np.zeros((1, 6, cfg.model_dim))
padded[0, :3] = keys.x.data[:3]
kv_masked = SeqBatch.from_padded(padded, np.array([3]))
_, attn_masked = block(queries, kv_masked)
print("\nwith only 3 valid keys, columns 3..5 are exactly zero:",
      bool((attn_masked[..., 3:] == 0).all()))

# --- a single key takes all the weight ------------------------------------------

single = SeqBatch.single(rng.normal(size=(1, cfg.model_dim)))
_, attn_single = block(queries, single)
print("single-key attention is exactly 1.0 everywhere:",
      bool((attn_single == 1.0).all()))

# --- the scale of scores moves attention sharpness ------------------------------
# Scaling projected queries and keys (here via their weights) sharpens the
# softmax but never changes which key a query prefers most.

before = attn.argmax(axis=-1)
for lin in (block.w_query, block.w_key):
    lin.weight.data *= 2.0
    lin.bias.data *= 2.0
_, attn_sharp = block(queries, keys)
print("\nargmax per row unchanged after sharpening:",
      bool((attn_sharp.argmax(axis=-1) == before).all()))
print("max weight before vs after:",
      float(attn.max().round(4)), "->", float(attn_sharp.max().round(4)))
