"""Sequence layers: strided convolution, masking, and the BiLSTM.

Shows the 4x frame-rate reduction of the audio front end, how padded
frames stay invisible to valid ones, and that the bidirectional LSTM's
forward half is causal.
"""

import numpy as np

from crossmodal.layers import BiLstm, Conv1d, SeqBatch

rng = np.random.default_rng(0)

# --- two stride-2 convolutions halve the frame count twice --------------------

conv_a = Conv1d(8, 8, kernel_size=3, stride=2, padding=1, rng=rng)
conv_b = Conv1d(8, 8, kernel_size=3, stride=2, padding=1, rng=rng)

for frames in (40, 100, 7):
    seq = SeqBatch.single(rng.normal(size=(frames, 8)))
    out = conv_b(conv_a(seq))
    print(f"{frames:>3} input frames -> {out.frames} after two stride-2 convs")

# --- masks ride along with the data -------------------------------------------
# Batching pads to a common length; the conv downsamples each sample's
# valid length consistently, and padded output rows are forced to zero.

block = np.zeros((2, 9, 8))
block[0] = rng.normal(size=(9, 8))
block[1, :5] = rng.normal(size=(5, 8))
batch = SeqBatch.from_padded(block, lengths=np.array([9, 5]))
out = conv_a(batch)
print("\nbatch lengths", list(batch.lengths), "->", list(out.lengths))
print("padded rows all zero:", bool((out.x.data[~out.valid_mask().reshape(-1)] == 0).all()))

# --- the BiLSTM's forward direction cannot see the future ----------------------

lstm = BiLstm(8, 4, rng=rng)
x = rng.normal(size=(6, 8))
base = lstm(SeqBatch.single(x)).x.data

x_perturbed = x.copy()
x_perturbed[4] += 100.0                       # enormous change at frame 4
pert = lstm(SeqBatch.single(x_perturbed)).x.data

fwd_same = np.array_equal(base[:4, :4], pert[:4, :4])    # frames 0..3, fwd half
bwd_diff = not np.allclose(base[:4, 4:], pert[:4, 4:])   # bwd half reacts
print(f"\nforward states before the perturbed frame unchanged: {fwd_same}")
print(f"backward states before it changed (they look ahead):  {bwd_diff}")

# --- padding does not leak into valid frames -----------------------------------

alone = lstm(SeqBatch.single(x)).x.data
padded_block = np.zeros((1, 12, 8))
padded_block[0, :6] = x
padded = lstm(SeqBatch.from_padded(padded_block, np.array([6])))
print("padded run matches lone run:",
      np.allclose(alone, padded.x.data[:6], atol=1e-12))
