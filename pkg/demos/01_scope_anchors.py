"""
Scope anchors on one border distance
====================================

A border distance is regressed relative to one of N geometric anchors per
level. This walk-through shows the bins, the round trip through the log-space
offset, and how the bin-score temperature turns into a localization score.
"""

import numpy as np

from scopenet.detect import fuse_scores
from scopenet.scope_head import assign_bin, bin_probabilities, decode_border, encode_border, init_anchor_set

np.set_printoptions(precision=4, suppress=True)

# level 3 (stride 8) covering border distances in [0, 64) with 5 bins of one octave
anchors = init_anchor_set(3, (0.0, 64.0), num_bins=5, bin_size=1.0)
print("bin edges      ", anchors.edges)
print("anchor lengths ", np.exp2(anchors.log_scales))

# a 23 px border falls in bin 4 of [16, 32); its target is a small log offset
d = 23.0
n = assign_bin(anchors, d)
t = encode_border(anchors, n, d)
print(f"\nd={d} -> bin {n}, t={t:.4f}, decoded back to {decode_border(anchors, n, t):.12f}")

# ties go to the upper bin, and anything past the last edge clamps
print("bins of 16, 31.999, 32, 500:", [assign_bin(anchors, v) for v in (16, 31.999, 32, 500)])

# %%
# Bin scores and the temperature
# ------------------------------
# The last raw score is the log of sigma^2. A larger temperature flattens the
# distribution without changing which bin wins.

scores = np.array([2.0, 0.5, 0.1, -1.0, -1.0])
for log_t in (-1.0, 0.0, 1.0, 3.0):
    p, s2 = bin_probabilities(np.append(scores, log_t))
    print(f"sigma^2={float(s2):7.3f}  p={p}  max={p.max():.3f}")

# %%
# Localization score
# ------------------
# The max bin probability of each of the four borders is averaged and
# multiplies the class probability.

p_tilde = np.array([0.9, 0.8, 0.95, 0.6])
p_loc, p_box = fuse_scores(np.array([0.7]), p_tilde[None])
print(f"\np_loc={float(p_loc[0]):.4f}  p_box={float(p_box[0]):.4f}")
