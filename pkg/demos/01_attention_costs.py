"""How the four attention layouts scale, counted rather than timed.

Every matmul in the engine adds its multiply-accumulates to a global
counter, and the score product (Q K^T) is tagged separately. So the
complexity table can be read straight off the counters.
"""

from fractions import Fraction

from dyntryon.benchmetrics import ATTENTION_TYPES, ldam_full3d_ratio, measure_attention

B, s, d = 1, 16, 8
L, n = 4, 6

print("score-product flops as the number of frames doubles")
print(f"{'layout':>9} " + " ".join(f"{'f=' + str(f):>10}" for f in (2, 4, 8)))
for kind in ATTENTION_TYPES:
    counts = [measure_attention(kind, B, f, s, d, L, n).measured_score_flops for f in (2, 4, 8)]
    print(f"{kind:>9} " + " ".join(f"{c:>10}" for c in counts))

# spatial attention grows linearly in f, temporal and full 3D quadratically,
# and limb attention not at all: it only ever sees L padded groups of n tokens
for kind in ATTENTION_TYPES:
    a = measure_attention(kind, B, 4, s, d, L, n).measured_score_flops
    b = measure_attention(kind, B, 8, s, d, L, n).measured_score_flops
    print(f"{kind:>9}: doubling f multiplies score flops by {Fraction(b, a)}")

# the counted flops match the closed forms exactly
rep = measure_attention("full3d", 1, 4, 64, 32)
print("\nfull 3D at (f, s, d) = (4, 64, 32):", rep.measured_score_flops, "==", 2 * (4 * 64) ** 2 * 32)

# at video-model scale (36 frames of 192 tokens, 4 limbs of 12 tokens)
r = ldam_full3d_ratio(4, 12, 36, 192)
print(f"limb / full-3D score cost at f=36, s=192, L=4, n=12: {r} = {float(r):.3e}")
