"""
==================================
Patch prototypes and pixel weights
==================================

The target feature map is cut into P x P patches whose mean vectors act as
prototypes. Each source pixel is scored by its best cosine match, then damped
by the normalised entropy of its prediction.
"""
import numpy as np

from osuda import ppm

rng = np.random.default_rng(5)
f_t = np.maximum(rng.normal(size=(6, 8, 8)), 0)
f_s = np.maximum(rng.normal(size=(6, 8, 8)), 0)

for P in (2, 4, 8):
    protos = ppm.target_prototypes(f_t, P)
    fused = ppm.confidence(f_s, protos).values
    print(f"P={P}: {len(protos):2d} prototypes, mean confidence {fused.mean():.3f}")

# a source pixel copied from a target patch mean scores exactly 1
protos = ppm.target_prototypes(f_t, 4)
f_s[:, 0, 0] = protos.protos[2]
print("copied pixel", ppm.confidence(f_s, protos).values[0, 0])

# entropy: flat predictions get weight 0, confident ones keep their score
c = 5
p = rng.dirichlet(np.full(c, 0.3), size=(8, 8)).transpose(2, 0, 1)
p[:, 1, 1] = 1.0 / c
w = ppm.source_weights(f_s, p, protos)
ent = ppm.entropy_map(p).values
print("flat pixel entropy", ent[1, 1], "weight", w.values[1, 1])
print("weight range", w.values.min().round(3), w.values.max().round(3))
