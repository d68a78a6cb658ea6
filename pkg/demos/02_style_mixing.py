"""
=============================
Mixing feature statistics
=============================

Source features take on a blend of their own per-channel mean/std and a
jittered copy of the target's. Nothing here is learned.
"""
import numpy as np

from osuda import stylemix as sm
from osuda import tensor as T

rng = np.random.default_rng(3)
f_s = T.Tensor(rng.normal(0.0, 1.0, size=(1, 4, 8, 8)))
f_t = T.Tensor(rng.normal(2.0, 0.3, size=(1, 4, 8, 8)))

s, t = sm.channel_stats(f_s), sm.channel_stats(f_t)
print("source mu   ", s.mu.data.ravel().round(3))
print("target mu   ", t.mu.data.ravel().round(3))

mixer = sm.StyleMixer(np.random.default_rng(0), np.random.default_rng(1))
mixer.history = []
out = mixer(f_s, f_t)
lam = mixer.history[0][0].ravel()
print("lambda      ", lam.round(3))
print("mixed mu    ", sm.channel_stats(out).mu.data.ravel().round(3))

# lambda = 0 with no jitter is plain AdaIN: output carries the target stats
adain = sm.StyleMixer(None, None, variant="adain")
o = sm.channel_stats(adain(f_s, f_t))
print("adain sigma ", o.sigma.data.ravel().round(4), "target", t.sigma.data.ravel().round(4))

# expected gamma: lambda averages to 1/2 and the jitter to 0
draws = []
for seed in range(2000):
    lam_, r_mu, r_sig = sm.draw_mix_noise(s, t, np.random.default_rng(seed))
    gamma, _ = sm.mix_stats(s, t, lam_, r_mu, r_sig)
    draws.append(gamma.data.ravel())
print("mean gamma  ", np.mean(draws, axis=0).round(3))
print("midpoint    ", ((s.sigma.data + t.sigma.data) / 2).ravel().round(3))
