"""
============================
One-shot adaptation, small
============================

Render a reduced two-domain benchmark, train on the source look, then adapt
to a single unlabelled target image and score the held-out target set.
Runs in well under a minute. The CLI drives the full-size protocol.
"""
import time

import numpy as np

from osuda import adapt as A
from osuda import benchdata as bd

data = bd.build_benchmark(seed=0, height=32, width=32, n_source=100, n_eval=16, n_candidates=2)
cfg = A.AdaptConfig(pretrain_iters=5000, max_iters=300, patch_size=2)

t0 = time.perf_counter()
pre = A.pretrain_source(cfg, data["source"])
print(f"pretrained in {time.perf_counter() - t0:.1f}s")
print("source-domain mIoU", round(bd.evaluate(pre, data["source"]).miou, 4))
base = bd.evaluate(pre, data["eval"])
print("target mIoU before", round(base.miou, 4))

for pick in range(len(data["candidates"])):
    res = A.adapt_one_shot(pre, data["source"], data["candidates"][pick].image, cfg)
    rep = bd.evaluate(res.params, data["eval"])
    print(f"pick {pick}: target mIoU after {rep.miou:.4f}  "
          f"(gain {rep.miou - base.miou:+.4f}, target images used: {res.target_images_seen})")
    print("   per-class IoU", np.round(rep.iou, 3))

last = res.log[-1]
print("final iteration", {k: round(v, 4) if isinstance(v, float) else v for k, v in last.items()})
