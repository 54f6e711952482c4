"""
A short training run, scored two ways
=====================================

Trains a small model for a few hundred steps (well under a minute on one core),
then evaluates the same checkpoint with class-only scores and with the
fused class x localization score.
"""

import tempfile
import time

from scopenet.config import ExperimentConfig
from scopenet.experiments import eval_run, train_run

cfg = ExperimentConfig().replace(
    data={"train_count": 120, "test_count": 60},
    model={"backbone_channels": [8, 16, 32], "head_channels": 24},
    train={"steps": 400, "batch_size": 8},
)

out = tempfile.mkdtemp(prefix="scopenet-demo-")
start = time.perf_counter()
rd = train_run(cfg, out)
print(f"trained into {rd} in {time.perf_counter() - start:.0f}s")

for mode in ("cls_only", "fused"):
    _, result = eval_run(cfg.replace(infer={"scoring_mode": mode}), out)
    m = result.to_dict()
    print(f"{mode:9s} AP={m['AP']:.3f} AP50={m['AP50']:.3f} AP75={m['AP75']:.3f} AR100={m['AR100']:.3f}")
