"""Targets, decoding and the three spacing rules, without any training.

    python demos/heatmaps_and_metrics.py
"""

import numpy as np

from datr.datasets import PAPER_DOMAINS
from datr.metrics import evaluate_domain
from datr.model import LandmarkSet, decode_landmarks, gaussian_target, rescale_coords

rng = np.random.default_rng(0)

# A Gaussian target per landmark; argmax decoding recovers integer positions exactly.
truth = LandmarkSet(rng.integers(0, 64, size=(4, 2)), 64, 64)
target = gaussian_target(truth, (64, 64), sigma=3.0)
print("target stack", target.shape, "peak", round(float(target.data.max()), 6))
print("decoded == truth:", np.array_equal(decode_landmarks(target).coords, truth.coords))

# Coordinates move between geometries with the pixel-centre rule.
print("(10, 20) at 64x64 ->", rescale_coords([[10, 20]], (64, 64), (512, 512))[0], "at 512x512")

# The same pixel errors scored under each anatomy's rule.
for name, spec in PAPER_DOMAINS.items():
    truths = [rng.uniform(0, 500, size=(spec.num_landmarks, 2)) for _ in range(3)]
    preds = [t + rng.normal(0, 15, size=t.shape) for t in truths]
    rep = evaluate_domain(spec, preds, truths)
    sdrs = ", ".join(f"<{th:g}: {v:.0f}%" for th, v in rep.sdr.items())
    print(f"{name:5s} ({spec.spacing:9s}) MRE {rep.mre:7.2f} {rep.unit}  SDR {sdrs}")
