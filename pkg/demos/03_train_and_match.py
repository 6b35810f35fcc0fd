"""Train a small model and visualize cross-modality matches.

Generates a synthetic dataset, trains briefly with the joint SL+SSL
objective, then matches a held-out visible/pseudo-IR pair and draws the
mutual-NN matches colored by correctness.

Run:  python3 demos/03_train_and_match.py        (~1 minute on CPU)
Writes demos/output/train_curve.png and demos/output/matches.png
"""

import tempfile
from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt
import numpy as np

from crossfeat.datasets import SyntheticParams, make_synthetic_dataset, split_dataset
from crossfeat.evaluation import evaluate_keypoint_sets
from crossfeat.model import ModelConfig, extract_keypoints
from crossfeat.trainer import TrainConfig, train
from crossfeat.transforms import TransformConfig

OUT = Path(__file__).parent / "output"
OUT.mkdir(exist_ok=True)

tmp = Path(tempfile.mkdtemp(prefix="demo_train_"))
manifest = make_synthetic_dataset(tmp / "data", 12,
                                  params=SyntheticParams(size=(96, 96)), seed=3)
train_m, test_m = split_dataset(manifest, test_fraction=0.25, seed=0)
print(f"{len(train_m)} training pairs, {len(test_m)} held out")

model_config = ModelConfig(channels=(12, 12, 16), descriptor_dim=12, stride=1, seed=0)
config = TrainConfig(
    max_steps=200, lam=0.6, seed=1, crop_size=64, n_correspondences=96,
    learning_rate=5e-4, safe_radius=4.0,
    transform_config=TransformConfig(flip_prob=0.0, rot90=False),
    checkpoint_path=str(tmp / "model.ckpt"), log_path=str(tmp / "log.tsv"))
result = train(config, train_m, model_config)

steps = [r.step for r in result.log_rows]
fig, ax = plt.subplots(figsize=(7, 4))
for key, color in [("total", "k"), ("sl", "C0"), ("ssl_vis", "C1"), ("ssl_ir", "C2")]:
    ax.plot(steps, [getattr(r.breakdown, key) for r in result.log_rows],
            color=color, label=key, alpha=0.7, linewidth=1)
ax.set_xlabel("step")
ax.set_ylabel("loss")
ax.legend()
ax.set_title(f"joint objective, lambda={config.lam}")
fig.tight_layout()
fig.savefig(OUT / "train_curve.png", dpi=110)
print(f"wrote {OUT / 'train_curve.png'}")

pair = test_m.load_pair(0)
out_a = result.model(pair.visible)
out_b = result.model(pair.other)
kps_a = extract_keypoints(out_a, 64, nms_radius=4)
kps_b = extract_keypoints(out_b, 64, nms_radius=4)
nc, ncm, cmr, matches = evaluate_keypoint_sets(kps_a, kps_b, pair.correspondence, 3.0)
print(f"held-out pair {pair.pair_id}: NC={nc} NCM={ncm} CMR="
      + ("n/a" if cmr is None else f"{cmr:.1f}%"))

h, w = pair.visible.shape
canvas = np.zeros((h, 2 * w))
canvas[:, :w] = pair.visible
canvas[:, w:] = pair.other
fig, ax = plt.subplots(figsize=(10, 5))
ax.imshow(canvas, cmap="gray", vmin=0, vmax=1)
for idx, (i, j) in enumerate(matches.pairs):
    xa, ya = kps_a.points[i]
    xb, yb = kps_b.points[j]
    ax.plot([xa, xb + w], [ya, yb],
            color="lime" if matches.correct[idx] else "red", linewidth=0.7)
ax.set_axis_off()
ax.set_title("mutual-NN matches (green = correct within 3 px)")
fig.tight_layout()
fig.savefig(OUT / "matches.png", dpi=110)
print(f"wrote {OUT / 'matches.png'}")
