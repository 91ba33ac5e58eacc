"""
Zero-event regularization under sensor noise
============================================

With 20% spurious events, train once with zero+ and once without, then
compare the predicted log change at silent background pixels.
"""
import sys

from evrf.field import FieldArch
from evrf.losses import LossConfig
from evrf.pipeline import background_artifact, default_setup, simulate_scene
from evrf.scene import PRESETS
from evrf.trainer import TrainConfig, train

steps = int(sys.argv[1]) if len(sys.argv) > 1 else 300

scene = PRESETS["two-blobs"]
K, traj, cfg = default_setup(scene, resolution=32, n_samples=24)
stream = simulate_scene(scene, K, traj, cfg, noise=0.2)
print(f"{len(stream)} events, {stream.meta['noise_fraction']:.0%} spurious")

for name, lam in (("norm+&zero+", 0.5), ("norm+ only", 0.0)):
    conf = TrainConfig(iterations=steps, lr=1e-3, batch_size=256, windows_per_step=2, render=cfg,
                       arch=FieldArch(64, 3, 6, 2), loss=LossConfig(lam=lam, lam0=0.0), seed=0)
    params, _ = train(stream, traj, K, conf)
    print(f"{name:12s} background |dL| = {background_artifact(params, stream, scene, K, traj, cfg):.4f}")
