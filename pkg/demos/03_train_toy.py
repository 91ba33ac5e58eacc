"""
Training a field from events alone
==================================

A short run on the two-blobs stream. Held-out views are rendered, brightness
aligned, gamma corrected and scored against the ground truth.
"""
import sys

from evrf.field import FieldArch
from evrf.losses import LossConfig
from evrf.pipeline import background_artifact, default_setup, evaluate_views, held_out_times, simulate_scene
from evrf.scene import PRESETS
from evrf.trainer import TrainConfig, train

steps = int(sys.argv[1]) if len(sys.argv) > 1 else 300

scene = PRESETS["two-blobs"]
K, traj, cfg = default_setup(scene, resolution=32, n_samples=24)
stream = simulate_scene(scene, K, traj, cfg)

conf = TrainConfig(iterations=steps, lr=1e-3, batch_size=256, windows_per_step=2, render=cfg,
                   arch=FieldArch(64, 3, 6, 2), loss=LossConfig(lam=0.5), seed=0)


def progress(step, params, entry):
    if step % 50 == 0:
        print(f"step {step:4d}  loss {entry['loss_total']:.4f}  TAoPET {entry['taopet_mean']:.4f}  "
              f"PoAP+ {entry['poap_pos']:.3f}")


params, history = train(stream, traj, K, conf, callback=progress)

report = evaluate_views(params, scene, K, traj, cfg, held_out_times(traj))
print(f"held-out PSNR {report.mean_psnr:.2f} dB, SSIM {report.mean_ssim:.3f}")
print("background |dL|:", round(background_artifact(params, stream, scene, K, traj, cfg), 4))
