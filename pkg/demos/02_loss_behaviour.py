"""
How the event losses react to scale and sign
============================================

The normalized losses ignore the unknown threshold C. The zero+ term compares
contrast at silent pixels to contrast at firing pixels.
"""
import numpy as np

from evrf.losses import (LossConfig, WindowBatch, composite_loss, diagnostics, loss_norm, loss_norm_minus,
                         loss_norm_plus, loss_zero_minus, loss_zero_plus)


def batch(delta, E):
    E = np.asarray(E)
    return WindowBatch(0, 1, np.zeros((len(E), 2), int), E, np.zeros(len(E), int), np.asarray(delta, float))


rng = np.random.default_rng(0)
E = rng.integers(-3, 4, 32)
E[0] = 2

# a prediction that matches the events up to an unknown threshold
exact = batch(0.3 * E, E)
print("at truth:", [round(float(f(exact)), 12) for f in (loss_norm, loss_norm_plus, loss_zero_plus)])
print("recovered threshold (TAoPET):", diagnostics(exact).taopet_mean)

# rescaling the prediction leaves the normalized losses alone
noisy = 0.3 * E + 0.05 * rng.normal(size=32)
for k in (0.1, 1.0, 10.0):
    b = batch(k * noisy, E)
    print(f"k={k:5}: norm {float(loss_norm(b)):.6f}  norm- {float(loss_norm_minus(b)):.6f}  "
          f"norm+ {float(loss_norm_plus(b)):.6f}  zero+ {float(loss_zero_plus(b)):.6f}  "
          f"zero- {float(loss_zero_minus(b)):.6f}")

# flipping signs on some firing pixels: norm+ drops them, PoAP notices
flipped = noisy.copy()
flipped[:6] *= -1
b = batch(flipped, E)
d = diagnostics(b)
print(f"after flips: PoAP {d.poap:.3f}, positives-only {d.poap_pos:.3f}")
print("composite norm+&zero+:", float(composite_loss(b, LossConfig(lam=0.5))[0]))
