"""
Drift scoring basics
====================

Train a small CNN on synthetic images, then compare its BN running
statistics against batches from the same data, from perturbed data, and
from pure noise. The drift score orders these exactly as you'd hope.
"""

import mde

ds = mde.generate_dataset(class_count=4, samples_per_class=80, seed=0)
model = mde.default_model(4, seed=0)
model = mde.train(model, ds.images, ds.labels, mde.TrainConfig(epochs=20, seed=0))
accuracy, _ = mde.evaluate(model, ds.images, ds.labels)
print(f"train accuracy: {accuracy:.3f}")

cfg = mde.DriftConfig(metric="cosine", batch_size=32, iterations=4)

own = mde.mde_score(model, mde.minibatch_stream(ds.images, 32, 4, seed=1), cfg)
print(f"drift on own training data:   {own.aggregate:.5f}  (per layer: {[round(v, 5) for v in own.per_layer]})")

noisy = mde.apply_shift(ds.images, mde.GaussianNoise(0.4), seed=2)
shifted = mde.mde_score(model, mde.minibatch_stream(noisy, 32, 4, seed=1), cfg)
print(f"drift on noise-corrupted data: {shifted.aggregate:.5f}")

fake = mde.fakedata_report(model, cfg, seed=3)
print(f"drift on standard-normal noise: {fake.aggregate:.5f}")

print(f"normalized by the noise ceiling: own={mde.normalize_by_fakedata(own, fake):.4f}, "
      f"corrupted={mde.normalize_by_fakedata(shifted, fake):.4f}")
