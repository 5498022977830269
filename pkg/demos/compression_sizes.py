# Bytes per frame for the point-only representation versus descriptor baselines,
# plus the reconstruction error PCA and PQ pay on some random 128-d descriptors.
import numpy as np

from imip.compression import (pca_fit, pca_project, pca_reconstruct, pq_decode, pq_encode, pq_fit,
                              representation_size_bytes)

n_pts = 128
print("ours, 128 points:", representation_size_bytes("ours", n=n_pts), "bytes")
print("raw float32 128-d:", representation_size_bytes("raw", n_pts=n_pts, d=128, bytes_per_scalar=4), "bytes")
for k in (8, 32):
    print(f"pca k={k}:", representation_size_bytes("pca", n_pts=n_pts, k=k), "bytes")
for m, k in ((2, 16), (2, 256), (8, 256)):
    print(f"pq m={m} k={k}:", representation_size_bytes("pq", n_pts=n_pts, m=m, k=k), "bytes")

rng = np.random.default_rng(0)
# descriptors with a decaying spectrum, a bit like real ones
X = rng.normal(size=(2000, 128)) * np.exp(-np.arange(128) / 20.0)
for k in (8, 32):
    model = pca_fit(X, k)
    err = np.mean((X - pca_reconstruct(model, pca_project(model, X))) ** 2)
    print(f"pca k={k} mse {err:.5f}")
for m, k in ((2, 16), (8, 256)):
    cb = pq_fit(X, m, k, seed=0)
    err = np.mean((X - pq_decode(cb, pq_encode(cb, X))) ** 2)
    print(f"pq m={m} k={k} mse {err:.5f}")
print("signal power", np.mean(X ** 2).round(5))
