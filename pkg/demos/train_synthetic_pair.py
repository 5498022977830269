# Overfit a small detector on one synthetic pair and watch the channels settle on distinct, repeatable points.
import time
import numpy as np

from imip.network import NetworkConfig, init_weights, save_params
from imip.synthetic import homography_pair
from imip.training import TrainConfig, new_adam_state, train_step

a, b, psi = homography_pair((64, 64), seed=1, texture="blobs", angle_deg=15.0, shift=(6.0, -4.0))
a, b = a.astype(np.float32), b.astype(np.float32)

params = init_weights(NetworkConfig(n_channels=8, depth=6, intermediate_channels=(16, 32), seed=0))
print("receptive field:", params.receptive_field)

cfg = TrainConfig(iterations=400, lr=1e-3)
state = new_adam_state(params, cfg)
t0 = time.time()
for step in range(cfg.iterations):
    params, state, rep, lab = train_step(a, b, psi, params, state, cfg)
    if step % 50 == 0 or step == cfg.iterations - 1:
        distinct = len({tuple(p) for p in lab.matches.a.xy})
        print(f"step {step:4d}  L_inl {rep.L_inl:7.3f}  L_red {rep.L_red:7.3f}  L_cor {rep.L_cor:6.3f}  "
              f"inliers {lab.n_inliers}/8  distinct {distinct}/8  ({time.time() - t0:.1f}s)")

print("points in a:", lab.matches.a.xy.tolist())
print("points in b:", lab.matches.b.xy.tolist())
save_params(params, "demo_params.imip")
print("saved demo_params.imip")
