# Render a small stereo sequence, then evaluate two detectors on it:
# an untrained network and a detector that knows where the scene landmarks project.
import tempfile
from pathlib import Path

import numpy as np

from imip.bench import EvalConfig, accuracy, evaluate_pairs, open_dataset, records_to_csv, write_synthetic_stereo_dataset
from imip.geometry import RigidPose, triangulate_rectified
from imip.network import NetworkConfig, init_weights
from imip.synthetic import LandmarkOracle

root = Path(tempfile.mkdtemp())
path = write_synthetic_stereo_dataset(root, n_frames=6, shape=(240, 320), seed=1, pairs=[(0, 2), (1, 3), (2, 5)])
ds = open_dataset(path)
print("dataset:", path, "frames:", ds.n_frames, "baseline:", ds.baseline)

net = init_weights(NetworkConfig(n_channels=32, depth=6, intermediate_channels=(16, 32), seed=0))
recs = evaluate_pairs(ds, net)
print("\nuntrained network")
print(records_to_csv(recs))

# landmarks placed at integer pixels with integer disparity in frame 0
rng = np.random.default_rng(0)
h, w = ds.image(0).shape
n = 64
xs, ys, disp = rng.integers(40, w - 40, n), rng.integers(30, h - 30, n), rng.integers(10, 40, n)
X = np.array([triangulate_rectified(float(x), float(x - d), float(y), ds.K, ds.baseline)
              for x, y, d in zip(xs, ys, disp)])
oracle = LandmarkOracle(ds.poses[0].apply(X), ds.K)
right = RigidPose(np.eye(3), [ds.baseline, 0, 0])
for i in range(ds.n_frames):
    oracle.register(ds.image(i, "left"), ds.poses[i])
    oracle.register(ds.image(i, "right"), ds.poses[i].compose(right))

recs = evaluate_pairs(ds, oracle, EvalConfig(confidence=1.0))
print("landmark oracle")
print(records_to_csv(recs))
for preset in ("kitti", "euroc"):
    print(f"accuracy ({preset}): {accuracy(recs, preset=preset):.2f}")
