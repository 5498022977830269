# Turn a KITTI odometry sequence into a dataset file the evaluator reads.
#
#   python3 convert_kitti.py /data/kitti 05 out/
#
# Expects <root>/sequences/<seq>/{image_0,image_1,calib.txt} and <root>/poses/<seq>.txt
# (12 numbers per line: the 3x4 world-from-camera matrix of the left camera).
# Writes out/poses.txt, out/calib.txt and out/dataset.toml; images stay where they are.
# EuRoC works the same way once its poses are in world-from-left-camera form and the pair is rectified.
import sys
from pathlib import Path

import numpy as np
from PIL import Image

from imip.correspondence import save_poses
from imip.geometry import CameraIntrinsics, RigidPose, save_calibration


def convert(root, seq, out):
    root, out = Path(root), Path(out)
    out.mkdir(parents=True, exist_ok=True)
    sdir = root / "sequences" / seq
    P = {}
    for line in (sdir / "calib.txt").read_text().splitlines():
        key, _, vals = line.partition(":")
        if vals.strip():
            P[key.strip()] = np.array(vals.split(), dtype=float).reshape(3, 4)
    P0, P1 = P["P0"], P["P1"]
    left = sorted((sdir / "image_0").glob("*.png"))
    w, h = Image.open(left[0]).size
    K = CameraIntrinsics(P0[0, 0], P0[1, 1], P0[0, 2], P0[1, 2], w, h)
    baseline = (P0[0, 3] - P1[0, 3]) / P0[0, 0]
    save_calibration(out / "calib.txt", K, baseline)

    rows = np.loadtxt(root / "poses" / f"{seq}.txt").reshape(-1, 3, 4)
    save_poses(out / "poses.txt", {i: RigidPose(m[:, :3], m[:, 3]) for i, m in enumerate(rows)})

    (out / "dataset.toml").write_text(
        f'kind = "sequence_stereo"\nname = "kitti{seq}"\n'
        f'left = "{(sdir / "image_0").resolve()}/*.png"\n'
        f'right = "{(sdir / "image_1").resolve()}/*.png"\n'
        'poses = "poses.txt"\ncalibration = "calib.txt"\n')
    print(f"{len(left)} frames, baseline {baseline:.4f} m -> {out / 'dataset.toml'}")


if __name__ == "__main__":
    if len(sys.argv) != 4:
        sys.exit("usage: convert_kitti.py KITTI_ROOT SEQUENCE OUT_DIR")
    convert(*sys.argv[1:])
