"""Smoke test for the kpgen Python module.

Build the extension first:

    PYO3_BUILD_EXTENSION_MODULE=1 cargo build --release -p kpgen-py

then run `python3 python/smoke_test.py`. The script copies
target/release/libkpgen.so (or the path in KPGEN_LIB) to a temporary
directory as kpgen.so and imports it from there.
"""

import importlib
import math
import os
import shutil
import sys
import tempfile

ROOT = os.path.dirname(os.path.dirname(os.path.abspath(__file__)))


def load_module():
    lib = os.environ.get("KPGEN_LIB")
    if lib is None:
        for profile in ("release", "debug"):
            cand = os.path.join(ROOT, "target", profile, "libkpgen.so")
            if os.path.exists(cand):
                lib = cand
                break
    if lib is None:
        sys.exit("libkpgen.so not found; build with: cargo build --release -p kpgen-py")
    tmp = tempfile.mkdtemp()
    shutil.copy(lib, os.path.join(tmp, "kpgen.so"))
    sys.path.insert(0, tmp)
    return importlib.import_module("kpgen"), tmp


def main():
    kp, tmp = load_module()

    rect = kp.generate("rectangle", n_points=128, jitter=0.0, seed=1)
    assert len(rect) == 128
    assert len(rect.gt_keypoints) == 4
    assert kp.chamfer_distance([[0, 0, 0]], [[1, 0, 0]]) == 2.0
    assert kp.nms([[0, 0, 0], [0.05, 0, 0]], [0.9, 0.8], 0.1, 0.0) == [0]

    box = kp.generate("box", n_points=256, seed=2)
    assert len(box.symmetric_pairs(0.05)) > 0
    d = kp.geodesic_distances(box, 0)
    assert d[0] == 0.0 and all(math.isfinite(v) for v in d)

    s = kp.sample_beta(100_000, seed=3)
    mean = sum(s) / len(s)
    assert abs(mean - 1 / 6) < 0.01, mean

    cfg = kp.Config("tiny")
    cfg.set("epochs", "1")
    try:
        cfg.set("no_such_key", "1")
        raise AssertionError("unknown key accepted")
    except ValueError:
        pass
    clouds = [kp.generate("rectangle", n_points=64, seed=i) for i in range(4)]
    model = kp.Model.train(clouds, cfg)
    assert len(model.history) == 1
    phi = model.saliency(clouds[0])
    assert len(phi) == 64 and all(0.0 <= p <= 1.0 for p in phi)
    idx, scores = model.detect(clouds[0], threshold=0.0, top_k=4)
    assert len(idx) == 4 and scores == sorted(scores, reverse=True)
    rep = model.repeatability(clouds[0], k=4, rotations=2)
    assert 0.0 <= rep <= 100.0

    path = os.path.join(tmp, "model.ukpf")
    model.save(path)
    again = kp.Model.load(path)
    assert again.saliency(clouds[0]) == phi

    assert kp.keypoint_miou(rect.gt_keypoints, rect.gt_keypoints, rect) == 1.0
    print("kpgen python smoke test passed")


if __name__ == "__main__":
    main()
