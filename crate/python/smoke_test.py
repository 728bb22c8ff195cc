"""Smoke test for the autocontext_py extension module.

Build and install it first:

    pip install maturin
    maturin develop --release -m crates/python/Cargo.toml

then run ``python python/smoke_test.py``.
"""

import os
import sys
import tempfile

import autocontext_py as ac


def main():
    assert ac.parameter_count(1, 22, 12) == 2_661_166

    assert ac.heatmap_value(0.0, 1.0, 1000.0) == 1000.0
    assert abs(ac.heatmap_value(1.0) - 1000.0 * 2.718281828459045 ** -0.5) < 1e-9

    src = [[0, 0, 0], [1, 0, 0], [0, 1, 0], [0, 0, 1], [1, 2, 3]]
    dst = [[2 * x + 5, y, z] for x, y, z in src]
    rows = ac.fit_affine(src, dst)
    assert abs(rows[0][0] - 2.0) < 1e-9 and abs(rows[0][3] - 5.0) < 1e-9

    dims, spacing, origin, voxels, landmarks = ac.generate_phantom(seed=3, index=0)
    assert len(voxels) == dims[0] * dims[1] * dims[2]
    assert len(landmarks) == 10

    with tempfile.TemporaryDirectory() as tmp:
        manifest = ac.generate_dataset(os.path.join(tmp, "data"), 2, 1, 1, seed=1)
        lmk = [
            os.path.join(tmp, "data", f)
            for f in sorted(os.listdir(os.path.join(tmp, "data")))
            if f.endswith(".lmk")
        ]
        metrics = ac.evaluate(lmk, lmk)
        assert metrics["mean"] == 0.0 and metrics["failures"] == 0.0
        assert ac.read_landmarks(lmk[0])[0][3] == "visible"

        code = ac.main(["sweep", "--manifest", manifest, "--out", os.path.join(tmp, "sweep")])
        assert code == 0
        assert ac.main(["no-such-command"]) == 2

    try:
        ac.read_landmarks("/nonexistent/file.lmk")
    except OSError:
        pass
    else:
        raise AssertionError("missing file should raise OSError")

    print("smoke test passed")
    return 0


if __name__ == "__main__":
    sys.exit(main())
