"""Smoke test for the kind_lce_py extension.

Build and run from the repository root:

    cargo build --release -p kind-lce-py --features extension-module
    cp target/release/libkind_lce_py.so python/kind_lce_py.so
    python3 python/smoke.py
"""

import math
import os
import sys
import tempfile

sys.path.insert(0, os.path.dirname(os.path.abspath(__file__)))

import kind_lce_py as k  # noqa: E402


def main():
    pairs = k.synthetic_pairs(4, 16, 0)
    low, normal = pairs[0]
    assert low.shape == (3, 16, 16), low.shape
    assert low.mean() < normal.mean()

    m = k.evaluate(normal, normal)
    assert math.isinf(m["psnr"]) and abs(m["ssim"] - 1.0) < 1e-9

    illum, refl = k.classical_decompose(low)
    assert illum.shape == (1, 16, 16) and refl.shape == (3, 16, 16)
    assert k.curve_value(0.5, 0.0) == 0.5

    with tempfile.TemporaryDirectory() as d:
        path = os.path.join(d, "low.ppm")
        low.save(path)
        back = k.Image.load(path)
        # PPM stores 8 bits per sample.
        assert max(abs(a - b) for a, b in zip(back.to_list(), low.to_list())) <= 0.5 / 255 + 1e-6

        decom, losses = k.train_stage("decom", pairs, steps=5, batch=2)
        assert len(losses) == 5 and decom.stage == "decom"
        restore, _ = k.train_stage("restore", pairs, steps=3, decom=decom)
        illum_ck, _ = k.train_stage("illum", pairs, steps=3, decom=decom)
        ck_path = os.path.join(d, "decom.klce")
        decom.save(ck_path)
        assert k.Checkpoint.load(ck_path).to_bytes() == decom.to_bytes()

        try:
            k.train_stage("illum", pairs, steps=1)
        except RuntimeError:
            pass
        else:
            raise AssertionError("illum without decom should fail")

        pipe = k.Pipeline(decom, restore, illum_ck, curve_mode="literal")
        out = pipe.enhance(low)
        assert out.shape == low.shape
        maps = pipe.enhance_maps(low)
        assert set(maps) == {"i_low", "r_low", "r_out", "i_out", "output"}

    out = k.Pipeline.random(1).enhance(low)
    assert all(0.0 <= v <= 1.0 for v in out.to_list())

    try:
        k.Image(2, 2, 3, [0.0])
    except ValueError:
        pass
    else:
        raise AssertionError("bad data length should fail")
    print("python smoke test: ok")


if __name__ == "__main__":
    main()
