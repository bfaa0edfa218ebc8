"""Smoke test for the cooctex extension module.

Build and run:

    cargo build --release -p cooctex-py --features extension-module
    cp target/release/libcooctex_py.so python/cooctex.so
    python3 python/smoke_test.py
"""

import os
import sys
import tempfile

sys.path.insert(0, os.path.dirname(os.path.abspath(__file__)))

import cooctex


def close(a, b, tol=1e-9):
    return abs(a - b) <= tol


def main():
    m = cooctex.CoocMatrix([[0.5, 0.2], [0.2, 0.1]])
    e = m.edit(0, 0, 2.0).values()
    assert close(e[0][0], 1.0 / 1.5) and close(e[0][1], 0.2 / 1.5), e
    assert close(sum(map(sum, e)), 1.0)

    image = cooctex.procedural("graded", 64, 64, 1)
    ckpt = cooctex.Checkpoint.untrained(image, 3)
    assert ckpt.k == 2 and ckpt.scale == 32

    t = ckpt.measure(image)
    assert t.shape == (2, 2, 2), t.shape
    row_sums = [sum(map(sum, t.matrix_at(y, x).values())) for y in range(2) for x in range(2)]
    assert all(close(s, 1.0, 1e-6) for s in row_sums), row_sums

    edited = t.edit(1, 1, 3.0, region=(0, 0, 1, 1))
    assert edited.matrix_at(0, 0).values()[1][1] > t.matrix_at(0, 0).values()[1][1]
    mid = t.interpolate(edited, 0.5)
    assert mid.l1_distance(t) > 0.0

    out = ckpt.synthesize(t, 7)
    assert len(out) == 64 and len(out[0]) == 64 and len(out[0][0]) == 3
    png = ckpt.synthesize_png(t, 7)
    assert png[:8] == b"\x89PNG\r\n\x1a\n"
    assert png == ckpt.synthesize_png(t, 7)

    with tempfile.TemporaryDirectory() as d:
        path = os.path.join(d, "t.bin")
        t.save(path)
        assert cooctex.CoocTensor.load(path).l1_distance(t) == 0.0
        ckpt.save(os.path.join(d, "m.ckpt"))
        again = cooctex.Checkpoint.load(os.path.join(d, "m.ckpt"))
        assert again.synthesize_png(t, 7) == png

    try:
        m.edit(0, 5, 1.0)
    except ValueError:
        pass
    else:
        raise AssertionError("out-of-range bin accepted")

    print("ok")


if __name__ == "__main__":
    main()
