"""Smoke test for the zslkit extension: one synth/train/eval round trip plus
the numerical entry points. Build first with `maturin develop -m crates/py/Cargo.toml`."""

import pathlib
import tempfile

import numpy as np
import zslkit

CONFIG = """seed = 3
[data]
m_seen = 10
v_unseen = 4
d = 24
n = 8
examples_per_class = 12
[rectify]
k_neighbors = 4
"""


def check_sylvester():
    rng = np.random.default_rng(0)
    l = rng.uniform(-1, 1, (4, 4)) + 3 * np.eye(4)
    r = rng.uniform(-1, 1, (3, 3)) + 3 * np.eye(3)
    m = rng.uniform(-1, 1, (4, 3))
    w = np.array(zslkit.solve_sylvester(l.tolist(), r.tolist(), m.tolist()))
    residual = np.abs(l @ w + w @ r + m).max()
    assert residual < 1e-10, residual


def check_pipeline():
    with tempfile.TemporaryDirectory() as tmp:
        tmp = pathlib.Path(tmp)
        cfg = tmp / "run.ini"
        cfg.write_text(CONFIG)
        print("\n".join(zslkit.synth(str(cfg), str(tmp / "data"))))
        print("\n".join(zslkit.train("rectify", str(tmp / "data"), str(cfg), str(tmp / "model"))))
        lines = zslkit.evaluate(str(tmp / "model"), str(tmp / "data"), "czsl", [1, 2])
        print("\n".join(lines))
        assert any("hit@1" in line for line in lines)
        try:
            zslkit.evaluate(str(tmp / "missing"), str(tmp / "data"))
        except OSError:
            pass
        else:
            raise AssertionError("missing model directory should raise OSError")


if __name__ == "__main__":
    check_sylvester()
    assert f"{zslkit.harmonic_mean(42.8, 69.7):.1f}" == "53.0"
    check_pipeline()
    print("smoke test ok")
