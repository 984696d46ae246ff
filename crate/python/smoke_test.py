"""Smoke test of the rgbt_crowd extension module.

Build and install first:
    pip install --no-build-isolation ./crates/python
"""

import math
import tempfile
from pathlib import Path

import rgbt_crowd as rc


def main():
    s = rc.Sample.synthesize(3, height=64, width=64, min_count=2, max_count=6)
    h, w = s.shape
    assert (h, w) == (64, 64) and 2 <= len(s) <= 6
    rgb, rgb_shape = s.rgb
    assert rgb_shape == [3, 64, 64] and len(rgb) == 3 * 64 * 64

    assert rc.game([0.0] * 16, (4, 4), [(0.5, 0.5)], 0) == 1.0
    assert abs(rc.rmse([0.0, 4.0], [3.0, 0.0]) - 3.5355) < 1e-3
    (aligned, a_shape), (alpha, alpha_shape) = rc.soft_match([0.1] * 2 * 25, [0.3] * 2 * 25, (2, 5, 5), 1)
    assert a_shape == [2, 5, 5] and alpha_shape == [9, 5, 5]
    for i in range(25):
        assert abs(sum(alpha[k * 25 + i] for k in range(9)) - 1.0) < 1e-9

    m = rc.Model(seed=0)
    density, d_shape = m.predict(s)
    assert d_shape == [1, 64, 64] and min(density) >= 0.0
    batch = [rc.Sample.synthesize(i, height=64, width=64, min_count=2, max_count=6) for i in range(2)]
    warm = m.pretrain_step(batch)
    cnt, total, disc = m.train_step(batch)
    assert all(math.isfinite(v) for v in (warm, cnt, total, disc))
    assert m.step == 2
    games, r = m.evaluate(batch)
    assert len(games) == 4 and r >= 0.0

    with tempfile.TemporaryDirectory() as tmp:
        path = Path(tmp) / "model.ckpt"
        m.save(str(path))
        back = rc.Model.load(str(path))
        assert back.predict(s) == m.predict(s)
        try:
            rc.Model(config="kn = 4")
        except ValueError:
            pass
        else:
            raise AssertionError("even kn accepted")
        try:
            rc.load_dataset(str(Path(tmp) / "missing"))
        except (OSError, rc.CrowdError):
            pass
        else:
            raise AssertionError("missing dataset accepted")

    print(f"ok: {m.num_parameters} parameters, count {m.count(s):.3f} for {len(s)} people")


if __name__ == "__main__":
    main()
