import numpy as np
import pytest

from qckpt.container import read_checkpoint
from qckpt.trajectory import (
    TrajectorySpec,
    checkpoint_path,
    default_layout,
    generate,
    gradient_path,
    write_trajectory,
)

SMALL = default_layout(width=16, depth=1, vocab=32)


def test_default_layout_size():
    assert 1.0e5 <= TrajectorySpec().num_params <= 1.5e5


def test_deterministic():
    a = generate(TrajectorySpec(SMALL, steps=4, seed=3))
    b = generate(TrajectorySpec(SMALL, steps=4, seed=3))
    assert all(x[0] == y[0] and x[1] == y[1] for x, y in zip(a, b))
    c = generate(TrajectorySpec(SMALL, steps=4, seed=4))
    assert a[0][0] != c[0][0]


def test_steps_numbered_from_one():
    out = generate(TrajectorySpec(SMALL, steps=3))
    assert [ck.step for ck, _ in out] == [1, 2, 3] == [g.step for _, g in out]


def test_noise_free_closed_form():
    lr0 = 0.1
    out = generate(TrajectorySpec(SMALL, steps=6, lr0=lr0, decay=1.0, noise=0.0))
    w1 = out[0][0]
    for t, (ck, g) in enumerate(out):
        for name, _ in SMALL:
            expected = w1[name].data.astype(np.float64) * (1 - lr0) ** t
            assert np.allclose(ck[name].data, expected, rtol=1e-5, atol=1e-7)
            assert np.allclose(g[name].data, ck[name].data, rtol=1e-5, atol=1e-7)


def test_updates_shrink():
    out = generate(TrajectorySpec(steps=30, seed=1))
    vec = [np.concatenate([t.data for t in ck]).astype(np.float64) for ck, _ in out]
    dist = [np.linalg.norm(b - a) for a, b in zip(vec, vec[1:])]
    assert all(d2 < d1 for d1, d2 in zip(dist[4:], dist[5:]))


@pytest.mark.parametrize("kw", [dict(steps=1), dict(decay=0.0), dict(decay=1.5), dict(lr0=0.0), dict(noise=-1.0),
                                dict(layout=()), dict(layout=(("a", (2,)), ("a", (3,))))])
def test_validation(kw):
    with pytest.raises(ValueError):
        TrajectorySpec(**kw)


def test_written_files(tmp_path):
    spec = TrajectorySpec(SMALL, steps=3, seed=2)
    paths = write_trajectory(spec, tmp_path / "traj")
    assert paths == [checkpoint_path(tmp_path / "traj", s) for s in (1, 2, 3)]
    for (ck, g), p in zip(generate(spec), paths):
        assert read_checkpoint(p) == ck
        assert read_checkpoint(gradient_path(tmp_path / "traj", ck.step)) == g
