import numpy as np
import pytest

from distill_lab.experiments import heldout_mse
from distill_lab.mlp import (denoiser_bytes, denoiser_from_bytes, init_denoiser, load_denoiser, oracle_eps_mse,
                             save_denoiser, train_denoiser)
from distill_lab.prior import OracleModel, single_gaussian, two_condition_2d
from distill_lab.schedule import build_schedule


def test_init_deterministic(sched):
    a = init_denoiser(np.random.default_rng(4), 2, sched, ("y1", "y2"))
    b = init_denoiser(np.random.default_rng(4), 2, sched, ("y1", "y2"))
    assert np.array_equal(a.params, b.params)


def test_zero_width_rejected(sched):
    with pytest.raises(ValueError):
        init_denoiser(np.random.default_rng(0), 2, sched, ("y",), widths=(64, 0))
    with pytest.raises(ValueError):
        init_denoiser(np.random.default_rng(0), 2, sched, ("y",), widths=())


def test_parameter_count_by_hand(sched):
    m = init_denoiser(np.random.default_rng(0), 2, sched, ("y1", "y2"))
    d_in = 2 + 16 + 2
    assert m.n_params == (d_in * 64 + 64) + (64 * 64 + 64) + (64 * 2 + 2) == 5634


def test_forward_deterministic_and_shape(sched, rng):
    m = init_denoiser(np.random.default_rng(0), 3, sched, ("a",))
    z = rng.standard_normal((5, 3))
    out1, out2 = m.eps(z, 400, "a"), m.eps(z, 400, "a")
    assert np.array_equal(out1, out2) and out1.shape == (5, 3)
    assert m.eps(z[0], 400).shape == (3,)
    with pytest.raises(KeyError):
        m.eps(z, 400, "b")


def test_backward_matches_finite_differences(sched, rng):
    m = init_denoiser(np.random.default_rng(1), 2, sched, ("y1", "y2"), widths=(6, 5))
    m.params = m.params + 0.3 * rng.standard_normal(m.n_params)  # wake up the condition rows
    X = m.features(rng.standard_normal((7, 2)), rng.integers(1, 1001, size=7), np.array([0, 1, -1, 0, 1, -1, 0]))
    target = rng.standard_normal((7, 2))
    _, g = m.loss_and_grad(X, target)
    h = 1e-6
    fd = np.empty_like(g)
    for i in range(m.n_params):
        p = m.params.copy()
        p[i] += h
        lp, _ = m.loss_and_grad(X, target, p)
        p[i] -= 2 * h
        lm, _ = m.loss_and_grad(X, target, p)
        fd[i] = (lp - lm) / (2 * h)
    for lo, hi in _layer_slices(m):
        assert np.linalg.norm(g[lo:hi] - fd[lo:hi]) <= 1e-4 * np.linalg.norm(fd[lo:hi])


def _layer_slices(m):
    pos = 0
    for a, b in m.layer_shapes():
        yield pos, pos + a * b + b
        pos += a * b + b


def test_zero_steps_leaves_params(sched, two_cond):
    m = init_denoiser(np.random.default_rng(0), 2, sched, ("y1", "y2"))
    before = m.params.copy()
    m, losses = train_denoiser(m, two_cond, np.random.default_rng(0), steps=0)
    assert np.array_equal(m.params, before) and losses.size == 0


def test_missing_condition_rejected(sched, two_cond):
    m = init_denoiser(np.random.default_rng(0), 2, sched, ("y1",))
    with pytest.raises(ValueError):
        train_denoiser(m, two_cond, np.random.default_rng(0), steps=1)


def test_p_uncond_one_paths_coincide(sched, two_cond):
    m = init_denoiser(np.random.default_rng(0), 2, sched, ("y1", "y2"), widths=(16,), p_uncond=1.0)
    m, _ = train_denoiser(m, two_cond, np.random.default_rng(0), steps=200, batch=32)
    z = np.random.default_rng(9).standard_normal((20, 2))
    for t in (10, 500, 990):
        assert np.array_equal(m.eps(z, t, "y1"), m.eps(z, t, None))
        assert np.array_equal(m.eps(z, t, "y2"), m.eps(z, t, None))


def test_save_load_roundtrip(tmp_path, sched, rng):
    m = init_denoiser(np.random.default_rng(0), 2, sched, ("y1", "y2"), widths=(8, 4))
    path = tmp_path / "m.mlpd"
    save_denoiser(m, path)
    back = load_denoiser(path, sched)
    assert np.array_equal(back.params, m.params) and back.labels == m.labels and back.widths == m.widths
    z = rng.standard_normal((4, 2))
    assert np.array_equal(back.eps(z, 77, "y2"), m.eps(z, 77, "y2"))
    assert denoiser_bytes(back) == path.read_bytes()


def test_corrupt_files_rejected(sched):
    m = init_denoiser(np.random.default_rng(0), 2, sched, ("y",), widths=(4,))
    data = denoiser_bytes(m)
    for bad in (data[:-3], data[:10], b"XXXX" + data[4:], data + b"\0" * 8):
        with pytest.raises(ValueError):
            denoiser_from_bytes(bad, sched)
    with pytest.raises(ValueError):
        denoiser_from_bytes(data, build_schedule("ddpm-linear", 500))


# -- trained model ------------------------------------------------------------------

PRIOR = single_gaussian((1.0, -0.5), 0.5)


@pytest.fixture(scope="module")
def trained():
    sched = build_schedule()
    m = init_denoiser(np.random.default_rng(0), 2, sched, ("y",))
    return train_denoiser(m, PRIOR, np.random.default_rng(1), steps=20_000)


def test_trained_heldout_mse_near_oracle(trained):
    model, _ = trained
    mse, oracle_mc = heldout_mse(model, PRIOR, np.random.default_rng(2), 4000)
    exact = oracle_eps_mse(PRIOR, model.sched)
    assert abs(oracle_mc - exact) <= 0.02  # Monte-Carlo baseline agrees with the closed form
    assert abs(mse - exact) <= 0.05


def test_trained_cosine_to_oracle(trained):
    model, _ = trained
    oracle = OracleModel(PRIOR, model.sched)
    r = np.random.default_rng(3)
    cos = []
    for _ in range(1000):
        t = int(r.integers(1, 1001))
        z = r.standard_normal(2) * 1.5
        a, b = model.eps(z, t, "y"), oracle.eps(z, t, "y")
        cos.append(a @ b / (np.linalg.norm(a) * np.linalg.norm(b)))
    assert np.mean(cos) >= 0.9


def test_trained_loss_trend(trained):
    _, losses = trained
    smooth = np.convolve(losses, np.ones(50) / 50, mode="valid")
    # after warmup, checkpoint means of the 50-step average never rise by more than 0.01
    blocks = smooth[1000:][: (len(smooth) - 1000) // 2000 * 2000].reshape(-1, 2000).mean(axis=1)
    assert np.all(np.diff(blocks) <= 0.01)
    assert smooth[-1] < smooth[0]
