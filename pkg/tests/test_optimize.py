import math

import numpy as np
import pytest

from distill_lab.distillation import ESTIMATORS, Estimator, GradientTerms
from distill_lab.optimize import (TRACE_COLUMNS, AdamState, DivergenceError, Problem, RunTrace, adam_update,
                                  cosine_trace, distill, grad_variance, initial_params, mode_excess, record_step,
                                  restore_experiment)
from distill_lab.prior import OracleModel, single_gaussian, two_condition_2d
from distill_lab.renderer import make_poses, prior_from_scene, scene_library


def _problem(name, prior, sched, cond="y", **kw):
    m = OracleModel(prior, sched)
    return Problem(Estimator(name, **kw), [m], [prior], cond)


# -- Adam ---------------------------------------------------------------------------

def test_adam_zero_gradient_keeps_params():
    st = AdamState.zeros(3)
    p = np.array([1.0, -2.0, 0.5])
    for _ in range(50):
        st, p2 = adam_update(st, np.zeros(3), p)
        assert np.array_equal(p2, p)


def test_adam_first_step_magnitude_is_lr():
    st = AdamState.zeros(3, lr=0.01)
    g = np.array([3.0, -1e-3, 250.0])
    _, p = adam_update(st, g, np.zeros(3))
    np.testing.assert_allclose(p, -0.01 * np.sign(g), rtol=1e-5)


def test_adam_quadratic_converges():
    st = AdamState.zeros(1, lr=0.05)
    p = np.array([3.0])
    for _ in range(500):
        st, p = adam_update(st, 2 * (p - 1.25), p)
    assert abs(p[0] - 1.25) <= 1e-3


@pytest.mark.parametrize("wd", [0.0, 0.1])
def test_adam_matches_torch(rng, wd):
    torch = pytest.importorskip("torch")
    p0 = rng.standard_normal(5)
    grads = rng.standard_normal((40, 5))
    tp = torch.tensor(p0, dtype=torch.float64, requires_grad=True)
    opt = torch.optim.AdamW([tp], lr=0.01, betas=(0.9, 0.999), eps=1e-8, weight_decay=wd)
    st = AdamState.zeros(5, weight_decay=wd)
    p = p0.copy()
    for g in grads:
        opt.zero_grad()
        tp.grad = torch.tensor(g, dtype=torch.float64)
        opt.step()
        st, p = adam_update(st, g, p)
    np.testing.assert_allclose(p, tp.detach().numpy(), rtol=1e-12, atol=1e-14)
    assert st.step == 40


def test_adam_shape_mismatch():
    with pytest.raises(ValueError):
        adam_update(AdamState.zeros(2), np.zeros(3), np.zeros(3))


# -- metrics ------------------------------------------------------------------------

def test_mode_excess_examples(two_cond):
    mu = np.array([2.0, 0.0])
    assert mode_excess(mu, "y1", two_cond) == 0.0
    u = np.array([0.6, 0.8])
    assert mode_excess(mu + 3 * 0.25 * u, "y1", two_cond) == pytest.approx(3.0, rel=1e-12)
    delta = single_gaussian((1.0, -0.5), 0.0)
    assert mode_excess(np.array([4.0, 3.5]), "y", delta) == pytest.approx(5.0, rel=1e-15)


def test_grad_variance_zero_for_isd_on_delta(sched, delta_prior, rng):
    pb = _problem("isd", delta_prior, sched, inv_mode="ddim-hop")
    var, tr = grad_variance(pb, np.array([3.0, 1.0]), 500, rng)
    assert tr == 0.0 and np.all(var == 0.0)
    # renoise is still exactly zero at the mode
    pb = _problem("isd", delta_prior, sched)
    var, tr = grad_variance(pb, np.array([1.0, -0.5]), 200, rng, t=600)
    assert tr == 0.0


def test_grad_variance_two_samples_formula(sched, mixture):
    pb = _problem("sds", mixture, sched)
    theta = np.array([0.4, 0.9])
    var, tr = grad_variance(pb, theta, 2, np.random.default_rng(3), t=600)
    # replay the same draws by hand
    r = np.random.default_rng(3)
    eps = r.standard_normal((2, 2))
    a = pb.estimator(theta, "y", 600, eps[0], pb.models[0]).total
    b = pb.estimator(theta, "y", 600, eps[1], pb.models[0]).total
    np.testing.assert_allclose(var, (a - b) ** 2 / 2, rtol=1e-12, atol=0)
    assert tr == pytest.approx(var.sum(), rel=1e-15)
    with pytest.raises(ValueError):
        grad_variance(pb, theta, 1, r)


def test_grad_variance_resampled_t_path(sched, mixture, rng):
    pb = _problem("sds", mixture, sched)
    var, tr = grad_variance(pb, np.array([0.4, 0.9]), 50, rng)
    assert var.shape == (2,) and tr > 0


# -- restore ------------------------------------------------------------------------

def test_restore_zero_perturb_stays_put(sched, delta_prior, rng):
    pb = _problem("isd", delta_prior, sched)
    d = restore_experiment(pb, np.array([1.0, -0.5]), 0.0, 600, 50, rng)
    assert np.all(d == 0.0) and d.shape == (51,)


def test_restore_start_distance_is_exact(sched, delta_prior, rng):
    pb = _problem("isd", delta_prior, sched)
    d = restore_experiment(pb, np.array([1.0, -0.5]), 0.5, 600, 5, rng)
    assert d[0] == pytest.approx(0.5, rel=1e-14)


# -- cosine trace -------------------------------------------------------------------

def test_cosine_single_active_term(sched, mixture, rng):
    pb = _problem("recon-only", mixture, sched)
    tr = distill(pb, np.array([0.5, 0.5]), 30, rng)
    cos = cosine_trace(tr)
    assert all(c == pytest.approx(1.0, abs=1e-12) for c in cos["recon"])
    assert all(c is None for c in cos["cls"]) and all(c is None for c in cos["inv"])


def test_cosine_orthogonal_synthetic_terms(two_cond):
    terms = GradientTerms(recon=np.array([1.0, 0.0]), cls=np.array([0.0, 0.0]), inv=np.array([0.0, 0.0]),
                          total=np.array([0.0, 2.0]), weights={"wt": 1.0, "lam": 0.0, "w": 0.0}, t=10,
                          absent=frozenset({"inv"}))
    rec = record_step(0, terms, None, np.zeros(2), "y1", two_cond)
    assert rec.cosines["recon"] == 0.0
    assert rec.cosines["cls"] is None and rec.cosines["inv"] is None
    assert cosine_trace(RunTrace([rec], np.zeros(2)))["recon"] == [0.0]
    with pytest.raises(ValueError):
        cosine_trace(RunTrace([], np.zeros(2)))


# -- distillation loop --------------------------------------------------------------

@pytest.mark.parametrize("name", ["sds", "recon-only", "cfg-only", "isd"])
def test_stationary_at_delta_mode(sched, delta_prior, name):
    pb = _problem(name, delta_prior, sched)
    mu = np.array([1.0, -0.5])
    tr = distill(pb, mu, 100, np.random.default_rng(5))
    assert np.max(np.abs(tr.params - mu)) <= 1e-12
    assert all(r.norms["total"] == 0.0 for r in tr.records)


def test_stationary_isd_ddim_hop_and_nfsd_high_t(sched, delta_prior):
    from distill_lab.schedule import TimestepPolicy
    mu = np.array([1.0, -0.5])
    tr = distill(_problem("isd", delta_prior, sched, inv_mode="ddim-hop"), mu, 100, np.random.default_rng(5))
    assert np.array_equal(tr.params, mu)
    # nfsd is only stationary where its negative-prompt branch applies (t above 0.2 T)
    pol = TimestepPolicy(0.25, 0.95, 1.0, 0.25, 0.95)
    tr = distill(_problem("nfsd", delta_prior, sched), mu, 100, np.random.default_rng(5), policy=pol)
    assert np.max(np.abs(tr.params - mu)) <= 1e-12


def test_projection_stationary_at_scene(sched):
    poses = make_poses()
    star = scene_library("disk").ravel()
    priors = prior_from_scene({"y": star}, poses, 0.0)
    models = [OracleModel(p, sched) for p in priors]
    pb = Problem(Estimator("isd"), models, priors, "y", poses, star)
    tr = distill(pb, star, 100, np.random.default_rng(0))
    assert np.max(np.abs(tr.params - star)) <= 1e-12


def test_distill_determinism(sched, two_cond):
    def go():
        pb = _problem("isd", two_cond, sched, cond="y1")
        return distill(pb, np.zeros(2), 200, np.random.default_rng(11))
    a, b = go(), go()
    assert a.to_csv() == b.to_csv() and a.params_csv() == b.params_csv()
    assert a.to_csv().splitlines()[0] == ",".join(TRACE_COLUMNS)


def test_trace_invariants(sched, two_cond, rng):
    tr = distill(_problem("sds", two_cond, sched, cond="y1"), np.zeros(2), 200, rng)
    for r in tr.records:
        assert all(v >= 0 for v in r.norms.values())
        assert all(c is None or -1 <= c <= 1 for c in r.cosines.values())


@pytest.mark.xfail(strict=True, reason="guidance term carries theta past the mode; see the decisions ledger")
def test_isd_default_run_reaches_mode(sched, two_cond):
    pb = _problem("isd", two_cond, sched, cond="y1")
    tr = distill(pb, np.zeros(2), 2000, np.random.default_rng(0))
    assert mode_excess(tr.params, "y1", two_cond) <= 0.1


def test_snapshots(sched, two_cond, rng):
    tr = distill(_problem("sds", two_cond, sched, cond="y1"), np.zeros(2), 50, rng, snapshot_every=20)
    assert sorted(tr.snapshots) == [20, 40]
    assert [r.step for r in tr.records if r.snapshot] == [19, 39]


def test_divergence_raises(sched, two_cond, rng):
    pb = _problem("sds", two_cond, sched, cond="y1")
    with pytest.raises(DivergenceError) as info:
        distill(pb, np.zeros(2), 10, rng, lr=math.inf)
    assert info.value.step == 0


def test_initial_params(two_cond, rng):
    assert np.array_equal(initial_params("zeros", 3, rng), np.zeros(3))
    assert initial_params("noise", 4, rng, scale=2.0).shape == (4,)
    x = initial_params("prior-sample", 2, rng, prior=two_cond, cond="y1")
    assert x[0] > 0
    np.testing.assert_array_equal(initial_params("given", 2, rng, given=[1, 2]), [1.0, 2.0])
    with pytest.raises(ValueError):
        initial_params("given", 3, rng, given=[1, 2])
    with pytest.raises(ValueError):
        initial_params("sideways", 2, rng)
    with pytest.raises(ValueError):
        initial_params("prior-sample", 2, rng)


def test_every_estimator_runs_in_loop(sched, two_cond, rng):
    for name in ESTIMATORS:
        tr = distill(_problem(name, two_cond, sched, cond="y1"), np.zeros(2), 20, rng)
        assert np.all(np.isfinite(tr.params))
