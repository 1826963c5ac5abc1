import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from bdlab import detectors as D
from bdlab import nn
from bdlab.task import BackdoorSpec

from instances import random_instances


def small_model(seed, hidden=(5,), head="softmax", n_in=2, n_out=3):
    return nn.init_mlp((n_in,) + hidden + (n_out,), seed, head=head)


# ---------------------------------------------------------------------------
# output difference


def test_output_diff_of_model_against_itself_is_zero():
    m = small_model(1)
    x = np.random.default_rng(0).random((60, 2))
    res = D.detect_output_diff(m, m, x, D.SearchConfig(restarts=10, steps=20))
    assert abs(res.score) <= 0.05
    assert not res.diverged


def test_output_diff_never_exceeds_one():
    rng = np.random.default_rng(3)
    x = rng.random((40, 2))
    for s in range(5):
        res = D.detect_output_diff(nn.init_mlp((2, 6, 3), s, scale=6.0), [small_model(100 + s)], x,
                                   D.SearchConfig(restarts=3, steps=15))
        assert res.score <= 1.0
        assert np.linalg.norm(res.shift) <= 0.1 + 1e-12


def test_output_diff_finds_planted_shift_response():
    # candidate raises label 1 above x0 > 0.55; reference never does
    cand = nn.MLP((np.array([[0.0, 60.0], [0.0, 0.0]]), np.array([0.0, -33.0])))
    ref = nn.MLP((np.zeros((2, 2)), np.array([5.0, 0.0])))
    x = np.column_stack([np.linspace(0.46, 0.5, 30), np.full(30, 0.5)])
    res = D.detect_output_diff(cand, ref, x, D.SearchConfig(delta=0.1, restarts=3, steps=40))
    assert res.target == 1
    # full shift along x0: mean of sigmoid(60 x0 - 33) over x0 in [0.56, 0.6], less e^-5 / (1 + e^-5)
    grid = np.linspace(0.56, 0.6, 30)
    expect = np.mean(1 / (1 + np.exp(-(60 * grid - 33)))) - np.exp(-5) / (1 + np.exp(-5))
    assert res.score == pytest.approx(expect, abs=1e-3)
    assert np.allclose(res.shift, [0.1, 0.0], atol=1e-3)


def test_output_diff_is_deterministic():
    x = np.random.default_rng(1).random((30, 2))
    a = D.detect_output_diff(small_model(1), [small_model(2), small_model(3)], x, D.SearchConfig(restarts=4, steps=10, seed=7))
    b = D.detect_output_diff(small_model(1), [small_model(2), small_model(3)], x, D.SearchConfig(restarts=4, steps=10, seed=7))
    assert a.score == b.score and np.array_equal(a.shift, b.shift)


def test_output_diff_flags_nonfinite_search():
    bad = small_model(1)
    bad = bad.with_params([p if i else np.full_like(p, np.nan) for i, p in enumerate(bad.params)])
    x = np.random.default_rng(1).random((10, 2))
    res = D.detect_output_diff(small_model(2), [bad], x, D.SearchConfig(restarts=2, steps=5))
    assert res.diverged


# ---------------------------------------------------------------------------
# weight distance


def permuted_and_flipped(model, rng):
    p = [np.array(a) for a in model.params]
    for k in range(len(p) // 2 - 1):
        h = p[2 * k].shape[1]
        perm = rng.permutation(h)
        sign = rng.choice([-1.0, 1.0], size=h)
        p[2 * k] = p[2 * k][:, perm] * sign
        p[2 * k + 1] = p[2 * k + 1][perm] * sign
        p[2 * k + 2] = p[2 * k + 2][perm, :] * sign[:, None]
    return model.with_params(p)


def test_canonical_form_removes_symmetries():
    rng = np.random.default_rng(0)
    x = rng.random((20, 2))
    for s in range(10):
        m = nn.init_mlp((2, 6, 5, 3), s)
        twin = permuted_and_flipped(m, rng)
        assert np.allclose(nn.forward(m, x), nn.forward(twin, x))
        assert D.weight_distance(m, twin) <= 1e-10


def test_member_of_population_is_not_flagged():
    pop = [small_model(s) for s in range(8)]
    cal = D.calibrate_weight_distance(pop)
    res = D.detect_weight_distance(pop[3], pop, cal)
    assert res.score == 0.0 and not res.flagged


def test_noisy_clone_beyond_calibration_radius_is_flagged():
    pop = [small_model(s) for s in range(8)]
    cal = D.calibrate_weight_distance(pop)
    rng = np.random.default_rng(5)
    base = D.canonicalize(pop[0])
    noise = rng.standard_normal(base.n_params)
    clone = base.from_flat(base.flat() + noise / np.linalg.norm(noise) * 2 * cal.threshold)
    res = D.detect_weight_distance(clone, pop, cal)
    assert res.flagged and res.score > cal.threshold


def test_calibration_is_reproducible():
    pop = [small_model(s) for s in range(6)]
    assert D.calibrate_weight_distance(pop) == D.calibrate_weight_distance(pop)


def test_calibration_needs_two_models():
    with pytest.raises(D.DetectorError):
        D.calibrate_weight_distance([small_model(0)])


# ---------------------------------------------------------------------------
# Hotelling


def test_hotelling_matches_textbook_formula():
    xp = np.array([[1.0, 2.0], [2.0, 1.0], [3.0, 4.0], [2.0, 3.0]])
    xb = np.array([[4.0, 4.0], [5.0, 6.0], [6.0, 5.0]])
    rep = D.hotelling_t2(xp, xb)
    mp, mb = xp.mean(0), xb.mean(0)
    s = (np.cov(xp.T) * 3 + np.cov(xb.T) * 2) / 5
    gap = mp - mb
    direct = 4 * 3 / 7 * gap @ np.linalg.inv(s) @ gap
    assert abs(rep.t2 - direct) <= 1e-9
    assert abs(rep.lambda_max - 1 / np.linalg.eigvalsh(s)[0]) <= 1e-9


def test_identical_groups_give_zero():
    x = np.random.default_rng(0).standard_normal((20, 3))
    assert D.hotelling_t2(x, x).t2 == 0.0


def test_null_groups_rarely_exceed_threshold():
    rng = np.random.default_rng(1)
    below = sum(not D.hotelling_t2(rng.standard_normal((40, 3)), rng.standard_normal((40, 3))).decision
                for _ in range(100))
    assert below >= 95


def test_five_sigma_gap_always_detected():
    rng = np.random.default_rng(2)
    shift = np.array([5.0, 0.0, 0.0])
    hits = sum(D.hotelling_t2(rng.standard_normal((100, 3)), rng.standard_normal((100, 3)) + shift).decision
               for _ in range(100))
    assert hits == 100


def test_singular_covariance_is_ridged():
    rng = np.random.default_rng(3)
    a = np.column_stack([rng.standard_normal(10), np.zeros(10)])
    b = np.column_stack([rng.standard_normal(10) + 1, np.zeros(10)])
    rep = D.hotelling_t2(a, b)
    assert rep.ridged and np.isfinite(rep.t2)


def test_too_few_samples_rejected():
    with pytest.raises(D.DetectorError):
        D.hotelling_t2(np.zeros((2, 3)), np.zeros((1, 3)))


def test_two_means_split_separates_clusters():
    rng = np.random.default_rng(4)
    r = np.vstack([rng.normal(0, 0.1, (30, 2)), rng.normal(3, 0.1, (20, 2))])
    mask = D.two_means_split(r)
    assert mask[:30].all() != mask[30:].all() or mask[:30].any() != mask[30:].any()
    assert len(set(mask[:30])) == 1 and len(set(mask[30:])) == 1


def test_hotelling_scan_reports_each_class():
    m = nn.init_mlp((2, 4, 2), 0, scale=3.0)
    x = np.random.default_rng(0).random((200, 2))
    scan = D.detect_hotelling(m, x)
    assert scan.per_class and scan.score == max(r.t2 for r in scan.per_class.values())


# ---------------------------------------------------------------------------
# detectability


def test_separated_scores_give_gamma_one():
    res = D.detectability({"a": [0.0, 0.1, 0.2]}, {"a": [0.5, 0.6]})
    assert res.gamma == 1.0 and res.max_accuracy == 1.0


def test_gamma_formula_is_symmetric():
    assert D.gamma_from_accuracy(0.3) == pytest.approx(0.4)
    assert D.gamma_from_accuracy(0.7) == pytest.approx(0.4)


def test_identical_distributions_give_small_gamma():
    rng = np.random.default_rng(0)
    pooled = rng.standard_normal(400)
    gammas = []
    for _ in range(20):
        p = rng.permutation(pooled)
        gammas.append(D.detectability({"a": p[:200]}, {"a": p[200:]}).gamma)
    assert np.mean(gammas) <= 0.1


def test_high_orientation_never_below_half():
    acc, _, sign = D.best_threshold_accuracy([1.0, 2.0], [0.0, 0.5], orientation="high")
    assert acc == 0.5 and sign == 1
    acc, _, sign = D.best_threshold_accuracy([1.0, 2.0], [0.0, 0.5])
    assert acc == 1.0 and sign == -1


@settings(max_examples=50, deadline=None)
@given(st.lists(st.floats(-5, 5), min_size=1, max_size=20),
       st.lists(st.floats(-5, 5), min_size=1, max_size=20))
def test_detectability_symmetric_under_relabelling(a, b):
    one = D.detectability({"d": a}, {"d": b})
    two = D.detectability({"d": b}, {"d": a})
    assert abs(one.gamma - two.gamma) <= 1e-12
    assert 0.0 <= one.gamma <= 1.0


# ---------------------------------------------------------------------------
# bound checks


def test_target_gap_on_point_mass_fixture(t4, t4_point):
    chk = D.check_target_gap_bound(t4, t4_point)
    assert chk.lhs == pytest.approx(1.0)
    assert chk.rhs == pytest.approx(1.0)
    assert chk.holds


def test_target_gap_without_backdoor_change(t4):
    spec = BackdoorSpec(t4_spec_trigger(), 0, 1.0, {3: t4.conditional[3]})
    chk = D.check_target_gap_bound(t4, spec, g_b=t4.conditional)
    assert chk.lhs <= 1e-12 and chk.holds


def t4_spec_trigger():
    from bdlab.task import TriggerMap
    return TriggerMap({2: 3})


def test_target_gap_random_instances():
    violations = [D.check_target_gap_bound(task, spec) for task, spec in random_instances(31, 100, conforming=True)]
    assert not [c for c in violations if not c.holds]


def linear_pair(rng, n_in=3, n_out=2, scale=1.0):
    f_p = nn.MLP((rng.standard_normal((n_in, n_out)), rng.standard_normal(n_out)), head="linear")
    d = scale * rng.standard_normal(f_p.n_params)
    return f_p, f_p.from_flat(f_p.flat() + d)


def test_weight_gap_equal_weights():
    rng = np.random.default_rng(0)
    f_p, _ = linear_pair(rng)
    chk = D.check_weight_gap_bound(f_p, f_p, rng.random((10, 3)), kappa=4.0)
    assert chk.lhs == 0.0 and chk.rhs == 0.0 and chk.holds


def test_weight_gap_hand_set_linear_fixture():
    f_p = nn.MLP((np.eye(2), np.zeros(2)), head="linear")
    f_b = nn.MLP((np.eye(2), np.array([-0.2, 0.0])), head="linear")
    x = np.array([[0.3, 0.7], [0.9, 0.1]])
    chk = D.check_weight_gap_bound(f_b, f_p, x, kappa=2.0)
    # alpha = (1/2)/(2*2) * 2*0.2 = 0.05; phi rows are [x, 1] blocks, spectral norm by hand below
    phi = nn.ntk_feature_map(f_p, x)
    expect = 2.0 * np.sqrt(4) * 0.05 / np.linalg.norm(phi, 2)
    assert chk.lhs == pytest.approx(expect)
    assert chk.rhs == pytest.approx(0.2)
    assert chk.holds


def test_weight_gap_random_linear_pairs():
    rng = np.random.default_rng(1)
    bad = []
    for _ in range(100):
        f_p, f_b = linear_pair(rng, n_in=int(rng.integers(1, 5)), n_out=int(rng.integers(2, 5)))
        chk = D.check_weight_gap_bound(f_b, f_p, rng.random((int(rng.integers(1, 30)), f_p.n_in)),
                                       kappa=float(rng.uniform(1, 20)))
        bad += [] if chk.holds else [chk]
    assert not bad


def test_weight_gap_linearised_hidden_models():
    rng = np.random.default_rng(2)
    for s in range(20):
        f_p = nn.init_mlp((2, 4, 3), s, head="linear")
        f_b = f_p.from_flat(f_p.flat() + 0.1 * rng.standard_normal(f_p.n_params))
        assert D.check_weight_gap_bound(f_b, f_p, rng.random((15, 2)), kappa=3.0).holds


def test_task_drift_values():
    f_p = nn.MLP((np.eye(2), np.zeros(2)), head="linear")
    assert D.task_drift(f_p, f_p, np.random.default_rng(0).random((5, 2))) == 0.0
    f_b = nn.MLP((np.eye(2), np.array([0.3, 0.4])), head="linear")
    assert D.task_drift(f_b, f_p, [[0.2, 0.2]]) == pytest.approx(0.5)


def test_task_drift_bound_random():
    rng = np.random.default_rng(3)
    for _ in range(100):
        f_p, f_b = linear_pair(rng, n_in=2, n_out=int(rng.integers(2, 5)))
        assert D.check_task_drift_bound(f_b, f_p, rng.random((20, 2)), beta=float(rng.uniform(0.05, 1))).holds


def test_hotelling_bound_equal_means():
    rng = np.random.default_rng(4)
    x = rng.standard_normal((200, 2))
    rep = D.hotelling_t2(x[:100], x[:100])
    assert D.check_hotelling_bound(rep, 0.0).holds


def test_hotelling_bound_identity_covariance_tight():
    rng = np.random.default_rng(5)
    n, alpha = 4000, 0.3
    a = rng.standard_normal((n, 2))
    b = rng.standard_normal((n, 2)) + np.array([alpha, 0.0])
    rep = D.hotelling_t2(a, b)
    bound = rep.lambda_max * rep.scale * alpha ** 2
    # identity covariance: the statistic sits near the bound
    assert rep.t2 == pytest.approx(bound, rel=0.35)


def test_hotelling_bound_plug_in_is_exact():
    rng = np.random.default_rng(6)
    for _ in range(50):
        a = rng.standard_normal((30, 3))
        b = rng.standard_normal((25, 3)) * 2 + 0.5
        rep = D.hotelling_t2(a, b)
        gap = float(np.linalg.norm(rep.m_p - rep.m_b))
        assert D.check_hotelling_bound(rep, gap).holds
