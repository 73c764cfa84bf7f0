import json
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from dropgen_lab import diagnostics as dg
from dropgen_lab.artifacts import json_safe
from dropgen_lab.envs import Dataset, bayes_risks, shortcut_bench
from dropgen_lab.errors import ContractViolation
from dropgen_lab.model import Architecture, LayerSpec, Model, init_model, mlp
from dropgen_lab.representation import MaskDistribution, identity_extractor
from dropgen_lab.training import TrainConfig, evaluate, train


def _constant_model(n_u=1, n_s=2):
    model = init_model(mlp(n_u, n_s, hidden=(4,)), 0)
    model.params["layer1.weight"][:] = 0.0
    return model


def _linear(n_u, n_s, weight, bias=(0.0, 0.0)):
    arch = Architecture(n_u, n_s, (LayerSpec(2, 1, "identity"),))
    return Model(arch, {"layer0.weight": np.asarray(weight, float)[:, :, None],
                        "layer0.bias": np.asarray(bias, float)})


@pytest.fixture(scope="module")
def val(small_data):
    return small_data.val


EX = identity_extractor(2)

# --------------------------------------------------------------- risk decomposition


def test_constant_model_all_risks_equal(val):
    rep = dg.decomposed_risk(_constant_model(), EX, val, (0.2, 0.3, 0.5))
    r = rep.risks[(1, 1)]
    assert rep.risks[(1, 0)] == r and rep.risks[(0, 1)] == r
    assert abs(rep.total - r) < 1e-15


def test_pure_joint_pi_gives_joint_risk(val):
    model = init_model(mlp(1, 2), 4)
    rep = dg.decomposed_risk(model, EX, val, (1.0, 0.0, 0.0))
    assert rep.total == rep.risks[(1, 1)]


def test_all_zero_mask_mass_rejected(val):
    model = init_model(mlp(1, 2), 0)
    with pytest.raises(ContractViolation):
        dg.decomposed_risk(model, EX, val, {(1, 1): 0.5, (0, 0): 0.5})
    with pytest.raises(ContractViolation):
        dg.decomposed_risk(model, EX, val, (0.5, 0.2, 0.2, 0.1))
    with pytest.raises(ContractViolation):
        dg.decomposed_risk(model, EX, val, MaskDistribution("per-channel", 0.5, 1, 2))


@settings(max_examples=25, deadline=None)
@given(w=st.lists(st.floats(0.0, 1.0), min_size=3, max_size=3).filter(lambda v: sum(v) > 0.1),
       seed=st.integers(0, 50))
def test_property_total_is_weighted_sum(small_data, w, seed):
    pi = np.asarray(w) / math.fsum(w)
    pi[2] = 1.0 - pi[0] - pi[1]
    if pi[2] < 0:
        return
    rep = dg.decomposed_risk(init_model(mlp(1, 2, hidden=(3,)), seed), EX, small_data.val,
                             tuple(pi))
    direct = math.fsum(p * rep.risks[mu] for p, mu in zip(pi, dg.BLOCK_MASKS))
    assert abs(rep.total - direct) < 1e-12
    assert all(r >= 0 for r in rep.risks.values())


def test_rescaled_view_reported_alongside(val):
    dist = MaskDistribution("two-block", 0.5, 1, 2, rescale=True)
    rep = dg.decomposed_risk(init_model(mlp(1, 2), 0), EX, val, dist, spec=shortcut_bench())
    assert rep.rescaled_risks is not None and rep.rescaled_risks[(1, 1)] != rep.risks[(1, 1)]
    assert rep.h_y_given_s == pytest.approx(bayes_risks(shortcut_bench("discrete")).h_y_given_s)
    json.dumps(json_safe(rep.to_dict()))


def test_monte_carlo_matches_stratified(val):
    model = init_model(mlp(1, 2, hidden=(6,)), 2)
    dist = MaskDistribution("two-block", 0.3, 1, 2, rescale=False)
    strat = dg.decomposed_risk(model, EX, val, dist)
    mc = dg.monte_carlo_risk(model, EX, val, dist, draws=50_000, seed=1)
    assert abs(mc.mean - strat.total) <= 3 * mc.standard_error
    assert sum(mc.mask_counts.values()) == 50_000


def test_monte_carlo_rejects_per_channel_law(val):
    with pytest.raises(ContractViolation):
        dg.monte_carlo_risk(init_model(mlp(1, 2), 0), EX, val,
                            MaskDistribution("per-channel", 0.5, 1, 2))


# --------------------------------------------------------------- alignment


def test_cosine_examples(rng):
    g = rng.standard_normal(10)
    assert dg.cosine(g, g)[0] == pytest.approx(1.0, abs=1e-15)
    assert dg.cosine(g, -g)[0] == pytest.approx(-1.0, abs=1e-15)
    a, b = np.array([1.0, 2.0, 0.0]), np.array([-2.0, 1.0, 5.0])
    assert abs(dg.cosine(a, b)[0]) < 1e-12


def test_cosine_degenerate_flagged_not_zero():
    c, na, nb, deg = dg.cosine(np.zeros(4), np.ones(4))
    assert deg and math.isnan(c) and na == 0.0


@given(arrays(np.float64, 6, elements=st.floats(-1e6, 1e6)),
       arrays(np.float64, 6, elements=st.floats(-1e6, 1e6)))
def test_property_cosine_bounded(a, b):
    c, _, _, deg = dg.cosine(a, b)
    assert deg or abs(c) <= 1 + 1e-12


def test_alignment_same_regime_is_one(val):
    model = init_model(mlp(1, 2, hidden=(5,)), 0)
    z_only_stable = val.with_unstable(np.zeros_like(val.x_u))
    rec = dg.gradient_alignment(model, EX, z_only_stable.subset(range(64)), step=7)
    assert rec.step == 7 and not rec.degenerate
    assert rec.cosine == pytest.approx(1.0, abs=1e-12)


def test_alignment_degenerate_when_head_is_zero(val):
    rec = dg.gradient_alignment(_constant_model(), EX, val.subset(range(16)))
    assert rec.degenerate and math.isnan(rec.cosine)


def test_alignment_tracker_samples_every_interval(small_data):
    tracker = dg.AlignmentTracker(every=10)
    train(TrainConfig(steps=35, p=0.5), small_data.train, small_data.val,
          init_model(mlp(1, 2, hidden=(4,)), 0), EX, callbacks=(tracker,))
    assert [r.step for r in tracker.records] == [10, 20, 30]
    assert tracker._batch[0].shape[0] == min(64, len(small_data.val))
    lines = dg.alignment_csv(tracker.records).splitlines()
    assert lines[0] == "step,cosine,norm_joint,norm_stable" and len(lines) == 4


def test_nonnegative_fraction_skips_degenerate():
    recs = [dg.AlignmentRecord(0, 0.5, 1, 1, False), dg.AlignmentRecord(1, -0.1, 1, 1, False),
            dg.AlignmentRecord(2, math.nan, 0, 1, True)]
    assert dg.nonnegative_fraction(recs) == 0.5


# --------------------------------------------------------------- usage and sensitivity


def test_zero_stable_weights_zero_variance(val):
    model = init_model(mlp(1, 2, hidden=(4,)), 1)
    model.params["layer0.weight"][:, 1:, :] = 0.0
    assert dg.stable_usage(model, EX, val).variance == 0.0


def _exact_bench_dataset():
    """800 positions whose (y, x_s) counts equal 800 * P(y, x_s) exactly."""
    counts = {}
    states = [(-1.0, -1.0), (-1.0, 1.0), (1.0, -1.0), (1.0, 1.0)]
    for y in (0, 1):
        for xs in states:
            agree = sum((v > 0) == bool(y) for v in xs)
            p = 0.5 * 0.85 ** agree * 0.15 ** (2 - agree)
            counts[(y, xs)] = round(800 * p)
    assert sum(counts.values()) == 800
    ys, xss = [], []
    for (y, xs), c in counts.items():
        ys += [y] * c
        xss += [xs] * c
    y = np.asarray(ys).reshape(50, 16)
    x_s = np.asarray(xss).reshape(50, 16, 2).transpose(0, 2, 1)
    return Dataset(np.zeros((50, 1, 16)), x_s, y, ("train_a",) * 50)


def test_bayes_reps_only_predictor_hits_stable_entropy():
    spec = shortcut_bench("discrete")
    ex = identity_extractor(2, normalize=False)
    llr = math.log(0.85 / 0.15)
    model = _linear(1, 2, [[0.0, 0.0, 0.0], [0.0, llr, llr]])
    usage = dg.stable_usage(model, ex, _exact_bench_dataset(), spec)
    assert abs(usage.r01 - bayes_risks(spec).h_y_given_s) < 1e-6
    assert abs(usage.gap) < 1e-6 and usage.variance > 0


def test_stable_usage_needs_varied_x_s(val):
    flat = Dataset(val.x_u, np.ones_like(val.x_s), val.y, val.env)
    with pytest.raises(ContractViolation):
        dg.stable_usage(init_model(mlp(1, 2), 0), EX, flat)


def test_sensitivity_zero_when_reps_ignored(val):
    model = init_model(mlp(1, 2, hidden=(4,)), 3)
    model.params["layer0.weight"][:, 1:, :] = 0.0
    rep = dg.channel_removal_sensitivity(model, EX, val)
    assert rep.delta_drop_reps == 0.0
    assert rep.delta_drop_image == rep.baseline - evaluate(model, EX, val, "reps-only").dice


def test_sensitivity_symmetric_for_duplicated_tied_channels(val):
    dup = Dataset(val.x_u, val.x_u.copy(), val.y, val.env)
    ex = identity_extractor(1, normalize=False)
    model = _linear(1, 1, [[0.3, 0.3], [-0.4, -0.4]], bias=(0.1, -0.2))
    rep = dg.channel_removal_sensitivity(model, ex, dup)
    assert rep.delta_drop_image == rep.delta_drop_reps


# --------------------------------------------------------------- CKA


def test_cka_examples(rng):
    x = rng.standard_normal((30, 5))
    q, _ = np.linalg.qr(rng.standard_normal((5, 5)))
    assert dg.linear_cka(x, x).value == pytest.approx(1.0, abs=1e-12)
    assert dg.linear_cka(x, 3.7 * x).value == pytest.approx(1.0, abs=1e-12)
    assert abs(dg.linear_cka(x, x @ q).value - 1.0) <= 1e-10


def test_cka_degenerate_and_shape_errors(rng):
    res = dg.linear_cka(np.ones((5, 2)), rng.standard_normal((5, 3)))
    assert res.degenerate and math.isnan(res.value)
    with pytest.raises(ContractViolation):
        dg.linear_cka(rng.standard_normal((4, 2)), rng.standard_normal((5, 2)))
    with pytest.raises(ContractViolation):
        dg.linear_cka(rng.standard_normal((2, 2)), rng.standard_normal((2, 2)))


@settings(max_examples=40, deadline=None)
@given(seed=st.integers(0, 10_000), n=st.integers(3, 40), da=st.integers(1, 6),
       db=st.integers(1, 6))
def test_property_cka_bounds(seed, n, da, db):
    rng = np.random.default_rng(seed)
    res = dg.linear_cka(rng.standard_normal((n, da)), rng.standard_normal((n, db)))
    assert 0.0 <= res.value <= 1.0 + 1e-10


# --------------------------------------------------------------- robustness


def test_alpha_zero_is_baseline_bitwise(val):
    model = init_model(mlp(1, 2, hidden=(4,)), 0)
    curve = dg.weight_noise_robustness(model, EX, val, [0.0, 0.2])
    base = evaluate(model, EX, val)
    assert curve.dice[0] == base.dice and curve.loss[0] == base.loss
    assert curve.baseline == base.dice


def test_weight_noise_averages_trials(val):
    model = init_model(mlp(1, 2, hidden=(4,)), 0)
    curve = dg.weight_noise_robustness(model, EX, val, [0.3], trials=5, seed=9)
    manual = [evaluate(dg.perturb_parameters(model, 0.3, np.random.default_rng([9, 0, t, 31])),
                       EX, val).dice for t in range(5)]
    assert curve.trials == 5
    assert curve.dice[0] == pytest.approx(np.mean(manual), abs=1e-15)


def test_perturbation_scale_follows_tensor_std(rng):
    model = init_model(mlp(1, 2, hidden=(200,)), 0)
    noisy = dg.perturb_parameters(model, 0.5, rng)
    w = model.params["layer0.weight"]
    ratio = (noisy.params["layer0.weight"] - w).std() / w.std()
    assert ratio == pytest.approx(0.5, rel=0.1)


def test_corrupt_level_zero_identity(rng):
    x = rng.standard_normal((4, 1, 16))
    for kind in ("gamma", "bias"):
        assert dg.corrupt(x, kind, 0.0, seed=3).tobytes() == x.tobytes()


def test_gamma_one_identity(rng):
    x = rng.random((2, 8))
    assert dg.gamma_adjust(x, 1.0).tobytes() == x.tobytes()


def test_gamma_rejects_negative_input():
    with pytest.raises(ContractViolation):
        dg.gamma_adjust(np.array([-0.1, 0.5]), 2.0)
    with pytest.raises(ContractViolation):
        dg.corrupt(np.array([[-0.1, 0.5]]), "gamma", 1.0, rescale=False)


def test_gamma_sign_alternates_with_seed():
    assert dg.gamma_sign(0) == 1.0 and dg.gamma_sign(1) == -1.0


@settings(max_examples=40, deadline=None)
@given(x=arrays(np.float64, 12, elements=st.floats(-5, 5), unique=True),
       level=st.floats(0.0, 2.0), seed=st.integers(0, 5))
def test_property_gamma_preserves_order(x, level, seed):
    out = dg.corrupt(x[None], "gamma", level, seed)[0]
    # non-decreasing along the input's sort order (rounding may create ties, never swaps)
    assert np.all(np.diff(out[np.argsort(x)]) >= 0)


@given(level=st.floats(0.0, 3.0), seed=st.integers(0, 1000), length=st.integers(2, 64))
def test_property_bias_field_positive_mean_one(level, seed, length):
    f = dg.bias_field(length, level, np.random.default_rng(seed))
    assert (f > 0).all()
    assert abs(f.mean() - 1.0) < 1e-12


def test_corruption_curve_level_zero_matches_clean(val):
    model = init_model(mlp(1, 2, hidden=(4,)), 0)
    curve = dg.corruption_robustness(model, EX, val, "bias", [0.0, 1.0], seed=0)
    assert curve.dice[0] == evaluate(model, EX, val).dice
    assert curve.trials == 3


def test_robustness_and_sensitivity_csv_columns(val):
    model = init_model(mlp(1, 2), 0)
    curve = dg.corruption_robustness(model, EX, val, "gamma", [0.0, 0.5])
    assert dg.robustness_csv([curve]).splitlines()[0] == "kind,level,dice,loss"
    rep = dg.channel_removal_sensitivity(model, EX, val)
    head = dg.sensitivity_csv([("p=0", rep)]).splitlines()[0]
    assert head == "label,baseline,delta_drop_image,delta_drop_reps"


def test_report_serializes(val):
    model = init_model(mlp(1, 2), 0)
    report = dg.DiagnosticsReport(
        dg.decomposed_risk(model, EX, val, (0.5, 0.25, 0.25)),
        dg.stable_usage(model, EX, val),
        dg.channel_removal_sensitivity(model, EX, val),
        [dg.AlignmentRecord(0, math.nan, 0.0, 0.0, True)],
    )
    doc = json.loads(json.dumps(json_safe(report.to_dict())))
    assert set(doc) == {"risk", "stable_usage", "sensitivity", "alignment_nonnegative_fraction"}
