import json
import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from dropgen_lab import autodiff as ad
from dropgen_lab.envs import bayes_risks
from dropgen_lab.errors import CheckpointError, ContractViolation
from dropgen_lab.experiments import DiagnosticsConfig, bench_config, run
from dropgen_lab.model import forward, init_model, mlp
from dropgen_lab.representation import identity_extractor, predictor_inputs
from dropgen_lab.training import (
    HISTORY_COLUMNS,
    AdamW,
    OptimizerState,
    TrainConfig,
    cosine_lr,
    entropy_min_adapt,
    evaluate,
    load_checkpoint,
    optimizer_step,
    run_training,
    save_checkpoint,
    train,
    tta_evaluate,
)

CEILING_STEPS = 4000  # long enough for the reps-only runs to stop moving (see ledger)


def _model(seed=0, **kw):
    return init_model(mlp(1, 2, hidden=kw.pop("hidden", (8,)), **kw), seed)


def _grads(params, fill):
    return ad.GradientBundle({k: np.full_like(v, fill) for k, v in params.items()})


# --------------------------------------------------------------- schedule

def test_cosine_lr_endpoints():
    assert cosine_lr(0, 2000, 2e-4) == 2e-4
    assert cosine_lr(2000, 2000, 2e-4) == pytest.approx(0.0, abs=1e-20)
    assert cosine_lr(1000, 2000, 2e-4) == pytest.approx(1e-4, rel=1e-12)


def test_cosine_lr_rejects_out_of_range():
    with pytest.raises(ContractViolation):
        cosine_lr(11, 10, 1e-3)


@given(total=st.integers(1, 10_000), data=st.data())
def test_property_cosine_lr_monotone_and_bounded(total, data):
    s = data.draw(st.integers(0, total - 1))
    a, b = cosine_lr(s, total, 1.0), cosine_lr(s + 1, total, 1.0)
    assert 0.0 <= b <= a <= 1.0


# --------------------------------------------------------------- optimizer

def test_zero_grads_no_decay_leaves_params():
    model = _model()
    before = {k: v.copy() for k, v in model.params.items()}
    opt = AdamW(model.params, weight_decay=0.0)
    opt.step(model.params, _grads(model.params, 0.0), 2e-4)
    assert all(np.array_equal(before[k], model.params[k]) for k in before)


def test_zero_grads_decay_scales_exactly():
    model = _model()
    before = {k: v.copy() for k, v in model.params.items()}
    opt = AdamW(model.params, weight_decay=1e-4)
    opt.step(model.params, _grads(model.params, 0.0), 2e-4)
    for k in before:
        assert np.array_equal(model.params[k], before[k] * (1 - 2e-8))


def test_first_adam_step_closed_form(rng):
    params = {"w": rng.standard_normal(6)}
    g = rng.standard_normal(6)
    theta0 = params["w"].copy()
    state = OptimizerState({"w": np.zeros(6)}, {"w": np.zeros(6)})
    optimizer_step(params, ad.GradientBundle({"w": g}), state, 1e-3, 0.0)
    for i in range(6):
        m_hat = (0.1 * g[i]) / 0.1
        v_hat = (0.001 * g[i] ** 2) / (1 - 0.999)
        expect = theta0[i] - 1e-3 * m_hat / (math.sqrt(v_hat) + 1e-8)
        assert abs(params["w"][i] - expect) < 1e-12
        assert abs((params["w"][i] - theta0[i]) + 1e-3 * g[i] / (abs(g[i]) + 1e-8)) < 1e-12


def test_optimizer_rejects_nonfinite_gradient_by_name():
    params = {"a": np.ones(2), "b": np.ones(2)}
    state = OptimizerState({k: np.zeros(2) for k in params}, {k: np.zeros(2) for k in params})
    with pytest.raises(ContractViolation, match="b"):
        optimizer_step(params, ad.GradientBundle({"a": np.zeros(2), "b": np.array([0, np.nan])}),
                       state, 1e-3, 0.0)
    assert state.step == 0


# --------------------------------------------------------------- training loop

def test_config_invariants():
    for bad in ({"p": 1.0}, {"lr0": 0.0}, {"steps": -1}, {"loss": "hinge"},
                {"dropout_location": "middle"}):
        with pytest.raises(ContractViolation):
            TrainConfig(**bad)
    with pytest.raises(ContractViolation):
        TrainConfig.from_dict({"steps": 1, "momentum": 0.9})


def test_zero_steps_returns_input_model(small_data):
    ex = identity_extractor(2)
    model = _model()
    trained, history = train(TrainConfig(steps=0), small_data.train, small_data.val, model, ex)
    assert trained.equals(model)
    assert len(history) == 1


def test_history_record_count_and_columns(small_data):
    cfg = TrainConfig(steps=45, eval_every=10, p=0.5)
    _, hist = train(cfg, small_data.train, small_data.val, _model(), identity_extractor(2),
                    small_data.test)
    assert len(hist) == 45 // 10 + 1
    lines = hist.to_csv().splitlines()
    assert lines[0] == ",".join(HISTORY_COLUMNS)
    assert all(r["ood_dice"] is not None for r in hist.records)


def test_training_is_deterministic(small_data):
    ex = identity_extractor(2)
    cfg = TrainConfig(steps=60, p=0.5, eval_every=20, dropout_location="all-layers", seed=3)
    a = train(cfg, small_data.train, small_data.val, _model(), ex)
    b = train(cfg, small_data.train, small_data.val, _model(), ex)
    assert a[0].equals(b[0]) and a[1].to_csv() == b[1].to_csv()


def test_seed_changes_trajectory(small_data):
    ex = identity_extractor(2)
    a, _ = train(TrainConfig(steps=20, p=0.5, seed=0), small_data.train, small_data.val,
                 _model(), ex)
    b, _ = train(TrainConfig(steps=20, p=0.5, seed=1), small_data.train, small_data.val,
                 _model(), ex)
    assert not a.equals(b)


def test_input_model_not_mutated(small_data):
    model = _model()
    checksum = model.checksum()
    train(TrainConfig(steps=10), small_data.train, small_data.val, model, identity_extractor(2))
    assert model.checksum() == checksum


def test_channel_mismatch_rejected(small_data):
    with pytest.raises(ContractViolation):
        train(TrainConfig(steps=1), small_data.train, small_data.val,
              init_model(mlp(1, 3), 0), identity_extractor(2))


def test_bench_p0_run_reduces_train_loss(bench_runs):
    hist = bench_runs.get(0.0, 0).history
    assert hist.records[-1]["train_loss"] < hist.records[0]["train_loss"]
    assert hist.records[-1]["step"] == 2000


# --------------------------------------------------------------- evaluation

def test_zero_stable_weights_make_full_equal_image_only(small_data):
    model = _model()
    model.params["layer0.weight"][:, 1:, :] = 0.0
    ex = identity_extractor(2)
    full = evaluate(model, ex, small_data.val)
    image = evaluate(model, ex, small_data.val, "image-only")
    assert (full.loss, full.dice) == (image.loss, image.dice)


def test_oracle_predictor_scores_one(small_data):
    # logit for class 1 = 20 * x_u; exact in-domain since x_u carries the label sign
    model = init_model(mlp(1, 2, hidden=()), 0)
    w = np.zeros((2, 3, 1))
    w[1, 0, 0] = 20.0
    model.params["layer0.weight"][:] = w
    model.params["layer0.bias"][:] = 0.0
    res = evaluate(model, identity_extractor(2), small_data.val.subset(range(32)))
    assert res.dice == 1.0


def test_evaluate_matches_straight_line_recomputation(bench_runs):
    model = bench_runs.get(0.5, 0).model
    data = bench_runs.data.val.subset(range(50))
    ex = bench_runs.extractor
    res = evaluate(model, ex, data)
    z = predictor_inputs(ex, data.x_u, data.x_s)
    terms = []
    for i in range(len(data)):
        h = z[i]
        for j, spec in enumerate(model.arch.layers):
            w, b = model.params[f"layer{j}.weight"][:, :, 0], model.params[f"layer{j}.bias"]
            h = w @ h + b[:, None]
            h = np.maximum(h, 0) if spec.activation == "relu" else h
        for t in range(h.shape[1]):
            col = h[:, t]
            m = col.max()
            terms.append(m + math.log(math.fsum(np.exp(col - m))) - col[data.y[i, t]])
    assert abs(res.loss - math.fsum(terms) / len(terms)) < 1e-12


def test_evaluate_is_pure_under_interleaved_training(small_data):
    ex = identity_extractor(2)
    model = _model(1)
    first = evaluate(model, ex, small_data.val)
    train(TrainConfig(steps=15, p=0.5), small_data.train, small_data.val, _model(2), ex)
    second = evaluate(model, ex, small_data.val)
    assert first == second


def test_unknown_input_mode(small_data):
    with pytest.raises(ContractViolation):
        evaluate(_model(), identity_extractor(2), small_data.val, "half")


# --------------------------------------------------------------- TTA

def test_tta_zero_steps_unchanged(small_data):
    model = _model()
    assert entropy_min_adapt(model, identity_extractor(2), small_data.test, 0, 1e-3).equals(model)


def test_tta_ignores_labels(small_data):
    model = _model()
    ex = identity_extractor(2)
    perm = np.random.default_rng(0).permutation(small_data.test.y.ravel()).reshape(
        small_data.test.y.shape)
    a = entropy_min_adapt(model, ex, small_data.test, 5, 1e-2)
    b = entropy_min_adapt(model, ex, small_data.test.with_labels(perm), 5, 1e-2)
    assert a.equals(b)


def test_tta_entropy_non_increasing(bench_runs):
    model = bench_runs.get(0.0, 0).model
    batch = bench_runs.data.test.subset(range(32))
    _, trace = entropy_min_adapt(model, bench_runs.extractor, batch, 20, 1e-3,
                                 return_trace=True)
    assert len(trace) == 21
    assert all(b <= a + 1e-15 for a, b in zip(trace, trace[1:]))


def test_tta_evaluate_resets_per_sample(small_data):
    model = _model()
    ex = identity_extractor(2)
    data = small_data.test.subset(range(3))
    res = tta_evaluate(model, ex, data, 2, 1e-2)
    single = evaluate(entropy_min_adapt(model, ex, data.subset([1]), 2, 1e-2), ex,
                      data.subset([1]))
    parts = [evaluate(entropy_min_adapt(model, ex, data.subset([i]), 2, 1e-2), ex,
                      data.subset([i])).loss for i in range(3)]
    assert res.loss == pytest.approx(np.mean(parts), abs=1e-15)
    assert single.loss == parts[1]


# --------------------------------------------------------------- checkpoints

def _state(small_data, steps=30, stop_at=None):
    cfg = TrainConfig(steps=steps, p=0.5, eval_every=10, seed=2)
    return cfg, run_training(cfg, small_data.train, small_data.val, _model(), identity_extractor(2),
                             stop_at=stop_at)


def test_checkpoint_roundtrip_bitwise(tmp_path, small_data):
    _, state = _state(small_data)
    save_checkpoint(state, tmp_path / "c.json")
    back = load_checkpoint(tmp_path / "c.json")
    assert back.model.equals(state.model) and back.step == state.step
    for k in state.optimizer.m:
        assert back.optimizer.m[k].tobytes() == state.optimizer.m[k].tobytes()
        assert back.optimizer.v[k].tobytes() == state.optimizer.v[k].tobytes()
    assert back.history.to_csv() == state.history.to_csv()


@pytest.mark.parametrize("split", [1, 10, 17, 29])
def test_resume_equals_unbroken(tmp_path, small_data, split):
    cfg, full = _state(small_data)
    _, part = _state(small_data, stop_at=split)
    save_checkpoint(part, tmp_path / "c.json")
    resumed = run_training(cfg, small_data.train, small_data.val, _model(), identity_extractor(2),
                           resume=load_checkpoint(tmp_path / "c.json"))
    assert resumed.model.equals(full.model)
    assert resumed.history.to_csv() == full.history.to_csv()


def test_truncated_checkpoint_reports_offset(tmp_path, small_data):
    _, state = _state(small_data, steps=5)
    path = tmp_path / "c.json"
    save_checkpoint(state, path)
    text = path.read_text()
    path.write_text(text[: len(text) // 2])
    with pytest.raises(CheckpointError, match="offset"):
        load_checkpoint(path)


def test_wrong_document_rejected(tmp_path):
    path = tmp_path / "c.json"
    path.write_text(json.dumps({"format": "something-else"}))
    with pytest.raises(CheckpointError):
        load_checkpoint(path)


# --------------------------------------------------------------- ceilings

@pytest.fixture(scope="module")
def reps_only_runs(bench_spec, bench_data):
    ex = identity_extractor(bench_spec.n_stable)
    diag = DiagnosticsConfig(risk=False, usage=False, sensitivity=False)
    return [run(bench_spec, bench_data,
                bench_config(0.0, s, train_input_mode="reps-only", steps=CEILING_STEPS), ex,
                diag=diag) for s in range(10)]


@pytest.mark.slow
def test_stable_only_ceiling_realized(reps_only_runs, bench_spec, bench_data):
    h = bayes_risks(bench_spec.discretized()).h_y_given_s
    ex = identity_extractor(bench_spec.n_stable)
    ce = [evaluate(r.model, ex, bench_data.val, "reps-only").loss for r in reps_only_runs]
    assert all(h <= c < h + 0.05 for c in ce), (h, ce)


@pytest.mark.slow
def test_joint_beats_stable_only_in_domain(reps_only_runs, bench_runs, bench_spec, bench_data):
    br = bayes_risks(bench_spec.discretized())
    assert min(br.info_u_given_s.values()) >= 0.1
    ex = bench_runs.extractor
    joint = np.median([evaluate(bench_runs.get(0.5, s).model, ex, bench_data.val).loss
                       for s in range(10)])
    reps = np.median([evaluate(r.model, ex, bench_data.val, "reps-only").loss
                      for r in reps_only_runs])
    assert joint < reps - 0.02
