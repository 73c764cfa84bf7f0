"""ERM training with the channel-dropout combiner in the loop.

Every random draw in a step comes from a generator keyed by ``(seed, step)``,
so a run can be stopped at any step, checkpointed, and resumed to a
bit-identical result.
"""

from __future__ import annotations

import csv
import io
import logging
import math
from dataclasses import asdict, dataclass, field, fields

import numpy as np

from . import autodiff as ad
from .errors import CheckpointError, ContractViolation
from .metrics import argmax_labels, dice_per_sample
from .model import (
    forward,
    loss_fn,
    model_from_dict,
    model_to_dict,
    read_json_document,
    write_json_atomic,
)
from .representation import (
    MaskDistribution,
    apply_channel_dropout,
    block_mask,
    predictor_inputs,
    sample_masks,
)

log = logging.getLogger(__name__)

INPUT_MODES = ("full", "image-only", "reps-only")
INPUT_MODE_BLOCKS = {"full": (1, 1), "image-only": (1, 0), "reps-only": (0, 1)}
HISTORY_COLUMNS = ("step", "lr", "train_loss", "val_loss_full", "val_loss_mask10",
                   "val_loss_mask01", "val_dice", "ood_dice")


def cosine_lr(step, total_steps, lr0):
    """lr0 * (1 + cos(pi * step / total_steps)) / 2."""
    if step < 0 or step > total_steps:
        raise ContractViolation(f"step {step} outside [0, {total_steps}]")
    if total_steps == 0:
        return lr0
    return lr0 * 0.5 * (1.0 + math.cos(math.pi * step / total_steps))


@dataclass
class OptimizerState:
    m: dict
    v: dict
    step: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    def to_dict(self):
        return {"m": {k: _enc(a) for k, a in self.m.items()},
                "v": {k: _enc(a) for k, a in self.v.items()},
                "step": self.step, "beta1": self.beta1, "beta2": self.beta2, "eps": self.eps}

    @classmethod
    def from_dict(cls, d):
        return cls({k: _dec(a) for k, a in d["m"].items()},
                   {k: _dec(a) for k, a in d["v"].items()},
                   int(d["step"]), float(d["beta1"]), float(d["beta2"]), float(d["eps"]))


def _enc(a):
    return {"shape": list(a.shape), "data": [float(x) for x in a.ravel()]}


def _dec(d):
    return np.array(d["data"], dtype=np.float64).reshape(d["shape"])


class AdamW:
    """Adam with bias correction, then decoupled decay ``theta -= lr * wd * theta``."""

    def __init__(self, params, weight_decay=1e-4, betas=(0.9, 0.999), eps=1e-8, state=None):
        self.weight_decay = weight_decay
        self.state = state or OptimizerState(
            {k: np.zeros_like(v) for k, v in params.items()},
            {k: np.zeros_like(v) for k, v in params.items()},
            0, betas[0], betas[1], eps)

    def step(self, params, grads, lr):
        optimizer_step(params, grads, self.state, lr, self.weight_decay)


def optimizer_step(params, grads, state, lr, weight_decay):
    """In-place AdamW update of ``params`` (name -> array) from a GradientBundle."""
    for name in params:
        g = grads[name]
        if g.shape != params[name].shape:
            raise ContractViolation(f"gradient shape mismatch for {name}")
        if not np.isfinite(g).all():
            raise ContractViolation(f"non-finite gradient for parameter {name}")
    state.step += 1
    t = state.step
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1 ** t
    c2 = 1.0 - b2 ** t
    for name, theta in params.items():
        g = grads[name]
        m = state.m[name]
        v = state.v[name]
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * g * g
        theta -= lr * (m / c1) / (np.sqrt(v / c2) + state.eps)
        if weight_decay:
            theta *= 1.0 - lr * weight_decay


@dataclass
class TrainConfig:
    steps: int = 2000
    batch_size: int = 32
    lr0: float = 2e-4
    weight_decay: float = 1e-4
    loss: str = "cross_entropy"
    p: float = 0.0
    mask_mode: str = "per-channel"
    rescale: bool = True
    guarantee_nonzero: bool = False
    dropout_location: str = "inputs"
    train_input_mode: str = "full"
    extractor: str = "identity"
    seed: int = 0
    eval_every: int = 100

    def __post_init__(self):
        if self.steps < 0:
            raise ContractViolation("steps must be non-negative")
        if self.lr0 <= 0:
            raise ContractViolation("lr0 must be positive")
        if not 0.0 <= self.p < 1.0:
            raise ContractViolation("p must lie in [0, 1)")
        if self.batch_size < 1 or self.eval_every < 1:
            raise ContractViolation("batch_size and eval_every must be positive")
        if self.dropout_location not in ("inputs", "all-layers"):
            raise ContractViolation("dropout_location must be 'inputs' or 'all-layers'")
        if self.train_input_mode not in INPUT_MODES:
            raise ContractViolation(f"train_input_mode must be one of {INPUT_MODES}")
        loss_fn(self.loss)

    def mask_distribution(self, n_unstable, n_stable):
        return MaskDistribution(self.mask_mode, self.p, n_unstable, n_stable, self.rescale,
                                self.guarantee_nonzero)

    def to_dict(self):
        return asdict(self)

    @classmethod
    def from_dict(cls, d):
        names = {f.name for f in fields(cls)}
        unknown = set(d) - names
        if unknown:
            raise ContractViolation(f"unknown train config keys: {sorted(unknown)}")
        return cls(**d)


@dataclass
class TrainHistory:
    records: list = field(default_factory=list)

    def __len__(self):
        return len(self.records)

    def column(self, name):
        return [r[name] for r in self.records]

    def to_csv(self):
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(HISTORY_COLUMNS)
        for r in self.records:
            w.writerow([_fmt(r.get(c)) for c in HISTORY_COLUMNS])
        return buf.getvalue()


def _fmt(v):
    if v is None:
        return ""
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    return repr(float(v))


@dataclass
class EvalResult:
    loss: float
    dice: float
    per_class: tuple


def _zero_blocks(z, mu, n_unstable):
    return apply_channel_dropout(z, block_mask(mu, n_unstable, z.shape[1] - n_unstable))


def evaluate_inputs(model, z, y, input_mode="full"):
    """Dropout-free evaluation on prepared predictor inputs."""
    if input_mode not in INPUT_MODES:
        raise ContractViolation(f"input_mode must be one of {INPUT_MODES}")
    if input_mode != "full":
        z = _zero_blocks(z, INPUT_MODE_BLOCKS[input_mode], model.arch.n_unstable)
    logits = forward(model, z)
    loss = ad.softmax_cross_entropy(logits, y).item()
    dice, per_class = dice_per_sample(argmax_labels(logits.data), y, model.arch.n_classes)
    return EvalResult(loss, dice, per_class)


def evaluate(model, extractor, data, input_mode="full"):
    """Mean cross-entropy and Dice on ``data``; no dropout, complementary block zeroed
    (without rescaling) for image-only / reps-only."""
    z = predictor_inputs(extractor, data.x_u, data.x_s)
    return evaluate_inputs(model, z, data.y, input_mode)


@dataclass
class TrainState:
    model: object
    optimizer: OptimizerState
    history: TrainHistory
    step: int
    config: TrainConfig


def _hidden_masks(model, rng, batch, p, rescale):
    if p == 0.0:
        return None
    scale = 1.0 / (1.0 - p) if rescale else 1.0
    masks = []
    for spec in model.arch.layers[:-1]:
        keep = (rng.random((batch, spec.out_channels)) >= p).astype(np.float64) * scale
        masks.append(keep[:, :, None])
    return masks


def run_training(config, train_data, val_data, model, extractor, test_data=None, *,
                 resume=None, stop_at=None, callbacks=()):
    """Full training loop; returns a :class:`TrainState`.

    ``resume`` continues from a saved :class:`TrainState`; ``stop_at`` ends the
    run early at that step (the schedule still spans ``config.steps``).
    ``callbacks`` are called as ``cb(step, model, context)`` after each update.
    """
    n_u = model.arch.n_unstable
    if model.arch.in_channels != n_u + extractor.out_channels:
        raise ContractViolation("model input channels must equal n_u + extractor output channels")
    if train_data.x_u.shape[1] != n_u:
        raise ContractViolation("model partition does not match the data's unstable channels")
    z_train = predictor_inputs(extractor, train_data.x_u, train_data.x_s)
    z_val = predictor_inputs(extractor, val_data.x_u, val_data.x_s)
    z_test = None if test_data is None else predictor_inputs(extractor, test_data.x_u,
                                                             test_data.x_s)
    probe = np.arange(min(len(train_data), 512))
    fixed = INPUT_MODE_BLOCKS[config.train_input_mode]
    if config.train_input_mode != "full":
        z_train = _zero_blocks(z_train, fixed, n_u)
    dist = config.mask_distribution(n_u, extractor.out_channels)
    objective = loss_fn(config.loss)
    T = config.steps
    end = T if stop_at is None else min(stop_at, T)

    if resume is not None:
        model = resume.model.copy()
        opt_state = OptimizerState({k: v.copy() for k, v in resume.optimizer.m.items()},
                                   {k: v.copy() for k, v in resume.optimizer.v.items()},
                                   resume.optimizer.step, resume.optimizer.beta1,
                                   resume.optimizer.beta2, resume.optimizer.eps)
        history = TrainHistory([dict(r) for r in resume.history.records])
        start = resume.step
    else:
        model = model.copy()
        opt_state = AdamW(model.params).state
        history = TrainHistory()
        start = 0

    def record(step):
        lr = cosine_lr(step, T, config.lr0) if T else config.lr0
        rec = {"step": step, "lr": lr,
               "train_loss": evaluate_inputs(model, z_train[probe], train_data.y[probe]).loss}
        full = evaluate_inputs(model, z_val, val_data.y)
        rec["val_loss_full"] = full.loss
        rec["val_loss_mask10"] = evaluate_inputs(model, z_val, val_data.y, "image-only").loss
        rec["val_loss_mask01"] = evaluate_inputs(model, z_val, val_data.y, "reps-only").loss
        rec["val_dice"] = full.dice
        rec["ood_dice"] = None if z_test is None else evaluate_inputs(model, z_test,
                                                                      test_data.y).dice
        history.records.append(rec)

    if start == 0 and not history.records:
        record(0)
    context = {"z_val": z_val, "y_val": val_data.y, "extractor": extractor}
    B = min(config.batch_size, len(train_data))
    for t in range(start, end):
        rng = np.random.default_rng([config.seed, t, 11])
        idx = rng.choice(len(train_data), size=B, replace=False)
        z = apply_channel_dropout(z_train[idx], sample_masks(dist, rng, B), dist)
        hidden = None
        if config.dropout_location == "all-layers":
            hidden = _hidden_masks(model, rng, B, config.p, config.rescale)
        loss = objective(forward(model, z, hidden), train_data.y[idx])
        grads = ad.backward(loss)
        optimizer_step(model.params, grads, opt_state, cosine_lr(t, T, config.lr0),
                       config.weight_decay)
        if (t + 1) % config.eval_every == 0:
            record(t + 1)
        for cb in callbacks:
            cb(t + 1, model, context)
    return TrainState(model, opt_state, history, end, config)


def train(config, train_data, val_data, model, extractor, test_data=None, callbacks=()):
    """Train ``model`` (a copy; the argument is untouched). Returns (model, history)."""
    state = run_training(config, train_data, val_data, model, extractor, test_data,
                         callbacks=callbacks)
    extractor.assert_frozen()
    return state.model, state.history


# ----------------------------------------------------------------- TTA baseline

def entropy_min_adapt(model, extractor, target_data, steps, lr, return_trace=False):
    """Gradient descent on mean prediction entropy over unlabeled ``target_data``.

    Starts from a copy of ``model`` and updates every parameter (the models here
    have no normalization layers to restrict to). Labels are never read.
    """
    if steps < 0:
        raise ContractViolation("steps must be non-negative")
    adapted = model.copy()
    z = predictor_inputs(extractor, target_data.x_u, target_data.x_s)
    trace = []
    for _ in range(steps):
        h = ad.mean_entropy(forward(adapted, z))
        trace.append(h.item())
        grads = ad.backward(h)
        for name, theta in adapted.params.items():
            theta -= lr * grads[name]
    trace.append(ad.mean_entropy(forward(adapted, z)).item())
    return (adapted, trace) if return_trace else adapted


def tta_evaluate(model, extractor, data, steps, lr):
    """Per-sample protocol: reset, adapt on one signal, score it; averaged."""
    losses, dices = [], []
    for i in range(len(data)):
        one = data.subset([i])
        res = evaluate(entropy_min_adapt(model, extractor, one, steps, lr), extractor, one)
        losses.append(res.loss)
        dices.append(res.dice)
    return EvalResult(float(np.mean(losses)), float(np.mean(dices)), ())


# ----------------------------------------------------------------- checkpoints

TRAIN_CHECKPOINT_FORMAT = "dropgen-lab/train-state"


def save_checkpoint(state, path):
    doc = {
        "format": TRAIN_CHECKPOINT_FORMAT,
        "version": 1,
        "model": model_to_dict(state.model),
        "optimizer": state.optimizer.to_dict(),
        "history": state.history.records,
        "step": state.step,
        "config": state.config.to_dict(),
    }
    write_json_atomic(path, doc)


def load_checkpoint(path):
    doc = read_json_document(path)
    if not isinstance(doc, dict) or doc.get("format") != TRAIN_CHECKPOINT_FORMAT:
        raise CheckpointError(f"{path} is not a training checkpoint")
    try:
        return TrainState(
            model=model_from_dict(doc["model"]),
            optimizer=OptimizerState.from_dict(doc["optimizer"]),
            history=TrainHistory([dict(r) for r in doc["history"]]),
            step=int(doc["step"]),
            config=TrainConfig.from_dict(doc["config"]),
        )
    except (KeyError, TypeError, ValueError) as exc:
        if isinstance(exc, CheckpointError):
            raise
        raise CheckpointError(f"malformed training checkpoint: {exc}")
