"""Canonical shortcut-bench experiment: data, model, one training run and its
diagnostics. Shared by the command line and the acceptance suite."""

from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np

from . import diagnostics as dg
from .envs import sample_dataset, sample_mixture
from .model import init_model, mlp
from .representation import frozen_random_extractor, identity_extractor, learned_extractor
from .training import TrainConfig, evaluate, train

DEFAULT_ALPHAS = (0.0, 0.1, 0.2, 0.4)
DEFAULT_LEVELS = (0.0, 0.5, 1.0, 1.5)


@dataclass(frozen=True)
class DataConfig:
    n_train: int = 2000
    n_val: int = 500
    n_test: int = 500
    seed: int = 100


@dataclass(frozen=True)
class ModelConfig:
    hidden: tuple = (16, 16)
    activation: str = "relu"
    kernel_size: int = 1


@dataclass(frozen=True)
class ExtractorConfig:
    kind: str = "identity"
    d: int = 4
    hidden: int = 8
    seed: int = 1234
    noise_std: float = 0.5
    steps: int = 300


@dataclass(frozen=True)
class DiagnosticsConfig:
    risk: bool = True
    usage: bool = True
    sensitivity: bool = True
    alignment: bool = False
    alignment_every: int = 100
    robustness: bool = False
    alphas: tuple = DEFAULT_ALPHAS
    levels: tuple = DEFAULT_LEVELS
    trials: int = 5


@dataclass
class BenchData:
    train: object
    val: object
    test: object | None


def make_data(spec, cfg=DataConfig()):
    """Pooled training mixture, in-domain validation, and the held-out test env."""
    base = cfg.seed
    train_set = sample_mixture(spec, spec.train_envs, cfg.n_train, base)
    val_envs = spec.val_envs or spec.train_envs
    val_set = sample_mixture(spec, val_envs, cfg.n_val, base + 100)
    test_set = None
    if spec.test_envs and cfg.n_test > 0:
        test_set = sample_mixture(spec, spec.test_envs, cfg.n_test, base + 200)
    return BenchData(train_set, val_set, test_set)


def make_extractor(cfg, spec, train_data):
    if cfg.kind == "identity":
        return identity_extractor(spec.n_stable)
    if cfg.kind == "frozen-random":
        return frozen_random_extractor(spec.n_stable, cfg.d, cfg.hidden, cfg.seed)
    if cfg.kind == "learned":
        return learned_extractor(train_data.x_s, cfg.d, cfg.noise_std, cfg.steps, seed=cfg.seed)
    raise ValueError(f"unknown extractor kind {cfg.kind!r}")


def make_model(spec, extractor, cfg, seed):
    arch = mlp(spec.n_unstable, extractor.out_channels, tuple(cfg.hidden), spec.n_classes,
               cfg.kernel_size, cfg.activation)
    return init_model(arch, seed)


@dataclass
class RunResult:
    p: float
    seed: int
    input_mode: str
    model: object
    history: object
    in_domain_dice: float
    ood_dice: float | None
    risk: object = None
    usage: object = None
    sensitivity: object = None
    alignment: list = field(default_factory=list)
    robustness: list = field(default_factory=list)

    def sweep_row(self):
        r = self.risk.risks if self.risk is not None else {}
        return {"p": self.p, "seed": self.seed, "input_mode": self.input_mode,
                "in_domain_dice": self.in_domain_dice, "ood_dice": self.ood_dice,
                "R_11": r.get((1, 1)), "R_10": r.get((1, 0)), "R_01": r.get((0, 1))}

    def report(self):
        return dg.DiagnosticsReport(self.risk, self.usage, self.sensitivity, self.alignment,
                                    self.robustness)


def run(spec, data, train_cfg, extractor, model_cfg=ModelConfig(), diag=DiagnosticsConfig(),
        model=None):
    """Train one model (seeded by ``train_cfg.seed``) and run the enabled diagnostics.

    ``input_mode`` of the result is the training input mode; the in-domain and
    OOD Dice are always measured on the full input.
    """
    if model is None:
        model = make_model(spec, extractor, model_cfg, train_cfg.seed)
    tracker = dg.AlignmentTracker(diag.alignment_every) if diag.alignment else None
    trained, history = train(train_cfg, data.train, data.val, model, extractor, data.test,
                             callbacks=(tracker,) if tracker else ())
    res = RunResult(train_cfg.p, train_cfg.seed, train_cfg.train_input_mode, trained, history,
                    evaluate(trained, extractor, data.val).dice,
                    None if data.test is None else evaluate(trained, extractor, data.test).dice)
    if diag.risk:
        dist = train_cfg.mask_distribution(spec.n_unstable, extractor.out_channels)
        pis = dist.pis
        if pis[(0, 0)] > 0:
            # per-channel laws can drop everything; report the law conditioned on a kept block
            z = 1.0 - pis[(0, 0)]
            pis = {mu: (w / z if mu != (0, 0) else 0.0) for mu, w in pis.items()}
        res.risk = dg.decomposed_risk(trained, extractor, data.val, pis, spec,
                                      dist.scale if dist.rescale else None)
    if diag.usage:
        res.usage = dg.stable_usage(trained, extractor, data.val, spec)
    if diag.sensitivity:
        res.sensitivity = dg.channel_removal_sensitivity(trained, extractor, data.val)
    if tracker is not None:
        res.alignment = tracker.records
    if diag.robustness:
        res.robustness = [
            dg.weight_noise_robustness(trained, extractor, data.val, diag.alphas, diag.trials,
                                       train_cfg.seed),
            dg.corruption_robustness(trained, extractor, data.val, "gamma", diag.levels,
                                     train_cfg.seed),
            dg.corruption_robustness(trained, extractor, data.val, "bias", diag.levels,
                                     train_cfg.seed),
        ]
    return res


def bench_config(p, seed, **overrides):
    """Training configuration used by the canonical shortcut-bench runs."""
    return replace(TrainConfig(p=p, seed=seed, eval_every=100), **overrides)


def median_mad(values):
    v = np.asarray([x for x in values if x is not None], dtype=np.float64)
    if v.size == 0:
        return None, None
    med = float(np.median(v))
    return med, float(np.median(np.abs(v - med)))
