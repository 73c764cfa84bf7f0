"""Analysis instruments: masked-risk decomposition, gradient alignment, stable
usage, channel-removal sensitivity, linear CKA and robustness curves.

Every fixed-mask evaluation here zeroes channels without the inverted-dropout
rescale, so that the weighted sum of masked risks is literally the training
objective under unscaled masks. Where a rescaled view is useful it is reported
next to the literal one.
"""

from __future__ import annotations

import csv
import io
import math
from dataclasses import asdict, dataclass, field

import numpy as np

from . import autodiff as ad
from .envs import bayes_risks
from .errors import ContractViolation
from .model import Model, forward
from .representation import (
    BLOCK_MASKS,
    MaskDistribution,
    apply_channel_dropout,
    block_mask,
    predictor_inputs,
    sample_masks,
)
from .training import evaluate, evaluate_inputs

DEGENERATE_NORM = 1e-12
ALIGNMENT_BATCH = 64
ALIGNMENT_COLUMNS = ("step", "cosine", "norm_joint", "norm_stable")


def _mask_key(mu):
    return f"R_{mu[0]}{mu[1]}"


def _normalize_pi(pi):
    """Accept a MaskDistribution, a {mask: weight} mapping or a 3-sequence."""
    if isinstance(pi, MaskDistribution):
        pi = pi.pis
    if isinstance(pi, dict):
        extra = set(pi) - set(BLOCK_MASKS) - {(0, 0)}
        if extra:
            raise ContractViolation(f"unknown masks in pi: {sorted(extra)}")
        if pi.get((0, 0), 0.0) != 0.0:
            raise ContractViolation("pi puts mass on the all-zero mask (0, 0)")
        weights = [float(pi.get(mu, 0.0)) for mu in BLOCK_MASKS]
    else:
        weights = [float(w) for w in pi]
        if len(weights) == 4:
            if weights[3] != 0.0:
                raise ContractViolation("pi puts mass on the all-zero mask (0, 0)")
            weights = weights[:3]
        if len(weights) != 3:
            raise ContractViolation("pi needs weights for (1,1), (1,0), (0,1)")
    if min(weights) < 0 or abs(sum(weights) - 1.0) > 1e-12:
        raise ContractViolation("pi must be non-negative and sum to 1")
    return dict(zip(BLOCK_MASKS, weights))


def per_sample_loss(model, z, y):
    """Cross-entropy of each sample, averaged over its positions: shape (N,)."""
    logp = ad.log_softmax(forward(model, z).data)
    picked = np.take_along_axis(logp, np.asarray(y, dtype=np.int64)[:, None, :], axis=1)[:, 0]
    return -picked.mean(axis=1)


def _masked(z, mu, n_unstable, scale=1.0):
    bits = block_mask(mu, n_unstable, z.shape[1] - n_unstable) * scale
    return apply_channel_dropout(z, bits)


@dataclass
class RiskReport:
    risks: dict
    pi: dict
    total: float
    standard_errors: dict
    n_samples: int
    rescaled_risks: dict | None = None
    rescaled_total: float | None = None
    h_y: float | None = None
    h_y_given_s: float | None = None
    h_joint: dict | None = None

    def weighted_sum(self):
        return sum(self.pi[mu] * self.risks[mu] for mu in BLOCK_MASKS)

    def to_dict(self):
        out = {
            "risks": {_mask_key(mu): self.risks[mu] for mu in BLOCK_MASKS},
            "pi": {_mask_key(mu).replace("R_", "pi_"): self.pi[mu] for mu in BLOCK_MASKS},
            "total": self.total,
            "standard_errors": {_mask_key(mu): self.standard_errors[mu] for mu in BLOCK_MASKS},
            "n_samples": self.n_samples,
        }
        if self.rescaled_risks is not None:
            out["rescaled_risks"] = {_mask_key(mu): self.rescaled_risks[mu] for mu in BLOCK_MASKS}
            out["rescaled_total"] = self.rescaled_total
        if self.h_y_given_s is not None:
            out["bayes"] = {"H(Y)": self.h_y, "H(Y|Xs)": self.h_y_given_s,
                            "H_e(Y|Xs,Xu)": dict(self.h_joint)}
        return out


def decomposed_risk(model, extractor, data, pi, spec=None, rescale_factor=None):
    """Per-mask risks R_mu on ``data`` and L = sum_mu pi_mu R_mu.

    Each R_mu applies the fixed block mask mu to every sample with no rescale.
    ``rescale_factor`` (e.g. 1/(1-p)) adds the training-faithful rescaled view;
    when ``pi`` is a rescaling MaskDistribution its own factor is used. A
    discrete (or discretizable) ``spec`` attaches the Bayes floors.
    """
    if rescale_factor is None and isinstance(pi, MaskDistribution) and pi.rescale:
        rescale_factor = pi.scale
    weights = _normalize_pi(pi)
    z = predictor_inputs(extractor, data.x_u, data.x_s)
    n_u = model.arch.n_unstable
    risks, ses = {}, {}
    for mu in BLOCK_MASKS:
        losses = per_sample_loss(model, _masked(z, mu, n_u), data.y)
        risks[mu] = float(losses.mean())
        ses[mu] = float(losses.std(ddof=1) / math.sqrt(len(losses))) if len(losses) > 1 else 0.0
    report = RiskReport(risks, weights, 0.0, ses, len(data))
    report.total = report.weighted_sum()
    if rescale_factor is not None:
        rr = {mu: float(per_sample_loss(model, _masked(z, mu, n_u, rescale_factor),
                                        data.y).mean()) for mu in BLOCK_MASKS}
        report.rescaled_risks = rr
        report.rescaled_total = sum(weights[mu] * rr[mu] for mu in BLOCK_MASKS)
    if spec is not None:
        br = bayes_risks(spec if spec.mode == "discrete" else spec.discretized(), check=False)
        report.h_y, report.h_y_given_s = br.h_y, br.h_y_given_s
        report.h_joint = dict(br.h_joint)
    return report


@dataclass
class MonteCarloRisk:
    mean: float
    standard_error: float
    draws: int
    mask_counts: dict


def monte_carlo_risk(model, extractor, data, dist, draws=50_000, seed=0, chunk=5000):
    """Training loss estimated by drawing (sample, mask) pairs at random.

    Masks come from ``sample_masks`` on ``dist`` and are applied with no
    rescale. Samples are drawn uniformly with replacement from ``data``.
    """
    if dist.mode == "per-channel":
        raise ContractViolation("monte-carlo risk needs block masks (two-block or structured)")
    if dist.pis[(0, 0)] != 0.0:
        raise ContractViolation("mask law puts mass on (0, 0)")
    z = predictor_inputs(extractor, data.x_u, data.x_s)
    rng = np.random.default_rng([seed, 23])
    idx = rng.integers(0, len(data), size=draws)
    bits = sample_masks(dist, rng, draws)
    losses = np.empty(draws)
    for lo in range(0, draws, chunk):
        hi = min(lo + chunk, draws)
        zz = apply_channel_dropout(z[idx[lo:hi]], bits[lo:hi])
        losses[lo:hi] = per_sample_loss(model, zz, data.y[idx[lo:hi]])
    blocks = bits[:, [0, dist.n_unstable]].astype(int)
    counts = {mu: int(((blocks[:, 0] == mu[0]) & (blocks[:, 1] == mu[1])).sum())
              for mu in BLOCK_MASKS}
    return MonteCarloRisk(float(losses.mean()), float(losses.std(ddof=1) / math.sqrt(draws)),
                          draws, counts)


# ----------------------------------------------------------------- alignment

def cosine(a, b):
    """(cosine, |a|, |b|, degenerate); the cosine is NaN when either norm < 1e-12."""
    a, b = np.ravel(a), np.ravel(b)
    na, nb = float(np.linalg.norm(a)), float(np.linalg.norm(b))
    if na < DEGENERATE_NORM or nb < DEGENERATE_NORM:
        return math.nan, na, nb, True
    c = float(np.dot(a, b) / (na * nb))
    return float(np.clip(c, -1.0, 1.0)), na, nb, False


@dataclass
class AlignmentRecord:
    step: int
    cosine: float
    norm_joint: float
    norm_stable: float
    degenerate: bool
    secondary_cosine: float = math.nan
    secondary_degenerate: bool = True

    def row(self):
        return [self.step, self.cosine, self.norm_joint, self.norm_stable]


def _grads(model, z, y):
    return ad.backward(ad.softmax_cross_entropy(forward(model, z), y))


def gradient_alignment(model, extractor, batch, step=0):
    """Cosine between the W_s gradients of R_(1,1) and R_(0,1) on one batch.

    ``batch`` is a Dataset or a prepared ``(z, y)`` pair. Both passes are
    deterministic (no sampled masks); the second zeroes the image block.
    The secondary cosine pairs (1,0) with (1,1) over all parameters, since on
    the W_s slice the (1,0) gradient is identically zero.
    """
    if isinstance(batch, tuple):
        z, y = batch
    else:
        z = predictor_inputs(extractor, batch.x_u, batch.x_s)
        y = batch.y
    if len(z) == 0:
        raise ContractViolation("alignment batch is empty")
    n_u = model.arch.n_unstable
    g_joint = _grads(model, z, y)
    g_stable = _grads(model, _masked(z, (0, 1), n_u), y)
    c, nj, ns, deg = cosine(g_joint.W_s, g_stable.W_s)
    g_image = _grads(model, _masked(z, (1, 0), n_u), y)
    c2, _, _, deg2 = cosine(g_joint.flat(), g_image.flat())
    return AlignmentRecord(int(step), c, nj, ns, deg, c2, deg2)


class AlignmentTracker:
    """Training callback that samples alignment every ``every`` steps on a held-out
    batch fixed when the run starts (the first ``batch_size`` validation signals)."""

    def __init__(self, every=100, batch_size=ALIGNMENT_BATCH):
        self.every = every
        self.batch_size = batch_size
        self.records = []
        self._batch = None

    def __call__(self, step, model, context):
        if self._batch is None:
            n = min(self.batch_size, len(context["y_val"]))
            self._batch = (context["z_val"][:n].copy(), context["y_val"][:n].copy())
        if step % self.every == 0:
            self.records.append(gradient_alignment(model, None, self._batch, step))


def alignment_csv(records):
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(ALIGNMENT_COLUMNS)
    for r in records:
        w.writerow([str(r.step)] + [repr(float(v)) for v in r.row()[1:]])
    return buf.getvalue()


def nonnegative_fraction(records):
    """Share of non-degenerate cosines that are >= 0 (NaN if none qualify)."""
    vals = [r.cosine for r in records if not r.degenerate]
    if not vals:
        return math.nan
    return float(np.mean(np.asarray(vals) >= 0.0))


# ----------------------------------------------------------------- usage / sensitivity

@dataclass
class StableUsage:
    variance: float
    r01: float
    h_y_given_s: float | None = None
    gap: float | None = None

    def to_dict(self):
        return asdict(self)


def stable_usage(model, extractor, data, spec=None):
    """How much the prediction moves with x_s when the image block is zeroed.

    ``variance`` is the variance of the (0,1)-masked softmax outputs over all
    samples and positions, averaged over classes; zero certifies that the
    model ignores x_s. ``r01`` is that regime's cross-entropy.
    """
    flat = np.asarray(data.x_s).transpose(0, 2, 1).reshape(-1, data.x_s.shape[1])
    if len(np.unique(flat, axis=0)) < 2:
        raise ContractViolation("stable usage needs at least two distinct x_s values")
    z = _masked(predictor_inputs(extractor, data.x_u, data.x_s), (0, 1), model.arch.n_unstable)
    logits = forward(model, z)
    probs = ad.softmax(logits.data)
    # shift by one sample first: same variance, and exactly 0 when the outputs are constant
    shifted = probs - probs[:1, :, :1]
    var = float(shifted.var(axis=(0, 2)).mean())
    r01 = ad.softmax_cross_entropy(logits, data.y).item()
    out = StableUsage(var, r01)
    if spec is not None:
        br = bayes_risks(spec if spec.mode == "discrete" else spec.discretized(), check=False)
        out.h_y_given_s = br.h_y_given_s
        out.gap = r01 - br.h_y_given_s
    return out


@dataclass
class SensitivityReport:
    baseline: float
    image_zeroed: float
    reps_zeroed: float

    @property
    def delta_drop_image(self):
        return self.baseline - self.image_zeroed

    @property
    def delta_drop_reps(self):
        return self.baseline - self.reps_zeroed

    def to_dict(self):
        d = asdict(self)
        d["delta_drop_image"] = self.delta_drop_image
        d["delta_drop_reps"] = self.delta_drop_reps
        return d


def channel_removal_sensitivity(model, extractor, val_data):
    """Dice with the full input versus each block zeroed (no rescale)."""
    return SensitivityReport(
        evaluate(model, extractor, val_data).dice,
        evaluate(model, extractor, val_data, "reps-only").dice,
        evaluate(model, extractor, val_data, "image-only").dice,
    )


# ----------------------------------------------------------------- CKA

@dataclass(frozen=True)
class CKAResult:
    value: float
    degenerate: bool = False

    def __float__(self):
        return self.value


def linear_cka(a, b):
    """Linear CKA between two row-aligned representation matrices (N x D)."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.ndim == 1:
        a = a[:, None]
    if b.ndim == 1:
        b = b[:, None]
    if a.ndim != 2 or b.ndim != 2 or a.shape[0] != b.shape[0]:
        raise ContractViolation(f"CKA needs matrices with equal row counts, got {a.shape}, {b.shape}")
    if a.shape[0] < 3:
        raise ContractViolation("CKA needs at least 3 rows")
    a = a - a.mean(axis=0)
    b = b - b.mean(axis=0)
    aa = np.linalg.norm(a.T @ a)
    bb = np.linalg.norm(b.T @ b)
    if aa < DEGENERATE_NORM or bb < DEGENERATE_NORM:
        return CKAResult(math.nan, True)
    ab = np.linalg.norm(a.T @ b) ** 2
    return CKAResult(float(ab / (aa * bb)))


def representation_matrix(extractor, data):
    """Normalized stable features of each sample flattened to one row."""
    from .representation import stable_features
    feats = stable_features(extractor, data.x_s)
    return feats.reshape(len(data), -1)


def raw_matrix(data):
    return np.asarray(data.x_u).reshape(len(data), -1)


# ----------------------------------------------------------------- robustness

@dataclass
class RobustnessCurve:
    kind: str
    levels: list
    dice: list
    loss: list
    trials: int

    @property
    def baseline(self):
        return self.dice[self.levels.index(0.0)] if 0.0 in self.levels else None

    def drop_at_max(self, baseline=None):
        base = self.baseline if baseline is None else baseline
        return base - self.dice[int(np.argmax(self.levels))]

    def rows(self):
        return [(self.kind, lv, d, l) for lv, d, l in zip(self.levels, self.dice, self.loss)]


def perturb_parameters(model, alpha, rng):
    """Copy of ``model`` with N(0, (alpha * std(tensor))^2) noise on every tensor."""
    params = {}
    for name in sorted(model.params):
        arr = model.params[name]
        sd = float(arr.std())
        params[name] = arr + alpha * sd * rng.standard_normal(arr.shape)
    return Model(model.arch, params)


def weight_noise_robustness(model, extractor, data, alphas, trials=5, seed=0):
    """Dice / loss versus weight-noise magnitude, averaged over ``trials`` draws.

    alpha = 0 is the unperturbed evaluation itself.
    """
    if trials < 1:
        raise ContractViolation("trials must be at least 1")
    z = predictor_inputs(extractor, data.x_u, data.x_s)
    dice, loss = [], []
    for k, alpha in enumerate(alphas):
        alpha = float(alpha)
        if alpha < 0:
            raise ContractViolation("alpha must be non-negative")
        if alpha == 0.0:
            res = evaluate_inputs(model, z, data.y)
            dice.append(res.dice)
            loss.append(res.loss)
            continue
        ds, ls = [], []
        for t in range(trials):
            noisy = perturb_parameters(model, alpha, np.random.default_rng([seed, k, t, 31]))
            res = evaluate_inputs(noisy, z, data.y)
            ds.append(res.dice)
            ls.append(res.loss)
        dice.append(float(np.mean(ds)))
        loss.append(float(np.mean(ls)))
    return RobustnessCurve("weight-noise", [float(a) for a in alphas], dice, loss, trials)


CORRUPTIONS = ("gamma", "bias")


def gamma_sign(seed):
    """+1 (darkening, gamma > 1) for even seeds, -1 for odd seeds."""
    return 1.0 if int(seed) % 2 == 0 else -1.0


def gamma_adjust(x, gamma):
    """Elementwise x ** gamma on values in [0, 1]."""
    x = np.asarray(x, dtype=np.float64)
    if (x < 0).any():
        raise ContractViolation("gamma adjustment needs non-negative inputs")
    if gamma == 1.0:
        return x.copy()
    return x ** gamma


def bias_field(length, level, rng):
    """Smooth positive field over positions: exp(level * q(t)) rescaled to mean 1,
    with q a random cubic on t in [-1, 1] normalized to max |q| = 1."""
    t = np.linspace(-1.0, 1.0, length)
    coef = rng.uniform(-1.0, 1.0, 4)
    q = np.polynomial.polynomial.polyval(t, coef)
    q = q - q.mean()
    peak = np.abs(q).max()
    if peak > 0:
        q = q / peak
    f = np.exp(level * q)
    return f / f.mean()


def corrupt(x_u, kind, level, seed=0, rescale=True):
    """Apply a gamma or bias-field corruption to unstable inputs.

    Accepts (C, L) or (N, C, L). Gamma: each signal is min-max scaled to
    [0, 1], raised to exp(level * s) with the sign s set by ``seed``, then
    mapped back; with ``rescale=False`` the values must already be non-negative
    and are used as is. Bias: signal i is multiplied by its own field drawn
    from (seed, i). Level 0 returns the input unchanged.
    """
    if kind not in CORRUPTIONS:
        raise ContractViolation(f"unknown corruption {kind!r}")
    if level < 0:
        raise ContractViolation("corruption level must be non-negative")
    x = np.asarray(x_u, dtype=np.float64)
    single = x.ndim == 2
    if single:
        x = x[None]
    if x.ndim != 3:
        raise ContractViolation(f"expected (C, L) or (N, C, L), got {np.shape(x_u)}")
    if kind == "gamma" and not rescale and (x < 0).any():
        raise ContractViolation("gamma corruption without rescaling needs non-negative inputs")
    if level == 0:
        out = x.copy()
    elif kind == "gamma":
        g = math.exp(level * gamma_sign(seed))
        if rescale:
            lo = x.min(axis=2, keepdims=True)
            span = x.max(axis=2, keepdims=True) - lo
            safe = np.where(span > 0, span, 1.0)
            out = np.where(span > 0, gamma_adjust((x - lo) / safe, g) * safe + lo, x)
        else:
            out = gamma_adjust(x, g)
    else:
        out = np.empty_like(x)
        for i in range(len(x)):
            out[i] = x[i] * bias_field(x.shape[2], level, np.random.default_rng([seed, i, 37]))
    return out[0] if single else out


def corruption_robustness(model, extractor, data, kind, levels, seed=0, fields=3):
    """Dice / loss versus corruption level; bias results average ``fields`` random
    fields per level, gamma is deterministic per seed."""
    trials = fields if kind == "bias" else 1
    dice, loss = [], []
    for level in levels:
        ds, ls = [], []
        for t in range(1 if level == 0 else trials):
            shifted = data.with_unstable(corrupt(data.x_u, kind, level, seed + t))
            res = evaluate(model, extractor, shifted)
            ds.append(res.dice)
            ls.append(res.loss)
        dice.append(float(np.mean(ds)) if len(ds) > 1 else ds[0])
        loss.append(float(np.mean(ls)) if len(ls) > 1 else ls[0])
    return RobustnessCurve(kind, [float(v) for v in levels], dice, loss, trials)


ROBUSTNESS_COLUMNS = ("kind", "level", "dice", "loss")


def robustness_csv(curves):
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(ROBUSTNESS_COLUMNS)
    for c in curves:
        for kind, lv, d, l in c.rows():
            w.writerow([kind, repr(lv), repr(d), repr(l)])
    return buf.getvalue()


SENSITIVITY_COLUMNS = ("label", "baseline", "delta_drop_image", "delta_drop_reps")


def sensitivity_csv(labelled):
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(SENSITIVITY_COLUMNS)
    for label, rep in labelled:
        w.writerow([label, repr(rep.baseline), repr(rep.delta_drop_image),
                    repr(rep.delta_drop_reps)])
    return buf.getvalue()


@dataclass
class DiagnosticsReport:
    risk: RiskReport | None = None
    usage: StableUsage | None = None
    sensitivity: SensitivityReport | None = None
    alignment: list = field(default_factory=list)
    robustness: list = field(default_factory=list)

    def to_dict(self):
        out = {}
        if self.risk is not None:
            out["risk"] = self.risk.to_dict()
        if self.usage is not None:
            out["stable_usage"] = self.usage.to_dict()
        if self.sensitivity is not None:
            out["sensitivity"] = self.sensitivity.to_dict()
        if self.alignment:
            out["alignment_nonnegative_fraction"] = nonnegative_fraction(self.alignment)
        if self.robustness:
            out["robustness"] = [{"kind": c.kind, "levels": c.levels, "dice": c.dice,
                                  "loss": c.loss, "trials": c.trials} for c in self.robustness]
        return out

