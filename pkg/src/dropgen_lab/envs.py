"""Multi-environment generators for the label -> (stable, unstable) graphical model.

Every position of a length-L signal is generated i.i.d.: a label y is drawn
from the prior, each stable channel emits a symbol from a table that does not
depend on the environment, and each unstable channel emits a symbol from an
environment-specific table. In gaussian mode an emitted symbol's value gets
additive N(0, noise_std^2) noise; in discrete mode values are used as-is, which
makes the per-position joint enumerable.

Sample ``i`` of a dataset draws its labels and stable channels from a stream
keyed by ``(seed, i)`` only, so datasets of different environments built with
the same seed are paired: they share labels and stable channels and differ
only in the unstable channels.
"""

from __future__ import annotations

import hashlib
import itertools
import json
import math
import zlib
from dataclasses import dataclass, field, replace

import numpy as np

from .errors import AssumptionViolation, ContractViolation, UnsupportedMode

SPEC_SCHEMA_VERSION = 1
MAX_TABLE_CELLS = 1_000_000


@dataclass(frozen=True)
class Emission:
    """One channel's stochastic map from label to value."""

    values: tuple
    table: tuple  # table[y][j] = P(symbol j | y)
    noise_std: float = 0.0

    def __post_init__(self):
        t = np.asarray(self.table, dtype=float)
        if t.ndim != 2 or t.shape[1] != len(self.values):
            raise ContractViolation("emission table must be K x len(values)")
        if (t < 0).any() or np.abs(t.sum(axis=1) - 1).max() > 1e-12:
            raise ContractViolation("emission table rows must be distributions")
        if len(set(self.values)) != len(self.values):
            raise ContractViolation("emission values must be distinct")
        if self.noise_std < 0:
            raise ContractViolation("noise_std must be non-negative")

    def to_dict(self):
        return {"values": list(self.values), "table": [list(r) for r in self.table],
                "noise_std": self.noise_std}

    @classmethod
    def from_dict(cls, d):
        return cls(tuple(float(v) for v in d["values"]),
                   tuple(tuple(float(p) for p in row) for row in d["table"]),
                   float(d.get("noise_std", 0.0)))

    def quantized(self):
        """Discrete twin: the noisy value rounded to the nearest alphabet value."""
        if self.noise_std == 0:
            return self
        order = np.argsort(self.values)
        v = np.asarray(self.values, dtype=float)[order]
        edges = np.concatenate([[-np.inf], (v[1:] + v[:-1]) / 2, [np.inf]])
        s = self.noise_std

        def cdf(x):
            return 0.5 * math.erfc(-x / (s * math.sqrt(2))) if np.isfinite(x) else float(x > 0)

        # confusion[i, j] = P(nearest = v_j | emitted v_i)
        confusion = np.array([[cdf(edges[j + 1] - vi) - cdf(edges[j] - vi) for j in range(len(v))]
                              for vi in v])
        confusion /= confusion.sum(axis=1, keepdims=True)
        table = np.asarray(self.table, dtype=float)[:, order] @ confusion
        table /= table.sum(axis=1, keepdims=True)
        return Emission(tuple(float(x) for x in v), tuple(tuple(r) for r in table), 0.0)


@dataclass(frozen=True)
class EnvironmentSpec:
    name: str
    label_prior: tuple
    stable: tuple
    unstable: dict  # env id -> tuple of Emission, one per unstable channel
    train_envs: tuple
    test_envs: tuple
    length: int = 16
    mode: str = "gaussian"
    val_envs: tuple = ()
    # Per-environment replacement of the stable map. Breaks A1 on purpose;
    # exists so that assumption checks can be exercised.
    stable_overrides: dict = field(default_factory=dict)

    def __post_init__(self):
        prior = np.asarray(self.label_prior, dtype=float)
        if (prior < 0).any() or abs(prior.sum() - 1) > 1e-12:
            raise ContractViolation("label_prior must be a distribution")
        if self.mode not in ("discrete", "gaussian"):
            raise ContractViolation(f"unknown mode {self.mode!r}")
        if not self.train_envs:
            raise ContractViolation("need at least one training environment")
        if set(self.train_envs) & set(self.test_envs):
            raise ContractViolation("test environments must be disjoint from training ones")
        k = len(self.label_prior)
        n_u = None
        for env in self.environments:
            if env not in self.unstable:
                raise ContractViolation(f"environment {env!r} has no unstable map")
            if n_u is None:
                n_u = len(self.unstable[env])
            elif len(self.unstable[env]) != n_u:
                raise ContractViolation("all environments need the same unstable channel count")
        for em in self._all_emissions():
            if len(em.table) != k:
                raise ContractViolation("emission tables need one row per class")
            if self.mode == "discrete" and em.noise_std != 0:
                raise ContractViolation("discrete mode emissions must be noise-free")
        if self.length < 2:
            raise ContractViolation("signal length must be at least 2")

    def _all_emissions(self):
        yield from self.stable
        for ems in self.unstable.values():
            yield from ems
        for ems in self.stable_overrides.values():
            yield from ems

    @property
    def environments(self):
        seen = []
        for e in (*self.train_envs, *self.val_envs, *self.test_envs):
            if e not in seen:
                seen.append(e)
        return tuple(seen)

    @property
    def n_classes(self):
        return len(self.label_prior)

    @property
    def n_stable(self):
        return len(self.stable)

    @property
    def n_unstable(self):
        return len(self.unstable[self.train_envs[0]])

    def stable_for(self, env):
        return self.stable_overrides.get(env, self.stable)

    def to_dict(self):
        return {
            "schema_version": SPEC_SCHEMA_VERSION,
            "name": self.name,
            "mode": self.mode,
            "length": self.length,
            "label_prior": list(self.label_prior),
            "stable": [e.to_dict() for e in self.stable],
            "unstable": {env: [e.to_dict() for e in ems] for env, ems in self.unstable.items()},
            "train_envs": list(self.train_envs),
            "val_envs": list(self.val_envs),
            "test_envs": list(self.test_envs),
            "stable_overrides": {env: [e.to_dict() for e in ems]
                                 for env, ems in self.stable_overrides.items()},
        }

    @classmethod
    def from_dict(cls, d):
        if d.get("schema_version") != SPEC_SCHEMA_VERSION:
            raise ContractViolation(
                f"unsupported spec schema_version {d.get('schema_version')!r}")
        return cls(
            name=d.get("name", "custom"),
            label_prior=tuple(float(p) for p in d["label_prior"]),
            stable=tuple(Emission.from_dict(e) for e in d["stable"]),
            unstable={env: tuple(Emission.from_dict(e) for e in ems)
                      for env, ems in d["unstable"].items()},
            train_envs=tuple(d["train_envs"]),
            val_envs=tuple(d.get("val_envs", ())),
            test_envs=tuple(d.get("test_envs", ())),
            length=int(d.get("length", 16)),
            mode=d.get("mode", "gaussian"),
            stable_overrides={env: tuple(Emission.from_dict(e) for e in ems)
                              for env, ems in d.get("stable_overrides", {}).items()},
        )

    def spec_hash(self):
        blob = json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(blob.encode()).hexdigest()

    def discretized(self):
        """Discrete twin with every gaussian channel quantized to its alphabet."""
        return replace(
            self,
            mode="discrete",
            stable=tuple(e.quantized() for e in self.stable),
            unstable={env: tuple(e.quantized() for e in ems) for env, ems in self.unstable.items()},
            stable_overrides={env: tuple(e.quantized() for e in ems)
                              for env, ems in self.stable_overrides.items()},
        )


def _binary_channel(flip, values=(-1.0, 1.0), noise_std=0.0):
    return Emission(tuple(values), ((1 - flip, flip), (flip, 1 - flip)), noise_std)


def shortcut_bench(mode="gaussian", length=16):
    """Two-class benchmark with one unstable and two stable channels.

    Stable channels are the +-1 label map with each position flipped w.p. 0.15.
    The unstable channel is ``gain * (+-1 label map)`` plus N(0, sigma^2) noise,
    gain +1 in the training environments and -1 in the held-out test one:
    near-perfect in-domain, anti-predictive out of domain.
    """
    def unstable(gain, sigma):
        return (Emission((-gain, gain), ((1.0, 0.0), (0.0, 1.0)), sigma),)

    spec = EnvironmentSpec(
        name="shortcut-bench",
        label_prior=(0.5, 0.5),
        stable=(_binary_channel(0.15), _binary_channel(0.15)),
        unstable={"train_a": unstable(1.0, 0.05),
                  "train_b": unstable(1.0, 0.10),
                  "test": unstable(-1.0, 0.05)},
        train_envs=("train_a", "train_b"),
        test_envs=("test",),
        length=length,
        mode="gaussian",
    )
    if mode == "discrete":
        return spec.discretized()
    if mode != "gaussian":
        raise ContractViolation(f"unknown mode {mode!r}")
    return spec


def random_spec(seed, n_classes=None, n_stable=None, n_envs=3, alphabet=None):
    """Random discrete spec; generic tables satisfy A1-A4 with probability one."""
    rng = np.random.default_rng(seed)
    k = n_classes or int(rng.integers(2, 4))
    n_s = n_stable or int(rng.integers(1, 3))
    a = alphabet or int(rng.integers(2, 4))

    def emission():
        table = rng.dirichlet(np.ones(a), size=k)
        return Emission(tuple(float(v) for v in range(a)), tuple(tuple(r) for r in table))

    envs = [f"env{i}" for i in range(n_envs)]
    return EnvironmentSpec(
        name=f"random-{seed}",
        label_prior=tuple(rng.dirichlet(np.ones(k) * 2)),
        stable=tuple(emission() for _ in range(n_s)),
        unstable={e: (emission(),) for e in envs},
        train_envs=tuple(envs[:-1]),
        test_envs=(envs[-1],),
        length=8,
        mode="discrete",
    )


# ----------------------------------------------------------------- sampling

@dataclass
class Dataset:
    x_u: np.ndarray  # (N, n_u, L)
    x_s: np.ndarray  # (N, n_s, L)
    y: np.ndarray    # (N, L) int64
    env: tuple       # environment id per sample
    provenance: dict = field(default_factory=dict)

    def __len__(self):
        return len(self.y)

    def __getitem__(self, i):
        return self.x_u[i], self.x_s[i], self.y[i], self.env[i]

    def subset(self, idx):
        idx = np.asarray(idx)
        return Dataset(self.x_u[idx], self.x_s[idx], self.y[idx],
                       tuple(self.env[i] for i in idx), dict(self.provenance))

    def with_labels(self, y):
        return Dataset(self.x_u, self.x_s, np.asarray(y, dtype=np.int64), self.env,
                       dict(self.provenance))

    def with_unstable(self, x_u):
        return Dataset(np.asarray(x_u, dtype=float), self.x_s, self.y, self.env,
                       dict(self.provenance))


def _env_key(env):
    return zlib.crc32(str(env).encode())


def _draw(emissions, y, rng, gaussian):
    out = np.empty((len(emissions), len(y)))
    u = rng.random((len(emissions), len(y)))
    for c, em in enumerate(emissions):
        cum = np.cumsum(np.asarray(em.table, dtype=float), axis=1)
        sym = (u[c][:, None] >= cum[y][:, :-1]).sum(axis=1)
        out[c] = np.asarray(em.values, dtype=float)[sym]
        if gaussian and em.noise_std > 0:
            out[c] += em.noise_std * rng.standard_normal(len(y))
    return out


def _sample_one(spec, env, seed, i):
    gaussian = spec.mode == "gaussian"
    shared = np.random.default_rng([seed, i, 0])
    y = shared.choice(spec.n_classes, size=spec.length, p=np.asarray(spec.label_prior))
    stable_rng = shared if env not in spec.stable_overrides else np.random.default_rng(
        [seed, i, 2, _env_key(env)])
    x_s = _draw(spec.stable_for(env), y, stable_rng, gaussian)
    x_u = _draw(spec.unstable[env], y, np.random.default_rng([seed, i, 1, _env_key(env)]),
                gaussian)
    return x_u, x_s, y


def sample_dataset(spec, env, n, seed):
    """``n`` i.i.d. samples from environment ``env``."""
    if env not in spec.environments:
        raise ContractViolation(f"unknown environment {env!r}; spec has {spec.environments}")
    return sample_mixture(spec, [env], n, seed)


def sample_mixture(spec, envs, n, seed):
    """Pooled samples; sample i's environment is drawn uniformly from ``envs``."""
    if n <= 0:
        raise ContractViolation("n must be positive")
    for env in envs:
        if env not in spec.environments:
            raise ContractViolation(f"unknown environment {env!r}; spec has {spec.environments}")
    n_u, n_s, L = spec.n_unstable, spec.n_stable, spec.length
    x_u = np.empty((n, n_u, L))
    x_s = np.empty((n, n_s, L))
    y = np.empty((n, L), dtype=np.int64)
    ids = []
    for i in range(n):
        env = envs[0] if len(envs) == 1 else envs[
            int(np.random.default_rng([seed, i, 3]).integers(len(envs)))]
        x_u[i], x_s[i], y[i] = _sample_one(spec, env, seed, i)
        ids.append(env)
    prov = {"spec_hash": spec.spec_hash(), "seed": int(seed), "envs": list(envs), "n": int(n)}
    return Dataset(x_u, x_s, y, tuple(ids), prov)


def save_dataset(data, path):
    """Write a ``.npz`` container whose ``manifest`` entry is a JSON document."""
    manifest = json.dumps({"format": "dropgen-lab/dataset", "version": 1, **data.provenance},
                          sort_keys=True)
    with open(path, "wb") as fh:
        np.savez(fh, x_u=data.x_u, x_s=data.x_s, y=data.y,
                 env=np.asarray(data.env, dtype=str), manifest=np.asarray(manifest))


def load_dataset(path):
    with np.load(path, allow_pickle=False) as z:
        manifest = json.loads(str(z["manifest"]))
        manifest.pop("format", None)
        manifest.pop("version", None)
        return Dataset(z["x_u"].copy(), z["x_s"].copy(), z["y"].astype(np.int64),
                       tuple(str(e) for e in z["env"]), manifest)


# ----------------------------------------------------------------- exact tables

@dataclass
class ProbabilityTable:
    variables: tuple
    alphabets: tuple  # per variable, list of symbols (tuples of channel values for X's)
    p: np.ndarray
    env: str | None = None

    def __post_init__(self):
        if (self.p < 0).any() or abs(self.p.sum() - 1) > 1e-12:
            raise ContractViolation("probability table must be non-negative and sum to 1")

    def axis(self, var):
        try:
            return self.variables.index(var)
        except ValueError:
            raise ContractViolation(f"unknown variable {var!r}; table has {self.variables}")

    def marginal(self, keep):
        keep = list(keep)
        axes = [self.axis(v) for v in keep]
        drop = tuple(i for i in range(len(self.variables)) if i not in axes)
        m = self.p.sum(axis=drop) if drop else self.p
        remaining = [i for i in range(len(self.variables)) if i in axes]
        return np.moveaxis(m, [remaining.index(a) for a in axes], range(len(axes)))

    def conditional(self, target, given):
        """Mapping from given-symbol tuple to the conditional distribution of target."""
        given = _as_vars(given)
        joint = self.marginal([*given, target])
        out = {}
        for idx in itertools.product(*[range(s) for s in joint.shape[:-1]]):
            mass = joint[idx].sum()
            if mass > 0:
                key = tuple(self.alphabets[self.axis(g)][j] for g, j in zip(given, idx))
                out[key] = (joint[idx] / mass, mass)
        return out


def _as_vars(v):
    if v is None:
        return []
    if isinstance(v, str):
        return [v]
    return list(v)


def enumerate_joint(spec, env):
    """Exact per-position joint P_e(Y, Xs, Xu) by exhaustive enumeration."""
    if spec.mode != "discrete":
        raise UnsupportedMode("enumeration needs a discrete-mode spec (try spec.discretized())")
    if env not in spec.environments:
        raise ContractViolation(f"unknown environment {env!r}")
    stable = spec.stable_for(env)
    unstable = spec.unstable[env]
    k = spec.n_classes
    cells = k
    for em in (*stable, *unstable):
        cells *= len(em.values)
    if cells > MAX_TABLE_CELLS:
        raise ContractViolation(f"joint table would have {cells} cells (> {MAX_TABLE_CELLS})")

    def block(ems):
        # P(symbols | y) over the product alphabet, shape (K, prod A)
        probs = np.ones((k, 1))
        for em in ems:
            t = np.asarray(em.table, dtype=float)
            probs = (probs[:, :, None] * t[:, None, :]).reshape(k, -1)
        alphabet = list(itertools.product(*[em.values for em in ems]))
        return probs, alphabet

    ps, alpha_s = block(stable)
    pu, alpha_u = block(unstable)
    prior = np.asarray(spec.label_prior, dtype=float)
    joint = prior[:, None, None] * ps[:, :, None] * pu[:, None, :]
    return ProbabilityTable(("Y", "Xs", "Xu"), (list(range(k)), alpha_s, alpha_u), joint, env)


def _xlogx(p):
    p = np.asarray(p, dtype=float)
    out = np.zeros_like(p)
    nz = p > 0
    out[nz] = p[nz] * np.log(p[nz])
    return out


def entropy(table, var):
    return float(-_xlogx(table.marginal([var])).sum())


def conditional_entropy(table, target, given=None):
    """H(target | given) in nats; zero-probability cells contribute nothing."""
    given = _as_vars(given)
    for v in (target, *given):
        table.axis(v)
    if target in given:
        return 0.0
    joint = table.marginal([*given, target])
    if not given:
        return float(-_xlogx(joint).sum()) + 0.0
    marg = joint.sum(axis=-1)
    return float(_xlogx(marg).sum() - _xlogx(joint).sum()) + 0.0


def mutual_information(table, a, b, given=None):
    """I(a; b | given) = H(a | given) - H(a | b, given), in nats."""
    given = _as_vars(given)
    bs = _as_vars(b)
    return conditional_entropy(table, a, given) - conditional_entropy(table, a, [*bs, *given])


def _tv(p, q):
    return 0.5 * float(np.abs(p - q).sum())


def _max_conditional_tv(tables, given):
    worst = 0.0
    conds = [t.conditional("Y", given) for t in tables]
    for c1, c2 in itertools.combinations(conds, 2):
        for key in set(c1) & set(c2):
            worst = max(worst, _tv(c1[key][0], c2[key][0]))
    return worst


@dataclass
class AssumptionReport:
    results: dict  # "A1".."A4" -> {"passed": bool, "witness": float, "criterion": str}

    @property
    def passed(self):
        return all(r["passed"] for r in self.results.values())

    def failed(self):
        return [k for k, r in self.results.items() if not r["passed"]]

    def to_dict(self):
        return {k: dict(v) for k, v in self.results.items()}


A1_TOL = 1e-9
A2_TOL = 1e-6
INFO_TOL = 1e-12


def verify_assumptions(spec):
    """Check A1-A4 on the exact per-position tables of every environment."""
    if spec.mode != "discrete":
        raise UnsupportedMode("assumption checks need a discrete-mode spec")
    tables = [enumerate_joint(spec, e) for e in spec.environments]
    a1 = _max_conditional_tv(tables, "Xs")
    a2 = _max_conditional_tv(tables, "Xu")
    a3 = min(mutual_information(t, "Y", "Xu", given="Xs") for t in tables)
    a4 = min(mutual_information(t, "Y", "Xs") for t in tables)
    return AssumptionReport({
        "A1": {"passed": a1 < A1_TOL, "witness": a1,
               "criterion": "max TV between P_e(Y|Xs) across environments < 1e-9"},
        "A2": {"passed": a2 > A2_TOL, "witness": a2,
               "criterion": "max TV between P_e(Y|Xu) across environments > 1e-6"},
        "A3": {"passed": a3 > INFO_TOL, "witness": a3,
               "criterion": "min_e I_e(Y; Xu | Xs) > 0"},
        "A4": {"passed": a4 > INFO_TOL, "witness": a4, "criterion": "I(Y; Xs) > 0"},
    })


@dataclass
class BayesReport:
    h_y: float
    h_y_given_s: float
    h_y_given_s_per_env: dict
    h_joint: dict      # env -> H_e(Y | Xs, Xu)
    gap: dict          # env -> H(Y|Xs) - H_e(Y|Xs,Xu)
    info_u_given_s: dict  # env -> I_e(Y; Xu | Xs)

    @property
    def invariance_deviation(self):
        vals = list(self.h_y_given_s_per_env.values())
        return max(vals) - min(vals)

    def to_dict(self):
        return {"H(Y)": self.h_y, "H(Y|Xs)": self.h_y_given_s,
                "H_e(Y|Xs)": dict(self.h_y_given_s_per_env),
                "H_e(Y|Xs,Xu)": dict(self.h_joint), "gap": dict(self.gap),
                "I_e(Y;Xu|Xs)": dict(self.info_u_given_s)}


def bayes_risks(spec, check=True):
    """Stable-only and joint Bayes log-loss floors, per environment."""
    if check:
        report = verify_assumptions(spec)
        if not report.passed:
            name = report.failed()[0]
            raise AssumptionViolation(name, report.results[name]["witness"])
    tables = {e: enumerate_joint(spec, e) for e in spec.environments}
    h_s = {e: conditional_entropy(t, "Y", "Xs") for e, t in tables.items()}
    first = spec.environments[0]
    h_ys = h_s[first]
    joint = {e: conditional_entropy(t, "Y", ["Xs", "Xu"]) for e, t in tables.items()}
    info = {e: mutual_information(t, "Y", "Xu", given="Xs") for e, t in tables.items()}
    report = BayesReport(
        h_y=entropy(tables[first], "Y"),
        h_y_given_s=h_ys,
        h_y_given_s_per_env=h_s,
        h_joint=joint,
        gap={e: h_ys - joint[e] for e in tables},
        info_u_given_s=info,
    )
    if check and report.invariance_deviation > 1e-12:
        raise AssumptionViolation("A1", report.invariance_deviation,
                                  "H_e(Y|Xs) differs across environments")
    return report
