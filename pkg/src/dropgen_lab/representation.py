"""Frozen stable-representation extractors, instance normalization, input
concatenation and channel-dropout masks.

Predictor inputs are always ordered ``[unstable | stable]``.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .errors import ContractViolation
from .model import LayerSpec, Architecture, Model, forward, init_model

NORM_EPS = 1e-8
EXTRACTOR_KINDS = ("identity", "frozen-random", "learned")


class Extractor:
    """Stand-in for a frozen foundation model: maps x_s (n_s, L) to (d, L).

    Parameters are copied and marked read-only at construction, so nothing
    downstream can update them in place.
    """

    def __init__(self, kind, in_channels, network=None, normalize=True):
        if kind not in EXTRACTOR_KINDS:
            raise ContractViolation(f"unknown extractor kind {kind!r}")
        if kind == "identity" and network is not None:
            raise ContractViolation("identity extractor takes no network")
        if kind != "identity" and network is None:
            raise ContractViolation(f"{kind} extractor needs a network")
        self.kind = kind
        self.in_channels = in_channels
        self.normalize = normalize
        self.network = None
        if network is not None:
            if network.arch.in_channels != in_channels:
                raise ContractViolation("extractor network input channels mismatch")
            self.network = network.copy()
            for arr in self.network.params.values():
                arr.setflags(write=False)
        self._checksum = self.checksum()

    @property
    def out_channels(self):
        if self.network is None:
            return self.in_channels
        return self.network.arch.layers[-1].out_channels

    def checksum(self):
        if self.network is None:
            return f"identity:{self.in_channels}"
        return self.network.checksum()

    def assert_frozen(self):
        if self.checksum() != self._checksum:
            raise ContractViolation("extractor parameters changed after freezing")

    def __call__(self, x):
        return extract(self, x)


def identity_extractor(n_stable, normalize=True):
    return Extractor("identity", n_stable, normalize=normalize)


def frozen_random_extractor(n_stable, d=4, hidden=8, seed=1234, normalize=True):
    """Fixed-seed two-layer tanh network applied position-wise."""
    arch = Architecture(0, n_stable, (LayerSpec(hidden, 1, "tanh"), LayerSpec(d, 1, "tanh")))
    return Extractor("frozen-random", n_stable, init_model(arch, seed), normalize)


def learned_extractor(train_x_s, d=4, noise_std=0.5, steps=300, lr=1e-2, batch_size=32,
                      seed=0, normalize=True):
    """Denoising encoder: learn x_s from x_s + noise, keep the tanh encoder, freeze.

    ``train_x_s`` is (N, n_s, L), pooled over training environments.
    """
    from .training import AdamW, cosine_lr

    train_x_s = np.asarray(train_x_s, dtype=np.float64)
    n_s = train_x_s.shape[1]
    arch = Architecture(0, n_s, (LayerSpec(d, 1, "tanh"), LayerSpec(n_s, 1, "identity")))
    net = init_model(arch, seed)
    opt = AdamW(net.params, weight_decay=1e-4)
    for step in range(steps):
        rng = np.random.default_rng([seed, step, 7])
        idx = rng.choice(len(train_x_s), size=min(batch_size, len(train_x_s)), replace=False)
        clean = train_x_s[idx]
        noisy = clean + noise_std * rng.standard_normal(clean.shape)
        loss = ad.squared_error(forward(net, noisy), clean)
        opt.step(net.params, ad.backward(loss), cosine_lr(step, steps, lr))
    encoder_arch = Architecture(0, n_s, (arch.layers[0],))
    encoder = Model(encoder_arch, {"layer0.weight": net.params["layer0.weight"],
                                   "layer0.bias": net.params["layer0.bias"]})
    return Extractor("learned", n_s, encoder, normalize)


def _batched(x):
    arr = np.asarray(x, dtype=np.float64)
    if arr.ndim == 2:
        return arr[None], True
    if arr.ndim == 3:
        return arr, False
    raise ContractViolation(f"expected (C, L) or (N, C, L), got shape {arr.shape}")


def extract(extractor, x):
    """Raw (unnormalized) representation of x_s; accepts (n_s, L) or (N, n_s, L)."""
    arr, single = _batched(x)
    if arr.shape[1] != extractor.in_channels:
        raise ContractViolation(
            f"extractor expects {extractor.in_channels} channels, got {arr.shape[1]}")
    if extractor.network is None:
        out = arr.copy()
    else:
        out = forward(extractor.network, arr).data
    return out[0] if single else out


def instance_normalize(features, eps=NORM_EPS):
    """Per-sample, per-channel zero mean and unit (population) std over positions.

    Channels with std below ``eps`` map to zeros.
    """
    arr, single = _batched(features)
    if arr.shape[-1] < 2:
        raise ContractViolation("instance normalization needs at least 2 positions")
    mean = arr.mean(axis=-1, keepdims=True)
    std = arr.std(axis=-1, keepdims=True)
    flat = std < eps
    out = (arr - mean) / np.where(flat, 1.0, std)
    out = np.where(flat, 0.0, out)
    return out[0] if single else out


def concat_channels(x_u, x_s):
    """Channel concatenation ``[x_u | x_s]`` for (C, L) or (N, C, L) inputs."""
    a = np.asarray(x_u, dtype=np.float64)
    b = np.asarray(x_s, dtype=np.float64)
    if a.ndim != b.ndim or a.shape[-1] != b.shape[-1] or a.shape[:-2] != b.shape[:-2]:
        raise ContractViolation(f"cannot concatenate shapes {a.shape} and {b.shape}")
    return np.concatenate([a, b], axis=-2)


def stable_features(extractor, x_s):
    feats = extract(extractor, x_s)
    return instance_normalize(feats) if extractor.normalize else feats


def predictor_inputs(extractor, x_u, x_s):
    """z = [x_u | normalized f(x_s)], the predictor's full input."""
    return concat_channels(x_u, stable_features(extractor, x_s))


# ----------------------------------------------------------------- masks

BLOCK_MASKS = ((1, 1), (1, 0), (0, 1))
MASK_MODES = ("two-block", "per-channel", "structured-block")


@dataclass(frozen=True)
class MaskDistribution:
    """Law of the channel-dropout mask over an input with ``n_unstable`` + ``n_stable`` channels.

    two-block: each block kept w.p. 1-p, resampled until not both dropped, or
      drawn from an explicit ``pi`` over (1,1), (1,0), (0,1).
    per-channel: each channel kept independently w.p. 1-p (standard channel
      dropout); ``guarantee_nonzero`` resamples all-dropped masks.
    structured-block: each block dropped independently w.p. p, (0,0) allowed
      unless ``guarantee_nonzero``.
    """

    mode: str = "per-channel"
    p: float = 0.5
    n_unstable: int = 1
    n_stable: int = 1
    rescale: bool = True
    guarantee_nonzero: bool = False
    pi: tuple | None = None

    def __post_init__(self):
        if self.mode not in MASK_MODES:
            raise ContractViolation(f"unknown mask mode {self.mode!r}")
        if not 0.0 <= self.p < 1.0:
            raise ContractViolation("p must lie in [0, 1)")
        if self.pi is not None:
            if self.mode != "two-block":
                raise ContractViolation("explicit pi is only meaningful in two-block mode")
            pi = np.asarray(self.pi, dtype=float)
            if pi.shape != (3,) or (pi < 0).any() or abs(pi.sum() - 1) > 1e-12:
                raise ContractViolation("pi must be three non-negative weights summing to 1")

    @property
    def n_channels(self):
        return self.n_unstable + self.n_stable

    @property
    def scale(self):
        return 1.0 / (1.0 - self.p) if self.rescale else 1.0

    @property
    def pis(self):
        """Block-level probabilities of (1,1), (1,0), (0,1) and the (0,0) remainder.

        For per-channel mode a block counts as kept if any of its channels is.
        """
        p, q = self.p, 1.0 - self.p
        if self.mode == "two-block":
            if self.pi is not None:
                w = tuple(float(v) for v in self.pi)
            else:
                z = 1.0 - p * p
                w = (q * q / z, q * p / z, p * q / z)
            return {(1, 1): w[0], (1, 0): w[1], (0, 1): w[2], (0, 0): 0.0}
        if self.mode == "structured-block":
            ku, ks = q, q
        else:
            ku = 1.0 - p ** self.n_unstable
            ks = 1.0 - p ** self.n_stable
        raw = {(1, 1): ku * ks, (1, 0): ku * (1 - ks), (0, 1): (1 - ku) * ks,
               (0, 0): (1 - ku) * (1 - ks)}
        if self.guarantee_nonzero:
            z = 1.0 - raw[(0, 0)]
            raw = {k: (v / z if k != (0, 0) else 0.0) for k, v in raw.items()}
        return raw

    def block_channels(self, mu):
        return np.array([mu[0]] * self.n_unstable + [mu[1]] * self.n_stable, dtype=np.float64)


@dataclass(frozen=True)
class Mask:
    channels: np.ndarray  # (C,) or (B, C) keep bits
    blocks: tuple | None = None


def sample_masks(dist, rng, batch):
    """(batch, C) keep bits drawn from ``dist``."""
    C, nu = dist.n_channels, dist.n_unstable
    if dist.p == 0.0 and dist.pi is None:
        return np.ones((batch, C))
    if dist.mode == "two-block" and dist.pi is not None:
        pick = rng.choice(3, size=batch, p=np.asarray(dist.pi))
        blocks = np.asarray(BLOCK_MASKS, dtype=np.float64)[pick]
        return np.repeat(blocks, [nu, dist.n_stable], axis=1)
    if dist.mode == "per-channel":
        draw = lambda m: (rng.random((m, C)) >= dist.p).astype(np.float64)  # noqa: E731
        exclude = dist.guarantee_nonzero
    else:
        def draw(m):
            blocks = (rng.random((m, 2)) >= dist.p).astype(np.float64)
            return np.repeat(blocks, [nu, dist.n_stable], axis=1)
        exclude = dist.mode == "two-block" or dist.guarantee_nonzero
    out = draw(batch)
    if exclude:
        bad = out.sum(axis=1) == 0
        while bad.any():
            out[bad] = draw(int(bad.sum()))
            bad = out.sum(axis=1) == 0
    return out


def sample_mask(dist, rng):
    bits = sample_masks(dist, rng, 1)[0]
    blocks = None
    if dist.mode != "per-channel":
        blocks = (int(bits[0]), int(bits[dist.n_unstable]))
    return Mask(bits, blocks)


def apply_channel_dropout(z, mask, dist=None, rescale=None):
    """Zero dropped channels of z (C, L) or (B, C, L); scale kept ones by 1/(1-p) if rescaling."""
    bits = mask.channels if isinstance(mask, Mask) else np.asarray(mask, dtype=np.float64)
    z = np.asarray(z, dtype=np.float64)
    if bits.shape[-1] != z.shape[-2]:
        raise ContractViolation(f"mask has {bits.shape[-1]} channels, input has {z.shape[-2]}")
    if rescale is None:
        rescale = dist.rescale if dist is not None else False
    factor = dist.scale if (dist is not None and rescale) else 1.0
    if factor != 1.0:
        bits = bits * factor
    return z * bits[..., None]


def block_mask(mu, n_unstable, n_stable):
    """Channel keep bits for a fixed block mask such as (0, 1)."""
    return np.array([mu[0]] * n_unstable + [mu[1]] * n_stable, dtype=np.float64)


# ----------------------------------------------------------------- checkpoints

def extractor_to_dict(extractor):
    """Model checkpoint document with ``frozen: true`` plus the extractor kind."""
    from .model import model_to_dict
    doc = {"extractor_kind": extractor.kind, "in_channels": extractor.in_channels,
           "normalize": extractor.normalize}
    if extractor.network is not None:
        doc.update(model_to_dict(extractor.network, frozen=True))
    else:
        doc.update({"format": "dropgen-lab/model", "frozen": True})
    return doc


def extractor_from_dict(doc):
    from .errors import CheckpointError
    from .model import model_from_dict
    try:
        kind = doc["extractor_kind"]
        network = None if kind == "identity" else model_from_dict(doc)
        return Extractor(kind, int(doc["in_channels"]), network, bool(doc.get("normalize", True)))
    except (KeyError, TypeError) as exc:
        raise CheckpointError(f"malformed extractor checkpoint: {exc}")


def save_extractor(extractor, path):
    from .model import write_json_atomic
    write_json_atomic(path, extractor_to_dict(extractor))


def load_extractor(path):
    from .model import read_json_document
    return extractor_from_dict(read_json_document(path))
