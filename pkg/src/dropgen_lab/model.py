"""Layered 1-D predictors with a partitioned first layer.

Input channels are ordered ``[unstable | stable]``; the first ``n_unstable``
kernel columns of ``layer0.weight`` form ``W_u`` and the rest form ``W_s``.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .kernels import conv1d_forward
from .errors import CheckpointError, ContractViolation

CHECKPOINT_FORMAT = "dropgen-lab/model"
CHECKPOINT_VERSION = 1


@dataclass(frozen=True)
class LayerSpec:
    out_channels: int
    kernel_size: int = 1
    activation: str = "relu"

    @property
    def kind(self):
        return "affine" if self.kernel_size == 1 else "conv"


@dataclass(frozen=True)
class Architecture:
    n_unstable: int
    n_stable: int
    layers: tuple

    def __post_init__(self):
        if self.n_unstable < 0 or self.n_stable < 0 or self.in_channels == 0:
            raise ContractViolation("architecture needs at least one input channel")
        if not self.layers:
            raise ContractViolation("architecture needs at least one layer")
        for spec in self.layers:
            if spec.kernel_size % 2 != 1 or spec.kernel_size < 1:
                raise ContractViolation("kernel sizes must be odd and positive")
            if spec.activation not in ad.ACTIVATIONS:
                raise ContractViolation(f"unknown activation {spec.activation!r}")
            if spec.out_channels < 1:
                raise ContractViolation("layers need at least one output channel")

    @property
    def in_channels(self):
        return self.n_unstable + self.n_stable

    @property
    def n_classes(self):
        return self.layers[-1].out_channels

    def param_shapes(self):
        shapes, c_in = {}, self.in_channels
        for i, spec in enumerate(self.layers):
            shapes[f"layer{i}.weight"] = (spec.out_channels, c_in, spec.kernel_size)
            shapes[f"layer{i}.bias"] = (spec.out_channels,)
            c_in = spec.out_channels
        return shapes

    def to_dict(self):
        return {
            "n_unstable": self.n_unstable,
            "n_stable": self.n_stable,
            "layers": [
                {"out_channels": s.out_channels, "kernel_size": s.kernel_size,
                 "activation": s.activation}
                for s in self.layers
            ],
        }

    @classmethod
    def from_dict(cls, d):
        return cls(int(d["n_unstable"]), int(d["n_stable"]),
                   tuple(LayerSpec(int(l["out_channels"]), int(l.get("kernel_size", 1)),
                                   l.get("activation", "relu")) for l in d["layers"]))


def mlp(n_unstable, n_stable, hidden=(16, 16), n_classes=2, kernel_size=1, activation="relu"):
    """Per-position network: hidden layers with ``activation`` then a linear head."""
    layers = [LayerSpec(h, kernel_size if i == 0 else 1, activation) for i, h in enumerate(hidden)]
    layers.append(LayerSpec(n_classes, 1 if hidden else kernel_size, "identity"))
    return Architecture(n_unstable, n_stable, tuple(layers))


class Model:
    def __init__(self, arch, params):
        shapes = arch.param_shapes()
        if set(params) != set(shapes):
            raise ContractViolation("parameter names do not match architecture")
        self.arch = arch
        self.params = {}
        for name, shape in shapes.items():
            arr = np.array(params[name], dtype=np.float64)
            if arr.shape != tuple(shape):
                raise ContractViolation(f"{name}: expected shape {shape}, got {arr.shape}")
            self.params[name] = arr

    @property
    def W_u(self):
        return self.params["layer0.weight"][:, : self.arch.n_unstable, :]

    @property
    def W_s(self):
        return self.params["layer0.weight"][:, self.arch.n_unstable:, :]

    def copy(self):
        return Model(self.arch, {k: v.copy() for k, v in self.params.items()})

    def parameter_count(self):
        return sum(v.size for v in self.params.values())

    def checksum(self):
        h = hashlib.sha256(json.dumps(self.arch.to_dict(), sort_keys=True).encode())
        for name in sorted(self.params):
            h.update(name.encode())
            h.update(np.ascontiguousarray(self.params[name]).tobytes())
        return h.hexdigest()

    def equals(self, other):
        return (self.arch == other.arch and
                all(np.array_equal(self.params[k], other.params[k]) and
                    self.params[k].tobytes() == other.params[k].tobytes()
                    for k in self.params))


def init_model(arch, seed=0):
    """Uniform(-1/sqrt(fan_in), 1/sqrt(fan_in)) for every weight and bias."""
    rng = np.random.default_rng(seed)
    params, c_in = {}, arch.in_channels
    for i, spec in enumerate(arch.layers):
        bound = 1.0 / np.sqrt(c_in * spec.kernel_size)
        params[f"layer{i}.weight"] = rng.uniform(-bound, bound,
                                                 (spec.out_channels, c_in, spec.kernel_size))
        params[f"layer{i}.bias"] = rng.uniform(-bound, bound, spec.out_channels)
        c_in = spec.out_channels
    return Model(arch, params)


def forward(model, batch, hidden_masks=None, *, _leaves=None):
    """Per-position class logits (B, K, L) for a (B, C, L) batch.

    ``hidden_masks`` optionally holds one constant (B, H, 1) multiplier per
    non-final layer, applied after its nonlinearity.
    """
    x = batch if isinstance(batch, ad.Tensor) else ad.Tensor(batch)
    if x.data.ndim != 3:
        raise ContractViolation(f"batch must be (B, C, L), got {x.shape}")
    if x.shape[1] != model.arch.in_channels:
        raise ContractViolation(
            f"batch has {x.shape[1]} channels, model expects {model.arch.in_channels}")
    leaves = {}
    for name, arr in model.params.items():
        leaves[name] = ad.Tensor(arr, requires_grad=True, name=name, check_finite=False)
    leaves["layer0.weight"].partition = model.arch.n_unstable
    if _leaves is not None:
        _leaves.update(leaves)
    h = x
    last = len(model.arch.layers) - 1
    for i, spec in enumerate(model.arch.layers):
        h = ad.conv1d(h, leaves[f"layer{i}.weight"], leaves[f"layer{i}.bias"])
        h = ad.ACTIVATIONS[spec.activation](h)
        if i < last and hidden_masks is not None and hidden_masks[i] is not None:
            h = ad.channel_mask(h, hidden_masks[i])
    return h


def kink_margin(model, batch):
    """Smallest |pre-activation| feeding a ReLU; inf if the model has none."""
    h, margin = np.ascontiguousarray(batch, dtype=np.float64), np.inf
    for i, spec in enumerate(model.arch.layers):
        z = conv1d_forward(h, model.params[f"layer{i}.weight"], model.params[f"layer{i}.bias"])
        if spec.activation == "relu":
            margin = min(margin, float(np.abs(z).min()))
        h = np.ascontiguousarray(ad.ACTIVATIONS[spec.activation](ad.Tensor(z, check_finite=False)).data)
    return margin


LOSSES = {
    "cross_entropy": ad.softmax_cross_entropy,
    "dice_ce": ad.dice_ce_loss,
    "squared": ad.squared_error,
}


def loss_fn(kind):
    try:
        return LOSSES[kind]
    except KeyError:
        raise ContractViolation(f"unknown loss {kind!r}; expected one of {sorted(LOSSES)}")


def evaluate_loss(model, inputs, targets, loss_kind="cross_entropy"):
    logits = forward(model, inputs)
    return loss_fn(loss_kind)(logits, targets)


def grad_check(model, batch, loss_kind="cross_entropy", epsilon=1e-6, grad_scale=1.0):
    """Max relative error between reverse-mode and central-difference gradients.

    ``batch`` is ``(inputs, targets)``. ``grad_scale`` multiplies the analytic
    gradient before comparison and exists for negative controls.
    """
    if epsilon <= 0:
        raise ContractViolation("epsilon must be positive")
    inputs, targets = batch
    fn = loss_fn(loss_kind)
    analytic = ad.backward(fn(forward(model, inputs), targets))
    worst = 0.0
    probe = model.copy()
    for name, arr in probe.params.items():
        a = analytic[name] * grad_scale
        flat = arr.reshape(-1)
        for j in range(flat.size):
            orig = flat[j]
            flat[j] = orig + epsilon
            up = fn(forward(probe, inputs), targets).item()
            flat[j] = orig - epsilon
            down = fn(forward(probe, inputs), targets).item()
            flat[j] = orig
            numeric = (up - down) / (2 * epsilon)
            ai = a.reshape(-1)[j]
            err = abs(ai - numeric) / max(abs(ai), abs(numeric), 1e-8)
            worst = max(worst, err)
    return worst


# ----------------------------------------------------------------- checkpoints

def _encode_array(arr):
    return {"shape": list(arr.shape), "data": [float(v) for v in np.asarray(arr).ravel()]}


def _decode_array(d, where):
    try:
        shape = tuple(int(s) for s in d["shape"])
        arr = np.array(d["data"], dtype=np.float64)
    except (KeyError, TypeError, ValueError) as exc:
        raise CheckpointError(f"malformed tensor at {where}: {exc}")
    if arr.size != int(np.prod(shape)):
        raise CheckpointError(f"tensor at {where} has {arr.size} values for shape {shape}")
    return arr.reshape(shape)


def model_to_dict(model, frozen=False):
    return {
        "format": CHECKPOINT_FORMAT,
        "version": CHECKPOINT_VERSION,
        "architecture": model.arch.to_dict(),
        "partition": model.arch.n_unstable,
        "frozen": bool(frozen),
        "params": {k: _encode_array(v) for k, v in model.params.items()},
    }


def model_from_dict(doc):
    if doc.get("format") != CHECKPOINT_FORMAT:
        raise CheckpointError(f"not a model checkpoint (format={doc.get('format')!r})")
    try:
        arch = Architecture.from_dict(doc["architecture"])
    except (KeyError, TypeError, ValueError) as exc:
        raise CheckpointError(f"bad architecture: {exc}")
    if doc.get("partition") != arch.n_unstable:
        raise CheckpointError("partition index disagrees with architecture")
    params = {k: _decode_array(v, f"params.{k}") for k, v in doc.get("params", {}).items()}
    try:
        return Model(arch, params)
    except ContractViolation as exc:
        raise CheckpointError(str(exc))


def write_json_atomic(path, doc):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_text(json.dumps(doc, indent=None, separators=(",", ":"), allow_nan=False))
    tmp.replace(path)


def read_json_document(path):
    text = Path(path).read_text()
    try:
        return json.loads(text)
    except json.JSONDecodeError as exc:
        raise CheckpointError(f"cannot parse {path}: {exc.msg}", offset=exc.pos) from None


def save_model(model, path, frozen=False):
    write_json_atomic(path, model_to_dict(model, frozen))


def load_model(path):
    return model_from_dict(read_json_document(path))
