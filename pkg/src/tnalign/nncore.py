"""Dense ReLU networks on a flat parameter vector, plus masked SGD.

Parameter layout (the ``ParamVector``) is fixed: for each layer l = 1..L,
the weight matrix W_l of shape (J_l, J_{l-1}) in row-major order followed
by the bias b_l of length J_l. ``LayeredNetwork.weights`` and ``.biases``
are views into that single buffer, so flatten/unflatten are copies and
nothing else.
"""
from __future__ import annotations

import hashlib
import io
import json
import zipfile
from dataclasses import dataclass, field
from typing import Literal, Optional, Sequence

import numpy as np

from .errors import ConfigError, DimensionError, DivergenceError, NumericError

LossKind = Literal["mse", "softmax_ce"]

_ACTIVATIONS = ("relu",)
_HEADS = ("linear", "softmax_ce_logits")
_INITS = ("kaiming_uniform",)


def derive_seed(base_seed: int, *keys: int) -> int:
    """Independent 64-bit seed for the stream identified by ``(base_seed, *keys)``."""
    ss = np.random.SeedSequence([int(base_seed) & (2**64 - 1), *[int(k) for k in keys]])
    return int(ss.generate_state(1, dtype=np.uint64)[0])


@dataclass(frozen=True)
class NetworkSpec:
    layer_widths: tuple
    seed: int = 0
    activation: str = "relu"
    output_head: str = "softmax_ce_logits"
    init: str = "kaiming_uniform"

    def __post_init__(self):
        widths = tuple(int(w) for w in self.layer_widths)
        object.__setattr__(self, "layer_widths", widths)
        if len(widths) < 2:
            raise ConfigError(f"need at least input and output widths, got {widths}")
        if any(w < 1 for w in widths):
            raise ConfigError(f"all layer widths must be >= 1, got {widths}")
        if self.activation not in _ACTIVATIONS:
            raise ConfigError(f"unknown activation {self.activation!r}")
        if self.output_head not in _HEADS:
            raise ConfigError(f"unknown output head {self.output_head!r}")
        if self.init not in _INITS:
            raise ConfigError(f"unknown init {self.init!r}")

    @property
    def num_layers(self) -> int:
        return len(self.layer_widths) - 1

    @property
    def hidden_widths(self) -> tuple:
        return self.layer_widths[1:-1]

    @property
    def num_params(self) -> int:
        w = self.layer_widths
        return sum(w[i] * w[i - 1] + w[i] for i in range(1, len(w)))

    @property
    def default_loss(self) -> str:
        return "mse" if self.output_head == "linear" else "softmax_ce"

    def layer_slices(self):
        """Per layer ``(weight_slice, bias_slice)`` into the flat vector."""
        out = []
        off = 0
        w = self.layer_widths
        for i in range(1, len(w)):
            nw = w[i] * w[i - 1]
            out.append((slice(off, off + nw), slice(off + nw, off + nw + w[i])))
            off += nw + w[i]
        return out

    def architecture_hash(self) -> str:
        """SHA-256 of the architecture (seed excluded): masks and checkpoints are
        compatible across replicas that differ only in init seed."""
        doc = {
            "layer_widths": list(self.layer_widths),
            "activation": self.activation,
            "output_head": self.output_head,
        }
        return hashlib.sha256(json.dumps(doc, sort_keys=True).encode()).hexdigest()

    def to_dict(self) -> dict:
        return {
            "layer_widths": list(self.layer_widths),
            "seed": self.seed,
            "activation": self.activation,
            "output_head": self.output_head,
            "init": self.init,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "NetworkSpec":
        return cls(**d)


class LayeredNetwork:
    """A dense network whose parameters live in one contiguous float64 vector."""

    def __init__(self, spec: NetworkSpec, params: np.ndarray):
        params = np.asarray(params)
        if params.ndim != 1 or params.shape[0] != spec.num_params:
            raise DimensionError(
                f"parameter vector length {params.shape} does not match d={spec.num_params}"
            )
        if params.dtype != np.float64:
            params = params.astype(np.float64)
        self.spec = spec
        self.params = params
        w = spec.layer_widths
        self.weights = []
        self.biases = []
        for i, (ws, bs) in enumerate(spec.layer_slices(), start=1):
            self.weights.append(params[ws].reshape(w[i], w[i - 1]))
            self.biases.append(params[bs])

    def flatten(self) -> np.ndarray:
        return self.params.copy()

    def copy(self) -> "LayeredNetwork":
        return LayeredNetwork(self.spec, self.params.copy())

    def __repr__(self):
        return f"LayeredNetwork(widths={list(self.spec.layer_widths)}, d={self.spec.num_params})"


def unflatten(spec: NetworkSpec, vector: np.ndarray) -> LayeredNetwork:
    return LayeredNetwork(spec, np.array(vector, dtype=np.float64, copy=True))


def build_network(spec: NetworkSpec) -> LayeredNetwork:
    """Kaiming-uniform (fan-in, ReLU gain) weights and zero biases, drawn from ``spec.seed``."""
    rng = np.random.default_rng(spec.seed)
    params = np.zeros(spec.num_params)
    w = spec.layer_widths
    for i, (ws, _) in enumerate(spec.layer_slices(), start=1):
        bound = np.sqrt(6.0 / w[i - 1])
        params[ws] = rng.uniform(-bound, bound, size=w[i] * w[i - 1])
    return LayeredNetwork(spec, params)


@dataclass
class Dataset:
    """Inputs ``(n, J_0)`` with integer class targets ``(n,)`` or real targets ``(n, J_L)``."""

    inputs: np.ndarray
    targets: np.ndarray

    def __post_init__(self):
        self.inputs = np.asarray(self.inputs, dtype=np.float64)
        if self.inputs.ndim == 1:
            self.inputs = self.inputs[:, None]
        if self.inputs.ndim != 2:
            raise DimensionError(f"inputs must be 2-D, got shape {self.inputs.shape}")
        t = np.asarray(self.targets)
        if t.ndim == 1 and t.dtype.kind in "iu":
            t = t.astype(np.int64)
            if t.size and t.min() < 0:
                raise ConfigError("class targets must be non-negative")
        else:
            t = t.astype(np.float64)
            if t.ndim == 1:
                t = t[:, None]
        self.targets = t
        if self.inputs.shape[0] != self.targets.shape[0]:
            raise DimensionError(
                f"{self.inputs.shape[0]} input rows but {self.targets.shape[0]} targets"
            )

    @property
    def is_classification(self) -> bool:
        return self.targets.ndim == 1

    def __len__(self):
        return self.inputs.shape[0]

    def subset(self, idx) -> "Dataset":
        return Dataset(self.inputs[idx], self.targets[idx])


Batch = Dataset


@dataclass
class Metrics:
    loss: float
    accuracy: Optional[float] = None


@dataclass
class OptimizerState:
    """SGD hyperparameters plus the momentum buffer (lazily zero-initialized)."""

    lr: float
    momentum: float = 0.0
    weight_decay: float = 0.0
    momentum_buffer: Optional[np.ndarray] = field(default=None, repr=False)

    def __post_init__(self):
        if not self.lr >= 0:
            raise ConfigError(f"lr must be non-negative, got {self.lr}")
        if not 0.0 <= self.momentum < 1.0:
            raise ConfigError(f"momentum must lie in [0, 1), got {self.momentum}")
        if not self.weight_decay >= 0:
            raise ConfigError(f"weight_decay must be non-negative, got {self.weight_decay}")


def _as_inputs(net, x):
    if isinstance(x, Dataset):
        x = x.inputs
    x = np.asarray(x, dtype=np.float64)
    if x.ndim == 1:
        x = x[None, :]
    if x.shape[1] != net.spec.layer_widths[0]:
        raise DimensionError(
            f"input width {x.shape[1]} != network input width {net.spec.layer_widths[0]}"
        )
    return x


def _forward_trace(net, x, check=True):
    """Pre-activations of every layer (last one is the output)."""
    pre = []
    a = x
    last = net.spec.num_layers - 1
    for i, (W, b) in enumerate(zip(net.weights, net.biases)):
        with np.errstate(invalid="ignore", over="ignore"):
            z = a @ W.T
            z += b
        if check and not np.isfinite(z).all():
            raise NumericError(f"non-finite activation in layer {i + 1}", layer=i + 1)
        pre.append(z)
        a = np.maximum(z, 0.0) if i < last else z
    return pre


def forward(net: LayeredNetwork, batch) -> np.ndarray:
    """Outputs ``(n, J_L)``: ReLU hidden layers, linear output (logits)."""
    return _forward_trace(net, _as_inputs(net, batch))[-1]


def _loss_and_output_grad(out, targets, loss):
    n = out.shape[0]
    if loss == "mse":
        if targets.ndim != 2 or targets.shape != out.shape:
            raise DimensionError(f"mse needs real targets of shape {out.shape}")
        diff = out - targets
        return float(np.mean(diff * diff)), (2.0 / diff.size) * diff
    if loss == "softmax_ce":
        if targets.ndim != 1:
            raise ConfigError("softmax_ce needs integer class targets")
        if targets.size and targets.max() >= out.shape[1]:
            raise ConfigError("class target exceeds output width")
        shifted = out - out.max(axis=1, keepdims=True)
        expz = np.exp(shifted)
        sums = expz.sum(axis=1, keepdims=True)
        logp = shifted - np.log(sums)
        rows = np.arange(n)
        value = float(-logp[rows, targets].mean())
        g = expz / sums
        g[rows, targets] -= 1.0
        g /= n
        return value, g
    raise ConfigError(f"unknown loss {loss!r}")


def loss_and_grad(net: LayeredNetwork, batch: Dataset, loss: Optional[str] = None):
    """Mean loss over the batch and its gradient in canonical layout."""
    value, grad, _ = _backprop(net, batch, loss or net.spec.default_loss)
    return value, grad


def _backprop(net, batch, loss):
    x = _as_inputs(net, batch)
    pre = _forward_trace(net, x)
    value, delta = _loss_and_output_grad(pre[-1], batch.targets, loss)
    grad = np.empty(net.spec.num_params)
    slices = net.spec.layer_slices()
    w = net.spec.layer_widths
    for i in range(net.spec.num_layers - 1, -1, -1):
        a_prev = x if i == 0 else np.maximum(pre[i - 1], 0.0)
        ws, bs = slices[i]
        np.matmul(delta.T, a_prev, out=grad[ws].reshape(w[i + 1], w[i]))
        grad[bs] = delta.sum(axis=0)
        if i > 0:
            delta = delta @ net.weights[i]
            delta *= pre[i - 1] > 0
    return value, grad, pre[-1]


def _mask_bits(mask):
    if mask is None:
        return None
    return np.asarray(getattr(mask, "bits", mask))


def sgd_step(net: LayeredNetwork, grad: np.ndarray, state: OptimizerState, mask=None):
    """One SGD update in place. The mask multiplies the *composed* update
    (after weight decay and momentum), so masked coordinates never move."""
    w = net.params
    if grad.shape != w.shape:
        raise DimensionError(f"gradient length {grad.shape} != parameter length {w.shape}")
    bits = _mask_bits(mask)
    if bits is not None and bits.shape != w.shape:
        raise DimensionError(f"mask length {bits.shape} != parameter length {w.shape}")
    if state.momentum_buffer is None:
        state.momentum_buffer = np.zeros_like(w)
    elif state.momentum_buffer.shape != w.shape:
        raise DimensionError("momentum buffer length does not match parameters")
    v = state.momentum_buffer
    eff = grad + state.weight_decay * w if state.weight_decay else grad
    v *= state.momentum
    v += eff
    update = state.lr * v
    if bits is not None:
        update *= bits
    w -= update
    return net, state


def _predict(out):
    # np.argmax returns the first maximal index: ties go to the lowest class
    return np.argmax(out, axis=1)


def evaluate(net: LayeredNetwork, data: Dataset, loss: Optional[str] = None,
             chunk_size: int = 8192) -> Metrics:
    if len(data) == 0:
        raise ConfigError("cannot evaluate on an empty dataset")
    loss = loss or net.spec.default_loss
    n = len(data)
    total = 0.0
    correct = 0
    for start in range(0, n, chunk_size):
        part = data.subset(slice(start, start + chunk_size))
        out = forward(net, part)
        value, _ = _loss_and_output_grad(out, part.targets, loss)
        total += value * len(part)
        if data.is_classification:
            correct += int(np.count_nonzero(_predict(out) == part.targets))
    acc = correct / n if data.is_classification else None
    return Metrics(loss=total / n, accuracy=acc)


def train(net: LayeredNetwork, data: Dataset, epochs: int, batch_size: int,
          state: OptimizerState, mask=None, shuffle_seed: int = 0,
          loss: Optional[str] = None):
    """Mini-batch SGD in place. Returns ``(net, history)``.

    Each epoch draws a full permutation from a generator seeded once with
    ``shuffle_seed``; the final partial batch is kept. ``history`` holds the
    running (pre-update) batch metrics of each epoch, weighted by batch size.
    """
    if epochs < 0:
        raise ConfigError(f"epochs must be >= 0, got {epochs}")
    if batch_size < 1:
        raise ConfigError(f"batch_size must be >= 1, got {batch_size}")
    if len(data) == 0:
        raise ConfigError("cannot train on an empty dataset")
    loss = loss or net.spec.default_loss
    rng = np.random.default_rng(shuffle_seed)
    n = len(data)
    history = []
    for epoch in range(epochs):
        order = rng.permutation(n)
        total = 0.0
        correct = 0
        for start in range(0, n, batch_size):
            batch = data.subset(order[start:start + batch_size])
            try:
                value, grad, out = _backprop(net, batch, loss)
            except NumericError as exc:
                raise DivergenceError(f"diverged in epoch {epoch}: {exc}",
                                      epoch=epoch, layer=exc.layer) from exc
            if not np.isfinite(value):
                raise DivergenceError(f"loss became {value} in epoch {epoch}", epoch=epoch)
            total += value * len(batch)
            if data.is_classification:
                correct += int(np.count_nonzero(_predict(out) == batch.targets))
            sgd_step(net, grad, state, mask)
        history.append(Metrics(loss=total / n,
                               accuracy=correct / n if data.is_classification else None))
    return net, history


def count_params(widths: Sequence[int]) -> int:
    return NetworkSpec(tuple(widths)).num_params


# fixed zip timestamp so identical networks give byte-identical checkpoints
_ZIP_EPOCH = (1980, 1, 1, 0, 0, 0)


def save_checkpoint(path, net: LayeredNetwork, extra: Optional[dict] = None) -> None:
    """``.npz``-compatible archive holding ``params`` and the network spec as JSON."""
    meta = {"spec": net.spec.to_dict(), **(extra or {})}
    members = {
        "params.npy": net.params,
        "meta.npy": np.frombuffer(json.dumps(meta, sort_keys=True).encode(), dtype=np.uint8),
    }
    with zipfile.ZipFile(path, "w", zipfile.ZIP_STORED) as zf:
        for name, arr in members.items():
            buf = io.BytesIO()
            np.lib.format.write_array(buf, np.ascontiguousarray(arr), allow_pickle=False)
            zf.writestr(zipfile.ZipInfo(name, date_time=_ZIP_EPOCH), buf.getvalue())


def load_checkpoint(path):
    """Returns ``(network, meta)``."""
    with np.load(path, allow_pickle=False) as z:
        meta = json.loads(z["meta"].tobytes().decode())
        params = z["params"]
    spec = NetworkSpec.from_dict(meta["spec"])
    return LayeredNetwork(spec, params), meta
