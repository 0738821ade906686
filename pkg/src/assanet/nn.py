"""Dense layer primitives with hand-written reverse-mode gradients.

Everything runs in float32 on numpy. There is no expression graph: each
operation caches exactly what its backward pass needs, and composite blocks
chain those caches explicitly. A :class:`GradTape` is just an ordered stack
of backward closures for the common sequential case.

Conventions
-----------
* Activations are row-major: input ``x`` has shape ``(rows, channels)`` and
  every row is an independent sample for batch-norm purposes.
* Parameter gradients are *accumulated* into ``layer.grads`` (additive across
  a batch); call :meth:`MlpLayer.zero_grads` between optimizer steps.
* Batch norm uses biased variance both for normalization and for the running
  estimate, momentum 0.1, eps 1e-5. Training mode with fewer than two rows
  raises :class:`DegenerateBatchError`.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field
from typing import Callable, Iterator

import numpy as np

DTYPE = np.float32

BN_MOMENTUM = 0.1
BN_EPS = 1e-5

CHECKPOINT_MAGIC = b"ASSACKPT"
CHECKPOINT_VERSION = 1


class TapeError(RuntimeError):
    """Backward requested on a tape with no recorded forward."""


class DegenerateBatchError(ValueError):
    """Batch statistics requested over fewer than two rows."""


class CheckpointError(ValueError):
    """Checkpoint bytes do not match the documented layout."""


class GradTape:
    """Ordered record of backward closures for one forward pass.

    Each closure maps the upstream gradient to the gradient w.r.t. its own
    input, stashing parameter gradients on the owning layer as a side effect.
    ``backward`` consumes the tape, so a second call (or a call before any
    forward was recorded) raises :class:`TapeError`.
    """

    def __init__(self) -> None:
        self._stack: list[Callable[[np.ndarray], np.ndarray]] = []

    def record(self, backward_fn: Callable[[np.ndarray], np.ndarray]) -> None:
        self._stack.append(backward_fn)

    def __len__(self) -> int:
        return len(self._stack)

    def backward(self, upstream: np.ndarray) -> np.ndarray:
        if not self._stack:
            raise TapeError("backward called on an empty tape (no recorded forward)")
        grad = upstream
        while self._stack:
            grad = self._stack.pop()(grad)
        return grad


@dataclass
class MlpLayer:
    """Fused linear -> batch norm -> activation layer.

    ``use_bn=False`` drops the normalization entirely (used for shortcut
    projections and classifier heads). ``activation`` is ``"relu"`` or
    ``"none"``.
    """

    weight: np.ndarray          # (out, in)
    bias: np.ndarray            # (out,)
    activation: str = "relu"
    use_bn: bool = True
    gamma: np.ndarray | None = None          # (out,)
    beta: np.ndarray | None = None           # (out,)
    running_mean: np.ndarray | None = None   # (out,)
    running_var: np.ndarray | None = None    # (out,)
    bn_momentum: float = BN_MOMENTUM
    bn_eps: float = BN_EPS
    grads: dict[str, np.ndarray] = field(default_factory=dict)

    def __post_init__(self) -> None:
        if self.weight.ndim != 2:
            raise ValueError(f"weight must be (out, in), got shape {self.weight.shape}")
        if self.bias.shape != (self.weight.shape[0],):
            raise ValueError("bias shape does not match weight rows")
        if self.activation not in ("relu", "none"):
            raise ValueError(f"unknown activation {self.activation!r}")
        if self.use_bn and self.gamma is None:
            out = self.weight.shape[0]
            self.gamma = np.ones(out, dtype=DTYPE)
            self.beta = np.zeros(out, dtype=DTYPE)
            self.running_mean = np.zeros(out, dtype=DTYPE)
            self.running_var = np.ones(out, dtype=DTYPE)
        self.zero_grads()

    @property
    def in_channels(self) -> int:
        return self.weight.shape[1]

    @property
    def out_channels(self) -> int:
        return self.weight.shape[0]

    def parameters(self) -> dict[str, np.ndarray]:
        """Trainable parameters, keyed for optimizers and checkpoints."""
        params = {"weight": self.weight, "bias": self.bias}
        if self.use_bn:
            params["gamma"] = self.gamma
            params["beta"] = self.beta
        return params

    def state_arrays(self) -> dict[str, np.ndarray]:
        """Parameters plus running statistics, for serialization."""
        arrays = dict(self.parameters())
        if self.use_bn:
            arrays["running_mean"] = self.running_mean
            arrays["running_var"] = self.running_var
        return arrays

    def zero_grads(self) -> None:
        self.grads = {k: np.zeros_like(v) for k, v in self.parameters().items()}

    def forward(self, x: np.ndarray, training: bool = False) -> tuple[np.ndarray, dict]:
        """Run the layer and return ``(output, cache)`` for :meth:`backward`."""
        if x.ndim != 2 or x.shape[1] != self.in_channels:
            raise ValueError(
                f"expected input (rows, {self.in_channels}), got shape {x.shape}"
            )
        x = np.ascontiguousarray(x, dtype=DTYPE)
        z = x @ self.weight.T + self.bias  # (rows, out)
        cache: dict = {"x": x, "training": training}
        if self.use_bn:
            if training:
                if z.shape[0] < 2:
                    raise DegenerateBatchError(
                        f"batch norm needs >= 2 rows in training mode, got {z.shape[0]}"
                    )
                mean = z.mean(axis=0)
                var = z.var(axis=0)  # biased
                inv_std = 1.0 / np.sqrt(var + self.bn_eps)
                z_hat = (z - mean) * inv_std
                m = self.bn_momentum
                self.running_mean[...] = (1 - m) * self.running_mean + m * mean
                self.running_var[...] = (1 - m) * self.running_var + m * var
            else:
                inv_std = 1.0 / np.sqrt(self.running_var + self.bn_eps)
                z_hat = (z - self.running_mean) * inv_std
            h = self.gamma * z_hat + self.beta
            cache["z_hat"] = z_hat
            cache["inv_std"] = inv_std.astype(DTYPE)
        else:
            h = z
        if self.activation == "relu":
            h = np.maximum(h, 0)
            cache["act_mask"] = h > 0
        return h.astype(DTYPE, copy=False), cache

    def backward(self, cache: dict, upstream: np.ndarray) -> np.ndarray:
        """Accumulate parameter grads, return the gradient w.r.t. the input."""
        dy = upstream.astype(DTYPE, copy=False)
        if self.activation == "relu":
            dy = dy * cache["act_mask"]
        if self.use_bn:
            z_hat = cache["z_hat"]
            inv_std = cache["inv_std"]
            self.grads["gamma"] += (dy * z_hat).sum(axis=0)
            self.grads["beta"] += dy.sum(axis=0)
            dz_hat = dy * self.gamma
            if cache["training"]:
                n = z_hat.shape[0]
                dz = (inv_std / n) * (
                    n * dz_hat
                    - dz_hat.sum(axis=0)
                    - z_hat * (dz_hat * z_hat).sum(axis=0)
                )
            else:
                dz = dz_hat * inv_std
        else:
            dz = dy
        x = cache["x"]
        self.grads["weight"] += dz.T @ x
        self.grads["bias"] += dz.sum(axis=0)
        return (dz @ self.weight).astype(DTYPE, copy=False)


def init_mlp_layer(
    in_ch: int,
    out_ch: int,
    rng: np.random.Generator,
    activation: str = "relu",
    use_bn: bool = True,
) -> MlpLayer:
    """Fan-in uniform init: W ~ U(-b, b) with b = sqrt(6 / in_ch), zero bias."""
    if in_ch < 1 or out_ch < 1:
        raise ValueError(f"channel counts must be positive, got {in_ch}->{out_ch}")
    bound = float(np.sqrt(6.0 / in_ch))
    weight = rng.uniform(-bound, bound, size=(out_ch, in_ch)).astype(DTYPE)
    bias = np.zeros(out_ch, dtype=DTYPE)
    return MlpLayer(weight=weight, bias=bias, activation=activation, use_bn=use_bn)


def mlp_forward(
    layer: MlpLayer,
    x: np.ndarray,
    training: bool = False,
    tape: GradTape | None = None,
) -> np.ndarray:
    """Functional wrapper around :meth:`MlpLayer.forward`.

    When ``tape`` is given the matching backward closure is recorded so a
    stack of layers can be differentiated with one ``tape.backward`` call.
    """
    out, cache = layer.forward(x, training=training)
    if tape is not None:
        tape.record(lambda g, _l=layer, _c=cache: _l.backward(_c, g))
    return out


def mlp_backward(tape: GradTape, upstream: np.ndarray) -> np.ndarray:
    """Unwind a tape, returning the gradient w.r.t. the first recorded input."""
    return tape.backward(upstream)


class MlpStack:
    """Sequence of :class:`MlpLayer` applied in order over point rows."""

    def __init__(self, layers: list[MlpLayer]):
        self.layers = layers

    @property
    def out_channels(self) -> int:
        return self.layers[-1].out_channels

    def forward(self, x: np.ndarray, training: bool = False) -> tuple[np.ndarray, list[dict]]:
        caches = []
        for layer in self.layers:
            x, cache = layer.forward(x, training=training)
            caches.append(cache)
        return x, caches

    def backward(self, caches: list[dict], upstream: np.ndarray) -> np.ndarray:
        grad = upstream
        for layer, cache in zip(reversed(self.layers), reversed(caches)):
            grad = layer.backward(cache, grad)
        return grad

    def __iter__(self) -> Iterator[MlpLayer]:
        return iter(self.layers)

    def __len__(self) -> int:
        return len(self.layers)


def build_mlp_stack(
    widths: list[int],
    rng: np.random.Generator,
    final_activation: str = "relu",
) -> MlpStack:
    """Build layers for ``widths = [in, h1, ..., out]``.

    All layers are linear+BN+ReLU except the last, whose activation is
    ``final_activation`` (still with BN).
    """
    if len(widths) < 2:
        raise ValueError("need at least an input and an output width")
    layers = []
    for i in range(len(widths) - 1):
        act = "relu" if i < len(widths) - 2 else final_activation
        layers.append(init_mlp_layer(widths[i], widths[i + 1], rng, activation=act))
    return MlpStack(layers)


def sgd_step(
    params: dict[str, np.ndarray],
    grads: dict[str, np.ndarray],
    state: dict[str, np.ndarray],
    lr: float,
    momentum: float = 0.98,
    weight_decay: float = 0.001,
) -> None:
    """One SGD update with classical momentum, in place.

    v <- momentum * v + grad + weight_decay * p;  p <- p - lr * v.
    ``state`` maps param name to its velocity buffer and is created lazily,
    so it persists across calls by construction. ``lr=0`` is a valid no-op
    (velocities still accumulate); a negative rate is rejected.
    """
    if lr < 0:
        raise ValueError(f"learning rate must be >= 0, got {lr}")
    for name, p in params.items():
        g = grads[name].astype(DTYPE, copy=False)
        if weight_decay:
            g = g + weight_decay * p
        if momentum:
            v = state.get(name)
            if v is None:
                v = np.zeros_like(p)
                state[name] = v
            v *= momentum
            v += g
            g = v
        p -= lr * g


class SgdOptimizer:
    """Momentum SGD over a list of (prefix, layer) pairs."""

    def __init__(
        self,
        named_layers: list[tuple[str, MlpLayer]],
        lr: float,
        momentum: float = 0.98,
        weight_decay: float = 0.001,
    ):
        self.named_layers = named_layers
        self.lr = lr
        self.momentum = momentum
        self.weight_decay = weight_decay
        self._state: dict[str, np.ndarray] = {}

    def zero_grads(self) -> None:
        for _, layer in self.named_layers:
            layer.zero_grads()

    def step(self, grad_scale: float = 1.0) -> None:
        for prefix, layer in self.named_layers:
            params = layer.parameters()
            grads = layer.grads
            if grad_scale != 1.0:
                grads = {k: v * DTYPE(grad_scale) for k, v in grads.items()}
            scoped_params = {f"{prefix}.{k}": v for k, v in params.items()}
            scoped_grads = {f"{prefix}.{k}": grads[k] for k in params}
            sgd_step(
                scoped_params,
                scoped_grads,
                self._state,
                lr=self.lr,
                momentum=self.momentum,
                weight_decay=self.weight_decay,
            )


def softmax_cross_entropy(
    logits: np.ndarray, label: int
) -> tuple[float, np.ndarray]:
    """Return (loss, dloss/dlogits) for a single sample's logits (C,)."""
    z = logits.astype(np.float64)
    z = z - z.max()
    e = np.exp(z)
    probs = e / e.sum()
    loss = float(-np.log(max(probs[label], 1e-30)))
    dlogits = probs.astype(DTYPE)
    dlogits[label] -= 1.0
    return loss, dlogits


def finite_difference_gradient(
    f: Callable[[np.ndarray], float], x: np.ndarray, h: float = 1e-3
) -> np.ndarray:
    """Central-difference gradient of scalar ``f`` at ``x``, entry by entry."""
    grad = np.zeros(x.shape, dtype=np.float64)
    flat = x.reshape(-1)
    gflat = grad.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        hi = f(x)
        flat[i] = orig - h
        lo = f(x)
        flat[i] = orig
        gflat[i] = (hi - lo) / (2.0 * h)
    return grad


def save_checkpoint(path: str, arrays: dict[str, np.ndarray], meta: dict) -> None:
    """Write arrays + JSON metadata in the documented binary layout.

    Layout: 8-byte magic ``ASSACKPT``, u32 LE version, u32 LE header length,
    UTF-8 JSON header, then each array's raw float32 little-endian row-major
    bytes in header order. Round trips bit-exactly (NaN payloads included).
    """
    entries = []
    buffers = []
    for name, arr in arrays.items():
        arr = np.asarray(arr, dtype=DTYPE)
        if arr.dtype.byteorder == ">":
            arr = arr.astype("<f4")
        entries.append({"name": name, "shape": list(arr.shape)})
        buffers.append(arr.tobytes())  # row-major regardless of memory order
    header = json.dumps({"meta": meta, "arrays": entries}).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(struct.pack("<II", CHECKPOINT_VERSION, len(header)))
        fh.write(header)
        for buf in buffers:
            fh.write(buf)


def load_checkpoint(path: str) -> tuple[dict[str, np.ndarray], dict]:
    """Inverse of :func:`save_checkpoint`. Raises CheckpointError on damage."""
    with open(path, "rb") as fh:
        blob = fh.read()
    if len(blob) < len(CHECKPOINT_MAGIC) + 8:
        raise CheckpointError("checkpoint truncated before header")
    if blob[: len(CHECKPOINT_MAGIC)] != CHECKPOINT_MAGIC:
        raise CheckpointError("bad checkpoint magic")
    off = len(CHECKPOINT_MAGIC)
    version, header_len = struct.unpack_from("<II", blob, off)
    off += 8
    if version != CHECKPOINT_VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version}")
    try:
        header = json.loads(blob[off : off + header_len].decode("utf-8"))
        entries = header["arrays"]
        meta = header["meta"]
    except (ValueError, KeyError) as exc:
        raise CheckpointError(f"unreadable checkpoint header: {exc}") from exc
    off += header_len
    arrays: dict[str, np.ndarray] = {}
    for entry in entries:
        shape = tuple(entry["shape"])
        count = int(np.prod(shape)) if shape else 1
        nbytes = count * 4
        if off + nbytes > len(blob):
            raise CheckpointError(f"checkpoint truncated inside array {entry['name']!r}")
        arr = np.frombuffer(blob, dtype="<f4", count=count, offset=off).reshape(shape)
        arrays[entry["name"]] = arr.copy()
        off += nbytes
    if off != len(blob):
        raise CheckpointError("trailing bytes after final array")
    return arrays, meta
