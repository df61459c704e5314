"""Fully connected networks with ReLU hidden layers, their backward pass,
an Adam optimizer over generic parameter lists, and the versioned binary
persistence of the four-network bundle used by training.

The four roles: encoder (image -> latent), decoder (latent -> image,
sigmoid output), latent classifier and image classifier (logit outputs).
Forward passes can capture a cache that the matching backward pass
consumes; a cache is tied to the exact parameter object it was built from.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass
from typing import Iterable

import numpy as np

from .errors import CacheError, GradError, InputError, PersistError, ShapeError

_HEADS = ("linear", "sigmoid", "logits")
_QUARTET_MAGIC = b"MLUDE01\x00"
_ROLES = ("encoder", "decoder", "latent_classifier", "image_classifier")

ADAM_BETA1 = 0.9
ADAM_BETA2 = 0.999
ADAM_EPS = 1e-8


@dataclass(frozen=True)
class MLPSpec:
    """Layer widths (input first, output last) and the output head."""

    layer_sizes: tuple[int, ...]
    head: str = "linear"

    def __post_init__(self) -> None:
        if len(self.layer_sizes) < 2:
            raise ShapeError("layer_sizes needs at least input and output widths")
        if any(int(s) < 1 for s in self.layer_sizes):
            raise ShapeError(f"layer widths must be positive, got {self.layer_sizes}")
        object.__setattr__(
            self, "layer_sizes", tuple(int(s) for s in self.layer_sizes)
        )
        if self.head not in _HEADS:
            raise ShapeError(f"head must be one of {_HEADS}, got {self.head!r}")

    @property
    def input_dim(self) -> int:
        return self.layer_sizes[0]

    @property
    def output_dim(self) -> int:
        return self.layer_sizes[-1]


@dataclass
class NetworkParams:
    """Weight matrices (fan_in, fan_out) and bias vectors per layer."""

    weights: list[np.ndarray]
    biases: list[np.ndarray]

    def param_list(self) -> list[np.ndarray]:
        """Interleaved [W0, b0, W1, b1, ...]; mutating these mutates the net."""
        out: list[np.ndarray] = []
        for w, b in zip(self.weights, self.biases):
            out.extend((w, b))
        return out


def init_params(spec: MLPSpec, rng: np.random.Generator) -> NetworkParams:
    """He-style initialization: W ~ N(0, 2/fan_in), zero biases."""
    weights = []
    biases = []
    for fan_in, fan_out in zip(spec.layer_sizes[:-1], spec.layer_sizes[1:]):
        weights.append(
            rng.standard_normal((fan_in, fan_out)) * np.sqrt(2.0 / fan_in)
        )
        biases.append(np.zeros(fan_out))
    return NetworkParams(weights, biases)


@dataclass
class ForwardCache:
    params: NetworkParams
    inputs: list[np.ndarray]
    preacts: list[np.ndarray]
    output: np.ndarray


def _check_batch(x: np.ndarray, input_dim: int) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 2 or x.shape[1] != input_dim:
        raise ShapeError(f"batch must be (n, {input_dim}), got shape {x.shape}")
    if not np.all(np.isfinite(x)):
        raise InputError("batch contains non-finite values")
    return x


def forward(
    spec: MLPSpec,
    params: NetworkParams,
    x: np.ndarray,
    want_cache: bool = False,
) -> np.ndarray | tuple[np.ndarray, ForwardCache]:
    """Run the network on a batch.

    Args:
        spec: architecture description.
        params: parameters matching ``spec``.
        x: (n, input_dim) batch.
        want_cache: also return the activations needed by :func:`backward`.

    Returns:
        (n, output_dim) outputs, or (outputs, cache) when ``want_cache``.
    """
    x = _check_batch(x, spec.input_dim)
    inputs = []
    preacts = []
    a = x
    last = len(params.weights) - 1
    for l, (w, b) in enumerate(zip(params.weights, params.biases)):
        inputs.append(a)
        z = a @ w + b
        preacts.append(z)
        a = z if l == last else np.maximum(z, 0.0)
    if spec.head == "sigmoid":
        out = 1.0 / (1.0 + np.exp(-a))
    else:
        out = a
    if not want_cache:
        return out
    return out, ForwardCache(params, inputs, preacts, out)


def forward_hidden(spec: MLPSpec, params: NetworkParams, x: np.ndarray) -> np.ndarray:
    """Activations of the last hidden layer (post-ReLU); used for export."""
    if len(params.weights) < 2:
        raise ShapeError("network has no hidden layer")
    x = _check_batch(x, spec.input_dim)
    a = x
    for w, b in zip(params.weights[:-1], params.biases[:-1]):
        a = np.maximum(a @ w + b, 0.0)
    return a


def backward(
    spec: MLPSpec,
    params: NetworkParams,
    cache: ForwardCache,
    grad_output: np.ndarray,
) -> tuple[NetworkParams, np.ndarray]:
    """Backpropagate a gradient on the head output through the network.

    Args:
        spec: architecture description.
        params: the exact parameter object the cache was built from.
        cache: result of ``forward(..., want_cache=True)``.
        grad_output: (n, output_dim) gradient wrt the head output.

    Returns:
        (param_grads, grad_input): gradients shaped like ``params`` and the
        gradient wrt the batch.

    Raises:
        CacheError: if ``cache`` was built from a different parameter object.
    """
    if cache.params is not params:
        raise CacheError("forward cache does not belong to these parameters")
    grad_output = np.asarray(grad_output, dtype=np.float64)
    if grad_output.shape != cache.output.shape:
        raise ShapeError(
            f"grad_output shape {grad_output.shape} != output shape "
            f"{cache.output.shape}"
        )
    if spec.head == "sigmoid":
        dz = grad_output * cache.output * (1.0 - cache.output)
    else:
        dz = grad_output
    grad_w: list[np.ndarray] = [np.empty(0)] * len(params.weights)
    grad_b: list[np.ndarray] = [np.empty(0)] * len(params.biases)
    for l in range(len(params.weights) - 1, -1, -1):
        grad_w[l] = cache.inputs[l].T @ dz
        grad_b[l] = dz.sum(axis=0)
        if l > 0:
            da = dz @ params.weights[l].T
            # ReLU derivative: 0 at exactly 0.
            dz = da * (cache.preacts[l - 1] > 0.0)
    grad_input = dz @ params.weights[0].T
    return NetworkParams(grad_w, grad_b), grad_input


def mse_loss(x_hat: np.ndarray, x: np.ndarray) -> tuple[float, np.ndarray]:
    """Mean squared error over every entry, with its gradient wrt ``x_hat``."""
    x_hat = np.asarray(x_hat, dtype=np.float64)
    x = np.asarray(x, dtype=np.float64)
    if x_hat.shape != x.shape:
        raise ShapeError(f"shape mismatch: {x_hat.shape} vs {x.shape}")
    diff = x_hat - x
    loss = float((diff * diff).mean())
    return loss, 2.0 * diff / diff.size


@dataclass
class AdamState:
    """First/second moment accumulators for a fixed list of arrays."""

    m: list[np.ndarray]
    v: list[np.ndarray]
    t: int = 0

    @classmethod
    def for_arrays(cls, arrays: Iterable[np.ndarray]) -> "AdamState":
        arrays = list(arrays)
        return cls([np.zeros_like(a) for a in arrays], [np.zeros_like(a) for a in arrays])


def adam_step(
    arrays: list[np.ndarray],
    grads: list[np.ndarray],
    state: AdamState,
    lr: float,
    beta1: float = ADAM_BETA1,
    beta2: float = ADAM_BETA2,
    eps: float = ADAM_EPS,
) -> None:
    """One bias-corrected Adam update, applied to ``arrays`` in place.

    Raises:
        GradError: if any gradient entry is non-finite.
        ShapeError: if the lists disagree with the state.
    """
    if len(arrays) != len(grads) or len(arrays) != len(state.m):
        raise ShapeError("arrays, grads and optimizer state must align")
    for g in grads:
        if not np.all(np.isfinite(g)):
            raise GradError("non-finite gradient in optimizer step")
    state.t += 1
    c1 = 1.0 - beta1 ** state.t
    c2 = 1.0 - beta2 ** state.t
    for a, g, m, v in zip(arrays, grads, state.m, state.v):
        m *= beta1
        m += (1.0 - beta1) * g
        v *= beta2
        v += (1.0 - beta2) * (g * g)
        a -= lr * (m / c1) / (np.sqrt(v / c2) + eps)


@dataclass
class MLP:
    """A spec/params pair; thin forwarding methods keep call sites short."""

    spec: MLPSpec
    params: NetworkParams

    def forward(
        self, x: np.ndarray, want_cache: bool = False
    ) -> np.ndarray | tuple[np.ndarray, ForwardCache]:
        return forward(self.spec, self.params, x, want_cache)

    def backward(
        self, cache: ForwardCache, grad_output: np.ndarray
    ) -> tuple[NetworkParams, np.ndarray]:
        return backward(self.spec, self.params, cache, grad_output)


@dataclass
class ModelQuartet:
    """Encoder, decoder and the two classifiers, with consistent widths."""

    encoder: MLP
    decoder: MLP
    latent_classifier: MLP
    image_classifier: MLP

    def __post_init__(self) -> None:
        enc, dec = self.encoder.spec, self.decoder.spec
        ltt, img = self.latent_classifier.spec, self.image_classifier.spec
        if enc.output_dim != dec.input_dim:
            raise ShapeError(
                f"latent width mismatch: encoder emits {enc.output_dim}, "
                f"decoder expects {dec.input_dim}"
            )
        if ltt.input_dim != enc.output_dim:
            raise ShapeError(
                f"latent width mismatch: latent classifier expects "
                f"{ltt.input_dim}, encoder emits {enc.output_dim}"
            )
        if dec.output_dim != enc.input_dim:
            raise ShapeError(
                f"image width mismatch: decoder emits {dec.output_dim}, "
                f"encoder expects {enc.input_dim}"
            )
        if img.input_dim != enc.input_dim:
            raise ShapeError(
                f"image width mismatch: image classifier expects "
                f"{img.input_dim}, encoder expects {enc.input_dim}"
            )
        if ltt.output_dim != img.output_dim:
            raise ShapeError(
                f"class_count mismatch: latent classifier emits "
                f"{ltt.output_dim}, image classifier emits {img.output_dim}"
            )

    @property
    def class_count(self) -> int:
        return self.latent_classifier.spec.output_dim

    @property
    def latent_dim(self) -> int:
        return self.encoder.spec.output_dim

    @property
    def image_dim(self) -> int:
        return self.encoder.spec.input_dim

    def networks(self) -> tuple[MLP, MLP, MLP, MLP]:
        return (
            self.encoder,
            self.decoder,
            self.latent_classifier,
            self.image_classifier,
        )


def default_quartet(
    image_dim: int,
    class_count: int,
    rng: np.random.Generator,
    latent_dim: int = 12,
) -> ModelQuartet:
    """Default widths: 256-unit codec trunks, 64-unit classifier necks."""
    specs = {
        "encoder": MLPSpec((image_dim, 256, latent_dim), "linear"),
        "decoder": MLPSpec((latent_dim, 256, image_dim), "sigmoid"),
        "latent_classifier": MLPSpec((latent_dim, 64, class_count), "logits"),
        "image_classifier": MLPSpec((image_dim, 256, 64, class_count), "logits"),
    }
    return ModelQuartet(
        **{name: MLP(s, init_params(s, rng)) for name, s in specs.items()}
    )


def save_quartet(quartet: ModelQuartet, path: str) -> None:
    """Write the four networks: magic, spec table, then LE float64 payload.

    Spec table per network: layer count, layer widths (uint32) and a head
    code byte; payload is every layer's weight matrix (row-major) followed
    by its bias vector, in role order.
    """
    with open(path, "wb") as fh:
        fh.write(_QUARTET_MAGIC)
        fh.write(struct.pack("<I", len(_ROLES)))
        for net in quartet.networks():
            sizes = net.spec.layer_sizes
            fh.write(struct.pack("<I", len(sizes)))
            fh.write(struct.pack(f"<{len(sizes)}I", *sizes))
            fh.write(struct.pack("<B", _HEADS.index(net.spec.head)))
        for net in quartet.networks():
            for w, b in zip(net.params.weights, net.params.biases):
                fh.write(np.ascontiguousarray(w, dtype="<f8").tobytes())
                fh.write(np.ascontiguousarray(b, dtype="<f8").tobytes())


def load_quartet(path: str) -> ModelQuartet:
    """Inverse of :func:`save_quartet`.

    Raises:
        PersistError: on bad magic, truncation, trailing bytes, or when the
            stored widths are mutually inconsistent (latent width, image
            width, or class_count disagree between roles).
    """
    with open(path, "rb") as fh:
        blob = fh.read()
    if blob[: len(_QUARTET_MAGIC)] != _QUARTET_MAGIC:
        raise PersistError(f"{path}: bad magic at offset 0")
    off = len(_QUARTET_MAGIC)

    def take(fmt: str) -> tuple:
        nonlocal off
        size = struct.calcsize(fmt)
        if off + size > len(blob):
            raise PersistError(f"{path}: truncated header at offset {off}")
        out = struct.unpack_from(fmt, blob, off)
        off += size
        return out

    (count,) = take("<I")
    if count != len(_ROLES):
        raise PersistError(f"{path}: expected {len(_ROLES)} networks, found {count}")
    specs = []
    for _ in _ROLES:
        (n_layers,) = take("<I")
        if n_layers < 2 or n_layers > 64:
            raise PersistError(f"{path}: implausible layer count {n_layers}")
        sizes = take(f"<{n_layers}I")
        (head_code,) = take("<B")
        if head_code >= len(_HEADS):
            raise PersistError(f"{path}: unknown head code {head_code}")
        try:
            specs.append(MLPSpec(sizes, _HEADS[head_code]))
        except ShapeError as exc:
            raise PersistError(f"{path}: {exc}") from exc
    payload = sum(
        fan_in * fan_out + fan_out
        for s in specs
        for fan_in, fan_out in zip(s.layer_sizes[:-1], s.layer_sizes[1:])
    )
    if len(blob) != off + payload * 8:
        raise PersistError(
            f"{path}: expected {off + payload * 8} bytes, found {len(blob)}"
        )
    nets = []
    for s in specs:
        weights = []
        biases = []
        for fan_in, fan_out in zip(s.layer_sizes[:-1], s.layer_sizes[1:]):
            w = np.frombuffer(blob, dtype="<f8", count=fan_in * fan_out, offset=off)
            off += fan_in * fan_out * 8
            b = np.frombuffer(blob, dtype="<f8", count=fan_out, offset=off)
            off += fan_out * 8
            weights.append(w.reshape(fan_in, fan_out).copy())
            biases.append(b.copy())
        nets.append(MLP(s, NetworkParams(weights, biases)))
    try:
        return ModelQuartet(*nets)
    except ShapeError as exc:
        raise PersistError(f"{path}: {exc}") from exc
