"""Small tanh MLPs over flat float64 parameter vectors, with Adam.

A network's parameters live in one contiguous 1-D array laid out layer by layer
as ``W_0, b_0, W_1, b_1, ...`` with ``W_l`` of shape ``(out, in)``. All layer
views returned by :func:`unflatten` alias that array, so gradient buffers can be
filled in place by the kernels.
"""
from __future__ import annotations

import json
import struct
from dataclasses import dataclass

import numpy as np

from capolab import kernels


class ShapeError(ValueError):
    """Raised on a dimension mismatch between inputs and a network or state."""


class NumericError(FloatingPointError):
    """Raised when a non-finite value appears in a forward or backward pass."""

    def __init__(self, message, layer=None, index=None):
        super().__init__(message)
        self.layer = layer
        self.index = index


@dataclass(frozen=True)
class MlpSpec:
    input_dim: int
    hidden_dims: tuple = (64, 64)
    output_dim: int = 1
    activation: str = "tanh"

    def __post_init__(self):
        object.__setattr__(self, "hidden_dims", tuple(int(h) for h in self.hidden_dims))
        dims = (self.input_dim, *self.hidden_dims, self.output_dim)
        if any(int(d) <= 0 for d in dims):
            raise ValueError(f"all layer widths must be positive, got {dims}")
        if self.activation != "tanh":
            raise ValueError(f"unsupported activation {self.activation!r}")

    @property
    def dims(self):
        return (self.input_dim, *self.hidden_dims, self.output_dim)

    @property
    def num_layers(self):
        return len(self.hidden_dims) + 1

    @property
    def layer_shapes(self):
        d = self.dims
        return [(d[i + 1], d[i]) for i in range(self.num_layers)]

    @property
    def num_params(self):
        return sum(o * i + o for o, i in self.layer_shapes)


def unflatten(spec, params):
    """Split a flat vector into ``[(W, b), ...]`` views (no copy)."""
    params = np.asarray(params)
    if params.ndim != 1 or params.shape[0] < spec.num_params:
        raise ShapeError(
            f"parameter vector of length {params.shape} too short for {spec.num_params} params"
        )
    layers = []
    pos = 0
    for out_dim, in_dim in spec.layer_shapes:
        W = params[pos:pos + out_dim * in_dim].reshape(out_dim, in_dim)
        pos += out_dim * in_dim
        b = params[pos:pos + out_dim]
        pos += out_dim
        layers.append((W, b))
    return layers


def flatten(layers):
    return np.concatenate([np.concatenate([W.ravel(), b.ravel()]) for W, b in layers]).astype(
        np.float64
    )


def _check_params(spec, params):
    params = np.asarray(params, dtype=np.float64)
    if params.ndim != 1 or params.shape[0] != spec.num_params:
        raise ShapeError(
            f"expected {spec.num_params} parameters, got shape {params.shape}"
        )
    return np.ascontiguousarray(params)


def _as_batch(spec, x):
    x = np.asarray(x, dtype=np.float64)
    single = x.ndim == 1
    if single:
        x = x[None, :]
    if x.ndim != 2 or x.shape[1] != spec.input_dim:
        raise ShapeError(f"input of shape {x.shape} does not match input_dim={spec.input_dim}")
    return x, single


@dataclass
class ForwardCache:
    activations: list
    single: bool

    @property
    def output(self):
        return self.activations[-1]


def forward_cached(spec, params, x):
    """Forward pass that keeps every layer's activation for :func:`backward`."""
    params = _check_params(spec, params)
    x, single = _as_batch(spec, x)
    layers = unflatten(spec, params)
    acts = kernels.forward([W for W, _ in layers], [b for _, b in layers], x)
    return ForwardCache(acts, single)


def mlp_forward(spec, params, x):
    """Evaluate the network on one input vector or a ``(n, input_dim)`` batch."""
    cache = forward_cached(spec, params, x)
    out = cache.output
    if not np.all(np.isfinite(out)):
        _locate_nonfinite(cache.activations[1:], "forward")
    return out[0] if cache.single else out


def _locate_nonfinite(arrays, stage):
    for layer, a in enumerate(arrays):
        bad = np.flatnonzero(~np.isfinite(a))
        if bad.size:
            raise NumericError(
                f"non-finite value in {stage} pass at layer {layer}", layer=layer, index=int(bad[0])
            )


def backward(spec, params, cache, grad_out, want_input=False):
    """Reverse-mode pass given dLoss/dOutput; returns the flat parameter gradient.

    With ``want_input`` the gradient with respect to the network input is
    returned as a second value.
    """
    params = _check_params(spec, params)
    grad_out = np.asarray(grad_out, dtype=np.float64)
    if grad_out.ndim == 1:
        grad_out = grad_out[None, :]
    if grad_out.shape != cache.output.shape:
        raise ShapeError(f"grad_out shape {grad_out.shape} != output shape {cache.output.shape}")
    layers = unflatten(spec, params)
    grad = np.empty(spec.num_params)
    grad_layers = unflatten(spec, grad)
    grad_in = kernels.backward(
        [W for W, _ in layers],
        cache.activations,
        grad_out,
        [gW for gW, _ in grad_layers],
        [gb for _, gb in grad_layers],
        want_input,
    )
    if not np.all(np.isfinite(grad)):
        _locate_nonfinite([np.concatenate([gW.ravel(), gb]) for gW, gb in grad_layers], "backward")
    if want_input:
        return grad, (grad_in[0] if cache.single else grad_in)
    return grad


def loss_gradient(spec, params, inputs, loss_fn):
    """Gradient of a scalar loss of the network outputs over a batch.

    ``loss_fn(outputs)`` returns ``(loss, dloss_doutputs)`` for the
    ``(n, output_dim)`` output array.
    """
    cache = forward_cached(spec, params, inputs)
    if not np.all(np.isfinite(cache.output)):
        _locate_nonfinite(cache.activations[1:], "forward")
    loss, grad_out = loss_fn(cache.output)
    return float(loss), backward(spec, params, cache, grad_out)


def jvp(spec, params, x, tangent):
    """Forward-mode product: outputs and d(outputs)/d(params) applied to ``tangent``."""
    params = _check_params(spec, params)
    tangent = _check_params(spec, tangent)
    x, single = _as_batch(spec, x)
    layers = unflatten(spec, params)
    tlayers = unflatten(spec, tangent)
    a = x
    da = np.zeros_like(x)
    last = len(layers) - 1
    for layer, ((W, b), (dW, db)) in enumerate(zip(layers, tlayers)):
        z = a @ W.T + b
        dz = a @ dW.T + da @ W.T + db
        if layer < last:
            a = np.tanh(z)
            da = (1.0 - a * a) * dz
        else:
            a, da = z, dz
    if single:
        return a[0], da[0]
    return a, da


def orthogonal_matrix(rows, cols, gain, rng):
    """Orthogonal matrix scaled by ``gain``; rows orthonormal if rows <= cols, else columns."""
    big, small = max(rows, cols), min(rows, cols)
    q, r = np.linalg.qr(rng.standard_normal((big, small)))
    q = q * np.sign(np.where(np.diag(r) == 0, 1.0, np.diag(r)))
    W = q if rows >= cols else q.T
    return gain * W


def orthogonal_init(spec, gain_schedule=None, seed=0):
    """Orthogonal weights with per-layer gains, zero biases; deterministic per seed.

    ``gain_schedule`` defaults to 1.0 on every layer.
    """
    if gain_schedule is None:
        gain_schedule = [1.0] * spec.num_layers
    gain_schedule = list(gain_schedule)
    if len(gain_schedule) != spec.num_layers:
        raise ValueError(f"need {spec.num_layers} gains, got {len(gain_schedule)}")
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    params = np.zeros(spec.num_params)
    for (W, _), (rows, cols), gain in zip(unflatten(spec, params), spec.layer_shapes, gain_schedule):
        W[...] = orthogonal_matrix(rows, cols, gain, rng)
    return params


def clip_grad_norm(grad, max_norm):
    """Rescale ``grad`` so its L2 norm is at most ``max_norm``; returns (grad, pre-clip norm)."""
    norm = float(np.sqrt(np.dot(grad, grad)))
    if max_norm is not None and max_norm > 0 and norm > max_norm:
        grad = grad * (max_norm / (norm + 1e-12))
    return grad, norm


@dataclass
class AdamState:
    first_moment: np.ndarray
    second_moment: np.ndarray
    step_count: int = 0

    @classmethod
    def zeros(cls, n, step_count=0):
        return cls(np.zeros(n), np.zeros(n), int(step_count))

    def copy(self):
        return AdamState(self.first_moment.copy(), self.second_moment.copy(), self.step_count)

    def __len__(self):
        return self.first_moment.shape[0]

    def to_bytes(self):
        n = len(self)
        header = _HEADER.pack(_ADAM_MAGIC, _VERSION, n)
        body = struct.pack("<Q", self.step_count)
        body += self.first_moment.astype("<f8").tobytes() + self.second_moment.astype("<f8").tobytes()
        return header + body

    @classmethod
    def from_bytes(cls, blob):
        n = _read_header(blob, _ADAM_MAGIC)
        (step,) = struct.unpack_from("<Q", blob, _HEADER.size)
        off = _HEADER.size + 8
        m = np.frombuffer(blob, dtype="<f8", count=n, offset=off).astype(np.float64)
        v = np.frombuffer(blob, dtype="<f8", count=n, offset=off + 8 * n).astype(np.float64)
        return cls(m, v, int(step))

    def to_json(self):
        return json.dumps(
            {
                "first_moment": self.first_moment.tolist(),
                "second_moment": self.second_moment.tolist(),
                "step_count": self.step_count,
            }
        )

    @classmethod
    def from_json(cls, text):
        d = json.loads(text)
        return cls(
            np.asarray(d["first_moment"], dtype=np.float64),
            np.asarray(d["second_moment"], dtype=np.float64),
            int(d["step_count"]),
        )


def adam_step(state, params, grad, lr, beta1=0.9, beta2=0.999, eps=1e-5):
    """One bias-corrected Adam descent step; returns new ``(params, state)``."""
    params = np.asarray(params, dtype=np.float64)
    grad = np.asarray(grad, dtype=np.float64)
    if grad.shape != params.shape or params.shape != state.first_moment.shape:
        raise ShapeError(
            f"adam shapes differ: params {params.shape}, grad {grad.shape}, "
            f"state {state.first_moment.shape}"
        )
    t = state.step_count + 1
    m = beta1 * state.first_moment + (1.0 - beta1) * grad
    v = beta2 * state.second_moment + (1.0 - beta2) * grad * grad
    m_hat = m / (1.0 - beta1**t)
    v_hat = v / (1.0 - beta2**t)
    new_params = params - lr * m_hat / (np.sqrt(v_hat) + eps)
    return new_params, AdamState(m, v, t)


# 16-byte header: 4-byte magic, uint32 version, uint64 element count (little endian).
_HEADER = struct.Struct("<4sIQ")
_VERSION = 1
_PARAM_MAGIC = b"CPPV"
_ADAM_MAGIC = b"CPAS"


def _read_header(blob, magic):
    if len(blob) < _HEADER.size:
        raise ValueError("blob shorter than header")
    got, version, n = _HEADER.unpack_from(blob, 0)
    if got != magic:
        raise ValueError(f"bad magic {got!r}, expected {magic!r}")
    if version != _VERSION:
        raise ValueError(f"unsupported snapshot version {version}")
    return int(n)


def params_to_bytes(params):
    params = np.asarray(params, dtype=np.float64)
    return _HEADER.pack(_PARAM_MAGIC, _VERSION, params.shape[0]) + params.astype("<f8").tobytes()


def params_from_bytes(blob):
    n = _read_header(blob, _PARAM_MAGIC)
    if len(blob) != _HEADER.size + 8 * n:
        raise ValueError(f"blob length {len(blob)} does not match {n} params")
    return np.frombuffer(blob, dtype="<f8", count=n, offset=_HEADER.size).astype(np.float64)


def params_to_json(params):
    return json.dumps(np.asarray(params, dtype=np.float64).tolist())


def params_from_json(text):
    return np.asarray(json.loads(text), dtype=np.float64)
