"""Small dense MLPs with manual reverse-mode gradients, Adam and EMA.

Everything is float64 numpy. Weights are stored as ``(fan_in, fan_out)``
matrices so that a batch ``X`` of shape ``(n, fan_in)`` maps to
``X @ W + b``.
"""

from __future__ import annotations

import io
import json
import struct
from dataclasses import dataclass

import numpy as np

ACTIVATIONS = ("relu", "leaky_relu", "tanh", "identity")

CHECKPOINT_MAGIC = b"UOTLABCK"
CHECKPOINT_VERSION = 1


class ShapeError(ValueError):
    """Raised when an array does not have the shape an operation expects."""

    def __init__(self, what, expected, actual):
        self.expected = expected
        self.actual = actual
        super().__init__(f"{what}: expected shape {expected}, got {actual}")


class NonFiniteError(FloatingPointError):
    """Raised when NaN or Inf shows up in parameters, gradients or losses."""


def as_dense(x, name="array"):
    """Return ``x`` as a finite 2-D float64 array (1-D input becomes a row)."""
    a = np.asarray(x, dtype=np.float64)
    if a.ndim == 1:
        a = a[None, :]
    if a.ndim != 2:
        raise ShapeError(name, "(rows, cols)", a.shape)
    if not np.all(np.isfinite(a)):
        raise NonFiniteError(f"{name} contains non-finite entries")
    return a


@dataclass(frozen=True)
class MlpSpec:
    layer_widths: tuple
    activation: str = "leaky_relu"
    output_activation: str = "identity"
    slope: float = 0.2

    def __post_init__(self):
        widths = tuple(int(w) for w in self.layer_widths)
        object.__setattr__(self, "layer_widths", widths)
        if len(widths) < 2 or min(widths) < 1:
            raise ValueError(f"need at least two widths >= 1, got {widths}")
        for act in (self.activation, self.output_activation):
            if act not in ACTIVATIONS:
                raise ValueError(f"unknown activation {act!r}; choose from {ACTIVATIONS}")

    @property
    def n_layers(self):
        return len(self.layer_widths) - 1

    @property
    def d_in(self):
        return self.layer_widths[0]

    @property
    def d_out(self):
        return self.layer_widths[-1]

    def layer_activation(self, i):
        return self.output_activation if i == self.n_layers - 1 else self.activation

    def to_dict(self):
        return {
            "layer_widths": list(self.layer_widths),
            "activation": self.activation,
            "output_activation": self.output_activation,
            "slope": self.slope,
        }

    @classmethod
    def from_dict(cls, d):
        return cls(tuple(d["layer_widths"]), d["activation"], d["output_activation"], d["slope"])


@dataclass
class ParamStore:
    """Per-layer weights and biases, ordered ``(W1, b1, W2, b2, ...)``."""

    weights: list
    biases: list

    def arrays(self):
        out = []
        for w, b in zip(self.weights, self.biases):
            out += [w, b]
        return out

    @property
    def n_params(self):
        return sum(a.size for a in self.arrays())

    def copy(self):
        return ParamStore([w.copy() for w in self.weights], [b.copy() for b in self.biases])

    def zeros_like(self):
        return ParamStore([np.zeros_like(w) for w in self.weights],
                          [np.zeros_like(b) for b in self.biases])

    def flat(self):
        return np.concatenate([a.ravel() for a in self.arrays()])

    def unflat(self, vec):
        """Return a new store with the same shapes filled from ``vec``."""
        vec = np.asarray(vec, dtype=np.float64)
        if vec.shape != (self.n_params,):
            raise ShapeError("flat parameter vector", (self.n_params,), vec.shape)
        out, k = [], 0
        for a in self.arrays():
            out.append(vec[k:k + a.size].reshape(a.shape).copy())
            k += a.size
        return ParamStore(out[0::2], out[1::2])

    def check_spec(self, spec):
        if len(self.weights) != spec.n_layers or len(self.biases) != spec.n_layers:
            raise ShapeError("layer count", spec.n_layers, len(self.weights))
        for i, (w, b) in enumerate(zip(self.weights, self.biases)):
            shape = (spec.layer_widths[i], spec.layer_widths[i + 1])
            if w.shape != shape:
                raise ShapeError(f"W{i + 1}", shape, w.shape)
            if b.shape != (shape[1],):
                raise ShapeError(f"b{i + 1}", (shape[1],), b.shape)

    def layer_names(self):
        names = []
        for i in range(len(self.weights)):
            names += [f"W{i + 1}", f"b{i + 1}"]
        return names

    def digest(self):
        import hashlib
        h = hashlib.sha256()
        for a in self.arrays():
            h.update(np.ascontiguousarray(a, dtype="<f8").tobytes())
        return h.hexdigest()


def init_params(spec, rng):
    """Kaiming-uniform weights scaled by fan-in; biases uniform in +-1/sqrt(fan_in)."""
    if not isinstance(rng, np.random.Generator):
        rng = np.random.default_rng(rng)
    weights, biases = [], []
    for i in range(spec.n_layers):
        fan_in, fan_out = spec.layer_widths[i], spec.layer_widths[i + 1]
        act = spec.layer_activation(i)
        gain = {"relu": np.sqrt(2.0), "leaky_relu": np.sqrt(2.0 / (1 + spec.slope ** 2)),
                "tanh": 5.0 / 3.0, "identity": 1.0}[act]
        bound = gain * np.sqrt(3.0 / fan_in)
        weights.append(rng.uniform(-bound, bound, size=(fan_in, fan_out)))
        bb = 1.0 / np.sqrt(fan_in)
        biases.append(rng.uniform(-bb, bb, size=fan_out))
    return ParamStore(weights, biases)


def _act(name, z, slope):
    if name == "relu":
        return np.maximum(z, 0.0)
    if name == "leaky_relu":
        return np.where(z > 0, z, slope * z)
    if name == "tanh":
        return np.tanh(z)
    return z


def _act_grad(name, z, a, slope):
    # derivative of the activation, evaluated from pre-activation z / output a
    if name == "relu":
        return (z > 0).astype(np.float64)
    if name == "leaky_relu":
        return np.where(z > 0, 1.0, slope)
    if name == "tanh":
        return 1.0 - a * a
    return None


def mlp_forward(spec, params, x, return_cache=False):
    """Evaluate the network on a batch ``x`` of shape ``(n, d_in)``.

    With ``return_cache=True`` also returns the per-layer inputs and
    pre-activations that :func:`mlp_backward` needs.
    """
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 2 or x.shape[1] != spec.d_in:
        raise ShapeError("mlp input", ("n", spec.d_in), x.shape)
    h = x
    cache = []
    for i, (w, b) in enumerate(zip(params.weights, params.biases)):
        z = h @ w + b
        a = _act(spec.layer_activation(i), z, spec.slope)
        cache.append((h, z, a))
        h = a
    if return_cache:
        return h, cache
    return h


def mlp_backward(spec, params, x, upstream_grad, cache=None):
    """Backpropagate ``upstream_grad`` (dL/d output) through the network.

    Returns ``(param_grads, input_grad)``. Pass the ``cache`` from a
    previous :func:`mlp_forward` call to skip recomputing the forward pass.
    """
    upstream_grad = np.asarray(upstream_grad, dtype=np.float64)
    if cache is None:
        out, cache = mlp_forward(spec, params, x, return_cache=True)
    else:
        out = cache[-1][2]
    if upstream_grad.shape != out.shape:
        raise ShapeError("upstream gradient", out.shape, upstream_grad.shape)
    gw = [None] * spec.n_layers
    gb = [None] * spec.n_layers
    g = upstream_grad
    for i in range(spec.n_layers - 1, -1, -1):
        h, z, a = cache[i]
        d = _act_grad(spec.layer_activation(i), z, a, spec.slope)
        if d is not None:
            g = g * d
        gw[i] = h.T @ g
        gb[i] = g.sum(axis=0)
        g = g @ params.weights[i].T
    return ParamStore(gw, gb), g


PIECEWISE_LINEAR = ("relu", "leaky_relu", "identity")


def input_grad_penalty(spec, params, x):
    """``mean_i |d out / d x_i|^2 / 2`` for a scalar-output net, with its parameter gradient.

    Activations must be piecewise linear, so the input gradient is
    multilinear in the weights and bias gradients vanish almost everywhere.
    Returns ``(value, ParamStore)``.
    """
    if spec.d_out != 1:
        raise ShapeError("penalised network output", ("n", 1), ("n", spec.d_out))
    acts = [spec.layer_activation(i) for i in range(spec.n_layers)]
    if any(a not in PIECEWISE_LINEAR for a in acts):
        raise ValueError("input_grad_penalty needs piecewise-linear activations")
    _, cache = mlp_forward(spec, params, x, return_cache=True)
    n = cache[0][0].shape[0]
    slopes = [_act_grad(a, z, y, spec.slope) for a, (_, z, y) in zip(acts, cache)]
    # backward pass with unit upstream, keeping d out / d z per layer
    deltas = [None] * spec.n_layers
    d = np.ones((n, 1))
    for i in range(spec.n_layers - 1, -1, -1):
        if slopes[i] is not None:
            d = d * slopes[i]
        deltas[i] = d
        d = d @ params.weights[i].T
    value = 0.5 * float((d * d).sum()) / n
    # adjoint sweep back through the (linear in weights) backward pass
    adj = d / n
    gw = [None] * spec.n_layers
    for i in range(spec.n_layers):
        gw[i] = adj.T @ deltas[i]
        adj = adj @ params.weights[i]
        if slopes[i] is not None:
            adj = adj * slopes[i]
    return value, ParamStore(gw, [np.zeros_like(b) for b in params.biases])


class Mlp:
    """Spec and parameters bundled together."""

    def __init__(self, spec, params=None, seed=0):
        self.spec = spec
        self.params = params if params is not None else init_params(spec, seed)
        self.params.check_spec(spec)

    def __call__(self, x):
        return mlp_forward(self.spec, self.params, x)

    def forward(self, x):
        return mlp_forward(self.spec, self.params, x, return_cache=True)

    def backward(self, x, upstream_grad, cache=None):
        return mlp_backward(self.spec, self.params, x, upstream_grad, cache)

    def copy(self):
        return Mlp(self.spec, self.params.copy())


@dataclass
class AdamState:
    m: ParamStore
    v: ParamStore
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0

    @classmethod
    def for_params(cls, params, lr=1e-3, beta1=0.9, beta2=0.999, eps=1e-8):
        return cls(params.zeros_like(), params.zeros_like(), lr, beta1, beta2, eps)


def adam_step(params, grads, state, mask=None):
    """One bias-corrected Adam update, applied in place.

    ``mask`` is an optional ParamStore of 0/1 arrays; masked-out entries
    are left bit-identical (they see a zero gradient in the moments).
    Returns ``(params, state)``.
    """
    names = params.layer_names()
    for name, g in zip(names, grads.arrays()):
        if not np.all(np.isfinite(g)):
            raise NonFiniteError(f"non-finite gradient in layer {name}")
    state.step += 1
    t = state.step
    c1 = 1.0 - state.beta1 ** t
    c2 = 1.0 - state.beta2 ** t
    masks = mask.arrays() if mask is not None else [None] * len(names)
    for p, g, m, v, mk in zip(params.arrays(), grads.arrays(), state.m.arrays(),
                              state.v.arrays(), masks):
        if mk is not None:
            g = g * mk
        m *= state.beta1
        m += (1.0 - state.beta1) * g
        v *= state.beta2
        v += (1.0 - state.beta2) * g * g
        upd = state.lr * (m / c1) / (np.sqrt(v / c2) + state.eps)
        if mk is not None:
            p[mk != 0] -= upd[mk != 0]
        else:
            p -= upd
    for name, p in zip(names, params.arrays()):
        if not np.all(np.isfinite(p)):
            raise NonFiniteError(f"non-finite parameter in layer {name} after Adam step {t}")
    return params, state


def ema_update(ema_params, current_params, decay):
    """In-place ``ema <- decay * ema + (1 - decay) * current``."""
    if not 0.0 <= decay <= 1.0:
        raise ValueError(f"EMA decay must lie in [0, 1], got {decay}")
    for e, c in zip(ema_params.arrays(), current_params.arrays()):
        if e.shape != c.shape:
            raise ShapeError("EMA parameter", e.shape, c.shape)
        if decay == 1.0:
            continue
        if decay == 0.0:
            e[...] = c
        else:
            e[...] = decay * e + (1.0 - decay) * c
    return ema_params


def finite_diff_check(spec, params, loss_fn, h=1e-4, order=4):
    """Worst relative error between analytic and central-difference gradients.

    ``loss_fn(params)`` must return ``(loss, grads)`` where ``grads`` is a
    ParamStore of analytic gradients. The relative error per entry uses
    ``|analytic| + |numeric| + 1e-12`` as denominator. ``order`` selects the
    3-point (2) or 5-point (4) central stencil; the 5-point stencil allows a
    larger ``h``, which keeps roundoff small on near-zero gradient entries.
    """
    if h <= 0:
        raise ValueError("h must be positive")
    if order not in (2, 4):
        raise ValueError("order must be 2 or 4")
    params.check_spec(spec)
    _, analytic = loss_fn(params)
    base = params.flat()
    ana = analytic.flat()

    def loss_at(k, step):
        shifted = base.copy()
        shifted[k] += step
        return loss_fn(params.unflat(shifted))[0]

    worst = 0.0
    for k in range(base.size):
        d1 = loss_at(k, h) - loss_at(k, -h)
        if order == 2:
            num = d1 / (2 * h)
        else:
            # grouped differences keep an exact zero when all four losses agree
            num = (8 * d1 - (loss_at(k, 2 * h) - loss_at(k, -2 * h))) / (12 * h)
        err = abs(ana[k] - num) / (abs(ana[k]) + abs(num) + 1e-12)
        worst = max(worst, err)
    return worst


# --- checkpoints -----------------------------------------------------------

def save_checkpoint(path_or_file, spec, params, seed=0, step=0, extra=None):
    """Write spec, metadata and little-endian float64 parameters.

    Layout: magic, uint32 header length, UTF-8 JSON header, then the raw
    arrays in ``(W1, b1, W2, b2, ...)`` order.
    """
    header = {
        "format_version": CHECKPOINT_VERSION,
        "spec": spec.to_dict(),
        "seed": int(seed),
        "step": int(step),
        "shapes": [list(a.shape) for a in params.arrays()],
        "extra": extra or {},
    }
    hbytes = json.dumps(header, sort_keys=True).encode("utf-8")
    buf = io.BytesIO()
    buf.write(CHECKPOINT_MAGIC)
    buf.write(struct.pack("<I", len(hbytes)))
    buf.write(hbytes)
    for a in params.arrays():
        buf.write(np.ascontiguousarray(a, dtype="<f8").tobytes())
    data = buf.getvalue()
    if hasattr(path_or_file, "write"):
        path_or_file.write(data)
    else:
        with open(path_or_file, "wb") as fh:
            fh.write(data)
    return data


def load_checkpoint(path_or_bytes):
    """Inverse of :func:`save_checkpoint`; returns ``(spec, params, header)``."""
    if isinstance(path_or_bytes, (bytes, bytearray)):
        data = bytes(path_or_bytes)
    else:
        with open(path_or_bytes, "rb") as fh:
            data = fh.read()
    if data[:len(CHECKPOINT_MAGIC)] != CHECKPOINT_MAGIC:
        raise ValueError("not a uotlab checkpoint")
    off = len(CHECKPOINT_MAGIC)
    (hlen,) = struct.unpack("<I", data[off:off + 4])
    off += 4
    header = json.loads(data[off:off + hlen].decode("utf-8"))
    off += hlen
    if header["format_version"] != CHECKPOINT_VERSION:
        raise ValueError(f"unsupported checkpoint version {header['format_version']}")
    arrays = []
    for shape in header["shapes"]:
        n = int(np.prod(shape))
        arrays.append(np.frombuffer(data, dtype="<f8", count=n, offset=off)
                      .astype(np.float64).reshape(shape))
        off += 8 * n
    if off != len(data):
        raise ValueError("trailing bytes in checkpoint")
    spec = MlpSpec.from_dict(header["spec"])
    params = ParamStore(arrays[0::2], arrays[1::2])
    params.check_spec(spec)
    return spec, params, header
