"""Forward-only neural network models parameterised by a flat vector.

Every model exposes ``forward(params, x)`` where ``params`` is either a single
parameter vector of length ``P`` or an ensemble stacked row-wise as ``(J, P)``.
The ensemble axis comes first in the output: ``(J, B, ...)`` for a batch of
``B`` inputs.  Nothing here computes derivatives.

Parameter layout is the concatenation of the layers in declaration order;
inside a layer the weight tensor comes first, then the bias, both row-major.
"""

from dataclasses import dataclass, field
from math import prod

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .numerics import GaussianPrior

__all__ = [
    "ACTIVATIONS",
    "SELU_ALPHA",
    "SELU_SCALE",
    "LayerSpec",
    "ModelSpec",
    "RnnSpec",
    "dense",
    "affine",
    "conv2d",
    "maxpool",
    "flatten",
    "activation",
    "softmax",
    "maxpool_grid",
    "flatten_params",
    "unflatten_params",
    "xavier_prior",
    "dense_network",
]

# Self-normalising constants from Klambauer et al. (2017).
SELU_ALPHA = 1.6732632423543772
SELU_SCALE = 1.0507009873554805


def _relu(z):
    return np.maximum(z, 0.0)


def _sigmoid(z):
    out = np.empty_like(z)
    pos = z >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-z[pos]))
    ez = np.exp(z[~pos])
    out[~pos] = ez / (1.0 + ez)
    return out


def _selu(z):
    return SELU_SCALE * np.where(z > 0, z, SELU_ALPHA * np.expm1(np.minimum(z, 0.0)))


def _identity(z):
    return z


ACTIVATIONS = {
    "relu": _relu,
    "tanh": np.tanh,
    "sigmoid": _sigmoid,
    "selu": _selu,
    "identity": _identity,
}


def softmax(v, axis=-1):
    """Softmax along `axis`, shifted by the max so large inputs cannot overflow."""
    v = np.asarray(v, dtype=np.float64)
    z = v - np.max(v, axis=axis, keepdims=True)
    e = np.exp(z)
    return e / np.sum(e, axis=axis, keepdims=True)


OUTPUT_MAPS = {"softmax": softmax, "identity": lambda v: v}


@dataclass(frozen=True)
class LayerSpec:
    """One map in the composition.

    ``kind`` is one of ``dense``, ``affine``, ``conv2d``, ``maxpool``,
    ``flatten`` or ``activation``.  Use the helper constructors
    (:func:`dense`, :func:`conv2d`, ...) rather than filling fields by hand.
    """

    kind: str
    in_dim: int = 0
    out_dim: int = 0
    activation: str = "identity"
    in_channels: int = 0
    out_channels: int = 0
    kernel: tuple = (1, 1)
    padding: int = 0
    stride: tuple = (1, 1)

    def to_dict(self):
        d = {"kind": self.kind}
        if self.kind in ("dense", "affine"):
            d.update(in_dim=self.in_dim, out_dim=self.out_dim)
            if self.kind == "dense":
                d["activation"] = self.activation
        elif self.kind == "conv2d":
            d.update(
                in_channels=self.in_channels,
                out_channels=self.out_channels,
                kernel=list(self.kernel),
                padding=self.padding,
                stride=list(self.stride),
                activation=self.activation,
            )
        elif self.kind == "maxpool":
            d.update(kernel=list(self.kernel), stride=list(self.stride))
        elif self.kind == "activation":
            d["activation"] = self.activation
        return d

    @classmethod
    def from_dict(cls, d):
        d = dict(d)
        kind = d.pop("kind", None)
        builders = {
            "dense": dense,
            "affine": affine,
            "conv2d": conv2d,
            "maxpool": maxpool,
            "flatten": flatten,
            "activation": activation,
        }
        if kind not in builders:
            raise ValueError(f"unknown layer kind {kind!r}")
        try:
            return builders[kind](**d)
        except TypeError as exc:
            raise ValueError(f"bad fields for {kind} layer: {exc}") from None


def _pair(v):
    if isinstance(v, (tuple, list)):
        if len(v) != 2:
            raise ValueError(f"expected a pair, got {v!r}")
        return (int(v[0]), int(v[1]))
    return (int(v), int(v))


def _positive(*values):
    for v in values:
        if int(v) < 1:
            raise ValueError(f"layer sizes must be positive, got {v!r}")
    return tuple(int(v) for v in values)


def _check_activation(name):
    if name not in ACTIVATIONS:
        raise ValueError(f"unknown activation {name!r}; choose from {sorted(ACTIVATIONS)}")
    return name


def dense(in_dim, out_dim, activation="relu"):
    in_dim, out_dim = _positive(in_dim, out_dim)
    return LayerSpec("dense", in_dim=in_dim, out_dim=out_dim,
                     activation=_check_activation(activation))


def affine(in_dim, out_dim):
    in_dim, out_dim = _positive(in_dim, out_dim)
    return LayerSpec("affine", in_dim=in_dim, out_dim=out_dim)


def conv2d(in_channels, out_channels, kernel, padding=0, stride=1, activation="relu"):
    _positive(in_channels, out_channels, *_pair(kernel), *_pair(stride))
    if int(padding) < 0:
        raise ValueError("padding must be nonnegative")
    return LayerSpec(
        "conv2d",
        in_channels=int(in_channels),
        out_channels=int(out_channels),
        kernel=_pair(kernel),
        padding=int(padding),
        stride=_pair(stride),
        activation=_check_activation(activation),
    )


def maxpool(kernel, stride=None):
    kernel = _positive(*_pair(kernel))
    if stride is not None:
        _positive(*_pair(stride))
    return LayerSpec("maxpool", kernel=kernel, stride=_pair(stride) if stride is not None else kernel)


def flatten():
    return LayerSpec("flatten")


def activation(name):
    return LayerSpec("activation", activation=_check_activation(name))


def _conv_out(n, k, pad, stride):
    return (n + 2 * pad - k) // stride + 1


def _layer_shapes(layer, shape):
    """Return (param shapes, output shape) for `layer` applied to `shape`."""
    kind = layer.kind
    if kind in ("dense", "affine"):
        if len(shape) != 1 or shape[0] != layer.in_dim:
            raise ValueError(f"{kind} layer expects ({layer.in_dim},), got {shape}")
        return [(layer.out_dim, layer.in_dim), (layer.out_dim,)], (layer.out_dim,)
    if kind == "conv2d":
        if len(shape) != 3 or shape[0] != layer.in_channels:
            raise ValueError(f"conv2d expects ({layer.in_channels}, H, W), got {shape}")
        kh, kw = layer.kernel
        sh, sw = layer.stride
        if min(kh, kw, sh, sw) < 1 or layer.padding < 0:
            raise ValueError("kernel and stride must be positive, padding nonnegative")
        ho = _conv_out(shape[1], kh, layer.padding, sh)
        wo = _conv_out(shape[2], kw, layer.padding, sw)
        if ho < 1 or wo < 1:
            raise ValueError(f"conv2d kernel {layer.kernel} larger than padded input {shape}")
        return [(layer.out_channels, layer.in_channels, kh, kw), (layer.out_channels,)], (
            layer.out_channels,
            ho,
            wo,
        )
    if kind == "maxpool":
        if len(shape) != 3:
            raise ValueError(f"maxpool expects (C, H, W), got {shape}")
        kh, kw = layer.kernel
        sh, sw = layer.stride
        if min(kh, kw, sh, sw) < 1:
            raise ValueError("pooling kernel and stride must be positive")
        if kh > shape[1] or kw > shape[2]:
            raise ValueError(f"pooling kernel {layer.kernel} larger than input {shape}")
        return [], (shape[0], (shape[1] - kh) // sh + 1, (shape[2] - kw) // sw + 1)
    if kind == "flatten":
        return [], (prod(shape),)
    if kind == "activation":
        return [], shape
    raise ValueError(f"unknown layer kind {kind!r}")


def maxpool_grid(x, kernel, stride=None):
    """Block-wise maximum over the last two axes of `x`.

    Output cell ``(i, l)`` is the max of the ``kernel`` block whose top-left
    corner is at ``(stride[0] * i, stride[1] * l)``.
    """
    kh, kw = _pair(kernel)
    sh, sw = _pair(stride) if stride is not None else (kh, kw)
    x = np.asarray(x, dtype=np.float64)
    if kh > x.shape[-2] or kw > x.shape[-1]:
        raise ValueError(f"pooling kernel {(kh, kw)} larger than input {x.shape[-2:]}")
    win = sliding_window_view(x, (kh, kw), axis=(-2, -1))[..., ::sh, ::sw, :, :]
    return win.max(axis=(-2, -1))


def _conv_apply(z, w, b, padding, stride, shared):
    # z: (B, C, H, W) if shared else (J, B, C, H, W); w: (J, O, C, kh, kw).
    kh, kw = w.shape[-2:]
    sh, sw = stride
    if padding:
        pad = [(0, 0)] * (z.ndim - 2) + [(padding, padding), (padding, padding)]
        z = np.pad(z, pad)
    win = sliding_window_view(z, (kh, kw), axis=(-2, -1))[..., ::sh, ::sw, :, :]
    # win: (..., B, C, Ho, Wo, kh, kw)
    if shared:
        out = np.einsum("bchwkl,jockl->jbohw", win, w, optimize=True)
    else:
        out = np.einsum("jbchwkl,jockl->jbohw", win, w, optimize=True)
    return out + b[:, None, :, None, None]


@dataclass
class ModelSpec:
    """Feed-forward network ``S o A o F_{n-1} o ... o F_0``.

    Parameters
    ----------
    input_shape : tuple
        ``(d,)`` for vector inputs or ``(C, H, W)`` for image grids.
    layers : list of LayerSpec
    output_map : {'softmax', 'identity'}
    """

    input_shape: tuple
    layers: list
    output_map: str = "identity"
    _slots: list = field(init=False, repr=False)
    output_shape: tuple = field(init=False)
    param_count: int = field(init=False)

    def __post_init__(self):
        self.input_shape = tuple(int(s) for s in self.input_shape)
        self.layers = list(self.layers)
        if self.output_map not in OUTPUT_MAPS:
            raise ValueError(f"unknown output map {self.output_map!r}")
        shape = self.input_shape
        offset = 0
        self._slots = []
        for layer in self.layers:
            pshapes, out_shape = _layer_shapes(layer, shape)
            slots = []
            for ps in pshapes:
                n = prod(ps)
                slots.append((offset, offset + n, ps))
                offset += n
            self._slots.append((shape, slots))
            shape = out_shape
        self.output_shape = shape
        self.param_count = offset
        if self.output_map == "softmax" and len(shape) != 1:
            raise ValueError("softmax output needs a vector-valued final layer")

    @property
    def P(self):
        return self.param_count

    def to_dict(self):
        return {
            "type": "feedforward",
            "input_shape": list(self.input_shape),
            "layers": [layer.to_dict() for layer in self.layers],
            "output_map": self.output_map,
        }

    @classmethod
    def from_dict(cls, d):
        d = dict(d)
        if d.pop("type", "feedforward") != "feedforward":
            raise ValueError("not a feedforward model description")
        unknown = set(d) - {"input_shape", "layers", "output_map"}
        if unknown:
            raise ValueError(f"unknown model keys: {sorted(unknown)}")
        return cls(
            input_shape=tuple(d["input_shape"]),
            layers=[LayerSpec.from_dict(layer) for layer in d["layers"]],
            output_map=d.get("output_map", "identity"),
        )

    def layer_blocks(self):
        """Yield ``(index, layer, start, stop)`` for each parameterised layer."""
        for i, (layer, (_, slots)) in enumerate(zip(self.layers, self._slots)):
            if slots:
                yield i, layer, slots[0][0], slots[-1][1]

    def _params2d(self, params):
        u = np.asarray(params, dtype=np.float64)
        single = u.ndim == 1
        u = np.atleast_2d(u)
        if u.shape[1] != self.param_count:
            raise ValueError(f"expected {self.param_count} parameters, got {u.shape[1]}")
        return u, single

    def forward(self, params, x):
        """Evaluate the network.

        Parameters
        ----------
        params : ndarray, shape (P,) or (J, P)
        x : ndarray, shape (B, *input_shape) or input_shape for one sample

        Returns
        -------
        ndarray of shape (J, B, *output_shape); leading axes are dropped when
        `params` is a single vector or `x` a single sample.
        """
        u, single_u = self._params2d(params)
        J = u.shape[0]
        x = np.asarray(x, dtype=np.float64)
        single_x = x.shape == self.input_shape
        if single_x:
            x = x[None]
        if x.shape[1:] != self.input_shape:
            raise ValueError(f"input shape {x.shape[1:]} does not match {self.input_shape}")

        z = x  # no ensemble axis until the first parameterised layer
        shared = True
        for layer, (_, slots) in zip(self.layers, self._slots):
            kind = layer.kind
            if kind in ("dense", "affine"):
                (w0, w1, ws), (b0, b1, _) = slots
                w = u[:, w0:w1].reshape(J, *ws)
                b = u[:, b0:b1]
                if shared:
                    # One GEMM across the whole ensemble.
                    out = z @ w.reshape(J * ws[0], ws[1]).T
                    z = out.reshape(z.shape[0], J, ws[0]).transpose(1, 0, 2) + b[:, None, :]
                else:
                    z = np.matmul(z, w.transpose(0, 2, 1)) + b[:, None, :]
                shared = False
                if kind == "dense":
                    z = ACTIVATIONS[layer.activation](z)
            elif kind == "conv2d":
                (w0, w1, ws), (b0, b1, _) = slots
                w = u[:, w0:w1].reshape(J, *ws)
                b = u[:, b0:b1]
                z = _conv_apply(z, w, b, layer.padding, layer.stride, shared)
                shared = False
                z = ACTIVATIONS[layer.activation](z)
            elif kind == "maxpool":
                z = maxpool_grid(z, layer.kernel, layer.stride)
            elif kind == "flatten":
                z = z.reshape(*z.shape[:-3], -1)
            elif kind == "activation":
                z = ACTIVATIONS[layer.activation](z)
        if shared:
            z = np.broadcast_to(z, (J,) + z.shape).copy()
        z = OUTPUT_MAPS[self.output_map](z)
        if single_x:
            z = z[:, 0]
        if single_u:
            z = z[0]
        return z


def dense_network(dims, activation="relu", output_map="identity"):
    """Dense network with hidden widths ``dims[1:-1]`` and an affine output."""
    dims = [int(d) for d in dims]
    if len(dims) < 2:
        raise ValueError("need at least input and output dimensions")
    layers = [dense(a, b, activation) for a, b in zip(dims[:-2], dims[1:-1])]
    layers.append(affine(dims[-2], dims[-1]))
    return ModelSpec((dims[0],), layers, output_map)


@dataclass
class RnnSpec:
    """Elman-style recurrent network.

    Each of the ``num_layers`` two-input layers computes
    ``sigma(W_h z + b_h + W_x q + b_x)`` and the layers are composed along
    the hidden component, all seeing the same input ``q = x_t``.  A single
    affine read-out maps the hidden state to the output; in ``'sequence'``
    mode the same read-out is applied at every time step.
    """

    input_dim: int
    hidden_dim: int
    output_dim: int = 1
    num_layers: int = 1
    activation: str = "tanh"
    output_map: str = "identity"
    mode: str = "last"
    param_count: int = field(init=False)

    def __post_init__(self):
        if self.hidden_dim < 1 or self.input_dim < 1 or self.output_dim < 1 or self.num_layers < 1:
            raise ValueError("RNN dimensions and layer count must be positive")
        _check_activation(self.activation)
        if self.output_map not in OUTPUT_MAPS:
            raise ValueError(f"unknown output map {self.output_map!r}")
        if self.mode not in ("last", "sequence"):
            raise ValueError("mode must be 'last' or 'sequence'")
        dh, d, m = self.hidden_dim, self.input_dim, self.output_dim
        per_layer = dh * dh + dh * d + 2 * dh
        self.param_count = self.num_layers * per_layer + m * dh + m

    @property
    def P(self):
        return self.param_count

    def to_dict(self):
        return {
            "type": "rnn",
            "input_dim": self.input_dim,
            "hidden_dim": self.hidden_dim,
            "output_dim": self.output_dim,
            "num_layers": self.num_layers,
            "activation": self.activation,
            "output_map": self.output_map,
            "mode": self.mode,
        }

    @classmethod
    def from_dict(cls, d):
        d = dict(d)
        if d.pop("type", "rnn") != "rnn":
            raise ValueError("not an RNN model description")
        try:
            return cls(**d)
        except TypeError as exc:
            raise ValueError(f"bad RNN fields: {exc}") from None

    def blocks(self):
        """List of ``(name, start, stop, shape)`` in parameter order."""
        dh, d, m = self.hidden_dim, self.input_dim, self.output_dim
        out = []
        off = 0
        for j in range(self.num_layers):
            for name, shape in (("W_h", (dh, dh)), ("W_x", (dh, d)), ("b_h", (dh,)), ("b_x", (dh,))):
                n = prod(shape)
                out.append((f"{name}{j}", off, off + n, shape))
                off += n
        for name, shape in (("W_out", (m, dh)), ("b_out", (m,))):
            n = prod(shape)
            out.append((name, off, off + n, shape))
            off += n
        return out

    def _unpack(self, u):
        J = u.shape[0]
        return {name: u[:, a:b].reshape(J, *shape) for name, a, b, shape in self.blocks()}

    def _params2d(self, params):
        u = np.asarray(params, dtype=np.float64)
        single = u.ndim == 1
        u = np.atleast_2d(u)
        if u.shape[1] != self.param_count:
            raise ValueError(f"expected {self.param_count} parameters, got {u.shape[1]}")
        return u, single

    def _cell(self, p, h, q):
        # h: (J, B, dh); q: (B, d)
        sigma = ACTIVATIONS[self.activation]
        for j in range(self.num_layers):
            h = sigma(
                np.matmul(h, p[f"W_h{j}"].transpose(0, 2, 1))
                + p[f"b_h{j}"][:, None, :]
                + np.einsum("jhd,bd->jbh", p[f"W_x{j}"], q)
                + p[f"b_x{j}"][:, None, :]
            )
        return h

    def _readout(self, p, h):
        y = np.matmul(h, p["W_out"].transpose(0, 2, 1)) + p["b_out"][:, None, :]
        return OUTPUT_MAPS[self.output_map](y)

    def _hidden0(self, h0, J, B):
        if h0 is None:
            return np.zeros((J, B, self.hidden_dim))
        h0 = np.asarray(h0, dtype=np.float64)
        if h0.shape[-1] != self.hidden_dim:
            raise ValueError(f"h0 has dim {h0.shape[-1]}, expected {self.hidden_dim}")
        return np.broadcast_to(h0, (J, B, self.hidden_dim)).copy()

    def step(self, params, h, x_t):
        """Advance the hidden state one step and read it out.

        `h` broadcasts against ``(J, B, hidden_dim)``; `x_t` is ``(B, d)``.
        Returns ``(outputs (J, B, m), new_hidden (J, B, hidden_dim))``.
        """
        u, _ = self._params2d(params)
        p = self._unpack(u)
        x_t = np.atleast_2d(np.asarray(x_t, dtype=np.float64))
        if x_t.shape[-1] != self.input_dim:
            raise ValueError(f"input has dim {x_t.shape[-1]}, expected {self.input_dim}")
        hidden = self._hidden0(h, u.shape[0], x_t.shape[0])
        hidden = self._cell(p, hidden, x_t)
        return self._readout(p, hidden), hidden

    def forward(self, params, x, h0=None):
        """Run the recurrence over sequences.

        Parameters
        ----------
        params : ndarray, shape (P,) or (J, P)
        x : ndarray, shape (B, T, d) or (T, d) for one sequence
        h0 : ndarray, optional
            Initial hidden state; zero when omitted.

        Returns
        -------
        ``(J, B, m)`` in ``'last'`` mode or ``(J, B, T, m)`` in ``'sequence'``
        mode, with leading axes dropped for single inputs.
        """
        u, single_u = self._params2d(params)
        x = np.asarray(x, dtype=np.float64)
        single_x = x.ndim == 2
        if single_x:
            x = x[None]
        if x.ndim != 3 or x.shape[2] != self.input_dim:
            raise ValueError(f"expected sequences of shape (B, T, {self.input_dim}), got {x.shape}")
        p = self._unpack(u)
        h = self._hidden0(h0, u.shape[0], x.shape[0])
        outs = []
        for t in range(x.shape[1]):
            h = self._cell(p, h, x[:, t])
            if self.mode == "sequence":
                outs.append(self._readout(p, h))
        if self.mode == "sequence":
            y = np.stack(outs, axis=2)
        else:
            y = self._readout(p, h)
        if single_x:
            y = y[:, 0]
        if single_u:
            y = y[0]
        return y


def unflatten_params(spec, u):
    """Split a flat parameter vector into per-layer tensors.

    Returns a list with one dict per parameterised layer (``{'W': ..., 'b': ...}``)
    for a :class:`ModelSpec`, or a dict keyed by block name for an
    :class:`RnnSpec`.
    """
    u = np.asarray(u, dtype=np.float64)
    if u.shape != (spec.param_count,):
        raise ValueError(f"expected a vector of length {spec.param_count}, got {u.shape}")
    if isinstance(spec, RnnSpec):
        return {name: u[a:b].reshape(shape).copy() for name, a, b, shape in spec.blocks()}
    out = []
    for _, slots in spec._slots:
        if slots:
            (w0, w1, ws), (b0, b1, bs) = slots
            out.append({"W": u[w0:w1].reshape(ws).copy(), "b": u[b0:b1].reshape(bs).copy()})
    return out


def flatten_params(spec, tensors):
    """Inverse of :func:`unflatten_params`."""
    if isinstance(spec, RnnSpec):
        parts = []
        for name, a, b, shape in spec.blocks():
            t = np.asarray(tensors[name], dtype=np.float64)
            if t.shape != shape:
                raise ValueError(f"{name} has shape {t.shape}, expected {shape}")
            parts.append(t.ravel())
        return np.concatenate(parts)
    parts = []
    expected = [slots for _, slots in spec._slots if slots]
    if len(tensors) != len(expected):
        raise ValueError(f"expected {len(expected)} parameter blocks, got {len(tensors)}")
    for t, ((_, _, ws), (_, _, bs)) in zip(tensors, expected):
        w = np.asarray(t["W"], dtype=np.float64)
        b = np.asarray(t["b"], dtype=np.float64)
        if w.shape != ws or b.shape != bs:
            raise ValueError(f"block shapes {w.shape}/{b.shape} do not match {ws}/{bs}")
        parts.extend([w.ravel(), b.ravel()])
    return np.concatenate(parts) if parts else np.zeros(0)


def xavier_variance(fan_in, fan_out):
    return 2.0 / (fan_in + fan_out)


def xavier_prior(spec):
    """Zero-mean Gaussian prior with per-layer variance ``2 / (fan_in + fan_out)``.

    Convolutional layers use channel counts for the fans.  For an RNN the
    hidden-to-hidden map (with ``b_h``), the input-to-hidden map (with
    ``b_x``) and the read-out are separate blocks.
    """
    std = np.zeros(spec.param_count)
    blocks = []
    if isinstance(spec, RnnSpec):
        dh, d, m = spec.hidden_dim, spec.input_dim, spec.output_dim
        fans = {"W_h": (dh, dh), "b_h": (dh, dh), "W_x": (d, dh), "b_x": (d, dh),
                "W_out": (dh, m), "b_out": (dh, m)}
        for name, a, b, _ in spec.blocks():
            base = name.rstrip("0123456789")
            var = xavier_variance(*fans[base])
            std[a:b] = np.sqrt(var)
            blocks.append((name, a, b, var))
    else:
        for i, layer, a, b in spec.layer_blocks():
            if layer.kind == "conv2d":
                var = xavier_variance(layer.in_channels, layer.out_channels)
            else:
                var = xavier_variance(layer.in_dim, layer.out_dim)
            std[a:b] = np.sqrt(var)
            blocks.append((f"layer{i}", a, b, var))
    return GaussianPrior(np.zeros(spec.param_count), std, blocks)


def model_from_dict(d):
    kind = d.get("type", "feedforward")
    if kind == "rnn":
        return RnnSpec.from_dict(d)
    if kind == "feedforward":
        return ModelSpec.from_dict(d)
    raise ValueError(f"unknown model type {kind!r}")
