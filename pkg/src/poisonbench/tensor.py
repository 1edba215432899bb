"""Dense tensors with reverse-mode differentiation.

Each differentiable operation builds one graph node with a fused backward
closure, which keeps the graph shallow (one node per layer) and the hot path
inside numpy. Single precision is the training default; double precision is
used by the finite-difference test oracles.
"""

from __future__ import annotations

import numpy as np

from .errors import NumericError, ShapeError

DTYPES = {"single": np.float32, "double": np.float64}


def _as_float_array(data, dtype=None):
    arr = np.asarray(data)
    if dtype is not None:
        return arr.astype(dtype, copy=False)
    if arr.dtype in (np.float32, np.float64):
        return arr
    return arr.astype(np.float32)


class Tensor:
    """A dense array plus the bookkeeping needed for backward traversal."""

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "_consumed")

    def __init__(self, data, requires_grad=False, dtype=None):
        self.data = _as_float_array(data, dtype)
        self.grad = None
        self.requires_grad = bool(requires_grad)
        self._parents = ()
        self._backward = None
        self._consumed = False

    @property
    def shape(self):
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def precision(self):
        return "double" if self.data.dtype == np.float64 else "single"

    @property
    def size(self):
        return self.data.size

    def item(self):
        return float(self.data)

    def accumulate_grad(self, g):
        if self.grad is None:
            self.grad = np.array(g, dtype=self.data.dtype, copy=True)
        else:
            self.grad += g

    def backward(self):
        backward(self)

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, dtype={self.data.dtype}, requires_grad={self.requires_grad})"


# A loss value is a scalar graph node: `item()` reads the (nonnegative)
# scalar, `backward` traverses the graph it heads.
LossValue = Tensor


class Parameter(Tensor):
    """Trainable tensor: always requires grad, carries an SGD momentum buffer.

    `grad` and `momentum` are allocated as zeros up front so both always have
    the shape of `data`, and an unused parameter reads back a zero gradient.
    """

    __slots__ = ("momentum", "name")

    def __init__(self, data, name=""):
        super().__init__(data, requires_grad=True)
        self.grad = np.zeros_like(self.data)
        self.momentum = np.zeros_like(self.data)
        self.name = name

    def zero_grad(self):
        self.grad[...] = 0


def _node(out_data, parents, backward_fn):
    out = Tensor(out_data)
    needs = tuple(p for p in parents if p.requires_grad)
    if needs:
        out.requires_grad = True
        out._parents = needs
        out._backward = backward_fn
    return out


def backward(loss):
    """Propagate d(loss)/d(node) through the recorded graph.

    Fills `.grad` on every reachable tensor that requires grad. A loss node
    may be traversed once; re-running backward without a fresh forward is an
    error because intermediate activations are not retained for reuse.
    """
    if loss.data.ndim != 0:
        raise ShapeError(f"backward expects a scalar loss, got shape {loss.data.shape}")
    if loss._consumed:
        raise RuntimeError("backward already ran on this loss; run a new forward first")
    loss._consumed = True

    topo = []
    seen = set()
    stack = [(loss, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            topo.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if id(p) not in seen:
                stack.append((p, False))

    loss.accumulate_grad(np.ones((), dtype=loss.data.dtype))
    for node in reversed(topo):
        if node._backward is not None and node.grad is not None:
            node._backward(node.grad)


# ---------------------------------------------------------------------------
# layer-level operations
# ---------------------------------------------------------------------------


def linear(x, weight, bias, name="linear"):
    """x[N,D] @ weight[D,F] + bias[F]."""
    if x.data.ndim != 2 or x.data.shape[1] != weight.data.shape[0]:
        raise ShapeError(
            f"{name}: input {x.data.shape} incompatible with weight {weight.data.shape}"
        )
    out_data = x.data @ weight.data + bias.data
    xd, wd = x.data, weight.data

    def _bw(g):
        if x.requires_grad:
            x.accumulate_grad(g @ wd.T)
        if weight.requires_grad:
            weight.accumulate_grad(xd.T @ g)
        if bias.requires_grad:
            bias.accumulate_grad(g.sum(axis=0))

    return _node(out_data, (x, weight, bias), _bw)


def conv2d(x, weight, stride=1, padding=0, name="conv"):
    """2-D convolution of x[N,C,H,W] with weight[F,C,kh,kw], no bias term.

    Lowered to a batched matmul over [N, C*kh*kw, ho*wo] patch matrices, a
    layout whose forward output and backward scatter slices are contiguous.
    """
    if x.data.ndim != 4:
        raise ShapeError(f"{name}: expected NCHW input, got shape {x.data.shape}")
    n, c, h, w = x.data.shape
    f, cw, kh, kw = weight.data.shape
    if c != cw:
        raise ShapeError(f"{name}: input has {c} channels, weight expects {cw}")
    hp, wp = h + 2 * padding, w + 2 * padding
    if hp < kh or wp < kw:
        raise ShapeError(f"{name}: kernel {kh}x{kw} larger than padded input {hp}x{wp}")
    ho = (hp - kh) // stride + 1
    wo = (wp - kw) // stride + 1
    ck, l = c * kh * kw, ho * wo

    if padding:
        xp = np.pad(x.data, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    else:
        xp = x.data
    win = np.lib.stride_tricks.sliding_window_view(xp, (kh, kw), axis=(2, 3))
    win = win[:, :, ::stride, ::stride]  # [N,C,ho,wo,kh,kw]
    cols = win.transpose(0, 1, 4, 5, 2, 3).reshape(n, ck, l)  # one gather copy
    wmat = weight.data.reshape(f, ck)
    out_data = (wmat[None, :, :] @ cols).reshape(n, f, ho, wo)

    def _bw(g):
        gmat = g.reshape(n, f, l)
        if weight.requires_grad:
            weight.accumulate_grad((gmat @ cols.transpose(0, 2, 1)).sum(axis=0).reshape(f, c, kh, kw))
        if x.requires_grad:
            dcols = (wmat.T[None, :, :] @ gmat).reshape(n, c, kh, kw, ho, wo)
            dxp = np.zeros((n, c, hp, wp), dtype=x.data.dtype)
            for i in range(kh):
                for j in range(kw):
                    dxp[:, :, i : i + stride * ho : stride, j : j + stride * wo : stride] += dcols[
                        :, :, i, j
                    ]
            if padding:
                dxp = dxp[:, :, padding : hp - padding, padding : wp - padding]
            x.accumulate_grad(dxp)

    return _node(out_data, (x, weight), _bw)


def relu(x):
    """Elementwise max(x, 0); the subgradient at exactly 0 is taken as 0."""
    out_data = np.maximum(x.data, 0)

    def _bw(g):
        x.accumulate_grad(g * (out_data > 0))

    return _node(out_data, (x,), _bw)


def max_pool2(x, name="maxpool"):
    """Non-overlapping 2x2 max pooling; ties route the gradient to the first
    window position in row-major order."""
    n, c, h, w = x.data.shape
    if h % 2 or w % 2:
        raise ShapeError(f"{name}: spatial dims must be even, got {h}x{w}")
    quads = (
        x.data[:, :, 0::2, 0::2],
        x.data[:, :, 0::2, 1::2],
        x.data[:, :, 1::2, 0::2],
        x.data[:, :, 1::2, 1::2],
    )
    out_data = np.maximum(np.maximum(quads[0], quads[1]), np.maximum(quads[2], quads[3]))

    def _bw(g):
        dx = np.zeros((n, c, h, w), dtype=x.data.dtype)
        taken = np.zeros(out_data.shape, dtype=bool)
        for quad, (oy, ox) in zip(quads, ((0, 0), (0, 1), (1, 0), (1, 1))):
            hit = (quad == out_data) & ~taken
            dx[:, :, oy::2, ox::2] = np.where(hit, g, 0)
            taken |= hit
        x.accumulate_grad(dx)

    return _node(out_data, (x,), _bw)


def global_avg_pool(x):
    """Mean over the spatial dims: [N,C,H,W] -> [N,C]."""
    n, c, h, w = x.data.shape
    out_data = x.data.mean(axis=(2, 3))
    inv = x.data.dtype.type(1.0 / (h * w))

    def _bw(g):
        x.accumulate_grad(np.broadcast_to((g * inv)[:, :, None, None], (n, c, h, w)))

    return _node(out_data, (x,), _bw)


def batch_norm(x, gamma, beta, running_mean, running_var, train, momentum=0.1, eps=1e-5, name="bn"):
    """Per-channel batch normalization over [N,C,H,W].

    Train mode normalizes with biased batch statistics and folds them into the
    running buffers in place; eval mode is an affine map using the buffers
    (so it stays differentiable w.r.t. the input for attack passes).
    """
    if x.data.ndim != 4 or x.data.shape[1] != gamma.data.shape[0]:
        raise ShapeError(f"{name}: input {x.data.shape} incompatible with {gamma.data.shape[0]} channels")
    dt = x.data.dtype

    if train:
        m = x.data.shape[0] * x.data.shape[2] * x.data.shape[3]
        mean = x.data.mean(axis=(0, 2, 3))
        var = x.data.var(axis=(0, 2, 3))
        running_mean *= dt.type(1 - momentum)
        running_mean += dt.type(momentum) * mean
        running_var *= dt.type(1 - momentum)
        running_var += dt.type(momentum) * var
        inv_std = (1.0 / np.sqrt(var + dt.type(eps))).astype(dt)
        xhat = (x.data - mean[None, :, None, None]) * inv_std[None, :, None, None]
        out_data = xhat * gamma.data[None, :, None, None]
        out_data += beta.data[None, :, None, None]

        def _bw(g):
            if gamma.requires_grad:
                gamma.accumulate_grad((g * xhat).sum(axis=(0, 2, 3)))
            if beta.requires_grad:
                beta.accumulate_grad(g.sum(axis=(0, 2, 3)))
            if x.requires_grad:
                # dx = istd * (dxhat - mean(dxhat) - xhat * mean(dxhat * xhat))
                dxhat = g * gamma.data[None, :, None, None]
                mean_dxhat = dxhat.mean(axis=(0, 2, 3), keepdims=True)
                mean_dxhat_xhat = np.einsum("nchw,nchw->c", dxhat, xhat) / dt.type(m)
                dx = dxhat - mean_dxhat
                dx -= xhat * mean_dxhat_xhat[None, :, None, None]
                dx *= inv_std[None, :, None, None]
                x.accumulate_grad(dx)

        return _node(out_data, (x, gamma, beta), _bw)

    inv_std = 1.0 / np.sqrt(running_var + dt.type(eps))
    scale = gamma.data * inv_std
    shift = beta.data - running_mean * scale
    out_data = x.data * scale[None, :, None, None] + shift[None, :, None, None]
    xhat = (x.data - running_mean[None, :, None, None]) * inv_std[None, :, None, None]

    def _bw_eval(g):
        if gamma.requires_grad:
            gamma.accumulate_grad((g * xhat).sum(axis=(0, 2, 3)))
        if beta.requires_grad:
            beta.accumulate_grad(g.sum(axis=(0, 2, 3)))
        if x.requires_grad:
            x.accumulate_grad(g * scale[None, :, None, None])

    return _node(out_data, (x, gamma, beta), _bw_eval)


def flatten(x):
    n = x.data.shape[0]
    shape = x.data.shape
    out_data = x.data.reshape(n, -1)

    def _bw(g):
        x.accumulate_grad(g.reshape(shape))

    return _node(out_data, (x,), _bw)


def weighted_sum(x, weights):
    """Scalar projection sum(x * weights); weights are fixed (non-graph)."""
    weights = np.asarray(weights, dtype=x.data.dtype)
    if weights.shape != x.data.shape:
        raise ShapeError(f"weighted_sum: weights {weights.shape} vs input {x.data.shape}")
    out_data = np.asarray((x.data * weights).sum(), dtype=x.data.dtype)

    def _bw(g):
        x.accumulate_grad(g * weights)

    return _node(out_data, (x,), _bw)


def softmax(logits):
    """Row-wise softmax of a plain array (inference helper, not a graph op)."""
    z = logits - logits.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def cross_entropy(logits, labels):
    """Mean negative log-softmax likelihood; returns a scalar loss node.

    Computed through log-sum-exp so the result is finite and nonnegative for
    any finite logits.
    """
    if logits.data.ndim != 2:
        raise ShapeError(f"cross_entropy: expected [N,K] logits, got {logits.data.shape}")
    labels = np.asarray(labels)
    n, k = logits.data.shape
    if labels.shape != (n,):
        raise ShapeError(f"cross_entropy: labels shape {labels.shape} does not match batch {n}")
    if labels.min() < 0 or labels.max() >= k:
        raise ValueError(f"cross_entropy: labels must lie in [0, {k}), got range "
                         f"[{labels.min()}, {labels.max()}]")
    zmax = logits.data.max(axis=1, keepdims=True)
    z = logits.data - zmax
    lse = np.log(np.exp(z).sum(axis=1, keepdims=True)) + zmax
    logp = logits.data - lse
    out_data = np.asarray(-logp[np.arange(n), labels].mean(), dtype=logits.data.dtype)

    def _bw(g):
        p = np.exp(logp)
        p[np.arange(n), labels] -= 1
        logits.accumulate_grad(g * p / logits.data.dtype.type(n))

    return _node(out_data, (logits,), _bw)


def sgd_step(params, lr, momentum=0.0, weight_decay=0.0):
    """One SGD update over a parameter list.

    buffer <- momentum * buffer + grad + weight_decay * value
    value  <- value - lr * buffer
    """
    for p in params:
        if not np.isfinite(p.grad).all():
            raise NumericError(f"non-finite gradient in parameter '{p.name}'")
        buf = p.momentum
        buf *= p.data.dtype.type(momentum)
        buf += p.grad
        if weight_decay:
            buf += p.data.dtype.type(weight_decay) * p.data
        p.data -= p.data.dtype.type(lr) * buf
