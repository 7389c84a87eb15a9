"""Dense float64 arrays with reverse-mode autodiff and a multiply-add counter.

Every layer in the package is assembled from the ops defined here.  Values
are numpy float64 arrays; gradients are exact reverse-mode, recorded on an
explicit :class:`Tape`.  Only ``matmul`` and ``conv1d_temporal`` accrue
multiply-adds on active :class:`OpCounter` instances, which is what lets
analytic cost tables be checked against instrumented forward passes with
integer equality.

A tape and the tensors recorded on it are confined to one thread; tensors
not attached to a tape are plain immutable value holders.
"""

from __future__ import annotations

import itertools
import threading

import numpy as np

from .errors import BatchSizeError, ConfigurationError, ContractError, DimensionError

_STATE = threading.local()


def _active_tape():
    return getattr(_STATE, "tape", None)


def _counters():
    return getattr(_STATE, "counters", ())


def _count(muladds):
    for c in _counters():
        c.muladds += muladds


class Tensor:
    """A dense float64 array, optionally tracked for differentiation.

    ``requires_grad`` marks a leaf whose gradient should be produced by
    :meth:`Tape.backward`.  ``node_id`` is assigned lazily by the tape the
    tensor participates in and is only meaningful for that tape.
    """

    __slots__ = ("data", "requires_grad", "_tape_id", "_node_id")

    def __init__(self, data, requires_grad=False):
        arr = np.asarray(data, dtype=np.float64)
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self._tape_id = 0
        self._node_id = -1

    @property
    def shape(self):
        return self.data.shape

    @property
    def node_id(self):
        return self._node_id if self._tape_id else None

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, requires_grad={self.requires_grad})"


def tensor(data, requires_grad=False):
    return Tensor(data, requires_grad=requires_grad)


def zeros(shape, requires_grad=False):
    return Tensor(np.zeros(shape), requires_grad=requires_grad)


def detach(x):
    """Value copy of ``x`` that no gradient flows through."""
    return Tensor(x.data, requires_grad=False)


class OpCounter:
    """Accumulates multiply-adds while active as a context manager.

    Counts are analytic (``m*k*n`` per matmul, ``T*k*C_in*C_out`` per
    temporal convolution) and monotonically non-decreasing while enabled.
    """

    def __init__(self):
        self.muladds = 0
        self.enabled = False

    def __enter__(self):
        stack = getattr(_STATE, "counters", None)
        if stack is None:
            stack = []
            _STATE.counters = stack
        stack.append(self)
        self.enabled = True
        return self

    def __exit__(self, *exc):
        _STATE.counters.remove(self)
        self.enabled = False
        return False


class Tape:
    """Ordered record of differentiable ops plus the gradient store.

    Ops are appended in execution order, so the record is already a
    topological order and :meth:`backward` can traverse it reversed.
    Gradient accumulation is deterministic: contributions arrive in
    descending output-node order, inputs within an op in argument order.
    """

    _ids = itertools.count(1)

    def __init__(self):
        self.tape_id = next(Tape._ids)
        self._ops = []
        self._next_node = 0
        self.grads = {}

    def __enter__(self):
        if _active_tape() is not None:
            raise ContractError("a Tape is already active on this thread")
        _STATE.tape = self
        return self

    def __exit__(self, *exc):
        _STATE.tape = None
        return False

    def _register(self, t):
        if t._tape_id != self.tape_id:
            t._tape_id = self.tape_id
            t._node_id = self._next_node
            self._next_node += 1
        return t._node_id

    def backward(self, loss):
        """Populate gradients for every ``requires_grad`` leaf under ``loss``."""
        if not isinstance(loss, Tensor) or loss.data.shape != ():
            raise ContractError("backward expects a scalar Tensor loss")
        if loss._tape_id != self.tape_id:
            raise ContractError("loss was not recorded on this tape")
        self.grads = {loss._node_id: np.ones(())}
        for out_id, in_ids, in_reqs, bwd in reversed(self._ops):
            g = self.grads.pop(out_id, None)
            if g is None:
                continue
            in_grads = bwd(g)
            for nid, req, gi in zip(in_ids, in_reqs, in_grads):
                if not req or gi is None:
                    continue
                slot = self.grads.get(nid)
                if slot is None:
                    self.grads[nid] = gi
                else:
                    self.grads[nid] = slot + gi
        return self.grads

    def grad(self, t):
        """Gradient array for ``t`` after backward, or None."""
        if t._tape_id != self.tape_id:
            return None
        return self.grads.get(t._node_id)


def backward(tape, loss):
    """Run reverse-mode differentiation; returns the tape's gradient store."""
    return tape.backward(loss)


def _record(out_data, inputs, bwd, muladds=0):
    if muladds:
        _count(muladds)
    tape = _active_tape()
    track = tape is not None and any(t.requires_grad for t in inputs)
    out = Tensor(out_data, requires_grad=track)
    if track:
        in_ids = tuple(tape._register(t) for t in inputs)
        in_reqs = tuple(t.requires_grad for t in inputs)
        out_id = tape._register(out)
        tape._ops.append((out_id, in_ids, in_reqs, bwd))
    return out


def _unbroadcast(g, shape):
    extra = g.ndim - len(shape)
    if extra:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, (gs, ss) in enumerate(zip(g.shape, shape)) if ss == 1 and gs != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


# ---------------------------------------------------------------------------
# elementwise / structural ops


def add(a, b):
    out = a.data + b.data

    def bwd(g):
        return _unbroadcast(g, a.data.shape), _unbroadcast(g, b.data.shape)

    return _record(out, (a, b), bwd)


def sub(a, b):
    out = a.data - b.data

    def bwd(g):
        return _unbroadcast(g, a.data.shape), -_unbroadcast(g, b.data.shape)

    return _record(out, (a, b), bwd)


def mul(a, b):
    out = a.data * b.data

    def bwd(g):
        return (_unbroadcast(g * b.data, a.data.shape),
                _unbroadcast(g * a.data, b.data.shape))

    return _record(out, (a, b), bwd)


def scale(a, s):
    s = float(s)
    out = a.data * s

    def bwd(g):
        return (g * s,)

    return _record(out, (a,), bwd)


def mean_all(a):
    out = a.data.mean()
    n = a.data.size

    def bwd(g):
        return (np.full(a.data.shape, g / n),)

    return _record(np.asarray(out), (a,), bwd)


def sum_all(a):
    out = a.data.sum()

    def bwd(g):
        return (np.full(a.data.shape, g),)

    return _record(np.asarray(out), (a,), bwd)


def transpose(a, axes):
    axes = tuple(axes)
    inv = tuple(np.argsort(axes))
    out = a.data.transpose(axes)

    def bwd(g):
        return (g.transpose(inv),)

    return _record(out, (a,), bwd)


def reshape(a, shape):
    shape = tuple(shape)
    old = a.data.shape
    out = a.data.reshape(shape)

    def bwd(g):
        return (g.reshape(old),)

    return _record(out, (a,), bwd)


def slice_rows(a, start, stop):
    """Rows ``start:stop`` along axis 0; backward zero-pads the complement."""
    out = a.data[start:stop].copy()
    full = a.data.shape

    def bwd(g):
        gi = np.zeros(full)
        gi[start:stop] = g
        return (gi,)

    return _record(out, (a,), bwd)


def take_per_row(a, idx):
    """``out[r] = a[r, idx[r]]`` for a 2-D tensor; backward scatters."""
    if a.data.ndim != 2:
        raise DimensionError(f"take_per_row expects 2-D input, got {a.data.shape}")
    idx = np.asarray(idx, dtype=np.intp)
    rows = np.arange(a.data.shape[0])
    out = a.data[rows, idx]
    shp = a.data.shape

    def bwd(g):
        gi = np.zeros(shp)
        gi[rows, idx] = g
        return (gi,)

    return _record(out, (a,), bwd)


def assemble_rows(sources, total_rows):
    """Build a ``total_rows x C`` tensor from row slices of source tensors.

    ``sources`` is a sequence of ``(tensor, src_idx, dst_idx)`` triples whose
    destination indices must partition ``range(total_rows)``.  The forward
    copies values (no recomputation of any source); backward routes each
    destination row's gradient to its source row.
    """
    if not sources:
        raise ContractError("assemble_rows needs at least one source")
    ncols = sources[0][0].data.shape[1]
    dst_all = np.concatenate([np.asarray(d, dtype=np.intp) for _, _, d in sources])
    if len(dst_all) != total_rows or len(np.unique(dst_all)) != total_rows:
        raise ContractError("destination indices must partition the output rows")
    out = np.empty((total_rows, ncols))
    prepared = []
    for t, src, dst in sources:
        src = np.asarray(src, dtype=np.intp)
        dst = np.asarray(dst, dtype=np.intp)
        out[dst] = t.data[src]
        prepared.append((t, src, dst))

    def bwd(g):
        grads = []
        for t, src, dst in prepared:
            gi = np.zeros(t.data.shape)
            np.add.at(gi, src, g[dst])
            grads.append(gi)
        return grads

    return _record(out, tuple(t for t, _, _ in prepared), bwd)


def hard_from_soft(soft, hard_values):
    """Forward the exact hard values; backward passes gradients to ``soft``.

    This is the straight-through coupling: the output's forward value is
    ``hard_values`` verbatim, while the backward behaves as if the output
    were ``soft``.
    """
    hard = np.asarray(hard_values, dtype=np.float64)
    if hard.shape != soft.data.shape:
        raise DimensionError(f"hard {hard.shape} vs soft {soft.data.shape}")

    def bwd(g):
        return (g,)

    return _record(hard.copy(), (soft,), bwd)


# ---------------------------------------------------------------------------
# linear algebra


def matmul(a, b):
    """Matrix product with limited broadcasting; counts ``m*k*n`` per matrix pair.

    Supported operand ranks: 2Dx2D, NDx2D, 2DxND, NDxND (matching batch
    dims), and 2Dx1D.
    """
    ad, bd = a.data, b.data
    if ad.ndim >= 2 and bd.ndim == 1:
        if ad.shape[-1] != bd.shape[0]:
            raise DimensionError(f"matmul: {ad.shape} @ {bd.shape}")
        out = ad @ bd
        muladds = ad.size  # prod(batch)*m*k with n == 1

        def bwd(g):
            ga = np.multiply.outer(g, bd) if ad.ndim == 2 else g[..., None] * bd
            gb = np.tensordot(g, ad, axes=(tuple(range(g.ndim)), tuple(range(ad.ndim - 1))))
            return ga, gb

        return _record(out, (a, b), bwd, muladds)

    if ad.ndim < 2 or bd.ndim < 2:
        raise DimensionError(f"matmul: unsupported ranks {ad.shape} @ {bd.shape}")
    if ad.shape[-1] != bd.shape[-2]:
        raise DimensionError(f"matmul: inner extents differ: {ad.shape} @ {bd.shape}")
    out = ad @ bd
    m, k, n = ad.shape[-2], ad.shape[-1], bd.shape[-1]
    batch = int(np.prod(out.shape[:-2], dtype=np.int64)) if out.ndim > 2 else 1
    muladds = batch * m * k * n

    if ad.ndim == 2 and bd.ndim == 2:
        def bwd(g):
            return g @ bd.T, ad.T @ g
    elif bd.ndim == 2:
        def bwd(g):
            ga = g @ bd.T
            gb = ad.reshape(-1, k).T @ g.reshape(-1, n)
            return ga, gb
    elif ad.ndim == 2:
        def bwd(g):
            ga = np.einsum("...mn,...kn->mk", g, bd)
            gb = np.swapaxes(ad, -1, -2)[None] @ g if bd.ndim == 3 else ad.T @ g
            gb = ad.T @ g
            return ga, gb
    else:
        if ad.shape[:-2] != bd.shape[:-2]:
            raise DimensionError(f"matmul: batch dims differ: {ad.shape} @ {bd.shape}")

        def bwd(g):
            ga = g @ np.swapaxes(bd, -1, -2)
            gb = np.swapaxes(ad, -1, -2) @ g
            return ga, gb

    return _record(out, (a, b), bwd, muladds)


# ---------------------------------------------------------------------------
# nonlinearities and normalizations


def relu(a):
    mask = a.data > 0
    out = np.where(mask, a.data, 0.0)

    def bwd(g):
        return (g * mask,)

    return _record(out, (a,), bwd)


def softmax_rows(a):
    """Row-stochastic softmax over the last axis, max-subtracted for stability."""
    x = a.data
    shifted = x - x.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    s = e / e.sum(axis=-1, keepdims=True)

    def bwd(g):
        dot = (g * s).sum(axis=-1, keepdims=True)
        return (s * (g - dot),)

    return _record(s, (a,), bwd)


def log_softmax(a):
    x = a.data
    m = x.max(axis=-1, keepdims=True)
    lse = m + np.log(np.exp(x - m).sum(axis=-1, keepdims=True))
    out = x - lse
    s = np.exp(out)

    def bwd(g):
        return (g - s * g.sum(axis=-1, keepdims=True),)

    return _record(out, (a,), bwd)


def max_pool_axis(a, axis):
    """Max over one axis (removed); gradient goes to the first max per slot."""
    nd = a.data.ndim
    if not -nd <= axis < nd:
        raise DimensionError(f"max_pool_axis: axis {axis} invalid for shape {a.data.shape}")
    axis = axis % nd
    if a.data.shape[axis] < 1:
        raise DimensionError("max_pool_axis: empty axis")
    idx = np.argmax(a.data, axis=axis)
    out = np.take_along_axis(a.data, np.expand_dims(idx, axis), axis=axis).squeeze(axis)
    shp = a.data.shape

    def bwd(g):
        gi = np.zeros(shp)
        np.put_along_axis(gi, np.expand_dims(idx, axis), np.expand_dims(g, axis), axis=axis)
        return (gi,)

    return _record(out, (a,), bwd)


class BnState:
    """Running statistics for one batch-norm site."""

    def __init__(self, channels, momentum=0.9, eps=1e-5):
        self.running_mean = np.zeros(channels)
        self.running_var = np.ones(channels)
        self.momentum = momentum
        self.eps = eps


def batch_norm(x, gamma, beta, state, mode):
    """Per-channel normalization over all leading axes of ``x``.

    Train mode uses batch statistics (biased variance) and folds them into
    the running stats with the state's momentum; eval mode normalizes with
    the running stats.  Train mode requires at least two rows.
    """
    if mode not in ("train", "eval"):
        raise ConfigurationError(f"batch_norm mode must be train or eval, got {mode!r}")
    xd = x.data
    c = xd.shape[-1]
    axes = tuple(range(xd.ndim - 1))
    rows = int(np.prod(xd.shape[:-1], dtype=np.int64)) if xd.ndim > 1 else 1
    eps = state.eps

    if mode == "train":
        if rows < 2:
            raise BatchSizeError(f"batch_norm train mode needs >= 2 rows, got {rows}")
        mean = xd.mean(axis=axes)
        var = xd.var(axis=axes)
        inv = 1.0 / np.sqrt(var + eps)
        xhat = (xd - mean) * inv
        m = state.momentum
        state.running_mean = m * state.running_mean + (1.0 - m) * mean
        state.running_var = m * state.running_var + (1.0 - m) * var
        out = gamma.data * xhat + beta.data

        def bwd(g):
            dgamma = (g * xhat).sum(axis=axes)
            dbeta = g.sum(axis=axes)
            gmean = g.mean(axis=axes)
            gxhat_mean = (g * xhat).mean(axis=axes)
            dx = gamma.data * inv * (g - gmean - xhat * gxhat_mean)
            return dx, dgamma, dbeta

        return _record(out, (x, gamma, beta), bwd)

    inv = 1.0 / np.sqrt(state.running_var + eps)
    xhat = (xd - state.running_mean) * inv
    out = gamma.data * xhat + beta.data

    def bwd(g):
        dgamma = (g * xhat).sum(axis=axes)
        dbeta = g.sum(axis=axes)
        dx = g * (gamma.data * inv)
        return dx, dgamma, dbeta

    return _record(out, (x, gamma, beta), bwd)


# ---------------------------------------------------------------------------
# temporal convolution


def conv1d_temporal(x, w, bias):
    """Same-padded convolution along the time axis.

    ``x`` is ``(T, C_in)`` or ``(..., T, C_in)``; ``w`` is ``(k, C_in,
    C_out)`` with odd ``k``; output keeps ``T``.  Counts
    ``T*k*C_in*C_out`` multiply-adds per leading batch element.
    """
    k, cin, cout = w.data.shape
    if k % 2 == 0:
        raise ConfigurationError(f"conv1d_temporal kernel size must be odd, got {k}")
    xd = x.data
    if xd.ndim < 2 or xd.shape[-1] != cin:
        raise DimensionError(f"conv1d_temporal: input {xd.shape} vs weight {w.data.shape}")
    t = xd.shape[-2]
    pad = k // 2
    width = [(0, 0)] * (xd.ndim - 2) + [(pad, pad), (0, 0)]
    padded = np.pad(xd, width)
    # windows: (..., T, C_in, k) -> (..., T, k*C_in)
    win = np.lib.stride_tricks.sliding_window_view(padded, k, axis=-2)
    cols = np.ascontiguousarray(np.swapaxes(win, -1, -2)).reshape(xd.shape[:-1] + (k * cin,))
    wmat = w.data.reshape(k * cin, cout)
    out = cols @ wmat + bias.data
    batch = int(np.prod(xd.shape[:-2], dtype=np.int64)) if xd.ndim > 2 else 1
    muladds = batch * t * k * cin * cout

    def bwd(g):
        lead = tuple(range(g.ndim - 1))
        dbias = g.sum(axis=lead)
        dwmat = cols.reshape(-1, k * cin).T @ g.reshape(-1, cout)
        dcols = (g @ wmat.T).reshape(xd.shape[:-1] + (k, cin))
        dpad = np.zeros(padded.shape)
        for j in range(k):
            dpad[..., j:j + t, :] += dcols[..., j, :]
        dx = dpad[..., pad:pad + t, :]
        return dx, dwmat.reshape(k, cin, cout), dbias

    return _record(out, (x, w, bias), bwd, muladds)


# ---------------------------------------------------------------------------
# losses


def cross_entropy(logits, label):
    """Negative log softmax probability of ``label``, via log-sum-exp."""
    x = logits.data
    if x.ndim != 1:
        raise DimensionError(f"cross_entropy expects a logit vector, got {x.shape}")
    n = x.shape[0]
    label = int(label)
    if not 0 <= label < n:
        raise IndexError(f"label {label} out of range for {n} classes")
    m = x.max()
    lse = m + np.log(np.exp(x - m).sum())
    out = lse - x[label]
    p = np.exp(x - lse)

    def bwd(g):
        gi = p * g
        gi[label] -= g
        return (gi,)

    return _record(np.asarray(out), (logits,), bwd)


def cross_entropy_mean(logits, labels):
    """Mean cross-entropy over rows of ``(B, n)`` logits."""
    x = logits.data
    if x.ndim != 2:
        raise DimensionError(f"cross_entropy_mean expects (B, n) logits, got {x.shape}")
    b, n = x.shape
    labels = np.asarray(labels, dtype=np.intp)
    if labels.shape != (b,):
        raise ContractError(f"labels shape {labels.shape} does not match batch {b}")
    if labels.min() < 0 or labels.max() >= n:
        raise IndexError("label out of range")
    m = x.max(axis=1, keepdims=True)
    lse = m + np.log(np.exp(x - m).sum(axis=1, keepdims=True))
    rows = np.arange(b)
    out = (lse[:, 0] - x[rows, labels]).mean()
    p = np.exp(x - lse)

    def bwd(g):
        gi = p * (g / b)
        gi[rows, labels] -= g / b
        return (gi,)

    return _record(np.asarray(out), (logits,), bwd)


# ---------------------------------------------------------------------------
# gradient checking


class FiniteDiffReport:
    """Outcome of a central-difference gradient check."""

    def __init__(self, analytic, numeric, rel_err, tol):
        self.analytic = analytic
        self.numeric = numeric
        self.rel_err = rel_err
        self.max_rel_err = float(rel_err.max()) if rel_err.size else 0.0
        self.passed = bool(self.max_rel_err < tol)

    def __repr__(self):
        status = "pass" if self.passed else "FAIL"
        return f"FiniteDiffReport({status}, max_rel_err={self.max_rel_err:.3e})"


def finite_diff_check(f, x, h=1e-6, tol=1e-5):
    """Compare analytic gradients of scalar ``f(x)`` against central differences.

    ``f`` must be deterministic and output-pure (internal state updates are
    fine as long as they do not change the returned value).  The relative
    error is ``|a - n| / max(|a|, |n|, 1e-4)`` per element.
    """
    with Tape() as tape:
        out = f(x)
        tape.backward(out)
        analytic = tape.grad(x)
    analytic = np.zeros(x.data.shape) if analytic is None else np.array(analytic)
    numeric = np.empty(x.data.shape)
    flat = x.data.reshape(-1)
    nflat = numeric.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        fp = float(f(x).data)
        flat[i] = orig - h
        fm = float(f(x).data)
        flat[i] = orig
        nflat[i] = (fp - fm) / (2.0 * h)
    denom = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), 1e-4)
    rel = np.abs(analytic - numeric) / denom
    return FiniteDiffReport(analytic, numeric, rel, tol)
