"""Minimal dense-tensor reverse-mode autodiff.

Double precision throughout, row-major storage, no broadcasting beyond
scalars and explicit bias/row helpers.  The graph is implicit: every
non-leaf tensor keeps references to its parents and a closure computing
the local vector-Jacobian product.  Gradients accumulate into leaf
``.grad`` buffers until explicitly zeroed.
"""

from __future__ import annotations

import contextlib

import numpy as np

_grad_enabled = True
_nodes_created = 0

# Count of cosine_sim calls that hit a (near-)zero-norm operand.  Those
# calls return similarity 0 with zero gradient instead of NaN.
zero_norm_cosine_events = 0


def nodes_created() -> int:
    """Total graph nodes recorded since process start (diagnostic)."""
    return _nodes_created


def reset_zero_norm_counter() -> None:
    global zero_norm_cosine_events
    zero_norm_cosine_events = 0


@contextlib.contextmanager
def no_grad():
    """Disable graph recording inside the block (teacher-side compute)."""
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = prev


class ShapeError(ValueError):
    pass


class ContractError(ValueError):
    pass


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "_parents", "_vjp", "name")

    def __init__(self, data, requires_grad=False, _parents=(), _vjp=None, name=None):
        global _nodes_created
        self.data = np.asarray(data, dtype=np.float64)
        self.name = name
        self.grad = None
        if _parents and _grad_enabled and any(p.requires_grad for p in _parents):
            self.requires_grad = True
            self._parents = tuple(_parents)
            self._vjp = _vjp
            _nodes_created += 1
        else:
            self.requires_grad = bool(requires_grad) and _grad_enabled if _parents else bool(requires_grad)
            self._parents = ()
            self._vjp = None

    # -- basic introspection -------------------------------------------------

    @property
    def shape(self):
        return self.data.shape

    def item(self) -> float:
        return float(self.data)

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, requires_grad={self.requires_grad})"

    def zero_grad(self) -> None:
        self.grad = None

    def detach(self) -> "Tensor":
        return Tensor(self.data.copy())

    # -- graph machinery -----------------------------------------------------

    def backward(self) -> None:
        """Populate ``.grad`` of every requires_grad leaf reachable from here.

        Repeated calls without zeroing accumulate, matching optimizer-loop
        semantics.
        """
        if self.data.shape != ():
            raise ContractError(
                f"backward() requires a scalar loss, got shape {self.data.shape}"
            )
        order = []
        seen = set()
        stack = [(self, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                order.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for p in node._parents:
                if p.requires_grad and id(p) not in seen:
                    stack.append((p, False))

        grads = {id(self): np.ones((), dtype=np.float64)}
        for node in reversed(order):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            if node._vjp is None:
                # leaf: accumulate into persistent buffer
                if node.grad is None:
                    node.grad = np.zeros_like(node.data)
                node.grad += g
                continue
            for parent, pg in zip(node._parents, node._vjp(g)):
                if not parent.requires_grad or pg is None:
                    continue
                acc = grads.get(id(parent))
                if acc is None:
                    # copy: vjps may hand the same array to several parents
                    grads[id(parent)] = np.array(pg, dtype=np.float64)
                else:
                    acc += pg

    # -- arithmetic ------------------------------------------------------

    def __add__(self, other):
        if isinstance(other, Tensor):
            if self.data.shape != other.data.shape:
                raise ShapeError(f"add shape mismatch {self.data.shape} vs {other.data.shape}")
            return Tensor(self.data + other.data, _parents=(self, other),
                          _vjp=lambda g: (g, g))
        c = float(other)
        return Tensor(self.data + c, _parents=(self,), _vjp=lambda g: (g,))

    __radd__ = __add__

    def __neg__(self):
        return Tensor(-self.data, _parents=(self,), _vjp=lambda g: (-g,))

    def __sub__(self, other):
        if isinstance(other, Tensor):
            return self + (-other)
        return self + (-float(other))

    def __rsub__(self, other):
        return (-self) + float(other)

    def __mul__(self, other):
        if isinstance(other, Tensor):
            if self.data.shape != other.data.shape:
                raise ShapeError(f"mul shape mismatch {self.data.shape} vs {other.data.shape}")
            a, b = self, other
            return Tensor(a.data * b.data, _parents=(a, b),
                          _vjp=lambda g: (g * b.data, g * a.data))
        c = float(other)
        return Tensor(self.data * c, _parents=(self,), _vjp=lambda g: (g * c,))

    __rmul__ = __mul__

    def __truediv__(self, other):
        return self * (1.0 / float(other))

    def matmul(self, other: "Tensor") -> "Tensor":
        if self.data.ndim != 2 or other.data.ndim != 2:
            raise ShapeError(
                f"matmul requires 2-D operands, got {self.data.shape} and {other.data.shape}"
            )
        if self.data.shape[1] != other.data.shape[0]:
            raise ShapeError(
                f"matmul inner dimension mismatch: {self.data.shape} x {other.data.shape}"
            )
        a, b = self, other
        return Tensor(a.data @ b.data, _parents=(a, b),
                      _vjp=lambda g: (g @ b.data.T, a.data.T @ g))

    def __matmul__(self, other):
        return self.matmul(other)

    def transpose(self) -> "Tensor":
        return Tensor(self.data.T, _parents=(self,), _vjp=lambda g: (g.T,))

    @property
    def T(self) -> "Tensor":
        return self.transpose()

    def tanh(self) -> "Tensor":
        out = np.tanh(self.data)
        return Tensor(out, _parents=(self,), _vjp=lambda g: (g * (1.0 - out * out),))

    def sum(self) -> "Tensor":
        shape = self.data.shape
        return Tensor(self.data.sum(), _parents=(self,),
                      _vjp=lambda g: (np.full(shape, float(g)),))

    def mean(self) -> "Tensor":
        n = self.data.size
        shape = self.data.shape
        return Tensor(self.data.mean(), _parents=(self,),
                      _vjp=lambda g: (np.full(shape, float(g) / n),))

    # -- row / column structure --------------------------------------------

    def row(self, i: int) -> "Tensor":
        n, _ = self.data.shape
        def vjp(g):
            full = np.zeros_like(self.data)
            full[i] = g
            return (full,)
        return Tensor(self.data[i], _parents=(self,), _vjp=vjp)

    def rows(self, idx) -> "Tensor":
        idx = np.asarray(idx, dtype=np.intp)
        def vjp(g):
            full = np.zeros_like(self.data)
            np.add.at(full, idx, g)
            return (full,)
        return Tensor(self.data[idx], _parents=(self,), _vjp=vjp)

    def cols(self, lo: int, hi: int) -> "Tensor":
        def vjp(g):
            full = np.zeros_like(self.data)
            full[:, lo:hi] = g
            return (full,)
        return Tensor(self.data[:, lo:hi], _parents=(self,), _vjp=vjp)

    def mean_rows(self) -> "Tensor":
        n = self.data.shape[0]
        def vjp(g):
            return (np.repeat(g[None, :] / n, n, axis=0),)
        return Tensor(self.data.mean(axis=0), _parents=(self,), _vjp=vjp)

    def add_bias(self, bias: "Tensor") -> "Tensor":
        """[T, D] + [D] row-broadcast add."""
        if self.data.ndim != 2 or bias.data.ndim != 1 or self.data.shape[1] != bias.data.shape[0]:
            raise ShapeError(f"add_bias shapes {self.data.shape} + {bias.data.shape}")
        return Tensor(self.data + bias.data[None, :], _parents=(self, bias),
                      _vjp=lambda g: (g, g.sum(axis=0)))


def concat_rows(parts) -> Tensor:
    """Stack 1-D ([H] -> one row) and 2-D pieces into a single [T, H] tensor."""
    parts = list(parts)
    if not parts:
        raise ShapeError("concat_rows needs at least one piece")
    mats = [p.data if p.data.ndim == 2 else p.data[None, :] for p in parts]
    counts = [m.shape[0] for m in mats]
    def vjp(g):
        out = []
        ofs = 0
        for p, n in zip(parts, counts):
            piece = g[ofs:ofs + n]
            out.append(piece[0] if p.data.ndim == 1 else piece)
            ofs += n
        return tuple(out)
    return Tensor(np.concatenate(mats, axis=0), _parents=tuple(parts), _vjp=vjp)


def concat_cols(parts) -> Tensor:
    parts = list(parts)
    counts = [p.data.shape[1] for p in parts]
    def vjp(g):
        out = []
        ofs = 0
        for n in counts:
            out.append(g[:, ofs:ofs + n])
            ofs += n
        return tuple(out)
    return Tensor(np.concatenate([p.data for p in parts], axis=1),
                  _parents=tuple(parts), _vjp=vjp)


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    """Max-stabilized softmax along ``axis``; rows sum to 1."""
    z = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    out = e / e.sum(axis=axis, keepdims=True)
    def vjp(g):
        dot = (g * out).sum(axis=axis, keepdims=True)
        return (out * (g - dot),)
    return Tensor(out, _parents=(x,), _vjp=vjp)


def multi_head_attention(q: Tensor, k: Tensor, v: Tensor, n_heads: int,
                         mask: np.ndarray) -> Tensor:
    """Causal softmax attention over [T, H] projections, all heads fused.

    mask is an additive [T, T] array (0 on allowed, large negative on
    disallowed positions).  Output is [T, H] with heads re-concatenated.
    """
    t, h = q.data.shape
    dh = h // n_heads
    scale = 1.0 / np.sqrt(dh)
    qh = q.data.reshape(t, n_heads, dh)
    kh = k.data.reshape(t, n_heads, dh)
    vh = v.data.reshape(t, n_heads, dh)
    scores = np.einsum("qnd,knd->nqk", qh, kh) * scale + mask[None, :, :]
    scores -= scores.max(axis=-1, keepdims=True)
    attn = np.exp(scores)
    attn /= attn.sum(axis=-1, keepdims=True)
    out = np.einsum("nqk,knd->qnd", attn, vh).reshape(t, h)

    def vjp(g):
        gh = g.reshape(t, n_heads, dh)
        d_attn = np.einsum("qnd,knd->nqk", gh, vh)
        dv = np.einsum("nqk,qnd->knd", attn, gh).reshape(t, h)
        ds = attn * (d_attn - (d_attn * attn).sum(axis=-1, keepdims=True))
        dq = np.einsum("nqk,knd->qnd", ds, kh).reshape(t, h) * scale
        dk = np.einsum("nqk,qnd->knd", ds, qh).reshape(t, h) * scale
        return (dq, dk, dv)

    return Tensor(out, _parents=(q, k, v), _vjp=vjp)


def cosine_sim(a: Tensor, b: Tensor, eps: float = 1e-12) -> Tensor:
    """Cosine similarity of two equal-length vectors, as a scalar tensor.

    A (near-)zero-norm operand yields similarity 0 with zero gradient and
    bumps the module-level diagnostic counter rather than producing NaN.
    """
    global zero_norm_cosine_events
    if a.data.ndim != 1 or b.data.ndim != 1 or a.data.shape != b.data.shape:
        raise ShapeError(f"cosine_sim requires equal-length vectors, got {a.data.shape} and {b.data.shape}")
    na = float(np.linalg.norm(a.data))
    nb = float(np.linalg.norm(b.data))
    if na < eps or nb < eps:
        zero_norm_cosine_events += 1
        return Tensor(0.0, _parents=(a, b),
                      _vjp=lambda g: (np.zeros_like(a.data), np.zeros_like(b.data)))
    c = float(a.data @ b.data) / (na * nb)
    def vjp(g):
        g = float(g)
        da = g * (b.data / (na * nb) - c * a.data / (na * na))
        db = g * (a.data / (na * nb) - c * b.data / (nb * nb))
        return (da, db)
    return Tensor(c, _parents=(a, b), _vjp=vjp)


def layer_norm(x: Tensor, gain: Tensor, bias: Tensor, eps: float = 1e-5) -> Tensor:
    """Per-row layer normalization over the last axis of a [T, H] tensor."""
    mu = x.data.mean(axis=-1, keepdims=True)
    var = x.data.var(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = (x.data - mu) * inv
    out = xhat * gain.data[None, :] + bias.data[None, :]
    h = x.data.shape[-1]
    def vjp(g):
        dxhat = g * gain.data[None, :]
        dx = inv * (dxhat - dxhat.mean(axis=-1, keepdims=True)
                    - xhat * (dxhat * xhat).mean(axis=-1, keepdims=True))
        return (dx, (g * xhat).sum(axis=0), g.sum(axis=0))
    return Tensor(out, _parents=(x, gain, bias), _vjp=vjp)


def embedding(table: Tensor, ids) -> Tensor:
    """Gather rows ``ids`` from an embedding table; grads scatter-add back."""
    ids = np.asarray(ids, dtype=np.intp)
    if ids.ndim != 1:
        raise ShapeError("embedding ids must be a 1-D index array")
    if ids.size and (ids.min() < 0 or ids.max() >= table.data.shape[0]):
        raise ContractError(f"token id out of range for table of {table.data.shape[0]} rows")
    def vjp(g):
        full = np.zeros_like(table.data)
        np.add.at(full, ids, g)
        return (full,)
    return Tensor(table.data[ids], _parents=(table,), _vjp=vjp)


def cross_entropy(logits: Tensor, targets, mask) -> Tensor:
    """Mean masked next-token cross-entropy.

    targets: int array [T] (entries at masked positions ignored);
    mask:    float array [T], weights >0 select supervised positions.
    """
    targets = np.asarray(targets, dtype=np.intp)
    mask = np.asarray(mask, dtype=np.float64)
    t_count, vocab = logits.data.shape
    if targets.shape != (t_count,) or mask.shape != (t_count,):
        raise ShapeError("cross_entropy targets/mask must match logits rows")
    total = float(mask.sum())
    if total <= 0.0:
        raise ContractError("cross_entropy called with an all-zero mask")
    z = logits.data - logits.data.max(axis=1, keepdims=True)
    logsumexp = np.log(np.exp(z).sum(axis=1)) + logits.data.max(axis=1)
    safe_targets = np.clip(targets, 0, vocab - 1)
    nll = logsumexp - logits.data[np.arange(t_count), safe_targets]
    loss = float((mask * nll).sum() / total)
    def vjp(g):
        p = np.exp(z)
        p /= p.sum(axis=1, keepdims=True)
        p[np.arange(t_count), safe_targets] -= 1.0
        return (float(g) * p * (mask / total)[:, None],)
    return Tensor(loss, _parents=(logits,), _vjp=vjp)


def finite_diff_check(f, params, eps: float = 1e-5, samples_per_param: int = 4,
                      rng=None):
    """Compare analytic gradients of scalar ``f()`` against central differences.

    params: dict name -> leaf Tensor that ``f`` reads through ``.data``.
    Returns (max_relative_error, worst_parameter_name).  Relative error is
    |analytic - numeric| / max(1e-8, |numeric|), maximized over sampled
    coordinates.
    """
    rng = rng or np.random.default_rng(0)
    for p in params.values():
        p.zero_grad()
    loss = f()
    loss.backward()
    analytic = {k: (p.grad.copy() if p.grad is not None else np.zeros_like(p.data))
                for k, p in params.items()}

    worst = 0.0
    worst_name = None
    for name, p in params.items():
        flat = p.data.reshape(-1)
        n = flat.size
        coords = rng.choice(n, size=min(samples_per_param, n), replace=False)
        for c in coords:
            orig = flat[c]
            flat[c] = orig + eps
            fp = f().item()
            flat[c] = orig - eps
            fm = f().item()
            flat[c] = orig
            numeric = (fp - fm) / (2.0 * eps)
            a = analytic[name].reshape(-1)[c]
            rel = abs(a - numeric) / max(1e-8, abs(numeric))
            if rel > worst:
                worst = rel
                worst_name = name
    return worst, worst_name
