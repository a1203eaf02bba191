"""Dense forward ops with a recording tape for reverse-mode gradients.

Covers exactly the layer zoo the agent and mixing networks need: fully
connected layers, a GRU cell (update / reset / candidate gates), and the
handful of elementwise and reduction ops the training loss is built from.
No general autodiff, no convolutions, no GPU.

Shape convention is column-batch: a single sample is a 1-D vector, a batch
is ``(dim, batch)`` and a padded episode batch is ``(time, dim, batch)``.
All math runs in float64 so oracle comparisons in the tests stay tight.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np


class TapeError(RuntimeError):
    """Misuse of the gradient tape (e.g. backward before a forward pass)."""


class Node:
    """A value produced on (or fed into) a tape."""

    __slots__ = ("value",)

    def __init__(self, value):
        self.value = np.asarray(value, dtype=np.float64)


class Param(Node):
    """A trainable array with persistent identity across tapes."""

    __slots__ = ("name",)

    def __init__(self, value, name: str = ""):
        super().__init__(value)
        if not np.all(np.isfinite(self.value)):
            raise ValueError(f"param {name!r} contains non-finite entries")
        self.name = name


def _val(x) -> np.ndarray:
    if isinstance(x, Node):
        return x.value
    return np.asarray(x, dtype=np.float64)


class Tape:
    """Ordered record of the primitive ops of one forward pass.

    The reverse sweep replays records in exact reverse order; gradients
    accumulate additively wherever a node fans out to several consumers.
    """

    def __init__(self):
        self._records = []  # (output node, input tuple, backward closure)

    def record(self, out: Node, inputs: tuple, bwd) -> None:
        self._records.append((out, inputs, bwd))

    def __len__(self) -> int:
        return len(self._records)


class GradStore:
    """Gradients keyed by node identity; absent nodes read as zero."""

    def __init__(self, grads: dict):
        self._grads = grads

    def of(self, node: Node) -> np.ndarray:
        g = self._grads.get(node)
        if g is None:
            return np.zeros_like(node.value)
        return g

    def has(self, node: Node) -> bool:
        return node in self._grads


def backward(tape: Tape, loss_grad: float = 1.0) -> GradStore:
    """Reverse sweep over a completed forward pass ending in a scalar loss."""
    if not tape._records:
        raise TapeError("backward called before any forward op was recorded")
    final = tape._records[-1][0]
    if final.value.size != 1:
        raise TapeError(
            f"tape must end in a scalar loss, last output has shape {final.value.shape}"
        )
    grads: dict = {final: np.full_like(final.value, float(loss_grad))}
    for out, inputs, bwd in reversed(tape._records):
        g = grads.pop(out, None)
        if g is None:
            continue
        for inp, gi in zip(inputs, bwd(g)):
            if gi is None or not isinstance(inp, Node):
                continue
            acc = grads.get(inp)
            if acc is None:
                # 0-d products come back as immutable numpy scalars
                grads[inp] = np.asarray(gi)
            else:
                acc += gi
    return GradStore(grads)


# ---------------------------------------------------------------------------
# shape helpers for the (time, dim, batch) layout
# ---------------------------------------------------------------------------


def _fold(a: np.ndarray) -> np.ndarray:
    """(T, D, B) -> (D, T*B), so one matmul covers every timestep."""
    t, d, b = a.shape
    return np.ascontiguousarray(a.transpose(1, 0, 2)).reshape(d, t * b)


def _unfold(a: np.ndarray, t: int, b: int) -> np.ndarray:
    """(D, T*B) -> (T, D, B), inverse of :func:`_fold`."""
    d = a.shape[0]
    return np.ascontiguousarray(a.reshape(d, t, b).transpose(1, 0, 2))


# ---------------------------------------------------------------------------
# primitive ops
# ---------------------------------------------------------------------------


def linear_forward(x, w, b=None, tape: Tape | None = None) -> Node:
    """w @ x (+ b) for x of shape (in,), (in, batch) or (time, in, batch)."""
    xv = _val(x)
    wv = _val(w)
    in_dim = xv.shape[1] if xv.ndim == 3 else xv.shape[0]
    if wv.ndim != 2 or in_dim != wv.shape[1]:
        raise ValueError(f"linear shape mismatch: w {wv.shape} vs x {xv.shape}")
    bv = _val(b) if b is not None else None
    if bv is not None and bv.shape != (wv.shape[0],):
        raise ValueError(f"linear bias shape mismatch: b {bv.shape} vs w {wv.shape}")

    if xv.ndim == 1:
        yv = wv @ xv
        if bv is not None:
            yv = yv + bv
        out = Node(yv)
        if tape is not None:
            def bwd(g, xv=xv, wv=wv):
                return np.outer(g, xv), wv.T @ g, g.copy() if b is not None else None
            tape.record(out, (w, x, b), bwd)
        return out

    if xv.ndim == 2:
        yv = wv @ xv
        if bv is not None:
            yv = yv + bv[:, None]
        out = Node(yv)
        if tape is not None:
            def bwd(g, xv=xv, wv=wv):
                return g @ xv.T, wv.T @ g, g.sum(axis=1) if b is not None else None
            tape.record(out, (w, x, b), bwd)
        return out

    t, _, bsz = xv.shape
    xf = _fold(xv)
    yf = wv @ xf
    if bv is not None:
        yf = yf + bv[:, None]
    out = Node(_unfold(yf, t, bsz))
    if tape is not None:
        def bwd(g, xf=xf, wv=wv, t=t, bsz=bsz):
            gf = _fold(g)
            return (
                gf @ xf.T,
                _unfold(wv.T @ gf, t, bsz),
                gf.sum(axis=1) if b is not None else None,
            )
        tape.record(out, (w, x, b), bwd)
    return out


def _unary(x, fn, dfn, tape):
    xv = _val(x)
    yv, saved = fn(xv)
    out = Node(yv)
    if tape is not None:
        def bwd(g, saved=saved):
            return (g * dfn(saved),)
        tape.record(out, (x,), bwd)
    return out


def relu(x, tape: Tape | None = None) -> Node:
    return _unary(x, lambda v: (np.maximum(v, 0.0), v), lambda v: (v > 0).astype(np.float64), tape)


def elu(x, tape: Tape | None = None) -> Node:
    def fwd(v):
        y = np.where(v > 0, v, np.expm1(v))
        return y, y
    # elu'(x) = 1 for x > 0, exp(x) = y + 1 otherwise
    return _unary(x, fwd, lambda y: np.where(y > 0, 1.0, y + 1.0), tape)


def abs_value(x, tape: Tape | None = None) -> Node:
    return _unary(x, lambda v: (np.abs(v), v), np.sign, tape)


def add(a, b, tape: Tape | None = None) -> Node:
    av, bv = _val(a), _val(b)
    if av.shape != bv.shape:
        raise ValueError(f"add shape mismatch: {av.shape} vs {bv.shape}")
    out = Node(av + bv)
    if tape is not None:
        def bwd(g):
            return g.copy(), g.copy()
        tape.record(out, (a, b), bwd)
    return out


def mul(a, b, tape: Tape | None = None) -> Node:
    av, bv = _val(a), _val(b)
    out = Node(av * bv)
    if tape is not None:
        def bwd(g, av=av, bv=bv):
            return g * bv, g * av
        tape.record(out, (a, b), bwd)
    return out


def sum_all(x, tape: Tape | None = None) -> Node:
    xv = _val(x)
    out = Node(xv.sum())
    if tape is not None:
        def bwd(g, shape=xv.shape):
            return (np.full(shape, float(g)),)
        tape.record(out, (x,), bwd)
    return out


def slice_time(x, t0: int, t1: int, tape: Tape | None = None) -> Node:
    """Select timesteps [t0, t1) of a (time, ...) array."""
    xv = _val(x)
    out = Node(np.ascontiguousarray(xv[t0:t1]))
    if tape is not None:
        def bwd(g, shape=xv.shape, t0=t0, t1=t1):
            gx = np.zeros(shape)
            gx[t0:t1] = g
            return (gx,)
        tape.record(out, (x,), bwd)
    return out


def take_per_column(q, idx: np.ndarray, tape: Tape | None = None) -> Node:
    """Select q[t, idx[t, b], b] from a (time, actions, batch) array."""
    qv = _val(q)
    sel = np.take_along_axis(qv, idx[:, None, :], axis=1)[:, 0, :]
    out = Node(sel)
    if tape is not None:
        def bwd(g, shape=qv.shape, idx=idx):
            gq = np.zeros(shape)
            np.put_along_axis(gq, idx[:, None, :], g[:, None, :], axis=1)
            return (gq,)
        tape.record(out, (q,), bwd)
    return out


def stack_agents(parts: list, tape: Tape | None = None) -> Node:
    """Stack per-agent (time, batch) values into (time, n_agents, batch)."""
    vals = [_val(p) for p in parts]
    out = Node(np.stack(vals, axis=1))
    if tape is not None:
        def bwd(g):
            return tuple(np.ascontiguousarray(g[:, i, :]) for i in range(len(parts)))
        tape.record(out, tuple(parts), bwd)
    return out


def hyper_matvec(w_flat, u, embed_dim: int, tape: Tape | None = None) -> Node:
    """Per-sample matvec with generated weights.

    w_flat has shape (time, embed*n, batch) and is viewed as a (embed, n)
    matrix per (time, batch) cell; u has shape (time, n, batch). Returns
    (time, embed, batch).
    """
    wv = _val(w_flat)
    uv = _val(u)
    t, en, bsz = wv.shape
    n = uv.shape[1]
    if en != embed_dim * n:
        raise ValueError(f"hyper_matvec shape mismatch: {wv.shape} vs {uv.shape}")
    wm = wv.reshape(t, embed_dim, n, bsz)
    out = Node(np.einsum("tenb,tnb->teb", wm, uv))
    if tape is not None:
        def bwd(g, wm=wm, uv=uv, t=t, en=en, bsz=bsz):
            gw = np.einsum("teb,tnb->tenb", g, uv).reshape(t, en, bsz)
            gu = np.einsum("tenb,teb->tnb", wm, g)
            return gw, gu
        tape.record(out, (w_flat, u), bwd)
    return out


def colwise_dot(a, b, tape: Tape | None = None) -> Node:
    """Contract the feature axis of two (time, dim, batch) arrays -> (time, batch)."""
    av, bv = _val(a), _val(b)
    if av.shape != bv.shape:
        raise ValueError(f"colwise_dot shape mismatch: {av.shape} vs {bv.shape}")
    out = Node((av * bv).sum(axis=1))
    if tape is not None:
        def bwd(g, av=av, bv=bv):
            return g[:, None, :] * bv, g[:, None, :] * av
        tape.record(out, (a, b), bwd)
    return out


def squeeze_feature(x, tape: Tape | None = None) -> Node:
    """(time, 1, batch) -> (time, batch)."""
    xv = _val(x)
    if xv.ndim != 3 or xv.shape[1] != 1:
        raise ValueError(f"squeeze_feature expects (T, 1, B), got {xv.shape}")
    out = Node(xv[:, 0, :])
    if tape is not None:
        def bwd(g):
            return (g[:, None, :].copy(),)
        tape.record(out, (x,), bwd)
    return out


def concat_features(parts: list, tape: Tape | None = None) -> Node:
    """Concatenate (time, dim_i, batch) arrays along the feature axis."""
    vals = [_val(p) for p in parts]
    out = Node(np.concatenate(vals, axis=1))
    if tape is not None:
        sizes = [v.shape[1] for v in vals]
        offsets = np.cumsum([0] + sizes)

        def bwd(g, offsets=offsets):
            return tuple(
                np.ascontiguousarray(g[:, offsets[i]:offsets[i + 1], :])
                for i in range(len(parts))
            )
        tape.record(out, tuple(parts), bwd)
    return out


def weighted_mse(pred, target: np.ndarray, weight: np.ndarray, valid: np.ndarray,
                 tape: Tape | None = None) -> Node:
    """Mean over valid entries of weight * (pred - target)^2.

    target and weight are constants: no gradient flows through them.
    """
    pv = _val(pred)
    n_valid = float(valid.sum())
    if n_valid == 0:
        raise ValueError("weighted_mse over an empty valid set")
    diff = (pv - target) * valid
    out = Node(np.sum(weight * diff * diff) / n_valid)
    if tape is not None:
        def bwd(g, diff=diff, weight=weight, n_valid=n_valid):
            return (float(g) * 2.0 * weight * diff / n_valid,)
        tape.record(out, (pred,), bwd)
    return out


# ---------------------------------------------------------------------------
# GRU cell
# ---------------------------------------------------------------------------


@dataclass
class GruCellParams:
    """One GRU cell: three gate matrices of shape (hidden, hidden+input).

    Each gate acts on the concatenation [h_prev; x]; the candidate gate sees
    [r*h_prev; x]. Biases are plain dense vectors and are never masked.
    """

    input_dim: int
    hidden_dim: int
    wz: Param
    wr: Param
    wh: Param
    bz: Param
    br: Param
    bh: Param

    def __post_init__(self):
        shape = (self.hidden_dim, self.hidden_dim + self.input_dim)
        for w in (self.wz, self.wr, self.wh):
            if w.value.shape != shape:
                raise ValueError(f"gate matrix shape {w.value.shape} != {shape}")

    @classmethod
    def create(cls, input_dim: int, hidden_dim: int, rng: np.random.Generator,
               name: str = "gru") -> "GruCellParams":
        k = 1.0 / np.sqrt(hidden_dim + input_dim)
        shape = (hidden_dim, hidden_dim + input_dim)

        def w(suffix):
            return Param(rng.uniform(-k, k, size=shape), f"{name}.{suffix}")

        def b(suffix):
            return Param(rng.uniform(-k, k, size=hidden_dim), f"{name}.{suffix}")

        return cls(input_dim, hidden_dim, w("wz"), w("wr"), w("wh"),
                   b("bz"), b("br"), b("bh"))


def _sigmoid(x):
    return 0.5 * (1.0 + np.tanh(0.5 * x))


def gru_step(x, h_prev, p: GruCellParams, tape: Tape | None = None) -> Node:
    """One GRU step; x is (input,) or (input, batch), h_prev matches.

    h = z * h_prev + (1 - z) * tanh(Wh [r*h_prev; x] + bh)
    with z, r the sigmoid update / reset gates over [h_prev; x].
    """
    xv = _val(x)
    hv = _val(h_prev)
    if xv.shape[0] != p.input_dim or hv.shape[0] != p.hidden_dim:
        raise ValueError(
            f"gru shape mismatch: x {xv.shape}, h {hv.shape}, "
            f"cell ({p.hidden_dim}, {p.input_dim})"
        )
    c = np.concatenate([hv, xv], axis=0)
    z = _sigmoid(p.wz.value @ c + _bcast(p.bz.value, c))
    r = _sigmoid(p.wr.value @ c + _bcast(p.br.value, c))
    rh = r * hv
    ch = np.concatenate([rh, xv], axis=0)
    hh = np.tanh(p.wh.value @ ch + _bcast(p.bh.value, c))
    out = Node(z * hv + (1.0 - z) * hh)
    if tape is not None:
        hid = p.hidden_dim

        def bwd(g, c=c, ch=ch, z=z, r=r, rh=rh, hh=hh, hv=hv, p=p, hid=hid):
            dz = g * (hv - hh)
            dah = g * (1.0 - z) * (1.0 - hh * hh)
            dch = p.wh.value.T @ dah
            drh = dch[:hid]
            dr = drh * hv
            dh = drh * r + g * z
            daz = dz * z * (1.0 - z)
            dar = dr * r * (1.0 - r)
            dc = p.wz.value.T @ daz + p.wr.value.T @ dar
            dh = dh + dc[:hid]
            dx = dc[hid:] + dch[hid:]
            if g.ndim == 1:
                dwz, dwr, dwh = np.outer(daz, c), np.outer(dar, c), np.outer(dah, ch)
                dbz, dbr, dbh = daz.copy(), dar.copy(), dah.copy()
            else:
                dwz, dwr, dwh = daz @ c.T, dar @ c.T, dah @ ch.T
                dbz, dbr, dbh = daz.sum(1), dar.sum(1), dah.sum(1)
            return dx, dh, dwz, dwr, dwh, dbz, dbr, dbh

        tape.record(out, (x, h_prev, p.wz, p.wr, p.wh, p.bz, p.br, p.bh), bwd)
    return out


def _bcast(b, like):
    return b if like.ndim == 1 else b[:, None]


def gru_sequence(xs, h0, p: GruCellParams, tape: Tape | None = None) -> Node:
    """Unroll a GRU over (time, input, batch) inputs; returns (time, hidden, batch).

    Identical math to chaining :func:`gru_step`, but the input projections of
    all gates are batched over time and the whole unroll is one tape record,
    so backward runs truncated-free BPTT over the full sequence.
    """
    xv = _val(xs)
    hv0 = _val(h0)
    t_len, in_dim, bsz = xv.shape
    hid = p.hidden_dim
    if in_dim != p.input_dim or hv0.shape != (hid, bsz):
        raise ValueError(
            f"gru_sequence shape mismatch: xs {xv.shape}, h0 {hv0.shape}, "
            f"cell ({hid}, {p.input_dim})"
        )
    wzr = np.vstack([p.wz.value, p.wr.value])
    wzr_h, wzr_x = wzr[:, :hid], wzr[:, hid:]
    wh_h, wh_x = p.wh.value[:, :hid], p.wh.value[:, hid:]
    bzr = np.concatenate([p.bz.value, p.br.value])

    xf = _fold(xv)
    azr_x = _unfold(wzr_x @ xf + bzr[:, None], t_len, bsz)
    ah_x = _unfold(wh_x @ xf + p.bh.value[:, None], t_len, bsz)

    hs = np.empty((t_len + 1, hid, bsz))
    hs[0] = hv0
    zs = np.empty((t_len, hid, bsz))
    rs = np.empty_like(zs)
    rhs = np.empty_like(zs)
    hhs = np.empty_like(zs)
    h = hv0
    for t in range(t_len):
        azr = azr_x[t] + wzr_h @ h
        z = _sigmoid(azr[:hid])
        r = _sigmoid(azr[hid:])
        rh = r * h
        hh = np.tanh(ah_x[t] + wh_h @ rh)
        h = z * h + (1.0 - z) * hh
        zs[t], rs[t], rhs[t], hhs[t] = z, r, rh, hh
        hs[t + 1] = h
    out = Node(np.ascontiguousarray(hs[1:]))

    if tape is not None:
        def bwd(g):
            dazr = np.empty((t_len, 2 * hid, bsz))
            dah = np.empty((t_len, hid, bsz))
            dh = np.zeros((hid, bsz))
            for t in range(t_len - 1, -1, -1):
                dht = g[t] + dh
                z, r, hh, hp = zs[t], rs[t], hhs[t], hs[t]
                dz = dht * (hp - hh)
                da_h = dht * (1.0 - z) * (1.0 - hh * hh)
                drh = wh_h.T @ da_h
                dr = drh * hp
                dh = drh * r + dht * z
                da_zr = np.concatenate([dz * z * (1.0 - z), dr * r * (1.0 - r)], axis=0)
                dh += wzr_h.T @ da_zr
                dazr[t] = da_zr
                dah[t] = da_h
            dazr_f = _fold(dazr)
            dah_f = _fold(dah)
            hprev_f = _fold(hs[:t_len])
            rh_f = _fold(rhs)
            dwzr_h = dazr_f @ hprev_f.T
            dwzr_x = dazr_f @ xf.T
            dwh = np.hstack([dah_f @ rh_f.T, dah_f @ xf.T])
            dwz = np.hstack([dwzr_h[:hid], dwzr_x[:hid]])
            dwr = np.hstack([dwzr_h[hid:], dwzr_x[hid:]])
            dxs = _unfold(wzr_x.T @ dazr_f + wh_x.T @ dah_f, t_len, bsz)
            dbzr = dazr_f.sum(axis=1)
            return (dxs, dh, dwz, dwr, dwh,
                    dbzr[:hid], dbzr[hid:], dah_f.sum(axis=1))

        tape.record(out, (xs, h0, p.wz, p.wr, p.wh, p.bz, p.br, p.bh), bwd)
    return out


# ---------------------------------------------------------------------------
# optimizer
# ---------------------------------------------------------------------------


class RmsPropState:
    """Per-parameter running mean of squared gradients."""

    def __init__(self):
        self._v = {}

    def of(self, p: Param) -> np.ndarray:
        v = self._v.get(p)
        if v is None:
            v = np.zeros_like(p.value)
            self._v[p] = v
        return v


def clip_global_norm(params, grads: GradStore, max_norm: float) -> float:
    """Rescale gradients so their global L2 norm is at most max_norm.

    Rescaling replaces the stored arrays rather than mutating them, so
    previously handed-out references keep the raw values.
    """
    total = 0.0
    for p in params:
        if grads.has(p):
            g = grads.of(p).reshape(-1)
            total += float(np.dot(g, g))
    norm = float(np.sqrt(total))
    if max_norm > 0 and norm > max_norm:
        scale = max_norm / norm
        for p in params:
            if grads.has(p):
                grads._grads[p] = grads._grads[p] * scale
    return norm


def rmsprop_step(params, grads: GradStore, state: RmsPropState, lr: float,
                 smoothing: float = 0.99, epsilon: float = 1e-5) -> bool:
    """One RMSProp update; returns False (no-op) on any non-finite gradient.

    v <- smoothing*v + (1-smoothing)*g^2 ; p <- p - lr*g/(sqrt(v)+epsilon).
    Mask re-application is the caller's job.
    """
    gs = []
    total = 0.0
    for p in params:
        g = grads.of(p)
        flat = g.reshape(-1)
        total += float(np.dot(flat, flat))  # nan/inf anywhere poisons the sum
        gs.append(g)
    if not np.isfinite(total):
        return False
    for p, g in zip(params, gs):
        v = state.of(p)
        v *= smoothing
        v += (1.0 - smoothing) * g * g
        p.value -= lr * g / (np.sqrt(v) + epsilon)
    return True
