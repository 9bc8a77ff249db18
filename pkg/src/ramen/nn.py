"""Layers: linear, batch normalization, embeddings, GRU cells, and the
residual MLP projector. Layers are thin parameter containers; the forward
functions build the computation on the active tape."""

from __future__ import annotations

import numpy as np
from scipy.special import expit

from . import tensor as T
from .tensor import Tensor


# ---------------------------------------------------------------------------
# initialization


def glorot_uniform(rng: np.random.Generator, out_size: int, in_size: int, dtype) -> np.ndarray:
    limit = np.sqrt(6.0 / (in_size + out_size))
    return rng.uniform(-limit, limit, size=(out_size, in_size)).astype(dtype)


def orthogonal(rng: np.random.Generator, n: int, dtype) -> np.ndarray:
    """Orthogonal-ish square matrix from the QR of a Gaussian draw."""
    q, r = np.linalg.qr(rng.standard_normal((n, n)))
    q *= np.sign(np.diag(r))  # fix QR sign ambiguity for determinism
    return q.astype(dtype)


# ---------------------------------------------------------------------------
# linear


class LinearLayer:
    """weight [out,in] and bias [out]."""

    def __init__(self, weight: Tensor, bias: Tensor):
        if weight.data.ndim != 2 or bias.data.ndim != 1 or weight.shape[0] != bias.shape[0]:
            raise ValueError(f"linear layer shapes disagree: W{weight.shape} b{bias.shape}")
        self.weight = weight
        self.bias = bias

    @classmethod
    def create(cls, rng, in_size: int, out_size: int, dtype=T.DEFAULT_DTYPE):
        w = Tensor(glorot_uniform(rng, out_size, in_size, dtype), requires_grad=True)
        b = Tensor(np.zeros(out_size, dtype=dtype), requires_grad=True)
        return cls(w, b)

    @property
    def in_size(self) -> int:
        return self.weight.shape[1]

    @property
    def out_size(self) -> int:
        return self.weight.shape[0]


def linear_forward(layer: LinearLayer, x: Tensor) -> Tensor:
    """x [rows,in] -> x @ W^T + b, [rows,out]."""
    return T.linear(x, layer.weight, layer.bias)


# ---------------------------------------------------------------------------
# batch normalization


class BatchNorm:
    """Per-column standardization with learnable affine and running stats.

    Train mode normalizes by the batch mean and population variance and
    updates the running stats with `momentum` (new = (1-m)*old + m*batch).
    Eval mode normalizes by the running stats.
    """

    def __init__(self, dim: int, momentum: float = 0.1, eps: float = 1e-5, dtype=T.DEFAULT_DTYPE):
        if not 0.0 < momentum <= 1.0:
            raise ValueError(f"momentum must be in (0,1], got {momentum}")
        if eps <= 0.0:
            raise ValueError(f"eps must be positive, got {eps}")
        self.gamma = Tensor(np.ones(dim, dtype=dtype), requires_grad=True)
        self.beta = Tensor(np.zeros(dim, dtype=dtype), requires_grad=True)
        self.running_mean = np.zeros(dim, dtype=dtype)
        self.running_var = np.ones(dim, dtype=dtype)
        self.momentum = momentum
        self.eps = eps
        self.mode = "train"

    @property
    def dim(self) -> int:
        return self.gamma.shape[0]


def batchnorm_forward(bn: BatchNorm, x: Tensor) -> Tensor:
    if x.data.ndim != 2 or x.shape[1] != bn.dim:
        raise ValueError(f"batchnorm: expected [rows,{bn.dim}], got {x.shape}")
    rows = x.shape[0]
    if bn.mode == "train":
        if rows < 2:
            raise ValueError(f"batchnorm train mode needs >= 2 rows, got {rows}")
        mu = x.data.mean(axis=0)
        var = x.data.var(axis=0)  # population variance
        inv_std = 1.0 / np.sqrt(var + bn.eps)
        xhat = (x.data - mu) * inv_std
        out = bn.gamma.data * xhat + bn.beta.data
        m = bn.momentum
        bn.running_mean = ((1.0 - m) * bn.running_mean + m * mu).astype(x.dtype)
        bn.running_var = ((1.0 - m) * bn.running_var + m * var).astype(x.dtype)

        def rule(g):
            dgamma = (g * xhat).sum(axis=0)
            dbeta = g.sum(axis=0)
            dxhat = g * bn.gamma.data
            # Full batch-statistics backward (mean and variance both depend on x).
            dx = (
                inv_std
                / rows
                * (rows * dxhat - dxhat.sum(axis=0) - xhat * (dxhat * xhat).sum(axis=0))
            )
            return (dx, dgamma, dbeta)

        return T.record(out, (x, bn.gamma, bn.beta), rule, "batchnorm_train")

    inv_std = 1.0 / np.sqrt(bn.running_var + bn.eps)
    xhat = (x.data - bn.running_mean) * inv_std
    out = bn.gamma.data * xhat + bn.beta.data

    def rule(g):
        return (g * (bn.gamma.data * inv_std), (g * xhat).sum(axis=0), g.sum(axis=0))

    return T.record(out, (x, bn.gamma, bn.beta), rule, "batchnorm_eval")


# ---------------------------------------------------------------------------
# embeddings


class Embedding:
    def __init__(self, weight: Tensor):
        self.weight = weight

    @classmethod
    def create(cls, rng, vocab_size: int, dim: int, dtype=T.DEFAULT_DTYPE):
        w = (rng.standard_normal((vocab_size, dim)) / np.sqrt(dim)).astype(dtype)
        return cls(Tensor(w, requires_grad=True))

    @property
    def vocab_size(self) -> int:
        return self.weight.shape[0]

    @property
    def dim(self) -> int:
        return self.weight.shape[1]


def embedding_lookup(emb: Embedding, token_ids) -> Tensor:
    ids = np.asarray(token_ids)
    if ids.size and (ids.min() < 0 or ids.max() >= emb.vocab_size):
        raise ValueError(
            f"token id out of range: vocab size {emb.vocab_size}, got max {ids.max()}"
        )
    return T.gather_rows(emb.weight, ids)


def load_embedding_text(path, tokens, dim: int, rng, dtype=T.DEFAULT_DTYPE) -> np.ndarray:
    """Initialize an embedding matrix for `tokens` from a plain-text vector
    file (one token followed by `dim` floats per line). Tokens missing from
    the file keep a random initialization."""
    table = {}
    with open(path, "r", encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            parts = line.rstrip("\n").split(" ")
            if len(parts) != dim + 1:
                raise ValueError(
                    f"embedding file line {lineno}: expected {dim} values, got {len(parts) - 1}"
                )
            table[parts[0]] = np.asarray([float(v) for v in parts[1:]], dtype=dtype)
    out = (rng.standard_normal((len(tokens), dim)) / np.sqrt(dim)).astype(dtype)
    hits = 0
    for i, tok in enumerate(tokens):
        vec = table.get(tok)
        if vec is not None:
            out[i] = vec
            hits += 1
    return out


# ---------------------------------------------------------------------------
# GRU


class GruCell:
    """Gate weights W_* [h,in], recurrent weights U_* [h,h], biases b_* [h]."""

    def __init__(self, W_z, W_r, W_h, U_z, U_r, U_h, b_z, b_r, b_h):
        h, in_size = W_z.shape
        for w in (W_r, W_h):
            if w.shape != (h, in_size):
                raise ValueError(f"gate weight shape {w.shape} != {(h, in_size)}")
        for u in (U_z, U_r, U_h):
            if u.shape != (h, h):
                raise ValueError(f"recurrent weight shape {u.shape} != {(h, h)}")
        for b in (b_z, b_r, b_h):
            if b.shape != (h,):
                raise ValueError(f"bias shape {b.shape} != {(h,)}")
        self.W_z, self.W_r, self.W_h = W_z, W_r, W_h
        self.U_z, self.U_r, self.U_h = U_z, U_r, U_h
        self.b_z, self.b_r, self.b_h = b_z, b_r, b_h

    @classmethod
    def create(cls, rng, in_size: int, hidden: int, dtype=T.DEFAULT_DTYPE):
        def gate_w():
            return Tensor(glorot_uniform(rng, hidden, in_size, dtype), requires_grad=True)

        def rec_w():
            return Tensor(orthogonal(rng, hidden, dtype), requires_grad=True)

        def bias():
            return Tensor(np.zeros(hidden, dtype=dtype), requires_grad=True)

        return cls(gate_w(), gate_w(), gate_w(), rec_w(), rec_w(), rec_w(), bias(), bias(), bias())

    @property
    def in_size(self) -> int:
        return self.W_z.shape[1]

    @property
    def hidden(self) -> int:
        return self.W_z.shape[0]


def gru_step(cell: GruCell, x: Tensor, h_prev: Tensor) -> Tensor:
    """One gated recurrent update.

    z = sigmoid(W_z x + U_z h + b_z), r = sigmoid(W_r x + U_r h + b_r),
    cand = tanh(W_h x + U_h (r*h) + b_h), h' = (1-z)*h + z*cand.
    Accepts single vectors or [batch,*] matrices.
    """
    vector_in = x.data.ndim == 1
    if vector_in:
        x = T.reshape(x, (1, x.shape[0]))
        h_prev = T.reshape(h_prev, (1, h_prev.shape[0]))
    if x.shape[1] != cell.in_size or h_prev.shape[1] != cell.hidden:
        raise ValueError(
            f"gru_step: x{x.shape} h{h_prev.shape} vs cell in={cell.in_size} hidden={cell.hidden}"
        )
    z = T.sigmoid(T.add(T.linear(x, cell.W_z, cell.b_z), T.matmul_nt(h_prev, cell.U_z)))
    r = T.sigmoid(T.add(T.linear(x, cell.W_r, cell.b_r), T.matmul_nt(h_prev, cell.U_r)))
    cand = T.tanh(
        T.add(T.linear(x, cell.W_h, cell.b_h), T.matmul_nt(T.mul(r, h_prev), cell.U_h))
    )
    h_new = T.add(T.mul(T.one_minus(z), h_prev), T.mul(z, cand))
    if vector_in:
        h_new = T.reshape(h_new, (cell.hidden,))
    return h_new


def gru_sequence(cell: GruCell, xs, masks=None) -> Tensor:
    """Run a GRU over a step-major sequence of [batch,in] tensors from a zero
    state and return the final state.

    `masks`, when given, holds one 0/1 float array of shape [batch] per step;
    rows with mask 0 keep their previous state, so each sequence's final
    state is taken at its true length rather than at pad positions.

    This is the training hot path, so it runs as one fused op with
    hand-written backpropagation through time: the input-side projections of
    all steps go through a single matmul, and only the recurrent terms loop.
    The step semantics are exactly those of `gru_step` (checked against it
    and against finite differences in the tests).
    """
    xs = list(xs)
    if not xs:
        raise ValueError("gru_sequence: empty sequence")
    batch = xs[0].shape[0]
    steps = len(xs)
    hid = cell.hidden
    dtype = xs[0].dtype
    for x in xs:
        if x.shape != (batch, cell.in_size):
            raise ValueError(f"sequence step shape {x.shape} != {(batch, cell.in_size)}")

    w_all = np.concatenate([cell.W_z.data, cell.W_r.data, cell.W_h.data], axis=0)  # [3H,in]
    b_all = np.concatenate([cell.b_z.data, cell.b_r.data, cell.b_h.data])
    u_zr = np.concatenate([cell.U_z.data, cell.U_r.data], axis=0)  # [2H,H]
    u_h = cell.U_h.data

    x_stack = np.concatenate([x.data for x in xs], axis=0)  # [steps*batch, in]
    proj = x_stack @ w_all.T
    proj += b_all

    h = np.zeros((batch, hid), dtype=dtype)
    cache = []
    for t in range(steps):
        p = proj[t * batch : (t + 1) * batch]
        zr = expit(p[:, : 2 * hid] + h @ u_zr.T)
        z, r = zr[:, :hid], zr[:, hid:]
        rh = r * h
        hbar = np.tanh(p[:, 2 * hid :] + rh @ u_h.T)
        h_new = (1.0 - z) * h + z * hbar
        if masks is not None:
            m = np.asarray(masks[t], dtype=dtype)[:, np.newaxis]
            cache.append((h, zr, hbar, rh, m))
            h = m * h_new + (1.0 - m) * h
        else:
            cache.append((h, zr, hbar, rh, None))
            h = h_new

    inputs = tuple(xs) + (
        cell.W_z, cell.W_r, cell.W_h, cell.U_z, cell.U_r, cell.U_h,
        cell.b_z, cell.b_r, cell.b_h,
    )

    def rule(g):
        da_all = np.empty((steps * batch, 3 * hid), dtype=dtype)
        du_zr = np.zeros_like(u_zr)
        du_h = np.zeros_like(u_h)
        dh = np.array(g, copy=True)
        for t in range(steps - 1, -1, -1):
            h_prev, zr, hbar, rh, m = cache[t]
            z, r = zr[:, :hid], zr[:, hid:]
            if m is not None:
                dh_new = dh * m
                dh_prev = dh * (1.0 - m)
            else:
                dh_new = dh
                dh_prev = np.zeros_like(dh)
            dz = dh_new * (hbar - h_prev)
            dhbar = dh_new * z
            dh_prev += dh_new * (1.0 - z)
            da_h = dhbar * (1.0 - hbar * hbar)
            drh = da_h @ u_h
            du_h += da_h.T @ rh
            dr = drh * h_prev
            dh_prev += drh * r
            da_zr = np.concatenate([dz * z * (1.0 - z), dr * r * (1.0 - r)], axis=1)
            dh_prev += da_zr @ u_zr
            du_zr += da_zr.T @ h_prev
            block = da_all[t * batch : (t + 1) * batch]
            block[:, : 2 * hid] = da_zr
            block[:, 2 * hid :] = da_h
            dh = dh_prev
        dw_all = da_all.T @ x_stack
        db_all = da_all.sum(axis=0)
        dx_stack = da_all @ w_all
        grads = [dx_stack[t * batch : (t + 1) * batch] for t in range(steps)]
        grads += [
            dw_all[:hid], dw_all[hid : 2 * hid], dw_all[2 * hid :],
            du_zr[:hid], du_zr[hid:], du_h,
            db_all[:hid], db_all[hid : 2 * hid], db_all[2 * hid :],
        ]
        return grads

    return T.record(h, inputs, rule, "gru_sequence")


def bigru_final(cell_fwd: GruCell, cell_bwd: GruCell, seq) -> Tensor:
    """Concatenation of the forward GRU's final state over `seq` and the
    backward GRU's final state over the reversed sequence, both from zero
    initial states. Accepts a sequence of vectors or of [batch,in] matrices."""
    seq = list(seq)
    if not seq:
        raise ValueError("bigru_final: empty sequence")
    vector_in = seq[0].data.ndim == 1
    if vector_in:
        seq = [T.reshape(x, (1, x.shape[0])) for x in seq]
    h_fwd = gru_sequence(cell_fwd, seq)
    h_bwd = gru_sequence(cell_bwd, list(reversed(seq)))
    out = T.concat([h_fwd, h_bwd], axis=1)
    if vector_in:
        out = T.reshape(out, (out.shape[1],))
    return out


# ---------------------------------------------------------------------------
# residual MLP projector


class ResidualMlp:
    """Four swish linear layers of equal width; layers 2-4 carry identity
    residual connections, layer 1 maps the input width onto the trunk."""

    def __init__(self, layers):
        layers = list(layers)
        if len(layers) != 4:
            raise ValueError(f"residual MLP has 4 layers, got {len(layers)}")
        width = layers[0].out_size
        for layer in layers[1:]:
            if layer.in_size != width or layer.out_size != width:
                raise ValueError("residual layers must map width -> width")
        self.layers = layers

    @classmethod
    def create(cls, rng, in_size: int, width: int = 1024, dtype=T.DEFAULT_DTYPE):
        first = LinearLayer.create(rng, in_size, width, dtype)
        rest = [LinearLayer.create(rng, width, width, dtype) for _ in range(3)]
        return cls([first] + rest)

    @property
    def in_size(self) -> int:
        return self.layers[0].in_size

    @property
    def width(self) -> int:
        return self.layers[0].out_size


def residual_mlp_forward(mlp: ResidualMlp, c: Tensor) -> Tensor:
    y = T.swish(linear_forward(mlp.layers[0], c))
    for layer in mlp.layers[1:]:
        y = T.add(T.swish(linear_forward(layer, y)), y)
    return y
