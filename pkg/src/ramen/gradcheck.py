"""Finite-difference verification of gradient rules.

Central differences with step h at float64 are compared elementwise against
the recorded rules; the error metric is |analytic - numeric| divided by
max(|analytic|, |numeric|, floor). Used by the test suite and by the
`grad-check` command.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import model as M
from . import nn
from . import tensor as T
from .tensor import Tensor

FD_STEP = 1e-5
ERR_FLOOR = 1e-8
OP_TOLERANCE = 1e-6
MODEL_TOLERANCE = 1e-4


def analytic_gradients(loss_fn, named_tensors):
    """Run loss_fn once on a fresh tape and return {name: grad array}."""
    for _, t in named_tensors:
        t.zero_grad()
    with T.Tape():
        loss = loss_fn()
        T.backward(loss)
    out = {}
    for name, t in named_tensors:
        out[name] = np.zeros_like(t.data) if t.grad is None else t.grad.copy()
        t.zero_grad()
    return out


def numeric_gradient(loss_fn, t: Tensor, h: float = FD_STEP) -> np.ndarray:
    """Central finite differences of loss_fn with respect to every element of t."""
    grad = np.zeros_like(t.data)
    flat = t.data.reshape(-1)
    gflat = grad.reshape(-1)
    with T.no_grad():
        for i in range(flat.size):
            keep = flat[i]
            flat[i] = keep + h
            up = loss_fn().data.item()
            flat[i] = keep - h
            down = loss_fn().data.item()
            flat[i] = keep
            gflat[i] = (up - down) / (2.0 * h)
    return grad


def max_relative_error(analytic: np.ndarray, numeric: np.ndarray, floor: float = ERR_FLOOR) -> float:
    denom = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), floor)
    if analytic.size == 0:
        return 0.0
    return float(np.max(np.abs(analytic - numeric) / denom))


def check_gradients(loss_fn, named_tensors, h: float = FD_STEP):
    """Compare recorded gradients of loss_fn against finite differences.

    named_tensors: iterable of (name, Tensor) with requires_grad set.
    Returns {name: max relative error}.
    """
    named_tensors = list(named_tensors)
    analytic = analytic_gradients(loss_fn, named_tensors)
    report = {}
    for name, t in named_tensors:
        numeric = numeric_gradient(loss_fn, t, h)
        report[name] = max_relative_error(analytic[name], numeric)
    return report


# ---------------------------------------------------------------------------
# standard suite


@dataclass
class CheckResult:
    name: str
    max_rel_err: float
    tolerance: float

    @property
    def passed(self) -> bool:
        return self.max_rel_err < self.tolerance


def _rng(*key):
    return np.random.Generator(np.random.PCG64(np.random.SeedSequence(list(key))))


def _rand(rng, *shape):
    return Tensor(rng.standard_normal(shape), requires_grad=True, dtype=np.float64)


def _weighted_sum(out: Tensor, weights: np.ndarray) -> Tensor:
    """Fixed-weight sum to a scalar; catches transposed gradient rules that a
    plain sum would miss."""
    return T.sum_all(T.mul(out, Tensor(weights, dtype=np.float64)))


def standard_op_checks(seed: int = 0):
    """Gradient-check every differentiable op against finite differences."""
    def op_check(name, inputs, compute, out_shape):
        """inputs: {name: Tensor}; compute() -> Tensor of out_shape."""
        rng = _rng(seed, 11, len(results))
        w = rng.standard_normal(out_shape)
        report = check_gradients(lambda: _weighted_sum(compute(), w), list(inputs.items()))
        results.append(CheckResult(name, max(report.values()), OP_TOLERANCE))

    def scalar_check(name, inputs, compute):
        report = check_gradients(compute, list(inputs.items()))
        results.append(CheckResult(name, max(report.values()), OP_TOLERANCE))

    results: list[CheckResult] = []

    rng = _rng(seed, 0)
    a43, b43 = _rand(rng, 4, 3), _rand(rng, 4, 3)
    op_check("add", {"a": a43, "b": b43}, lambda: T.add(a43, b43), (4, 3))
    op_check("sub", {"a": a43, "b": b43}, lambda: T.sub(a43, b43), (4, 3))
    op_check("mul", {"a": a43, "b": b43}, lambda: T.mul(a43, b43), (4, 3))
    op_check("scale", {"a": a43}, lambda: T.scale(a43, -1.7), (4, 3))
    op_check("one_minus", {"a": a43}, lambda: T.one_minus(a43), (4, 3))
    op_check("sigmoid", {"a": a43}, lambda: T.sigmoid(a43), (4, 3))
    op_check("tanh", {"a": a43}, lambda: T.tanh(a43), (4, 3))
    op_check("swish", {"a": a43}, lambda: T.swish(a43), (4, 3))
    op_check("reshape", {"a": a43}, lambda: T.reshape(a43, (2, 6)), (2, 6))

    m34, m42 = _rand(rng, 3, 4), _rand(rng, 4, 2)
    op_check("matmul", {"a": m34, "b": m42}, lambda: T.matmul(m34, m42), (3, 2))
    m24 = _rand(rng, 2, 4)
    op_check("matmul_nt", {"a": m34, "b": m24}, lambda: T.matmul_nt(m34, m24), (3, 2))

    x53, w45, b4 = _rand(rng, 5, 3), _rand(rng, 4, 3), _rand(rng, 4)
    op_check(
        "linear", {"x": x53, "w": w45, "b": b4}, lambda: T.linear(x53, w45, b4), (5, 4)
    )

    c1, c2 = _rand(rng, 2, 3), _rand(rng, 4, 3)
    op_check("concat_axis0", {"a": c1, "b": c2}, lambda: T.concat([c1, c2], axis=0), (6, 3))
    c3, c4 = _rand(rng, 3, 2), _rand(rng, 3, 5)
    op_check("concat_axis1", {"a": c3, "b": c4}, lambda: T.concat([c3, c4], axis=1), (3, 7))

    g = _rand(rng, 5, 3)
    idx = np.array([0, 2, 2, 4, 1])
    op_check("gather_rows", {"x": g}, lambda: T.gather_rows(g, idx), (5, 3))
    op_check("repeat_rows", {"x": c3}, lambda: T.repeat_rows(c3, 3), (9, 2))
    r62 = _rand(rng, 6, 2)
    op_check("group_mean_rows", {"x": r62}, lambda: T.group_mean_rows(r62, 3), (2, 2))
    mask = np.array([1.0, 0.0, 0.5, 1.0])
    op_check("scale_rows", {"x": a43}, lambda: T.scale_rows(a43, mask), (4, 3))
    op_check("mean_rows", {"x": g}, lambda: T.mean_rows(g), (3,))

    scalar_check("sum", {"x": a43}, lambda: T.sum_all(a43))
    logits = _rand(rng, 4, 5)
    labels = np.array([1, 0, 4, 2])
    scalar_check(
        "softmax_cross_entropy",
        {"logits": logits},
        lambda: T.softmax_cross_entropy(logits, labels),
    )
    targets = _rng(seed, 1).uniform(0, 1, size=(4, 5))
    scalar_check(
        "sigmoid_binary_cross_entropy",
        {"logits": logits},
        lambda: T.sigmoid_binary_cross_entropy(logits, targets),
    )

    bn = nn.BatchNorm(3, dtype=np.float64)
    bn.gamma.data[...] = rng.standard_normal(3)
    bn.beta.data[...] = rng.standard_normal(3)
    x_bn = _rand(rng, 6, 3)
    op_check(
        "batchnorm_train",
        {"x": x_bn, "gamma": bn.gamma, "beta": bn.beta},
        lambda: nn.batchnorm_forward(bn, x_bn),
        (6, 3),
    )
    bn_eval = nn.BatchNorm(3, dtype=np.float64)
    bn_eval.mode = "eval"
    bn_eval.gamma.data[...] = rng.standard_normal(3)
    bn_eval.running_mean = rng.standard_normal(3)
    bn_eval.running_var = rng.uniform(0.5, 2.0, size=3)
    op_check(
        "batchnorm_eval",
        {"x": x_bn, "gamma": bn_eval.gamma, "beta": bn_eval.beta},
        lambda: nn.batchnorm_forward(bn_eval, x_bn),
        (6, 3),
    )

    cell = nn.GruCell.create(_rng(seed, 2), 4, 3, dtype=np.float64)
    gx, gh = _rand(rng, 2, 4), _rand(rng, 2, 3)
    gru_inputs = {"x": gx, "h": gh}
    gru_inputs.update({f"cell.{n}": t for n, t in _gru_named(cell)})
    op_check("gru_step", gru_inputs, lambda: nn.gru_step(cell, gx, gh), (2, 3))

    cf = nn.GruCell.create(_rng(seed, 3), 4, 3, dtype=np.float64)
    cb = nn.GruCell.create(_rng(seed, 4), 4, 3, dtype=np.float64)
    seq = [_rand(rng, 2, 4) for _ in range(3)]
    bigru_inputs = {f"x{t}": x for t, x in enumerate(seq)}
    bigru_inputs.update({f"fwd.{n}": t for n, t in _gru_named(cf)})
    bigru_inputs.update({f"bwd.{n}": t for n, t in _gru_named(cb)})
    op_check("bigru_final", bigru_inputs, lambda: nn.bigru_final(cf, cb, seq), (2, 6))

    mlp = nn.ResidualMlp.create(_rng(seed, 5), 5, 4, dtype=np.float64)
    mx = _rand(rng, 3, 5)
    mlp_inputs = {"c": mx}
    for i, layer in enumerate(mlp.layers, start=1):
        mlp_inputs[f"l{i}.weight"] = layer.weight
        mlp_inputs[f"l{i}.bias"] = layer.bias
    op_check(
        "residual_mlp", mlp_inputs, lambda: nn.residual_mlp_forward(mlp, mx), (3, 4)
    )

    return results


def _gru_named(cell: nn.GruCell):
    return [
        (name, getattr(cell, name))
        for name in ("W_z", "W_r", "W_h", "U_z", "U_r", "U_h", "b_z", "b_r", "b_h")
    ]


# ---------------------------------------------------------------------------
# end-to-end model check


def toy_config(ablation: str = "full") -> M.RamenConfig:
    """Smallest config that exercises every architectural path: 2 regions,
    a 3-token question and 5 candidate answers."""
    return M.RamenConfig(
        num_answers=5,
        vocab_size=9,
        visual_dim=6,
        spatial_dim=4,
        question_dim=5,
        projector_width=6,
        aggregator_hidden=4,
        pre_classifier_width=7,
        embed_dim=4,
        ablation=ablation,
    )


def end_to_end_check(seed: int = 0, ablation: str = "full"):
    """Finite-difference check of every parameter gradient through the whole
    model (train-mode batchnorm included) on a toy instance at float64.
    Returns {parameter name: max relative error}.
    """
    cfg = toy_config(ablation)
    net = M.RamenModel(cfg, seed=seed, dtype=np.float64)
    net.train()
    rng = _rng(seed, 99)
    n_regions = 2
    feats = Tensor(rng.standard_normal((n_regions, cfg.region_dim)), dtype=np.float64)
    tokens = np.asarray([[1, 5, 2]])
    lengths = np.asarray([3])
    label = np.asarray([3])

    def loss_fn():
        logits = M.forward_batch(net, feats, n_regions, tokens, lengths)
        return T.softmax_cross_entropy(logits, label)

    return check_gradients(loss_fn, net.parameters())


def full_report(seed: int = 0):
    """Op-level checks plus end-to-end checks for all four variants.

    The full variant is held to MODEL_TOLERANCE. The ablations get 10x slack:
    their toy instances can have gradient elements near 1e-8, where central
    differences bottom out on float64 roundoff rather than on rule errors
    (a wrong rule shows up as O(1) relative error either way).
    """
    results = standard_op_checks(seed)
    for ablation in M.ABLATIONS:
        report = end_to_end_check(seed, ablation)
        tol = MODEL_TOLERANCE if ablation == "full" else 10 * MODEL_TOLERANCE
        results.append(CheckResult(f"model[{ablation}]", max(report.values()), tol))
    return results
