"""Tape-based reverse-mode differentiation over float64 numpy arrays.

A Tape records every operation in creation order (which is a topological
order), and `gradients` replays it backwards, accumulating exact adjoints.
Shapes are explicit: no broadcasting beyond bias addition.  Values are checked
for finiteness as nodes are created, so a NaN/Inf is reported at the operation
that produced it.

Stop-gradient values (`detach`, the MMD bandwidth) are recorded on the tape in
creation order.  `finite_diff_check` replays them at probe points, so the
numerical check targets the same stop-gradient objective whose analytic
gradient the backward pass computes.
"""

from __future__ import annotations

import numpy as np

from . import rng


class AutodiffError(Exception):
    pass


class NonFiniteError(AutodiffError):
    """A kernel operation produced a NaN or Inf."""


class Tape:
    """Operation trace: nodes in creation order, parameters by name."""

    def __init__(self, replay_detached: list[np.ndarray] | None = None):
        self.nodes: list[Tensor] = []
        self.params: dict[str, Tensor] = {}
        self.detached_values: list[np.ndarray] = []
        self._replay = iter(replay_detached) if replay_detached is not None else None

    def parameter(self, value: np.ndarray, name: str) -> "Tensor":
        if name in self.params:
            raise ValueError(f"duplicate parameter name {name!r}")
        node = Tensor(self, value, name=name)
        self.params[name] = node
        return node

    def constant(self, value) -> "Tensor":
        return Tensor(self, value, name="const")

    def record_detached(self, value: np.ndarray) -> np.ndarray:
        """Record (or replay) a stop-gradient value."""
        if self._replay is not None:
            value = next(self._replay)
        value = np.asarray(value, dtype=np.float64)
        self.detached_values.append(value)
        return value

    def gradients(self, output: "Tensor") -> tuple[float, dict[str, np.ndarray]]:
        """Backward pass from a scalar node; returns (value, grads per parameter)."""
        if output.tape is not self:
            raise ValueError("output node belongs to a different tape")
        if output.value.size != 1:
            raise ValueError(f"output node {output.name!r} is not scalar "
                             f"(shape {output.value.shape})")
        for node in self.nodes:
            node.grad = None
        output.grad = np.ones_like(output.value)
        for node in reversed(self.nodes):
            if node.grad is None:
                continue
            for parent, vjp in zip(node.parents, node.vjps):
                contrib = vjp(node.grad)
                if parent.grad is None:
                    # contrib may alias node.grad; never mutated in place below
                    parent.grad = contrib
                else:
                    parent.grad = parent.grad + contrib
        grads = {}
        for name, p in self.params.items():
            grads[name] = p.grad if p.grad is not None else np.zeros_like(p.value)
        return float(output.value), grads


class Tensor:
    """Node on a tape: a float64 array plus the local backward rules."""

    __slots__ = ("tape", "value", "parents", "vjps", "grad", "name")

    def __init__(self, tape: Tape, value, parents=(), vjps=(), name: str = "op"):
        self.tape = tape
        self.value = np.asarray(value, dtype=np.float64)
        # single-pass check: any NaN/Inf makes the sum non-finite
        if not np.isfinite(self.value.sum()):
            raise NonFiniteError(f"non-finite value at node {name!r} "
                                 f"(#{len(tape.nodes)} on trace)")
        self.parents = parents
        self.vjps = vjps
        self.grad = None
        self.name = name
        tape.nodes.append(self)

    @property
    def shape(self):
        return self.value.shape


def _same_shape(a: Tensor, b: Tensor, op: str):
    if a.value.shape != b.value.shape:
        raise ValueError(f"{op}: shape mismatch {a.value.shape} vs {b.value.shape}")


def add(a: Tensor, b: Tensor) -> Tensor:
    _same_shape(a, b, "add")
    return Tensor(a.tape, a.value + b.value, (a, b),
                  (lambda g: g, lambda g: g), "add")


def sub(a: Tensor, b: Tensor) -> Tensor:
    _same_shape(a, b, "sub")
    return Tensor(a.tape, a.value - b.value, (a, b),
                  (lambda g: g, lambda g: -g), "sub")


def mul(a: Tensor, b: Tensor) -> Tensor:
    _same_shape(a, b, "mul")
    return Tensor(a.tape, a.value * b.value, (a, b),
                  (lambda g: g * b.value, lambda g: g * a.value), "mul")


def scale(a: Tensor, c) -> Tensor:
    """Multiply by a constant scalar or array (no gradient through c)."""
    c = np.asarray(c, dtype=np.float64)
    return Tensor(a.tape, a.value * c, (a,), (lambda g: g * c,), "scale")


def shift(a: Tensor, c) -> Tensor:
    """Add a constant scalar or same-shape array."""
    c = np.asarray(c, dtype=np.float64)
    return Tensor(a.tape, a.value + c, (a,), (lambda g: g,), "shift")


def neg(a: Tensor) -> Tensor:
    return Tensor(a.tape, -a.value, (a,), (lambda g: -g,), "neg")


def matmul(x: Tensor, w: Tensor) -> Tensor:
    if x.value.ndim != 2 or w.value.ndim != 2 or x.value.shape[1] != w.value.shape[0]:
        raise ValueError(f"matmul: incompatible shapes {x.value.shape} @ {w.value.shape}")
    return Tensor(x.tape, x.value @ w.value, (x, w),
                  (lambda g: g @ w.value.T, lambda g: x.value.T @ g), "matmul")


def add_bias(x: Tensor, b: Tensor) -> Tensor:
    if x.value.ndim != 2 or b.value.ndim != 1 or x.value.shape[1] != b.value.shape[0]:
        raise ValueError(f"add_bias: incompatible shapes {x.value.shape} + {b.value.shape}")
    return Tensor(x.tape, x.value + b.value, (x, b),
                  (lambda g: g, lambda g: g.sum(axis=0)), "add_bias")


def log(a: Tensor) -> Tensor:
    with np.errstate(invalid="ignore", divide="ignore"):
        value = np.log(a.value)
    return Tensor(a.tape, value, (a,), (lambda g: g / a.value,), "log")


def exp(a: Tensor) -> Tensor:
    out = np.exp(a.value)
    return Tensor(a.tape, out, (a,), (lambda g: g * out,), "exp")


def square(a: Tensor) -> Tensor:
    return Tensor(a.tape, a.value ** 2, (a,), (lambda g: g * 2.0 * a.value,), "square")


def sigmoid(a: Tensor) -> Tensor:
    x = a.value
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return Tensor(a.tape, out, (a,), (lambda g: g * out * (1.0 - out),), "sigmoid")


def elu(a: Tensor) -> Tensor:
    x = a.value
    # exp(min(x,0)) equals the derivative everywhere, and
    # max(x,0) + exp(min(x,0)) - 1 equals the activation
    ex = np.exp(np.minimum(x, 0.0))
    out = np.maximum(x, 0.0) + ex - 1.0
    return Tensor(a.tape, out, (a,), (lambda g: g * ex,), "elu")


def clip(a: Tensor, lo: float, hi: float) -> Tensor:
    mask = ((a.value >= lo) & (a.value <= hi)).astype(np.float64)
    return Tensor(a.tape, np.clip(a.value, lo, hi), (a,), (lambda g: g * mask,), "clip")


def sum_all(a: Tensor) -> Tensor:
    return Tensor(a.tape, np.array(a.value.sum()), (a,),
                  (lambda g: np.full_like(a.value, float(g)),), "sum")


def mean_all(a: Tensor) -> Tensor:
    n = a.value.size
    return Tensor(a.tape, np.array(a.value.mean()), (a,),
                  (lambda g: np.full_like(a.value, float(g) / n),), "mean")


def mean_rows(a: Tensor) -> Tensor:
    """Column means of an (n, k) matrix."""
    if a.value.ndim != 2:
        raise ValueError("mean_rows expects a matrix")
    n = a.value.shape[0]
    return Tensor(a.tape, a.value.mean(axis=0), (a,),
                  (lambda g: np.tile(g / n, (n, 1)),), "mean_rows")


def concat_cols(parts: list[Tensor]) -> Tensor:
    n = parts[0].value.shape[0]
    for p in parts:
        if p.value.ndim != 2 or p.value.shape[0] != n:
            raise ValueError("concat_cols: row-count mismatch")
    widths = [p.value.shape[1] for p in parts]
    offsets = np.cumsum([0] + widths)
    value = np.concatenate([p.value for p in parts], axis=1)
    vjps = tuple((lambda lo, hi: (lambda g: g[:, lo:hi]))(offsets[i], offsets[i + 1])
                 for i in range(len(parts)))
    return Tensor(parts[0].tape, value, tuple(parts), vjps, "concat")


def select_cols(a: Tensor, j: int) -> Tensor:
    """Column j of an (n, k) matrix, as an (n, 1) matrix."""
    if a.value.ndim != 2 or not 0 <= j < a.value.shape[1]:
        raise ValueError(f"select_cols: column {j} out of range for {a.value.shape}")

    def vjp(g):
        out = np.zeros_like(a.value)
        out[:, j:j + 1] = g
        return out

    return Tensor(a.tape, a.value[:, j:j + 1], (a,), (vjp,), "select_cols")


def select_rows(a: Tensor, idx: np.ndarray) -> Tensor:
    idx = np.asarray(idx)

    def vjp(g):
        out = np.zeros_like(a.value)
        np.add.at(out, idx, g)
        return out

    return Tensor(a.tape, a.value[idx], (a,), (vjp,), "select_rows")


def detach(a: Tensor) -> Tensor:
    """Constant copy of a's value; records/replays through the tape."""
    value = a.tape.record_detached(a.value)
    return Tensor(a.tape, value, (), (), "detach")


def mmd_rbf(x0: Tensor, x1: Tensor, bandwidth: float) -> Tensor:
    """Biased squared MMD with Gaussian kernel exp(-d^2 / (2 bw^2)).

    The bandwidth is a constant of the batch; pass the median heuristic value
    computed on detached representations.
    """
    a, b = x0.value, x1.value
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[1]:
        raise ValueError("mmd_rbf: expects matrices with equal width")
    inv = 1.0 / (2.0 * bandwidth ** 2)

    def gram(u, v):
        d2 = (np.sum(u ** 2, 1)[:, None] + np.sum(v ** 2, 1)[None, :] - 2.0 * u @ v.T)
        return np.exp(-np.maximum(d2, 0.0) * inv)

    kaa, kbb, kab = gram(a, a), gram(b, b), gram(a, b)
    m, n = len(a), len(b)
    val = kaa.mean() + kbb.mean() - 2.0 * kab.mean()

    def vjp0(g):
        # d k(u,v) / du = -k * (u - v) / bw^2
        waa = kaa / (m * m)
        wab = kab / (m * n)
        # within-group term appears twice by symmetry
        grad = 2.0 * ((waa.sum(1)[:, None] * a) - waa @ a) * (-2.0 * inv)
        grad -= 2.0 * ((wab.sum(1)[:, None] * a) - wab @ b) * (-2.0 * inv)
        return float(g) * grad

    def vjp1(g):
        wbb = kbb / (n * n)
        wba = kab.T / (m * n)
        grad = 2.0 * ((wbb.sum(1)[:, None] * b) - wbb @ b) * (-2.0 * inv)
        grad -= 2.0 * ((wba.sum(1)[:, None] * b) - wba @ a) * (-2.0 * inv)
        return float(g) * grad

    return Tensor(x0.tape, np.array(val), (x0, x1), (vjp0, vjp1), "mmd_rbf")


def dense(x: Tensor, w: Tensor, b: Tensor, activation: str) -> Tensor:
    """activation(x @ w + b); activation in {identity, elu, sigmoid}."""
    pre = add_bias(matmul(x, w), b)
    if activation == "identity":
        return pre
    if activation == "elu":
        return elu(pre)
    if activation == "sigmoid":
        return sigmoid(pre)
    raise ValueError(f"unknown activation {activation!r}")


def glorot_init(key: int, fan_in: int, fan_out: int) -> np.ndarray:
    limit = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.init_uniform(key, (fan_in, fan_out), limit)


class AdamState:
    """Per-parameter first/second moment accumulators and step counter."""

    def __init__(self, params: dict[str, np.ndarray], lr: float = 1e-3,
                 beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        if lr < 0:
            raise ValueError("learning rate must be >= 0")
        self.lr, self.beta1, self.beta2, self.eps = lr, beta1, beta2, eps
        self.step = 0
        self.m = {k: np.zeros_like(v) for k, v in params.items()}
        self.v = {k: np.zeros_like(v) for k, v in params.items()}


def adam_step(params: dict[str, np.ndarray], grads: dict[str, np.ndarray],
              state: AdamState) -> None:
    """One bias-corrected Adam update, in place."""
    state.step += 1
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1 ** state.step
    c2 = 1.0 - b2 ** state.step
    for name, p in params.items():
        g = grads[name]
        if g.shape != p.shape:
            raise ValueError(f"adam_step: gradient shape {g.shape} != "
                             f"parameter shape {p.shape} for {name!r}")
        m = state.m[name]
        v = state.v[name]
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * g * g
        p -= state.lr * (m / c1) / (np.sqrt(v / c2) + state.eps)


def finite_diff_check(loss_fn, params: dict[str, np.ndarray],
                      eps: float = 1e-5) -> float:
    """Worst relative error between analytic gradients and central differences.

    loss_fn(tape, params) must build and return a scalar Tensor whose
    parameters were registered on `tape` with the names in `params`.  Detached
    values recorded during the base evaluation are replayed at probe points,
    so the check targets the stop-gradient objective.
    """
    if not (0.0 < eps <= 1e-3):
        raise ValueError("eps must be in (0, 1e-3]")
    base_tape = Tape()
    out = loss_fn(base_tape, params)
    _, grads = base_tape.gradients(out)
    recorded = base_tape.detached_values

    def probe(values: dict[str, np.ndarray]) -> float:
        tape = Tape(replay_detached=recorded)
        node = loss_fn(tape, values)
        if node.value.size != 1:
            raise ValueError("loss function must return a scalar")
        return float(node.value)

    worst = 0.0
    for name, p in params.items():
        flat = p.ravel()
        for i in range(flat.size):
            saved = flat[i]
            flat[i] = saved + eps
            up = probe(params)
            flat[i] = saved - eps
            down = probe(params)
            flat[i] = saved
            numeric = (up - down) / (2.0 * eps)
            analytic = grads[name].ravel()[i]
            denom = max(abs(analytic), abs(numeric), 1e-8)
            worst = max(worst, abs(analytic - numeric) / denom)
    return worst
