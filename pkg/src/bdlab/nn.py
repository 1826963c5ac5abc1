"""Small feedforward classifiers with hand-written backpropagation.

Parameters are stored as a tuple ``(W0, b0, W1, b1, ...)`` with
``W_k`` of shape ``(fan_in, fan_out)``; layers compute ``a @ W + b``.
Hidden layers use tanh (or relu); the head is a softmax over labels or,
for the linearised checks, the raw outputs.

Every loss returns a :class:`LossResult` holding the value, gradients for
the model parameters, and gradients with respect to the inputs that
carry the trigger (used to train the trigger map).
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Callable

import numpy as np

LOG_FLOOR = 1e-12
MODEL_FORMAT_VERSION = 1


class ModelError(ValueError):
    pass


class TrainingDiverged(RuntimeError):
    """Non-finite loss or weights; ``last_finite`` holds the previous iterate."""

    def __init__(self, message, last_finite):
        super().__init__(message)
        self.last_finite = last_finite


# ---------------------------------------------------------------------------
# model


@dataclass(frozen=True)
class MLP:
    params: tuple
    activation: str = "tanh"
    head: str = "softmax"
    seed: int = 0

    def __post_init__(self):
        params = tuple(np.array(p, dtype=float) for p in self.params)
        if len(params) % 2 or not params:
            raise ModelError("params must alternate weights and biases")
        if self.activation not in ("tanh", "relu"):
            raise ModelError(f"unknown activation {self.activation!r}")
        if self.head not in ("softmax", "linear"):
            raise ModelError(f"unknown head {self.head!r}")
        for w, b in zip(params[::2], params[1::2]):
            if w.ndim != 2 or b.shape != (w.shape[1],):
                raise ModelError("layer shapes disagree")
        for p in params:
            p.setflags(write=False)
        object.__setattr__(self, "params", params)

    @property
    def sizes(self) -> tuple:
        return (self.params[0].shape[0],) + tuple(w.shape[1] for w in self.params[::2])

    @property
    def n_in(self) -> int:
        return self.sizes[0]

    @property
    def n_out(self) -> int:
        return self.sizes[-1]

    @property
    def n_params(self) -> int:
        return sum(p.size for p in self.params)

    def with_params(self, params) -> MLP:
        return replace(self, params=tuple(params))

    def flat(self) -> np.ndarray:
        return np.concatenate([p.ravel() for p in self.params])

    def from_flat(self, vec) -> MLP:
        vec = np.asarray(vec, dtype=float)
        out, k = [], 0
        for p in self.params:
            out.append(vec[k:k + p.size].reshape(p.shape))
            k += p.size
        return self.with_params(out)

    def is_finite(self) -> bool:
        return all(np.all(np.isfinite(p)) for p in self.params)


def init_mlp(sizes, seed: int = 0, activation: str = "tanh", head: str = "softmax",
             zero_last: bool = False, scale: float = 1.0) -> MLP:
    """Glorot-normal weights, zero biases.  ``zero_last`` zeroes the output layer."""
    if len(sizes) < 2 or len(sizes) > 5:
        raise ModelError("between 0 and 3 hidden layers")
    rng = np.random.default_rng(seed)
    params = []
    for k, (a, b) in enumerate(zip(sizes[:-1], sizes[1:])):
        if zero_last and k == len(sizes) - 2:
            w = np.zeros((a, b))
        else:
            w = rng.standard_normal((a, b)) * scale * np.sqrt(2.0 / (a + b))
        params += [w, np.zeros(b)]
    return MLP(tuple(params), activation, head, seed)


def zero_model(n_in: int, n_out: int, hidden=(), **kw) -> MLP:
    sizes = (n_in,) + tuple(hidden) + (n_out,)
    return MLP(tuple(np.zeros(s) for a, b in zip(sizes[:-1], sizes[1:]) for s in ((a, b), (b,))), **kw)


def softmax(z):
    z = z - z.max(axis=1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=1, keepdims=True)


def _act(kind, z):
    return np.tanh(z) if kind == "tanh" else np.maximum(z, 0.0)


def _act_grad(kind, z, a):
    return 1.0 - a * a if kind == "tanh" else (z > 0).astype(float)


def _as_batch(model, x):
    x = np.asarray(x, dtype=float)
    single = x.ndim == 1
    x = np.atleast_2d(x)
    if x.shape[1] != model.n_in:
        raise ModelError(f"input dimension {x.shape[1]} != model input {model.n_in}")
    return x, single


def _trace(model, x):
    """Forward pass keeping pre-activations ``zs`` and activations ``acts``."""
    acts, zs = [x], []
    n_layers = len(model.params) // 2
    a = x
    for k in range(n_layers):
        z = a @ model.params[2 * k] + model.params[2 * k + 1]
        zs.append(z)
        if k < n_layers - 1:
            a = _act(model.activation, z)
        else:
            a = softmax(z) if model.head == "softmax" else z
        acts.append(a)
    return zs, acts


def forward(model: MLP, x) -> np.ndarray:
    """Head output: class probabilities (softmax head) or raw outputs (linear head)."""
    x, single = _as_batch(model, x)
    out = _trace(model, x)[1][-1]
    return out[0] if single else out


def forward_proba(model: MLP, x) -> np.ndarray:
    if model.head != "softmax":
        raise ModelError("forward_proba needs a softmax head")
    return forward(model, x)


def predict(model: MLP, x) -> np.ndarray:
    """Argmax label; ties go to the lowest index."""
    return np.argmax(np.atleast_2d(forward(model, x)), axis=1)


def _backward(model, zs, acts, d_out, per_example=False):
    """Backpropagate ``d_out = dL/d(head output)``.

    Returns ``(grads, d_input)``; with ``per_example`` each gradient has a
    leading batch axis and nothing is summed over examples.
    """
    n_layers = len(model.params) // 2
    out = acts[-1]
    if model.head == "softmax":
        delta = out * (d_out - np.sum(out * d_out, axis=1, keepdims=True))
    else:
        delta = d_out
    grads = [None] * len(model.params)
    for k in reversed(range(n_layers)):
        a_in = acts[k]
        if per_example:
            grads[2 * k] = np.einsum("ni,nj->nij", a_in, delta)
            grads[2 * k + 1] = delta.copy()
        else:
            grads[2 * k] = a_in.T @ delta
            grads[2 * k + 1] = delta.sum(axis=0)
        d_a = delta @ model.params[2 * k].T
        if k > 0:
            delta = d_a * _act_grad(model.activation, zs[k - 1], acts[k])
    return grads, d_a


def vjp(model: MLP, x, d_out):
    """Gradients of ``sum(d_out * head(x))`` w.r.t. parameters and inputs."""
    x, _ = _as_batch(model, x)
    zs, acts = _trace(model, x)
    return _backward(model, zs, acts, np.atleast_2d(d_out))


# ---------------------------------------------------------------------------
# losses


@dataclass(frozen=True)
class LossResult:
    value: float
    grads: tuple
    d_inputs: np.ndarray | None = None
    info: dict = field(default_factory=dict)


def _clamped_log(p):
    return np.log(np.maximum(p, LOG_FLOOR))


def soft_cross_entropy(model: MLP, x, targets, weights) -> LossResult:
    """``-sum_i w_i sum_k T_ik log g(x_i)_k`` with the log clamped at ``LOG_FLOOR``.

    Returns gradients for the parameters and for every input row.
    """
    x, _ = _as_batch(model, x)
    targets = np.atleast_2d(np.asarray(targets, dtype=float))
    weights = np.asarray(weights, dtype=float)
    if x.shape[0] == 0:
        raise ModelError("empty batch")
    zs, acts = _trace(model, x)
    p = acts[-1]
    c = weights[:, None] * targets
    value = -float(np.sum(c * _clamped_log(p)))
    d_p = np.where(p > LOG_FLOOR, -c / np.maximum(p, LOG_FLOOR), 0.0)
    grads, d_x = _backward(model, zs, acts, d_p)
    return LossResult(value, tuple(grads), d_x)


def one_hot(y, n_labels):
    y = np.asarray(y, dtype=int)
    out = np.zeros((y.size, n_labels))
    out[np.arange(y.size), y] = 1.0
    return out


def mixture_targets(y_source, target, alpha_star, n_labels):
    """Rows ``((1+a)/2) e_t + ((1-a)/2) e_y`` for the trigger-carrying inputs."""
    hi = (1.0 + alpha_star) / 2.0
    return hi * one_hot(np.full(len(y_source), target), n_labels) + (1.0 - hi) * one_hot(y_source, n_labels)


def _attack_rows(model, x_clean, y_clean, x_trig, y_trig, target, alpha_star, beta):
    if not -1.0 <= alpha_star <= 1.0:
        raise ModelError("alpha_star must lie in [-1, 1]")
    n_clean, n_trig = len(x_clean), len(x_trig)
    if n_clean == 0:
        raise ModelError("empty clean batch")
    L = model.n_out
    rows = [np.asarray(x_clean, dtype=float)]
    targets = [one_hot(y_clean, L)]
    weights = [np.full(n_clean, 1.0 / n_clean)]
    if n_trig:
        rows.append(np.asarray(x_trig, dtype=float))
        targets.append(mixture_targets(y_trig, target, alpha_star, L))
        weights.append(np.full(n_trig, beta / n_trig))
    return np.vstack(rows), np.vstack(targets), np.concatenate(weights), n_clean


def backdoor_term(model: MLP, x_trig, y_trig, target: int, alpha_star: float,
                  beta: float) -> LossResult:
    """The triggered part of :func:`loss_attack` alone (the clean part does not depend on the trigger)."""
    if not -1.0 <= alpha_star <= 1.0:
        raise ModelError("alpha_star must lie in [-1, 1]")
    n = len(x_trig)
    if n == 0:
        raise ModelError("empty trigger batch")
    t = mixture_targets(y_trig, target, alpha_star, model.n_out)
    return soft_cross_entropy(model, x_trig, t, np.full(n, beta / n))


def loss_attack(model: MLP, x_clean, y_clean, x_trig, y_trig, target: int,
                alpha_star: float, beta: float) -> LossResult:
    """Clean cross-entropy minus the beta-weighted mixture log-likelihood on triggered inputs.

    ``x_trig`` holds the ``A(x)`` for ``x`` in the backdoor region and
    ``y_trig`` their original labels.  ``d_inputs`` is the gradient with
    respect to ``x_trig``.
    """
    x, t, w, n_clean = _attack_rows(model, x_clean, y_clean, x_trig, y_trig, target, alpha_star, beta)
    res = soft_cross_entropy(model, x, t, w)
    return LossResult(res.value, res.grads, res.d_inputs[n_clean:])


def loss_discriminator(disc: MLP, x_benign, x_trig) -> LossResult:
    """``-mean log C(A(x)) - mean log(1 - C(x))`` with ``C`` the class-1 probability.

    ``d_inputs`` is the gradient with respect to ``x_trig``.
    """
    if disc.n_out != 2:
        raise ModelError("discriminator needs a 2-class head")
    m, k = len(x_benign), len(x_trig)
    if m == 0 or k == 0:
        raise ModelError("empty batch")
    x = np.vstack([np.asarray(x_trig, dtype=float), np.asarray(x_benign, dtype=float)])
    t = np.vstack([one_hot(np.ones(k, int), 2), one_hot(np.zeros(m, int), 2)])
    w = np.concatenate([np.full(k, 1.0 / k), np.full(m, 1.0 / m)])
    res = soft_cross_entropy(disc, x, t, w)
    return LossResult(res.value, res.grads, res.d_inputs[:k])


def loss_trigger_refine(base: LossResult, disc_loss: LossResult, zeta: float,
                        omega: float) -> LossResult:
    """Base attack loss plus ``omega * max(L_A(C) - zeta, 0)``.

    Both inputs must carry ``d_inputs`` over the same triggered rows; the
    result only has input gradients (it is minimised over the trigger).
    """
    excess = disc_loss.value - zeta
    active = excess > 0
    value = base.value + omega * max(excess, 0.0)
    d = base.d_inputs + (omega * disc_loss.d_inputs if active else 0.0)
    return LossResult(value, (), d, {"penalty_active": bool(active)})


def output_gap_scan(f_b: MLP, f_p: MLP, pool):
    """Index and value of ``max_x ||g_b(x) - g_P(x)||_2`` over a finite pool."""
    pool = np.atleast_2d(np.asarray(pool, dtype=float))
    if pool.shape[0] == 0:
        raise ModelError("empty clean pool")
    gaps = np.linalg.norm(forward(f_b, pool) - forward(f_p, pool), axis=1)
    i = int(np.argmax(gaps))
    return i, float(gaps[i])


def loss_backdoor_train(f_b: MLP, f_p: MLP, x_clean, y_clean, x_trig, y_trig, target: int,
                        alpha_star: float, beta: float, pool) -> LossResult:
    """Attack loss on ``f_b`` plus the largest output gap to ``f_P`` over ``pool``.

    The pool stands in for inputs without the trigger; its maximiser is
    found by an explicit scan.
    """
    base = loss_attack(f_b, x_clean, y_clean, x_trig, y_trig, target, alpha_star, beta)
    i, gap = output_gap_scan(f_b, f_p, pool)
    grads = list(base.grads)
    if gap > 0:
        x_c = np.atleast_2d(np.asarray(pool, dtype=float)[i])
        diff = forward(f_b, x_c) - forward(f_p, x_c)
        g_reg, _ = vjp(f_b, x_c, diff / gap)
        grads = [g + r for g, r in zip(grads, g_reg)]
    return LossResult(base.value + gap, tuple(grads), base.d_inputs, {"x_c_index": i, "gap": gap})


def quadratic_loss(model: MLP, center) -> LossResult:
    """``0.5 * ||theta - center||^2`` over the flattened parameters (test helper)."""
    diff = model.flat() - np.asarray(center, dtype=float)
    g = model.from_flat(diff).params
    return LossResult(0.5 * float(diff @ diff), g)


# ---------------------------------------------------------------------------
# datasets and training


@dataclass(frozen=True)
class LabeledDataset:
    x: np.ndarray
    y: np.ndarray
    n_labels: int
    poison: np.ndarray | None = None

    def __post_init__(self):
        x = np.atleast_2d(np.asarray(self.x, dtype=float))
        y = np.asarray(self.y, dtype=int)
        if x.shape[0] == 0 or x.shape[0] != y.size:
            raise ModelError("dataset must be nonempty with one label per point")
        if y.min() < 0 or y.max() >= self.n_labels:
            raise ModelError("label out of range")
        for name, arr in (("x", x), ("y", y)):
            arr.setflags(write=False)
            object.__setattr__(self, name, arr)

    def __len__(self):
        return self.y.size

    def subset(self, idx) -> LabeledDataset:
        idx = np.asarray(idx, dtype=int)
        return LabeledDataset(self.x[idx], self.y[idx], self.n_labels)


@dataclass(frozen=True)
class TrainConfig:
    lr: float = 1e-3
    epochs: int = 200
    batch_size: int | None = None
    seed: int = 0
    optimizer: str = "adam"
    keep_best: bool = True

    def __post_init__(self):
        if not self.lr > 0:
            raise ModelError("learning rate must be positive")
        if self.epochs < 0:
            raise ModelError("epochs must be nonnegative")
        if self.optimizer not in ("adam", "gd"):
            raise ModelError(f"unknown optimizer {self.optimizer!r}")


class Adam:
    def __init__(self, shapes, lr, b1=0.9, b2=0.999, eps=1e-8):
        self.lr, self.b1, self.b2, self.eps = lr, b1, b2, eps
        self.m = [np.zeros(s) for s in shapes]
        self.v = [np.zeros(s) for s in shapes]
        self.t = 0

    def step(self, params, grads):
        self.t += 1
        out = []
        for i, (p, g) in enumerate(zip(params, grads)):
            self.m[i] = self.b1 * self.m[i] + (1 - self.b1) * g
            self.v[i] = self.b2 * self.v[i] + (1 - self.b2) * g * g
            mh = self.m[i] / (1 - self.b1 ** self.t)
            vh = self.v[i] / (1 - self.b2 ** self.t)
            out.append(p - self.lr * mh / (np.sqrt(vh) + self.eps))
        return out


class GradientDescent:
    def __init__(self, shapes, lr):
        self.lr = lr

    def step(self, params, grads):
        return [p - self.lr * g for p, g in zip(params, grads)]


def make_optimizer(kind, shapes, lr):
    return Adam(shapes, lr) if kind == "adam" else GradientDescent(shapes, lr)


def _batches(n, batch_size, rng):
    if batch_size is None or batch_size >= n:
        yield None
        return
    perm = rng.permutation(n)
    for s in range(0, n, batch_size):
        yield perm[s:s + batch_size]


def train(model: MLP, objective: Callable, config: TrainConfig, n_items: int | None = None,
          log: list | None = None) -> MLP:
    """Minimise ``objective(model, idx) -> LossResult`` from ``model``.

    ``idx`` is a batch of item indices, or None for the full set (always
    None when ``n_items`` is None or no batch size is set).  One epoch is
    one pass over the items.  With ``keep_best`` the returned model is the
    full-objective minimiser among the epoch-end iterates and the start,
    so the final loss never exceeds the initial loss.
    """
    rng = np.random.default_rng(config.seed)
    opt = make_optimizer(config.optimizer, [p.shape for p in model.params], config.lr)
    full_batch = not n_items or config.batch_size is None or config.batch_size >= n_items
    res = objective(model, None)
    if not np.isfinite(res.value):
        raise TrainingDiverged("non-finite initial loss", model)
    best, best_val = model, res.value
    if log is not None:
        log.append(res.value)
    current = model
    for epoch in range(config.epochs):
        if full_batch:
            # the full-objective evaluation doubles as the next step's gradient
            nxt = current.with_params(opt.step(current.params, res.grads))
            if not nxt.is_finite():
                raise TrainingDiverged(f"non-finite weights at epoch {epoch}", current)
        else:
            nxt = current
            for idx in _batches(n_items, config.batch_size, rng):
                step = objective(nxt, idx)
                if not np.isfinite(step.value):
                    raise TrainingDiverged(f"non-finite loss at epoch {epoch}", nxt)
                cand = nxt.with_params(opt.step(nxt.params, step.grads))
                if not cand.is_finite():
                    raise TrainingDiverged(f"non-finite weights at epoch {epoch}", nxt)
                nxt = cand
        res = objective(nxt, None)
        if not np.isfinite(res.value):
            raise TrainingDiverged(f"non-finite loss at epoch {epoch}", current)
        current = nxt
        if log is not None:
            log.append(res.value)
        if res.value <= best_val or not config.keep_best:
            best, best_val = current, res.value
    return best


def cross_entropy_objective(data: LabeledDataset) -> Callable:
    """Mean cross-entropy over the dataset (or a batch of it)."""
    targets = one_hot(data.y, data.n_labels)

    def objective(model, idx):
        if idx is None:
            idx = slice(None)
        x, t = data.x[idx], targets[idx]
        return soft_cross_entropy(model, x, t, np.full(len(x), 1.0 / len(x)))

    return objective


def train_classifier(data: LabeledDataset, hidden=(16, 16), config: TrainConfig | None = None,
                     init_seed: int | None = None, activation: str = "tanh") -> MLP:
    config = config or TrainConfig()
    seed = config.seed if init_seed is None else init_seed
    model = init_mlp((data.x.shape[1],) + tuple(hidden) + (data.n_labels,), seed, activation)
    return train(model, cross_entropy_objective(data), config, len(data))


def accuracy(model: MLP, data: LabeledDataset) -> float:
    return float(np.mean(predict(model, data.x) == data.y))


# ---------------------------------------------------------------------------
# checks and feature maps


def grad_check(model: MLP, loss: Callable, eps: float = 1e-5) -> float:
    """Max relative error between analytic and central-difference gradients.

    ``loss(model) -> LossResult``.  Relative error per coordinate is
    ``|a - n| / max(|a|, |n|, 1e-6)``.
    """
    analytic = np.concatenate([np.ravel(g) for g in loss(model).grads])
    theta = model.flat()
    numeric = np.empty_like(theta)
    for i in range(theta.size):
        up, dn = theta.copy(), theta.copy()
        up[i] += eps
        dn[i] -= eps
        numeric[i] = (loss(model.from_flat(up)).value - loss(model.from_flat(dn)).value) / (2 * eps)
    denom = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), 1e-6)
    return float(np.max(np.abs(analytic - numeric) / denom))


def input_grad_check(value_and_grad: Callable, x, eps: float = 1e-5) -> float:
    """Same check for a function of an input array: ``f(x) -> (value, dx)``."""
    x = np.asarray(x, dtype=float)
    _, analytic = value_and_grad(x)
    analytic = np.ravel(analytic)
    flat = x.ravel()
    numeric = np.empty_like(flat)
    for i in range(flat.size):
        up, dn = flat.copy(), flat.copy()
        up[i] += eps
        dn[i] -= eps
        numeric[i] = (value_and_grad(up.reshape(x.shape))[0]
                      - value_and_grad(dn.reshape(x.shape))[0]) / (2 * eps)
    denom = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), 1e-6)
    return float(np.max(np.abs(analytic - numeric) / denom))


def ntk_feature_map(model: MLP, x) -> np.ndarray:
    """Parameter Jacobian of the head output at the current weights.

    Returns an ``(m * L, P)`` matrix; row ``i * L + k`` is
    ``d head(x_i)_k / d theta`` in the :meth:`MLP.flat` ordering.
    """
    x, _ = _as_batch(model, x)
    zs, acts = _trace(model, x)
    m, L = x.shape[0], model.n_out
    phi = np.empty((m, L, model.n_params))
    for k in range(L):
        d_out = np.zeros((m, L))
        d_out[:, k] = 1.0
        grads, _ = _backward(model, zs, acts, d_out, per_example=True)
        phi[:, k, :] = np.concatenate([g.reshape(m, -1) for g in grads], axis=1)
    return phi.reshape(m * L, model.n_params)


# ---------------------------------------------------------------------------
# serialisation


def save_model(path, model: MLP) -> None:
    arrays = {f"p{i}": p for i, p in enumerate(model.params)}
    np.savez(
        path,
        version=np.array(MODEL_FORMAT_VERSION),
        activation=np.array(model.activation),
        head=np.array(model.head),
        seed=np.array(model.seed),
        n_params=np.array(len(model.params)),
        **arrays,
    )


def load_model(path) -> MLP:
    with np.load(Path(path), allow_pickle=False) as z:
        version = int(z["version"])
        if version != MODEL_FORMAT_VERSION:
            raise ModelError(f"unsupported model format version {version}")
        params = tuple(z[f"p{i}"] for i in range(int(z["n_params"])))
        return MLP(params, str(z["activation"]), str(z["head"]), int(z["seed"]))
