"""Trigger-function optimisation, discriminator refinement and backdoor training.

The trigger is a residual map ``A(x) = clip(x + P(r(x)))`` where ``r`` is a
small MLP and ``P`` the radial projection onto the ``delta`` ball, so the
budget holds for every input by construction.  The attack runs:

1. train a benign model ``f_P``;
2. fit ``A`` so that ``f_P`` on ``A(x)`` approaches the mixture with the
   target weight ``(1 - alpha*)/2`` (inputs pulled towards the boundary);
3. ``epoch_adj`` rounds of: fit a discriminator between ``x`` and ``A(x)``,
   then refit ``A`` with a penalty when the discriminator loss exceeds ``zeta``;
4. poison the training set with ``A(x)`` carrying soft labels of target
   weight ``(1 + alpha*)/2`` and train ``f_b`` with an output-gap
   regulariser against ``f_P``.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field, replace

import numpy as np

from . import nn
from .estimators import approx_alpha
from .nn import MLP, LabeledDataset, LossResult, TrainConfig
from .synthetic import MixtureSpec
from .task import BackdoorSpec, FiniteTask, OutOfScopeError, TriggerMap, backdoor_distance, s_value


class AttackError(ValueError):
    pass


@dataclass(frozen=True)
class AttackHyperparams:
    alpha_star: float = 0.9
    beta: float = 0.1
    epoch_adj: int = 3
    delta: float = 0.1
    zeta: float = 0.1
    omega_penalty: float = 0.1
    source: int = 1
    target: int = 0
    seed: int = 0
    lr: float = 0.01
    benign_epochs: int = 600
    trigger_epochs: int = 300
    disc_epochs: int = 200
    refine_epochs: int = 100
    backdoor_epochs: int = 600
    hidden: tuple = (16, 16)
    trigger_hidden: tuple = (16,)
    disc_hidden: tuple = (16, 16)
    pool_size: int = 256
    pool_exclusion: float | None = None

    def __post_init__(self):
        if not 0 < self.alpha_star <= 1:
            raise AttackError("alpha_star must lie in (0, 1]")
        if self.beta < 0:
            raise AttackError("beta must be nonnegative")
        if self.delta < 0:
            raise AttackError("delta must be nonnegative")
        if self.source == self.target:
            raise AttackError("source and target must differ")
        if self.epoch_adj < 0:
            raise AttackError("epoch_adj must be nonnegative")
        object.__setattr__(self, "hidden", tuple(self.hidden))
        object.__setattr__(self, "trigger_hidden", tuple(self.trigger_hidden))
        object.__setattr__(self, "disc_hidden", tuple(self.disc_hidden))

    @classmethod
    def from_dict(cls, doc: dict | None) -> AttackHyperparams:
        doc = dict(doc or {})
        keys = cls.__dataclass_fields__
        return cls(**{k: v for k, v in doc.items() if k in keys})

    @property
    def exclusion_radius(self) -> float:
        """Pool points this close to a poison image are not treated as clean (default: ``delta``)."""
        return self.delta if self.pool_exclusion is None else self.pool_exclusion

    def seeds(self) -> dict:
        """Independent seeds for every trained component."""
        names = ("benign", "trigger", "disc", "backdoor", "poison", "pool")
        ss = np.random.SeedSequence(self.seed).spawn(len(names))
        return {n: int(s.generate_state(1)[0]) for n, s in zip(names, ss)}


# ---------------------------------------------------------------------------
# trigger


def project_ball(r, delta):
    """Radial projection of rows of ``r`` onto the ``delta`` ball."""
    norm = np.linalg.norm(r, axis=1, keepdims=True)
    scale = np.where(norm > delta, delta / np.maximum(norm, 1e-300), 1.0)
    return r * scale


def _project_ball_vjp(r, delta, d_out):
    norm = np.linalg.norm(r, axis=1, keepdims=True)
    outside = (norm > delta)[:, 0]
    d = d_out.copy()
    if np.any(outside):
        ro, no, go = r[outside], norm[outside], d_out[outside]
        u = ro / no
        d[outside] = (delta / no) * (go - u * np.sum(u * go, axis=1, keepdims=True))
    return d


@dataclass(frozen=True)
class TriggerNet:
    """``A(x) = clip_[0,1](x + project_delta(r(x)))`` with ``r`` an MLP."""

    net: MLP
    delta: float

    @classmethod
    def identity(cls, dim: int, delta: float, hidden=(16,), seed: int = 0) -> TriggerNet:
        # last layer zero: the trigger starts as the identity map
        net = nn.init_mlp((dim,) + tuple(hidden) + (dim,), seed, head="linear", zero_last=True)
        return cls(net, float(delta))

    def perturbation(self, x) -> np.ndarray:
        return project_ball(nn.forward(self.net, np.atleast_2d(x)), self.delta)

    def __call__(self, x) -> np.ndarray:
        x = np.atleast_2d(np.asarray(x, dtype=float))
        return np.clip(x + self.perturbation(x), 0.0, 1.0)

    def vjp(self, x, d_ax):
        """Parameter gradients of ``sum(d_ax * A(x))``."""
        x = np.atleast_2d(np.asarray(x, dtype=float))
        r = nn.forward(self.net, x)
        raw = x + project_ball(r, self.delta)
        inside = (raw > 0.0) & (raw < 1.0)
        d_r = _project_ball_vjp(r, self.delta, np.where(inside, d_ax, 0.0))
        grads, _ = nn.vjp(self.net, x, d_r)
        return tuple(grads)

    def with_net(self, net: MLP) -> TriggerNet:
        return replace(self, net=net)


def patch_trigger(delta: float, direction) -> TriggerNet:
    """Constant shift of length ``delta`` along ``direction`` (a blunt baseline trigger)."""
    d = np.asarray(direction, dtype=float)
    d = delta * d / np.linalg.norm(d)
    n = d.size
    # zero weights and a bias equal to the shift: r(x) = d for every x
    net = nn.MLP((np.zeros((n, n)), d), head="linear")
    return TriggerNet(net, float(delta))


# ---------------------------------------------------------------------------
# attack


@dataclass(frozen=True)
class LogRow:
    phase: str
    epoch: int
    loss: float
    asr: float = float("nan")
    alpha_estimate: float = float("nan")


@dataclass(frozen=True)
class AttackResult:
    trigger: TriggerNet
    backdoored: MLP
    benign: MLP
    log: tuple
    region_index: np.ndarray
    poison_index: np.ndarray
    flags: tuple = ()
    hyper: AttackHyperparams = field(default_factory=AttackHyperparams)

    def log_rows(self):
        return [(r.phase, r.epoch, r.loss, r.asr, r.alpha_estimate) for r in self.log]


def backdoor_region(f_p: MLP, trigger: TriggerNet, x, source: int, target: int) -> np.ndarray:
    """Indices with ``f_P(x) = source`` and ``f_P(A(x)) != target``."""
    pred = nn.predict(f_p, x)
    pred_ax = nn.predict(f_p, trigger(x))
    return np.nonzero((pred == source) & (pred_ax != target))[0]


def asr(model: MLP, trigger: TriggerNet, x_eval, target: int, f_p: MLP | None = None) -> float:
    """Fraction of triggered inputs classified as ``target``.

    With ``f_p`` the evaluation set is first restricted to inputs with
    ``f_P(x) != target`` and ``f_P(A(x)) != target``; an empty set gives 0.
    """
    x_eval = np.atleast_2d(np.asarray(x_eval, dtype=float))
    ax = trigger(x_eval)
    if f_p is not None:
        keep = (nn.predict(f_p, x_eval) != target) & (nn.predict(f_p, ax) != target)
        ax = ax[keep]
    if len(ax) == 0:
        return 0.0
    return float(np.mean(nn.predict(model, ax) == target))


def discriminator_loss_after_fit(trigger, x_b, hyper, seed):
    """Fit a fresh discriminator on ``(x, A(x))`` and return it with its final loss."""
    dim = x_b.shape[1]
    c0 = nn.init_mlp((dim,) + hyper.disc_hidden + (2,), seed)
    ax = trigger(x_b)
    obj = lambda c, idx: nn.loss_discriminator(c, x_b, ax)
    c = nn.train(c0, obj, TrainConfig(lr=hyper.lr, epochs=hyper.disc_epochs, seed=seed))
    return c, nn.loss_discriminator(c, x_b, ax).value


def _clean_pool(spec_or_pool, hyper, seeds, ax_train):
    if isinstance(spec_or_pool, MixtureSpec):
        pool = spec_or_pool.sample(hyper.pool_size, seeds["pool"]).x
    else:
        pool = np.atleast_2d(np.asarray(spec_or_pool, dtype=float))
    radius = hyper.exclusion_radius
    if len(ax_train) and radius > 0:
        d = np.linalg.norm(pool[:, None, :] - ax_train[None, :, :], axis=2).min(axis=1)
        pool = pool[d > radius]
    if len(pool) == 0:
        raise AttackError("clean pool is empty after excluding trigger images")
    return pool


def tsa_attack(data: LabeledDataset, hyper: AttackHyperparams, pool=None,
               benign: MLP | None = None) -> AttackResult:
    """Run the full attack on ``data``; the backdoor region is the source class.

    ``pool`` supplies the clean inputs scanned by the output-gap regulariser
    (a :class:`MixtureSpec` to sample from, or an array); by default the
    training inputs are used.  ``benign`` skips line 1 with a given model.
    """
    seeds = hyper.seeds()
    log = []
    flags = []
    dim, L = data.x.shape[1], data.n_labels
    cfg = lambda epochs, seed: TrainConfig(lr=hyper.lr, epochs=epochs, seed=seed)

    # line 1
    if benign is None:
        ce_log = []
        f_p = nn.train(nn.init_mlp((dim,) + hyper.hidden + (L,), seeds["benign"]),
                       nn.cross_entropy_objective(data), cfg(hyper.benign_epochs, seeds["benign"]),
                       log=ce_log)
        log.append(LogRow("benign", hyper.benign_epochs, ce_log[-1]))
    else:
        f_p = benign

    source_idx = np.nonzero(data.y == hyper.source)[0]
    if source_idx.size == 0:
        raise AttackError("no source-class points in the training data")
    x_src = data.x[source_idx]
    if np.mean(nn.predict(f_p, x_src) == hyper.target) > 0.5:
        raise AttackError("target is the majority benign prediction on the source class")
    y_src = data.y[source_idx]
    clean_x, clean_y = data.x, data.y

    def attack_loss(model, alpha):
        # the clean cross-entropy is constant in the trigger: evaluate it once
        clean = nn.cross_entropy_objective(data)(model, None).value

        def loss(ax):
            r = nn.backdoor_term(model, ax, y_src, hyper.target, alpha, hyper.beta)
            return LossResult(clean + r.value, r.grads, r.d_inputs)

        return loss

    # line 2
    trigger = TriggerNet.identity(dim, hyper.delta, hyper.trigger_hidden, seeds["trigger"])
    t_log = []
    if hyper.delta > 0:
        trig_obj = attack_loss(f_p, -hyper.alpha_star)

        def objective(net, idx):
            tr = trigger.with_net(net)
            res = trig_obj(tr(x_src))
            return LossResult(res.value, tr.vjp(x_src, res.d_inputs))

        trigger = trigger.with_net(nn.train(trigger.net, objective, cfg(hyper.trigger_epochs, seeds["trigger"]), log=t_log))
        log.append(LogRow("trigger", hyper.trigger_epochs, t_log[-1],
                          asr(f_p, trigger, x_src, hyper.target, f_p)))
    p_before = nn.forward(f_p, x_src)[:, hyper.target]
    p_after = nn.forward(f_p, trigger(x_src))[:, hyper.target]
    if np.max(np.abs(p_after - p_before)) < 1e-6:
        flags.append("trigger_ineffective")

    # lines 3-6
    for rnd in range(hyper.epoch_adj):
        disc, la = discriminator_loss_after_fit(trigger, x_src, hyper, seeds["disc"] + rnd)
        log.append(LogRow("discriminator", rnd, la))
        if hyper.delta == 0:
            continue
        base = attack_loss(f_p, -hyper.alpha_star)

        def refine_objective(net, idx, disc=disc):
            tr = trigger.with_net(net)
            ax = tr(x_src)
            res = nn.loss_trigger_refine(base(ax), nn.loss_discriminator(disc, x_src, ax),
                                         hyper.zeta, hyper.omega_penalty)
            return LossResult(res.value, tr.vjp(x_src, res.d_inputs), None, res.info)

        r_log = []
        trigger = trigger.with_net(nn.train(trigger.net, refine_objective,
                                            cfg(hyper.refine_epochs, seeds["trigger"] + rnd + 1), log=r_log))
        log.append(LogRow("refine", rnd, r_log[-1]))
    if hyper.epoch_adj and hyper.delta > 0:
        # same seed as round 0, so the two fits differ only in the trigger
        _, la = discriminator_loss_after_fit(trigger, x_src, hyper, seeds["disc"])
        log.append(LogRow("discriminator", hyper.epoch_adj, la))

    # line 7: poison beta * |source| points of the backdoor region
    region = backdoor_region(f_p, trigger, x_src, hyper.source, hyper.target)
    rng = np.random.default_rng(seeds["poison"])
    n_poison = min(int(round(hyper.beta * source_idx.size)), region.size)
    poison_local = np.sort(rng.choice(region, size=n_poison, replace=False)) if n_poison else np.array([], int)
    x_poison = trigger(x_src[poison_local]) if n_poison else np.empty((0, dim))
    y_poison = y_src[poison_local]
    weight = n_poison / len(clean_x)
    pool_x = _clean_pool(pool if pool is not None else clean_x, hyper, seeds, x_poison)

    def backdoor_objective(model, idx):
        if n_poison == 0:
            return nn.cross_entropy_objective(data)(model, None)
        return nn.loss_backdoor_train(model, f_p, clean_x, clean_y, x_poison, y_poison,
                                      hyper.target, hyper.alpha_star, weight, pool_x)

    b_log = []
    f_b = nn.train(nn.init_mlp((dim,) + hyper.hidden + (L,), seeds["backdoor"]), backdoor_objective,
                   cfg(hyper.backdoor_epochs, seeds["backdoor"]), log=b_log)
    log.append(LogRow("backdoor", hyper.backdoor_epochs, b_log[-1],
                      asr(f_b, trigger, x_src, hyper.target, f_p)))
    return AttackResult(trigger, f_b, f_p, tuple(log), source_idx[region], source_idx[poison_local],
                        tuple(flags), hyper)


def train_benign(data: LabeledDataset, hyper: AttackHyperparams, seed: int) -> MLP:
    """Plain training with the attack's architecture and schedule."""
    dim, L = data.x.shape[1], data.n_labels
    model = nn.init_mlp((dim,) + hyper.hidden + (L,), seed)
    return nn.train(model, nn.cross_entropy_objective(data),
                    TrainConfig(lr=hyper.lr, epochs=hyper.benign_epochs, seed=seed))


def patch_attack(data: LabeledDataset, hyper: AttackHyperparams, direction=(0.0, 1.0)) -> AttackResult:
    """Blunt baseline: constant-shift trigger, hard target labels on poisons, no regulariser."""
    seeds = hyper.seeds()
    dim, L = data.x.shape[1], data.n_labels
    f_p = train_benign(data, hyper, seeds["benign"])
    trigger = patch_trigger(hyper.delta, direction)
    source_idx = np.nonzero(data.y == hyper.source)[0]
    rng = np.random.default_rng(seeds["poison"])
    n_poison = int(round(hyper.beta * source_idx.size))
    chosen = np.sort(rng.choice(source_idx, size=n_poison, replace=False))
    x = np.vstack([data.x, trigger(data.x[chosen])])
    y = np.concatenate([data.y, np.full(n_poison, hyper.target)])
    f_b = train_benign(LabeledDataset(x, y, L), hyper, seeds["backdoor"])
    region = backdoor_region(f_p, trigger, data.x[source_idx], hyper.source, hyper.target)
    log = (LogRow("backdoor", hyper.backdoor_epochs, float("nan"),
                  asr(f_b, trigger, data.x[source_idx], hyper.target, f_p)),)
    return AttackResult(trigger, f_b, f_p, log, source_idx[region], chosen, (), hyper)


# ---------------------------------------------------------------------------
# measured alpha


@dataclass(frozen=True)
class AlphaMeasurement:
    alpha: float
    alpha_over_beta: float
    s_value: float
    kappa: float
    z_norm: float
    pr_B: float
    pr_AB: float
    sampled_alpha: float
    in_scope: bool
    n_region_cells: int
    n_image_cells: int


def discretized_backdoor(mixture: MixtureSpec, f_p: MLP, f_b: MLP, trigger: TriggerNet,
                         source: int, target: int, beta: float, region: str = "effective"):
    """Finite task on the grid and the backdoor spec induced by the trained models.

    The primary conditional is ``g_P`` at each cell centre.  ``B`` is the set
    of cells whose centre ``z`` has ``f_P(z) = source`` and whose trigger
    image lands in a cell not labelled ``target``; with
    ``region="effective"`` (default) it is further restricted to cells where
    the backdoor works, ``f_b(A(z)) = target``.  On every image cell
    both conditionals are prior-weighted averages over its preimages of
    ``g_P(A(z))`` and ``g_b(A(z))``.
    """
    prior = mixture.discretize().prior
    centers = mixture.cell_centers()
    cond = nn.forward(f_p, centers).copy()
    az = trigger(centers)
    img = mixture.cell_index(az)
    gp_az = nn.forward(f_p, az)
    gb_az = nn.forward(f_b, az)
    src = (nn.predict(f_p, centers) == source) & (prior > 0)
    if region == "effective":
        src &= nn.predict(f_b, az) == target
    elif region != "source":
        raise AttackError(f"unknown region rule {region!r}")
    cand = np.nonzero(src)[0]
    # image-cell conditionals from the candidate preimages
    num_p, num_b, den = {}, {}, {}
    for z in cand:
        x = int(img[z])
        den[x] = den.get(x, 0.0) + prior[z]
        num_p[x] = num_p.get(x, 0.0) + prior[z] * gp_az[z]
        num_b[x] = num_b.get(x, 0.0) + prior[z] * gb_az[z]
    for x in den:
        cond[x] = num_p[x] / den[x]
    labels = np.argmax(cond, axis=1)
    mapping = {int(z): int(img[z]) for z in cand
               if labels[img[z]] != target and labels[z] != target and den[int(img[z])] > 0}
    if not mapping:
        return FiniteTask(centers, prior, cond), None
    tc = {x: num_b[x] / den[x] for x in set(mapping.values())}
    task = FiniteTask(centers, prior, cond / cond.sum(axis=1, keepdims=True))
    return task, BackdoorSpec(TriggerMap(mapping), target, beta, tc)


def measured_alpha(result: AttackResult, mixture: MixtureSpec, beta: float | None = None,
                   x_samples=None) -> AlphaMeasurement:
    """alpha of an attack on the grid discretisation, plus the sampled estimate.

    The reported ``alpha_over_beta`` is ``alpha / beta`` when ``Z >= 1``;
    otherwise the closed form does not apply and ``S`` is reported instead
    (``in_scope`` is then False).  ``x_samples`` are benign source inputs for
    the sampled estimate (default: the grid centres of ``B``).
    """
    h = result.hyper
    beta = h.beta if beta is None else beta
    task, spec = discretized_backdoor(mixture, result.benign, result.backdoored, result.trigger,
                                      h.source, h.target, beta)
    if spec is None:
        return AlphaMeasurement(0.0, 0.0, 0.0, float("nan"), 1.0, 0.0, 0.0, 0.0, False, 0, 0)
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        try:
            rep = backdoor_distance(task, spec)
            in_scope = True
        except OutOfScopeError:
            rep = None
            in_scope = False
    s = s_value(task, spec)
    if rep is None:
        pr_b = float(task.prior[list(spec.trigger.region)].sum())
        pr_ab = float(task.prior[list(spec.trigger.image)].sum())
        kappa, z, alpha = pr_b / pr_ab, 1 - pr_ab + beta * pr_b, float("nan")
        ratio = s
    else:
        pr_b, pr_ab, kappa, z, alpha = rep.pr_B, rep.pr_AB, rep.kappa, rep.z_norm, rep.alpha
        ratio = alpha / beta
    if x_samples is None:
        x_samples = task.coords[list(spec.trigger.region)]
    ax = result.trigger(np.atleast_2d(x_samples))
    sampled = approx_alpha(ax, lambda p: nn.forward(result.backdoored, p),
                           lambda p: nn.forward(result.benign, p), beta, kappa, z)
    return AlphaMeasurement(alpha, ratio, s, kappa, z, pr_b, pr_ab, sampled, in_scope,
                            len(spec.trigger.region), len(spec.trigger.image))


# ---------------------------------------------------------------------------
# trigger files


def save_trigger(path, trigger: TriggerNet) -> None:
    """Perturbation net in the model format plus the budget."""
    net = trigger.net
    arrays = {f"p{i}": p for i, p in enumerate(net.params)}
    np.savez(path, version=np.array(nn.MODEL_FORMAT_VERSION), kind=np.array("trigger"),
             delta=np.array(trigger.delta), activation=np.array(net.activation), head=np.array(net.head),
             seed=np.array(net.seed), n_params=np.array(len(net.params)), **arrays)


def load_trigger(path) -> TriggerNet:
    with np.load(path, allow_pickle=False) as z:
        if str(z.get("kind", "")) != "trigger":
            raise AttackError(f"{path} is not a trigger file")
        if int(z["version"]) != nn.MODEL_FORMAT_VERSION:
            raise AttackError(f"unsupported trigger format version {int(z['version'])}")
        params = tuple(z[f"p{i}"] for i in range(int(z["n_params"])))
        net = MLP(params, str(z["activation"]), str(z["head"]), int(z["seed"]))
        return TriggerNet(net, float(z["delta"]))
