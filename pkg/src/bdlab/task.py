"""Finite task distributions and exact backdoor distance.

A task is a joint distribution over a finite input set times a label set
``{0..L-1}``.  A backdoor re-weights the joint on the trigger-carrying
inputs ``A(B)``; everything here is computed exactly on the tables.

Conventions
-----------
* Inputs are indexed ``0..N-1``; ``coords[i]`` is a point of ``[0,1]^n``.
* Tables are ``numpy`` arrays of shape ``(N, L)``.
* Argmax ties resolve to the lowest label.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field, replace

import numpy as np
from scipy.optimize import linprog

PROB_TOL = 1e-12
MAX_TRANSPORT_CELLS = 64


class TaskError(ValueError):
    """Invalid task, trigger, or backdoor specification."""


class OutOfScopeError(TaskError):
    """The closed-form distance theorem does not apply (Z < 1)."""


class UndefinedKappaError(TaskError):
    """``Pr(A(B)) == 0`` so kappa is undefined."""


class SupportMismatchError(TaskError):
    pass


class TransportTooLargeError(TaskError):
    pass


def _check_prob_vector(v, what):
    v = np.asarray(v, dtype=float)
    if np.any(v < -PROB_TOL) or np.any(v > 1 + PROB_TOL):
        raise TaskError(f"{what}: entries outside [0, 1]")
    if abs(v.sum() - 1.0) > PROB_TOL * max(1, v.size):
        raise TaskError(f"{what}: sums to {v.sum()!r}, not 1")
    return v


@dataclass(frozen=True)
class FiniteTask:
    """Primary task on a finite input set.

    Parameters
    ----------
    coords : (N, n) array
        Input coordinates, all inside the unit hypercube.
    prior : (N,) array
        ``Pr(x)``.
    conditional : (N, L) array
        ``Pr(y | x)`` under the primary distribution.
    """

    coords: np.ndarray
    prior: np.ndarray
    conditional: np.ndarray

    def __post_init__(self):
        coords = np.atleast_2d(np.asarray(self.coords, dtype=float))
        prior = np.asarray(self.prior, dtype=float)
        cond = np.atleast_2d(np.asarray(self.conditional, dtype=float))
        if prior.ndim != 1 or coords.shape[0] != prior.size or cond.shape[0] != prior.size:
            raise TaskError("coords, prior and conditional disagree on the number of inputs")
        if np.any(coords < 0) or np.any(coords > 1):
            raise TaskError("input coordinates must lie in [0,1]^n")
        _check_prob_vector(prior, "prior")
        for i, row in enumerate(cond):
            _check_prob_vector(row, f"conditional row {i}")
        for name, arr in (("coords", coords), ("prior", prior), ("conditional", cond)):
            arr.setflags(write=False)
            object.__setattr__(self, name, arr)

    @property
    def n_inputs(self) -> int:
        return self.prior.size

    @property
    def n_labels(self) -> int:
        return self.conditional.shape[1]

    def joint(self) -> JointDistribution:
        return JointDistribution(self.prior[:, None] * self.conditional)

    def argmax_labels(self) -> np.ndarray:
        # np.argmax already returns the first maximum
        return np.argmax(self.conditional, axis=1)


@dataclass(frozen=True)
class JointDistribution:
    """Probability table over ``(input, label)`` cells."""

    mass: np.ndarray

    def __post_init__(self):
        mass = np.atleast_2d(np.asarray(self.mass, dtype=float))
        if np.any(mass < -PROB_TOL):
            raise TaskError("negative mass in joint distribution")
        if abs(mass.sum() - 1.0) > PROB_TOL * max(1, mass.size):
            raise TaskError(f"joint mass sums to {mass.sum()!r}, not 1")
        mass.setflags(write=False)
        object.__setattr__(self, "mass", mass)

    @property
    def shape(self):
        return self.mass.shape

    def marginal(self) -> np.ndarray:
        return self.mass.sum(axis=1)


@dataclass(frozen=True)
class TriggerMap:
    """Trigger function ``A`` restricted to its backdoor region ``B``.

    ``mapping[x] = A(x)`` for every ``x`` in ``B``.
    """

    mapping: dict

    def __post_init__(self):
        m = {int(k): int(v) for k, v in dict(self.mapping).items()}
        object.__setattr__(self, "mapping", m)

    @property
    def region(self) -> tuple:
        return tuple(sorted(self.mapping))

    @property
    def image(self) -> tuple:
        return tuple(sorted(set(self.mapping.values())))

    def preimage(self, x: int) -> tuple:
        return tuple(sorted(z for z, ax in self.mapping.items() if ax == x))

    def validate(self, task: FiniteTask, target: int) -> None:
        """Check that every mapped input exists and the region is valid.

        Valid means neither ``x`` nor ``A(x)`` is labelled ``target`` by the
        primary conditional.
        """
        n = task.n_inputs
        labels = task.argmax_labels()
        for x, ax in self.mapping.items():
            if not (0 <= x < n and 0 <= ax < n):
                raise TaskError(f"trigger maps {x} -> {ax}, outside the task's inputs")
            if labels[x] == target or labels[ax] == target:
                raise TaskError(
                    f"input {x} (or its trigger image {ax}) already has the target label {target}"
                )


@dataclass(frozen=True)
class BackdoorSpec:
    """Trigger, target label, amplification and the backdoor conditional.

    ``target_conditional`` maps every input of ``A(B)`` to the label
    distribution the adversary wants on it.
    """

    trigger: TriggerMap
    target: int
    beta: float
    target_conditional: dict = field(default_factory=dict)

    def __post_init__(self):
        if not self.beta > 0:
            raise TaskError("beta must be positive")
        tc = {}
        for x, row in dict(self.target_conditional).items():
            row = _check_prob_vector(row, f"target conditional for input {x}").copy()
            row.setflags(write=False)
            tc[int(x)] = row
        missing = set(self.trigger.image) - set(tc)
        if missing:
            raise TaskError(f"target conditional missing for trigger images {sorted(missing)}")
        object.__setattr__(self, "target_conditional", tc)

    def with_beta(self, beta: float) -> BackdoorSpec:
        return replace(self, beta=float(beta))


@dataclass(frozen=True)
class DistanceReport:
    distance: float
    alpha: float
    kappa: float
    s_value: float
    z_norm: float
    lower_bound: float
    upper_bound: float
    bounds_sound: bool
    certified_lower_bound: float
    witness: tuple
    pr_B: float
    pr_AB: float
    beta: float

    @property
    def h_divergence(self) -> float:
        return 2.0 * self.distance

    @property
    def alpha_over_beta(self) -> float:
        return self.alpha / self.beta


# ---------------------------------------------------------------------------
# region masses


def region_masses(task: FiniteTask, spec: BackdoorSpec):
    """Return ``(Pr(B), Pr(A(B)), Z)``."""
    pr_b = float(sum(task.prior[x] for x in spec.trigger.region))
    pr_ab = float(sum(task.prior[x] for x in spec.trigger.image))
    z = 1.0 - pr_ab + spec.beta * pr_b
    return pr_b, pr_ab, z


def kappa_of(task: FiniteTask, spec: BackdoorSpec) -> float:
    pr_b, pr_ab, _ = region_masses(task, spec)
    if pr_ab <= 0:
        raise UndefinedKappaError("Pr(A(B)) is zero")
    return pr_b / pr_ab


def _preimage_mass(task, spec):
    # Pr(A^{-1}(x) ∩ B) for each x in A(B)
    out = {}
    for z, ax in spec.trigger.mapping.items():
        out[ax] = out.get(ax, 0.0) + float(task.prior[z])
    return out


def build_backdoor_distribution(task: FiniteTask, spec: BackdoorSpec) -> JointDistribution:
    """Construct the backdoor joint distribution.

    Trigger images get mass ``target_conditional * Pr(preimage) * beta``,
    every other input keeps its primary mass, and the table is divided by
    ``Z = 1 - Pr(A(B)) + beta * Pr(B)``.
    """
    spec.trigger.validate(task, spec.target)
    _, _, z = region_masses(task, spec)
    if z <= 0:
        raise TaskError(f"normaliser Z = {z} is not positive")
    mass = task.prior[:, None] * task.conditional
    for x, pre in _preimage_mass(task, spec).items():
        mass[x] = spec.target_conditional[x] * pre * spec.beta
    return JointDistribution(mass / z)


def d_hw1_exact(d1: JointDistribution, d2: JointDistribution):
    """Exact sup over ``h: X x Y -> [0,1]`` of ``E_d1 h - E_d2 h``.

    The optimal ``h`` is the indicator of the cells where ``d1 > d2``.

    Returns
    -------
    distance : float
    witness : tuple of (input, label)
        Support of the optimal ``h``.
    """
    if d1.shape != d2.shape:
        raise SupportMismatchError(f"supports differ: {d1.shape} vs {d2.shape}")
    diff = d1.mass - d2.mass
    pos = diff > 0
    witness = tuple((int(i), int(j)) for i, j in zip(*np.nonzero(pos)))
    return float(diff[pos].sum()), witness


def _region_weights(task, spec):
    """Within-region input weights on ``A(B)`` under both distributions."""
    pr_b, pr_ab, _ = region_masses(task, spec)
    image = list(spec.trigger.image)
    pre = _preimage_mass(task, spec)
    w_b = np.array([pre[x] / pr_b for x in image])
    w_p = np.array([task.prior[x] / pr_ab for x in image])
    g_b = np.array([spec.target_conditional[x] for x in image])
    g_p = task.conditional[image]
    return image, w_b, w_p, g_b, g_p


def s_value(task: FiniteTask, spec: BackdoorSpec) -> float:
    """Conditional-probability gain mass on ``A(B) x Y``."""
    pr_b, pr_ab, _ = region_masses(task, spec)
    if not spec.trigger.mapping:
        raise TaskError("empty backdoor region")
    if pr_ab <= 0 or pr_b <= 0:
        raise UndefinedKappaError("region has zero probability")
    _, w_b, w_p, g_b, g_p = _region_weights(task, spec)
    delta = w_b[:, None] * g_b - w_p[:, None] * g_p
    return float(np.maximum(delta, 0.0).sum())


def _in_theorem_range(kappa, beta):
    return kappa >= 1 - PROB_TOL and 1 / kappa - PROB_TOL <= beta <= 1 + PROB_TOL


def distance_bounds(task: FiniteTask, spec: BackdoorSpec):
    """Lower and upper bound on the backdoor distance.

    Returns ``(lower, upper, sound)``; ``sound`` is False when kappa < 1 or
    beta is outside ``[1/kappa, 1]``, in which case the bounds are only
    the plug-in formulas.
    """
    pr_b, _, z = region_masses(task, spec)
    kappa = kappa_of(task, spec)
    s = s_value(task, spec)
    ratio = spec.beta / z
    lower = (ratio - (1.0 - s) / kappa) * pr_b
    upper = ratio * pr_b
    return lower, upper, _in_theorem_range(kappa, spec.beta)


def certified_lower_bound(task: FiniteTask, spec: BackdoorSpec) -> float:
    """Lower bound ``Pr(B) * max(S/kappa, beta/Z - 1/kappa)``.

    Holds whenever ``beta/Z >= 1/kappa``.  The two-term lower bound of
    :func:`distance_bounds` can exceed the distance as soon as some cell of
    ``A(B) x Y`` loses conditional mass; this one cannot.
    """
    pr_b, _, z = region_masses(task, spec)
    kappa = kappa_of(task, spec)
    s = s_value(task, spec)
    return pr_b * max(s / kappa, spec.beta / z - 1.0 / kappa)


def backdoor_distance(task: FiniteTask, spec: BackdoorSpec) -> DistanceReport:
    """Backdoor distance via the probability gain on ``A(B)``.

    Raises
    ------
    OutOfScopeError
        If ``Z < 1``; use :func:`s_value` alone in that regime.
    UndefinedKappaError
        If ``Pr(A(B)) == 0``.
    """
    spec.trigger.validate(task, spec.target)
    pr_b, pr_ab, z = region_masses(task, spec)
    if pr_ab <= 0:
        raise UndefinedKappaError("Pr(A(B)) is zero")
    if z < 1 - PROB_TOL:
        raise OutOfScopeError(
            f"Z = {z:.6g} < 1 (beta below Pr(A(B))/Pr(B)); the gain formula does not apply"
        )
    primary = task.joint()
    backdoor = build_backdoor_distribution(task, spec)
    image = list(spec.trigger.image)
    gain = backdoor.mass[image] - primary.mass[image]
    distance = float(np.maximum(gain, 0.0).sum())
    witness = tuple(
        (image[i], int(y)) for i, y in zip(*np.nonzero(gain > 0))
    )
    lower, upper, sound = distance_bounds(task, spec)
    if not sound:
        warnings.warn(
            "beta outside [1/kappa, 1] or kappa < 1: distance bounds are not guaranteed",
            stacklevel=2,
        )
    return DistanceReport(
        distance=distance,
        alpha=distance / pr_b,
        kappa=pr_b / pr_ab,
        s_value=s_value(task, spec),
        z_norm=z,
        lower_bound=lower,
        upper_bound=upper,
        bounds_sound=sound,
        certified_lower_bound=certified_lower_bound(task, spec),
        witness=witness,
        pr_B=pr_b,
        pr_AB=pr_ab,
        beta=spec.beta,
    )


def bounds_at_beta_extremes(task: FiniteTask, spec: BackdoorSpec, check: bool = True):
    """Distance range when beta sweeps ``[1/kappa, 1]`` with kappa fixed.

    Returns ``(S Pr(B)/kappa, kappa Pr(B)/(kappa + kappa Pr(B) - Pr(B)))``.
    With ``check`` the distance is re-evaluated at both endpoints: at
    ``beta = 1/kappa`` it must equal the lower value, at ``beta = 1`` it
    must not exceed the upper value.
    """
    kappa = kappa_of(task, spec)
    if kappa < 1 - PROB_TOL:
        raise TaskError(f"kappa = {kappa:.6g} < 1")
    pr_b, _, _ = region_masses(task, spec)
    s = s_value(task, spec)
    lo = s * pr_b / kappa
    hi = kappa * pr_b / (kappa + kappa * pr_b - pr_b)
    if check:
        with warnings.catch_warnings():
            warnings.simplefilter("ignore")
            d_lo = backdoor_distance(task, spec.with_beta(1.0 / kappa)).distance
            d_hi = backdoor_distance(task, spec.with_beta(1.0)).distance
        if abs(d_lo - lo) > 1e-9 or d_hi > hi + 1e-9:
            raise AssertionError(
                f"endpoint check failed: d(1/kappa)={d_lo} vs {lo}, d(1)={d_hi} vs {hi}"
            )
    return lo, hi


def bounds_at_kappa_extremes(task: FiniteTask, spec: BackdoorSpec):
    """Distance range when kappa sweeps ``[1/beta, inf)`` with beta fixed."""
    if spec.beta > 1 + PROB_TOL:
        raise TaskError("beta must be <= 1")
    pr_b, _, _ = region_masses(task, spec)
    s = s_value(task, spec)
    return kappa_extremes(s, spec.beta, pr_b)


def kappa_extremes(s: float, beta: float, pr_b: float):
    return s * beta * pr_b, beta * pr_b


# ---------------------------------------------------------------------------
# Wasserstein-1 on the finite support


def ground_metric(coords: np.ndarray, n_labels: int) -> np.ndarray:
    """Cell-to-cell cost: Euclidean input distance plus label mismatch, capped at 1."""
    n = coords.shape[0]
    dx = np.linalg.norm(coords[:, None, :] - coords[None, :, :], axis=-1)
    lab = np.arange(n_labels)
    dy = (lab[:, None] != lab[None, :]).astype(float)
    cost = dx[:, None, :, None] + dy[None, :, None, :]
    return np.minimum(cost, 1.0).reshape(n * n_labels, n * n_labels)


def wasserstein1_finite(d1: JointDistribution, d2: JointDistribution, coords) -> float:
    """Exact Wasserstein-1 distance between two joint tables.

    Solved as a transport LP over the positive-mass cells (at most
    ``MAX_TRANSPORT_CELLS`` on each side).
    """
    if d1.shape != d2.shape:
        raise SupportMismatchError(f"supports differ: {d1.shape} vs {d2.shape}")
    coords = np.atleast_2d(np.asarray(coords, dtype=float))
    cost_full = ground_metric(coords, d1.shape[1])
    a = d1.mass.ravel()
    b = d2.mass.ravel()
    ia = np.nonzero(a > 0)[0]
    ib = np.nonzero(b > 0)[0]
    if ia.size > MAX_TRANSPORT_CELLS or ib.size > MAX_TRANSPORT_CELLS:
        raise TransportTooLargeError(
            f"{ia.size} x {ib.size} support cells exceeds {MAX_TRANSPORT_CELLS}"
        )
    cost = cost_full[np.ix_(ia, ib)]
    na, nb = ia.size, ib.size
    a_eq = np.zeros((na + nb, na * nb))
    for i in range(na):
        a_eq[i, i * nb:(i + 1) * nb] = 1.0
    for j in range(nb):
        a_eq[na + j, j::nb] = 1.0
    # drop one redundant equality row so HiGHS sees a full-rank system
    rhs = np.concatenate([a[ia], b[ib] * (a[ia].sum() / b[ib].sum())])
    res = linprog(
        cost.ravel(), A_eq=a_eq[:-1], b_eq=rhs[:-1], bounds=(0, None), method="highs"
    )
    if res.status != 0:
        raise TaskError(f"transport LP failed: {res.message}")
    return float(max(res.fun, 0.0))
