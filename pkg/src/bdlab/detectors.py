"""Simplified backdoor detectors, the detectability score and bound checks.

Three detector families are represented by their mathematical core:

* output difference: search for a small input shift on which a candidate
  model raises some label's probability above a benign reference;
* weight distance: distance to the nearest member of a benign population
  after removing the hidden-unit permutation and sign symmetries;
* input statistics: a two-sample Hotelling test between the two 2-means
  groups of each predicted class's hidden representations.

The bound checkers evaluate the inequalities that tie each family to the
backdoor distance ``alpha`` at ``beta = 1/kappa``.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
from scipy import stats

from . import nn
from .nn import MLP
from .task import BackdoorSpec, FiniteTask, TaskError, backdoor_distance, region_masses


class DetectorError(ValueError):
    pass


@dataclass(frozen=True)
class BoundCheck:
    """An inequality ``lhs <= rhs`` evaluated at tolerance ``tol``."""

    lhs: float
    rhs: float
    tol: float = 1e-6

    @property
    def holds(self) -> bool:
        return bool(self.lhs <= self.rhs + self.tol)


# ---------------------------------------------------------------------------
# output difference


@dataclass(frozen=True)
class SearchConfig:
    delta: float = 0.1
    restarts: int = 10
    steps: int = 60
    lr: float = 0.03
    seed: int = 0
    targets: tuple | None = None

    def __post_init__(self):
        if self.delta < 0 or self.restarts < 1 or self.steps < 0 or self.lr <= 0:
            raise DetectorError("invalid search configuration")

    @classmethod
    def from_dict(cls, doc: dict | None) -> SearchConfig:
        doc = dict(doc or {})
        if doc.get("targets") is not None:
            doc["targets"] = tuple(doc["targets"])
        return cls(**doc)


@dataclass(frozen=True)
class OutputDiffScore:
    score: float
    target: int
    shift: np.ndarray
    diverged: bool = False


def _mean_proba(models, x):
    return np.mean([nn.forward(m, x) for m in models], axis=0)


def _gap_and_grad(candidate, reference, x, shift, t):
    """Mean target-probability gap at ``clip(x + shift)`` and its shift gradient."""
    moved = x + shift
    inside = ((moved >= 0) & (moved <= 1)).astype(float)
    ax = np.clip(moved, 0.0, 1.0)
    n, L = ax.shape[0], candidate.n_out
    d_out = np.zeros((n, L))
    d_out[:, t] = 1.0 / n
    gap = float(np.mean(nn.forward(candidate, ax)[:, t]))
    _, d_in = nn.vjp(candidate, ax, d_out)
    grad = (d_in * inside).sum(axis=0)
    for ref in reference:
        gap -= float(np.mean(nn.forward(ref, ax)[:, t])) / len(reference)
        _, d_ref = nn.vjp(ref, ax, d_out / len(reference))
        grad -= (d_ref * inside).sum(axis=0)
    return gap, grad


def _project(v, delta):
    norm = np.linalg.norm(v)
    return v if norm <= delta else v * (delta / norm)


def detect_output_diff(candidate: MLP, reference, x, config: SearchConfig = SearchConfig()) -> OutputDiffScore:
    """Largest mean gain in some label's probability over the reference under a shift of norm <= delta.

    ``reference`` is one model or a sequence whose probabilities are
    averaged.  For label ``t`` only inputs the reference does not already
    assign to ``t`` take part.  Restart 0 starts at the zero shift, the
    others uniformly in the ball; the ascent uses normalised gradient steps
    followed by projection.  A non-finite gradient ends that restart and
    sets ``diverged``; the best finite value so far is kept (NaN if there
    is none).
    """
    reference = [reference] if isinstance(reference, MLP) else list(reference)
    if not reference:
        raise DetectorError("empty reference set")
    x = np.atleast_2d(np.asarray(x, dtype=float))
    dim = x.shape[1]
    rng = np.random.default_rng(config.seed)
    ref_pred = np.argmax(_mean_proba(reference, x), axis=1)
    targets = config.targets if config.targets is not None else tuple(range(candidate.n_out))
    best = OutputDiffScore(-np.inf, -1, np.zeros(dim))
    diverged = False
    for t in targets:
        xs = x[ref_pred != t]
        if len(xs) == 0:
            continue
        for r in range(config.restarts):
            if r == 0 or config.delta == 0:
                v = np.zeros(dim)
            else:
                u = rng.standard_normal(dim)
                v = u / np.linalg.norm(u) * config.delta * rng.random() ** (1.0 / dim)
            for _ in range(config.steps + 1):
                gap, grad = _gap_and_grad(candidate, reference, xs, v, t)
                if not (np.isfinite(gap) and np.all(np.isfinite(grad))):
                    diverged = True
                    break
                if gap > best.score:
                    best = OutputDiffScore(gap, int(t), v.copy())
                g = np.linalg.norm(grad)
                if g == 0 or config.delta == 0:
                    break
                v = _project(v + config.lr * grad / g, config.delta)
    if best.target < 0:
        if diverged:
            return OutputDiffScore(float("nan"), -1, best.shift, True)
        raise DetectorError("no input is eligible for any target label")
    return OutputDiffScore(float(best.score), best.target, best.shift, diverged)


# ---------------------------------------------------------------------------
# weight distance


def canonicalize(model: MLP) -> MLP:
    """Remove hidden-unit symmetries.

    With tanh units each unit's sign is fixed so that its first incoming
    weight of magnitude above 1e-8 (bias last) is positive.  Units are then
    ordered by descending norm of their incoming weights and bias.  Relu
    has no sign symmetry, so only the ordering is applied.
    """
    p = [np.array(a, dtype=float) for a in model.params]
    n_layers = len(p) // 2
    for k in range(n_layers - 1):
        w, b, w_next = p[2 * k], p[2 * k + 1], p[2 * k + 2]
        incoming = np.vstack([w, b[None, :]])
        if model.activation == "tanh":
            for j in range(w.shape[1]):
                nz = np.nonzero(np.abs(incoming[:, j]) > 1e-8)[0]
                if nz.size and incoming[nz[0], j] < 0:
                    w[:, j] *= -1
                    b[j] *= -1
                    w_next[j, :] *= -1
            incoming = np.vstack([w, b[None, :]])
        order = np.argsort(-np.linalg.norm(incoming, axis=0), kind="stable")
        p[2 * k], p[2 * k + 1], p[2 * k + 2] = w[:, order], b[order], w_next[order, :]
    return model.with_params(p)


def weight_distance(a: MLP, b: MLP) -> float:
    if a.sizes != b.sizes:
        raise DetectorError("models have different architectures")
    return float(np.linalg.norm(canonicalize(a).flat() - canonicalize(b).flat()))


@dataclass(frozen=True)
class WeightCalibration:
    threshold: float
    loo_distances: tuple
    quantile: float = 95.0


def calibrate_weight_distance(population: Sequence[MLP], quantile: float = 95.0) -> WeightCalibration:
    """Threshold at the given percentile of leave-one-out nearest distances."""
    population = list(population)
    if len(population) < 2:
        raise DetectorError("calibration needs at least two models")
    flat = np.array([canonicalize(m).flat() for m in population])
    d = np.linalg.norm(flat[:, None, :] - flat[None, :, :], axis=2)
    np.fill_diagonal(d, np.inf)
    loo = d.min(axis=1)
    return WeightCalibration(float(np.percentile(loo, quantile)), tuple(map(float, loo)), quantile)


@dataclass(frozen=True)
class DetectionScore:
    score: float
    threshold: float
    flagged: bool


def detect_weight_distance(candidate: MLP, population: Sequence[MLP],
                           calibration: WeightCalibration | None = None) -> DetectionScore:
    """Minimum canonical weight distance from the candidate to the population."""
    population = list(population)
    if not population:
        raise DetectorError("empty benign population")
    cal = calibration or calibrate_weight_distance(population)
    c = canonicalize(candidate).flat()
    score = min(float(np.linalg.norm(c - canonicalize(m).flat())) for m in population)
    return DetectionScore(score, cal.threshold, score > cal.threshold)


# ---------------------------------------------------------------------------
# Hotelling


@dataclass(frozen=True)
class HotellingReport:
    t2: float
    n_p: int
    n_b: int
    m_p: np.ndarray
    m_b: np.ndarray
    cov: np.ndarray
    lambda_max: float
    threshold: float
    decision: bool
    ridged: bool = False

    @property
    def scale(self) -> float:
        return self.n_p * self.n_b / (self.n_p + self.n_b)


def hotelling_t2(xp, xb, level: float = 0.01) -> HotellingReport:
    """Two-sample Hotelling test with pooled covariance.

    ``threshold`` is the ``1 - level`` quantile of the null distribution
    ``p (n-2)/(n-p-1) F(p, n-p-1)``.  A singular pooled covariance gets a
    ridge of ``1e-6 * trace / dim`` and the report is marked ``ridged``.
    """
    xp = np.atleast_2d(np.asarray(xp, dtype=float))
    xb = np.atleast_2d(np.asarray(xb, dtype=float))
    n_p, n_b = len(xp), len(xb)
    dim = xp.shape[1]
    if xb.shape[1] != dim:
        raise DetectorError("samples have different dimensions")
    n = n_p + n_b
    if n <= dim + 2 or n_p < 1 or n_b < 1:
        raise DetectorError(f"need n_p + n_b > dim + 2, got {n} for dim {dim}")
    m_p, m_b = xp.mean(axis=0), xb.mean(axis=0)
    cov = ((xp - m_p).T @ (xp - m_p) + (xb - m_b).T @ (xb - m_b)) / (n - 2)
    eig = np.linalg.eigvalsh(cov)
    ridged = bool(eig[0] <= 1e-12 * max(eig[-1], 1e-300))
    if ridged:
        cov = cov + np.eye(dim) * (1e-6 * max(np.trace(cov), 1e-12) / dim)
        eig = np.linalg.eigvalsh(cov)
    gap = m_p - m_b
    t2 = max(0.0, n_p * n_b / n * float(gap @ np.linalg.solve(cov, gap)))
    threshold = dim * (n - 2) / (n - dim - 1) * float(stats.f.ppf(1 - level, dim, n - dim - 1))
    return HotellingReport(t2, n_p, n_b, m_p, m_b, cov, float(1.0 / eig[0]), threshold,
                           t2 > threshold, ridged)


def representations(model: MLP, x) -> np.ndarray:
    """Activations of the last hidden layer (the inputs for a model without one)."""
    x = np.atleast_2d(np.asarray(x, dtype=float))
    return nn._trace(model, x)[1][-2]


def two_means_split(r, iters: int = 50) -> np.ndarray:
    """Boolean group mask from 2-means seeded by the median split on the principal axis."""
    r = np.atleast_2d(r)
    centred = r - r.mean(axis=0)
    axis = np.linalg.svd(centred, full_matrices=False)[2][0]
    proj = centred @ axis
    mask = proj > np.median(proj)
    for _ in range(iters):
        if mask.all() or not mask.any():
            break
        c1, c0 = r[mask].mean(axis=0), r[~mask].mean(axis=0)
        new = np.sum((r - c1) ** 2, axis=1) < np.sum((r - c0) ** 2, axis=1)
        if np.array_equal(new, mask):
            break
        mask = new
    return mask


@dataclass(frozen=True)
class HotellingScan:
    score: float
    per_class: dict
    ridged: bool


def detect_hotelling(model: MLP, x, level: float = 0.01) -> HotellingScan:
    """Per predicted class: split the representations in two and test the means.

    Classes too small for the test are skipped; the score is the largest
    T^2 over the tested classes (0 when none qualifies).
    """
    r = representations(model, x)
    pred = nn.predict(model, x)
    reports = {}
    for c in np.unique(pred):
        rc = r[pred == c]
        if len(rc) <= rc.shape[1] + 2:
            continue
        mask = two_means_split(rc)
        if mask.sum() < 1 or (~mask).sum() < 1:
            continue
        reports[int(c)] = hotelling_t2(rc[~mask], rc[mask], level)
    score = max((rep.t2 for rep in reports.values()), default=0.0)
    return HotellingScan(float(score), reports, any(rep.ridged for rep in reports.values()))


def calibrate_threshold(benign_scores, quantile: float = 99.0) -> float:
    s = np.asarray(benign_scores, dtype=float)
    if s.size == 0:
        raise DetectorError("no benign scores to calibrate on")
    return float(np.percentile(s, quantile))


# ---------------------------------------------------------------------------
# detectability


@dataclass(frozen=True)
class DetectabilityScore:
    accuracies: dict
    max_accuracy: float
    gamma: float
    thresholds: dict = field(default_factory=dict)


def gamma_from_accuracy(acc: float) -> float:
    return abs(acc - 0.5) * 2.0


def best_threshold_accuracy(benign, backdoored, orientation: str = "both"):
    """Best balanced accuracy over thresholds.

    With ``orientation="both"`` a low-score rule may also be chosen, which
    makes the result symmetric in the two lists; ``"high"`` only calls
    scores above the threshold backdoored, as a deployed detector would.
    Returns ``(accuracy, threshold, sign)``: inputs with
    ``sign * score > sign * threshold`` are called backdoored.
    """
    if orientation not in ("both", "high"):
        raise DetectorError(f"unknown orientation {orientation!r}")
    b = np.sort(np.asarray(benign, dtype=float))
    d = np.sort(np.asarray(backdoored, dtype=float))
    if b.size == 0 or d.size == 0:
        raise DetectorError("both score lists must be nonempty")
    cuts = np.concatenate([[-np.inf], np.unique(np.concatenate([b, d]))])
    # fraction of each list at or below every cut
    fb = np.searchsorted(b, cuts, side="right") / b.size
    fd = np.searchsorted(d, cuts, side="right") / d.size
    acc_hi = 0.5 * (fb + (1.0 - fd))
    if orientation == "high":
        i = int(np.argmax(acc_hi))
        return float(acc_hi[i]), float(cuts[i]), 1
    i = int(np.argmax(np.abs(acc_hi - 0.5)))
    if acc_hi[i] >= 0.5:
        return float(acc_hi[i]), float(cuts[i]), 1
    return float(1.0 - acc_hi[i]), float(cuts[i]), -1


def detectability(benign: dict, backdoored: dict, orientation: str = "both") -> DetectabilityScore:
    """Per-detector best-threshold balanced accuracy and the resulting gamma.

    Both arguments map detector name to a list of scores.
    """
    if set(benign) != set(backdoored) or not benign:
        raise DetectorError("score dictionaries must name the same detectors")
    accs, cuts = {}, {}
    for name in sorted(benign):
        acc, cut, sign = best_threshold_accuracy(benign[name], backdoored[name], orientation)
        accs[name], cuts[name] = acc, (cut, sign)
    best = max(accs.values())
    return DetectabilityScore(accs, best, gamma_from_accuracy(best), cuts)


# ---------------------------------------------------------------------------
# bound checks


def check_target_gap_bound(task: FiniteTask, spec: BackdoorSpec, g_b=None, g_p=None,
                           tol: float = 1e-6) -> BoundCheck:
    """Target-probability gap on ``A(B)`` against ``alpha * kappa`` at ``beta = 1/kappa``.

    The backdoor side averages ``g_b(A(x))_t`` over ``x ~ Pr(. | B)``; the
    primary side averages ``g_P`` over ``A(B)`` under the primary prior.
    ``g_b`` and ``g_p`` are ``(N, L)`` tables and default to the backdoor
    and primary conditionals of the finite task.
    """
    pr_b, pr_ab, _ = region_masses(task, spec)
    if pr_ab <= 0:
        raise TaskError("Pr(A(B)) is zero")
    kappa = pr_b / pr_ab
    at = spec.with_beta(1.0 / kappa)
    rep = backdoor_distance(task, at)
    cond = np.asarray(task.conditional, dtype=float)
    if g_b is None:
        g_b = cond.copy()
        for x, row in spec.target_conditional.items():
            g_b[x] = row
    g_p = cond if g_p is None else np.asarray(g_p, dtype=float)
    g_b = np.asarray(g_b, dtype=float)
    t = spec.target
    lhs = 0.0
    for z, ax in spec.trigger.mapping.items():
        lhs += task.prior[z] / pr_b * g_b[ax, t]
    for ax in spec.trigger.image:
        lhs -= task.prior[ax] / pr_ab * g_p[ax, t]
    return BoundCheck(float(lhs), rep.alpha * kappa, tol)


def linearized_outputs(f_p: MLP, f_b: MLP, x):
    """Outputs of ``f_P`` and of its first-order expansion at ``f_b``'s weights.

    Returns ``(out_p, out_b, phi, d_omega)``: rows of ``out_b - out_p``
    equal ``phi @ d_omega`` reshaped to ``(m, L)``.
    """
    if f_p.sizes != f_b.sizes:
        raise DetectorError("models have different architectures")
    x = np.atleast_2d(np.asarray(x, dtype=float))
    phi = nn.ntk_feature_map(f_p, x)
    d_omega = f_b.flat() - f_p.flat()
    out_p = nn.forward(f_p, x)
    out_b = out_p + (phi @ d_omega).reshape(out_p.shape)
    return out_p, out_b, phi, d_omega


def drift_alpha(out_p, out_b, beta: float) -> float:
    """``(beta / (m L)) sum max(g_P - g_b, 0)`` over inputs and labels."""
    m, L = out_p.shape
    return float(beta / (m * L) * np.maximum(out_p - out_b, 0.0).sum())


def check_weight_gap_bound(f_b: MLP, f_p: MLP, x, kappa: float, tol: float = 1e-6) -> BoundCheck:
    """``kappa sqrt(mL) alpha / ||phi(X)||_2 <= ||omega_b - omega_P||`` in the linear regime.

    ``alpha`` is measured on the linearised outputs at ``beta = 1/kappa``;
    ``||phi(X)||_2`` is the spectral norm of the feature matrix.
    """
    out_p, out_b, phi, d_omega = linearized_outputs(f_p, f_b, x)
    m, L = out_p.shape
    alpha = drift_alpha(out_p, out_b, 1.0 / kappa)
    norm_phi = float(np.linalg.norm(phi, 2))
    if norm_phi == 0:
        return BoundCheck(0.0, float(np.linalg.norm(d_omega)), tol)
    return BoundCheck(kappa * np.sqrt(m * L) * alpha / norm_phi, float(np.linalg.norm(d_omega)), tol)


def task_drift(f_b: MLP, f_p: MLP, x) -> float:
    """``sqrt(sum_x ||f_b(x) - f_P(x)||^2)`` over the head outputs."""
    x = np.atleast_2d(np.asarray(x, dtype=float))
    return float(np.linalg.norm(nn.forward(f_b, x) - nn.forward(f_p, x)))


def check_task_drift_bound(f_b: MLP, f_p: MLP, x, beta: float, tol: float = 1e-6) -> BoundCheck:
    """``alpha sqrt(mL) / beta <= drift`` with ``alpha`` from :func:`drift_alpha` on the actual outputs."""
    x = np.atleast_2d(np.asarray(x, dtype=float))
    out_p, out_b = nn.forward(f_p, x), nn.forward(f_b, x)
    m, L = out_p.shape
    alpha = drift_alpha(out_p, out_b, beta)
    return BoundCheck(alpha * np.sqrt(m * L) / beta, task_drift(f_b, f_p, x), tol)


def check_hotelling_bound(report: HotellingReport, alpha: float, sampling_radius: float = 0.0,
                          tol: float = 1e-9) -> BoundCheck:
    """``T^2 <= lambda_max n_p n_b/(n_p+n_b) (alpha + r)^2``.

    ``alpha`` bounds the distance between the population means; ``r``
    allows for the deviation of the sample mean gap from it (0 checks the
    plug-in inequality with ``alpha`` at least the sample gap).
    """
    return BoundCheck(report.t2, report.lambda_max * report.scale * (alpha + sampling_radius) ** 2,
                      tol * max(1.0, report.t2))
