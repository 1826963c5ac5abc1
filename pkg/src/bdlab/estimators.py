"""Sampled alpha approximation and kappa estimation.

kappa is split into a volume factor (mean boundary extent of the two
regions) and a density factor (ratio of expected prior density, computed
through latent codes of a Gaussian prior).  Regions are given as
membership tests plus samplers; the prior is analytic so the whole chain
can be checked against quadrature.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass
from typing import Callable

import numpy as np

from .task import BackdoorSpec, FiniteTask, TaskError, region_masses


class EstimatorError(ValueError):
    pass


class DirectionError(EstimatorError):
    """Could not build a direction (origin coincides with every sample)."""


# ---------------------------------------------------------------------------
# alpha


def approx_alpha(trigger_inputs, g_b: Callable, g_p: Callable, beta, kappa, z_norm,
                 weights_b=None, weights_p=None) -> float:
    """Average positive gain of the backdoor conditional over trigger inputs.

    ``trigger_inputs`` are points already carrying the trigger, i.e. the
    ``A(x_i)``.  ``g_b`` and ``g_p`` map a batch of inputs to rows of label
    probabilities.  Without weights every sample counts ``1/m``.  With
    weights, sample ``i`` contributes
    ``max((beta/Z) w_b[i] g_b - (1/kappa) w_p[i] g_p, 0)`` summed over labels,
    which is exact on a finite task when the weights are the within-region
    input probabilities under the backdoor and the primary distribution.
    """
    inputs = np.asarray(trigger_inputs)
    m = len(inputs)
    if m == 0:
        raise EstimatorError("empty trigger sample")
    pb = np.atleast_2d(np.asarray(g_b(inputs), dtype=float))
    pp = np.atleast_2d(np.asarray(g_p(inputs), dtype=float))
    if pb.shape != pp.shape or pb.shape[0] != m:
        raise EstimatorError("oracles disagree on the output shape")
    if weights_b is None and weights_p is None:
        wb = wp = np.full(m, 1.0 / m)
    else:
        wb = np.asarray(weights_b, dtype=float)
        wp = np.asarray(weights_p, dtype=float)
    gain = (beta / z_norm) * wb[:, None] * pb - (1.0 / kappa) * wp[:, None] * pp
    return float(np.maximum(gain, 0.0).sum())


def table_oracle(rows) -> Callable:
    """Conditional oracle over input indices backed by a table."""
    rows = np.asarray(rows, dtype=float)
    return lambda idx: rows[np.asarray(idx, dtype=int)]


def finite_oracles(task: FiniteTask, spec: BackdoorSpec):
    """Exact ``(g_b, g_p)`` for a finite task: the backdoor conditional on A(B)."""
    g_b_rows = np.array(task.conditional, dtype=float)
    for x, row in spec.target_conditional.items():
        g_b_rows[x] = row
    return table_oracle(g_b_rows), table_oracle(task.conditional)


def exhaustive_alpha(task: FiniteTask, spec: BackdoorSpec) -> float:
    """Weighted sum over every input of ``A(B)`` with exact oracles."""
    pr_b, pr_ab, z = region_masses(task, spec)
    image = np.array(spec.trigger.image, dtype=int)
    pre = np.zeros(task.n_inputs)
    for x, ax in spec.trigger.mapping.items():
        pre[ax] += task.prior[x]
    g_b, g_p = finite_oracles(task, spec)
    return approx_alpha(
        image, g_b, g_p, spec.beta, pr_b / pr_ab, z,
        weights_b=pre[image] / pr_b, weights_p=task.prior[image] / pr_ab,
    )


def sample_trigger_inputs(task: FiniteTask, spec: BackdoorSpec, m: int, rng,
                          measure: str = "region") -> np.ndarray:
    """Draw ``m`` trigger-carrying input indices.

    ``measure="region"`` draws ``x ~ Pr(. | B)`` and returns ``A(x)``;
    ``measure="image"`` draws directly from ``Pr(. | A(B))`` under the
    primary prior.
    """
    if measure == "region":
        region = np.array(spec.trigger.region, dtype=int)
        p = task.prior[region] / task.prior[region].sum()
        xs = rng.choice(region, size=m, p=p)
        return np.array([spec.trigger.mapping[int(x)] for x in xs], dtype=int)
    if measure == "image":
        image = np.array(spec.trigger.image, dtype=int)
        p = task.prior[image] / task.prior[image].sum()
        return rng.choice(image, size=m, p=p)
    raise EstimatorError(f"unknown sampling measure {measure!r}")


# ---------------------------------------------------------------------------
# regions


@dataclass(frozen=True)
class RegionOracle:
    """Membership test plus a sampler of points inside the region.

    ``contains`` maps an ``(k, n)`` array to a boolean ``(k,)`` array;
    ``sampler(rng, k)`` returns ``k`` points of the region.
    """

    contains: Callable
    sampler: Callable
    dim: int
    name: str = "region"

    def sample(self, rng, k: int) -> np.ndarray:
        pts = np.asarray(self.sampler(rng, k), dtype=float).reshape(k, self.dim)
        if not np.all(self.contains(pts)):
            raise EstimatorError(f"sampler of {self.name} produced points outside the region")
        return pts


def disc_region(center, radius: float) -> RegionOracle:
    """Euclidean ball (a disc in 2-D)."""
    c = np.asarray(center, dtype=float)
    n = c.size

    def contains(p):
        return np.linalg.norm(np.atleast_2d(p) - c, axis=1) <= radius

    def sampler(rng, k):
        d = rng.standard_normal((k, n))
        d /= np.linalg.norm(d, axis=1, keepdims=True)
        r = radius * rng.random(k) ** (1.0 / n)
        return c + d * r[:, None]

    return RegionOracle(contains, sampler, n, f"ball(r={radius})")


def box_region(low, high) -> RegionOracle:
    """Axis-aligned box."""
    lo = np.asarray(low, dtype=float)
    hi = np.asarray(high, dtype=float)

    def contains(p):
        p = np.atleast_2d(p)
        return np.all((p >= lo) & (p <= hi), axis=1)

    def sampler(rng, k):
        return lo + (hi - lo) * rng.random((k, lo.size))

    return RegionOracle(contains, sampler, lo.size, "box")


def square_region(center, side: float) -> RegionOracle:
    c = np.asarray(center, dtype=float)
    return box_region(c - side / 2, c + side / 2)


def predicate_region(contains: Callable, dim: int, name: str = "predicate",
                     max_draws: int = 1_000_000) -> RegionOracle:
    """Region given only by a membership test; sampled by rejection from the unit cube."""

    def sampler(rng, k):
        out = []
        have = 0
        drawn = 0
        while have < k:
            batch = rng.random((max(4 * k, 256), dim))
            drawn += len(batch)
            keep = batch[contains(batch)]
            out.append(keep)
            have += len(keep)
            if drawn > max_draws and have < k:
                raise EstimatorError(f"{name}: region too small to sample by rejection")
        return np.concatenate(out)[:k]

    return RegionOracle(contains, sampler, dim, name)


# ---------------------------------------------------------------------------
# extent


@dataclass(frozen=True)
class ExtentConfig:
    n_origins: int = 32
    n_dirs: int = 256
    bisect_tol: float = 1e-4
    seed: int = 0
    direction_mode: str = "points"  # "points" or "sphere"
    volume_exponent: str = "linear"  # "linear" or "dimension"

    def __post_init__(self):
        if self.n_origins < 1 or self.n_dirs < 1:
            raise EstimatorError("n_origins and n_dirs must be positive")
        if self.bisect_tol <= 0:
            raise EstimatorError("bisect_tol must be positive")
        if self.direction_mode not in ("points", "sphere"):
            raise EstimatorError(f"unknown direction_mode {self.direction_mode!r}")
        if self.volume_exponent not in ("linear", "dimension"):
            raise EstimatorError(f"unknown volume_exponent {self.volume_exponent!r}")

    @classmethod
    def from_dict(cls, doc: dict | None) -> ExtentConfig:
        doc = dict(doc or {})
        keys = cls.__dataclass_fields__
        return cls(**{k: v for k, v in doc.items() if k in keys})


@dataclass(frozen=True)
class ExtentResult:
    mean: float
    stderr: float
    per_origin: np.ndarray
    n_clamped: int

    @property
    def clamped(self) -> bool:
        return self.n_clamped > 0


def _cube_exit(origin, dirs):
    # largest t with origin + t*d still inside [0,1]^n
    with np.errstate(divide="ignore", invalid="ignore"):
        t_hi = np.where(dirs > 0, (1.0 - origin) / dirs, np.inf)
        t_lo = np.where(dirs < 0, -origin / dirs, np.inf)
    return np.minimum(t_hi, t_lo).min(axis=1)


def boundary_distance(region: RegionOracle, origin, dirs, tol: float = 1e-4):
    """Distance from ``origin`` to the region boundary along each unit direction.

    Bisection between the origin (inside) and the unit-cube exit point.
    Returns ``(distances, clamped)``; ``clamped[i]`` is True when the cube
    exit is still inside the region, in which case the distance is the
    cube exit.
    """
    origin = np.asarray(origin, dtype=float)
    dirs = np.atleast_2d(np.asarray(dirs, dtype=float))
    hi = _cube_exit(origin, dirs)
    clamped = region.contains(origin + hi[:, None] * dirs)
    lo = np.zeros_like(hi)
    open_ = ~clamped
    while np.any(open_) and np.max(hi[open_] - lo[open_]) > tol:
        mid = 0.5 * (lo + hi)
        inside = region.contains(origin + mid[:, None] * dirs)
        lo = np.where(open_ & inside, mid, lo)
        hi = np.where(open_ & ~inside, mid, hi)
    out = np.where(clamped, hi, 0.5 * (lo + hi))
    return out, clamped


def _directions(region, origin, rng, cfg):
    if cfg.direction_mode == "sphere":
        d = rng.standard_normal((cfg.n_dirs, region.dim))
    else:
        d = region.sample(rng, cfg.n_dirs) - origin
    norms = np.linalg.norm(d, axis=1)
    ok = norms > 1e-12
    if not np.any(ok):
        raise DirectionError(f"{region.name}: every sampled point coincides with the origin")
    return d[ok] / norms[ok, None]


def estimate_extent(region: RegionOracle, n_origins: int = 32, n_dirs: int = 256,
                    tol: float = 1e-4, rng=None, origins=None,
                    direction_mode: str = "points") -> ExtentResult:
    """Mean origin-to-boundary distance of a region.

    Each origin is a region sample (or taken from ``origins``); directions
    are normalised differences to other region samples, or uniform on the
    sphere with ``direction_mode="sphere"``.  Origins are processed in index
    order so the result is reproducible for a fixed generator.
    """
    cfg = ExtentConfig(n_origins, n_dirs, tol, 0, direction_mode)
    rng = np.random.default_rng(rng)
    if origins is None:
        origins = region.sample(rng, n_origins)
    origins = np.atleast_2d(np.asarray(origins, dtype=float))
    per_origin = np.empty(len(origins))
    n_clamped = 0
    for i, o in enumerate(origins):
        dirs = _directions(region, o, rng, cfg)
        dist, clamped = boundary_distance(region, o, dirs, tol)
        per_origin[i] = dist.mean()
        n_clamped += int(clamped.sum())
    stderr = per_origin.std(ddof=1) / math.sqrt(len(per_origin)) if len(per_origin) > 1 else 0.0
    return ExtentResult(float(per_origin.mean()), float(stderr), per_origin, n_clamped)


def _extent_with(region, cfg, rng):
    return estimate_extent(region, cfg.n_origins, cfg.n_dirs, cfg.bisect_tol, rng,
                           direction_mode=cfg.direction_mode)


def _volume_ratio(ext_b, ext_ab, dim, exponent):
    ratio = ext_b / ext_ab
    return ratio ** dim if exponent == "dimension" else ratio


def estimate_kappa_v(region_b: RegionOracle, region_ab: RegionOracle,
                     config: ExtentConfig | None = None) -> float:
    """Volume factor from the ratio of mean extents.

    With ``volume_exponent="linear"`` this is ``Ext(B)/Ext(A(B))``; with
    ``"dimension"`` the ratio is raised to the input dimension, which is the
    volume ratio for similar bodies of different size.
    """
    cfg = config or ExtentConfig()
    rb, rab = (np.random.default_rng(s) for s in np.random.SeedSequence(cfg.seed).spawn(2))
    eb = _extent_with(region_b, cfg, rb)
    eab = _extent_with(region_ab, cfg, rab)
    return _volume_ratio(eb.mean, eab.mean, region_b.dim, cfg.volume_exponent)


# ---------------------------------------------------------------------------
# prior


@dataclass(frozen=True)
class GaussianPriorModel:
    """Analytic generator ``G(z) = mean + scale * z`` with ``z ~ N(0, I)``.

    Stands in for a trained generator plus inversion: ``inverse`` is exact,
    and the input density is the Gaussian ``N(mean, scale^2 I)``.
    """

    mean: np.ndarray
    scale: float = 1.0

    def __post_init__(self):
        m = np.asarray(self.mean, dtype=float).ravel()
        if not self.scale > 0:
            raise EstimatorError("scale must be positive")
        m.setflags(write=False)
        object.__setattr__(self, "mean", m)

    @property
    def dim(self) -> int:
        return self.mean.size

    def generate(self, z) -> np.ndarray:
        return self.mean + self.scale * np.asarray(z, dtype=float)

    def inverse(self, x) -> np.ndarray:
        return (np.asarray(x, dtype=float) - self.mean) / self.scale

    def sample(self, rng, k: int) -> np.ndarray:
        return self.generate(rng.standard_normal((k, self.dim)))

    def latent_log_density(self, z) -> np.ndarray:
        z = np.atleast_2d(z)
        return -0.5 * np.sum(z * z, axis=1) - 0.5 * z.shape[1] * math.log(2 * math.pi)

    def log_density(self, x) -> np.ndarray:
        """Input-space log density (latent density plus the linear Jacobian)."""
        return self.latent_log_density(self.inverse(x)) - self.dim * math.log(self.scale)


@dataclass(frozen=True)
class LatentFit:
    mean_sq_norm: float
    variance: float
    degenerate: bool


def fit_latents(z) -> LatentFit:
    """Fit ``N(mu, sigma^2 I)``: squared norm of the mean vector and mean per-coordinate variance."""
    z = np.atleast_2d(np.asarray(z, dtype=float))
    if z.shape[0] < 2:
        raise EstimatorError("need at least two latent samples per side")
    mu = z.mean(axis=0)
    var = float(z.var(axis=0, ddof=1).mean())
    return LatentFit(float(mu @ mu), var, var <= 1e-300)


def estimate_ln_kappa_pr(z_samples_b, z_samples_ab):
    """Log ratio of expected latent density between the two regions.

    Uses the closed form for Gaussian latents,
    ``-1/2 (|mu_B|^2/(sigma_B^2+1) - |mu_AB|^2/(sigma_AB^2+1))``.

    Returns ``(ln_kappa_pr, degenerate)``; ``degenerate`` is True when a
    side has zero variance (the formula is then used with ``sigma^2 = 0``).
    """
    fb = fit_latents(z_samples_b)
    fab = fit_latents(z_samples_ab)
    val = -0.5 * (fb.mean_sq_norm / (fb.variance + 1.0) - fab.mean_sq_norm / (fab.variance + 1.0))
    return float(val), fb.degenerate or fab.degenerate


def direct_ln_kappa_pr(x_b, x_ab, log_density: Callable) -> float:
    """``ln(mean density over x_b / mean density over x_ab)`` by log-sum-exp."""
    from scipy.special import logsumexp

    lb = log_density(np.atleast_2d(x_b))
    lab = log_density(np.atleast_2d(x_ab))
    return float(logsumexp(lb) - math.log(len(lb)) - logsumexp(lab) + math.log(len(lab)))


@dataclass(frozen=True)
class KappaEstimate:
    ext_B: float
    ext_AB: float
    kappa_v: float
    ln_kappa_pr: float
    kappa: float
    ext_B_stderr: float = float("nan")
    ext_AB_stderr: float = float("nan")
    n_clamped: int = 0
    degenerate_variance: bool = False
    seed: int = 0

    def __post_init__(self):
        if not (self.ext_B > 0 and self.ext_AB > 0):
            raise EstimatorError("extents must be positive")

    def csv_rows(self):
        """Rows ``(quantity, value, stderr, seed)``."""
        nan = float("nan")
        return [
            ("ext_B", self.ext_B, self.ext_B_stderr, self.seed),
            ("ext_AB", self.ext_AB, self.ext_AB_stderr, self.seed),
            ("kappa_v", self.kappa_v, nan, self.seed),
            ("ln_kappa_pr", self.ln_kappa_pr, nan, self.seed),
            ("kappa", self.kappa, nan, self.seed),
        ]

    def to_dict(self) -> dict:
        return asdict(self)


def estimate_kappa(region_b: RegionOracle, region_ab: RegionOracle, prior,
                   config: ExtentConfig | None = None, n_latent: int = 100,
                   density: str = "latent") -> KappaEstimate:
    """Combined kappa: extent ratio times the expected-density ratio.

    ``density="latent"`` inverts uniform region samples to latents and uses
    the Gaussian closed form; ``density="direct"`` averages ``prior.log_density``
    over the same samples.  Region samples are uniform in each region.
    """
    cfg = config or ExtentConfig()
    s_ext_b, s_ext_ab, s_lat = np.random.SeedSequence(cfg.seed).spawn(3)
    eb = _extent_with(region_b, cfg, np.random.default_rng(s_ext_b))
    eab = _extent_with(region_ab, cfg, np.random.default_rng(s_ext_ab))
    kv = _volume_ratio(eb.mean, eab.mean, region_b.dim, cfg.volume_exponent)
    rng = np.random.default_rng(s_lat)
    xb = region_b.sample(rng, n_latent)
    xab = region_ab.sample(rng, n_latent)
    degenerate = False
    if density == "latent":
        ln_pr, degenerate = estimate_ln_kappa_pr(prior.inverse(xb), prior.inverse(xab))
    elif density == "direct":
        ln_pr = direct_ln_kappa_pr(xb, xab, prior.log_density)
    else:
        raise EstimatorError(f"unknown density mode {density!r}")
    return KappaEstimate(
        ext_B=eb.mean,
        ext_AB=eab.mean,
        kappa_v=kv,
        ln_kappa_pr=ln_pr,
        kappa=kv * math.exp(ln_pr),
        ext_B_stderr=eb.stderr,
        ext_AB_stderr=eab.stderr,
        n_clamped=eb.n_clamped + eab.n_clamped,
        degenerate_variance=degenerate,
        seed=cfg.seed,
    )


# ---------------------------------------------------------------------------
# finite tasks


@dataclass(frozen=True)
class CellPrior:
    """Piecewise-constant density: input ``i`` owns an axis-aligned cell of side ``cell``."""

    coords: np.ndarray
    prior: np.ndarray
    cell: float

    def log_density(self, x) -> np.ndarray:
        x = np.atleast_2d(x)
        d = np.abs(x[:, None, :] - self.coords[None, :, :]).max(axis=2)
        idx = d.argmin(axis=1)
        n = self.coords.shape[1]
        with np.errstate(divide="ignore"):
            return np.log(self.prior[idx]) - n * math.log(self.cell)


def cell_regions(task: FiniteTask, spec: BackdoorSpec, cell: float):
    """Regions ``B`` and ``A(B)`` as unions of cells of side ``cell`` around their inputs."""

    def union(indices, name):
        centers = task.coords[list(indices)]
        half = cell / 2

        def contains(p):
            p = np.atleast_2d(p)
            d = np.abs(p[:, None, :] - centers[None, :, :]).max(axis=2)
            return np.any(d <= half, axis=1)

        def sampler(rng, k):
            which = rng.integers(len(centers), size=k)
            return centers[which] + (rng.random((k, centers.shape[1])) - 0.5) * cell

        return RegionOracle(contains, sampler, centers.shape[1], name)

    if not spec.trigger.mapping:
        raise TaskError("empty backdoor region")
    return union(spec.trigger.region, "B"), union(spec.trigger.image, "A(B)")


def estimate_kappa_finite(task: FiniteTask, spec: BackdoorSpec, cell: float,
                          config: ExtentConfig | None = None, n_latent: int = 100) -> KappaEstimate:
    """kappa of a finite task with each input spread over a small cell.

    Volumes come from the extent ratio (raised to the dimension, since the
    two unions need not be similar) and densities from the cell prior.
    """
    cfg = config or ExtentConfig(volume_exponent="dimension")
    rb, rab = cell_regions(task, spec, cell)
    prior = CellPrior(task.coords, task.prior, cell)
    return estimate_kappa(rb, rab, prior, cfg, n_latent, density="direct")
