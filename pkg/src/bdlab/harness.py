"""Population sweeps over alpha*: backdoor distance against detectability.

For every alpha* a population of attacked models and one shared benign
population are scored by the configured detectors.  The per-alpha* rows
pair the mean measured ``alpha/beta`` with the detectability ``gamma``;
their Pearson correlation summarises the sweep.

All randomness derives from ``SweepConfig.seed`` through
``numpy.random.SeedSequence``; model ``i`` uses the same data and attack
seeds at every alpha*, so the alpha* rows differ only in the knob.
Results are ordered by ``(alpha*, model index)`` whatever the worker count.
"""

from __future__ import annotations

import csv
import io
import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import numpy as np

from . import detectors as det
from . import nn
from .attack import AttackHyperparams, asr, measured_alpha, train_benign, tsa_attack
from .synthetic import MixtureSpec, band_mixture, generate_task

__all__ = [
    "SweepConfig", "SweepRow", "SweepResult", "SweepError", "PearsonUndefined",
    "pearson", "run_sweep", "generate_task", "write_svg", "RUN_COLUMNS", "SWEEP_COLUMNS",
]

CSV_SCHEMA_VERSION = 1
KNOWN_DETECTORS = ("output_diff", "hotelling", "weight_distance")
RUN_COLUMNS = ("arm", "alpha_star", "model", "excluded", "asr", "clean_acc_drop", "alpha",
               "alpha_over_beta", "s_value", "kappa", "in_scope", "sampled_alpha")
SWEEP_COLUMNS = ("alpha_star", "alpha_over_beta", "sampled_alpha_over_beta", "gamma", "max_accuracy",
                 "n_included", "n_excluded")


class SweepError(ValueError):
    pass


class PearsonUndefined(SweepError):
    """One of the series has zero variance."""


def pearson(xs, ys) -> float:
    x = np.asarray(xs, dtype=float)
    y = np.asarray(ys, dtype=float)
    if x.shape != y.shape or x.ndim != 1 or x.size < 2:
        raise SweepError("pearson needs two series of equal length >= 2")
    dx, dy = x - x.mean(), y - y.mean()
    sx, sy = math.sqrt(float(dx @ dx)), math.sqrt(float(dy @ dy))
    if sx == 0 or sy == 0:
        raise PearsonUndefined("zero variance")
    return float(np.clip(dx @ dy / (sx * sy), -1.0, 1.0))


@dataclass(frozen=True)
class SweepConfig:
    mixture: MixtureSpec = field(default_factory=band_mixture)
    alpha_stars: tuple = (0.1, 0.2, 0.3, 0.4, 0.5, 0.6, 0.7, 0.8, 0.9)
    beta: float = 0.1
    n_benign: int = 20
    n_backdoored: int = 20
    n_reference: int = 5
    n_train: int = 1000
    n_test: int = 2000
    n_eval: int = 400
    seed: int = 0
    detectors: tuple = ("output_diff", "hotelling")
    attack: AttackHyperparams = field(default_factory=AttackHyperparams)
    search: det.SearchConfig = field(default_factory=lambda: det.SearchConfig(restarts=5, steps=40))
    min_asr: float = 0.3
    workers: int = 1
    out_dir: str | None = None

    def __post_init__(self):
        if self.n_benign < 2 or self.n_backdoored < 2 or self.n_reference < 1:
            raise SweepError("population sizes must be at least 2 (1 reference)")
        if not self.alpha_stars or any(not 0 < a <= 1 for a in self.alpha_stars):
            raise SweepError("alpha* values must lie in (0, 1]")
        unknown = set(self.detectors) - set(KNOWN_DETECTORS)
        if unknown or not self.detectors:
            raise SweepError(f"unknown detectors {sorted(unknown)}")
        object.__setattr__(self, "alpha_stars", tuple(float(a) for a in self.alpha_stars))
        object.__setattr__(self, "detectors", tuple(self.detectors))

    @classmethod
    def from_dict(cls, doc: dict | None) -> SweepConfig:
        doc = dict(doc or {})
        kw = {k: v for k, v in doc.items() if k in cls.__dataclass_fields__}
        if "mixture" in kw:
            kw["mixture"] = MixtureSpec.from_dict(kw["mixture"])
        if "attack" in kw:
            kw["attack"] = AttackHyperparams.from_dict(kw["attack"])
        if "search" in kw:
            kw["search"] = det.SearchConfig.from_dict(kw["search"])
        for key in ("alpha_stars", "detectors"):
            if key in kw:
                kw[key] = tuple(kw[key])
        return cls(**kw)

    def seeds(self) -> dict:
        """Integer seeds for every population member."""
        root = np.random.SeedSequence(self.seed)
        groups = dict(zip(("benign", "reference", "backdoored", "shared"), root.spawn(4)))
        ints = lambda ss, n: [int(s.generate_state(1)[0]) for s in ss.spawn(n)]
        shared = ints(groups["shared"], 2)
        return {
            "benign": ints(groups["benign"], self.n_benign),
            "reference": ints(groups["reference"], self.n_reference),
            "backdoored": ints(groups["backdoored"], self.n_backdoored),
            "test": shared[0],
            "eval": shared[1],
        }


@dataclass(frozen=True)
class SweepRow:
    alpha_star: float
    alpha_over_beta: float
    sampled_alpha_over_beta: float
    accuracies: dict
    gamma: float
    max_accuracy: float
    n_included: int
    n_excluded: int


@dataclass(frozen=True)
class SweepResult:
    rows: tuple
    pearson: float
    mean_abs_diff: float
    std_abs_diff: float
    runs: tuple
    n_launched: int
    n_excluded: int

    @property
    def gammas(self) -> list:
        return [r.gamma for r in self.rows]

    @property
    def alpha_over_betas(self) -> list:
        return [r.alpha_over_beta for r in self.rows]

    def inversions(self) -> int:
        g = self.gammas
        return sum(1 for a, b in zip(g, g[1:]) if b < a)


# ---------------------------------------------------------------------------
# jobs (module level so they can be sent to worker processes)


@dataclass(frozen=True)
class _Context:
    mixture: MixtureSpec
    n_train: int
    detectors: tuple
    search: det.SearchConfig
    references: tuple
    benign_population: tuple
    x_eval: np.ndarray
    test: nn.LabeledDataset


def _scores(ctx: _Context, model: nn.MLP) -> dict:
    out = {}
    for name in ctx.detectors:
        if name == "output_diff":
            out[name] = det.detect_output_diff(model, list(ctx.references), ctx.x_eval, ctx.search).score
        elif name == "hotelling":
            out[name] = det.detect_hotelling(model, ctx.x_eval).score
        elif name == "weight_distance":
            others = [m for m in ctx.benign_population if m is not model and not _same(m, model)]
            out[name] = det.detect_weight_distance(model, others).score
    return out


def _same(a: nn.MLP, b: nn.MLP) -> bool:
    return all(np.array_equal(p, q) for p, q in zip(a.params, b.params))


def _train_benign_job(args):
    mixture, n_train, hyper, seed = args
    return train_benign(mixture.sample(n_train, seed), hyper, seed)


def _benign_score_job(args):
    ctx, model = args
    return _scores(ctx, model)


def _attack_job(args):
    ctx, hyper, seed = args
    data = ctx.mixture.sample(ctx.n_train, seed)
    res = tsa_attack(data, replace(hyper, seed=seed), pool=ctx.mixture)
    src = ctx.test.x[ctx.test.y == hyper.source]
    rate = asr(res.backdoored, res.trigger, src, hyper.target, res.benign)
    drop = nn.accuracy(res.benign, ctx.test) - nn.accuracy(res.backdoored, ctx.test)
    m = measured_alpha(res, ctx.mixture)
    return {"asr": rate, "clean_acc_drop": drop, "measurement": m, "scores": _scores(ctx, res.backdoored)}


def _map(fn, jobs, workers):
    if workers <= 1:
        return [fn(j) for j in jobs]
    with ProcessPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(fn, jobs))


# ---------------------------------------------------------------------------
# sweep


def run_sweep(config: SweepConfig, log=None) -> SweepResult:
    """Train, attack, measure and detect for every alpha*; write outputs if ``out_dir`` is set."""
    say = log or (lambda msg: None)
    seeds = config.seeds()
    base = replace(config.attack, beta=config.beta)
    say(f"training {config.n_benign} benign and {config.n_reference} reference models")
    benign = _map(_train_benign_job, [(config.mixture, config.n_train, base, s) for s in seeds["benign"]],
                  config.workers)
    refs = _map(_train_benign_job, [(config.mixture, config.n_train, base, s) for s in seeds["reference"]],
                config.workers)
    ctx = _Context(config.mixture, config.n_train, config.detectors, config.search, tuple(refs),
                   tuple(benign), config.mixture.sample(config.n_eval, seeds["eval"]).x,
                   config.mixture.sample(config.n_test, seeds["test"]))
    benign_scores = _map(_benign_score_job, [(ctx, m) for m in benign], config.workers)
    runs = []
    for i, sc in enumerate(benign_scores):
        runs.append({"arm": "benign", "alpha_star": float("nan"), "model": i, "excluded": False, **_blank(), **sc})

    rows = []
    n_excluded = 0
    for a in config.alpha_stars:
        say(f"alpha* = {a}: {config.n_backdoored} attacks")
        hyper = replace(base, alpha_star=a)
        outs = _map(_attack_job, [(ctx, hyper, s) for s in seeds["backdoored"]], config.workers)
        kept = []
        for i, o in enumerate(outs):
            m = o["measurement"]
            excluded = bool(o["asr"] < config.min_asr)
            n_excluded += excluded
            runs.append({"arm": "backdoored", "alpha_star": a, "model": i, "excluded": excluded,
                         "asr": o["asr"], "clean_acc_drop": o["clean_acc_drop"], "alpha": m.alpha,
                         "alpha_over_beta": m.alpha_over_beta, "s_value": m.s_value, "kappa": m.kappa,
                         "in_scope": m.in_scope, "sampled_alpha": m.sampled_alpha, **o["scores"]})
            if not excluded:
                kept.append(o)
        rows.append(_aggregate(a, kept, len(outs) - len(kept), benign_scores, config))

    ab = [r.alpha_over_beta for r in rows]
    gam = [r.gamma for r in rows]
    diff = np.abs(np.asarray(ab) - np.asarray(gam))
    try:
        rho = pearson(ab, gam)
    except PearsonUndefined:
        rho = float("nan")
    result = SweepResult(tuple(rows), rho, float(np.mean(diff)), float(np.std(diff)), tuple(runs),
                         len(config.alpha_stars) * config.n_backdoored, n_excluded)
    if config.out_dir is not None:
        write_outputs(result, config, Path(config.out_dir))
    return result


def _blank():
    nan = float("nan")
    return {"asr": nan, "clean_acc_drop": nan, "alpha": nan, "alpha_over_beta": nan, "s_value": nan,
            "kappa": nan, "in_scope": False, "sampled_alpha": nan}


def _aggregate(alpha_star, kept, n_excluded, benign_scores, config) -> SweepRow:
    nan = float("nan")
    if not kept:
        return SweepRow(alpha_star, nan, nan, {}, nan, nan, 0, n_excluded)
    ab = float(np.mean([o["measurement"].alpha_over_beta for o in kept]))
    sampled = float(np.mean([o["measurement"].sampled_alpha for o in kept])) / config.beta
    b = {name: [s[name] for s in benign_scores] for name in config.detectors}
    d = {name: [o["scores"][name] for o in kept] for name in config.detectors}
    score = det.detectability(b, d, orientation="high")
    return SweepRow(alpha_star, ab, sampled, score.accuracies, score.gamma, score.max_accuracy,
                    len(kept), n_excluded)


# ---------------------------------------------------------------------------
# outputs


def _fmt(v) -> str:
    if isinstance(v, (bool, np.bool_)):
        return str(bool(v)).lower()
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    if isinstance(v, (float, np.floating)):
        return repr(float(v))
    return str(v)


def csv_text(header, rows) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    for r in rows:
        w.writerow([_fmt(v) for v in r])
    return buf.getvalue()


def runs_csv(result: SweepResult, detectors) -> str:
    header = RUN_COLUMNS + tuple(detectors)
    return csv_text(header, [[r[k] for k in header] for r in result.runs])


def sweep_csv(result: SweepResult, detectors) -> str:
    header = SWEEP_COLUMNS + tuple(f"acc_{d}" for d in detectors)
    rows = []
    for r in result.rows:
        rows.append([r.alpha_star, r.alpha_over_beta, r.sampled_alpha_over_beta, r.gamma, r.max_accuracy,
                     r.n_included, r.n_excluded] + [r.accuracies.get(d, float("nan")) for d in detectors])
    return csv_text(header, rows)


def summary_csv(result: SweepResult) -> str:
    rows = [("schema_version", CSV_SCHEMA_VERSION), ("pearson", result.pearson),
            ("mean_abs_diff", result.mean_abs_diff), ("std_abs_diff", result.std_abs_diff),
            ("runs_launched", result.n_launched), ("runs_excluded", result.n_excluded),
            ("gamma_inversions", result.inversions())]
    return csv_text(("quantity", "value"), rows)


def write_outputs(result: SweepResult, config: SweepConfig, out: Path) -> dict:
    out.mkdir(parents=True, exist_ok=True)
    paths = {
        "runs": out / "sweep_runs.csv",
        "rows": out / "sweep.csv",
        "summary": out / "sweep_summary.csv",
        "chart": out / "sweep.svg",
    }
    paths["runs"].write_text(runs_csv(result, config.detectors))
    paths["rows"].write_text(sweep_csv(result, config.detectors))
    paths["summary"].write_text(summary_csv(result))
    paths["chart"].write_text(write_svg([r.alpha_star for r in result.rows],
                                        {"gamma": result.gammas, "alpha/beta": result.alpha_over_betas}))
    return paths


def write_svg(xs, series: dict, width: int = 480, height: int = 320) -> str:
    """Line chart of each series against ``xs`` on a unit y-axis."""
    left, right, top, bottom = 50, 20, 20, 40
    pw, ph = width - left - right, height - top - bottom
    x0, x1 = min(xs), max(xs)
    span = (x1 - x0) or 1.0
    px = lambda x: left + (x - x0) / span * pw
    py = lambda y: top + (1.0 - min(max(y, 0.0), 1.0)) * ph
    colours = ("#1f77b4", "#d62728", "#2ca02c", "#9467bd")
    out = [f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}" '
           f'font-family="sans-serif" font-size="11">',
           f'<rect x="{left}" y="{top}" width="{pw}" height="{ph}" fill="none" stroke="#444"/>']
    for k in range(6):
        y = k / 5
        out.append(f'<line x1="{left - 4}" y1="{py(y):.2f}" x2="{left}" y2="{py(y):.2f}" stroke="#444"/>')
        out.append(f'<text x="{left - 6}" y="{py(y) + 4:.2f}" text-anchor="end">{y:.1f}</text>')
    for x in xs:
        out.append(f'<line x1="{px(x):.2f}" y1="{top + ph}" x2="{px(x):.2f}" y2="{top + ph + 4}" stroke="#444"/>')
        out.append(f'<text x="{px(x):.2f}" y="{top + ph + 16}" text-anchor="middle">{x:g}</text>')
    out.append(f'<text x="{left + pw / 2:.2f}" y="{height - 6}" text-anchor="middle">alpha*</text>')
    for j, (name, ys) in enumerate(series.items()):
        c = colours[j % len(colours)]
        pts = [(px(x), py(y)) for x, y in zip(xs, ys) if np.isfinite(y)]
        if pts:
            path = " ".join(f"{a:.2f},{b:.2f}" for a, b in pts)
            out.append(f'<polyline points="{path}" fill="none" stroke="{c}" stroke-width="2"/>')
            out += [f'<circle cx="{a:.2f}" cy="{b:.2f}" r="3" fill="{c}"/>' for a, b in pts]
        ly = top + 14 + 14 * j
        out.append(f'<line x1="{left + 8}" y1="{ly - 4}" x2="{left + 24}" y2="{ly - 4}" stroke="{c}" stroke-width="2"/>')
        out.append(f'<text x="{left + 28}" y="{ly}">{name}</text>')
    out.append("</svg>")
    return "\n".join(out) + "\n"


def config_to_dict(config: SweepConfig) -> dict:
    doc = asdict(config)
    doc["mixture"] = config.mixture.to_dict()
    return doc
