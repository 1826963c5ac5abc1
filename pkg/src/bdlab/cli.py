"""Command-line entry point: ``bdlab <subcommand>``.

Every subcommand reads the shared JSON config document given by
``--config`` (sections ``mixture``, ``attack``, ``search``, ``sweep``,
``estimate_kappa``, ``detect`` and the scalar ``n_train``); explicit flags
override the document.
Exit status is 0 when the run finished and no invariant check fired,
1 when a check fired, 2 on bad input.
"""

from __future__ import annotations

import argparse
import csv
import math
import sys
import warnings
from pathlib import Path

import numpy as np

from . import detectors as det
from . import docs, estimators, harness, nn
from .attack import AttackError, AttackHyperparams, asr, measured_alpha, save_trigger, tsa_attack
from .synthetic import MixtureSpec, band_mixture
from .task import TaskError, backdoor_distance

CHECK_TOL = 1e-9
DISTANCE_FIELDS = ("distance", "alpha", "kappa", "s_value", "z_norm", "lower_bound", "upper_bound",
                   "bounds_sound", "certified_lower_bound", "pr_B", "pr_AB", "beta")
DETECT_COLUMNS = ("model_id", "detector", "score", "flagged")
THRESHOLD_COLUMNS = ("detector", "threshold", "n_models")
KAPPA_COLUMNS = ("quantity", "value", "stderr", "seed")
LOG_COLUMNS = ("phase", "epoch", "loss", "asr", "alpha_estimate")


class CheckFailed(Exception):
    """An invariant check fired; the run's outputs are still written."""


class InputError(Exception):
    pass


# ---------------------------------------------------------------------------
# helpers


def _section(args, name) -> dict:
    return dict(args.doc.get(name) or {})


def _mixture(args) -> MixtureSpec:
    doc = args.doc.get("mixture")
    return MixtureSpec.from_dict(doc) if doc else band_mixture()


def _out(args) -> Path:
    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _check(failures: list, ok: bool, message: str) -> None:
    if not ok:
        failures.append(message)


def _finish(failures: list) -> None:
    if failures:
        raise CheckFailed("; ".join(failures))


def parse_region(text: str) -> estimators.RegionOracle:
    """``disc:cx,cy,r`` | ``square:cx,cy,side`` | ``box:lx,ly,hx,hy``."""
    try:
        kind, _, rest = text.partition(":")
        v = [float(s) for s in rest.split(",")]
        if kind == "disc" and len(v) >= 3:
            return estimators.disc_region(v[:-1], v[-1])
        if kind == "square" and len(v) >= 3:
            return estimators.square_region(v[:-1], v[-1])
        if kind == "box" and len(v) >= 2 and len(v) % 2 == 0:
            h = len(v) // 2
            return estimators.box_region(v[:h], v[h:])
    except ValueError as exc:
        raise InputError(f"bad region {text!r}: {exc}") from exc
    raise InputError(f"bad region {text!r}; expected disc:cx,cy,r, square:cx,cy,side or box:lo...,hi...")


# ---------------------------------------------------------------------------
# distance


def cmd_distance(args) -> None:
    try:
        task, spec = docs.load_task(args.task)
    except (OSError, ValueError, KeyError) as exc:
        raise InputError(f"cannot read task document {args.task}: {exc}") from exc
    if spec is None:
        raise InputError("task document has no backdoor spec")
    if args.beta is not None:
        spec = spec.with_beta(args.beta)
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        rep = backdoor_distance(task, spec)
    values = [getattr(rep, f) for f in DISTANCE_FIELDS]
    if args.format == "csv":
        text = harness.csv_text(("quantity", "value"), list(zip(DISTANCE_FIELDS, values)))
    else:
        width = max(map(len, DISTANCE_FIELDS))
        text = "".join(f"{k:<{width}}  {harness._fmt(v)}\n" for k, v in zip(DISTANCE_FIELDS, values))
    sys.stdout.write(text)
    if args.out_dir is not None:
        (_out(args) / "distance.csv").write_text(
            harness.csv_text(("quantity", "value"), list(zip(DISTANCE_FIELDS, values))))
    failures = []
    _check(failures, rep.distance <= rep.upper_bound + CHECK_TOL, "distance exceeds the upper bound")
    if rep.bounds_sound:
        _check(failures, rep.certified_lower_bound <= rep.distance + CHECK_TOL,
               "distance below the certified lower bound")
    _finish(failures)


# ---------------------------------------------------------------------------
# estimate-kappa


def cmd_estimate_kappa(args) -> None:
    sec = _section(args, "estimate_kappa")
    rb = args.region_b or sec.get("region_b")
    rab = args.region_ab or sec.get("region_ab")
    if not rb or not rab:
        raise InputError("both --region-b and --region-ab (or config estimate_kappa.region_*) are required")
    region_b, region_ab = parse_region(rb), parse_region(rab)
    if region_b.dim != region_ab.dim:
        raise InputError("regions differ in dimension")
    mean = args.prior_mean if args.prior_mean is not None else sec.get("prior_mean", [0.5] * region_b.dim)
    scale = args.prior_scale if args.prior_scale is not None else sec.get("prior_scale", 0.25)
    prior = estimators.GaussianPriorModel(np.asarray(mean, dtype=float), float(scale))
    ext = dict(sec.get("extent") or {})
    if args.seed is not None:
        ext["seed"] = args.seed
    cfg = estimators.ExtentConfig.from_dict(ext)
    est = estimators.estimate_kappa(region_b, region_ab, prior, cfg, int(sec.get("n_latent", 100)),
                                    sec.get("density", "latent"))
    text = harness.csv_text(KAPPA_COLUMNS, est.csv_rows())
    sys.stdout.write(text)
    if args.out_dir is not None:
        (_out(args) / "kappa.csv").write_text(text)
    failures = []
    _check(failures, math.isfinite(est.kappa) and est.kappa > 0, "kappa estimate is not a positive number")
    _finish(failures)


# ---------------------------------------------------------------------------
# attack


def _hyper(args) -> AttackHyperparams:
    doc = _section(args, "attack")
    for key in ("alpha_star", "beta", "delta", "epoch_adj", "zeta", "omega_penalty", "source", "target", "lr"):
        v = getattr(args, key)
        if v is not None:
            doc[key] = v
    if args.seed is not None:
        doc["seed"] = args.seed
    return AttackHyperparams.from_dict(doc)


def cmd_attack(args) -> None:
    hyper = _hyper(args)
    mixture = _mixture(args)
    n_train = args.n_train or int(args.doc.get("n_train", 1000))
    data_seed = hyper.seed if args.data_seed is None else args.data_seed
    data = mixture.sample(n_train, data_seed)
    res = tsa_attack(data, hyper, pool=mixture)
    test = mixture.sample(args.n_test, data_seed + 1)
    src = test.x[test.y == hyper.source]
    rate = asr(res.backdoored, res.trigger, src, hyper.target, res.benign)
    m = measured_alpha(res, mixture)
    out = _out(args)
    nn.save_model(out / "benign.npz", res.benign)
    nn.save_model(out / "backdoored.npz", res.backdoored)
    save_trigger(out / "trigger.npz", res.trigger)
    rows = res.log_rows() + [("final", 0, float("nan"), rate, m.alpha)]
    (out / "attack_log.csv").write_text(harness.csv_text(LOG_COLUMNS, rows))
    drop = nn.accuracy(res.benign, test) - nn.accuracy(res.backdoored, test)
    print(f"asr {rate:.4f}  clean_acc_drop {drop:.4f}  alpha {m.alpha:.4g}  alpha/beta {m.alpha_over_beta:.4g}"
          f"  flags {','.join(res.flags) or '-'}")
    failures = []
    moved = np.linalg.norm(res.trigger(data.x) - data.x, axis=1)
    _check(failures, float(moved.max(initial=0.0)) <= hyper.delta + 1e-6, "trigger exceeds the perturbation budget")
    _check(failures, bool(np.all((res.trigger(data.x) >= 0) & (res.trigger(data.x) <= 1))),
           "triggered inputs leave the unit cube")
    _finish(failures)


# ---------------------------------------------------------------------------
# detect / calibrate


def _load_models(paths):
    try:
        return [(Path(p).stem, nn.load_model(p)) for p in paths]
    except (OSError, ValueError, KeyError) as exc:
        raise InputError(f"cannot load model: {exc}") from exc


def _eval_inputs(args):
    sec = _section(args, "detect")
    seed = args.seed if args.seed is not None else int(sec.get("seed", 0))
    n = args.n_eval or int(sec.get("n_eval", 400))
    return _mixture(args).sample(n, seed).x


def _search(args) -> det.SearchConfig:
    doc = _section(args, "search")
    if args.seed is not None:
        doc["seed"] = args.seed
    return det.SearchConfig.from_dict(doc)


def _detector_names(args):
    names = tuple(s for s in args.detectors.split(",") if s)
    unknown = set(names) - set(harness.KNOWN_DETECTORS)
    if unknown or not names:
        raise InputError(f"unknown detectors {sorted(unknown)}")
    return names


def _score(name, model, refs, x, search):
    if name == "output_diff":
        return det.detect_output_diff(model, refs, x, search).score
    if name == "hotelling":
        return det.detect_hotelling(model, x).score
    return det.detect_weight_distance(model, refs).score


def population_thresholds(refs, names, x, search, quantile=99.0) -> dict:
    """Per-detector thresholds from leave-one-out scores of a benign population."""
    if len(refs) < 2:
        raise InputError("calibration needs at least two reference models")
    out = {}
    for name in names:
        if name == "weight_distance":
            out[name] = det.calibrate_weight_distance(refs, quantile).threshold
            continue
        scores = [_score(name, m, refs[:i] + refs[i + 1:], x, search) for i, m in enumerate(refs)]
        out[name] = det.calibrate_threshold(scores, quantile)
    return out


def read_thresholds(path) -> dict:
    try:
        with open(path, newline="") as fh:
            return {r["detector"]: float(r["threshold"]) for r in csv.DictReader(fh)}
    except (OSError, KeyError, ValueError) as exc:
        raise InputError(f"cannot read thresholds {path}: {exc}") from exc


def cmd_calibrate(args) -> None:
    names = _detector_names(args)
    refs = [m for _, m in _load_models(args.models)]
    th = population_thresholds(refs, names, _eval_inputs(args), _search(args), args.quantile)
    text = harness.csv_text(THRESHOLD_COLUMNS, [(n, th[n], len(refs)) for n in names])
    sys.stdout.write(text)
    (_out(args) / "thresholds.csv").write_text(text)
    failures = []
    _check(failures, all(math.isfinite(v) for v in th.values()), "a calibrated threshold is not finite")
    _finish(failures)


def cmd_detect(args) -> None:
    names = _detector_names(args)
    models = _load_models(args.models)
    refs = [m for _, m in _load_models(args.reference)]
    if not refs:
        raise InputError("at least one --reference model is required")
    x, search = _eval_inputs(args), _search(args)
    th = read_thresholds(args.thresholds) if args.thresholds else population_thresholds(refs, names, x, search)
    missing = set(names) - set(th)
    if missing:
        raise InputError(f"no threshold for {sorted(missing)}")
    rows = []
    for mid, model in models:
        for name in names:
            s = _score(name, model, refs, x, search)
            rows.append((mid, name, s, bool(s > th[name])))
    text = harness.csv_text(DETECT_COLUMNS, rows)
    sys.stdout.write(text)
    (_out(args) / "detect.csv").write_text(text)


# ---------------------------------------------------------------------------
# sweep


def cmd_sweep(args) -> None:
    doc = _section(args, "sweep")
    if "mixture" not in doc and args.doc.get("mixture"):
        doc["mixture"] = args.doc["mixture"]
    if "attack" not in doc and args.doc.get("attack"):
        doc["attack"] = args.doc["attack"]
    if "search" not in doc and args.doc.get("search"):
        doc["search"] = args.doc["search"]
    if "n_train" not in doc and "n_train" in args.doc:
        doc["n_train"] = args.doc["n_train"]
    for key in ("n_benign", "n_backdoored", "n_reference", "workers"):
        v = getattr(args, key)
        if v is not None:
            doc[key] = v
    if args.alpha_stars:
        doc["alpha_stars"] = [float(s) for s in args.alpha_stars.split(",")]
    if args.seed is not None:
        doc["seed"] = args.seed
    doc["out_dir"] = str(_out(args))
    config = harness.SweepConfig.from_dict(doc)
    log = (lambda msg: print(msg, file=sys.stderr)) if args.verbose else None
    res = harness.run_sweep(config, log=log)
    sys.stdout.write(harness.sweep_csv(res, config.detectors))
    print(f"pearson {res.pearson:.4f}  inversions {res.inversions()}  excluded {res.n_excluded}/{res.n_launched}")
    failures = []
    n_attack_runs = sum(1 for r in res.runs if r["arm"] == "backdoored")
    n_kept = sum(r.n_included for r in res.rows)
    _check(failures, n_kept + res.n_excluded == res.n_launched == n_attack_runs, "run bookkeeping mismatch")
    _check(failures, len(res.rows) == len(config.alpha_stars), "row count differs from the alpha* list")
    _check(failures, math.isnan(res.pearson) or -1 <= res.pearson <= 1, "pearson outside [-1, 1]")
    _finish(failures)


# ---------------------------------------------------------------------------
# parser


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="bdlab", description="Backdoor distance and detectability toolkit.")
    p.add_argument("--seed", type=int, default=None, help="override every seed in the config")
    p.add_argument("--out-dir", default=None, help="directory for output files (default: current directory)")
    p.add_argument("--config", default=None, help="JSON config document")
    sub = p.add_subparsers(dest="command", required=True)

    d = sub.add_parser("distance", help="backdoor distance of a finite task document")
    d.add_argument("task", help="task JSON with a backdoor spec")
    d.add_argument("--beta", type=float, default=None)
    d.add_argument("--format", choices=("text", "csv"), default="text")
    d.set_defaults(func=cmd_distance)

    k = sub.add_parser("estimate-kappa", help="estimate kappa for two regions under a Gaussian prior")
    k.add_argument("--region-b", default=None)
    k.add_argument("--region-ab", default=None)
    k.add_argument("--prior-mean", type=float, nargs="+", default=None)
    k.add_argument("--prior-scale", type=float, default=None)
    k.set_defaults(func=cmd_estimate_kappa)

    a = sub.add_parser("attack", help="run the attack on the synthetic mixture")
    for name, typ in (("alpha-star", float), ("beta", float), ("delta", float), ("epoch-adj", int),
                      ("zeta", float), ("omega-penalty", float), ("source", int), ("target", int), ("lr", float)):
        a.add_argument(f"--{name}", type=typ, default=None)
    a.add_argument("--n-train", type=int, default=None)
    a.add_argument("--n-test", type=int, default=2000)
    a.add_argument("--data-seed", type=int, default=None)
    a.set_defaults(func=cmd_attack)

    for name, func, helptext in (("detect", cmd_detect, "score model files"),
                                 ("calibrate", cmd_calibrate, "thresholds from benign model files")):
        c = sub.add_parser(name, help=helptext)
        c.add_argument("models", nargs="+")
        c.add_argument("--detectors", default="output_diff,hotelling,weight_distance")
        c.add_argument("--n-eval", type=int, default=None)
        if name == "detect":
            c.add_argument("--reference", nargs="+", default=[])
            c.add_argument("--thresholds", default=None)
        else:
            c.add_argument("--quantile", type=float, default=99.0)
        c.set_defaults(func=func)

    s = sub.add_parser("sweep", help="alpha* sweep of distance against detectability")
    s.add_argument("--alpha-stars", default=None, help="comma-separated list")
    for name in ("n-benign", "n-backdoored", "n-reference", "workers"):
        s.add_argument(f"--{name}", type=int, default=None)
    s.add_argument("-v", "--verbose", action="store_true")
    s.set_defaults(func=cmd_sweep)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    if args.out_dir is None and args.command in ("attack", "detect", "calibrate", "sweep"):
        args.out_dir = "."
    try:
        args.doc = docs.load_config(args.config)
        args.func(args)
    except CheckFailed as exc:
        print(f"bdlab: check failed: {exc}", file=sys.stderr)
        return 1
    except (InputError, TaskError, AttackError, det.DetectorError, estimators.EstimatorError,
            harness.SweepError, nn.ModelError, OSError, ValueError) as exc:
        print(f"bdlab: error: {exc}", file=sys.stderr)
        return 2
    return 0


if __name__ == "__main__":
    sys.exit(main())
