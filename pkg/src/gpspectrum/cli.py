"""Command-line entry point: simulate, fit, predict, compare, crossval.

Exit codes: 0 success, 2 usage/configuration, 3 I/O, 4 file format or
inconsistent inputs.  Diagnostics go to stderr; machine-readable summaries
are printed as ``key=value`` lines on stdout.
"""

import argparse
import csv
import io
import logging
import os
import sys
import warnings

import numpy as np

from . import formats
from .errors import ConfigError, DatasetError, FormatError, UncoveredScore
from .evaluation import BinningRule, apply_binning, distance_profile, loo_cv
from .gp_core import KernelKind
from .phantom import NOISE_MODELS, PROFILES, PhantomConfig, generate_population
from .volume_model import (
    VolumeDataset,
    compare_models,
    fit_volume,
    model_from_field,
    predict_volume,
    total_evidence,
)

log = logging.getLogger("gpspectrum")

EXIT_USAGE = 2
EXIT_IO = 3
EXIT_FORMAT = 4


class CliError(Exception):
    def __init__(self, message, code):
        super().__init__(message)
        self.code = code


def _emit(key, value):
    if isinstance(value, float):
        value = repr(value)
    print(f"{key}={value}")


def _float_list(text):
    try:
        return [float(t) for t in text.split(",") if t.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated numbers, got {text!r}") from None


def _load_config(args):
    if getattr(args, "config", None) is None:
        cfg = formats.RunConfig()
    else:
        cfg = formats.read_run_config(args.config)
    if getattr(args, "seed", None) is not None:
        cfg.seed = args.seed
    return cfg


def _load_dataset(args, cfg):
    vf = formats.read_gpv(args.data)
    scores = formats.read_scores_csv(args.scores)
    if scores.size != vf.volumes.shape[0]:
        raise FormatError(
            f"{args.scores} lists {scores.size} subjects but {args.data} holds {vf.volumes.shape[0]} volumes"
        )
    try:
        return VolumeDataset(vf.lattice, scores, vf.volumes.astype(np.float64), cfg.score_map(scores))
    except (DatasetError, ValueError) as exc:
        raise FormatError(str(exc)) from None


# -- commands -----------------------------------------------------------------

def cmd_simulate(args):
    pcfg = PhantomConfig(
        scores=tuple(args.scores) if args.scores else PhantomConfig.scores,
        m_fraction=args.m_fraction,
        noise_model=args.noise,
        profile=args.profile,
        seed=args.seed,
    )
    dataset = generate_population(pcfg)
    os.makedirs(args.out_dir, exist_ok=True)
    stem = os.path.join(args.out_dir, args.prefix)
    mask = dataset.lattice.mask
    formats.write_gpv(stem + "_data.gpv", mask, dataset.zvols)
    formats.write_scores_csv(stem + "_scores.csv", dataset.scores)
    formats.write_gpv(stem + "_labels.gpv", mask, pcfg.label_volume()[None].astype(float))
    _emit("data", stem + "_data.gpv")
    _emit("scores", stem + "_scores.csv")
    _emit("labels", stem + "_labels.gpv")
    _emit("n_subjects", dataset.n_subjects)


def _fit_report_csv(model):
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["voxel_index", "lml", "status"])
    for flat, lml, status in zip(model.lattice.flat_indices, model.report.lml, model.report.status):
        w.writerow([int(flat), repr(float(lml)), status])
    return buf.getvalue().encode("utf-8")


def cmd_fit(args):
    cfg = _load_config(args)
    dataset = _load_dataset(args, cfg)
    model = fit_volume(dataset, cfg.kind, cfg.car_config(), cfg.optimizer_options(), cfg.mean)
    formats.write_gph(args.out, model.field)
    report_path = args.report or os.path.splitext(args.out)[0] + "_report.csv"
    formats.atomic_write(report_path, _fit_report_csv(model))
    _emit("kernel", cfg.kind.value)
    _emit("score_min", dataset.score_map.lo)
    _emit("score_max", dataset.score_map.hi)
    _emit("n_voxels", dataset.lattice.n_masked)
    _emit("failures", model.report.failure_count)
    _emit("report", report_path)
    _emit("total_evidence", total_evidence(model))


def cmd_predict(args):
    cfg = _load_config(args)
    dataset = _load_dataset(args, cfg)
    field = formats.read_gph(args.field)
    if field.lattice != dataset.lattice:
        raise FormatError(f"{args.field} and {args.data} have different dims or masks")
    model = model_from_field(dataset, cfg.kind, field, cfg.car_config(), cfg.optimizer_options(), cfg.mean)
    tokens = [t.strip() for t in args.at.split(",") if t.strip()]
    try:
        queries = [float(t) for t in tokens]
    except ValueError:
        raise CliError(f"--at expects comma-separated numbers, got {args.at!r}", EXIT_USAGE) from None
    if not queries:
        raise CliError("--at needs at least one query score", EXIT_USAGE)
    mask = dataset.lattice.mask
    for token, x in zip(tokens, queries):
        with warnings.catch_warnings():
            warnings.simplefilter("ignore")
            pred = predict_volume(model, x, include_noise=args.with_noise)
        if pred.extrapolated:
            print(f"warning: extrapolation (query {token} outside "
                  f"[{dataset.score_map.lo:g}, {dataset.score_map.hi:g}])", file=sys.stderr)
        mean_path = f"{args.out_prefix}_mean_{token}.gpv"
        var_path = f"{args.out_prefix}_var_{token}.gpv"
        formats.write_gpv(mean_path, mask, pred.mean_vol[None])
        formats.write_gpv(var_path, mask, pred.var_vol[None])
        _emit("mean_file", mean_path)
        _emit("var_file", var_path)
    _emit("n_queries", len(queries))


def cmd_compare(args):
    cfg = _load_config(args)
    dataset = _load_dataset(args, cfg)
    kind_a = KernelKind.parse(args.kernel_a)
    kind_b = KernelKind.parse(args.kernel_b)
    car, opts = cfg.car_config(), cfg.optimizer_options()
    model_a = fit_volume(dataset, kind_a, car, opts, cfg.mean)
    model_b = model_a if kind_b is kind_a else fit_volume(dataset, kind_b, car, opts, cfg.mean)
    cmp_ = compare_models(model_a, model_b, args.prior_log_odds)
    mask = dataset.lattice.mask
    formats.write_gpv(args.out + "_logbf.gpv", mask, cmp_.log_bf_vol[None])
    formats.write_gpv(args.out + "_plinear.gpv", mask, cmp_.p_linear_vol[None])
    name_a, name_b = kind_a.value, kind_b.value
    if name_a == name_b:
        name_a, name_b = name_a + "_a", name_b + "_b"
    _emit("n_voxels", cmp_.n_voxels)
    _emit("per_voxel_odds", cmp_.per_voxel_odds)
    print(f"total_{name_a}={cmp_.total_a!r} total_{name_b}={cmp_.total_b!r} "
          f"per_voxel_log_diff={cmp_.per_voxel_log_diff!r}")


def _crossval_csv(reports):
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["subject", "score", "representative", "distance", "pred_logdensity", "model"])
    for report in reports:
        for subject, score, rep, dist, dens, model in report.rows():
            w.writerow([subject, repr(score), repr(rep), repr(dist), repr(dens), model])
    for report in reports:
        w.writerow(["mean", "", "", "", repr(report.overall_mean), report.model])
    return buf.getvalue().encode("utf-8")


def _profile_csv(rows):
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["distance", "model", "n_subjects", "mean_pred_logdensity"])
    for r in rows:
        w.writerow([repr(r.distance), r.model, r.n_subjects, repr(r.mean_pred_logdensity)])
    return buf.getvalue().encode("utf-8")


def cmd_crossval(args):
    cfg = _load_config(args)
    rule = None
    if args.bins is not None:
        try:
            with warnings.catch_warnings(record=True) as caught:
                warnings.simplefilter("always")
                rule = BinningRule(formats.parse_bins(args.bins))
            for wmsg in caught:
                print(f"warning: {wmsg.message}", file=sys.stderr)
        except (ConfigError, ValueError) as exc:
            raise CliError(f"bad --bins: {exc}", EXIT_USAGE) from None
    dataset = _load_dataset(args, cfg)
    if dataset.n_subjects < 3:
        raise CliError("crossval needs at least 3 subjects", EXIT_USAGE)
    if rule is not None:
        try:
            apply_binning(dataset.scores, rule)
        except UncoveredScore as exc:
            raise CliError(f"UncoveredScore: {exc}", EXIT_USAGE) from None
    car, opts = cfg.car_config(), cfg.optimizer_options()
    reports = [loo_cv(dataset, cfg.kind, car, None, opts, cfg.mean)]
    if rule is not None:
        try:
            reports.append(loo_cv(dataset, cfg.kind, car, rule, opts, cfg.mean))
        except ValueError as exc:
            raise CliError(f"bad --bins: {exc}", EXIT_USAGE) from None
    formats.atomic_write(args.out, _crossval_csv(reports))
    _emit("report", args.out)
    if rule is not None:
        profile_path = args.profile_out or os.path.splitext(args.out)[0] + "_profile.csv"
        formats.atomic_write(profile_path, _profile_csv(distance_profile(reports[0], reports[1])))
        _emit("profile", profile_path)
    for report in reports:
        _emit(f"mean_{report.model}", report.overall_mean)


# -- argument parsing ---------------------------------------------------------

def build_parser():
    parser = argparse.ArgumentParser(prog="gpspectrum", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="count", default=0)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("simulate", help="generate the synthetic phantom population")
    p.add_argument("--out-dir", default=".")
    p.add_argument("--prefix", default="phantom")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--scores", type=_float_list, default=None, help="e.g. 0,0.1,0.3,0.7,0.8,0.9,1")
    p.add_argument("--profile", choices=PROFILES, default="crossfade")
    p.add_argument("--noise", choices=NOISE_MODELS, default="ar1")
    p.add_argument("--m-fraction", type=float, default=1.0)
    p.set_defaults(func=cmd_simulate)

    def data_args(p):
        p.add_argument("--data", required=True, help="GPV1 file of per-subject z-volumes")
        p.add_argument("--scores", required=True, help="CSV with header subject,score")
        p.add_argument("--config", help="key=value run configuration")
        p.add_argument("--seed", type=int, default=None, help="override the config seed")

    p = sub.add_parser("fit", help="fit the spatially regularized GP field")
    data_args(p)
    p.add_argument("--out", required=True, help="output GPH1 field")
    p.add_argument("--report", help="fit-report CSV (default: <out>_report.csv)")
    p.set_defaults(func=cmd_fit)

    p = sub.add_parser("predict", help="predictive mean/variance volumes at query scores")
    data_args(p)
    p.add_argument("--field", required=True)
    p.add_argument("--at", required=True, help="comma-separated raw query scores")
    p.add_argument("--out-prefix", required=True)
    p.add_argument("--with-noise", action="store_true", help="add observation noise to the variance")
    p.set_defaults(func=cmd_predict)

    p = sub.add_parser("compare", help="per-voxel evidence comparison of two kernels")
    data_args(p)
    p.add_argument("--out", required=True, help="output prefix for the log-BF and probability maps")
    p.add_argument("--kernel-a", default="se", choices=[k.value for k in KernelKind])
    p.add_argument("--kernel-b", default="linear", choices=[k.value for k in KernelKind])
    p.add_argument("--prior-log-odds", type=float, default=0.0)
    p.set_defaults(func=cmd_compare)

    p = sub.add_parser("crossval", help="leave-one-out CV, optionally against binned scores")
    data_args(p)
    p.add_argument("--bins", help='e.g. "26:24,29:27,30:30" (upper:representative)')
    p.add_argument("--out", required=True, help="report CSV")
    p.add_argument("--profile-out", help="distance-profile CSV (default: <out>_profile.csv)")
    p.set_defaults(func=cmd_crossval)
    return parser


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    level = logging.WARNING - 10 * min(args.verbose, 2)
    logging.basicConfig(level=level, format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr)
    try:
        args.func(args)
    except CliError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.code
    except ConfigError as exc:
        print(f"error: configuration: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except FormatError as exc:
        print(f"error: format: {exc}", file=sys.stderr)
        return EXIT_FORMAT
    except OSError as exc:
        print(f"error: I/O: {exc}", file=sys.stderr)
        return EXIT_IO
    return 0


if __name__ == "__main__":
    sys.exit(main())
