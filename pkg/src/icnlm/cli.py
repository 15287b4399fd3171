"""Command-line front end: ``icnlm simulate | fit | predict | diagnose``.

Exit codes: 0 success, 1 I/O or storage error, 2 invalid input or
configuration, 3 inference failure.
"""

from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

import numpy as np

from . import data_io
from .copula_model import PriorSpec
from .errors import InferenceError, StorageError, ValidationError
from .hmc import HmcSettings
from .model import ViSettings, diagnose, fit_model, predict_table, write_predictions
from .vi import DEFAULT_MAX_ITER

EXIT_OK, EXIT_IO, EXIT_CONFIG, EXIT_INFERENCE = 0, 1, 2, 3

log = logging.getLogger("icnlm")


def _prior(args) -> PriorSpec:
    return PriorSpec.ridge(args.nu) if args.prior == "ridge" else PriorSpec.horseshoe()


def cmd_simulate(args) -> int:
    if args.n < 10:
        raise ValidationError(f"--n must be >= 10, got {args.n}")
    if args.n_valid < 0:
        raise ValidationError(f"--n-valid must be >= 0, got {args.n_valid}")
    n_total = args.n + args.n_valid
    spec = data_io.SyntheticSpec(
        n=n_total, p=args.p, prior=_prior(args), margin_kind=args.margin,
        basis_kind=args.basis, seed=args.seed, raw_dim=args.raw_dim,
    )
    dataset, truth = data_io.generate_synthetic(spec)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    train = dataset.subset(np.arange(args.n))
    data_io.write_features(out / "features.csv", train.basis)
    data_io.write_responses(out / "responses.csv", train.responses)
    if args.n_valid:
        valid = dataset.subset(np.arange(args.n, n_total))
        data_io.write_features(out / "features_valid.csv", valid.basis)
        data_io.write_responses(out / "responses_valid.csv", valid.responses)
    data_io.save_truth(out / "truth.json", truth)
    print(f"wrote {n_total} synthetic rows to {out}")
    return EXIT_OK


def cmd_fit(args) -> int:
    spec = _prior(args)
    if args.method == "hmc":
        settings = HmcSettings(n_burnin=args.burnin, n_keep=args.keep, leapfrog_steps=args.leapfrog,
                               initial_step=args.step_size, seed=args.seed)
    else:
        settings = ViSettings(k=args.k, M=args.m_samples, max_iter=args.max_iter, seed=args.seed)
    dataset = data_io.load_dataset(args.features, args.responses)
    result = fit_model(dataset, spec, args.method, settings, bandwidth=args.bandwidth)
    out = Path(args.out)
    data_io.save_fit(out, result.model)
    log_path = Path(args.log) if args.log else out.with_name(out.name + ".log")
    log_path.write_text("\n".join(result.log_lines) + "\n")
    print(result.log_lines[1] if args.method == "hmc" else result.log_lines[2])
    return EXIT_OK


def cmd_predict(args) -> int:
    model = data_io.load_fit(args.model, expect_prior=_prior(args) if args.prior else None)
    basis, ids = data_io.load_features(args.features)
    table = predict_table(model, basis, ids, alpha=args.alpha)
    write_predictions(args.out, table)
    print(f"wrote {basis.shape[0]} predictions to {args.out}")
    return EXIT_OK


def cmd_diagnose(args) -> int:
    model = data_io.load_fit(args.model, expect_prior=_prior(args) if args.prior else None)
    dataset = data_io.load_dataset(args.features, args.responses)
    report = diagnose(model, dataset)
    report.write(args.out)
    summary = report.summary()
    print(f"marginal_sup_gap\t{summary['marginal_sup_gap']!r}")
    print(f"ks_statistic\t{summary['ks_statistic']!r}")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="icnlm", description=__doc__.splitlines()[0])
    parser.add_argument("--verbose", action="store_true", help="debug logging to stderr")
    sub = parser.add_subparsers(dest="command", required=True)

    def prior_flags(p, required=True):
        p.add_argument("--prior", choices=("ridge", "horseshoe"), required=required)
        p.add_argument("--nu", type=float, default=2.5, help="Weibull scale of the ridge hyperprior")

    sim = sub.add_parser("simulate", help="generate a well-specified synthetic dataset")
    sim.add_argument("--n", type=int, required=True, help="training rows")
    sim.add_argument("--n-valid", type=int, default=0, help="extra validation rows")
    sim.add_argument("--p", type=int, required=True, help="basis functions")
    prior_flags(sim)
    sim.add_argument("--margin", choices=data_io.MARGIN_KINDS, default="gaussian")
    sim.add_argument("--basis", choices=data_io.BASIS_KINDS, default="random_relu")
    sim.add_argument("--raw-dim", type=int, default=None, help="raw input dimension for random_relu")
    sim.add_argument("--seed", type=int, required=True)
    sim.add_argument("--out", required=True, help="output directory")
    sim.set_defaults(func=cmd_simulate)

    fit = sub.add_parser("fit", help="fit an IC-NLM and write a .icnlm model")
    fit.add_argument("--features", required=True)
    fit.add_argument("--responses", required=True)
    prior_flags(fit)
    fit.add_argument("--method", choices=("hmc", "vi"), required=True)
    fit.add_argument("--k", type=int, default=3, help="VI factor columns")
    fit.add_argument("--m-samples", type=int, default=50, help="VI Monte-Carlo draws per step")
    fit.add_argument("--max-iter", type=int, default=DEFAULT_MAX_ITER, help="VI iteration cap")
    fit.add_argument("--burnin", type=int, default=2000, help="HMC burn-in iterations")
    fit.add_argument("--keep", type=int, default=10000, help="HMC retained draws")
    fit.add_argument("--leapfrog", type=int, default=50, help="HMC leapfrog steps")
    fit.add_argument("--step-size", type=float, default=0.01, help="HMC initial step size")
    fit.add_argument("--bandwidth", type=float, default=None, help="KDE bandwidth (default Silverman)")
    fit.add_argument("--seed", type=int, required=True)
    fit.add_argument("--out", required=True, help="model path (.icnlm)")
    fit.add_argument("--log", default=None, help="fit log path (default <out>.log)")
    fit.set_defaults(func=cmd_fit)

    pred = sub.add_parser("predict", help="write per-query predictive summaries")
    pred.add_argument("--model", required=True)
    pred.add_argument("--features", required=True)
    prior_flags(pred, required=False)
    pred.add_argument("--alpha", type=float, default=None, help="add a 1 - alpha interval")
    pred.add_argument("--out", required=True, help="tab-separated output path")
    pred.set_defaults(func=cmd_predict)

    diag = sub.add_parser("diagnose", help="calibration and accuracy report")
    diag.add_argument("--model", required=True)
    diag.add_argument("--features", required=True)
    diag.add_argument("--responses", required=True)
    prior_flags(diag, required=False)
    diag.add_argument("--out", required=True, help="report directory")
    diag.set_defaults(func=cmd_diagnose)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_OK if exc.code == 0 else EXIT_CONFIG
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING,
                        format="%(name)s: %(message)s")
    try:
        return args.func(args)
    except ValidationError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except InferenceError as exc:
        print(f"inference failed: {exc}", file=sys.stderr)
        return EXIT_INFERENCE
    except (OSError, StorageError) as exc:
        print(f"i/o error: {exc}", file=sys.stderr)
        return EXIT_IO


if __name__ == "__main__":
    sys.exit(main())
