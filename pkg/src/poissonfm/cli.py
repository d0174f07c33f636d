"""Command-line interface: fit, fit-svi, predict, query, simulate, eval."""

import argparse
import dataclasses
import json
import logging
import sys

import numpy as np

from . import __version__
from .deep import DeepConfig, deep_grad_step, init_stack
from .errors import NumericalError, PfmError
from .fileio import (
    Checkpoint,
    load_checkpoint,
    load_config,
    load_counts,
    load_responses,
    save_checkpoint,
    save_counts,
    save_responses,
)
from .gammamath import log_factorial
from .inference import FitConfig, SviSchedule, fit
from .model import ModelConfig, sample_dataset
from .predict import Query, fold_in, predict_response, run_query

log = logging.getLogger(__name__)


class _Parser(argparse.ArgumentParser):
    """argparse parser that exits 1 on usage errors (2 is reserved for numerical aborts)."""

    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(1, f"{self.prog}: error: {message}\n")


def _add_model_flags(p):
    p.add_argument("--k", type=int, default=10, help="number of latent factors")
    p.add_argument("--a", type=float, default=0.3, help="factor-weight prior shape")
    p.add_argument("--b", type=float, default=0.3, help="loading prior shape and rate")
    p.add_argument("--seed", type=int, default=0)


def _add_fit_flags(p):
    _add_model_flags(p)
    p.add_argument("--responses", help="optional response file (one real per row)")
    p.add_argument("--max-iters", type=int, default=200)
    p.add_argument("--tol", type=float, default=1e-6, help="relative ELBO change threshold")
    p.add_argument("--eval-every", type=int, default=1)
    p.add_argument("--paper-moment", action="store_true",
                   help="use the 1/K^2 second-moment variant in the regression updates")
    p.add_argument("--config",
                   help="JSON config for model and fit settings (replaces those flags)")
    p.add_argument("--checkpoint", required=True, help="output checkpoint path")
    p.add_argument("--trace", help="output ELBO trace CSV path")
    p.add_argument("--deep-layers", type=int, default=0,
                   help="experimental: fit this many Gamma layers above the factors")
    p.add_argument("--deep-steps", type=int, default=50)
    p.add_argument("--deep-step-size", type=float, default=1e-3)
    p.add_argument("--deep-mc-samples", type=int, default=64)


def build_parser():
    parser = _Parser(prog="poissonfm", description=__doc__)
    parser.add_argument("--version", action="version", version=f"poissonfm {__version__}")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p_fit = sub.add_parser("fit", help="batch variational EM fit")
    p_fit.add_argument("counts", help="coordinate-format count matrix")
    _add_fit_flags(p_fit)

    p_svi = sub.add_parser("fit-svi", help="stochastic variational inference fit")
    p_svi.add_argument("counts")
    _add_fit_flags(p_svi)
    p_svi.add_argument("--batch-size", type=int, default=64)
    p_svi.add_argument("--t0", type=float, default=64.0)
    p_svi.add_argument("--kappa", type=float, default=0.7)

    p_pred = sub.add_parser("predict", help="fold in query rows and predict responses")
    p_pred.add_argument("checkpoint")
    p_pred.add_argument("queries", help="count file of query rows (same column count)")
    p_pred.add_argument("--out", required=True, help="output CSV `row,y_hat`")

    p_query = sub.add_parser("query", help="conditional feature query against a fit")
    p_query.add_argument("checkpoint")
    p_query.add_argument("--cols", required=True, help="comma-separated observed columns")
    p_query.add_argument("--counts", required=True, help="comma-separated observed counts")
    p_query.add_argument("--top-n", type=int, default=10)
    p_query.add_argument("--out-prefix", required=True)

    p_sim = sub.add_parser("simulate", help="draw a synthetic dataset")
    _add_model_flags(p_sim)
    p_sim.add_argument("--n", type=int, required=True, help="rows")
    p_sim.add_argument("--d", type=int, required=True, help="columns")
    p_sim.add_argument("--c", type=float, default=1.0, help="factor-weight prior scale")
    p_sim.add_argument("--sigma", type=float, default=1.0, help="response variance")
    p_sim.add_argument("--eta", default="random",
                       help="comma-separated response weights, or 'random'")
    p_sim.add_argument("--out-prefix", required=True)

    p_eval = sub.add_parser("eval", help="score held-out rows against a checkpoint")
    p_eval.add_argument("checkpoint")
    p_eval.add_argument("counts", help="held-out rows")
    p_eval.add_argument("--responses", help="held-out responses for RMSE")
    p_eval.add_argument("--observe-frac", type=float, default=0.5,
                        help="fraction of columns revealed to fold-in; the rest are scored")
    p_eval.add_argument("--seed", type=int, default=0)
    p_eval.add_argument("--out", required=True, help="output CSV `metric,value`")
    return parser


def _fit_command(args, mode):
    data = load_counts(args.counts)
    y = load_responses(args.responses, data.n_rows) if args.responses else None
    if args.config:
        mcfg, fcfg = load_config(args.config)
        if fcfg.mode != mode:
            if mode == "svi" and fcfg.schedule is None:
                raise PfmError("fit-svi with --config requires a schedule in the config")
            fcfg = dataclasses.replace(fcfg, mode=mode)
    else:
        mcfg = ModelConfig(args.k, args.a, args.b, args.seed)
        schedule = None
        if mode == "svi":
            schedule = SviSchedule(args.t0, args.kappa, args.batch_size)
        fcfg = FitConfig(
            max_iters=args.max_iters,
            rel_tol=args.tol,
            mode=mode,
            schedule=schedule,
            eval_every=args.eval_every,
            paper_moment=args.paper_moment,
        )
    result = fit(data, y, mcfg, fcfg)
    if args.deep_layers > 0:
        dcfg = DeepConfig(
            n_layers=args.deep_layers,
            step_size=args.deep_step_size,
            n_steps=args.deep_steps,
            n_mc_samples=args.deep_mc_samples,
        )
        stack = init_stack(data.n_rows, mcfg.n_factors, dcfg, mcfg.seed)
        for step in range(dcfg.n_steps):
            stack, mc_elbo = deep_grad_step(
                stack, result.theta, mcfg, result.regression.c,
                dcfg.step_size, dcfg.n_mc_samples, mcfg.seed + step,
            )
            log.info("deep step %d: mc objective %.4f", step, mc_elbo)
    final_elbo = result.trace.elbos[-1] if len(result.trace) else None
    ckpt = Checkpoint(
        mcfg, result.regression, result.theta, result.beta,
        result.iterations, final_elbo, result.converged,
    )
    save_checkpoint(ckpt, args.checkpoint)
    if args.trace:
        result.trace.write_csv(args.trace)
    print(
        f"fit: {result.iterations} iterations, converged={result.converged}, "
        f"elbo={final_elbo}"
    )
    return 0


def _predict_command(args):
    ckpt = load_checkpoint(args.checkpoint)
    queries = load_counts(args.queries)
    if queries.n_cols != ckpt.beta.n_cols:
        raise PfmError(
            f"--queries has {queries.n_cols} columns but the checkpoint "
            f"expects {ckpt.beta.n_cols}"
        )
    lines = ["row,y_hat"]
    for i in range(queries.n_rows):
        sl = queries.row_slice(i)
        query = Query.full_row(queries.n_cols, queries.cols[sl], queries.counts[sl])
        folded = fold_in(query, ckpt.beta, ckpt.model_config, ckpt.regression.c)
        y_hat = predict_response(folded.mean, ckpt.regression.eta)
        lines.append(f"{i},{y_hat!r}")
    with open(args.out, "w") as fh:
        fh.write("\n".join(lines) + "\n")
    print(f"predict: wrote {queries.n_rows} predictions to {args.out}")
    return 0


def _parse_int_list(text, flag):
    try:
        return [int(tok) for tok in text.split(",") if tok.strip() != ""]
    except ValueError:
        raise PfmError(f"{flag} must be a comma-separated integer list") from None


def _query_command(args):
    ckpt = load_checkpoint(args.checkpoint)
    cols = _parse_int_list(args.cols, "--cols")
    counts = _parse_int_list(args.counts, "--counts")
    if len(cols) != len(counts):
        raise PfmError("--cols and --counts must have the same length")
    query = Query.subset(ckpt.beta.n_cols, cols, counts)
    result = run_query(
        query, ckpt.theta, ckpt.beta, ckpt.regression, ckpt.model_config, args.top_n
    )
    prefix = args.out_prefix
    with open(f"{prefix}_expected.csv", "w") as fh:
        fh.write("col,expected_count\n")
        for col, val in zip(result.unobserved_cols, result.expected_counts):
            fh.write(f"{col},{val!r}\n")
    with open(f"{prefix}_features.csv", "w") as fh:
        fh.write("rank,col,expected_count\n")
        for rank, (col, val) in enumerate(result.top_features):
            fh.write(f"{rank},{col},{val!r}\n")
    with open(f"{prefix}_instances.csv", "w") as fh:
        fh.write("rank,row,cosine\n")
        for rank, (row, val) in enumerate(result.top_instances):
            fh.write(f"{rank},{row},{val!r}\n")
    theta = ",".join(repr(v) for v in result.theta_mean)
    print(f"theta_mean: {theta}")
    print(f"predicted_response: {result.predicted_response!r}")
    if result.empty_query:
        print("warning: query observed no columns; returned the prior")
    return 0


def _simulate_command(args):
    mcfg = ModelConfig(args.k, args.a, args.b, args.seed)
    rng = np.random.default_rng(args.seed)
    if args.eta == "random":
        eta = rng.standard_normal(args.k)
    else:
        try:
            eta = np.asarray([float(t) for t in args.eta.split(",")])
        except ValueError:
            raise PfmError("--eta must be 'random' or a comma-separated float list") from None
        if eta.shape != (args.k,):
            raise PfmError(f"--eta must list exactly {args.k} weights")
    data, y, theta, beta = sample_dataset(
        mcfg, args.n, args.d, args.c, eta, args.sigma, seed=args.seed
    )
    prefix = args.out_prefix
    save_counts(data, f"{prefix}_counts.txt")
    save_responses(y, f"{prefix}_responses.txt")
    np.savetxt(f"{prefix}_theta_true.txt", theta)
    np.savetxt(f"{prefix}_beta_true.txt", beta)
    meta = {
        "n": args.n, "d": args.d, "k": args.k, "a": args.a, "b": args.b,
        "c": args.c, "sigma": args.sigma, "seed": args.seed, "eta": eta.tolist(),
    }
    with open(f"{prefix}_meta.json", "w") as fh:
        json.dump(meta, fh, sort_keys=True, indent=2)
    print(f"simulate: wrote {data.n_rows}x{data.n_cols} dataset ({data.nnz} nonzeros) to {prefix}_*")
    return 0


def _eval_command(args):
    ckpt = load_checkpoint(args.checkpoint)
    data = load_counts(args.counts)
    if data.n_cols != ckpt.beta.n_cols:
        raise PfmError(
            f"eval counts have {data.n_cols} columns but the checkpoint "
            f"expects {ckpt.beta.n_cols}"
        )
    if not 0.0 < args.observe_frac < 1.0:
        raise PfmError("--observe-frac must lie strictly between 0 and 1")
    rng = np.random.default_rng(args.seed)
    d = data.n_cols
    n_obs = max(1, int(round(args.observe_frac * d)))
    total_ll = 0.0
    n_cells = 0
    for i in range(data.n_rows):
        observed = np.sort(rng.choice(d, size=n_obs, replace=False))
        sl = data.row_slice(i)
        dense = np.zeros(d, dtype=np.int64)
        dense[data.cols[sl]] = data.counts[sl]
        query = Query(d, observed, dense[observed])
        folded = fold_in(query, ckpt.beta, ckpt.model_config, ckpt.regression.c)
        held = np.setdiff1d(np.arange(d), observed)
        rates = folded.mean @ ckpt.beta.mean[:, held]
        x_held = dense[held].astype(np.float64)
        total_ll += float(
            (x_held * np.log(rates) - rates - log_factorial(x_held)).sum()
        )
        n_cells += held.size
    metrics = [("heldout_poisson_loglik", total_ll / max(n_cells, 1))]
    if args.responses:
        y = load_responses(args.responses, data.n_rows)
        preds = np.empty(data.n_rows)
        for i in range(data.n_rows):
            sl = data.row_slice(i)
            query = Query.full_row(d, data.cols[sl], data.counts[sl])
            folded = fold_in(query, ckpt.beta, ckpt.model_config, ckpt.regression.c)
            preds[i] = predict_response(folded.mean, ckpt.regression.eta)
        rmse = float(np.sqrt(np.mean((preds - y) ** 2)))
        metrics.append(("response_rmse", rmse))
    with open(args.out, "w") as fh:
        fh.write("metric,value\n")
        for name, value in metrics:
            fh.write(f"{name},{value!r}\n")
    for name, value in metrics:
        print(f"{name}: {value!r}")
    return 0


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(
        level=logging.INFO if args.verbose else logging.WARNING,
        format="%(levelname)s %(name)s: %(message)s",
    )
    try:
        if args.command == "fit":
            return _fit_command(args, "batch")
        if args.command == "fit-svi":
            return _fit_command(args, "svi")
        if args.command == "predict":
            return _predict_command(args)
        if args.command == "query":
            return _query_command(args)
        if args.command == "simulate":
            return _simulate_command(args)
        if args.command == "eval":
            return _eval_command(args)
    except NumericalError as exc:
        print(f"poissonfm: numerical abort: {exc}", file=sys.stderr)
        return 2
    except (PfmError, OSError) as exc:
        print(f"poissonfm: error: {exc}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
