"""Command-line entry point ``st``.

Exit status is 0 on success and 1 on a domain failure such as non-convergence
or a failed self-test.  Usage errors exit with 2; these cover bad flags and
inputs or config files that fail validation.
"""

from __future__ import annotations

import csv
import io
import json
import logging
import os
import sys
from pathlib import Path

import click
import numpy as np
from pydantic import ValidationError

from . import approx, checks
from .config import load_train_experiment
from .errors import DomainError, InvalidInputError
from .measures import (DiscreteMeasure, density_of, integrate, load_coupling, load_measure,
                       marginals, normalized_weights)
from .model import (CouplingSystemSample, SinkhornTransformerParams, dataset_diameter,
                    init_params, per_sample_w1, synth_coupling_system, train)
from .transport import SinkhornConfig, sinkhorn_solve
from .wasserstein import coupling_w1

log = logging.getLogger("sinkhorn_transformer")

_LEVELS = {"debug": logging.DEBUG, "info": logging.INFO, "quiet": logging.ERROR}


def _setup_logging():
    level = _LEVELS.get(os.environ.get("ST_LOG", "").lower(), logging.WARNING)
    logging.basicConfig(level=level, stream=sys.stderr,
                        format="%(levelname)s %(name)s: %(message)s")


def _fmt(x) -> str:
    if isinstance(x, (float, np.floating)):
        return repr(float(x))
    return str(x)


def _csv_text(header, rows) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    if header:
        w.writerow(header)
    for row in rows:
        w.writerow([_fmt(v) for v in row])
    return buf.getvalue()


def _write(path: Path, text: str):
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(text)


def _parse_ints(text: str, hint: str) -> list:
    try:
        vals = [int(t) for t in text.split(",") if t.strip()]
    except ValueError as exc:
        raise click.BadParameter(f"expected comma-separated integers, got {text!r}",
                                 param_hint=hint) from exc
    if not vals or min(vals) < 1:
        raise click.BadParameter("values must be positive integers", param_hint=hint)
    return vals


def _load_json(path):
    try:
        with open(path) as fh:
            return json.load(fh)
    except (OSError, json.JSONDecodeError) as exc:
        raise click.UsageError(f"cannot read {path}: {exc}") from exc


@click.group(context_settings={"help_option_names": ["-h", "--help"]})
def cli():
    """Sinkhorn Transformer experiments. Set ST_LOG=debug|info|quiet for logging."""
    _setup_logging()


# -- ot ---------------------------------------------------------------------

@cli.group()
def ot():
    """Entropic optimal transport."""


@ot.command("solve")
@click.option("--cost", "cost_path", required=True, type=click.Path(exists=True, dir_okay=False),
              help="CSV cost matrix, one row per atom of mu.")
@click.option("--mu", "mu_path", required=True, type=click.Path(exists=True, dir_okay=False),
              help='Measure JSON {"support": [...], "weights": [...]}.')
@click.option("--nu", "nu_path", required=True, type=click.Path(exists=True, dir_okay=False))
@click.option("--epsilon", default=1.0, show_default=True, type=click.FloatRange(min=0, min_open=True))
@click.option("--tol", default=1e-9, show_default=True, type=click.FloatRange(min=0, min_open=True))
@click.option("--max-iters", default=10_000, show_default=True, type=click.IntRange(min=1))
@click.option("--log-domain/--no-log-domain", default=True, show_default=True)
def ot_solve(cost_path, mu_path, nu_path, epsilon, tol, max_iters, log_domain):
    """Print the Sinkhorn coupling as CSV, then one JSON line of diagnostics."""
    try:
        cost = np.loadtxt(cost_path, delimiter=",", ndmin=2)
        mu, nu = load_measure(mu_path), load_measure(nu_path)
    except (ValueError, KeyError, OSError) as exc:
        if isinstance(exc, DomainError):
            raise
        raise click.UsageError(f"cannot parse inputs: {exc}") from exc
    sol = sinkhorn_solve(cost, mu, nu, SinkhornConfig(epsilon, max_iters, tol, log_domain))
    row, col = marginals(sol.coupling)
    click.echo(_csv_text(None, sol.mass.tolist()), nl=False)
    click.echo(json.dumps({
        "status": sol.status, "iters": sol.iters, "final_violation": sol.final_violation,
        "row_l1": float(np.abs(row - mu.weights).sum()),
        "col_l1": float(np.abs(col - nu.weights).sum()),
        "epsilon": epsilon, "u": sol.u.tolist(), "v": sol.v.tolist(),
    }))


# -- approx -----------------------------------------------------------------

@cli.group("approx")
def approx_group():
    """Block approximation of couplings."""


@approx_group.command("demo")
@click.option("--input", "input_path", required=True, type=click.Path(exists=True, dir_okay=False),
              help='Coupling JSON {"rows": ..., "cols": ..., "mass": ...}.')
@click.option("--k", "ks", default="1,2,4,8", show_default=True, help="Comma-separated k values.")
@click.option("--out", "out", required=True, type=click.Path(dir_okay=False))
@click.option("--seed", default=0, show_default=True, type=click.IntRange(min=0))
@click.option("--functions", default=20, show_default=True, type=click.IntRange(min=1))
def approx_demo(input_path, ks, out, seed, functions):
    """Report W1 gaps and test-function errors of block approximations per k."""
    ks = _parse_ints(ks, "--k")
    try:
        pi = load_coupling(input_path)
    except (ValueError, KeyError) as exc:
        if isinstance(exc, DomainError):
            raise
        raise click.UsageError(f"cannot parse {input_path}: {exc}") from exc
    rng = np.random.default_rng(seed)
    funcs = checks.lipschitz_test_functions(rng, functions, pi.row_support.shape[1],
                                            pi.col_support.shape[1])
    base = [integrate(pi, f) for f in funcs]
    rows = []
    for k in ks:
        px = approx.build_partition(pi.row_support, k)
        py = approx.build_partition(pi.col_support, k)
        pk, _ = approx.block_coupling(pi, px, py)
        r, c = marginals(pk)
        err = max(abs(integrate(pk, f) - b) for f, b in zip(funcs, base))
        marg = max(np.abs(r - pi.row_marginal).max(), np.abs(c - pi.col_marginal).max())
        rows.append((k, len(px.cells), len(py.cells), coupling_w1(pk, pi), err, 2.0 / k,
                     float(marg)))
    _write(Path(out), _csv_text(
        ["k", "row_cells", "col_cells", "w1_gap", "max_test_fn_error", "bound", "marginal_dev"],
        rows))


# -- stability --------------------------------------------------------------

@cli.command()
@click.option("--probe", required=True,
              type=click.Choice(["lipschitz", "cost-sequence", "shift", "schrodinger"]))
@click.option("--trials", default=100, show_default=True, type=click.IntRange(min=1))
@click.option("--seed", default=0, show_default=True, type=click.IntRange(min=0))
@click.option("--size", default=5, show_default=True, type=click.IntRange(min=1, max=16))
@click.option("--out", "out", default=None, type=click.Path(dir_okay=False),
              help="Write the CSV report here instead of standard output.")
def stability(probe, trials, seed, size, out):
    """Numerical stability probes of the Sinkhorn operator."""
    rng = np.random.default_rng(seed)
    cfg = SinkhornConfig(tol=1e-12)
    if probe == "lipschitz":
        res = approx.lipschitz_batch(trials, seed, size, cfg)
        text = _csv_text(["trial", "ratio", "w1", "cost_gap"],
                         [(i, *r) for i, r in enumerate(res)])
    elif probe == "shift":
        mu, nu = checks.random_measure(rng, size), checks.random_measure(rng, size)
        rows = []
        for i in range(trials):
            c = approx.random_bounded_cost(rng, size, size, 2.0)
            k = float(rng.uniform(-10, 10))
            rows.append((i, k, approx.shift_invariance_gap(c, k, mu, nu, cfg)))
        text = _csv_text(["trial", "shift", "w1"], rows)
    elif probe == "cost-sequence":
        mu, nu = checks.random_measure(rng, size), checks.random_measure(rng, size)
        c = approx.random_bounded_cost(rng, size, size, 2.0)
        res = approx.cost_sequence_probe(c, mu, nu, checks.COST_SEQUENCE_NS, rng, cfg)
        text = _csv_text(["n", "cost_gap", "w1", "objective_gap"],
                         [(r.n, r.cost_gap, r.w1, r.objective_gap) for r in res])
    else:
        base = checks.positive_coupling(rng, size, size)
        mu0 = DiscreteMeasure(base.row_support, normalized_weights(base.row_marginal))
        nu0 = DiscreteMeasure(base.col_support, normalized_weights(base.col_marginal))
        s0 = density_of(base, mu0, nu0)
        da, db = rng.dirichlet(np.ones(size)), rng.dirichlet(np.ones(size))
        pert = [(DiscreteMeasure(mu0.support, approx.perturb_weights(mu0.weights, t, da)),
                 DiscreteMeasure(nu0.support, approx.perturb_weights(nu0.weights, t, db)))
                for t in checks.SCHRODINGER_TS]
        res = approx.schrodinger_perturbation_probe(s0, mu0, nu0, pert, cfg)
        text = _csv_text(["t", "uv_deviation", "w1_to_limit"],
                         [(t, r.uv_deviation, r.w1_to_limit)
                          for t, r in zip(checks.SCHRODINGER_TS, res)])
    if out:
        _write(Path(out), text)
    else:
        click.echo(text, nl=False)


# -- model ------------------------------------------------------------------

@cli.group()
def model():
    """Train and evaluate Sinkhorn Transformers on synthetic coupling systems."""


def _dataset_doc(samples) -> dict:
    return {"samples": [s.to_dict() for s in samples]}


def _load_dataset(path) -> list:
    doc = _load_json(path)
    try:
        return [CouplingSystemSample.from_dict(d) for d in doc["samples"]]
    except (KeyError, TypeError) as exc:
        raise click.UsageError(f"{path} is not a dataset file: {exc}") from exc


@model.command("train")
@click.option("--family", type=click.Choice(["product", "planted-entropic", "block"]),
              default=None, help="Overrides the config's dataset family.")
@click.option("--seed", type=click.IntRange(min=0), default=None)
@click.option("--iterations", type=click.IntRange(min=0), default=None,
              help="Overrides optimizer.iterations.")
@click.option("--config", "config_path", type=click.Path(exists=True, dir_okay=False), default=None,
              help="JSON experiment file; unknown keys are rejected.")
@click.option("--out", "out", required=True, type=click.Path(file_okay=False))
def model_train(family, seed, iterations, config_path, out):
    """Train on a synthetic dataset; writes params.json and history.csv under --out."""
    try:
        exp = load_train_experiment(config_path, family=family, seed=seed)
    except ValueError as exc:  # includes pydantic.ValidationError
        raise click.UsageError(_describe_config_error(exc)) from exc
    if iterations is not None:
        exp = exp.model_copy(update={"optimizer": exp.optimizer.model_copy(
            update={"iterations": iterations})})
    ds, arch = exp.dataset, exp.architecture
    samples = synth_coupling_system(
        exp.resolved_family, exp.seed, n_samples=ds.n_train + ds.n_heldout,
        n_range=(ds.n_min, ds.n_max), m_range=(ds.n_min, ds.n_max), dim=ds.dim,
        epsilon=exp.solver.epsilon, teacher_width=ds.teacher_width,
        teacher_scale=ds.teacher_scale, block_k=ds.block_k)
    train_set, heldout = samples[:ds.n_train], samples[ds.n_train:]
    params0 = init_params(exp.seed, ds.dim, arch.d_out, shared=arch.shared,
                          n_layers=arch.n_layers, n_heads=arch.n_heads, k_h=arch.k_h,
                          hidden=arch.hidden, skip=arch.skip)
    result = train(train_set, params0, exp.train_config(), heldout)
    diam = dataset_diameter(heldout)
    out = Path(out)
    _write(out / "params.json", json.dumps(result.params.to_dict()))
    _write(out / "history.csv", _csv_text(
        ["iteration", "train_loss", "sup_w1", "sup_w1_over_diameter"],
        [(it, lo, w, w / diam) for it, lo, w in result.history]))
    _write(out / "train.json", json.dumps(_dataset_doc(train_set)))
    _write(out / "heldout.json", json.dumps(_dataset_doc(heldout)))
    _write(out / "config.json", exp.model_dump_json(indent=2))
    final = result.history[-1]
    click.echo(json.dumps({"iterations": final[0], "sup_w1": final[2],
                           "sup_w1_over_diameter": final[2] / diam}))


def _describe_config_error(exc) -> str:
    if isinstance(exc, ValidationError):
        parts = [f"{'.'.join(str(p) for p in e['loc'])}: {e['msg']}" for e in exc.errors()]
        return "invalid config: " + "; ".join(parts)
    return f"invalid config: {exc}"


@model.command("eval")
@click.option("--params", "params_path", required=True, type=click.Path(exists=True, dir_okay=False))
@click.option("--dataset", "dataset_path", required=True,
              type=click.Path(exists=True, dir_okay=False))
@click.option("--epsilon", default=1.0, show_default=True, type=click.FloatRange(min=0, min_open=True))
@click.option("--tol", default=1e-9, show_default=True, type=click.FloatRange(min=0, min_open=True))
def model_eval(params_path, dataset_path, epsilon, tol):
    """Print per-sample W1 between model plans and targets as CSV."""
    try:
        params = SinkhornTransformerParams.from_dict(_load_json(params_path))
    except (KeyError, TypeError, ValueError) as exc:
        if isinstance(exc, DomainError):
            raise
        raise click.UsageError(f"{params_path} is not a params file: {exc}") from exc
    samples = _load_dataset(dataset_path)
    w1s = per_sample_w1(params, samples, SinkhornConfig(epsilon=epsilon, tol=tol))
    click.echo(_csv_text(["sample", "n", "m", "w1"],
                         [(i, s.mu.n, s.nu.n, w) for i, (s, w) in enumerate(zip(samples, w1s))]),
               nl=False)


@model.command("synth")
@click.option("--family", required=True, type=click.Choice(["product", "planted-entropic", "block"]))
@click.option("--seed", default=0, show_default=True, type=click.IntRange(min=0))
@click.option("--samples", default=8, show_default=True, type=click.IntRange(min=1))
@click.option("--out", "out", required=True, type=click.Path(dir_okay=False))
def model_synth(family, seed, samples, out):
    """Write a synthetic coupling-system dataset as JSON."""
    data = synth_coupling_system(family, seed, n_samples=samples)
    _write(Path(out), json.dumps(_dataset_doc(data)))


# -- selftest ---------------------------------------------------------------

@cli.command()
@click.option("--quick", is_flag=True, help="Shorter training run for criterion 8.")
@click.option("--only", default=None, help="Comma-separated criterion numbers.")
def selftest(quick, only):
    """Run the acceptance criteria and print a pass/fail table."""
    numbers = _parse_ints(only, "--only") if only else None
    if numbers and max(numbers) > len(checks.CRITERIA):
        raise click.BadParameter(f"criteria are numbered 1..{len(checks.CRITERIA)}",
                                 param_hint="--only")
    failed = 0
    click.echo(f"{'#':>2}  {'criterion':<26} {'result':<6} {'time':>8} {'budget':>7}")
    for res in checks.run_all(quick=quick, only=numbers):
        ok = res.passed and res.in_time
        failed += not ok
        click.echo(f"{res.number:>2}  {res.name:<26} {'pass' if ok else 'FAIL':<6} "
                   f"{res.seconds:>7.2f}s {res.budget_s:>6.0f}s")
        if not ok or log.isEnabledFor(logging.INFO):
            click.echo(f"    {json.dumps(res.details, default=float)}")
    if failed:
        raise click.exceptions.Exit(1)


def run(argv=None) -> int:
    """Execute the CLI and return its exit status instead of exiting."""
    try:
        rv = cli.main(args=argv, prog_name="st", standalone_mode=False)
    except click.exceptions.Exit as exc:
        return exc.exit_code
    except click.ClickException as exc:
        exc.show()
        return exc.exit_code
    except click.exceptions.Abort:
        click.echo("aborted", err=True)
        return 1
    except InvalidInputError as exc:
        # inputs the user supplied are malformed: a usage problem, not a numeric one
        click.echo(f"usage error: {exc}", err=True)
        return 2
    except DomainError as exc:
        click.echo(f"error: {exc}", err=True)
        return 1
    return rv if isinstance(rv, int) else 0


def main():
    sys.exit(run())


if __name__ == "__main__":
    main()
