"""Command-line interface.

Subcommands: simulate, fit, compare, study, summarize, kernel-curve.
Every run writes a manifest (config hash, seed, versions) next to its
outputs; rerunning with the same seed reproduces the outputs bit for bit
regardless of HMMILM_THREADS.
"""

from __future__ import annotations

import argparse
import os
import sys

import numpy as np

from . import benchmark, io as hio
from .diagnostics import quantile_interval, summarize_states
from .errors import ConfigError, HmmIlmError
from .model import KernelVariant, kernel_effect
from .samplers import gibbs_run
from .simulate import SimConfig, simulate_outbreak


def _parser() -> argparse.ArgumentParser:
    top = argparse.ArgumentParser(
        prog="hmmilm",
        description="Simulate and fit hidden Markov individual-level epidemic models",
    )
    sub = top.add_subparsers(dest="command", required=True)

    def common(p, data=False):
        p.add_argument("--config", required=True, help="INI run configuration")
        p.add_argument("--out", required=True, help="output directory")
        p.add_argument("--seed", type=int, default=None)
        p.add_argument("--grid", default=None,
                       help="rows:cols:row_spacing:col_spacing[:order]")
        p.add_argument("--population", default=None, help="population CSV (id,x,y)")
        p.add_argument("--covariates", default=None, help="covariate CSV (t,W)")
        if data:
            p.add_argument("--data", required=True, help="detections CSV (id,t)")
            p.add_argument("--chains", type=int, default=None)
            p.add_argument("--iterations", type=int, default=None)
            p.add_argument("--burnin", type=int, default=None)
            p.add_argument("--thin", type=int, default=None)

    common(sub.add_parser("simulate", help="draw an outbreak and its detections"))
    common(sub.add_parser("fit", help="posterior inference on detection data"), data=True)
    common(sub.add_parser("compare", help="fit the configured variant ladder"), data=True)
    common(sub.add_parser("study", help="parameter-recovery study"))

    ps = sub.add_parser("summarize", help="summaries from a previous fit directory")
    ps.add_argument("--fit-dir", required=True)
    ps.add_argument("--out", required=True)

    pk = sub.add_parser("kernel-curve",
                        help="infection probability vs distance from posterior draws")
    pk.add_argument("--fit-dir", required=True)
    pk.add_argument("--config", required=True)
    pk.add_argument("--out", required=True)
    pk.add_argument("--dgrid", default="0.5:3.36:0.02", help="min:max:step in meters")
    return top


def _load(args) -> hio.RunConfig:
    return hio.RunConfig.load(args.config)


def _horizon(cfg: hio.RunConfig) -> int:
    model_sec = cfg._section("model")
    sim_sec = cfg._section("simulate")
    if "t" in model_sec:
        return int(model_sec["t"])
    if "t" in sim_sec:
        return int(sim_sec["t"])
    raise ConfigError("the horizon T must be set ([model] t or [simulate] t)")


def _apply_covariates(spec, cfg_args, T):
    if cfg_args.covariates:
        from .population import validate_covariates

        spec.covariates = validate_covariates(
            hio.read_covariates_csv(cfg_args.covariates, T), T)
    return spec


def _cmd_simulate(args) -> int:
    cfg = _load(args)
    population = cfg.population(args.grid, args.population)
    params, T, seed = cfg.simulate_params()
    if args.seed is not None:
        seed = args.seed
    spec = cfg.model_spec(population.n, T)
    spec = _apply_covariates(spec, args, T)
    sim = SimConfig(population, spec.kernel, spec.observation, params,
                    spec.initial, T=T, seed=seed, covariates=spec.covariates)
    states, y = simulate_outbreak(sim)
    os.makedirs(args.out, exist_ok=True)
    hio.write_states_csv(os.path.join(args.out, "states.csv"), states)
    hio.write_detections_csv(os.path.join(args.out, "detections.csv"), y)
    hio.write_manifest(os.path.join(args.out, "manifest.json"), cfg.raw_text(),
                       seed, "simulate", extra={"T": T, "n": population.n})
    print(f"simulated {population.n} individuals over T={T}: "
          f"{int(np.asarray(y).sum())} detections -> {args.out}")
    return 0


def _fit_common(args, cfg):
    population = cfg.population(args.grid, args.population)
    T = _horizon(cfg)
    spec = cfg.model_spec(population.n, T)
    spec = _apply_covariates(spec, args, T)
    y = hio.ingest_detections(args.data, population.n, T, spec.observation)
    mcmc = cfg.mcmc(chains=args.chains, iterations=args.iterations,
                    burn_in=args.burnin, thin=args.thin, seed=args.seed)
    return population, T, spec, y, mcmc


def _cmd_fit(args) -> int:
    cfg = _load(args)
    population, T, spec, y, mcmc = _fit_common(args, cfg)
    archive = gibbs_run(y, population, spec, mcmc)
    os.makedirs(args.out, exist_ok=True)
    hio.write_draws_csv(os.path.join(args.out, "params.csv"), archive)
    hio.write_functionals_csv(os.path.join(args.out, "functionals.csv"), archive)
    summary = summarize_states(archive)
    hio.write_state_probs_csv(os.path.join(args.out, "state_probs.csv"),
                              summary.probabilities)
    from .diagnostics import convergence_report

    report = convergence_report(archive)
    hio.write_convergence_csv(os.path.join(args.out, "convergence.csv"), report)
    hio.write_waic_csv(os.path.join(args.out, "waic.csv"), [
        ("partially_marginalized", archive.waic()),
        ("conditional", archive.waic("conditional")),
    ])
    hio.write_summary_csv(os.path.join(args.out, "summary.csv"),
                          archive.parameter_summary() + summary.functionals)
    hio.write_manifest(
        os.path.join(args.out, "manifest.json"), cfg.raw_text(), mcmc.seed, "fit",
        extra={"T": T, "n": population.n, "iterations": mcmc.iterations,
               "burn_in": mcmc.burn_in, "thin": mcmc.thin, "chains": mcmc.chains,
               "kernel": spec.kernel.variant.value,
               "observation": spec.observation.value})
    print(f"fit complete: {mcmc.chains} chains x {mcmc.iterations} iterations, "
          f"convergence {'pass' if report.passed else 'FAIL'} -> {args.out}")
    return 0


def _cmd_compare(args) -> int:
    cfg = _load(args)
    population, T, base_spec, y, mcmc = _fit_common(args, cfg)
    variants = [("base", base_spec)]
    for section in cfg.variant_sections():
        label = section.split(":", 1)[1]
        spec = cfg.model_spec(population.n, T, section=section)
        spec = _apply_covariates(spec, args, T)
        variants.append((label, spec))
    benchmark.warmup()
    rows = benchmark.run_variant_ladder(y, population, variants, mcmc)
    os.makedirs(args.out, exist_ok=True)
    out_rows = []
    for label, waic, waic_cond, params, r0, converged, seconds in rows:
        out_rows.append((label, "waic", waic))
        out_rows.append((label, "waic_conditional", waic_cond))
        if r0 is not None:
            for key, value in zip(("r0_median", "r0_lo95", "r0_hi95"), r0):
                out_rows.append((label, key, value))
        for name, med, lo, hi in params:
            out_rows.append((label, f"{name}_median", med))
            out_rows.append((label, f"{name}_lo95", lo))
            out_rows.append((label, f"{name}_hi95", hi))
        out_rows.append((label, "converged", 1.0 if converged else 0.0))
        out_rows.append((label, "seconds", seconds))
    hio._write_rows(os.path.join(args.out, "comparison.csv"),
                    ("model", "metric", "value"), out_rows)
    hio.write_manifest(os.path.join(args.out, "manifest.json"), cfg.raw_text(),
                       mcmc.seed, "compare")
    print(f"compared {len(variants)} variants -> {args.out}")
    return 0


def _cmd_study(args) -> int:
    cfg = _load(args)
    population = cfg.population(args.grid, args.population)
    params, T, _ = cfg.simulate_params()
    study = cfg.study()
    seed = args.seed if args.seed is not None else int(study.get("seed", 0))
    spec = cfg.model_spec(population.n, T)
    rc = benchmark.RecoveryStudyConfig(
        population=population,
        truth=params,
        T=T,
        replications=int(study.get("replications", 20)),
        mcmc=cfg.mcmc(),
        priors=spec.priors,
        kernel=spec.kernel,
        observation=spec.observation,
        p_initial_infectious=float(study.get("init_infectious", 0.01)),
        seed=seed,
        ess_threshold=float(study.get("ess_threshold", 1000.0)),
        gr_threshold=float(study.get("gr_threshold", 1.05)),
        timeout_s=float(study["timeout_s"]) if "timeout_s" in study else None,
    )
    benchmark.warmup()
    result = benchmark.run_recovery_study(rc, out_dir=args.out)
    hio.write_manifest(os.path.join(args.out, "manifest.json"), cfg.raw_text(),
                       seed, "study",
                       extra={"replications": rc.replications,
                              "converged": result.n_converged})
    print(f"recovery study: {result.n_converged}/{rc.replications} converged "
          f"-> {args.out}")
    return 0


def _cmd_summarize(args) -> int:
    import json

    with open(os.path.join(args.fit_dir, "manifest.json")) as fh:
        manifest = json.load(fh)
    burn_in = int(manifest["burn_in"])
    names, draws = hio.read_draws_csv(os.path.join(args.fit_dir, "params.csv"))
    post = draws[:, burn_in:, :]
    rows = []
    for p, name in enumerate(names):
        med, lo, hi = quantile_interval(post[:, :, p].reshape(-1))
        rows.append((name, med, lo, hi))
    if manifest.get("kernel") == KernelVariant.HOMOGENEOUS_WARD_CLOSURE.value:
        from .diagnostics import r0

        draws_r0 = r0(post[:, :, names.index("beta0")].reshape(-1),
                      post[:, :, names.index("m")].reshape(-1), manifest["n"])
        med, lo, hi = quantile_interval(draws_r0)
        rows.append(("r0", med, lo, hi))
    functionals = hio.read_functionals_csv(os.path.join(args.fit_dir, "functionals.csv"))
    for name, values in sorted(functionals.items()):
        med, lo, hi = quantile_interval(values)
        rows.append((name, med, lo, hi))
    os.makedirs(args.out, exist_ok=True)
    hio.write_summary_csv(os.path.join(args.out, "posterior_summary.csv"), rows)
    print(f"wrote posterior_summary.csv with {len(rows)} rows -> {args.out}")
    return 0


def _cmd_kernel_curve(args) -> int:
    import json

    cfg = hio.RunConfig.load(args.config)
    kernel = cfg.kernel()
    if kernel.variant in (KernelVariant.LINEAR, KernelVariant.QUADRATIC_CONSTRAINED) \
            and kernel.dmax is None:
        raise ConfigError("kernel-curve needs explicit dmax for bounded kernels")
    with open(os.path.join(args.fit_dir, "manifest.json")) as fh:
        manifest = json.load(fh)
    names, draws = hio.read_draws_csv(os.path.join(args.fit_dir, "params.csv"))
    post = draws[:, int(manifest["burn_in"]):, :].reshape(-1, len(names))
    lo_d, hi_d, step = (float(v) for v in args.dgrid.split(":"))
    grid = np.arange(lo_d, hi_d + 0.5 * step, step)
    alpha_col = names.index("alpha")
    beta_cols = [names.index(n) for n in names if n.startswith("beta")]
    rows = []
    for d in grid:
        effects = np.array([
            kernel_effect(kernel, row[beta_cols], float(d)) for row in post
        ])
        p = -np.expm1(-(post[:, alpha_col] + effects))
        med, plo, phi = quantile_interval(p)
        rows.append((float(d), med, plo, phi))
    os.makedirs(args.out, exist_ok=True)
    hio.write_kernel_curve_csv(os.path.join(args.out, "kernel_curve.csv"), rows)
    print(f"wrote kernel_curve.csv over {len(rows)} distances -> {args.out}")
    return 0


_COMMANDS = {
    "simulate": _cmd_simulate,
    "fit": _cmd_fit,
    "compare": _cmd_compare,
    "study": _cmd_study,
    "summarize": _cmd_summarize,
    "kernel-curve": _cmd_kernel_curve,
}


def main(argv=None) -> int:
    args = _parser().parse_args(argv)
    try:
        return _COMMANDS[args.command](args)
    except HmmIlmError as exc:
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 2
    except Exception as exc:  # one parsable line, never a traceback
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
