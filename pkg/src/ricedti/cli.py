"""Command-line interface.

Commands share one INI configuration (``--config``); flags given on the
command line override the file. Exit codes: 0 success, 1 usage or
configuration error, 2 numerical abort.
"""

import argparse
import logging
import os
import sys

import numpy as np

from .config import ConfigError, RunConfig
from .dataio import load_dataset, phantom_scheme, save_dataset, simulate_phantom, standard_phantom
from .dataio import wls_initialize
from .diagnostics import (
    acceptance_histogram,
    compute_dic,
    export_profiles,
    summary_maps,
)
from .priors import hyper_names
from .sampler import (
    ChainAborted,
    ChainConfig,
    read_summary,
    run_chain,
    run_chain_arrays,
    write_summary,
    write_trace,
)

__all__ = ["main", "build_parser", "output_paths"]

log = logging.getLogger("ricedti")


class _UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise _UsageError(f"{self.prog}: error: {message}")


def output_paths(prefix):
    """Files written by ``fit`` for an output prefix."""
    return {
        "summary": f"{prefix}.summary.tsv",
        "trace": f"{prefix}.trace.tsv",
        "samples": f"{prefix}.samples.npz",
        "dump": f"{prefix}.dump.npz",
        "dic": f"{prefix}.dic.txt",
        "acceptance": f"{prefix}.acceptance.tsv",
        "config": f"{prefix}.config.ini",
    }


def _common(p):
    p.add_argument("--config", help="INI configuration file")
    p.add_argument("--data", help="dataset stem (path without .hdr)")
    p.add_argument("--seed", type=int, help="random seed")
    p.add_argument("-v", "--verbose", action="store_true", help="log progress")


def build_parser():
    parser = _Parser(prog="ricedti", description=__doc__.split("\n\n")[0])
    sub = parser.add_subparsers(dest="command", parser_class=_Parser)

    p = sub.add_parser("simulate", help="write the standard crossing phantom")
    _common(p)
    p.add_argument("--sigma", type=float, help="noise standard deviation (0 for noiseless)")
    p.add_argument("--s0", type=float, help="signal at b = 0")
    p.add_argument("--quantize", action="store_true", default=None,
                   help="floor magnitudes to integers")

    p = sub.add_parser("init", help="weighted least squares starting values")
    _common(p)
    p.add_argument("--model", help="tensor2, tensor4 or sh<n>")
    p.add_argument("--b-max", type=float, dest="b_max", help="largest b-value used")
    p.add_argument("--output", help="output prefix")

    p = sub.add_parser("fit", help="run the Gibbs-Metropolis sampler")
    _common(p)
    p.add_argument("--model", help="tensor2, tensor4 or sh<n>")
    p.add_argument("--cycles", type=int, help="number of cycles")
    p.add_argument("--burn-in", dest="burn_in", help="integer or 'auto'")
    p.add_argument("--thin", type=int, help="keep one sample every THIN cycles")
    p.add_argument("--block-radius", type=int, dest="block_radius", help="block radius r")
    p.add_argument("--workers", type=int, help="worker threads")
    p.add_argument("--positivity", choices=("counting", "constrained"))
    p.add_argument("--scoring", choices=("double", "single"))
    p.add_argument("--theta0-update", dest="theta0_update", choices=("joint", "separate"))
    p.add_argument("--inflation", type=float, help="proposal covariance multiplier")
    p.add_argument("--rho", type=float, help="pairwise precision of log S0 (0 = flat)")
    p.add_argument("--hyper", nargs="+", type=float, metavar="VALUE",
                   help="fix the hyperparameters to these values")
    p.add_argument("--b-max", type=float, dest="b_max", help="initializer b-value cut-off")
    p.add_argument("--output", help="output prefix")

    p = sub.add_parser("diagnose", help="DIC and acceptance report of a fit")
    _common(p)
    p.add_argument("--output", help="prefix of the fit to diagnose")

    p = sub.add_parser("export", help="FA/MD/acceptance/noise maps and profiles")
    _common(p)
    p.add_argument("--output", help="prefix of the fit to export")
    p.add_argument("--subdivisions", type=int, default=3, help="icosphere subdivisions")
    return parser


def _load_config(args):
    cfg = RunConfig.read(args.config) if args.config else RunConfig()
    over = {}
    for key in ("data", "seed", "sigma", "s0", "quantize", "b_max", "output", "cycles", "thin",
                "block_radius", "workers", "positivity", "scoring", "theta0_update",
                "inflation"):
        if hasattr(args, key):
            over[key] = getattr(args, key)
    if getattr(args, "model", None) is not None:
        over["family"] = args.model
    if getattr(args, "burn_in", None) is not None:
        b = args.burn_in
        try:
            over["burn_in"] = "auto" if b == "auto" else int(b)
        except ValueError:
            raise ConfigError("--burn-in must be an integer or 'auto'") from None
    if getattr(args, "rho", None) is not None:
        over["rho"] = args.rho
        over["theta0"] = "intrinsic" if args.rho > 0 else "flat"
    if getattr(args, "hyper", None) is not None:
        over["hyper"] = "fixed"
        over["hyper_values"] = tuple(args.hyper)
    return cfg.updated(**over).validate()


def _ensure_parent(path):
    d = os.path.dirname(os.fspath(path))
    if d:
        os.makedirs(d, exist_ok=True)


def cmd_simulate(cfg, out=None):
    out = out or sys.stdout
    spec, _ = standard_phantom(sigma=cfg.sigma, s0=cfg.s0, quantize=cfg.quantize)
    scheme = phantom_scheme()
    data = simulate_phantom(spec, scheme, cfg.seed)
    _ensure_parent(cfg.data)
    hdr = save_dataset(data, cfg.data)
    print(f"scheme: {scheme.summary()}", file=out)
    print(f"wrote {hdr}: {data.n_voxels} voxels, {int(np.sum(data.Y == 0))} zero magnitudes",
          file=out)
    return 0


def cmd_init(cfg, out=None):
    out = out or sys.stdout
    data = load_dataset(cfg.data)
    spec = cfg.spec
    theta, sigma2, flagged = wls_initialize(data, spec, cfg.b_max)
    res = run_chain_arrays(data.Y, data.design(spec), data.graph, spec,
                           ChainConfig(cycles=0, burn_in=0, seed=cfg.seed,
                                       hyper_mode="estimated"),
                           theta, sigma2, coords=data.coords, grid_shape=data.dims)
    paths = output_paths(cfg.output)
    _ensure_parent(paths["summary"])
    write_summary(paths["summary"], res)
    print(f"wrote {paths['summary']} ({int(flagged.sum())} voxels copied from neighbours)",
          file=out)
    return 0


def format_hyper_table(result):
    """Posterior mean and SD of each hyperparameter, one row per name."""
    lines = [f"{'parameter':<10} {'mean':>14} {'sd':>14}"]
    for name in result.hyper_mean:
        lines.append(f"{name:<10} {result.hyper_mean[name]:>14.6g} {result.hyper_sd[name]:>14.6g}")
    return "\n".join(lines)


def cmd_fit(cfg, out=None):
    out = out or sys.stdout
    data = load_dataset(cfg.data)
    spec = cfg.spec
    paths = output_paths(cfg.output)
    _ensure_parent(paths["summary"])
    try:
        res = run_chain(data, spec, cfg.chain_config(), b_max=cfg.b_max)
    except ChainAborted as exc:
        st = exc.state
        np.savez(paths["dump"], theta=st.theta, sigma2=st.sigma2, cycle=st.cycle,
                 hyper=np.array(hyper_names(spec)), seed=st.rng_seed)
        print(f"error: {exc}; state written to {paths['dump']}", file=sys.stderr)
        return 2
    write_summary(paths["summary"], res)
    write_trace(paths["trace"], res)
    np.savez(paths["samples"], theta=res.samples_theta, sigma2=res.samples_sigma2,
             cycles=res.sample_cycles)
    cfg.write(paths["config"])
    print(f"model {spec}: {cfg.cycles} cycles, burn-in {res.burn_in}, "
          f"{res.samples_theta.shape[0]} stored samples", file=out)
    if res.hyper_mean:
        print(format_hyper_table(res), file=out)
    print(f"mean acceptance {float(np.mean(res.acceptance)):.3f}", file=out)
    print(f"wrote {paths['summary']}, {paths['trace']}", file=out)
    return 0


def cmd_diagnose(cfg, out=None):
    out = out or sys.stdout
    paths = output_paths(cfg.output)
    if not os.path.exists(paths["samples"]):
        raise ConfigError(f"missing {paths['samples']}; run 'fit' first")
    summ = read_summary(paths["summary"])
    data = load_dataset(cfg.data)
    with np.load(paths["samples"]) as npz:
        st, ss = npz["theta"], npz["sigma2"]
    if st.shape[0] < 2:
        raise ConfigError(f"DIC needs at least 2 post burn-in samples, the fit stored "
                          f"{st.shape[0]}; run more cycles or lower the thinning")
    rep = compute_dic(st, ss, data.Y, data.design(summ.spec))
    text = rep.format()
    with open(paths["dic"], "w", encoding="ascii") as fh:
        fh.write(text)
    edges, counts = acceptance_histogram(summ.acceptance)
    with open(paths["acceptance"], "w", encoding="ascii") as fh:
        fh.write("lower\tupper\tvoxels\n")
        for lo, hi, c in zip(edges[:-1], edges[1:], counts):
            fh.write(f"{float(lo)!r}\t{float(hi)!r}\t{int(c)}\n")
    out.write(text)
    print(f"wrote {paths['dic']}, {paths['acceptance']}", file=out)
    return 0


def cmd_export(cfg, subdivisions=3, out=None):
    out = out or sys.stdout
    paths = output_paths(cfg.output)
    if not os.path.exists(paths["summary"]):
        raise ConfigError(f"missing {paths['summary']}; run 'fit' first")
    summ = read_summary(paths["summary"])
    prefix = f"{cfg.output}_maps"
    written = summary_maps(summ, prefix)
    if summ.spec is not None:
        written += export_profiles(summ.spec, summ.theta_mean[:, 1:], summ.coords,
                                   prefix, subdivisions)
    print(f"wrote {len(written)} files with prefix {prefix}", file=out)
    return 0


def main(argv=None):
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        if args.command is None:
            parser.print_help(sys.stderr)
            return 1
        logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                            format="%(levelname)s %(name)s: %(message)s")
        cfg = _load_config(args)
        if args.command == "simulate":
            return cmd_simulate(cfg)
        if args.command == "init":
            return cmd_init(cfg)
        if args.command == "fit":
            return cmd_fit(cfg)
        if args.command == "diagnose":
            return cmd_diagnose(cfg)
        return cmd_export(cfg, args.subdivisions)
    except _UsageError as exc:
        print(exc, file=sys.stderr)
        return 1
    except (ConfigError, ValueError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except FloatingPointError as exc:
        print(f"numerical error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
