"""Command-line driver: ``discguide {train-score,train-disc,sample,eval,sweep}``.

Artifacts land in the output directory, chosen as ``--out`` over the config's
``out_dir`` over ``$DISCGUIDE_OUT`` over ``./runs``. Exit status is 0 on
success, 1 on runtime failures and 2 on usage errors.
"""
from __future__ import annotations

import argparse
import os
import sys
from dataclasses import replace
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from . import analytic_oracle as ao
from . import diagnostics as dg
from . import samplers as sm
from . import tiny_nets as tn
from .config import ConfigError, RunConfig, load_config, override, serialize_config

OUT_ENV = "DISCGUIDE_OUT"
SCORE_FILE, DISC_FILE = "score.params", "disc.params"

# seed offsets per pipeline stage, relative to the run seed
_FAKE_SEED, _SAMPLE_SEED, _EVAL_SEED = 2, 3, 4


class UsageError(Exception):
    pass


class _Run:
    def __init__(self, cfg: RunConfig, out: Path, quiet: bool):
        self.cfg, self.out, self.quiet = cfg, out, quiet
        self.spec = cfg.schedule()

    def log(self, msg: str) -> None:
        if not self.quiet:
            print(msg, file=sys.stderr)

    def path(self, name: str) -> Path:
        return self.out / name

    def analytic(self, what: str) -> ao.GaussianMixture:
        data = self.cfg.analytic_data()
        if data is None:
            raise ao.UnsupportedError(f"{what} needs a built-in analytic dataset, got {self.cfg.dataset!r}")
        return data


def _resolve_out(arg: Optional[str], cfg: RunConfig) -> Path:
    return Path(arg or cfg.out_dir or os.environ.get(OUT_ENV) or "runs")


def _load_net(path: Path, head: str) -> tn.NetParams:
    if not path.is_file():
        raise FileNotFoundError(f"missing artifact: {path}")
    params = tn.load_params(path)
    if params.head != head:
        raise tn.ParamsLoadError(f"{path}: expected a {head} network, found {params.head}")
    return params


def _save_net(path: Path, params: tn.NetParams) -> None:
    tn.save_params(path, params)
    if not tn.load_params(path).equals(params):
        raise tn.ParamsLoadError(f"{path}: written parameters do not reload identically")


def _score_fn(run: _Run, args) -> sm.ScoreFn:
    if args.oracle:
        return sm.oracle_score(run.analytic("--oracle"), run.spec, run.cfg.score_bias)
    params = _load_net(Path(args.score) if args.score else run.path(SCORE_FILE), "score")
    return sm.network_score(params, run.cfg.score_bias)


def _disc(run: _Run, args, required: bool):
    """(guidance_fn, probability_fn, ratio source) or Nones."""
    cfg = run.cfg
    if args.oracle:
        oracle = sm.biased_model_oracle(run.analytic("--oracle"), run.spec, cfg.score_bias)
        return oracle.guidance(), oracle.discriminator(), oracle
    path = Path(args.disc) if args.disc else run.path(DISC_FILE)
    if not path.is_file():
        if required:
            raise FileNotFoundError(f"missing artifact: {path}")
        return None, None, None
    params = _load_net(path, "disc")
    return (sm.discriminator_guidance(params, cfg.truncation), sm.disc_probability(params, cfg.truncation), params)


# -- commands ------------------------------------------------------------------------

def cmd_train_score(run: _Run, args) -> None:
    cfg = run.cfg
    data = cfg.data_source()
    run.log(f"training score network for {cfg.score_steps} steps")
    res = tn.train_score(cfg.score_train(), data, run.spec)
    _save_net(run.path(SCORE_FILE), res.params)
    tn.write_loss_csv(run.path("score_loss.csv"), res.losses)
    run.log(f"final loss {res.losses[-1]:.6g}" if len(res.losses) else "no steps taken")


def cmd_train_disc(run: _Run, args) -> None:
    cfg = run.cfg
    score_fn = _score_fn(run, args)
    dim = cfg.data_dim()
    run.log(f"generating {cfg.n_fake} fake samples")
    fake = sm.sample(cfg.sampler(seed_offset=_FAKE_SEED), score_fn, None, cfg.n_fake, run.spec, dim=dim).points
    ao.save_point_cloud(run.path("fake_samples.csv"), fake)
    run.log(f"training discriminator for {cfg.disc_steps} steps")
    res = tn.train_disc(cfg.disc_train(), cfg.data_source(), fake, run.spec)
    _save_net(run.path(DISC_FILE), res.params)
    tn.write_loss_csv(run.path("disc_loss.csv"), res.losses)


def cmd_sample(run: _Run, args) -> None:
    cfg = run.cfg
    if (args.guided or args.rejection) and not (args.oracle or args.disc or run.path(DISC_FILE).is_file()):
        raise UsageError("--guided and --rejection need a discriminator (--disc PATH) or --oracle")
    if args.trace and args.rejection:
        raise UsageError("--trace cannot be combined with --rejection")
    score_fn = _score_fn(run, args)
    guide, prob, ratio = _disc(run, args, required=args.guided or args.rejection)
    scfg = cfg.sampler("discriminator" if args.guided else "off", _SAMPLE_SEED)
    n = args.n or cfg.n_samples
    dim = cfg.data_dim()
    if args.rejection:
        res = sm.rejection_sample(scfg, score_fn, guide, prob, n, run.spec, dim=dim,
                                  threshold=cfg.threshold, truncation=cfg.truncation)
        ao.save_point_cloud(run.path("samples.csv"), res.batch.accepted_points()[:n])
        run.path("rejection.txt").write_text(
            f"alpha={res.alpha:.17g}\nattempted={res.attempted}\naccepted={res.accepted}\n")
        print(f"alpha={res.alpha:.6f} ({res.accepted}/{res.attempted})")
        return
    batch = sm.sample(scfg, score_fn, guide, n, run.spec, dim=dim, record=args.trace)
    ao.save_point_cloud(run.path("samples.csv"), batch.points)
    if args.trace:
        lr = dg.trajectory_log_ratios(batch, ratio, cfg.truncation) if ratio is not None else None
        sm.write_trajectories_csv(run.path("trajectories.csv"), batch, run.spec, lr)
    run.log(f"wrote {n} samples ({batch.nfe_used} NFE)")


def cmd_eval(run: _Run, args) -> None:
    cfg = run.cfg
    data = run.analytic("eval")
    score_fn = _score_fn(run, args)
    guide, _, ratio = _disc(run, args, required=True)
    base = cfg.sampler("off", _EVAL_SEED)
    report = dg.error_decomposition(run.spec, score_fn, base, data, n=cfg.n_eval, weighting=cfg.score_weighting)
    run.path("error_report.txt").write_text(report.to_text())

    dim = data.dim
    un = sm.sample(base, score_fn, None, cfg.n_eval, run.spec, dim=dim, record=True)
    gd = sm.sample(replace(base, guidance="discriminator"), score_fn, guide, cfg.n_eval, run.spec, dim=dim, record=True)
    real = data.sample(cfg.n_eval, np.random.default_rng([cfg.seed, _EVAL_SEED]))
    kw = dict(t_eps=cfg.t_eps, truncation=cfg.truncation)
    traces = [
        dg.data_forward_trace(real, un.traj_t, ratio, run.spec, seed=cfg.seed, **kw),
        dg.trace_log_ratio(un, ratio, run.spec, label="unguided", **kw),
        dg.trace_log_ratio(gd, ratio, run.spec, label="guided", **kw),
    ]
    dg.write_traces_csv(run.path("ratio_trace.csv"), traces)
    rows = [("unguided", dg.w1_to_data(un.points, data, seed=cfg.seed)),
            ("guided", dg.w1_to_data(gd.points, data, seed=cfg.seed))]
    with run.path("w1_summary.csv").open("w") as fh:
        fh.write("process,w1,trace_gap\n")
        for (label, w1), tr in zip(rows, traces[1:]):
            fh.write(f"{label},{w1:.17g},{dg.trace_gap(tr, traces[0]):.17g}\n")
    run.log(report.to_text().strip())


def cmd_sweep(run: _Run, args) -> None:
    cfg = run.cfg
    nfes = cfg.nfe_list
    if args.nfes is not None:
        try:
            nfes = tuple(int(v) for v in args.nfes.split(",") if v.strip())
        except ValueError:
            raise UsageError(f"--nfes: cannot parse {args.nfes!r}") from None
    if not nfes:
        raise UsageError("empty NFE list")
    if any(v < 1 for v in nfes):
        raise UsageError("NFE values must be >= 1")
    data = run.analytic("sweep")
    score_fn = _score_fn(run, args)
    guide, _, _ = _disc(run, args, required=True)
    rows = dg.nfe_sweep(run.spec, score_fn, guide, nfes, cfg.n_eval, cfg.seed + _SAMPLE_SEED, cfg.sampler(), data)
    dg.write_sweep_csv(run.path("nfe_sweep.csv"), rows)
    for r in rows:
        run.log(f"nfe={r.nfe} unguided={r.w1_unguided:.4f} guided={r.w1_guided:.4f}")


COMMANDS = {
    "train-score": cmd_train_score,
    "train-disc": cmd_train_disc,
    "sample": cmd_sample,
    "eval": cmd_eval,
    "sweep": cmd_sweep,
}


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", metavar="PATH", default=argparse.SUPPRESS, help="key=value config file")
    common.add_argument("--seed", type=int, default=argparse.SUPPRESS, help="overrides the config seed")
    common.add_argument("--out", metavar="DIR", default=argparse.SUPPRESS, help=f"output directory (default ${OUT_ENV} or ./runs)")
    common.add_argument("--quiet", action="store_true", default=argparse.SUPPRESS)

    nets = argparse.ArgumentParser(add_help=False)
    nets.add_argument("--score", metavar="PATH", help=f"score network (default OUT/{SCORE_FILE})")
    nets.add_argument("--oracle", action="store_true", help="use the analytic score and density ratio")

    parser = argparse.ArgumentParser(prog="discguide", parents=[common],
                                     description="Discriminator-guided diffusion sampling on toy data.")
    sub = parser.add_subparsers(dest="command", required=True)
    sub.add_parser("train-score", parents=[common], help="fit the score network")
    sub.add_parser("train-disc", parents=[common, nets], help="generate fakes and fit the discriminator")
    p = sub.add_parser("sample", parents=[common, nets], help="draw samples")
    p.add_argument("--disc", metavar="PATH", help=f"discriminator (default OUT/{DISC_FILE})")
    p.add_argument("--guided", action="store_true", help="apply discriminator guidance")
    p.add_argument("--rejection", action="store_true", help="keep samples with d >= threshold")
    p.add_argument("--trace", action="store_true", help="also write per-step trajectories")
    p.add_argument("--n", type=int, help="number of samples (default n_samples)")
    for name in ("eval", "sweep"):
        p = sub.add_parser(name, parents=[common, nets], help=f"{name} a trained pipeline")
        p.add_argument("--disc", metavar="PATH", help=f"discriminator (default OUT/{DISC_FILE})")
    p.add_argument("--nfes", help="comma-separated NFE list (default nfe_list)")
    return parser


def main(argv: Optional[Sequence[str]] = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    opts = vars(args)
    for key, default in (("config", None), ("seed", None), ("out", None), ("quiet", False), ("oracle", False),
                         ("score", None), ("disc", None)):
        opts.setdefault(key, default)
    if getattr(args, "n", None) is not None and args.n < 1:
        parser.error("--n must be >= 1")
    try:
        cfg = override(load_config(args.config), seed=args.seed)
    except (ConfigError, OSError) as exc:
        print(f"discguide: config error: {exc}", file=sys.stderr)
        return 2
    out = _resolve_out(args.out, cfg)
    run = _Run(cfg, out, args.quiet)
    try:
        out.mkdir(parents=True, exist_ok=True)
        COMMANDS[args.command](run, args)
        (out / f"{args.command}.config").write_text(serialize_config(cfg))
    except (UsageError, sm.SamplerUsageError) as exc:
        print(f"discguide {args.command}: usage error: {exc}", file=sys.stderr)
        return 2
    except (OSError, ValueError, RuntimeError) as exc:
        print(f"discguide {args.command}: error: {exc}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
