"""Command-line front end: ``merton-pgdpo {train,eval,dump-surface,gradcheck}``."""

from __future__ import annotations

import argparse
import dataclasses
import json
import logging
import os
import sys
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import tomli
import torch

from . import checkpoint as ckpt
from .errors import CheckpointError, ConfigError, PgdpoError
from .evaluation import (finite_diff_gradcheck, metrics_report, policy_surface, reference_objective,
                         unpack_params)
from .model import Domain, MarketParams, kappa_from_epsilon
from .pgdpo import ALGORITHMS, METRIC_COLUMNS, PGDPO, TrainConfig, Trainer
from .sim import PATH_DUMP_HEADER, path_rows

log = logging.getLogger("merton_pgdpo")

SURFACE_HEADER = ("t", "x", "c_learned", "c_exact", "pi_learned", "pi_exact")
MILESTONES = (1_000, 10_000, 50_000, 100_000)

_MARKET_KEYS = {"r", "mu", "sigma", "rho", "gamma", "kappa", "epsilon", "T"}
_DOMAIN_KEYS = {f.name for f in dataclasses.fields(Domain)}
_TRAIN_KEYS = {f.name for f in dataclasses.fields(TrainConfig)}
_RUN_KEYS = {"algo", "out", "seed"}


@dataclass
class RunConfig:
    market: MarketParams
    domain: Domain
    train: TrainConfig
    algo: str = PGDPO
    out: Path = Path("runs/default")
    resume: Path | None = None

    @property
    def seed(self) -> int:
        return self.train.seed


def _section(raw: dict, name: str, allowed: set) -> dict:
    sec = raw.get(name, {})
    if not isinstance(sec, dict):
        raise ConfigError(name, "must be a table")
    unknown = set(sec) - allowed
    if unknown:
        raise ConfigError(f"{name}.{sorted(unknown)[0]}", "unknown key")
    return dict(sec)


def parse_config(path=None, overrides: dict | None = None) -> RunConfig:
    """Merge defaults, an optional TOML file and flag overrides (flags win).

    ``overrides`` uses dotted keys, e.g. ``{"train.alpha_pi": 0.1}``.
    """
    raw: dict = {}
    if path is not None:
        path = Path(path)
        if not path.is_file():
            raise ConfigError("config", f"{path} does not exist")
        try:
            raw = tomli.loads(path.read_text())
        except tomli.TOMLDecodeError as e:
            raise ConfigError("config", f"{path}: {e}") from e
    unknown = set(raw) - {"market", "domain", "train", "run"}
    if unknown:
        raise ConfigError(sorted(unknown)[0], "unknown section")
    market = _section(raw, "market", _MARKET_KEYS)
    domain = _section(raw, "domain", _DOMAIN_KEYS)
    train = _section(raw, "train", _TRAIN_KEYS)
    run = _section(raw, "run", _RUN_KEYS)
    sections = {"market": market, "domain": domain, "train": train, "run": run}
    for key, value in (overrides or {}).items():
        if value is None:
            continue
        sec, _, name = key.partition(".")
        sections[sec][name] = value
        if sec == "market" and name in ("kappa", "epsilon"):
            sections["market"].pop("epsilon" if name == "kappa" else "kappa", None)

    if "kappa" in market and "epsilon" in market:
        raise ConfigError("market.kappa", "give kappa or epsilon, not both")
    gamma = float(market.get("gamma", 2.0))
    if "epsilon" in market:
        eps = float(market.pop("epsilon"))
        if eps <= 0:
            raise ConfigError("market.epsilon", "must be > 0")
        market["kappa"] = kappa_from_epsilon(eps, gamma)
    try:
        p = MarketParams(**{k: float(v) for k, v in market.items()})
    except ConfigError as e:
        raise ConfigError(f"market.{e.field}", str(e).split(": ", 1)[-1]) from None
    try:
        d = Domain(**{k: float(v) for k, v in domain.items()})
        d.check(p)
    except ConfigError as e:
        raise ConfigError(f"domain.{e.field}", str(e).split(": ", 1)[-1]) from None
    if "seed" in run:
        train.setdefault("seed", run["seed"])
    try:
        tc = TrainConfig(**train)
    except ConfigError as e:
        raise ConfigError(f"train.{e.field}", str(e).split(": ", 1)[-1]) from None
    except TypeError as e:
        raise ConfigError("train", str(e)) from None
    algo = run.get("algo", PGDPO)
    if algo not in ALGORITHMS:
        raise ConfigError("run.algo", f"must be one of {ALGORITHMS}")
    return RunConfig(p, d, tc, algo, Path(run.get("out", "runs/default")))


# --- train --------------------------------------------------------------------

class RunWriter:
    """Writes metrics, timings, path dumps and checkpoints for a training run."""

    def __init__(self, out: Path, cfg: TrainConfig):
        self.out = Path(out)
        self.cfg = cfg
        self.paths: list = []
        self.ckpts: list[Path] = []

    def metrics(self, tr: Trainer) -> None:
        rows = [[row[c] for c in METRIC_COLUMNS] for row in tr.history]
        ckpt.write_csv(self.out / "metrics.csv", METRIC_COLUMNS, rows)
        ckpt.write_csv(self.out / "timing.csv", ("iter", "wallclock_s"), tr.timings)

    def checkpoint(self, tr: Trainer) -> None:
        path = self.out / "checkpoints" / f"ckpt_{tr.iteration:08d}.json"
        ckpt.save_trainer(path, tr)
        self.ckpts.append(path)
        rolling = [c for c in self.ckpts if int(c.stem.split("_")[1]) not in MILESTONES]
        for old in rolling[:-self.cfg.keep_last]:
            old.unlink(missing_ok=True)
            self.ckpts.remove(old)

    def __call__(self, tr: Trainer, info) -> None:
        it = tr.iteration
        if self.cfg.dump_paths and info.batch is not None and self.cfg.is_metric_iter(it):
            self.paths.extend(path_rows(info.batch, info.iteration, self.cfg.dump_paths))
            ckpt.write_csv(self.out / "paths.csv", PATH_DUMP_HEADER, self.paths)
        if self.cfg.is_metric_iter(it):
            self.metrics(tr)
        if self.cfg.checkpoint_every and it % self.cfg.checkpoint_every == 0:
            self.checkpoint(tr)
        elif it in MILESTONES:
            self.checkpoint(tr)


def write_surface(path, pi_net, c_net, p, d, resolution=(101, 101)) -> None:
    cols = policy_surface(pi_net, c_net, p, d, resolution)
    ckpt.write_csv(path, SURFACE_HEADER, zip(*cols))


def cmd_train(rc: RunConfig) -> int:
    out = Path(rc.out)
    if rc.resume is not None:
        stored = ckpt.read_record(rc.resume)
        cfg = TrainConfig(**{**stored["train"], "iters": rc.train.iters,
                             "dump_paths": rc.train.dump_paths})
        tr = ckpt.load_trainer(rc.resume, cfg)
    else:
        tr = Trainer(rc.train, rc.market, rc.domain, rc.algo)
    out.mkdir(parents=True, exist_ok=True)
    writer = RunWriter(out, tr.cfg)
    tr.run(on_step=writer)
    writer.metrics(tr)
    ckpt.save_trainer(out / "final.json", tr)
    write_surface(out / "surface.csv", tr.pi_net, tr.c_net, tr.p, tr.d, tr.cfg.eval_grid)
    log.info("finished %d iterations in %s", tr.iteration, out)
    return 0


# --- eval / dump-surface ------------------------------------------------------

def cmd_eval(checkpoint_path, rc: RunConfig) -> dict:
    """Metrics for a checkpoint, plus ``report.json`` and ``surface.csv`` in ``rc.out``."""
    pi_net, c_net, p, d, rec = ckpt.load_policies(checkpoint_path)
    rep = metrics_report(pi_net, c_net, p, d, int(rec.get("iteration", 0)), rc.train.seed,
                         n_rollouts=rc.train.eval_rollouts, N=rc.train.steps, grid=rc.train.eval_grid)
    out = Path(rc.out)
    write_surface(out / "surface.csv", pi_net, c_net, p, d, rc.train.eval_grid)
    ckpt.atomic_write(out / "report.json", json.dumps(rep.to_dict(), indent=2) + "\n")
    return rep.to_dict()


def cmd_dump_surface(checkpoint_path, rc: RunConfig) -> Path:
    pi_net, c_net, p, d, _ = ckpt.load_policies(checkpoint_path)
    path = Path(rc.out) / "surface.csv"
    write_surface(path, pi_net, c_net, p, d, rc.train.eval_grid)
    return path


# --- gradcheck ----------------------------------------------------------------

def tiny_gradcheck(M: int = 4, N: int = 10, width: int = 8, seed: int = 0, h: float = 1e-6,
                   p: MarketParams | None = None, d: Domain | None = None) -> float:
    """Max relative error of the BPTT gradient of J_hat on a small frozen-noise instance.

    Checks all parameters of both networks plus the initial wealths.  The
    central differences use the extended-precision reference forward pass.
    """
    from .nn import CONSUME, INVEST, flat_params, mlp_init, set_flat_params
    from .rng import KeyedRng
    from .sim import draw_for_iteration, simulate

    p = p or MarketParams()
    d = d or Domain()
    pi_net = mlp_init([2, width, width, 1], INVEST, seed * 2 + 1, p.T)
    c_net = mlp_init([2, width, width, 1], CONSUME, seed * 2 + 2, p.T)
    draw = draw_for_iteration(KeyedRng(seed), 0, d, M, N, p)
    n_pi = pi_net.n_params()
    n_c = c_net.n_params()
    point = np.concatenate([flat_params(pi_net), flat_params(c_net), draw.x0])

    def load(vec):
        set_flat_params(pi_net, vec[:n_pi])
        set_flat_params(c_net, vec[n_pi:n_pi + n_c])
        return vec[n_pi + n_c:]

    def f(vec):
        pi_layers = unpack_params(vec[:n_pi], pi_net.layer_sizes)
        c_layers = unpack_params(vec[n_pi:n_pi + n_c], c_net.layer_sizes)
        return reference_objective(pi_layers, c_layers, draw, p, x0=vec[n_pi + n_c:])

    def g(vec):
        x0 = torch.tensor(load(vec), requires_grad=True)
        batch = simulate(pi_net, c_net, draw, p, x0=x0)
        grads = torch.autograd.grad(batch.J_hat, list(pi_net.parameters()) + list(c_net.parameters()) + [x0])
        return np.concatenate([q.reshape(-1).numpy() for q in grads])

    grad = g(point)
    return finite_diff_gradcheck(f, point, h=h, grad=grad, max_coords=50, seed=seed)


# --- entry point ----------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", type=Path, help="TOML run configuration")
    common.add_argument("--algo", choices=ALGORITHMS)
    common.add_argument("--iters", type=int)
    common.add_argument("--batch", type=int, help="paths per iteration (M)")
    common.add_argument("--steps", type=int, help="Euler steps per path (N)")
    common.add_argument("--lr-pi", type=float)
    common.add_argument("--lr-c", type=float)
    common.add_argument("--alpha-c", type=float)
    common.add_argument("--alpha-pi", type=float)
    common.add_argument("--seed", type=int)
    common.add_argument("--hidden", type=lambda s: tuple(int(v) for v in s.split(",")),
                        help="hidden widths, e.g. 200,200")
    common.add_argument("--metric-every", type=int)
    common.add_argument("--checkpoint-every", type=int)
    common.add_argument("--eval-rollouts", type=int)
    common.add_argument("--out", type=Path)
    common.add_argument("-v", "--verbose", action="store_true")

    ap = argparse.ArgumentParser(prog="merton-pgdpo", description=__doc__)
    sub = ap.add_subparsers(dest="command", required=True)
    tr = sub.add_parser("train", parents=[common], help="run PG-DPO or PG-DPO-Reg")
    tr.add_argument("--resume", type=Path, help="checkpoint to continue from")
    tr.add_argument("--dump-paths", type=int, nargs="?", const=16, default=None,
                    help="write the first K simulated paths at each metric iteration")
    for name, helptext in (("eval", "metrics and surface for a checkpoint"),
                           ("dump-surface", "policy surface CSV for a checkpoint")):
        sp = sub.add_parser(name, parents=[common], help=helptext)
        sp.add_argument("checkpoint", type=Path)
    gc = sub.add_parser("gradcheck", parents=[common], help="finite-difference check of BPTT")
    gc.add_argument("--h", type=float, default=1e-6)
    gc.add_argument("--width", type=int, default=8)
    gc.add_argument("--tol", type=float, default=1e-5)
    return ap


def _overrides(args) -> dict:
    g = lambda name: getattr(args, name, None)  # noqa: E731
    return {
        "run.algo": g("algo"), "run.out": None if g("out") is None else str(g("out")),
        "train.iters": g("iters"), "train.batch": g("batch"), "train.steps": g("steps"),
        "train.lr_pi": g("lr_pi"), "train.lr_c": g("lr_c"), "train.alpha_c": g("alpha_c"),
        "train.alpha_pi": g("alpha_pi"), "train.seed": g("seed"), "train.hidden": g("hidden"),
        "train.metric_every": g("metric_every"), "train.checkpoint_every": g("checkpoint_every"),
        "train.eval_rollouts": g("eval_rollouts"), "train.dump_paths": g("dump_paths"),
    }


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(asctime)s %(levelname)s %(message)s")
    threads = os.environ.get("PGDPO_THREADS")
    if threads:
        torch.set_num_threads(max(1, int(threads)))
    try:
        rc = parse_config(args.config, _overrides(args))
        if args.command == "train":
            rc.resume = args.resume
            return cmd_train(rc)
        if args.command == "eval":
            print(json.dumps(cmd_eval(args.checkpoint, rc), indent=2))
            return 0
        if args.command == "dump-surface":
            print(cmd_dump_surface(args.checkpoint, rc))
            return 0
        if args.command == "gradcheck":
            err = tiny_gradcheck(width=args.width, seed=rc.seed, h=args.h, p=rc.market, d=rc.domain)
            print(f"max relative error {err:.3e} (tolerance {args.tol:.0e})")
            return 0 if err < args.tol else 1
    except (ConfigError, CheckpointError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 2
    except PgdpoError as e:
        print(f"error: {e}", file=sys.stderr)
        return 3
    return 1


if __name__ == "__main__":
    sys.exit(main())
