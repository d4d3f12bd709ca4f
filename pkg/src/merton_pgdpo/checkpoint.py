"""Checkpoints and CSV output, all written atomically."""

from __future__ import annotations

import csv
import io
import json
import os
import tempfile
from pathlib import Path

import numpy as np
import torch

from .errors import CheckpointError
from .model import Domain, MarketParams, closed_form_policies
from .nn import AdamState, ClosedFormPolicy, Mlp, flat_params, set_flat_params

VERSION = 1
FORMAT = "merton-pgdpo-checkpoint"


def atomic_write(path, data: str | bytes) -> None:
    """Write to a temporary file in the target directory, then rename over ``path``."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    mode = "wb" if isinstance(data, bytes) else "w"
    fd, tmp = tempfile.mkstemp(prefix=f".{path.name}.", dir=path.parent)
    try:
        with os.fdopen(fd, mode) as fh:
            fh.write(data)
            fh.flush()
            os.fsync(fh.fileno())
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def _fmt(v) -> str:
    if isinstance(v, (int, np.integer)) and not isinstance(v, bool):
        return str(int(v))
    return "%.17g" % float(v)


def csv_text(header, rows) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    for row in rows:
        w.writerow([_fmt(v) for v in row])
    return buf.getvalue()


def write_csv(path, header, rows) -> None:
    atomic_write(path, csv_text(header, rows))


# --- networks ----------------------------------------------------------------

def net_record(net) -> dict:
    if isinstance(net, ClosedFormPolicy):
        return {"type": "closed_form", "head": net.head}
    return {"type": "mlp", "layer_sizes": net.layer_sizes, "head": net.head, "horizon": net.horizon,
            "slope": net.slope, "params": flat_params(net).tolist()}


def net_from_record(rec: dict, p: MarketParams):
    if rec["type"] == "closed_form":
        pi_cf, c_cf = closed_form_policies(p)
        return c_cf if rec["head"] == c_cf.head else pi_cf
    if rec["type"] != "mlp":
        raise CheckpointError(f"unknown network type {rec['type']!r}")
    net = Mlp(rec["layer_sizes"], rec["head"], rec["horizon"], rec["slope"])
    params = np.asarray(rec["params"], dtype=np.float64)
    if params.size != net.n_params():
        raise CheckpointError(f"expected {net.n_params()} parameters, found {params.size}")
    set_flat_params(net, params)
    return net


def _adam_record(st: AdamState) -> dict:
    return {"step": st.step, "beta1": st.beta1, "beta2": st.beta2, "eps": st.eps,
            "m": np.concatenate([m.numpy().ravel() for m in st.m]).tolist() if st.m else [],
            "v": np.concatenate([v.numpy().ravel() for v in st.v]).tolist() if st.v else []}


def _adam_from_record(rec: dict, params) -> AdamState:
    st = AdamState.zeros_like(params, beta1=rec["beta1"], beta2=rec["beta2"], eps=rec["eps"])
    st.step = int(rec["step"])
    for name in ("m", "v"):
        flat = np.asarray(rec[name], dtype=np.float64)
        i = 0
        for buf in getattr(st, name):
            n = buf.numel()
            if i + n > flat.size:
                raise CheckpointError(f"Adam {name} buffer too short")
            buf.copy_(torch.from_numpy(flat[i:i + n].reshape(buf.shape)))
            i += n
        if i != flat.size:
            raise CheckpointError(f"Adam {name} buffer has {flat.size} entries, expected {i}")
    return st


# --- whole-run checkpoints ----------------------------------------------------

def trainer_record(tr) -> dict:
    return {
        "format": FORMAT,
        "version": VERSION,
        "algo": tr.algo,
        "iteration": tr.iteration,
        "market": tr.p.to_dict(),
        "domain": tr.d.to_dict(),
        "train": tr.cfg.to_dict(),
        "pi_net": net_record(tr.pi_net),
        "c_net": net_record(tr.c_net),
        "adam_pi": _adam_record(tr.adam_pi),
        "adam_c": _adam_record(tr.adam_c),
        "history": tr.history,
        "timings": tr.timings,
        "elapsed": tr.elapsed,
        "failures": tr.failures,
    }


def save_trainer(path, tr) -> None:
    atomic_write(path, json.dumps(trainer_record(tr)))


def save_policies(path, pi_net, c_net, p: MarketParams, d: Domain, iteration: int = 0) -> None:
    """Standalone policy checkpoint (e.g. the closed-form policies for testing)."""
    rec = {"format": FORMAT, "version": VERSION, "algo": None, "iteration": iteration,
           "market": p.to_dict(), "domain": d.to_dict(),
           "pi_net": net_record(pi_net), "c_net": net_record(c_net)}
    atomic_write(path, json.dumps(rec))


def read_record(path) -> dict:
    path = Path(path)
    if not path.is_file():
        raise CheckpointError(f"checkpoint {path} does not exist")
    try:
        rec = json.loads(path.read_text())
    except (json.JSONDecodeError, UnicodeDecodeError) as e:
        raise CheckpointError(f"checkpoint {path} is corrupted: {e}") from e
    if not isinstance(rec, dict) or rec.get("format") != FORMAT:
        raise CheckpointError(f"{path} is not a policy checkpoint")
    if rec.get("version") != VERSION:
        raise CheckpointError(f"checkpoint version {rec.get('version')!r} is not supported "
                              f"(expected {VERSION})")
    return rec


def load_policies(path):
    """(pi_net, c_net, MarketParams, Domain, record) from a checkpoint."""
    rec = read_record(path)
    try:
        p = MarketParams(**rec["market"])
        d = Domain(**rec["domain"])
        return net_from_record(rec["pi_net"], p), net_from_record(rec["c_net"], p), p, d, rec
    except (KeyError, TypeError, ValueError) as e:
        raise CheckpointError(f"checkpoint {path} is malformed: {e}") from e


def load_trainer(path, cfg=None):
    """Restore a :class:`~merton_pgdpo.pgdpo.Trainer` to continue a run.

    ``cfg`` may override the stored training configuration (for instance a
    larger ``iters``); anything that changes the random streams or the
    architecture must match for the continuation to be meaningful.
    """
    from .pgdpo import TrainConfig, Trainer

    pi_net, c_net, p, d, rec = load_policies(path)
    if rec.get("algo") is None:
        raise CheckpointError(f"{path} holds policies only, not a training state")
    try:
        cfg = cfg or TrainConfig(**rec["train"])
        tr = Trainer(cfg, p, d, rec["algo"], pi_net=pi_net, c_net=c_net)
        tr.adam_pi = _adam_from_record(rec["adam_pi"], tr.pi_params)
        tr.adam_c = _adam_from_record(rec["adam_c"], tr.c_params)
        tr.iteration = int(rec["iteration"])
        tr.history = list(rec["history"])
        tr.timings = [tuple(t) for t in rec.get("timings", [])]
        tr.elapsed = float(rec.get("elapsed", 0.0))
        tr.failures = int(rec.get("failures", 0))
    except (KeyError, TypeError, ValueError) as e:
        raise CheckpointError(f"checkpoint {path} is malformed: {e}") from e
    return tr
