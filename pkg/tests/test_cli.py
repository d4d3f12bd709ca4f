import json
import os
import subprocess
import sys

import numpy as np
import pytest

from merton_pgdpo import checkpoint as ckpt
from merton_pgdpo.cli import main, parse_config
from merton_pgdpo.errors import CheckpointError, ConfigError
from merton_pgdpo.model import Domain, MarketParams, closed_form_policies
from merton_pgdpo.nn import flat_params

TINY = ["--batch", "32", "--steps", "8", "--hidden", "8,8", "--eval-rollouts", "20"]


def write(path, text):
    path.write_text(text)
    return path


# --- configuration ----------------------------------------------------------------------

def test_empty_config_is_default_instance():
    rc = parse_config()
    assert rc.market == MarketParams()
    assert rc.market.kappa == pytest.approx(0.01, rel=1e-15)
    assert rc.domain == Domain()
    assert rc.train.lr_pi == 1e-3 and rc.train.lr_c == 1e-5
    assert (rc.train.alpha_c, rc.train.alpha_pi) == (1e-3, 1e-1)
    assert rc.train.iters == 100_000 and rc.train.batch == 10_000 and rc.train.steps == 100
    assert rc.algo == "pgdpo"


def test_gamma_one_is_rejected(tmp_path):
    cfg = write(tmp_path / "c.toml", "[market]\ngamma = 1.0\n")
    with pytest.raises(ConfigError) as err:
        parse_config(cfg)
    assert err.value.field == "market.gamma"


def test_flag_beats_file(tmp_path):
    cfg = write(tmp_path / "c.toml", "[train]\nalpha_pi = 0.0\niters = 7\n")
    rc = parse_config(cfg, {"train.alpha_pi": 0.1})
    assert rc.train.alpha_pi == 0.1 and rc.train.iters == 7


def test_epsilon_converted_with_gamma(tmp_path):
    cfg = write(tmp_path / "c.toml", "[market]\ngamma = 3.0\nepsilon = 0.2\n")
    assert parse_config(cfg).market.kappa == pytest.approx(0.2**3, rel=1e-14)


@pytest.mark.parametrize("text, field", [
    ("[market]\nsigma = -0.1\n", "market.sigma"),
    ("[market]\nbeta = 1\n", "market.beta"),
    ("[domain]\nx_min = 0.0\n", "domain.x_min"),
    ("[train]\nbatch = 0\n", "train.batch"),
    ("[run]\nalgo = \"sgd\"\n", "run.algo"),
    ("[extra]\na = 1\n", "extra"),
    ("[market]\nkappa = 0.01\nepsilon = 0.1\n", "market.kappa"),
])
def test_config_errors_name_the_field(tmp_path, text, field):
    with pytest.raises(ConfigError) as err:
        parse_config(write(tmp_path / "c.toml", text))
    assert err.value.field == field


def test_missing_config_file(tmp_path):
    assert main(["train", "--config", str(tmp_path / "nope.toml"), "--out", str(tmp_path / "o")]) == 2
    assert not (tmp_path / "o").exists()


# --- training runs ------------------------------------------------------------------------

def run_train(out, *extra):
    return main(["train", *TINY, "--out", str(out), *extra])


def test_smoke_run_writes_outputs(tmp_path):
    assert run_train(tmp_path / "r", "--iters", "10", "--metric-every", "5", "--checkpoint-every", "5") == 0
    lines = (tmp_path / "r" / "metrics.csv").read_text().splitlines()
    assert lines[0] == "iter,relmse_c,relmse_pi,empirical_utility,penalty_mean,excluded_frac"
    assert [line.split(",")[0] for line in lines[1:]] == ["5", "10"]
    surface = (tmp_path / "r" / "surface.csv").read_text().splitlines()
    assert surface[0] == "t,x,c_learned,c_exact,pi_learned,pi_exact" and len(surface) == 1 + 101 * 101
    assert (tmp_path / "r" / "final.json").exists()
    assert (tmp_path / "r" / "timing.csv").read_text().startswith("iter,wallclock_s\n")


def test_same_seed_byte_identical_metrics(tmp_path):
    for name in ("a", "b"):
        assert run_train(tmp_path / name, "--iters", "6", "--metric-every", "3", "--algo", "pgdpo-reg") == 0
    a = (tmp_path / "a" / "metrics.csv").read_bytes()
    assert a == (tmp_path / "b" / "metrics.csv").read_bytes()
    run_train(tmp_path / "c", "--iters", "6", "--metric-every", "3", "--algo", "pgdpo-reg", "--seed", "1")
    assert a != (tmp_path / "c" / "metrics.csv").read_bytes()


def test_thread_count_does_not_change_metrics(tmp_path):
    outs = []
    for threads in ("1", "3"):
        out = tmp_path / f"t{threads}"
        env = dict(os.environ, PGDPO_THREADS=threads)
        subprocess.run([sys.executable, "-m", "merton_pgdpo.cli", "train", *TINY, "--batch", "300",
                        "--iters", "4", "--metric-every", "2", "--out", str(out)], check=True, env=env)
        outs.append((out / "metrics.csv").read_bytes())
    assert outs[0] == outs[1]


def test_resume_equals_uninterrupted(tmp_path):
    common = ["--iters", "10", "--metric-every", "2", "--checkpoint-every", "5", "--algo", "pgdpo-reg"]
    assert run_train(tmp_path / "whole", *common) == 0
    assert run_train(tmp_path / "half", *TINY, "--iters", "5", "--metric-every", "2",
                     "--checkpoint-every", "5", "--algo", "pgdpo-reg") == 0
    resume = tmp_path / "half" / "checkpoints" / "ckpt_00000005.json"
    assert main(["train", "--iters", "10", "--resume", str(resume), "--out", str(tmp_path / "rest")]) == 0
    assert ((tmp_path / "whole" / "metrics.csv").read_bytes()
            == (tmp_path / "rest" / "metrics.csv").read_bytes())
    a = ckpt.load_policies(tmp_path / "whole" / "final.json")
    b = ckpt.load_policies(tmp_path / "rest" / "final.json")
    assert np.array_equal(flat_params(a[0]), flat_params(b[0]))
    assert np.array_equal(flat_params(a[1]), flat_params(b[1]))


def test_checkpoint_retention(tmp_path):
    assert run_train(tmp_path / "r", "--iters", "12", "--checkpoint-every", "2") == 0
    names = sorted(p.name for p in (tmp_path / "r" / "checkpoints").iterdir())
    assert names == ["ckpt_00000008.json", "ckpt_00000010.json", "ckpt_00000012.json"]


def test_path_dump(tmp_path):
    assert run_train(tmp_path / "r", "--iters", "4", "--metric-every", "2", "--dump-paths", "3") == 0
    rows = (tmp_path / "r" / "paths.csv").read_text().splitlines()
    assert rows[0] == "iter,path,k,t,x,pi,c"
    assert len(rows) == 1 + 2 * 3 * 9


# --- evaluation commands --------------------------------------------------------------------

def oracle_checkpoint(path):
    p, d = MarketParams(), Domain()
    pi, c = closed_form_policies(p)
    ckpt.save_policies(path, pi, c, p, d)
    return path


def test_eval_of_closed_form_checkpoint(tmp_path, capsys):
    path = oracle_checkpoint(tmp_path / "oracle.json")
    assert main(["eval", str(path), "--out", str(tmp_path / "ev"), "--eval-rollouts", "50", "--steps", "20"]) == 0
    rep = json.loads((tmp_path / "ev" / "report.json").read_text())
    assert rep["relmse_c"] == 0.0 and rep["relmse_pi"] == 0.0
    assert json.loads(capsys.readouterr().out)["n_rollouts"] == 50
    assert (tmp_path / "ev" / "surface.csv").exists()


def test_eval_missing_checkpoint(tmp_path):
    out = tmp_path / "ev"
    assert main(["eval", str(tmp_path / "missing.json"), "--out", str(out)]) != 0
    assert not out.exists()


def test_corrupted_and_mismatched_checkpoints(tmp_path):
    bad = write(tmp_path / "bad.json", '{"format": "merton-pgdpo-che')
    with pytest.raises(CheckpointError):
        ckpt.load_policies(bad)
    rec = json.loads(oracle_checkpoint(tmp_path / "o.json").read_text())
    rec["version"] = 99
    old = write(tmp_path / "old.json", json.dumps(rec))
    with pytest.raises(CheckpointError, match="version"):
        ckpt.load_policies(old)
    assert main(["eval", str(old), "--out", str(tmp_path / "ev")]) != 0
    assert not (tmp_path / "ev").exists()


def test_policy_only_checkpoint_cannot_resume(tmp_path):
    with pytest.raises(CheckpointError):
        ckpt.load_trainer(oracle_checkpoint(tmp_path / "o.json"))


def test_dump_surface(tmp_path, capsys):
    path = oracle_checkpoint(tmp_path / "o.json")
    assert main(["dump-surface", str(path), "--out", str(tmp_path / "s")]) == 0
    lines = (tmp_path / "s" / "surface.csv").read_text().splitlines()
    assert len(lines) == 1 + 101 * 101
    t, x, c_l, c_e, p_l, p_e = map(float, lines[1].split(","))
    assert (t, x) == (0.0, 0.1) and c_l == c_e and p_l == p_e == 1.125


def test_gradcheck_command(capsys):
    assert main(["gradcheck"]) == 0
    assert "max relative error" in capsys.readouterr().out


# --- atomic output ---------------------------------------------------------------------------

def test_atomic_write_leaves_old_file_on_failure(tmp_path, monkeypatch):
    target = tmp_path / "m.csv"
    ckpt.write_csv(target, ("a",), [(1,)])

    def boom(*a, **k):
        raise OSError("disk full")

    monkeypatch.setattr(os, "replace", boom)
    with pytest.raises(OSError):
        ckpt.write_csv(target, ("a",), [(2,), (3,)])
    assert target.read_text() == "a\n1\n"
    assert [p.name for p in tmp_path.iterdir()] == ["m.csv"]


def test_csv_full_precision(tmp_path):
    text = ckpt.csv_text(("i", "v"), [(3, 0.1), (4, 1 / 3)])
    assert text == "i,v\n3,0.10000000000000001\n4,0.33333333333333331\n"
    assert float(text.splitlines()[2].split(",")[1]) == 1 / 3


def test_full_scale_recipe_is_default_instance():
    from pathlib import Path
    rc = parse_config(Path(__file__).parents[1] / "configs" / "full_scale.toml")
    assert rc.market == MarketParams() and rc.domain == Domain()
    assert rc.algo == "pgdpo-reg" and rc.train.iters == 100_000 and rc.train.hidden == (200, 200)
