import csv
import os

import numpy as np
import pytest

from robustbf import cli
from robustbf import experiments as ex
from robustbf import mbmaml as mm
from robustbf.config import ConfigError, ExperimentConfig, config_hash, dump_config, load_config


def tiny_cfg(kind="snr_sweep", **exp):
    cfg = ExperimentConfig()
    cfg.system.M_t, cfg.system.K = 4, 2
    cfg.net.hidden = [8, 8, 8]
    cfg.net.rank = 2
    cfg.net.delta = 0.25
    cfg.meta.M, cfg.meta.B, cfg.meta.batches_per_epoch = 2, 2, 1
    cfg.meta.epochs, cfg.meta.N_i, cfg.meta.val_tasks = 2, 2, 2
    cfg.meta.T_wmmse = cfg.adapt.T_wmmse = 3
    cfg.adapt.N_i = 2
    cfg.sampling.trials = 2
    cfg.channel.snr_list = [0.0, 20.0]
    cfg.channel.gamma_list = [-5.0, 5.0]
    cfg.experiment.kind = kind
    cfg.experiment.swmmse_iters = 20
    cfg.experiment.wmmse_iters = 10
    for k, v in exp.items():
        setattr(cfg.experiment, k, v)
    cfg.validate()
    return cfg


def strip_runtime(path):
    lines = open(path).read().splitlines()
    return [ln.rsplit(",", 1)[0] for ln in lines]


# ---------------------------------------------------------------------------
# seeds
# ---------------------------------------------------------------------------

def test_trial_seeds_are_prefix_stable():
    a = [ex.trial_seed(7, 1, t) for t in range(5)]
    b = [ex.trial_seed(7, 1, t) for t in range(50)]
    assert a == b[:5]
    assert len(set(b)) == 50
    assert ex.trial_seed(7, 0, 0) != ex.trial_seed(7, 1, 0) != ex.trial_seed(8, 1, 0)


def test_more_trials_keep_earlier_rows(tmp_path):
    cfg = tiny_cfg(methods=["wmmse", "robust_wmmse_sample"])
    short = ex.run(cfg, out_dir=tmp_path / "a")
    cfg.sampling.trials = 4
    long = ex.run(cfg, out_dir=tmp_path / "b")
    keep = {(r.sweep_index, r.method, r.trial): r.wsr_true for r in long}
    for r in short:
        assert keep[(r.sweep_index, r.method, r.trial)] == r.wsr_true


# ---------------------------------------------------------------------------
# run
# ---------------------------------------------------------------------------

def test_snr_sweep_shape_and_header(tmp_path):
    cfg = tiny_cfg(train_first=True)
    rows = ex.run(cfg, out_dir=tmp_path)
    assert len(rows) == 5 * 2 * 2
    with open(tmp_path / "results.csv", newline="") as fh:
        lines = fh.read().split("\n")
    assert lines[0] == f"# robustbf 0.1.0 config_hash={config_hash(cfg)}"
    assert lines[1] == ",".join(ex.RESULT_COLUMNS)
    assert lines[-1] == "" and "\r" not in "".join(lines)
    body = list(csv.reader(lines[2:-1]))
    seen = {(float(r[0]), r[1], int(r[2])) for r in body}
    assert len(seen) == 20
    assert {r[1] for r in body} == set(cfg.experiment.methods)
    assert all(np.isfinite(float(r[3])) for r in body)
    assert (tmp_path / "config.yaml").exists()


def test_gamma_sweep_uses_gamma_list(tmp_path):
    cfg = tiny_cfg("gamma_sweep", methods=["wmmse"])
    rows = ex.run(cfg, out_dir=tmp_path)
    assert sorted({r.sweep_value for r in rows}) == [-5.0, 5.0]


def test_trials_one_twice_identical_bytes(tmp_path):
    cfg = tiny_cfg(train_first=True)
    cfg.sampling.trials = 1
    ex.run(cfg, out_dir=tmp_path / "a")
    ex.run(cfg, out_dir=tmp_path / "b")
    assert strip_runtime(tmp_path / "a" / "results.csv") == strip_runtime(tmp_path / "b" / "results.csv")


def test_workers_do_not_change_results(tmp_path):
    cfg = tiny_cfg(methods=["wmmse", "swmmse", "robust_wmmse_perfect"])
    ex.run(cfg, out_dir=tmp_path / "a", workers=1)
    ex.run(cfg, out_dir=tmp_path / "b", workers=2)
    assert strip_runtime(tmp_path / "a" / "results.csv") == strip_runtime(tmp_path / "b" / "results.csv")


def test_config_echo_reproduces_run(tmp_path):
    cfg = tiny_cfg(methods=["wmmse", "robust_wmmse_sample"])
    ex.run(cfg, out_dir=tmp_path / "a")
    echoed = load_config(tmp_path / "a" / "config.yaml")
    assert echoed == cfg and config_hash(echoed) == config_hash(cfg)
    ex.run(echoed, out_dir=tmp_path / "b")
    assert strip_runtime(tmp_path / "a" / "results.csv") == strip_runtime(tmp_path / "b" / "results.csv")


def test_learned_methods_need_a_bank(tmp_path):
    cfg = tiny_cfg()
    with pytest.raises(ex.MissingBankError):
        ex.run(cfg, out_dir=tmp_path)
    with pytest.raises(ex.MissingBankError):
        ex.run(cfg, out_dir=tmp_path, bank_path=str(tmp_path / "nope.txt"))


def test_ablation_three_methods(tmp_path):
    cfg = tiny_cfg("ablation_hybrid", train_first=True)
    rows = ex.run(cfg, out_dir=tmp_path)
    assert [r.method for r in rows[:6]] == ["offline_only"] * 2 + ["online_only"] * 2 + ["hybrid"] * 2
    assert {r.sweep_value for r in rows} == {2.0}


def test_convergence_rows_per_step(tmp_path):
    cfg = tiny_cfg("convergence", train_first=True)
    rows = ex.run(cfg, out_dir=tmp_path)
    assert len(rows) == 2 * (cfg.adapt.N_i + 1)
    assert sorted({r.sweep_value for r in rows}) == [0.0, 1.0, 2.0]


@pytest.mark.parametrize("kind,values", [("salr_delta", [0.0, 0.25]), ("salr_rank", [1, 2]),
                                         ("num_bases", [1, 2]), ("ood", [1, 2])])
def test_bank_sweeps(tmp_path, kind, values):
    cfg = tiny_cfg(kind, delta_list=[0.0, 0.25], rank_list=[1, 2], M_list=[1, 2])
    cfg.meta.epochs = 1
    rows = ex.run(cfg, out_dir=tmp_path)
    assert sorted({r.sweep_value for r in rows}) == [float(v) for v in values]
    banks = os.listdir(tmp_path / "banks")
    assert len(banks) == 2
    if kind == "ood":
        assert {r.method for r in rows} == {"id", "ood"}


def test_shared_bank_is_reused(tmp_path):
    cfg = tiny_cfg("ablation_hybrid", train_first=True)
    ex.run(cfg, out_dir=tmp_path)
    d = ex.bank_dir(cfg, tmp_path)
    stamp = os.path.getmtime(os.path.join(d, "bank.txt"))
    cfg2 = tiny_cfg("convergence", train_first=True)
    assert ex.bank_dir(cfg2, tmp_path) == d
    ex.run(cfg2, out_dir=tmp_path)
    assert os.path.getmtime(os.path.join(d, "bank.txt")) >= stamp
    log = mm.read_log(os.path.join(d, "train_log.csv"))
    assert len(log) == cfg.meta.epochs


def test_aborted_trials_are_logged_and_skipped(tmp_path, monkeypatch):
    cfg = tiny_cfg(methods=["wmmse", "robust_wmmse_sample"])
    real = ex._method_V

    def flaky(method, task, *a):
        if method == "robust_wmmse_sample":
            raise FloatingPointError("boom")
        return real(method, task, *a)

    monkeypatch.setattr(ex, "_method_V", flaky)
    rows = ex.run(cfg, out_dir=tmp_path)
    assert {r.method for r in rows} == {"wmmse"} and len(rows) == 4
    assert (tmp_path / "aborted.log").read_text().count("boom") == 4


# ---------------------------------------------------------------------------
# train
# ---------------------------------------------------------------------------

def test_zero_epochs_bank_equals_init(tmp_path):
    cfg = tiny_cfg()
    cfg.meta.epochs = 0
    ex.train(cfg, tmp_path)
    a = mm.MetaBank.load(tmp_path / "bank.txt")
    b = mm.MetaBank.load(tmp_path / "bank_init.txt")
    for x, y in zip(a.bases, b.bases):
        assert np.array_equal(x.data, y.data)
    assert mm.read_log(tmp_path / "train_log.csv") == []


def test_log_has_one_row_per_epoch(tmp_path):
    cfg = tiny_cfg()
    cfg.meta.epochs = 3
    ex.train(cfg, tmp_path)
    rows = mm.read_log(tmp_path / "train_log.csv")
    assert [r["epoch"] for r in rows] == [1, 2, 3]
    head = open(tmp_path / "train_log.csv").readline()
    assert head.startswith("# robustbf 0.1.0 config_hash=")
    assert sorted(os.listdir(tmp_path / "checkpoints")) == [f"bank_epoch{e}.txt" for e in (1, 2, 3)]


@pytest.mark.parametrize("opt", ["sgd", "adam"])
def test_resume_equals_uninterrupted(tmp_path, opt):
    cfg = tiny_cfg()
    cfg.meta.meta_optimizer = opt
    cfg.meta.epochs = 3
    ex.train(cfg, tmp_path / "full")
    cfg.meta.epochs = 2
    ex.train(cfg, tmp_path / "part")
    cfg.meta.epochs = 3
    ex.train(cfg, tmp_path / "part")
    a = mm.MetaBank.load(tmp_path / "full" / "bank.txt")
    b = mm.MetaBank.load(tmp_path / "part" / "bank.txt")
    for x, y in zip(a.bases, b.bases):
        np.testing.assert_allclose(y.data, x.data, rtol=0, atol=1e-10)
    assert len(mm.read_log(tmp_path / "part" / "train_log.csv")) == 3


def test_no_resume_retrains(tmp_path):
    cfg = tiny_cfg()
    cfg.meta.epochs = 1
    ex.train(cfg, tmp_path)
    first = mm.MetaBank.load(tmp_path / "bank.txt").bases[0].data
    ex.train(cfg, tmp_path, resume=False)
    assert np.array_equal(mm.MetaBank.load(tmp_path / "bank.txt").bases[0].data, first)


# ---------------------------------------------------------------------------
# report
# ---------------------------------------------------------------------------

HEADER = "sweep_value,method,trial,wsr_true,runtime_ms\n"


def _table(tmp_path, body):
    p = tmp_path / "t.csv"
    p.write_text("# robustbf 0.1.0 config_hash=x\n" + HEADER + body)
    return p


def test_report_single_row(tmp_path):
    s = ex.report(_table(tmp_path, "0.0,wmmse,0,4.5,1.0\n"))
    assert s == [{"sweep_value": 0.0, "method": "wmmse", "n": 1, "mean": 4.5, "std": 0.0}]


def test_report_two_rows(tmp_path):
    s = ex.report(_table(tmp_path, "0.0,a,0,1.0,1\n0.0,a,1,3.0,1\n"))
    # sample standard deviation (n - 1 denominator)
    assert s[0]["mean"] == 2.0 and s[0]["std"] == 2.0 ** 0.5 and s[0]["n"] == 2


def test_report_matches_scripted_aggregation(tmp_path):
    cfg = tiny_cfg(methods=["wmmse", "robust_wmmse_sample", "robust_wmmse_perfect"])
    cfg.sampling.trials = 3
    ex.run(cfg, out_dir=tmp_path)
    path = tmp_path / "results.csv"
    summary = ex.report(path, tmp_path / "summary.csv")
    groups = {}
    with open(path) as fh:
        for row in csv.DictReader(ln for ln in fh if not ln.startswith("#")):
            groups.setdefault((float(row["sweep_value"]), row["method"]), []).append(float(row["wsr_true"]))
    assert len(summary) == len(groups) == 6
    for s in summary:
        vals = groups[(s["sweep_value"], s["method"])]
        n = len(vals)
        mean = sum(vals) / n
        std = (sum((v - mean) ** 2 for v in vals) / (n - 1)) ** 0.5
        assert s["n"] == n
        assert s["mean"] == pytest.approx(mean, rel=1e-14)
        assert s["std"] == pytest.approx(std, rel=1e-12, abs=1e-15)
    written = list(csv.DictReader(open(tmp_path / "summary.csv")))
    assert [w["method"] for w in written] == [s["method"] for s in summary]


@pytest.mark.parametrize("body,line", [
    ("0.0,a,0,1.0,1\n0.0,a,x,2.0,1\n", 4),
    ("0.0,a,0,1.0,1\n0.0,a,1,2.0\n", 4),
    ("0.0,a,0,nan,1\n", 3),
    ("0.0,,0,1.0,1\n", 3),
])
def test_report_malformed_line_number(tmp_path, body, line):
    with pytest.raises(ex.ReportError, match=f"line {line}:"):
        ex.report(_table(tmp_path, body))


def test_report_missing_header(tmp_path):
    p = tmp_path / "t.csv"
    p.write_text("0.0,a,0,1.0,1\n")
    with pytest.raises(ex.ReportError, match="line 1"):
        ex.report(p)


# ---------------------------------------------------------------------------
# config
# ---------------------------------------------------------------------------

def test_defaults():
    cfg = ExperimentConfig()
    assert (cfg.system.M_t, cfg.system.K, cfg.sampling.N, cfg.sampling.trials) == (16, 4, 2, 100)
    assert cfg.adapt.alpha == 0.01 and cfg.adapt.N_i == 5 and cfg.adapt.eta == 0.1
    assert cfg.meta.M == 8 and cfg.meta.beta_meta == 0.001 and cfg.meta.lambda_reg == 0.001
    assert cfg.meta.B == 20 and cfg.meta.epochs == 20
    assert cfg.net.rank == 8 and cfg.net.delta == 0.09 and list(cfg.net.hidden) == [128, 256, 256]
    assert cfg.experiment.swmmse_iters == 200
    assert ExperimentConfig.full_scale().system.M_t == 32


def test_config_file_round_trip(tmp_path):
    cfg = tiny_cfg()
    dump_config(cfg, tmp_path / "c.yaml")
    assert load_config(tmp_path / "c.yaml") == cfg


def test_partial_config_file(tmp_path):
    (tmp_path / "c.yaml").write_text("system:\n  K: 3\nsampling:\n  trials: 7\n")
    cfg = load_config(tmp_path / "c.yaml")
    assert cfg.system.K == 3 and cfg.sampling.trials == 7 and cfg.system.M_t == 16
    assert load_config(tmp_path / "c.yaml", full_scale=True).system.M_t == 32


@pytest.mark.parametrize("text", [
    "bogus:\n  a: 1\n",
    "system:\n  antennas: 3\n",
    "system: 3\n",
    "experiment:\n  kind: nope\n",
    "experiment:\n  methods: [wmmse, magic]\n",
    "sampling:\n  trials: 0\n",
    "adapt:\n  alpha: -1\n",
    "- 1\n- 2\n",
])
def test_bad_config_rejected(tmp_path, text):
    (tmp_path / "c.yaml").write_text(text)
    with pytest.raises(ConfigError):
        load_config(tmp_path / "c.yaml")


def test_hash_ignores_execution_controls():
    a, b = tiny_cfg(), tiny_cfg()
    b.experiment.out_dir, b.experiment.workers, b.experiment.train_first = "elsewhere", 4, True
    assert config_hash(a) == config_hash(b)
    b.sampling.master_seed = 1
    assert config_hash(a) != config_hash(b)


# ---------------------------------------------------------------------------
# command line
# ---------------------------------------------------------------------------

def _write_cfg(tmp_path, cfg):
    p = tmp_path / "cfg.yaml"
    dump_config(cfg, p)
    return str(p)


def test_cli_train_run_report(tmp_path, capsys):
    cfg = tiny_cfg(methods=["wmmse", "hybrid"])
    cfg.meta.epochs = 1
    c = _write_cfg(tmp_path, cfg)
    assert cli.main(["train", "--config", c, "--out-dir", str(tmp_path / "bank")]) == 0
    assert "epoch 1:" in capsys.readouterr().out
    bank = str(tmp_path / "bank" / "bank.txt")
    assert cli.main(["run", "--config", c, "--out-dir", str(tmp_path / "run"), "--bank", bank,
                     "--seed", "3", "--workers", "1"]) == 0
    echoed = load_config(tmp_path / "run" / "config.yaml")
    assert echoed.sampling.master_seed == 3
    capsys.readouterr()
    assert cli.main(["report", str(tmp_path / "run" / "results.csv"), "-o", str(tmp_path / "s.csv")]) == 0
    out = capsys.readouterr().out.splitlines()
    assert out[0] == ",".join(ex.SUMMARY_COLUMNS) and len(out) == 1 + 4


def test_cli_errors_exit_2(tmp_path, capsys):
    cfg = tiny_cfg()
    c = _write_cfg(tmp_path, cfg)
    assert cli.main(["run", "--config", c, "--out-dir", str(tmp_path)]) == 2
    assert "error:" in capsys.readouterr().err
    bad = tmp_path / "bad.csv"
    bad.write_text(HEADER + "1,a,zz,1,1\n")
    assert cli.main(["report", str(bad)]) == 2
    assert "line 2" in capsys.readouterr().err


def test_cli_version(capsys):
    with pytest.raises(SystemExit) as e:
        cli.main(["--version"])
    assert e.value.code == 0
    assert "robustbf 0.1.0" in capsys.readouterr().out


def test_bank_sweeps_share_evaluation_tasks(tmp_path, monkeypatch):
    seen = []
    real = ex.eval_sampler

    class Spy:
        def __init__(self, inner):
            self.inner = inner

        def sample(self, seed):
            seen.append(seed)
            return self.inner.sample(seed)

    monkeypatch.setattr(ex, "eval_sampler", lambda *a, **k: Spy(real(*a, **k)))
    cfg = tiny_cfg("salr_delta", delta_list=[0.0, 0.25])
    cfg.meta.epochs = 0
    ex.run(cfg, out_dir=tmp_path)
    assert seen[:2] == seen[2:] and len(set(seen)) == 2
