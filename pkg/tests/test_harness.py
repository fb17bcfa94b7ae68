"""Config parsing, transfer evaluation, report emission, experiment
orchestration, and the CLI."""

import os

import numpy as np
import pytest

from ilpdlab import cli, data, harness
from ilpdlab.attacks import AttackConfig
from ilpdlab.harness import (
    ConfigError,
    TransferReport,
    parse_config_text,
    parse_number,
    run_experiment,
    transfer_eval,
    write_report_csv,
    write_trace_csv,
    _misclassified,
)


def test_parse_number_plain_and_fraction():
    assert parse_number("0.5", "k") == 0.5
    assert parse_number("8/255", "k") == pytest.approx(8 / 255)
    with pytest.raises(ConfigError, match="k"):
        parse_number("abc", "k")


def test_parse_config_defaults():
    cfg = parse_config_text("")
    assert cfg.substitute_arch == "smallnet"
    assert cfg.attack.method == "ifgsm"


def test_parse_config_full():
    cfg = parse_config_text("""
        # a comment
        data.seed = 3
        data.n = 500
        data.noise = 0.4
        data.train_count = 400
        substitute.arch = smallnet
        substitute.seed = 1
        victims = smallnet:2, midnet:3, smallnet:4:shared_h
        train.epochs = 5
        attack.method = ilpd
        attack.epsilon = 8/255
        attack.gamma = 5
        attack.split = 4
        attack.noise_sigma = 0.05
        eval.count = 100
    """)
    assert cfg.data_seed == 3 and cfg.data_noise == 0.4
    assert [v.arch for v in cfg.victims] == ["smallnet", "midnet", "smallnet"]
    assert [v.shared_h for v in cfg.victims] == [False, False, True]
    assert cfg.attack.method == "ilpd"
    assert cfg.attack.epsilon == pytest.approx(8 / 255)
    assert cfg.attack.split == 4


@pytest.mark.parametrize("text,match", [
    ("data.n = x", "data.n"),
    ("data.n = 1", "data.n"),
    ("substitute.arch = vgg19", "substitute.arch"),
    ("victims = smallnet", "victims"),
    ("victims = hugenet:2", "victims"),
    ("victims = smallnet:two", "victims"),
    ("attack.epsilon = -0.1", "attack"),
    ("attack.steps = many", "attack.steps"),
    ("nonsense.key = 1", "unknown"),
    ("keyvalue", "key = value"),
])
def test_parse_config_errors(text, match):
    with pytest.raises(ConfigError, match=match):
        parse_config_text(text)


def test_fingerprint_stable_and_sensitive():
    a = parse_config_text("data.seed = 1").fingerprint()
    b = parse_config_text("data.seed = 1").fingerprint()
    c = parse_config_text("data.seed = 2").fingerprint()
    assert a == b != c


def test_misclassified_tie_does_not_count(tiny_model):
    class Constant:
        def forward(self, x):
            return np.zeros((len(x), 8), np.float32)

    x = np.zeros((5, 1, 16, 16), np.float32)
    y = np.arange(5) % 8
    assert not _misclassified(Constant(), x, y).any()


def test_transfer_eval_report_fields(tiny_model, tiny_model_b, tiny_dataset):
    dset = data.Dataset(tiny_dataset.images[140:180], tiny_dataset.labels[140:180], 8)
    cfg = AttackConfig(epsilon=16 / 255, eta=2 / 255, steps=8)
    report = transfer_eval(tiny_model, [tiny_model_b], dset, cfg,
                           victim_names=["b"], fingerprint="f0")
    assert report.victim_names == ["b"]
    assert report.n_examples == 40
    assert 0.0 <= report.average_rate <= 1.0
    assert report.average_rate == pytest.approx(report.per_victim_rate[0])
    assert report.substitute_whitebox_rate >= report.per_victim_clean_error[0] * 0.0
    assert report.config_fingerprint == "f0"


def test_transfer_eval_accepts_precomputed_result(tiny_model, tiny_model_b, tiny_dataset):
    from ilpdlab.attacks import run_attack

    dset = data.Dataset(tiny_dataset.images[140:160], tiny_dataset.labels[140:160], 8)
    cfg = AttackConfig(epsilon=16 / 255, eta=2 / 255, steps=4)
    result = run_attack(tiny_model, dset.images, dset.labels, cfg)
    a = transfer_eval(tiny_model, [tiny_model_b], dset, cfg, result=result)
    b = transfer_eval(tiny_model, [tiny_model_b], dset, cfg)
    assert a.per_victim_rate == b.per_victim_rate


def test_write_report_csv(tmp_path):
    report = TransferReport(
        victim_names=["a", "b"], per_victim_rate=[0.5, 0.25],
        per_victim_clean_error=[0.1, 0.2], per_victim_rate_filtered=[0.6, 0.3],
        average_rate=0.375, substitute_whitebox_rate=0.9, n_examples=8,
    )
    path = tmp_path / "report.csv"
    write_report_csv(report, path)
    lines = path.read_text().splitlines()
    assert lines[0].startswith("victim,")
    assert lines[1].startswith("a,0.5")
    assert lines[-1].startswith("average,0.375")


def test_write_trace_csv(tiny_model, tiny_batch, tmp_path):
    from ilpdlab.attacks import ifgsm

    x, y = tiny_batch
    res = ifgsm(tiny_model, x, y, AttackConfig(epsilon=16 / 255, eta=2 / 255, steps=3))
    path = tmp_path / "trace.csv"
    write_trace_csv(res, path)
    lines = path.read_text().splitlines()
    assert lines[0] == "example,iteration,loss,feature_norm,projection,cosine"
    assert len(lines) == 1 + 4 * len(x)


TINY_EXPERIMENT = """
data.n = 160
data.train_count = 120
train.epochs = 4
victims = smallnet:2
attack.steps = 4
attack.eta = 4/255
attack.epsilon = 16/255
eval.count = 20
"""


def _write_config(tmp_path, extra=""):
    cfg_path = tmp_path / "exp.cfg"
    text = TINY_EXPERIMENT + f"output.dir = {tmp_path / 'out'}\n"
    text += f"cache.dir = {tmp_path / 'cache'}\n" + extra
    cfg_path.write_text(text)
    return cfg_path


def test_run_experiment_writes_artifacts(tmp_path):
    cfg_path = _write_config(tmp_path)
    report = run_experiment(cfg_path)
    out = tmp_path / "out"
    assert (out / "report.csv").exists()
    assert (out / "trace.csv").exists()
    assert (out / "summary.txt").exists()
    assert 0.0 <= report.average_rate <= 1.0
    # the second run hits the model cache and reproduces the same report
    again = run_experiment(cfg_path)
    assert again.per_victim_rate == report.per_victim_rate


def test_run_experiment_requires_victims(tmp_path):
    cfg_path = tmp_path / "exp.cfg"
    cfg_path.write_text("data.n = 160\ndata.train_count = 120\n")
    with pytest.raises(ConfigError, match="victims"):
        run_experiment(cfg_path)


def test_shared_h_victim_shares_features(tmp_path):
    cfg_path = _write_config(
        tmp_path, "victims = smallnet:9:shared_h\nattack.split = 4\n")
    cfg = harness.parse_config_file(cfg_path)
    train_ds, _ = harness.load_dataset(cfg)
    sub = harness.prepare_model(cfg, "smallnet", cfg.substitute_seed, train_ds)
    vic = harness.prepare_model(cfg, "smallnet", 9, train_ds,
                                shared_h=True, substitute=sub)
    h_s, _ = sub.split(4)
    h_v, _ = vic.split(4)
    x = train_ds.images[:4]
    assert np.array_equal(h_s.forward(x), h_v.forward(x))
    assert not np.array_equal(sub.forward(x), vic.forward(x))


# ---------------------------------------------------------------------------
# CLI


def test_cli_transfer_and_report(tmp_path, capsys):
    cfg_path = _write_config(tmp_path)
    assert cli.main(["transfer", str(cfg_path)]) == 0
    out = capsys.readouterr().out
    assert "average" in out or "wrote" in out
    assert cli.main(["report", str(tmp_path / "out" / "summary.txt")]) == 0
    assert "white-box" in capsys.readouterr().out


def test_cli_gen_data_roundtrip(tmp_path, capsys):
    cfg_path = _write_config(tmp_path)
    out = tmp_path / "d.bin"
    assert cli.main(["gen-data", str(cfg_path), "--out", str(out)]) == 0
    ds = data.load_raw(out)
    assert len(ds) == 160


def test_cli_train_saves_model(tmp_path, capsys):
    cfg_path = _write_config(tmp_path)
    out = tmp_path / "m.model"
    assert cli.main(["train", str(cfg_path), "--out", str(out)]) == 0
    from ilpdlab.network import load_model

    spec, params = load_model(out)
    assert spec.depth() == 8


def test_cli_bad_config_exits_2(tmp_path, capsys):
    bad = tmp_path / "bad.cfg"
    bad.write_text("nonsense = 1\n")
    assert cli.main(["transfer", str(bad)]) == 2
    assert "error:" in capsys.readouterr().err


def test_cli_missing_file_exits_2(tmp_path, capsys):
    assert cli.main(["transfer", str(tmp_path / "absent.cfg")]) == 2


def test_cli_sweep_gamma(tmp_path, capsys):
    cfg_path = _write_config(tmp_path, "attack.split = 4\n")
    assert cli.main(["sweep", "gamma", str(cfg_path), "--values", "1,2"]) == 0
    sweep = (tmp_path / "out" / "sweep_gamma.csv").read_text().splitlines()
    assert sweep[0].startswith("gamma,")
    assert len(sweep) == 3
