import json
import re

import pytest

from frdiff import config as C
from frdiff.cli import FLAGS, build_parser, main
from frdiff.io import read_csv


@pytest.fixture
def out(tmp_path, monkeypatch):
    monkeypatch.setenv("FRDIFF_OUT", str(tmp_path / "runs"))
    return tmp_path / "runs"


SMALL = ["--arch", "toy_dit", "--width", "16", "--depth", "2"]


def summary(run):
    return json.loads((run / "summary.json").read_text())


def test_config_defaults_and_unknown_keys(tmp_path):
    cfg = C.RunConfig()
    assert cfg.fr.tau == 30.0 and cfg.fr.bias == 0.5 and cfg.schedule.T == 1000
    with pytest.raises(C.ConfigError):
        C.from_dict({"model": {"colour": 1}})
    with pytest.raises(C.ConfigError):
        C.from_dict({"extra": {}})
    with pytest.raises(C.ConfigError):
        C.from_dict({"sampler": {"N": "ten"}})
    with pytest.raises(C.ConfigError):
        C.from_dict({"fr": {"mixing": 1}})
    with pytest.raises(C.ConfigError):
        C.from_dict({"sampler": {"N": 0}}).validate()


def test_config_precedence(tmp_path):
    path = tmp_path / "c.json"
    path.write_text(json.dumps({"sampler": {"N": 12}, "io": {"out_dir": "file"}}))
    cfg = C.load(path, env={"FRDIFF_OUT": "env"})
    assert cfg.sampler.N == 12 and cfg.io.out_dir == "env"
    args = build_parser().parse_args(["sample", "--config", str(path), "--steps", "7", "--out-dir", "flag"])
    from frdiff.cli import resolve_config

    cfg = resolve_config(args)
    assert cfg.sampler.N == 7 and cfg.io.out_dir == "flag"


def test_print_config_lists_every_default(capsys):
    assert main(["profile", "--print-config"]) == 0
    tree = json.loads(capsys.readouterr().out)
    assert tree == C.RunConfig().to_dict()


def test_help_shows_default_for_every_flag(capsys):
    parser = build_parser()
    sub = parser._subparsers._group_actions[0].choices
    for cmd, p in sub.items():
        text = p.format_help()
        for flag, _path, _typ, _help, cmds in FLAGS:
            if cmd in cmds:
                assert flag in text
        for action in p._actions:
            if action.option_strings and action.dest != "help":
                assert "(default:" in action.help, (cmd, action.option_strings)


def test_sample_twice_is_byte_identical(out):
    args = ["sample", "--steps", "50", "--fr-interval", "1", "--seed", "7", "--batch", "2", *SMALL]
    assert main(args + ["--run-name", "a"]) == 0
    assert main(args + ["--run-name", "b"]) == 0
    for name in ("samples.bin", "images/sample_000.pgm", "images/sample_001.pgm"):
        assert (out / "a" / name).read_bytes() == (out / "b" / name).read_bytes()
    s = summary(out / "a")
    assert s["network_evals"] == 50 and s["n_keyframes"] == 50
    assert len(read_csv(out / "a" / "ledger.csv")) == 50


def test_run_directory_reproduces_from_snapshot(out):
    assert main(["sample", "--steps", "6", "--fr-interval", "2", "--mixing", "--run-name", "first", *SMALL]) == 0
    snap = out / "first" / "config.json"
    assert main(["sample", "--config", str(snap), "--run-name", "second"]) == 0
    assert (out / "first" / "samples.bin").read_bytes() == (out / "second" / "samples.bin").read_bytes()


def test_verify_equivalence_summary(out):
    assert main(["verify-equivalence", "--stride", "2", "--run-name", "v", *SMALL]) == 0
    s = summary(out / "v")
    assert s["max_abs_dev"] < 1e-10 and s["stride"] == 2 and not s["uneven"]


def test_profile_prints_speedup(out, capsys):
    assert main(["profile", "--skippable", "0.92", "--steps", "50", "--fr-interval", "2"]) == 0
    assert re.search(r"^speedup 1\.852$", capsys.readouterr().out, re.M)


def test_profile_from_network_and_latency_table(out, tmp_path):
    assert main(["profile", "--steps", "10", "--fr-interval", "2", "--batch", "1", "--run-name", "p", *SMALL]) == 0
    s = summary(out / "p")
    assert s["source"] == "operation_counts" and s["speedup"] == pytest.approx(s["ops_speedup"])
    table = tmp_path / "lat.csv"
    table.write_text("block,cost,skippable\nunet,1.0,0.92\n")
    assert main(["profile", "--latency-csv", str(table), "--fr-interval", "2", "--run-name", "q"]) == 0
    assert summary(out / "q")["speedup"] == pytest.approx(1.852, abs=1e-3)
    assert main(["profile", "--latency-csv", str(tmp_path / "missing.csv")]) == 2


def test_train_then_sample_from_checkpoint(out):
    assert main(["train", "--steps", "3", "--batch", "4", "--run-name", "t", *SMALL]) == 0
    s = summary(out / "t")
    assert len(read_csv(out / "t" / "loss.csv")) == 3 and s["command"] == "train"
    ck = out / "t" / "checkpoint"
    assert main(["sample", "--checkpoint", str(ck), "--steps", "4", "--run-name", "s"]) == 0
    assert (out / "s" / "images" / "sample_000.pgm").exists()


def test_autofr_similarity_psd_commands(out):
    assert main(["autofr", "--iters", "2", "--steps", "6", "--batch", "1", "--cost-lambda", "0.1",
                 "--run-name", "a", *SMALL]) == 0
    keys = json.loads((out / "a" / "keyframes.json").read_text())["fr"]["keyframes"]
    assert keys[0] == 1 and summary(out / "a")["keyframes"] == keys
    assert (out / "a" / "theta.csv").exists() and (out / "a" / "x_gt.bin").exists()
    assert main(["analyze-similarity", "--steps", "6", "--seeds", "2", "--heatmap-iterations", "1,6",
                 "--run-name", "s", *SMALL]) == 0
    assert len(read_csv(out / "s" / "similarity.csv")) == 2 * 5
    assert len(list((out / "s" / "heatmaps").glob("*.pgm"))) == 4
    assert main(["analyze-psd", "--steps", "10", "--stride", "5", "--batch", "4", "--run-name", "p", *SMALL]) == 0
    assert {"reduced_gt_fr", "mixing_le_fr"} <= set(summary(out / "p"))
    assert read_csv(out / "p" / "psd_baseline.csv")[0].keys() == {"ring", "log_power"}


def test_keyframes_file_feeds_sample(out, tmp_path):
    kf = tmp_path / "k.json"
    kf.write_text(json.dumps({"fr": {"keyframes": [1, 3, 4]}}))
    assert main(["sample", "--config", str(kf), "--steps", "5", "--run-name", "k", *SMALL]) == 0
    assert summary(out / "k")["keyframes"] == [1, 3, 4]


@pytest.mark.parametrize("argv", [
    ["sample", "--keyframes", "2,3"],
    ["sample", "--width", "0"],
    ["sample", "--reuse-scope", "conv"],
    ["sample", "--checkpoint", "/nonexistent/ck"],
    ["verify-equivalence", "--threads", "0"],
])
def test_configuration_errors_exit_2(out, argv):
    assert main(argv + ["--steps", "4"]) == 2


def test_unknown_flag_exits_2(out):
    with pytest.raises(SystemExit) as exc:
        main(["sample", "--bogus"])
    assert exc.value.code == 2


def test_bad_config_file_exits_2(out, tmp_path):
    bad = tmp_path / "bad.json"
    bad.write_text('{"model": {"nope": 1}}')
    assert main(["sample", "--config", str(bad)]) == 2
    bad.write_text("{not json")
    assert main(["sample", "--config", str(bad)]) == 2


def test_numerical_failure_exits_3(out):
    assert main(["train", "--steps", "5", "--batch", "4", "--lr", "1e300", *SMALL]) == 3
