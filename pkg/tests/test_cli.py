import pytest

from pmuge.cli import COMMANDS, main, read_config_file, resolve
from pmuge.dataio import ConfigError

TOY = ["--voltage", "4", "--frequency", "3", "--n-pmus", "30", "--n-samples", "96",
       "--event-start", "40"]


def test_resolve_precedence_and_types(tmp_path):
    cfg_file = tmp_path / "c.txt"
    cfg_file.write_text("# comment\nvoltage = 3\nnoise=0.2  # trailing\nout=x\n")
    cfg = resolve("toygen", {"voltage": "5", "seed": "1"}, cfg_file)
    assert cfg["voltage"] == 5 and cfg["noise"] == 0.2 and cfg["out"] == "x"
    assert cfg["n_pmus"] == COMMANDS["toygen"]["n_pmus"][1]
    assert read_config_file(cfg_file) == {"voltage": "3", "noise": "0.2", "out": "x"}


def test_resolve_errors(tmp_path):
    with pytest.raises(ConfigError, match="unknown"):
        resolve("toygen", {"out": "x", "seed": "1", "volts": "2"})
    with pytest.raises(ConfigError, match="required"):
        resolve("toygen", {"out": "x"})
    with pytest.raises(ConfigError, match="bad value"):
        resolve("toygen", {"out": "x", "seed": "one"})
    bad = tmp_path / "bad.txt"
    bad.write_text("no equals sign\n")
    with pytest.raises(ConfigError, match="key=value"):
        read_config_file(bad)


def test_exit_codes(tmp_path, capsys):
    cfg_file = tmp_path / "c.txt"
    cfg_file.write_text("bogus=1\n")
    assert main(["toygen", "--out", str(tmp_path / "t"), "--seed", "0",
                 "--config", str(cfg_file)]) == 2
    assert "bogus" in capsys.readouterr().err
    assert main(["toygen", "--out", str(tmp_path / "t")]) == 2
    assert main(["decompose", "--corpus", str(tmp_path / "missing"),
                 "--out", str(tmp_path / "d"), "--seed", "0"]) == 1
    assert main(["toygen", "--out", str(tmp_path / "t"), "--seed", "0",
                 "--n-samples", "96"]) == 2      # onset outside the window
    with pytest.raises(SystemExit):
        main(["nope"])


def _pipeline(root):
    r = str(root)
    steps = [
        ["toygen", "--out", f"{r}/corpus", "--seed", "1", *TOY],
        ["decompose", "--corpus", f"{r}/corpus", "--out", f"{r}/dec", "--n-boot", "10",
         "--resample", "60", "--sample-per-event", "10", "--seed", "2"],
        ["train", "--decomp", f"{r}/dec", "--out", f"{r}/train", "--epochs", "2",
         "--batch-size", "4", "--H", "100", "--n-blocks", "1", "--seed", "3"],
        ["simulate-inter", "--decomp", f"{r}/dec", "--out", f"{r}/inter", "--seed", "4"],
        ["generate", "--corpus", f"{r}/corpus", "--decomp", f"{r}/dec",
         "--checkpoint", f"{r}/train/checkpoint_0002.pmue",
         "--inter-model", f"{r}/inter/inter_model.pmue", "--out", f"{r}/syn", "--seed", "5"],
        ["evaluate", "--synthetic", f"{r}/syn", "--measured", f"{r}/corpus", "--out",
         f"{r}/eval", "--classifier-epochs", "2", "--classifier-batch", "4",
         "--classifier-H", "16", "--classifier-blocks", "1", "--seed", "6"],
    ]
    for argv in steps:
        assert main(argv) == 0, argv


@pytest.fixture(scope="module")
def pipeline_root(tmp_path_factory):
    root = tmp_path_factory.mktemp("pipe")
    _pipeline(root)
    return root


def test_pipeline_outputs(pipeline_root):
    r = pipeline_root
    for f in ("corpus/manifest.tsv", "dec/basis.pmue", "train/loss_log.tsv",
              "inter/inter_model.pmue", "inter/ks_report.tsv", "syn/manifest.tsv",
              "eval/report.txt", "eval/event_hist.tsv"):
        assert (r / f).exists(), f
    report = (r / "eval/report.txt").read_text()
    assert "synthetic-measured.accuracy" in report
    ks = (r / "inter/ks_report.tsv").read_text().splitlines()
    assert {line.split("\t")[0] for line in ks[1:]} == {"Voltage", "Frequency"}
