import json

import pytest

from laganet.cli import main

SMALL = {
    "model": {"input_height": 48, "input_width": 16, "trunk_widths": [8, 16, 16], "branch_channels": 32},
    "train": {"epochs": 2, "warmup_epochs": 2},
    "synth": {"height": 48, "width": 16},
}


@pytest.fixture
def cfg_path(tmp_path):
    p = tmp_path / "cfg.json"
    p.write_text(json.dumps(SMALL))
    return str(p)


def test_help(capsys):
    assert main(["--help"]) == 0
    assert "synth" in capsys.readouterr().out
    assert main(["train", "--help"]) == 0
    assert "--resume" in capsys.readouterr().out


def test_unknown_subcommand(capsys):
    assert main(["fly"]) == 1
    assert "invalid choice" in capsys.readouterr().err


def test_missing_required_flag():
    assert main(["train", "--manifest", "m.tsv"]) == 1


def test_no_subcommand():
    assert main([]) == 1


def test_pipeline(tmp_path, cfg_path):
    d = tmp_path
    assert main(["synth", "--config", cfg_path, "--out", str(d / "data")]) == 0
    manifest = str(d / "data" / "manifest.tsv")
    assert main(["train", "--config", cfg_path, "--manifest", manifest, "--out", str(d / "m.laga"),
                 "--log", str(d / "metrics.csv")]) == 0
    for split in ("query", "gallery"):
        assert main(["embed", "--config", cfg_path, "--ckpt", str(d / "m.laga"), "--manifest", manifest,
                     "--split", split, "--out", str(d / f"{split}.tsv")]) == 0
    assert main(["eval", "--query", str(d / "query.tsv"), "--gallery", str(d / "gallery.tsv"),
                 "--report", str(d / "report.json")]) == 0
    report = json.loads((d / "report.json").read_text())
    assert set(report) == {"rank1", "rank5", "rank10", "mAP", "n_queries", "n_dropped"}
    assert report["n_queries"] == 100
    assert (d / "metrics.csv").read_text().count("\n") == 3
    dims = {len(line.split("\t")) - 3 for line in (d / "query.tsv").read_text().splitlines()}
    assert dims == {6 * 32}


def test_eval_repeats(tmp_path, capsys):
    rows = [f"p{i}\t{i % 3}\t{i % 2}\t{1.0 + (i % 3 == 0)}\t{1.0 + (i % 3 == 1)}\t{1.0 + (i % 3 == 2)}"
            for i in range(9)]
    (tmp_path / "all.tsv").write_text("\n".join(rows) + "\n")
    code = main(["eval", "--query", str(tmp_path / "all.tsv"), "--gallery", str(tmp_path / "all.tsv"),
                 "--repeats", "3", "--report", str(tmp_path / "r.json")])
    assert code == 0
    assert json.loads((tmp_path / "r.json").read_text())["rank1"] == 1.0


def test_data_errors_exit_2(tmp_path, cfg_path, capsys):
    assert main(["train", "--config", cfg_path, "--manifest", str(tmp_path / "none.tsv"),
                 "--out", str(tmp_path / "m.laga")]) == 2
    (tmp_path / "bad.tsv").write_text("path\tidentity\tcamera\tsplit\nx.ppm\t3\t0\ttrain\n")
    assert main(["train", "--config", cfg_path, "--manifest", str(tmp_path / "bad.tsv"),
                 "--out", str(tmp_path / "m.laga")]) == 2
    assert "contiguous" in capsys.readouterr().err


def test_single_camera_with_filter_exit_2(tmp_path, capsys):
    rows = [f"p{i}\t{i % 2}\t0\t{1 + i}\t1.0" for i in range(4)]
    (tmp_path / "e.tsv").write_text("\n".join(rows) + "\n")
    code = main(["eval", "--query", str(tmp_path / "e.tsv"), "--gallery", str(tmp_path / "e.tsv"),
                 "--camera-filter", "--report", str(tmp_path / "r.json")])
    assert code == 2
    assert "camera filter" in capsys.readouterr().err


def test_config_errors_exit_2(tmp_path):
    (tmp_path / "c.json").write_text(json.dumps({"model": {"colour": 1}}))
    assert main(["synth", "--config", str(tmp_path / "c.json"), "--out", str(tmp_path / "o")]) == 2


def test_bad_ablation_seeds(tmp_path):
    assert main(["ablate", "--manifest", "m.tsv", "--seeds", "a,b"]) == 1
