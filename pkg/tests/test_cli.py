"""End-to-end command-line pipeline and argument/config error handling."""

import json
import os

import pytest

from couplekit.cli import main_dispatch, read_config_file


def run(argv, capsys):
    code = main_dispatch(argv)
    captured = capsys.readouterr()
    return code, captured.out, captured.err


SMALL_SYNTH_CFG = """\
# tiny two-domain corpus
groups = 2
users_per_group = 30
items_per_domain = 80
tag_vocab = 40
tags_per_item = 3
interactions_per_user = 10
noise = 0.1
"""

SMALL_TRAIN_CFG = """\
d = 16
heads = 2
batch_size = 32
top_k = 4
tree = 1-4-16
queue_capacity = 128
"""


@pytest.fixture(scope="module")
def workdir(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    (root / "synth.cfg").write_text(SMALL_SYNTH_CFG)
    (root / "train.cfg").write_text(SMALL_TRAIN_CFG)
    return root


@pytest.fixture(scope="module")
def pipeline(workdir):
    """Run synth -> split -> train -> eval once, shared by several tests."""
    data = str(workdir / "data")
    split = str(workdir / "split")
    ckpt = str(workdir / "model.ckpt")
    report = str(workdir / "report.json")
    steps = [
        ["synth", "--config", str(workdir / "synth.cfg"), "--seed", "0", "--out", data],
        ["split", "--catalog", os.path.join(data, "catalog.tsv"),
         "--interactions", os.path.join(data, "interactions.tsv"),
         "--target-domain", "1", "--cold-fraction", "0.5", "--seed", "1", "--out", split],
        ["train", "--data", split, "--config", str(workdir / "train.cfg"),
         "--steps", "10", "--seed", "0", "--checkpoint", ckpt],
        ["eval", "--checkpoint", ckpt, "--split", split, "--out", report],
    ]
    for argv in steps:
        assert main_dispatch(argv) == 0, f"pipeline step failed: {argv[0]}"
    return workdir, data, split, ckpt, report


class TestArgumentErrors:
    def test_unknown_flag_exits_one(self, capsys):
        code, _, err = run(["synth", "--out", "x", "--frobnicate"], capsys)
        assert code == 1
        assert "--frobnicate" in err

    def test_missing_required_flag_exits_one(self, capsys):
        code, _, _ = run(["split", "--catalog", "c.tsv"], capsys)
        assert code == 1

    def test_unknown_subcommand_exits_one(self, capsys):
        code, _, _ = run(["transmogrify"], capsys)
        assert code == 1

    def test_missing_input_file_exits_two(self, tmp_path, capsys):
        code, _, err = run(["split", "--catalog", str(tmp_path / "absent.tsv"),
                            "--interactions", str(tmp_path / "absent2.tsv"),
                            "--out", str(tmp_path / "s")], capsys)
        assert code == 2
        assert "i/o error" in err


class TestConfigFiles:
    def test_parses_comments_and_types(self, tmp_path):
        p = tmp_path / "c.cfg"
        p.write_text("d = 32  # latent size\n\ntree = 1-8-64\nlr = 1e-3\n"
                     "position_embeddings = false\n")
        settings = read_config_file(str(p))
        assert settings == {"d": 32, "tree": (1, 8, 64), "lr": 1e-3,
                            "position_embeddings": False}

    def test_unknown_key_reports_line_number(self, tmp_path, capsys):
        p = tmp_path / "c.cfg"
        p.write_text("d = 16\nwarp_factor = 9\n")
        code, _, err = run(["synth", "--config", str(p), "--out", str(tmp_path / "o")], capsys)
        assert code == 1
        assert "warp_factor" in err and ":2:" in err

    def test_malformed_line_rejected(self, tmp_path, capsys):
        p = tmp_path / "c.cfg"
        p.write_text("just some words\n")
        code, _, err = run(["synth", "--config", str(p), "--out", str(tmp_path / "o")], capsys)
        assert code == 1
        assert ":1:" in err

    def test_flag_overrides_config(self, tmp_path, capsys):
        p = tmp_path / "c.cfg"
        p.write_text("groups = 2\nusers_per_group = 5\nitems_per_domain = 40\n"
                     "tag_vocab = 30\ninteractions_per_user = 6\nseed = 7\n")
        out = str(tmp_path / "o")
        code, _, _ = run(["synth", "--config", str(p), "--seed", "3", "--out", out], capsys)
        assert code == 0
        echoed = json.loads((tmp_path / "o" / "synth_config.json").read_text())
        assert echoed["seed"] == 3


class TestPipeline:
    def test_synth_is_deterministic(self, workdir, capsys):
        a, b = str(workdir / "det_a"), str(workdir / "det_b")
        for out in (a, b):
            code, _, _ = run(["synth", "--config", str(workdir / "synth.cfg"),
                              "--seed", "0", "--out", out], capsys)
            assert code == 0
        for name in ("catalog.tsv", "interactions.tsv", "synth_config.json"):
            assert (workdir / "det_a" / name).read_bytes() == \
                   (workdir / "det_b" / name).read_bytes()

    def test_eval_report_artifact(self, pipeline):
        _, _, _, _, report = pipeline
        body = json.loads(open(report).read())
        assert body["candidate_count"] == 101
        assert "hr@10" in body["metrics"]
        assert body["config"]["d"] == 16  # resolved settings echoed into the artifact

    def test_report_renderers(self, pipeline, capsys):
        workdir, _, _, _, report = pipeline
        code, out, _ = run(["report", "--in", report, "--format", "table"], capsys)
        assert code == 0 and "hr@10" in out
        code, out, _ = run(["report", "--in", report, "--format", "csv"], capsys)
        assert code == 0
        assert out.splitlines()[0] == "metric,k,slice,value"

    def test_baselines_run(self, pipeline, capsys):
        workdir, _, split, _, _ = pipeline
        for kind in ("random", "popularity"):
            out = str(workdir / f"baseline_{kind}.json")
            code, _, _ = run(["baseline", "--kind", kind, "--split", split,
                              "--out", out], capsys)
            assert code == 0
            assert "metrics" in json.loads(open(out).read())

    def test_export_embeddings(self, pipeline, capsys):
        workdir, _, split, ckpt, _ = pipeline
        for what in ("tags", "leaves", "users", "assignments"):
            out = str(workdir / f"export_{what}.tsv")
            code, _, _ = run(["export-embeddings", "--checkpoint", ckpt, "--what", what,
                              "--split", split, "--out", out], capsys)
            assert code == 0
            lines = open(out).read().splitlines()
            assert len(lines) > 1  # header plus at least one row

    def test_export_users_without_split_is_an_error(self, pipeline, capsys):
        workdir, data, _, ckpt, _ = pipeline
        code, _, err = run(["export-embeddings", "--checkpoint", ckpt, "--what", "users",
                            "--catalog", os.path.join(data, "catalog.tsv"),
                            "--out", str(workdir / "nope.tsv")], capsys)
        assert code == 1
        assert "--split" in err

    def test_train_rerun_is_byte_identical(self, pipeline, workdir, capsys):
        _, _, split, ckpt, _ = pipeline
        again = str(workdir / "model_again.ckpt")
        code, _, _ = run(["train", "--data", split, "--config", str(workdir / "train.cfg"),
                          "--steps", "10", "--seed", "0", "--checkpoint", again], capsys)
        assert code == 0
        assert open(ckpt, "rb").read() == open(again, "rb").read()

    def test_eval_rerun_is_byte_identical(self, pipeline, workdir, capsys):
        _, _, split, ckpt, report = pipeline
        again = str(workdir / "report_again.json")
        code, _, _ = run(["eval", "--checkpoint", ckpt, "--split", split,
                          "--out", again], capsys)
        assert code == 0
        assert open(report, "rb").read() == open(again, "rb").read()

    def test_unwritable_output_exits_two(self, pipeline, capsys):
        _, _, _, _, report = pipeline
        code, _, err = run(["report", "--in", report + ".does-not-exist"], capsys)
        assert code == 2
        assert "i/o error" in err
