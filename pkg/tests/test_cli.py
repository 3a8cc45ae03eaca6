import json
from pathlib import Path

import pytest

from refusal_geometry import cli
from refusal_geometry.interventions import Direction

SMALL_TOY = ["--steps", "20", "--d-model", "16", "--n-layers", "2", "--n-heads", "2", "--d-mlp", "32",
             "--min-accuracy", "0"]


def run(*argv) -> int:
    return cli.main([str(a) for a in argv])


@pytest.fixture(scope="module")
def small(tmp_path_factory) -> Path:
    """A miniature run of every stage up to a trained direction."""
    root = tmp_path_factory.mktemp("cli")
    d = lambda p: root / p
    assert run("gen-data", "--seed", 0, "--out", d("data"), "--n-train", 32, "--n-val", 16, "--n-test", 16) == 0
    assert run("train-toy", "--seed", 0, "--out", d("toy"), "--data", d("data"), *SMALL_TOY) == 0
    common = ["--model", d("toy/model.bin"), "--data", d("data")]
    assert run("extract-dim", "--seed", 0, "--out", d("dim"), *common, "--layer", 1) == 0
    assert run("gen-targets", "--seed", 0, "--out", d("targets"), *common, "--direction", d("dim/dim.json")) == 0
    assert run("train-rdo", "--seed", 0, "--out", d("rdo"), *common, "--direction", d("dim/dim.json"),
               "--targets", d("targets/targets.jsonl"), "--max-steps", 4) == 0
    return root


class TestStages:
    def test_outputs_and_manifests(self, small):
        for stage, files in [
            ("data", ["train.jsonl", "val.jsonl", "test.jsonl", "task.json", "manifest.gen-data.json"]),
            ("toy", ["model.bin", "train_report.json", "train_curve.csv", "train_curve.png"]),
            ("dim", ["dim.json", "manifest.extract-dim.json"]),
            ("targets", ["targets.jsonl", "targets_report.json"]),
            ("rdo", ["rdo.json", "rdo_history.csv", "rdo_loss.png"]),
        ]:
            for f in files:
                assert (small / stage / f).is_file(), f"{stage}/{f}"

    def test_manifest_contents(self, small):
        m = json.loads((small / "rdo" / "manifest.train-rdo.json").read_text())
        assert m["command"] == "train-rdo" and m["seed"] == 0
        assert m["config"]["max_steps"] == 4
        assert m["model_checksum"] == Direction.load(small / "rdo" / "rdo.json").model_checksum
        assert set(m["outputs"]) == {"rdo.json", "rdo_history.csv", "rdo_loss.png"}
        assert {"model", "direction", "targets", "data/train"} <= set(m["inputs"])

    def test_remaining_commands(self, small):
        d = lambda p: small / p
        common = ["--model", d("toy/model.bin"), "--data", d("data")]
        train = [*common, "--direction", d("dim/dim.json"), "--targets", d("targets/targets.jsonl"), "--max-steps", 3]
        assert run("train-cone", "--seed", 0, "--out", d("cone"), *train, "--n-eval-samples", 4,
                   "--samples-per-step", 2) == 0
        assert run("train-repind", "--seed", 0, "--out", d("repind"), *train, "--n-candidates", 1) == 0
        assert run("verify-independence", "--seed", 0, "--out", d("ind"), *common, "--r", d("rdo/rdo.json"),
                   "--v", d("dim/dim.json")) == 0
        assert run("attack-suffix", "--seed", 0, "--out", d("attack"), *common, "--direction", d("dim/dim.json"),
                   "--n-prompts", 2, "--suffix-len", 2, "--max-iters", 1) == 0
        assert run("evaluate", "--seed", 0, "--out", d("eval"), *common, "--direction", d("rdo/rdo.json"),
                   "--alpha-multiples", 0, 0.5, 1) == 0
        assert run("best-of-n", "--seed", 0, "--out", d("bon"), *common, "--cone", d("cone/cone.json"),
                   "--n", 2, "--temperatures", 1.0) == 0
        for f in ["cone/cone.json", "cone/cone_eval.json", "cone/cone_asr.png", "repind/repind.json",
                  "repind/repind_report.json", "ind/independence.json", "ind/independence_profiles.png",
                  "attack/attack.json", "attack/attack_profiles.png", "eval/eval.json", "eval/scaling.csv",
                  "eval/scaling.png", "bon/best_of_n.csv", "bon/best_of_n.png"]:
            assert d(f).is_file(), f
        report = json.loads(d("eval/eval.json").read_text())
        assert report["scaling_curve"]["alphas"][0] == 0.0 and len(report["scaling_curve"]["alphas"]) == 3


class TestErrors:
    def test_missing_direction(self, small, capsys):
        code = run("gen-targets", "--seed", 0, "--out", small / "x", "--model", small / "toy/model.bin",
                   "--data", small / "data")
        assert code == cli.EXIT_CONFIG
        assert "'direction'" in capsys.readouterr().err

    def test_missing_seed(self, small, capsys):
        assert run("gen-data", "--out", small / "x") == cli.EXIT_CONFIG
        assert "'seed'" in capsys.readouterr().err

    def test_missing_file(self, small, capsys):
        code = run("extract-dim", "--seed", 0, "--out", small / "x", "--model", small / "nope.bin",
                   "--data", small / "data")
        assert code == cli.EXIT_CONFIG
        assert "'model'" in capsys.readouterr().err

    def test_checksum_mismatch(self, small, tmp_path, capsys):
        d = Direction.load(small / "dim/dim.json")
        d.model_checksum = "0" * 16
        d.save(tmp_path / "foreign.json")
        code = run("evaluate", "--seed", 0, "--out", tmp_path / "e", "--model", small / "toy/model.bin",
                   "--data", small / "data", "--direction", tmp_path / "foreign.json")
        assert code == cli.EXIT_CHECKSUM
        assert "checksum" in capsys.readouterr().err

    def test_unknown_config_field(self, tmp_path, capsys):
        (tmp_path / "c.json").write_text(json.dumps({"bogus": 1}))
        assert run("gen-data", "--config", tmp_path / "c.json", "--seed", 0, "--out", tmp_path) == cli.EXIT_CONFIG
        assert "'bogus'" in capsys.readouterr().err


class TestConfig:
    def resolve(self, argv):
        args = cli.build_parser().parse_args([str(a) for a in argv])
        return cli.resolve_config(args.command, args)

    def test_precedence(self, tmp_path):
        (tmp_path / "c.json").write_text(json.dumps({"command": "gen-data", "n_train": 10, "n_val": 4}))
        cfg = self.resolve(["gen-data", "--config", tmp_path / "c.json", "--n-val", 6, "--seed", 1])
        assert (cfg["n_train"], cfg["n_val"], cfg["n_test"], cfg["seed"]) == (10, 6, 128, 1)

    def test_config_for_other_command(self, tmp_path):
        (tmp_path / "c.json").write_text(json.dumps({"command": "train-toy"}))
        with pytest.raises(cli.ConfigError, match="command"):
            self.resolve(["gen-data", "--config", tmp_path / "c.json"])

    def test_list_flags(self):
        cfg = self.resolve(["gen-data", "--triggers", 8, 9, "--prompt-len", 2, 4])
        assert cfg["triggers"] == [8, 9] and cfg["prompt_len"] == [2, 4]


class TestDeterminism:
    def test_gen_data_byte_identical(self, tmp_path):
        for name in ("a", "b"):
            assert run("gen-data", "--seed", 3, "--out", tmp_path / name, "--n-train", 16) == 0
        for f in ("train.jsonl", "val.jsonl", "test.jsonl", "task.json"):
            assert (tmp_path / "a" / f).read_bytes() == (tmp_path / "b" / f).read_bytes()

    def test_balanced_rows(self, small):
        rows = [json.loads(l) for l in (small / "data/train.jsonl").read_text().splitlines()]
        assert sum(r["label"] == "harmful" for r in rows) == len(rows) // 2 == 16
