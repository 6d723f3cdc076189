import json

import pytest
from click.testing import CliRunner

from oracles import naive_table_scores
from tabverify.cli import main, parse_config_file
from tabverify.corpus import save_claims, save_tables


@pytest.fixture(scope="module")
def data_dir(tmp_path_factory, synthetic_ds):
    path = tmp_path_factory.mktemp("data")
    save_tables(synthetic_ds.corpus, str(path / "tables.jsonl"))
    save_claims(synthetic_ds.train_claims[:40], str(path / "train.jsonl"))
    save_claims(synthetic_ds.eval_claims, str(path / "eval.jsonl"))
    return path


@pytest.fixture(scope="module")
def built_index(data_dir, tmp_path_factory):
    out = tmp_path_factory.mktemp("idx") / "index.npz"
    result = CliRunner().invoke(
        main,
        ["build-index", "--corpus", str(data_dir / "tables.jsonl"), "--out", str(out)],
    )
    assert result.exit_code == 0, result.output
    return out


TINY_MODEL_FLAGS = [
    "--encode-dim", "16", "--embed-dim", "16", "--hash-buckets", "512",
    "--encoder-hidden", "16", "--head-hidden", "16", "--attention-heads", "2",
]


@pytest.fixture(scope="module")
def trained_dir(data_dir, built_index, tmp_path_factory):
    out = tmp_path_factory.mktemp("run")
    result = CliRunner().invoke(
        main,
        [
            "train",
            "--corpus", str(data_dir / "tables.jsonl"),
            "--index", str(built_index),
            "--train-claims", str(data_dir / "train.jsonl"),
            "--out-dir", str(out),
            "--epochs", "2",
            "--k", "3",
            *TINY_MODEL_FLAGS,
        ],
    )
    assert result.exit_code == 0, result.output
    return out


class TestBuildIndexAndRetrieve:
    def test_retrieve_reproduces_bruteforce_scores(
        self, data_dir, built_index, tmp_path, synthetic_ds
    ):
        out = tmp_path / "retr"
        result = CliRunner().invoke(
            main,
            [
                "retrieve",
                "--index", str(built_index),
                "--claims", str(data_dir / "eval.jsonl"),
                "--out-dir", str(out),
                "--k", "5",
            ],
        )
        assert result.exit_code == 0, result.output
        lines = (out / "rankings.jsonl").read_text().splitlines()
        header = json.loads(lines[0])
        assert "config_hash" in header

        tables = {
            t.id: [list(row) for row in t.rows] for t in synthetic_ds.corpus
        }
        claims = {c.id: c for c in synthetic_ds.eval_claims}
        for line in lines[1:6]:
            record = json.loads(line)
            claim = claims[record["claim_id"]]
            oracle = naive_table_scores(
                tables, [s.surface for s in claim.entities]
            )
            for entry in record["ranked"]:
                assert entry["score"] == pytest.approx(
                    oracle[entry["table_id"]], abs=1e-9
                )

        hits = json.loads((out / "hits.json").read_text())
        assert 0.0 <= hits["hits_at"]["1"] <= 1.0

    def test_identical_invocations_are_byte_identical(
        self, data_dir, built_index, tmp_path
    ):
        out = tmp_path / "same"
        outputs = []
        for _ in range(2):
            result = CliRunner().invoke(
                main,
                [
                    "retrieve",
                    "--index", str(built_index),
                    "--claims", str(data_dir / "eval.jsonl"),
                    "--out-dir", str(out),
                ],
            )
            assert result.exit_code == 0, result.output
            outputs.append((out / "rankings.jsonl").read_bytes())
        assert outputs[0] == outputs[1]

    def test_missing_corpus_exits_two(self, tmp_path):
        result = CliRunner().invoke(
            main,
            ["build-index", "--corpus", str(tmp_path / "nope.jsonl"),
             "--out", str(tmp_path / "o.npz")],
        )
        assert result.exit_code == 2

    def test_bad_k_exits_two(self, data_dir, built_index, tmp_path):
        result = CliRunner().invoke(
            main,
            ["retrieve", "--index", str(built_index),
             "--claims", str(data_dir / "eval.jsonl"),
             "--out-dir", str(tmp_path / "o"), "--k", "0"],
        )
        assert result.exit_code == 2


class TestTrainEvaluate:
    def test_train_writes_checkpoint_and_log(self, trained_dir):
        assert (trained_dir / "model.ckpt.npz").exists()
        log_lines = (trained_dir / "train_log.jsonl").read_text().splitlines()
        header = json.loads(log_lines[0])
        assert "config_hash" in header
        steps = [json.loads(line) for line in log_lines[1:]]
        assert steps and all({"step", "loss", "lr"} <= set(s) for s in steps)

    def test_evaluate_writes_reports(self, data_dir, built_index, trained_dir, tmp_path):
        out = tmp_path / "eval"
        result = CliRunner().invoke(
            main,
            [
                "evaluate",
                "--corpus", str(data_dir / "tables.jsonl"),
                "--index", str(built_index),
                "--checkpoint", str(trained_dir / "model.ckpt.npz"),
                "--claims", str(data_dir / "eval.jsonl"),
                "--out-dir", str(out),
            ],
        )
        assert result.exit_code == 0, result.output
        metrics = json.loads((out / "metrics.json").read_text())
        assert "accuracy" in metrics and "config_hash" in metrics
        assert (out / "predictions.jsonl").exists()
        assert (out / "buckets.csv").read_text().startswith("# config_hash=")
        assert (out / "attention.csv").exists()

    def test_evaluate_without_checkpoint_exits_two(
        self, data_dir, built_index, tmp_path
    ):
        result = CliRunner().invoke(
            main,
            [
                "evaluate",
                "--corpus", str(data_dir / "tables.jsonl"),
                "--index", str(built_index),
                "--checkpoint", str(tmp_path / "missing.npz"),
                "--claims", str(data_dir / "eval.jsonl"),
                "--out-dir", str(tmp_path / "out"),
            ],
        )
        assert result.exit_code == 2

    def test_lineage_mismatch_refused_unless_forced(
        self, data_dir, trained_dir, tmp_path
    ):
        other_index = tmp_path / "other.npz"
        result = CliRunner().invoke(
            main,
            ["build-index", "--corpus", str(data_dir / "tables.jsonl"),
             "--out", str(other_index), "--gram-orders", "1,2,3"],
        )
        assert result.exit_code == 0, result.output
        args = [
            "evaluate",
            "--corpus", str(data_dir / "tables.jsonl"),
            "--index", str(other_index),
            "--checkpoint", str(trained_dir / "model.ckpt.npz"),
            "--claims", str(data_dir / "eval.jsonl"),
            "--out-dir", str(tmp_path / "out"),
        ]
        refused = CliRunner().invoke(main, args)
        assert refused.exit_code == 2
        assert "force" in refused.output
        forced = CliRunner().invoke(main, args + ["--force"])
        assert forced.exit_code == 0, forced.output

    def test_detect_insufficient_writes_curve(
        self, data_dir, built_index, trained_dir, tmp_path
    ):
        out = tmp_path / "detect"
        result = CliRunner().invoke(
            main,
            [
                "detect-insufficient",
                "--corpus", str(data_dir / "tables.jsonl"),
                "--index", str(built_index),
                "--checkpoint", str(trained_dir / "model.ckpt.npz"),
                "--claims", str(data_dir / "eval.jsonl"),
                "--out-dir", str(out),
            ],
        )
        assert result.exit_code == 0, result.output
        curve = (out / "pr_curve.csv").read_text().splitlines()
        assert curve[0].startswith("# config_hash=")
        assert curve[1] == "threshold,precision,recall"
        point = json.loads((out / "operating_point.json").read_text())
        assert {"threshold", "precision", "recall", "baseline_precision"} <= set(point)


class TestLinearizeCommand:
    def test_emits_claim_table_text_rows(self, data_dir, built_index, tmp_path):
        out = tmp_path / "lin"
        result = CliRunner().invoke(
            main,
            [
                "linearize",
                "--corpus", str(data_dir / "tables.jsonl"),
                "--index", str(built_index),
                "--claims", str(data_dir / "eval.jsonl"),
                "--out-dir", str(out),
                "--k", "2",
            ],
        )
        assert result.exit_code == 0, result.output
        lines = (out / "linearisations.jsonl").read_text().splitlines()
        rows = [json.loads(line) for line in lines[1:]]
        assert rows
        for row in rows[:5]:
            assert set(row) == {"claim_id", "table_id", "text"}
            assert " </s> row 1 is : " in row["text"]


class TestAblateCommand:
    def test_writes_four_variant_reports(self, data_dir, built_index, tmp_path):
        out = tmp_path / "abl"
        result = CliRunner().invoke(
            main,
            [
                "ablate",
                "--corpus", str(data_dir / "tables.jsonl"),
                "--index", str(built_index),
                "--train-claims", str(data_dir / "train.jsonl"),
                "--eval-claims", str(data_dir / "eval.jsonl"),
                "--out-dir", str(out),
                "--epochs", "1",
                *TINY_MODEL_FLAGS,
            ],
        )
        assert result.exit_code == 0, result.output
        payload = json.loads((out / "ablation.json").read_text())
        assert set(payload["variants"]) == {
            "full", "no_attention", "no_joint_objective", "neither",
        }


class TestExitCodes:
    def test_internal_invariant_violation_exits_three(
        self, data_dir, built_index, tmp_path, monkeypatch
    ):
        from tabverify import evalkit

        monkeypatch.setattr(evalkit, "ablate", lambda *a, **kw: {"full": None})
        result = CliRunner().invoke(
            main,
            [
                "ablate",
                "--corpus", str(data_dir / "tables.jsonl"),
                "--index", str(built_index),
                "--train-claims", str(data_dir / "train.jsonl"),
                "--eval-claims", str(data_dir / "eval.jsonl"),
                "--out-dir", str(tmp_path / "out"),
                "--epochs", "1",
            ],
        )
        assert result.exit_code == 3
        assert "invariant" in result.output


class TestConfigResolution:
    def test_config_file_supplies_defaults(self, data_dir, built_index, tmp_path):
        config = tmp_path / "run.cfg"
        out = tmp_path / "out"
        config.write_text(
            "# comment line\n"
            f"index = {built_index}\n"
            f"claims = {data_dir / 'eval.jsonl'}\n"
            f"out_dir = {out}\n"
            "k = 2\n"
        )
        result = CliRunner().invoke(main, ["--config", str(config), "retrieve"])
        assert result.exit_code == 0, result.output
        record = json.loads((out / "rankings.jsonl").read_text().splitlines()[1])
        assert len(record["ranked"]) == 2

    def test_flag_overrides_config_file(self, data_dir, built_index, tmp_path):
        config = tmp_path / "run.cfg"
        out = tmp_path / "out"
        config.write_text(f"index={built_index}\nclaims={data_dir / 'eval.jsonl'}\nk=2\n")
        result = CliRunner().invoke(
            main,
            ["--config", str(config), "retrieve", "--k", "3", "--out-dir", str(out)],
        )
        assert result.exit_code == 0, result.output
        record = json.loads((out / "rankings.jsonl").read_text().splitlines()[1])
        assert len(record["ranked"]) == 3

    def test_env_var_overrides_config_file(self, data_dir, built_index, tmp_path):
        config = tmp_path / "run.cfg"
        out = tmp_path / "out"
        config.write_text(f"index={built_index}\nclaims={data_dir / 'eval.jsonl'}\nk=2\n")
        result = CliRunner().invoke(
            main,
            ["--config", str(config), "retrieve", "--out-dir", str(out)],
            env={"TABVERIFY_RETRIEVE_K": "4"},
        )
        assert result.exit_code == 0, result.output
        record = json.loads((out / "rankings.jsonl").read_text().splitlines()[1])
        assert len(record["ranked"]) == 4

    def test_malformed_config_line_rejected(self, tmp_path):
        config = tmp_path / "bad.cfg"
        config.write_text("not a key value line\n")
        with pytest.raises(Exception):
            parse_config_file(str(config))
