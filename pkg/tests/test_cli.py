"""End-to-end command line workflow on a tiny on-disk dataset."""

import json

import pytest

from hybridkgc.cli import main, read_config_file
from hybridkgc.kg import DataError

from conftest import write_dataset


TRAIN = {
    "train": [
        ("a0", "r0", "a1"), ("a1", "r0", "a2"), ("a0", "r1", "a2"),
        ("a3", "r0", "a4"), ("a4", "r0", "a5"), ("a3", "r1", "a5"),
        ("a6", "r0", "a0"), ("a2", "r0", "a3"), ("a5", "r0", "a6"),
    ],
    "valid": [("a6", "r1", "a1"), ("a2", "r1", "a4")],
    "test": [("a4", "r1", "a6")],
}
IND = {
    "train": [
        ("b0", "r0", "b1"), ("b1", "r0", "b2"),
        ("b3", "r0", "b4"), ("b4", "r0", "b5"),
        ("b2", "r0", "b3"), ("b5", "r0", "b0"),
    ],
    "valid": [("b3", "r1", "b5")],
    "test": [("b0", "r1", "b2"), ("b1", "r1", "b3")],
}


@pytest.fixture(scope="module")
def dataset_root(tmp_path_factory):
    root = tmp_path_factory.mktemp("toyds")
    return write_dataset(root, "toy", "v1", TRAIN, IND)


@pytest.fixture(scope="module")
def workdir(tmp_path_factory):
    return tmp_path_factory.mktemp("cliout")


def run(*argv):
    return main([str(a) for a in argv])


def base_args(dataset_root):
    return ["--data-root", dataset_root, "--dataset", "toy", "--version", "v1"]


@pytest.fixture(scope="module")
def rules_path(dataset_root, workdir):
    out = workdir / "rules.txt"
    code = run("mine", *base_args(dataset_root), "--exhaustive", "--max-len", "2",
               "--pc", "0", "--min-support", "1", "--out", out)
    assert code == 0
    return out


class TestConfigFile:
    def test_parse_comments_and_dash_keys(self, tmp_path):
        p = tmp_path / "exp.cfg"
        p.write_text("# experiment defaults\nmax-len = 3\n\nruns=2 # trailing\n")
        assert read_config_file(str(p)) == {"max_len": "3", "runs": "2"}

    def test_malformed_line_rejected(self, tmp_path):
        p = tmp_path / "bad.cfg"
        p.write_text("this has no equals\n")
        with pytest.raises(DataError):
            read_config_file(str(p))

    def test_config_defaults_and_override(self, dataset_root, workdir, tmp_path):
        cfg = tmp_path / "mine.cfg"
        cfg.write_text("iterations = 50\nmax-len = 2\npc = 0\nmin-support = 1\n")
        out = workdir / "cfg_rules.txt"
        code = run("mine", *base_args(dataset_root), "--config", cfg, "--out", out)
        assert code == 0 and out.exists()
        # a flag on the command line wins over the config file
        out2 = workdir / "cfg_rules2.txt"
        code = run("mine", *base_args(dataset_root), "--config", cfg,
                   "--iterations", "10", "--out", out2)
        assert code == 0


class TestIngestAndStats:
    def test_ingest_report(self, dataset_root, workdir):
        out = workdir / "ingest.json"
        assert run("ingest", *base_args(dataset_root), "--out", out) == 0
        blob = json.loads(out.read_text())
        assert blob["dataset"] == "toy_v1"
        assert blob["train_graph"]["triples"] == len(TRAIN["train"]) + 3
        assert blob["num_rules"] is None

    def test_missing_dataset_flag_is_an_error(self, dataset_root):
        assert run("ingest", "--data-root", dataset_root) == 2

    def test_unknown_dataset_is_an_error(self, dataset_root):
        assert run("ingest", "--data-root", dataset_root, "--dataset", "nope") == 2

    def test_stats_with_rules(self, dataset_root, workdir, rules_path):
        out = workdir / "stats.json"
        assert run("stats", *base_args(dataset_root), "--rules", rules_path,
                   "--out", out) == 0
        blob = json.loads(out.read_text())
        assert blob["num_rules"] > 0
        total = (blob["pct_queries_no_evidence"]
                 + blob["pct_queries_single_evidence"])
        assert 0.0 <= total <= 100.0


class TestMine:
    def test_rule_file_written(self, rules_path):
        text = rules_path.read_text()
        assert " <= " in text
        assert "r1(X0,X1)" in text or "r0(X0,X1)" in text

    def test_conflicting_modes_rejected(self, dataset_root):
        assert run("mine", *base_args(dataset_root), "--exhaustive",
                   "--iterations", "5") == 2

    def test_mine_over_test_fact_graph(self, dataset_root, workdir):
        out = workdir / "testgraph_rules.txt"
        assert run("mine", *base_args(dataset_root), "--graph", "test",
                   "--iterations", "30", "--pc", "0", "--min-support", "1",
                   "--out", out) == 0
        assert out.exists()


class TestEval:
    def test_eval_rule_max_writes_report(self, dataset_root, workdir, rules_path, capsys):
        out = workdir / "eval.json"
        csv_out = workdir / "eval.csv"
        dump = workdir / "rankings.jsonl"
        code = run("eval", *base_args(dataset_root), "--strategy", "rule-max+shuffle",
                   "--rules", rules_path, "--runs", "2", "--out", out,
                   "--csv", csv_out, "--dump-rankings", dump)
        assert code == 0
        blob = json.loads(out.read_text())
        assert blob["strategy"] == "rule-max+shuffle"
        assert blob["queries"] == 2 * len(IND["test"])
        assert 0.0 <= blob["metrics"]["mrr"] <= 1.0
        header = csv_out.read_text().splitlines()[0]
        assert header.startswith("dataset,")
        records = [json.loads(line) for line in dump.read_text().splitlines()]
        assert len(records) == 2 * len(IND["test"])
        assert all("rank" in r and "gold" in r for r in records)

    def test_raw_and_reduced_settings(self, dataset_root, workdir, rules_path):
        out = workdir / "eval_raw.json"
        assert run("eval", *base_args(dataset_root), "--strategy", "noisy-or+shuffle",
                   "--rules", rules_path, "--runs", "1", "--raw",
                   "--setting", "reduced50", "--out", out) == 0
        blob = json.loads(out.read_text())
        assert blob["filtered"] is False
        assert blob["setting"] == "reduced50"

    def test_neural_strategy_without_checkpoint_fails(self, dataset_root, rules_path):
        assert run("eval", *base_args(dataset_root), "--strategy", "compgcn+shuffle",
                   "--rules", rules_path) == 2


class TestExplain:
    def test_supported_triple_with_dot(self, dataset_root, workdir, rules_path):
        out = workdir / "explain.json"
        dot = workdir / "explain.dot"
        code = run("explain", *base_args(dataset_root), "--rules", rules_path,
                   "--head", "b0", "--relation", "r1", "--tail", "b2",
                   "--dot", dot, "--out", out)
        assert code == 0
        blob = json.loads(out.read_text())
        assert blob["triple"] == ["b0", "r1", "b2"]
        # the chain rule r1 <= r0,r0 is mineable from the train graph and the
        # test fact graph holds the b0 -> b1 -> b2 chain, so this is supported
        assert blob["supported"] is True
        assert blob["evidence"]["matches"]
        assert blob["max_confidence"] > 0
        assert dot.read_text().startswith("digraph")

    def test_unknown_entity_is_an_error(self, dataset_root, rules_path):
        assert run("explain", *base_args(dataset_root), "--rules", rules_path,
                   "--head", "zz", "--relation", "r1", "--tail", "b2") == 2


class TestTrainAndNeuralEval:
    @pytest.mark.slow
    def test_nbf_checkpoint_roundtrip_through_eval(self, dataset_root, workdir, rules_path):
        model = workdir / "nbf.npz"
        code = run("train", *base_args(dataset_root), "--arch", "nbf",
                   "--epochs", "2", "--patience", "2", "--layers", "2",
                   "--hidden", "8", "--negatives", "4", "--out", model)
        assert code == 0
        out = workdir / "eval_nbf.json"
        assert run("eval", *base_args(dataset_root), "--strategy", "rule-max+nbf",
                   "--rules", rules_path, "--nbf-model", model, "--runs", "1",
                   "--out", out) == 0
        blob = json.loads(out.read_text())
        assert blob["strategy"] == "rule-max+nbf"

    @pytest.mark.slow
    def test_aggregator_needs_rules(self, dataset_root, workdir):
        assert run("train", *base_args(dataset_root), "--arch", "rgcn",
                   "--epochs", "1", "--out", workdir / "x.npz") == 2

    @pytest.mark.slow
    def test_aggregator_training_and_eval(self, dataset_root, workdir, rules_path):
        model = workdir / "rgcn.npz"
        code = run("train", *base_args(dataset_root), "--arch", "rgcn",
                   "--rules", rules_path, "--epochs", "2", "--layers", "2",
                   "--hidden", "8", "--out", model)
        assert code == 0
        out = workdir / "eval_rgcn.json"
        assert run("eval", *base_args(dataset_root), "--strategy", "rgcn+shuffle",
                   "--rules", rules_path, "--aggregator-model", model,
                   "--runs", "1", "--out", out) == 0
        assert json.loads(out.read_text())["strategy"] == "rgcn+shuffle"

    @pytest.mark.slow
    def test_arch_checkpoint_mismatch(self, dataset_root, workdir, rules_path):
        model = workdir / "rgcn.npz"
        if not model.exists():
            pytest.skip("aggregator checkpoint not built")
        assert run("eval", *base_args(dataset_root), "--strategy", "compgcn+shuffle",
                   "--rules", rules_path, "--aggregator-model", model) == 2


class TestAblate:
    @pytest.mark.slow
    def test_budget_sweep_rows(self, dataset_root, workdir):
        out = workdir / "ablate.json"
        csv_out = workdir / "ablate.csv"
        code = run("ablate", *base_args(dataset_root), "--sweep", "budget",
                   "--budgets", "0.2", "--epochs", "1", "--out", out,
                   "--csv", csv_out)
        assert code == 0
        rows = json.loads(out.read_text())
        # one structural row plus one aggregator row per budget point
        assert len(rows) == 2
        assert rows[0]["strategy"] == "rule-max+shuffle"
        assert rows[1]["strategy"] == "compgcn+shuffle"
        assert "val_metric" in rows[1]
        assert {"mrr", "hits10", "hits10_reduced"} <= set(rows[0])
        assert csv_out.exists()

    @pytest.mark.slow
    def test_topk_sweep_rows(self, dataset_root, workdir):
        out = workdir / "ablate_topk.json"
        code = run("ablate", *base_args(dataset_root), "--sweep", "topk",
                   "--topk-values", "2,5", "--budget-seconds", "0.2",
                   "--epochs", "1", "--out", out)
        assert code == 0
        rows = json.loads(out.read_text())
        assert [r["value"] for r in rows] == [2, 5]
        assert all(r["sweep"] == "topk" for r in rows)
