import json
import re
from pathlib import Path

import pytest

from causal_gat import config as cfgmod
from causal_gat.cli import _load_cfg, build_parser, run_cli
from causal_gat.experiment import (REFERENCE_RESULTS, _condition_stats, answer_of, load_config, run_experiment,
                                   table_csv, validate_report, write_report)
from causal_gat.facts import ingest
from causal_gat.model import generate
from causal_gat.reweight import generate_reweighted, init_gat

PUBLISHED = Path(__file__).resolve().parents[1] / "paper.md"

SMALL = {
    "corpus": {"num_facts": 60, "num_train_episodes": 60, "num_test_episodes": 6,
               "vocab": {"num_subjects": 60, "num_relations": 2, "num_values": 15}},
    "model": {"vocab_size": 100, "context_length": 24, "num_layers": 1, "num_heads": 2, "embed_dim": 8},
    "train": {"max_steps": 8, "batch_size": 4},
    "reweight": {"ig_steps": 8},
    "eval": {"seeds": [1, 2], "max_test_episodes": 3, "ccs_episodes": 1},
}


def _write_cfg(tmp_path, data=SMALL):
    p = tmp_path / "cfg.json"
    p.write_text(json.dumps(data))
    return str(p)


def _summary(capsys) -> dict:
    line = capsys.readouterr().out.strip().splitlines()[-1]
    return json.loads(line)


# ----------------------------------------------------------------------
# config
# ----------------------------------------------------------------------


def test_unknown_key_is_named():
    with pytest.raises(cfgmod.ConfigError, match="learning_rat"):
        load_config(json.dumps({"train": {"learning_rat": 0.1}}))


def test_overrides_apply_and_change_digest():
    base = load_config()
    cfg = load_config(overrides=["train.max_steps=17", "eval.seeds=[3]"])
    assert cfg.train.max_steps == 17 and cfg.eval.seeds == [3]
    assert cfg.digest() != base.digest()
    assert load_config().digest() == base.digest()


def test_invalid_value_rejected():
    with pytest.raises(cfgmod.ConfigError):
        load_config(overrides=["eval.seeds=[]"])


def test_cli_unknown_config_key_exits_2(tmp_path, capsys):
    path = _write_cfg(tmp_path, {"model": {"num_layer": 3}})
    assert run_cli(["gen-corpus", "--config", path, "--out", str(tmp_path)]) == 2
    assert "num_layer" in capsys.readouterr().err


def test_cli_unknown_override_exits_2(tmp_path, capsys):
    assert run_cli(["gen-corpus", "--set", "reweight.tau=3", "--out", str(tmp_path)]) == 2
    assert "reweight.tau" in capsys.readouterr().err


def test_cli_usage_error_exits_2(capsys):
    assert run_cli(["no-such-command"]) == 2
    assert run_cli(["generate", "--prompt", "a"]) == 2       # --checkpoint missing


def _flags(parser):
    return {s for a in parser._actions for s in a.option_strings if s.startswith("--")}


@pytest.mark.parametrize("command", ["gen-corpus", "train", "generate", "audit", "eval", "export-graph"])
def test_help_documents_every_flag(command, capsys):
    assert run_cli([command, "--help"]) == 0
    text = capsys.readouterr().out
    sub = build_parser()._subparsers._group_actions[0].choices[command]
    flags = _flags(sub)
    assert {"--config", "--set", "--out", "--seed", "--quiet"} <= flags
    for flag in flags:
        assert re.search(re.escape(flag) + r"\b", text), flag
    for action in sub._actions:
        if action.option_strings and action.option_strings[0] != "-h":
            assert action.help, action.option_strings


# ----------------------------------------------------------------------
# pipeline
# ----------------------------------------------------------------------


def test_cli_pipeline(tmp_path, capsys):
    cfg = _write_cfg(tmp_path)
    common = ["--config", cfg, "--quiet"]
    assert run_cli(["gen-corpus", *common, "--out", str(tmp_path / "corpus")]) == 0
    assert _summary(capsys)["facts"] == 60

    assert run_cli(["train", *common, "--corpus", str(tmp_path / "corpus"), "--out", str(tmp_path / "model")]) == 0
    s = _summary(capsys)
    assert s["steps"] == 8 and Path(s["checkpoint"]).exists()
    ckpt = s["checkpoint"]

    test_line = (tmp_path / "corpus" / "test.jsonl").read_text().splitlines()[0]
    tokens = json.loads(test_line)["tokens"]
    prompt = " ".join(tokens[:json.loads(test_line)["target_span"][0]])

    assert run_cli(["generate", *common, "--checkpoint", ckpt, "--prompt", prompt]) == 0
    generated = _summary(capsys)["output"]
    assert len(generated) == 3

    # tau = 0 flags nothing, so the plan is the identity and decoding matches generate
    audit_dir = tmp_path / "audit"
    assert run_cli(["audit", *common, "--set", "reweight.tau_percentile=0", "--checkpoint", ckpt,
                    "--corpus", str(tmp_path / "corpus"), "--prompt", prompt, "--out", str(audit_dir)]) == 0
    s = _summary(capsys)
    assert s["output"] == generated == s["baseline_output"]
    for name in ("graph.json", "graph.dot", "diagnostics.jsonl", "attributions.json", "ccs.csv"):
        assert (audit_dir / name).exists()

    assert run_cli(["export-graph", *common, "--graph", str(audit_dir / "graph.json"),
                    "--out", str(tmp_path / "exp")]) == 0
    assert (tmp_path / "exp" / "graph.dot").read_bytes() == (audit_dir / "graph.dot").read_bytes()
    assert run_cli(["export-graph", *common, "--graph", str(audit_dir / "graph.json"), "--format", "json",
                    "--out", str(tmp_path / "exp")]) == 0
    assert (tmp_path / "exp" / "graph.json").read_bytes() == (audit_dir / "graph.json").read_bytes()


def test_missing_checkpoint_is_runtime_failure(tmp_path, capsys):
    assert run_cli(["generate", "--checkpoint", str(tmp_path / "none.json"), "--prompt", "F r0"]) == 1
    assert "failed" in capsys.readouterr().err


def test_train_is_byte_deterministic(tmp_path, capsys):
    cfg = _write_cfg(tmp_path)
    for d in ("a", "b"):
        assert run_cli(["train", "--config", cfg, "--quiet", "--out", str(tmp_path / d)]) == 0
    assert (tmp_path / "a" / "checkpoint.json").read_bytes() == (tmp_path / "b" / "checkpoint.json").read_bytes()


def test_seed_flag_fans_out(tmp_path):
    cfg = _write_cfg(tmp_path)
    args = build_parser().parse_args(["eval", "--config", cfg, "--seed", "9"])
    c = _load_cfg(args)
    assert (c.corpus.seed, c.model.seed, c.train.seed, c.eval.seeds) == (9, 9, 9, [9])


# ----------------------------------------------------------------------
# experiment report
# ----------------------------------------------------------------------


@pytest.fixture(scope="module")
def small_report():
    return run_experiment(load_config(json.dumps(SMALL)))


def test_report_validates(small_report):
    validate_report(small_report)
    assert small_report["seeds"] == [1, 2]
    assert small_report["summary"]["num_seeds"] == 2
    for s in small_report["per_seed"]:
        for cond in ("baseline", "reweighted"):
            c = s[cond]
            total = c["hallucination_rate"] + c["factual_accuracy"] + c["in_evidence_wrong_rate"]
            assert abs(total - 1.0) <= 1e-12


def test_report_rejects_tampering(small_report):
    bad = json.loads(json.dumps(small_report))
    bad["config"]["train"]["max_steps"] = 9
    with pytest.raises(ValueError, match="digest"):
        validate_report(bad)
    bad = json.loads(json.dumps(small_report))
    bad["per_seed"][0]["baseline"]["counts"]["correct"] += 1
    with pytest.raises(ValueError, match="partition"):
        validate_report(bad)


def test_identity_policy_rows_identical():
    cfg = load_config(json.dumps(SMALL), ["reweight.tau_percentile=0"])
    report = run_experiment(cfg)
    for s in report["per_seed"]:
        assert s["baseline"] == s["reweighted"]
        assert s["relative_hallucination_reduction"] == 0.0 and s["accuracy_delta"] == 0.0
    rows = table_csv(report).splitlines()[1:]
    for b, r in zip(rows[::2], rows[1::2]):
        assert b.split(",")[2:] == r.split(",")[2:]


def test_write_report_files(small_report, tmp_path):
    paths = write_report(small_report, tmp_path)
    assert json.loads(paths["report"].read_text()) == json.loads(json.dumps(small_report))
    head = paths["ccs"].read_text().splitlines()[0]
    assert head == "seed,episode,position,token,ccs_before,ccs_after,suppressed"
    assert len(paths["table"].read_text().splitlines()) == 1 + 2 * 2


def test_reference_rows_match_published_table():
    text = PUBLISHED.read_text()
    for row in REFERENCE_RESULTS["rows"]:
        h = f"{100 * row['hallucination_rate']:.1f}"
        a = f"{100 * row['factual_accuracy']:.1f}"
        assert re.search(re.escape(h) + r"%?[\s|]+" + re.escape(a) + "%", text), row
    head = REFERENCE_RESULTS["headline"]
    assert f"{100 * head['relative_hallucination_reduction']:.1f}%" in text
    assert f"{100 * head['factual_accuracy_improvement']:.1f}%" in text


def test_reference_rows_are_not_run_outputs(small_report):
    assert small_report["reference_results"] == REFERENCE_RESULTS
    assert small_report["summary"]["baseline"]["hallucination_rate"]["mean"] != 0.342


def test_eval_on_test_split_seed_42_does_not_increase_hallucination(trained_42, default_corpus_42):
    """Seed-42 model (500 steps): re-weighted hallucination count <= baseline on the 200-item test split."""
    spec, corpus, vocab = default_corpus_42
    cfg = load_config()
    params = trained_42.params
    store = ingest(corpus.facts)
    gat = init_gat(params.config.embed_dim + 2, seed=42)
    policy = cfg.reweight
    base, rw = [], []
    for ep in corpus.test:
        prompt = vocab.encode(ep.prompt)
        base.append(answer_of(generate(params, prompt, 3)[0], ep, vocab))
        rw.append(answer_of(generate_reweighted(params, prompt, store, gat, 3, policy).tokens, ep, vocab))
    b, r = _condition_stats(base, corpus.test), _condition_stats(rw, corpus.test)
    print("seed 42 baseline", b["counts"], "reweighted", r["counts"])
    assert r["counts"]["hallucinated"] <= b["counts"]["hallucinated"]
