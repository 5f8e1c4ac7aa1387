"""Command-line entry point.

Every subcommand prints one JSON summary line on stdout and exits 0 on
success, 1 on a runtime failure and 2 on a usage or configuration error.
"""

from __future__ import annotations

import argparse
import json
import sys
from dataclasses import replace
from pathlib import Path

from . import config as cfgmod
from .attribution import attribution_matrix
from .corpus import corpus_vocab, gen_corpus, read_corpus, write_corpus
from .experiment import ExperimentConfig, load_config, run_experiment, write_report
from .facts import ingest
from .graph import export_dot, export_json, import_json
from .metrics import ccs_report, write_ccs_csv
from .model import generate, init_model, load_checkpoint, save_checkpoint
from .reweight import generate_reweighted, init_gat
from .training import train


class UsageError(Exception):
    pass


def _common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", metavar="PATH", help="JSON experiment config (unknown keys are errors)")
    p.add_argument("--set", metavar="KEY=VALUE", action="append", default=[], dest="overrides",
                   help="override a config entry by dotted path, e.g. train.max_steps=200 (repeatable)")
    p.add_argument("--out", metavar="DIR", default="out", help="output directory (default: out)")
    p.add_argument("--seed", type=int, metavar="N",
                   help="top-level seed; replaces the corpus/model/train seeds (eval: the seed list)")
    p.add_argument("--quiet", action="store_true", help="suppress progress messages on stderr")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="causal-gat", description="Causal attribution graphs and "
                                     "fact-anchored attention re-weighting for a toy transformer.")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-corpus", help="write the synthetic fact corpus")
    _common(p)

    p = sub.add_parser("train", help="train a model on a corpus and write a checkpoint")
    _common(p)
    p.add_argument("--corpus", metavar="DIR", help="corpus directory (default: generate from the config)")

    p = sub.add_parser("generate", help="greedy decoding from a checkpoint")
    _common(p)
    p.add_argument("--checkpoint", metavar="PATH", required=True, help="model checkpoint (JSON)")
    p.add_argument("--prompt", required=True, help="whitespace-separated prompt tokens")
    p.add_argument("--max-new-tokens", type=int, default=3, help="tokens to generate (default: 3)")

    p = sub.add_parser("audit", help="causal graph, CCS and re-weighted decoding for one prompt")
    _common(p)
    p.add_argument("--checkpoint", metavar="PATH", required=True, help="model checkpoint (JSON)")
    p.add_argument("--corpus", metavar="DIR", required=True, help="corpus directory holding facts.jsonl")
    p.add_argument("--prompt", required=True, help="whitespace-separated prompt tokens")
    p.add_argument("--max-new-tokens", type=int, default=3, help="tokens to generate (default: 3)")

    p = sub.add_parser("eval", help="baseline vs. re-weighted decoding across seeds")
    _common(p)

    p = sub.add_parser("export-graph", help="convert a graph JSON file to DOT (or normalized JSON)")
    _common(p)
    p.add_argument("--graph", metavar="PATH", required=True, help="graph JSON written by audit")
    p.add_argument("--format", choices=("dot", "json"), default="dot", help="output format (default: dot)")
    return parser


def _load_cfg(args) -> ExperimentConfig:
    text = None
    if args.config:
        try:
            text = Path(args.config).read_text()
        except OSError as exc:
            raise UsageError(f"cannot read config: {exc}") from None
    cfg = load_config(text, args.overrides)
    if args.seed is not None:
        cfg = replace(cfg, corpus=replace(cfg.corpus, seed=args.seed), model=replace(cfg.model, seed=args.seed),
                      train=replace(cfg.train, seed=args.seed), eval=replace(cfg.eval, seeds=[args.seed]))
    return cfg


def _log(args):
    if args.quiet:
        return lambda msg: None
    return lambda msg: print(msg, file=sys.stderr, flush=True)


def _corpus(cfg: ExperimentConfig, corpus_dir):
    if corpus_dir:
        return read_corpus(corpus_dir)
    return gen_corpus(cfg.corpus)


def cmd_gen_corpus(args, cfg: ExperimentConfig) -> dict:
    corpus = gen_corpus(cfg.corpus)
    paths = write_corpus(corpus, args.out)
    return {"facts": len(corpus.facts), "train": len(corpus.train), "test": len(corpus.test),
            "files": {k: str(v) for k, v in sorted(paths.items())}}


def cmd_train(args, cfg: ExperimentConfig) -> dict:
    corpus = _corpus(cfg, args.corpus)
    vocab = corpus_vocab(corpus, cfg.corpus).padded(cfg.model.vocab_size)
    params = init_model(cfg.model, vocab.tokens)
    log = _log(args)
    every = max(cfg.train.max_steps // 10, 1)

    def progress(step, _p):
        if (step + 1) % every == 0:
            log(f"step {step + 1}/{cfg.train.max_steps}")

    res = train(params, corpus.train, vocab, cfg.train, callback=progress)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    save_checkpoint(res.params, out / "checkpoint.json")
    with open(out / "loss.csv", "w") as fh:
        fh.write("step,loss,cross_entropy,penalty\n")
        for i, (a, b, c) in enumerate(zip(res.loss, res.cross_entropy, res.penalty)):
            fh.write(f"{i},{a!r},{b!r},{c!r}\n")
    return {"checkpoint": str(out / "checkpoint.json"), "steps": len(res.loss),
            "initial_loss": res.loss[0] if res.loss else None, "final_loss": res.loss[-1] if res.loss else None}


def _encode_prompt(params, text: str) -> list[int]:
    index = {t: i for i, t in enumerate(params.vocab)}
    toks = text.split()
    if not toks:
        raise UsageError("--prompt is empty")
    unknown = [t for t in toks if t not in index]
    if unknown:
        raise UsageError(f"prompt tokens not in the checkpoint vocabulary: {unknown}")
    return [index[t] for t in toks]


def cmd_generate(args, cfg: ExperimentConfig) -> dict:
    params = load_checkpoint(args.checkpoint)
    ids, _ = generate(params, _encode_prompt(params, args.prompt), args.max_new_tokens)
    return {"prompt": args.prompt.split(), "output": [params.vocab[i] for i in ids]}


def cmd_audit(args, cfg: ExperimentConfig) -> dict:
    params = load_checkpoint(args.checkpoint)
    prompt = _encode_prompt(params, args.prompt)
    corpus = read_corpus(args.corpus)
    store = ingest(corpus.facts)
    g = cfg.gat
    gat = init_gat(params.config.embed_dim + 2, g.out_features, g.num_heads, g.leaky_slope, g.dropout,
                   cfg.model.seed)
    policy = cfg.reweight
    rw = generate_reweighted(params, prompt, store, gat, args.max_new_tokens, policy, final_graph=True)
    base = generate_reweighted(params, prompt, store, gat, args.max_new_tokens,
                               replace(policy, tau_percentile=0.0), final_graph=True)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    (out / "graph.json").write_text(export_json(rw.graph))
    (out / "graph.dot").write_text(export_dot(rw.graph))
    (out / "baseline_graph.json").write_text(export_json(base.graph))
    (out / "diagnostics.jsonl").write_text(rw.diagnostics_jsonl())
    (out / "attributions.json").write_text(
        attribution_matrix(params, prompt + rw.tokens, len(prompt), policy.ig_steps, policy.ig_baseline).dumps()
        + "\n")
    rows = ccs_report([d.to_json() for d in rw.diagnostics], [d.to_json() for d in base.diagnostics],
                      prompt, prompt)
    (out / "ccs.csv").write_text(write_ccs_csv(rows))
    return {"prompt": args.prompt.split(), "output": [params.vocab[i] for i in rw.tokens],
            "baseline_output": [params.vocab[i] for i in base.tokens],
            "low_ccs": [int(x) for x in rw.graph.ccs_vector().low],
            "files": sorted(p.name for p in out.iterdir())}


def cmd_eval(args, cfg: ExperimentConfig) -> dict:
    report = run_experiment(cfg, _log(args))
    paths = write_report(report, args.out)
    s = report["summary"]
    return {"config_digest": report["config_digest"], "seeds": report["seeds"],
            "baseline_hallucination_rate": s["baseline"]["hallucination_rate"]["mean"],
            "reweighted_hallucination_rate": s["reweighted"]["hallucination_rate"]["mean"],
            "accuracy_delta": s["accuracy_delta"]["mean"],
            "seeds_with_reduction": s["seeds_with_reduction"],
            "files": {k: str(v) for k, v in sorted(paths.items())}}


def cmd_export_graph(args, cfg: ExperimentConfig) -> dict:
    try:
        graph = import_json(Path(args.graph).read_text())
    except OSError as exc:
        raise UsageError(f"cannot read graph: {exc}") from None
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    target = out / ("graph.dot" if args.format == "dot" else "graph.json")
    target.write_text(export_dot(graph) if args.format == "dot" else export_json(graph))
    return {"nodes": len(graph.nodes), "edges": len(graph.edges), "file": str(target)}


COMMANDS = {
    "gen-corpus": cmd_gen_corpus,
    "train": cmd_train,
    "generate": cmd_generate,
    "audit": cmd_audit,
    "eval": cmd_eval,
    "export-graph": cmd_export_graph,
}


def run_cli(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:          # argparse: 0 for --help, 2 for usage errors
        return int(exc.code or 0)
    try:
        cfg = _load_cfg(args)
        summary = COMMANDS[args.command](args, cfg)
    except (UsageError, cfgmod.ConfigError) as exc:
        print(f"causal-gat {args.command}: error: {exc}", file=sys.stderr)
        return 2
    except Exception as exc:  # noqa: BLE001 - report any component failure as a runtime error
        print(f"causal-gat {args.command}: failed: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 1
    print(json.dumps({"command": args.command, "status": "ok", **summary}, sort_keys=True))
    return 0


def main() -> None:
    sys.exit(run_cli())


if __name__ == "__main__":
    main()
