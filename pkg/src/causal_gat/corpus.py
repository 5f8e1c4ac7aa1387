"""Synthetic fact-recall corpus with distractors and annotated evidence spans.

Each episode reads::

    F r s1 v1  F r s2 v2  F r s3 v3  Q r s2  ->  r s2 v2

The prompt lists one gold fact and ``num_distractors_per_prompt`` distractor
facts that share its relation but not its subject; the target restates the
queried relation and subject and then gives the value.

A ``counterfactual_fraction`` of training episodes restate their facts with
freshly drawn values, so the answer can only be read off the prompt; the rest
state the stored facts and reward memorization.  Test episodes always state
the stored facts.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .facts import Fact, read_facts, write_facts
from .seeding import derive_seed

FACT_MARK = "F"
QUERY_MARK = "Q"
PAD = "<pad>"
SPECIALS = (PAD, FACT_MARK, QUERY_MARK)


@dataclass
class VocabProfile:
    num_subjects: int = 100
    num_relations: int = 4
    num_values: int = 60
    subject_prefix: str = "s"
    relation_prefix: str = "r"
    value_prefix: str = "v"


@dataclass
class CorpusSpec:
    num_facts: int = 200
    num_distractors_per_prompt: int = 2
    vocab: VocabProfile = field(default_factory=VocabProfile)
    train_fraction: float = 0.8
    test_fraction: float = 0.2
    num_train_episodes: int = 4000
    num_test_episodes: int = 200
    counterfactual_fraction: float = 0.5   # training episodes whose stated values are resampled
    seed: int = 0

    def validate(self) -> None:
        if self.num_facts < 10:
            raise ValueError(f"num_facts must be >= 10 (got {self.num_facts})")
        if abs(self.train_fraction + self.test_fraction - 1.0) > 1e-12:
            raise ValueError("train_fraction + test_fraction must equal 1")
        if min(self.train_fraction, self.test_fraction) <= 0:
            raise ValueError("split fractions must be positive")
        if not 0.0 <= self.counterfactual_fraction <= 1.0:
            raise ValueError("counterfactual_fraction must lie in [0, 1]")
        if self.num_distractors_per_prompt < 0:
            raise ValueError("num_distractors_per_prompt must be >= 0")
        v = self.vocab
        if self.num_facts > v.num_subjects * v.num_relations:
            raise ValueError("num_facts exceeds the number of distinct (subject, relation) pairs")
        if v.num_values < self.num_distractors_per_prompt + 1:
            raise ValueError("num_values too small for distinct distractor values")


@dataclass
class Episode:
    tokens: list[str]
    evidence_span: tuple[int, int]
    target_span: tuple[int, int]

    @property
    def prompt(self) -> list[str]:
        return self.tokens[: self.target_span[0]]

    @property
    def target(self) -> list[str]:
        return self.tokens[self.target_span[0]: self.target_span[1]]

    @property
    def answer(self) -> str:
        return self.tokens[self.target_span[1] - 1]

    @property
    def evidence(self) -> list[str]:
        return self.tokens[self.evidence_span[0]: self.evidence_span[1]]

    @property
    def context_tokens(self) -> set[str]:
        """Tokens of every fact statement shown in the prompt (gold and distractors)."""
        prompt = self.prompt
        end = prompt.index(QUERY_MARK) if QUERY_MARK in prompt else len(prompt)
        return {tok for tok in prompt[:end] if tok not in SPECIALS}

    @property
    def query(self) -> list[str]:
        prompt = self.prompt
        if QUERY_MARK not in prompt:
            return list(prompt)
        return prompt[len(prompt) - prompt[::-1].index(QUERY_MARK):]

    def to_json(self) -> dict:
        return {"tokens": list(self.tokens), "evidence_span": list(self.evidence_span),
                "target_span": list(self.target_span)}

    @classmethod
    def from_json(cls, d: dict) -> "Episode":
        unknown = set(d) - {"tokens", "evidence_span", "target_span"}
        if unknown:
            raise ValueError(f"unknown corpus record keys: {sorted(unknown)}")
        ep = cls(list(d["tokens"]), tuple(d["evidence_span"]), tuple(d["target_span"]))
        n = len(ep.tokens)
        for name, (a, b) in (("evidence_span", ep.evidence_span), ("target_span", ep.target_span)):
            if not 0 <= a <= b <= n:
                raise ValueError(f"{name} {[a, b]} outside sequence of length {n}")
        return ep


@dataclass
class Corpus:
    facts: list[Fact]
    train_facts: list[Fact]
    test_facts: list[Fact]
    train: list[Episode]
    test: list[Episode]


def _make_episode(gold: Fact, distractors: Sequence[Fact], order: np.ndarray) -> Episode:
    stated = [gold, *distractors]
    tokens: list[str] = []
    evidence = (0, 0)
    for k in order:
        f = stated[k]
        start = len(tokens) + 1
        tokens += [FACT_MARK, f.relation, f.subject, f.value]
        if k == 0:
            evidence = (start, start + 3)
    tokens += [QUERY_MARK, gold.relation, gold.subject]
    t0 = len(tokens)
    tokens += [gold.relation, gold.subject, gold.value]
    return Episode(tokens, evidence, (t0, len(tokens)))


def _episodes(facts: list[Fact], count: int, n_distract: int, rng: np.random.Generator,
              counterfactual: float = 0.0, values: Sequence[str] = ()) -> list[Episode]:
    by_rel: dict[str, list[Fact]] = {}
    for f in facts:
        by_rel.setdefault(f.relation, []).append(f)
    out = []
    for _ in range(count):
        gold = facts[rng.integers(len(facts))]
        pool = [f for f in by_rel[gold.relation] if f.subject != gold.subject and f.value != gold.value]
        picked: list[Fact] = []
        for idx in rng.permutation(len(pool)):
            cand = pool[idx]
            if all(cand.value != p.value and cand.subject != p.subject for p in picked):
                picked.append(cand)
            if len(picked) == n_distract:
                break
        if len(picked) < n_distract:
            raise ValueError(f"not enough distractor facts for relation {gold.relation!r}")
        order = rng.permutation(n_distract + 1)
        if counterfactual and rng.random() < counterfactual:
            # same subjects and relation, fresh distinct values: only the prompt can tell the answer
            new = rng.choice(len(values), size=n_distract + 1, replace=False)
            gold = Fact(gold.subject, gold.relation, values[new[0]])
            picked = [Fact(f.subject, f.relation, values[i]) for f, i in zip(picked, new[1:])]
        out.append(_make_episode(gold, picked, order))
    return out


def gen_corpus(spec: CorpusSpec) -> Corpus:
    """Random facts, a fact-level train/test split, and episodes drawn within each split."""
    spec.validate()
    v = spec.vocab
    rng = np.random.default_rng(derive_seed(spec.seed, "corpus"))
    pairs = rng.choice(v.num_subjects * v.num_relations, size=spec.num_facts, replace=False)
    values = rng.integers(v.num_values, size=spec.num_facts)
    facts = [
        Fact(f"{v.subject_prefix}{p // v.num_relations}", f"{v.relation_prefix}{p % v.num_relations}",
             f"{v.value_prefix}{val}")
        for p, val in zip(pairs, values)
    ]
    n_test = max(1, int(round(spec.test_fraction * spec.num_facts)))
    perm = rng.permutation(spec.num_facts)
    test_facts = [facts[i] for i in sorted(perm[:n_test])]
    train_facts = [facts[i] for i in sorted(perm[n_test:])]
    ep_rng = np.random.default_rng(derive_seed(spec.seed, "corpus.episodes"))
    value_names = [f"{v.value_prefix}{i}" for i in range(v.num_values)]
    train = _episodes(train_facts, spec.num_train_episodes, spec.num_distractors_per_prompt, ep_rng,
                      spec.counterfactual_fraction, value_names)
    test = _episodes(test_facts, spec.num_test_episodes, spec.num_distractors_per_prompt, ep_rng)
    return Corpus(facts, train_facts, test_facts, train, test)


# ----------------------------------------------------------------------
# vocabulary
# ----------------------------------------------------------------------


class Vocab:
    """Whitespace token <-> id map; specials first, then tokens in sorted order."""

    def __init__(self, tokens: Sequence[str]):
        self.tokens = list(tokens)
        self.index = {t: i for i, t in enumerate(self.tokens)}
        if len(self.index) != len(self.tokens):
            raise ValueError("duplicate tokens in vocabulary")

    @classmethod
    def build(cls, sequences: Iterable[Sequence[str]], profile: VocabProfile | None = None) -> "Vocab":
        seen = set()
        for seq in sequences:
            seen.update(seq)
        if profile is not None:
            seen.update(f"{profile.subject_prefix}{i}" for i in range(profile.num_subjects))
            seen.update(f"{profile.relation_prefix}{i}" for i in range(profile.num_relations))
            seen.update(f"{profile.value_prefix}{i}" for i in range(profile.num_values))
        return cls(list(SPECIALS) + sorted(seen - set(SPECIALS)))

    def __len__(self) -> int:
        return len(self.tokens)

    def padded(self, size: int) -> "Vocab":
        """Extend with placeholder tokens up to ``size`` entries (ids keep their meaning)."""
        if size < len(self.tokens):
            raise ValueError(f"vocabulary of {len(self.tokens)} tokens does not fit vocab_size {size}")
        return Vocab(self.tokens + [f"<unused{i}>" for i in range(size - len(self.tokens))])

    def encode(self, tokens: Sequence[str]) -> list[int]:
        try:
            return [self.index[t] for t in tokens]
        except KeyError as exc:
            raise ValueError(f"unknown token {exc.args[0]!r}") from None

    def decode(self, ids: Sequence[int]) -> list[str]:
        return [self.tokens[i] for i in ids]


def corpus_vocab(corpus: Corpus, spec: CorpusSpec) -> Vocab:
    return Vocab.build((e.tokens for e in corpus.train + corpus.test), spec.vocab)


# ----------------------------------------------------------------------
# files
# ----------------------------------------------------------------------


def write_episodes(episodes: Iterable[Episode], path) -> None:
    with open(path, "w") as fh:
        for e in episodes:
            fh.write(json.dumps(e.to_json(), separators=(",", ":")) + "\n")


def read_episodes(path) -> list[Episode]:
    return [Episode.from_json(json.loads(line)) for line in Path(path).read_text().splitlines() if line.strip()]


def write_corpus(corpus: Corpus, out_dir) -> dict[str, Path]:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    paths = {"facts": out / "facts.jsonl", "train": out / "train.jsonl", "test": out / "test.jsonl",
             "test_facts": out / "test_facts.jsonl"}
    write_facts(corpus.facts, paths["facts"])
    write_facts(corpus.test_facts, paths["test_facts"])
    write_episodes(corpus.train, paths["train"])
    write_episodes(corpus.test, paths["test"])
    return paths


def read_corpus(in_dir) -> Corpus:
    d = Path(in_dir)
    facts = read_facts(d / "facts.jsonl")
    test_facts = read_facts(d / "test_facts.jsonl")
    test_keys = {(f.subject, f.relation) for f in test_facts}
    train_facts = [f for f in facts if (f.subject, f.relation) not in test_keys]
    return Corpus(facts, train_facts, test_facts, read_episodes(d / "train.jsonl"), read_episodes(d / "test.jsonl"))
