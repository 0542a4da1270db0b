"""Small generated NLI corpora with gold constituency and dependency parses.

Sentences follow ``[adj] noun verb [[adj] noun]``. The constituency tree is
``( NP VP )`` with ``NP = ( adj noun )`` and ``VP = ( verb NP )``; in the
dependency tree the verb heads both nouns and each adjective hangs off its
noun.
"""

from __future__ import annotations

from dataclasses import dataclass
from importlib import resources
from pathlib import Path

import numpy as np

from .data import LABEL_INDEX, Example, ParseTree, load_corpus, parse_conll, parse_sexpr, write_corpus, write_dep_sidecar

NOUNS = ("dog", "cat", "child", "man", "woman", "horse")
ADJECTIVES = ("big", "small", "red", "old")
VERBS = ("chases", "sees", "follows")
INTRANSITIVE = ("sleeps", "runs", "sits")

OVERFIT_FILE = "overfit50.jsonl"
OVERFIT_SIDECAR = "overfit50.dep"


@dataclass(frozen=True)
class Phrase:
    noun: str
    adj: str | None = None

    def tokens(self) -> list[str]:
        return [self.adj, self.noun] if self.adj else [self.noun]

    def sexpr(self) -> str:
        return f"( {self.adj} {self.noun} )" if self.adj else self.noun


@dataclass(frozen=True)
class Clause:
    subj: Phrase
    verb: str
    obj: Phrase | None = None

    def tokens(self) -> list[str]:
        out = self.subj.tokens() + [self.verb]
        return out + self.obj.tokens() if self.obj else out

    def constituency(self) -> ParseTree:
        vp = f"( {self.verb} {self.obj.sexpr()} )" if self.obj else self.verb
        return parse_sexpr(f"( {self.subj.sexpr()} {vp} )")

    def dependency(self) -> ParseTree:
        rows = []

        def add_np(np_: Phrase, head: int) -> None:
            if np_.adj:
                rows.append((len(rows) + 1, np_.adj, len(rows) + 2))
            rows.append((len(rows) + 1, np_.noun, head))

        verb_index = len(self.subj.tokens()) + 1
        add_np(self.subj, verb_index)
        rows.append((len(rows) + 1, self.verb, 0))
        if self.obj:
            add_np(self.obj, verb_index)
        return parse_conll(rows)


def make_example(pair_id: str, premise: Clause, hypothesis: Clause, label: str) -> Example:
    return Example(
        pair_id,
        LABEL_INDEX[label],
        premise.constituency(),
        hypothesis.constituency(),
        premise.dependency(),
        hypothesis.dependency(),
    )


def _pick(rng: np.random.Generator, items, exclude=()):
    pool = [x for x in items if x not in exclude]
    return pool[int(rng.integers(len(pool)))]


def overfit_pairs(n: int = 50, seed: int = 7) -> list[Example]:
    """Mixed-shape pairs with rule-based labels.

    entailment: identical, or an adjective dropped; contradiction: subject and
    object swapped, or a different intransitive verb; neutral: an adjective
    added.
    """
    rng = np.random.default_rng(seed)
    out = []
    for k in range(n):
        label = ("entailment", "contradiction", "neutral")[k % 3]
        transitive = rng.random() < 0.6
        s_noun = _pick(rng, NOUNS)
        subj = Phrase(s_noun, _pick(rng, ADJECTIVES) if rng.random() < 0.5 else None)
        obj = Phrase(_pick(rng, NOUNS, (s_noun,)), _pick(rng, ADJECTIVES) if rng.random() < 0.5 else None)
        if transitive:
            premise = Clause(subj, _pick(rng, VERBS), obj)
        else:
            premise = Clause(subj, _pick(rng, INTRANSITIVE))
        if label == "entailment":
            if subj.adj and rng.random() < 0.5:
                hyp = Clause(Phrase(subj.noun), premise.verb, premise.obj)
            else:
                hyp = premise
        elif label == "contradiction":
            if transitive:
                hyp = Clause(premise.obj, premise.verb, premise.subj)
            else:
                hyp = Clause(subj, _pick(rng, INTRANSITIVE, (premise.verb,)))
        else:
            if subj.adj:
                premise = Clause(Phrase(subj.noun), premise.verb, premise.obj)
            hyp = Clause(Phrase(subj.noun, _pick(rng, ADJECTIVES)), premise.verb, premise.obj)
        out.append(make_example(f"ov{k:03d}", premise, hyp, label))
    return out


def swap_pairs(n: int, seed: int = 0) -> list[Example]:
    """Pairs whose label is decided by which phrases swapped places.

    Every premise is ``adjA n1 verb adjB n2`` and every hypothesis uses the
    same five words, so a bag of words carries no label signal:
    entailment keeps the sentence, contradiction swaps the two noun phrases,
    neutral swaps only the adjectives.
    """
    rng = np.random.default_rng(seed)
    out = []
    for k in range(n):
        n1 = _pick(rng, NOUNS)
        n2 = _pick(rng, NOUNS, (n1,))
        a1 = _pick(rng, ADJECTIVES)
        a2 = _pick(rng, ADJECTIVES, (a1,))
        verb = _pick(rng, VERBS)
        premise = Clause(Phrase(n1, a1), verb, Phrase(n2, a2))
        label = ("entailment", "contradiction", "neutral")[int(rng.integers(3))]
        if label == "entailment":
            hyp = premise
        elif label == "contradiction":
            hyp = Clause(Phrase(n2, a2), verb, Phrase(n1, a1))
        else:
            hyp = Clause(Phrase(n1, a2), verb, Phrase(n2, a1))
        out.append(make_example(f"sw{k:04d}", premise, hyp, label))
    return out


def write_bundle(examples: list[Example], jsonl: str | Path, sidecar: str | Path) -> None:
    write_corpus(jsonl, examples)
    trees = {}
    for ex in examples:
        trees[ex.pair_id + ".s1"] = ex.premise_dep
        trees[ex.pair_id + ".s2"] = ex.hypothesis_dep
    write_dep_sidecar(sidecar, trees)


def bundled_overfit_corpus() -> list[Example]:
    """The packaged 50-pair corpus used for the overfitting check."""
    root = resources.files("satlstm") / "resources"
    with resources.as_file(root / OVERFIT_FILE) as corpus, resources.as_file(root / OVERFIT_SIDECAR) as dep:
        return list(load_corpus(corpus, dep))


if __name__ == "__main__":
    out = Path(__file__).parent / "resources"
    out.mkdir(exist_ok=True)
    write_bundle(overfit_pairs(), out / OVERFIT_FILE, out / OVERFIT_SIDECAR)
