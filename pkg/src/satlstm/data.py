"""Parse trees, corpus ingestion, vocabulary and pretrained embeddings."""

from __future__ import annotations

import hashlib
import json
import logging
from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

logger = logging.getLogger(__name__)

LABELS = ("entailment", "contradiction", "neutral")
LABEL_INDEX = {name: i for i, name in enumerate(LABELS)}
UNK = "<unk>"


class ParseError(ValueError):
    """Malformed bracketing; ``offset`` is the character position of the fault."""

    def __init__(self, message: str, offset: int):
        super().__init__(f"{message} (at offset {offset})")
        self.offset = offset


class ConllError(ValueError):
    """Malformed dependency rows; ``row`` is the 1-based row number."""

    def __init__(self, message: str, row: int):
        super().__init__(f"row {row}: {message}")
        self.row = row


class CorpusError(RuntimeError):
    pass


@dataclass
class Node:
    id: int
    token: str | None
    children: list[int]
    span: tuple[int, int]


@dataclass
class ParseTree:
    """Rooted ordered tree; ``nodes[i].id == i``.

    ``kind`` is ``"constituency"`` (tokens at leaves only) or
    ``"dependency"`` (a token at every node).
    """

    nodes: list[Node]
    root: int
    kind: str

    def __len__(self) -> int:
        return len(self.nodes)

    def postorder(self) -> list[int]:
        order: list[int] = []
        stack = [(self.root, False)]
        while stack:
            nid, expanded = stack.pop()
            if expanded:
                order.append(nid)
                continue
            stack.append((nid, True))
            for c in reversed(self.nodes[nid].children):
                stack.append((c, False))
        return order

    def tokens(self) -> list[str]:
        """Sentence tokens in surface order."""
        if self.kind == "dependency":
            return [n.token for n in self.nodes]
        return [self.nodes[i].token for i in self.postorder() if not self.nodes[i].children]

    def subtree_tokens(self, nid: int) -> list[str]:
        if self.kind == "dependency":
            ids = sorted(self._descendants(nid))
            return [self.nodes[i].token for i in ids]
        start, end = self.nodes[nid].span
        return self.tokens()[start:end]

    def _descendants(self, nid: int) -> list[int]:
        out, stack = [], [nid]
        while stack:
            k = stack.pop()
            out.append(k)
            stack.extend(self.nodes[k].children)
        return out

    def lowercased(self) -> "ParseTree":
        nodes = [
            Node(n.id, n.token.lower() if n.token is not None else None, list(n.children), n.span)
            for n in self.nodes
        ]
        return ParseTree(nodes, self.root, self.kind)


# -- constituency bracketing ---------------------------------------------


def _tokenize_sexpr(text: str) -> list[tuple[str, int]]:
    out: list[tuple[str, int]] = []
    i, n = 0, len(text)
    while i < n:
        ch = text[i]
        if ch.isspace():
            i += 1
        elif ch in "()":
            out.append((ch, i))
            i += 1
        else:
            j = i
            while j < n and not text[j].isspace() and text[j] not in "()":
                j += 1
            out.append((text[i:j], i))
            i = j
    return out


def _read_nested(text: str):
    """Bracketing -> nested lists of token strings."""
    toks = _tokenize_sexpr(text)
    if not toks:
        raise ParseError("empty input", 0)
    pos = 0

    def item():
        nonlocal pos
        tok, off = toks[pos]
        if tok == ")":
            raise ParseError("unexpected ')'", off)
        pos += 1
        if tok != "(":
            return tok
        kids = []
        while True:
            if pos >= len(toks):
                raise ParseError("unbalanced '('", off)
            if toks[pos][0] == ")":
                pos += 1
                break
            kids.append(item())
        if not kids:
            raise ParseError("empty bracket", off)
        return kids

    tree = item()
    if pos < len(toks):
        raise ParseError("trailing content after tree", toks[pos][1])
    return tree


def _normalize(tree):
    """Collapse unary chains and right-binarize."""
    if isinstance(tree, str):
        return tree
    kids = [_normalize(k) for k in tree]
    if len(kids) == 1:
        return kids[0]
    while len(kids) > 2:
        kids = kids[:-2] + [[kids[-2], kids[-1]]]
    return kids


def parse_sexpr(text: str) -> ParseTree:
    """Parse an unlabeled bracketing such as ``( ( the cat ) sat )``.

    Unary chains collapse to their child and wider nodes are right-binarized,
    so every internal node of the result has exactly two children.
    """
    nested = _normalize(_read_nested(text))
    nodes: list[Node] = []
    cursor = 0

    def build(t) -> int:
        nonlocal cursor
        if isinstance(t, str):
            nid = len(nodes)
            nodes.append(Node(nid, t, [], (cursor, cursor + 1)))
            cursor += 1
            return nid
        start = cursor
        kids = [build(k) for k in t]
        nid = len(nodes)
        nodes.append(Node(nid, None, kids, (start, cursor)))
        return nid

    root = build(nested)
    return ParseTree(nodes, root, "constituency")


def to_sexpr(tree: ParseTree, nid: int | None = None) -> str:
    nid = tree.root if nid is None else nid
    node = tree.nodes[nid]
    if not node.children:
        return node.token
    return "( " + " ".join(to_sexpr(tree, c) for c in node.children) + " )"


# -- dependency rows ------------------------------------------------------


def parse_conll(rows: Sequence[tuple[int, str, int]]) -> ParseTree:
    """Build a dependency tree from ``(index, form, head)`` rows (1-based, head 0 = root)."""
    n = len(rows)
    if n == 0:
        raise ConllError("empty sentence", 0)
    heads = []
    for r, (index, form, head) in enumerate(rows, start=1):
        if int(index) != r:
            raise ConllError(f"index {index} out of sequence (expected {r})", r)
        if not form:
            raise ConllError("empty form", r)
        head = int(head)
        if not 0 <= head <= n:
            raise ConllError(f"head {head} outside 0..{n}", r)
        if head == r:
            raise ConllError("token is its own head", r)
        heads.append(head)
    roots = [r for r, h in enumerate(heads, start=1) if h == 0]
    if len(roots) != 1:
        row = roots[1] if len(roots) > 1 else 1
        raise ConllError(f"expected exactly one root, found {len(roots)}", row)

    # every token must reach the root without revisiting a node
    state = [0] * (n + 1)  # 0 unseen, 1 on current path, 2 reaches root
    state[0] = 2
    for start in range(1, n + 1):
        path = []
        k = start
        while state[k] == 0:
            state[k] = 1
            path.append(k)
            k = heads[k - 1]
        if state[k] == 1:
            raise ConllError("cycle in head assignments", k)
        for p in path:
            state[p] = 2

    children: list[list[int]] = [[] for _ in range(n)]
    for r, h in enumerate(heads, start=1):
        if h:
            children[h - 1].append(r - 1)
    nodes = [Node(i, str(rows[i][1]), children[i], (i, i + 1)) for i in range(n)]
    tree = ParseTree(nodes, roots[0] - 1, "dependency")
    for nid in tree.postorder():
        node = tree.nodes[nid]
        lo = min([nid] + [tree.nodes[c].span[0] for c in node.children])
        hi = max([nid + 1] + [tree.nodes[c].span[1] for c in node.children])
        node.span = (lo, hi)
    return tree


def flatten_conll(tree: ParseTree) -> list[int]:
    """Inverse of :func:`parse_conll`: the 1-based head array."""
    heads = [0] * len(tree.nodes)
    for node in tree.nodes:
        for c in node.children:
            heads[c] = node.id + 1
    return heads


def parse_compact_dep(text: str) -> ParseTree:
    """``"A/2 child/3 sits/0"`` -> dependency tree (form/head per token)."""
    rows = []
    for i, item in enumerate(text.split(), start=1):
        form, sep, head = item.rpartition("/")
        if not sep or not head.lstrip("-").isdigit():
            raise ConllError(f"expected form/head, got {item!r}", i)
        rows.append((i, form, int(head)))
    return parse_conll(rows)


def load_dep_sidecar(path: str | Path) -> dict[str, ParseTree]:
    """Read ``pairID.s1`` / ``pairID.s2`` blocks of ``index<TAB>form<TAB>head`` rows."""
    trees: dict[str, ParseTree] = {}
    key: str | None = None
    rows: list[tuple[int, str, int]] = []

    def flush():
        nonlocal key, rows
        if key is not None:
            if key in trees:
                logger.warning("duplicate dependency block %s ignored", key)
            else:
                trees[key] = parse_conll(rows)
        key, rows = None, []

    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.rstrip("\n")
            if not line.strip():
                flush()
                continue
            if key is None:
                key = line.strip()
                continue
            cols = line.split("\t")
            if len(cols) < 3:
                raise ConllError(f"{path}:{lineno}: expected index, form, head", len(rows) + 1)
            rows.append((int(cols[0]), cols[1], int(cols[2])))
    flush()
    return trees


def write_dep_sidecar(path: str | Path, trees: dict[str, ParseTree]) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for key, tree in trees.items():
            fh.write(key + "\n")
            for i, (node, head) in enumerate(zip(tree.nodes, flatten_conll(tree)), start=1):
                fh.write(f"{i}\t{node.token}\t{head}\n")
            fh.write("\n")


# -- corpus ---------------------------------------------------------------


@dataclass
class Example:
    pair_id: str
    gold: int
    premise: ParseTree | None = None
    hypothesis: ParseTree | None = None
    premise_dep: ParseTree | None = None
    hypothesis_dep: ParseTree | None = None

    def tokens(self, side: str) -> list[str]:
        const, dep = (self.premise, self.premise_dep) if side == "premise" else (self.hypothesis, self.hypothesis_dep)
        tree = const if const is not None else dep
        if tree is None:
            raise ValueError(f"pair {self.pair_id}: no parse for {side}")
        return tree.tokens()


class Corpus(list):
    """List of examples plus ingestion counters."""

    def __init__(self, items: Iterable[Example] = (), skipped_unlabeled: int = 0, malformed: int = 0):
        super().__init__(items)
        self.skipped_unlabeled = skipped_unlabeled
        self.malformed = malformed


def load_corpus(
    path: str | Path,
    dep_sidecar: str | Path | dict[str, ParseTree] | None = None,
    lowercase: bool = True,
    max_malformed: float = 0.10,
) -> Corpus:
    """Read an SNLI-style JSON-lines file.

    Pairs whose gold label is ``-`` are skipped and counted. Malformed lines are
    skipped with a warning; if more than ``max_malformed`` of the non-blank
    lines are malformed the load aborts with :class:`CorpusError`.
    """
    if dep_sidecar is not None and not isinstance(dep_sidecar, dict):
        dep_sidecar = load_dep_sidecar(dep_sidecar)
    examples: list[Example] = []
    unlabeled = malformed = total = 0
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            total += 1
            try:
                rec = json.loads(line)
                gold = rec["gold_label"]
                if gold == "-":
                    unlabeled += 1
                    continue
                if gold not in LABEL_INDEX:
                    raise ValueError(f"unknown label {gold!r}")
                pair_id = str(rec["pairID"])
                ex = Example(pair_id, LABEL_INDEX[gold])
                if rec.get("sentence1_binary_parse"):
                    ex.premise = parse_sexpr(rec["sentence1_binary_parse"])
                if rec.get("sentence2_binary_parse"):
                    ex.hypothesis = parse_sexpr(rec["sentence2_binary_parse"])
                if dep_sidecar is not None:
                    ex.premise_dep = dep_sidecar.get(pair_id + ".s1")
                    ex.hypothesis_dep = dep_sidecar.get(pair_id + ".s2")
                if (ex.premise is None and ex.premise_dep is None) or (
                    ex.hypothesis is None and ex.hypothesis_dep is None
                ):
                    raise ValueError("missing parse for premise or hypothesis")
            except (ValueError, KeyError, TypeError) as err:
                malformed += 1
                logger.warning("%s:%d: skipping malformed line: %s", path, lineno, err)
                continue
            if lowercase:
                for attr in ("premise", "hypothesis", "premise_dep", "hypothesis_dep"):
                    tree = getattr(ex, attr)
                    if tree is not None:
                        setattr(ex, attr, tree.lowercased())
            examples.append(ex)
    if total and malformed / total > max_malformed:
        raise CorpusError(f"{path}: {malformed} of {total} lines malformed")
    if unlabeled:
        logger.info("%s: skipped %d pairs without a gold label", path, unlabeled)
    return Corpus(examples, skipped_unlabeled=unlabeled, malformed=malformed)


def write_corpus(path: str | Path, examples: Iterable[Example]) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for ex in examples:
            rec = {
                "gold_label": LABELS[ex.gold],
                "pairID": ex.pair_id,
                "sentence1_binary_parse": to_sexpr(ex.premise) if ex.premise else "",
                "sentence2_binary_parse": to_sexpr(ex.hypothesis) if ex.hypothesis else "",
            }
            fh.write(json.dumps(rec) + "\n")


# -- embeddings and vocabulary --------------------------------------------


def load_embeddings(path: str | Path, dim: int = 100, lowercase: bool = False) -> dict[str, np.ndarray]:
    """GloVe-style text vectors; the first occurrence of a token wins."""
    table: dict[str, np.ndarray] = {}
    bad = 0
    with open(path, encoding="utf-8") as fh:
        for line in fh:
            parts = line.rstrip().split(" ")
            if len(parts) != dim + 1:
                bad += 1
                continue
            token = parts[0].lower() if lowercase else parts[0]
            if token in table:
                continue
            try:
                table[token] = np.array(parts[1:], dtype=np.float64)
            except ValueError:
                bad += 1
    if bad:
        logger.warning("%s: skipped %d lines of the wrong arity", path, bad)
    if not table:
        raise CorpusError(f"{path}: no usable {dim}-d embedding lines")
    return table


@dataclass
class Vocabulary:
    itos: list[str] = field(default_factory=lambda: [UNK])

    def __post_init__(self):
        if not self.itos or self.itos[0] != UNK:
            raise ValueError("index 0 must be the UNK token")
        self.stoi = {t: i for i, t in enumerate(self.itos)}

    def __len__(self) -> int:
        return len(self.itos)

    def __contains__(self, token: str) -> bool:
        return token in self.stoi

    def index(self, token: str) -> int:
        return self.stoi.get(token, 0)

    def digest(self) -> str:
        return hashlib.sha256("\n".join(self.itos).encode("utf-8")).hexdigest()


def example_tokens(ex: Example) -> Iterable[str]:
    yield from ex.tokens("premise")
    yield from ex.tokens("hypothesis")


def build_vocab(examples: Iterable[Example], min_count: int = 1) -> Vocabulary:
    """Index tokens seen at least ``min_count`` times, most frequent first."""
    counts = Counter()
    for ex in examples:
        counts.update(example_tokens(ex))
    kept = sorted((t for t, c in counts.items() if c >= min_count and t != UNK), key=lambda t: (-counts[t], t))
    return Vocabulary([UNK] + kept)
