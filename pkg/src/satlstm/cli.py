"""Command-line entry point: train, eval, attend, neighbors, gradcheck.

Exit codes: 0 success, 1 gradient check failure, 2 configuration error,
3 data error, 4 numeric abort.
"""

from __future__ import annotations

import argparse
import datetime as dt
import hashlib
import json
import logging
import os
import subprocess
import sys
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import gradcheck
from .autodiff import Tape
from .data import (
    LABELS,
    ConllError,
    CorpusError,
    Example,
    ParseError,
    ParseTree,
    build_vocab,
    load_corpus,
    load_embeddings,
    parse_compact_dep,
    parse_sexpr,
)
from .model import MissingParseError, ModelParams, Variant, encode_side, forward
from .train import CheckpointError, NumericError, TrainConfig, load_checkpoint, save_checkpoint, train_loop

logger = logging.getLogger("satlstm")

EXIT_OK, EXIT_GRADCHECK, EXIT_CONFIG, EXIT_DATA, EXIT_NUMERIC = 0, 1, 2, 3, 4


class CliError(Exception):
    def __init__(self, message: str, code: int):
        super().__init__(message)
        self.code = code


# -- manifests ------------------------------------------------------------


@dataclass
class RunManifest:
    command: str
    config: dict
    seed: int | None
    corpus_checksums: dict[str, str]
    build_id: str
    started: str
    wall_seconds: float = 0.0
    metrics: dict = field(default_factory=dict)
    exit_code: int = 0


def _build_id() -> str:
    try:
        out = subprocess.run(
            ["git", "describe", "--always", "--dirty", "--tags"],
            cwd=Path(__file__).parent,
            capture_output=True,
            text=True,
            timeout=5,
        )
        if out.returncode == 0 and out.stdout.strip():
            return out.stdout.strip()
    except (OSError, subprocess.SubprocessError):
        pass
    from . import __version__

    return f"v{__version__}"


def _sha256(path: str | None) -> str | None:
    if not path or not os.path.exists(path):
        return None
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def write_manifest(directory: str | Path, manifest: RunManifest) -> Path:
    """Write under a fresh name; existing manifests are never touched."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    stamp = manifest.started.replace(":", "").replace("-", "")
    n = 0
    while True:
        path = directory / f"manifest-{manifest.command}-{stamp}-{n}.json"
        try:
            with open(path, "x", encoding="utf-8") as fh:
                json.dump(asdict(manifest), fh, indent=2, sort_keys=True, default=str)
                fh.write("\n")
            return path
        except FileExistsError:
            n += 1


# -- shared helpers -------------------------------------------------------


def _parse_variant(name: str | None) -> Variant:
    if not name:
        raise CliError("--variant is required; choose from " + ", ".join(v.value for v in Variant), EXIT_CONFIG)
    try:
        return Variant.parse(name)
    except ValueError as err:
        raise CliError(str(err), EXIT_CONFIG) from None


def _load(path: str, sidecar: str | None, lowercase: bool, role: str):
    try:
        return load_corpus(path, sidecar, lowercase=lowercase)
    except (OSError, CorpusError, ParseError, ConllError) as err:
        raise CliError(f"cannot load {role} corpus: {err}", EXIT_DATA) from None


def _require_structure(variant: Variant, examples, role: str) -> None:
    for ex in examples:
        for side in ("x", "y"):
            try:
                encode_check(variant, ex, side)
            except MissingParseError as err:
                raise CliError(f"{role} corpus: {err}", EXIT_DATA) from None


def encode_check(variant: Variant, ex: Example, side: str) -> None:
    structure = variant.structure
    name = "premise" if side == "x" else "hypothesis"
    if structure == "sequence":
        try:
            ex.tokens(name)
        except ValueError as err:
            raise MissingParseError(str(err)) from None
        return
    attr = name + ("_dep" if structure == "dependency" else "")
    if getattr(ex, attr) is None:
        raise MissingParseError(f"variant {variant.value} needs a {structure} parse of the {name} (pair {ex.pair_id})")


def _load_checkpoint(path: str) -> tuple[ModelParams, TrainConfig]:
    try:
        return load_checkpoint(path)
    except OSError as err:
        raise CliError(f"cannot read checkpoint: {err}", EXIT_DATA) from None
    except (CheckpointError, ValueError, KeyError) as err:
        raise CliError(f"invalid checkpoint: {err}", EXIT_CONFIG) from None


def _check_variant(params: ModelParams, requested: str | None) -> None:
    if requested and _parse_variant(requested) is not params.variant:
        raise CliError(f"checkpoint holds {params.variant.value}, not {requested}", EXIT_CONFIG)


def _emit(text: str, out: str | None) -> None:
    if out:
        Path(out).write_text(text, encoding="utf-8")
    else:
        sys.stdout.write(text)


# -- train ----------------------------------------------------------------


def cmd_train(args) -> tuple[int, dict]:
    variant = _parse_variant(args.variant)
    defaults = TrainConfig()
    try:
        config = TrainConfig(
            embedding_size=args.embedding_size,
            hidden_size=args.hidden,
            learning_rate=args.lr if args.lr is not None else defaults.learning_rate,
            l2=args.l2,
            clip_threshold=args.clip,
            epochs=args.epochs,
            batch_size=args.batch,
            seed=args.seed,
            early_stop_patience=args.patience,
            share_encoders=args.share_encoders,
            tie_attention_weights=args.tie_attention,
            freeze_embeddings=args.freeze_embeddings,
        )
    except ValueError as err:
        raise CliError(f"bad configuration: {err}", EXIT_CONFIG) from None
    args._config = config.to_dict()
    if config.learning_rate == 0:
        logger.warning("--lr 0: training will run but parameters will not change")
    lowercase = not args.keep_case
    train = _load(args.train, args.dep_sidecar, lowercase, "train")
    if not train:
        raise CliError(f"{args.train}: no usable training pairs", EXIT_DATA)
    dev = _load(args.dev, args.dep_sidecar, lowercase, "dev") if args.dev else []
    _require_structure(variant, train, "train")
    _require_structure(variant, dev, "dev")
    table = None
    if args.emb:
        try:
            table = load_embeddings(args.emb, config.embedding_size, lowercase=lowercase)
        except (OSError, CorpusError) as err:
            raise CliError(f"cannot load embeddings: {err}", EXIT_DATA) from None
    vocab = build_vocab(train, args.min_count)

    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    metrics_path = out / "metrics.jsonl"
    ckpt = Path(args.checkpoint) if args.checkpoint else out / "model.ckpt"
    with open(metrics_path, "w", encoding="utf-8") as metrics:

        def on_epoch(rec):
            metrics.write(json.dumps(rec.to_dict(), sort_keys=True) + "\n")
            metrics.flush()

        try:
            params, history = train_loop(variant, config, train, dev, vocab=vocab, embeddings=table, on_epoch=on_epoch)
        except NumericError as err:
            raise CliError(str(err), EXIT_NUMERIC) from None
    save_checkpoint(ckpt, params, config)
    result = {
        "checkpoint": str(ckpt),
        "metrics_file": str(metrics_path),
        "epochs_run": len(history),
        "final_train_loss": history[-1].train_loss,
        "best_dev_acc": max((r.dev_acc for r in history), default=None) if dev else None,
    }
    if args.test:
        test = _load(args.test, args.dep_sidecar, lowercase, "test")
        if test:
            _require_structure(variant, test, "test")
            result["test_acc"] = sum(forward(variant, params, ex).label == ex.gold for ex in test) / len(test)
    print(json.dumps(result, sort_keys=True))
    return EXIT_OK, result


# -- eval -----------------------------------------------------------------


def cmd_eval(args) -> tuple[int, dict]:
    params, config = _load_checkpoint(args.checkpoint)
    _check_variant(params, args.variant)
    args._config = config.to_dict()
    data_path = args.test or args.data
    if not data_path:
        raise CliError("eval needs --test", EXIT_CONFIG)
    examples = _load(data_path, args.dep_sidecar, not args.keep_case, "eval")
    if not examples:
        raise CliError(f"{data_path}: empty evaluation set", EXIT_DATA)
    _require_structure(params.variant, examples, "eval")
    confusion = np.zeros((len(LABELS), len(LABELS)), dtype=int)
    rows = []
    for ex in examples:
        pred = forward(params.variant, params, ex)
        confusion[ex.gold, pred.label] += 1
        rows.append({"pairID": ex.pair_id, "gold": LABELS[ex.gold], "pred": LABELS[pred.label], "probs": pred.probs.tolist()})
    acc = float(np.trace(confusion)) / len(examples)
    print(f"accuracy\t{acc:.6f}\t({int(np.trace(confusion))}/{len(examples)})")
    width = max(len(name) for name in LABELS)
    print("gold \\ pred".ljust(width) + "\t" + "\t".join(LABELS))
    for i, name in enumerate(LABELS):
        print(name.ljust(width) + "\t" + "\t".join(str(v) for v in confusion[i]))
    if args.predictions:
        with open(args.predictions, "w", encoding="utf-8") as fh:
            for row in rows:
                fh.write(json.dumps(row) + "\n")
    return EXIT_OK, {"accuracy": acc, "total": len(examples), "confusion": confusion.tolist()}


# -- attend ---------------------------------------------------------------


def _inline_tree(text: str, structure: str) -> ParseTree:
    if structure == "dependency":
        return parse_compact_dep(text)
    return parse_sexpr(text)


def _inline_example(args, variant: Variant, lowercase: bool) -> Example:
    try:
        px = _inline_tree(args.premise, variant.structure)
        hy = _inline_tree(args.hypothesis, variant.structure)
    except (ParseError, ConllError) as err:
        raise CliError(f"cannot parse inline sentence: {err}", EXIT_DATA) from None
    if lowercase:
        px, hy = px.lowercased(), hy.lowercased()
    if variant.structure == "dependency":
        return Example("inline", 0, premise_dep=px, hypothesis_dep=hy)
    return Example("inline", 0, premise=px, hypothesis=hy)


def _node_label(tokens: list[str], span) -> str:
    return " ".join(tokens[span[0] : span[1]])


def _dot_quote(text: str) -> str:
    return '"' + text.replace("\\", "\\\\").replace('"', '\\"') + '"'


def trace_to_dot(trace, premise: ParseTree, hypothesis: ParseTree, min_alpha: float = 0.0) -> str:
    """Both trees as clusters plus dotted hypothesis->premise edges labelled with alpha."""
    lines = ["digraph attention {", "  rankdir=BT;", "  node [shape=box];"]
    for prefix, title, tree in (("p", "premise", premise), ("h", "hypothesis", hypothesis)):
        tokens = tree.tokens()
        lines.append(f"  subgraph cluster_{title} {{")
        lines.append(f"    label={_dot_quote(title)};")
        for node in tree.nodes:
            if tree.kind == "dependency":
                label = node.token
            else:
                label = _node_label(tokens, node.span)
            lines.append(f"    {prefix}{node.id} [label={_dot_quote(label)}];")
        for node in tree.nodes:
            for c in node.children:
                lines.append(f"    {prefix}{c} -> {prefix}{node.id};")
        lines.append("  }")
    for r, hid in enumerate(trace.hypothesis_ids):
        for c, pid in enumerate(trace.premise_ids):
            a = float(trace.alpha[r, c])
            if a >= min_alpha:
                lines.append(f'  h{hid} -> p{pid} [style=dotted, constraint=false, label="{a:.3f}"];')
    lines.append("}")
    return "\n".join(lines) + "\n"


def _sequence_tree(tokens: list[str]) -> ParseTree:
    from .data import Node

    nodes = [Node(i, t, [], (i, i + 1)) for i, t in enumerate(tokens)]
    return ParseTree(nodes, len(tokens) - 1, "sequence")


def cmd_attend(args) -> tuple[int, dict]:
    params, config = _load_checkpoint(args.checkpoint)
    _check_variant(params, args.variant)
    args._config = config.to_dict()
    variant = params.variant
    if not variant.attends:
        raise CliError(f"variant {variant.value} has no attention; use at-lstm, sat-dlstm or sat-clstm", EXIT_CONFIG)
    lowercase = not args.keep_case
    if args.premise and args.hypothesis:
        ex = _inline_example(args, variant, lowercase)
    elif args.data and args.pair_id:
        corpus = _load(args.data, args.dep_sidecar, lowercase, "attention")
        found = [e for e in corpus if e.pair_id == args.pair_id]
        if not found:
            raise CliError(f"pair {args.pair_id} not found in {args.data}", EXIT_DATA)
        ex = found[0]
    else:
        raise CliError("attend needs --premise/--hypothesis or --data with --pair-id", EXIT_CONFIG)
    try:
        pred = forward(variant, params, ex)
    except MissingParseError as err:
        raise CliError(str(err), EXIT_DATA) from None
    trace = pred.trace
    payload = trace.to_dict()
    payload.update({"pairID": ex.pair_id, "variant": variant.value, "prediction": LABELS[pred.label], "probs": pred.probs.tolist()})
    if args.format == "dot":
        if variant.structure == "sequence":
            px, hy = _sequence_tree(trace.premise_tokens), _sequence_tree(trace.hypothesis_tokens)
        else:
            attr = "_dep" if variant.structure == "dependency" else ""
            px, hy = getattr(ex, "premise" + attr), getattr(ex, "hypothesis" + attr)
        _emit(trace_to_dot(trace, px, hy, args.min_alpha), args.out)
    else:
        _emit(json.dumps(payload, indent=2) + "\n", args.out)
    return EXIT_OK, {"pairID": ex.pair_id, "rows": len(trace.hypothesis_ids), "cols": len(trace.premise_ids)}


# -- neighbors ------------------------------------------------------------


def _vectors(params: ModelParams, ex: Example, side: str, mode: str) -> list[tuple[str, np.ndarray]]:
    """(text, vector) for every subtree (phrase mode) or for the whole sentence."""
    tape = Tape()
    enc = encode_side(tape, params, ex, side)
    role = "premise" if side == "x" else "hypothesis"
    tokens = ex.tokens(role)
    if params.variant is Variant.NBOW:
        return [(" ".join(tokens), enc.data)]
    if isinstance(enc, list):
        return [(" ".join(tokens), enc[-1].h.data)]
    tree = enc.tree
    if mode == "sentence":
        return [(" ".join(tokens), enc.state(tree.root).h.data)]
    return [(" ".join(tree.subtree_tokens(nid)), state.h.data) for nid, state in enc.nodes]


def cosine(a: np.ndarray, b: np.ndarray) -> float:
    na, nb = np.linalg.norm(a), np.linalg.norm(b)
    if na == 0 or nb == 0:
        return 0.0
    return float(np.dot(a, b) / (na * nb))


def cmd_neighbors(args) -> tuple[int, dict]:
    params, config = _load_checkpoint(args.checkpoint)
    _check_variant(params, args.variant)
    args._config = config.to_dict()
    variant = params.variant
    if args.mode == "phrase" and variant.structure == "sequence":
        raise CliError(f"phrase mode needs a tree variant, checkpoint holds {variant.value}", EXIT_CONFIG)
    lowercase = not args.keep_case
    index_corpus = _load(args.index, args.dep_sidecar, lowercase, "index")
    query_text = args.query.lower() if lowercase else args.query
    try:
        if variant.structure == "dependency":
            qtree = parse_compact_dep(query_text)
            query = Example("query", 0, premise_dep=qtree, hypothesis_dep=qtree)
        else:
            text = query_text.strip()
            if variant.structure == "sequence" and not text.startswith("("):
                text = f"( {text} )"
            qtree = parse_sexpr(text)
            query = Example("query", 0, premise=qtree, hypothesis=qtree)
    except (ParseError, ConllError) as err:
        raise CliError(f"cannot parse query: {err}", EXIT_DATA) from None
    qtext, qvec = _vectors(params, query, "x", "sentence")[0]

    seen: dict[str, np.ndarray] = {}
    for ex in index_corpus:
        for side in ("x", "y"):
            try:
                items = _vectors(params, ex, side, args.mode)
            except MissingParseError as err:
                raise CliError(f"index corpus: {err}", EXIT_DATA) from None
            for text, vec in items:
                seen.setdefault(text, vec)
    if args.exclude_exact:
        seen.pop(qtext, None)
    if not seen:
        raise CliError("index is empty", EXIT_DATA)
    ranked = sorted(((cosine(qvec, v), t) for t, v in seen.items()), key=lambda p: (-p[0], p[1]))
    top = ranked[: args.k]
    lines = [json.dumps({"rank": i + 1, "text": t, "cosine": c}) for i, (c, t) in enumerate(top)]
    _emit("\n".join(lines) + "\n", args.out)
    return EXIT_OK, {"query": qtext, "index_size": len(seen), "returned": len(top)}


# -- gradcheck ------------------------------------------------------------


def cmd_gradcheck(args) -> tuple[int, dict]:
    names = [v.value for v in Variant] if args.variant == "all" else [_parse_variant(args.variant).value]
    try:
        premise_len, hypothesis_len = (int(x) for x in args.sizes.split(","))
    except ValueError:
        raise CliError(f"--sizes expects two integers like 3,2, got {args.sizes!r}", EXIT_CONFIG) from None
    if min(premise_len, hypothesis_len) < 1:
        raise CliError("--sizes must be positive", EXIT_CONFIG)
    args._config = {"sizes": args.sizes, "hidden": args.hidden, "embedding_size": args.embedding_size, "oracle": args.oracle}
    failed = []
    report = {}
    for name in names:
        start = time.perf_counter()
        worst = gradcheck.run(
            name, args.seed, premise_len, hypothesis_len, args.hidden, args.embedding_size, args.l2,
            oracle_dtype=np.longdouble if args.oracle == "longdouble" else np.float64,
        )
        elapsed = time.perf_counter() - start
        report[name] = worst
        for block, err in worst.items():
            status = "ok" if err < gradcheck.TOLERANCE else "FAIL"
            print(f"{name}\t{block}\t{err:.3e}\t{status}")
            if err >= gradcheck.TOLERANCE:
                failed.append(f"{name}:{block}")
        print(f"{name}\tworst\t{max(worst.values()):.3e}\t{elapsed:.2f}s")
    if failed:
        print("failing blocks: " + ", ".join(failed), file=sys.stderr)
        return EXIT_GRADCHECK, {"worst": report, "failed": failed}
    return EXIT_OK, {"worst": report}


# -- argument parsing -----------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="satlstm", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, checkpoint=False):
        p.add_argument("--variant", help=", ".join(v.value for v in Variant))
        p.add_argument("--dep-sidecar", help="dependency parses keyed by pairID.s1/.s2")
        p.add_argument("--keep-case", action="store_true", help="do not lowercase tokens")
        p.add_argument("--manifest-dir", help="where run manifests go (default: manifests/, or OUT for train)")
        p.add_argument("--out", help="output file or directory")
        if checkpoint:
            p.add_argument("--checkpoint", required=True)

    d = TrainConfig()
    p = sub.add_parser("train", help="train a model")
    common(p)
    p.set_defaults(out="run")
    p.add_argument("--train", required=True)
    p.add_argument("--dev")
    p.add_argument("--test")
    p.add_argument("--emb", help="GloVe-style text vectors")
    p.add_argument("--checkpoint", help="checkpoint path (default OUT/model.ckpt)")
    p.add_argument("--seed", type=int, default=d.seed)
    p.add_argument("--lr", type=float)
    p.add_argument("--l2", type=float, default=d.l2)
    p.add_argument("--clip", type=float, default=d.clip_threshold)
    p.add_argument("--batch", type=int, default=d.batch_size)
    p.add_argument("--epochs", type=int, default=d.epochs)
    p.add_argument("--patience", type=int, default=d.early_stop_patience)
    p.add_argument("--hidden", type=int, default=d.hidden_size)
    p.add_argument("--embedding-size", type=int, default=d.embedding_size)
    p.add_argument("--min-count", type=int, default=1)
    p.add_argument("--share-encoders", action="store_true")
    p.add_argument("--tie-attention", action="store_true")
    p.add_argument("--freeze-embeddings", action="store_true")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="accuracy and confusion matrix of a checkpoint")
    common(p, checkpoint=True)
    p.add_argument("--test")
    p.add_argument("--data", help="alias of --test")
    p.add_argument("--predictions", help="write per-pair predictions (JSON lines)")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("attend", help="export the attention trace of one pair")
    common(p, checkpoint=True)
    p.add_argument("--data", help="corpus holding the pair")
    p.add_argument("--pair-id")
    p.add_argument("--premise", help="inline bracketing (or form/head list for dependency variants)")
    p.add_argument("--hypothesis")
    p.add_argument("--format", choices=("json", "dot"), default="json")
    p.add_argument("--min-alpha", type=float, default=0.0, help="DOT only: hide weaker edges")
    p.set_defaults(func=cmd_attend)

    p = sub.add_parser("neighbors", help="nearest phrases or sentences by cosine similarity")
    common(p, checkpoint=True)
    p.add_argument("--index", required=True, help="corpus whose sentences are indexed")
    p.add_argument("--query", required=True)
    p.add_argument("--mode", choices=("phrase", "sentence"), default="phrase")
    p.add_argument("--k", type=int, default=5)
    p.add_argument("--exclude-exact", action="store_true")
    p.set_defaults(func=cmd_neighbors)

    p = sub.add_parser("gradcheck", help="finite-difference check of every parameter gradient")
    p.add_argument("--variant", default="sat-clstm", help="a variant name or 'all'")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--sizes", default="3,2", help="premise,hypothesis token counts")
    p.add_argument("--hidden", type=int, default=4)
    p.add_argument("--embedding-size", type=int, default=3)
    p.add_argument("--l2", type=float, default=0.0)
    p.add_argument(
        "--oracle",
        choices=("longdouble", "float64"),
        default="longdouble",
        help="precision of the finite-difference side (the analytic gradient is always 64-bit)",
    )
    p.add_argument("--manifest-dir")
    p.set_defaults(func=cmd_gradcheck)
    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    started = dt.datetime.now(dt.timezone.utc).replace(microsecond=0).isoformat()
    t0 = time.perf_counter()
    args._config = {}
    metrics: dict = {}
    try:
        code, metrics = args.func(args)
    except CliError as err:
        print(f"error: {err}", file=sys.stderr)
        code = err.code
    checksums = {}
    for flag in ("train", "dev", "test", "data", "index", "emb", "dep_sidecar"):
        digest = _sha256(getattr(args, flag, None))
        if digest:
            checksums[flag] = digest
    manifest = RunManifest(
        command=args.command,
        config=args._config,
        seed=getattr(args, "seed", None),
        corpus_checksums=checksums,
        build_id=_build_id(),
        started=started,
        wall_seconds=round(time.perf_counter() - t0, 3),
        metrics=metrics,
        exit_code=code,
    )
    directory = args.manifest_dir or (args.out if args.command == "train" else "manifests")
    write_manifest(directory, manifest)
    return code


if __name__ == "__main__":
    sys.exit(main())
