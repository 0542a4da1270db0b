import json
import logging

import numpy as np
import pydot
import pytest

from satlstm import autodiff
from satlstm.cli import RunManifest, cosine, main, write_manifest
from satlstm.data import Example, build_vocab, load_corpus, parse_sexpr, to_sexpr
from satlstm.autodiff import Tape
from satlstm.model import Variant, encode_side
from satlstm.synthetic import overfit_pairs, write_bundle
from satlstm.train import TrainConfig, init_params, load_checkpoint

TINY = ["--hidden", "4", "--embedding-size", "3", "--epochs", "2", "--batch", "4", "--seed", "3"]


@pytest.fixture
def corpus(tmp_path):
    path, dep = tmp_path / "c.jsonl", tmp_path / "c.dep"
    write_bundle(overfit_pairs(12), path, dep)
    return path, dep


def train(tmp_path, corpus, variant, name="run", extra=()):
    out = tmp_path / name
    args = ["train", "--variant", variant, "--train", str(corpus[0]), "--dev", str(corpus[0]),
            "--dep-sidecar", str(corpus[1]), "--out", str(out), *TINY, *extra]
    return main(args), out


@pytest.fixture(autouse=True)
def _cwd(tmp_path, monkeypatch):
    monkeypatch.chdir(tmp_path)


# -- train ----------------------------------------------------------------


def test_train_outputs(tmp_path, corpus, capsys):
    code, out = train(tmp_path, corpus, "sat-clstm")
    assert code == 0
    result = json.loads(capsys.readouterr().out.strip().splitlines()[-1])
    lines = (out / "metrics.jsonl").read_text().splitlines()
    assert len(lines) == result["epochs_run"]
    assert set(json.loads(lines[0])) == {"epoch", "train_loss", "dev_acc"}
    params, cfg = load_checkpoint(out / "model.ckpt")
    assert params.variant is Variant.SAT_CLSTM and cfg.hidden_size == 4
    manifests = list(out.glob("manifest-train-*.json"))
    assert len(manifests) == 1
    m = json.loads(manifests[0].read_text())
    assert m["seed"] == 3 and m["exit_code"] == 0 and set(m["corpus_checksums"]) >= {"train", "dep_sidecar"}


def test_train_unknown_variant(tmp_path, corpus, capsys):
    code, _ = train(tmp_path, corpus, "tree-xlstm")
    assert code == 2
    assert "tree-xlstm" in capsys.readouterr().err


def test_train_missing_parse_is_data_error(tmp_path, corpus):
    args = ["train", "--variant", "sat-dlstm", "--train", str(corpus[0]), "--out", str(tmp_path / "r"), *TINY]
    assert main(args) == 3


def test_train_zero_lr(tmp_path, corpus, caplog):
    with caplog.at_level(logging.WARNING):
        code, out = train(tmp_path, corpus, "at-lstm", extra=["--lr", "0"])
    assert code == 0
    assert any("--lr 0" in r.getMessage() for r in caplog.records)
    params, cfg = load_checkpoint(out / "model.ckpt")
    start = init_params("at-lstm", cfg, build_vocab(load_corpus(corpus[0], corpus[1])), rng=np.random.default_rng(3))
    for (n, a), (_, b) in zip(start.items(), params.items()):
        assert a.data.tobytes() == b.data.tobytes(), n


def test_train_deterministic(tmp_path, corpus):
    _, a = train(tmp_path, corpus, "sat-dlstm", "a")
    _, b = train(tmp_path, corpus, "sat-dlstm", "b")
    assert (a / "model.ckpt").read_bytes() == (b / "model.ckpt").read_bytes()
    assert (a / "metrics.jsonl").read_bytes() == (b / "metrics.jsonl").read_bytes()


# -- eval -----------------------------------------------------------------


def test_eval_accuracy_recount(tmp_path, corpus, capsys):
    _, out = train(tmp_path, corpus, "tree-dlstm")
    preds = tmp_path / "preds.jsonl"
    capsys.readouterr()
    code = main(["eval", "--checkpoint", str(out / "model.ckpt"), "--test", str(corpus[0]),
                 "--dep-sidecar", str(corpus[1]), "--predictions", str(preds)])
    assert code == 0
    rows = [json.loads(l) for l in preds.read_text().splitlines()]
    recount = sum(r["gold"] == r["pred"] for r in rows) / len(rows)
    printed = capsys.readouterr().out.splitlines()[0].split("\t")
    assert printed[0] == "accuracy" and abs(float(printed[1]) - recount) < 1e-6
    gold = [json.loads(l)["gold_label"] for l in corpus[0].read_text().splitlines()]
    assert [r["gold"] for r in rows] == gold


def test_eval_empty_and_mismatch(tmp_path, corpus):
    _, out = train(tmp_path, corpus, "nbow")
    empty = tmp_path / "empty.jsonl"
    empty.write_text("")
    assert main(["eval", "--checkpoint", str(out / "model.ckpt"), "--test", str(empty)]) == 3
    assert main(["eval", "--checkpoint", str(out / "model.ckpt"), "--test", str(corpus[0]), "--variant", "lstm"]) == 2
    assert main(["eval", "--checkpoint", str(tmp_path / "nope.ckpt"), "--test", str(corpus[0])]) == 3


# -- attend ---------------------------------------------------------------


@pytest.mark.parametrize("variant", ["at-lstm", "sat-clstm", "sat-dlstm"])
def test_attend_json(tmp_path, corpus, variant):
    _, out = train(tmp_path, corpus, variant)
    dest = tmp_path / "trace.json"
    code = main(["attend", "--checkpoint", str(out / "model.ckpt"), "--data", str(corpus[0]),
                 "--dep-sidecar", str(corpus[1]), "--pair-id", "ov004", "--out", str(dest)])
    assert code == 0
    trace = json.loads(dest.read_text())
    alpha = np.array(trace["alpha"])
    assert alpha.shape == (len(trace["hypothesis"]["nodes"]), len(trace["premise"]["nodes"]))
    assert np.all(alpha >= 0) and np.all(np.abs(alpha.sum(axis=1) - 1) < 1e-6)


def test_attend_single_node_premise(tmp_path, corpus):
    _, out = train(tmp_path, corpus, "sat-clstm")
    dest = tmp_path / "t.json"
    main(["attend", "--checkpoint", str(out / "model.ckpt"), "--premise", "dog",
          "--hypothesis", "( ( big dog ) sleeps )", "--out", str(dest)])
    alpha = np.array(json.loads(dest.read_text())["alpha"])
    assert alpha.shape == (5, 1) and np.all(alpha == 1.0)


@pytest.mark.parametrize("variant", ["at-lstm", "sat-clstm", "sat-dlstm"])
def test_attend_dot_parses(tmp_path, corpus, variant):
    _, out = train(tmp_path, corpus, variant)
    dest = tmp_path / "t.dot"
    code = main(["attend", "--checkpoint", str(out / "model.ckpt"), "--data", str(corpus[0]),
                 "--dep-sidecar", str(corpus[1]), "--pair-id", "ov001", "--format", "dot", "--out", str(dest)])
    assert code == 0
    graphs = pydot.graph_from_dot_data(dest.read_text())
    assert graphs and len(graphs) == 1
    dotted = [e for g in [graphs[0]] for e in g.get_edges() if e.get_style() == "dotted"]
    ex = [e for e in load_corpus(corpus[0], corpus[1]) if e.pair_id == "ov001"][0]
    if variant == "sat-clstm":
        n_p, n_h = len(ex.premise.nodes), len(ex.hypothesis.nodes)
    elif variant == "sat-dlstm":
        n_p, n_h = len(ex.premise_dep.nodes), len(ex.hypothesis_dep.nodes)
    else:
        n_p, n_h = len(ex.tokens("premise")), len(ex.tokens("hypothesis"))
    assert len(dotted) == n_p * n_h


def test_attend_errors(tmp_path, corpus):
    _, out = train(tmp_path, corpus, "at-lstm")
    base = ["attend", "--checkpoint", str(out / "model.ckpt")]
    assert main(base + ["--data", str(corpus[0]), "--pair-id", "missing"]) == 3
    assert main(base) == 2
    _, enc = train(tmp_path, corpus, "lstm", "enc")
    assert main(["attend", "--checkpoint", str(enc / "model.ckpt"), "--premise", "( a b )", "--hypothesis", "c"]) == 2


# -- neighbors --------------------------------------------------------------


def neighbors(ckpt, index, query, *extra):
    return main(["neighbors", "--checkpoint", str(ckpt), "--index", str(index[0]), "--dep-sidecar", str(index[1]),
                 "--query", query, *extra])


def test_neighbors_self_similarity(tmp_path, corpus, capsys):
    _, out = train(tmp_path, corpus, "sat-clstm")
    first = load_corpus(corpus[0])[0]
    capsys.readouterr()
    assert neighbors(out / "model.ckpt", corpus, to_sexpr(first.premise), "--mode", "sentence") == 0
    top = json.loads(capsys.readouterr().out.splitlines()[0])
    assert top["text"] == " ".join(first.tokens("premise"))
    assert abs(top["cosine"] - 1.0) < 1e-9
    neighbors(out / "model.ckpt", corpus, to_sexpr(first.premise), "--mode", "sentence", "--exclude-exact")
    assert json.loads(capsys.readouterr().out.splitlines()[0])["text"] != top["text"]


def test_neighbors_k_and_cosines(tmp_path, corpus, capsys):
    _, out = train(tmp_path, corpus, "sat-clstm")
    params, _ = load_checkpoint(out / "model.ckpt")
    examples = load_corpus(corpus[0], corpus[1])
    capsys.readouterr()
    neighbors(out / "model.ckpt", corpus, "( big dog )", "--k", "100000")
    rows = [json.loads(l) for l in capsys.readouterr().out.splitlines()]
    texts = {" ".join(ex.premise.subtree_tokens(n.id)) for ex in examples for n in ex.premise.nodes}
    texts |= {" ".join(ex.hypothesis.subtree_tokens(n.id)) for ex in examples for n in ex.hypothesis.nodes}
    assert {r["text"] for r in rows} == texts
    assert all(a["cosine"] >= b["cosine"] for a, b in zip(rows, rows[1:]))
    # recompute sentence-level cosines from first-seen premise encodings
    query = Example("q", 0, premise=parse_sexpr("( big dog )"), hypothesis=parse_sexpr("dog"))
    q = encode_side(Tape(), params, query, "x")
    qv = q.state(q.root).h.data
    for ex in examples[:3]:
        enc = encode_side(Tape(), params, ex, "x")
        text = " ".join(ex.tokens("premise"))
        v = enc.state(enc.root).h.data
        expected = float(qv @ v / (np.linalg.norm(qv) * np.linalg.norm(v)))
        got = [r["cosine"] for r in rows if r["text"] == text]
        assert got and abs(got[0] - expected) < 1e-9


def test_neighbors_empty_index(tmp_path, corpus):
    _, out = train(tmp_path, corpus, "tree-clstm")
    empty = tmp_path / "e.jsonl"
    empty.write_text("")
    assert main(["neighbors", "--checkpoint", str(out / "model.ckpt"), "--index", str(empty), "--query", "dog"]) == 3


def test_cosine_zero_vector():
    assert cosine(np.zeros(3), np.ones(3)) == 0.0


# -- gradcheck --------------------------------------------------------------


def test_gradcheck_passes_and_is_repeatable(capsys):
    assert main(["gradcheck", "--variant", "sat-dlstm", "--seed", "2"]) == 0
    first = capsys.readouterr().out
    assert main(["gradcheck", "--variant", "sat-dlstm", "--seed", "2"]) == 0
    second = capsys.readouterr().out
    strip = lambda text: [l.rsplit("\t", 1)[0] for l in text.splitlines()]
    assert strip(first) == strip(second)


def test_gradcheck_catches_broken_rule(monkeypatch, capsys):
    monkeypatch.setitem(autodiff.BACKWARD, "tanh", lambda rec, g: (g * (1.0 - rec.out.data),))
    assert main(["gradcheck", "--variant", "lstm"]) == 1
    assert "failing blocks" in capsys.readouterr().err


def test_gradcheck_bad_sizes():
    assert main(["gradcheck", "--sizes", "3"]) == 2


# -- manifests ----------------------------------------------------------------


def test_manifests_never_overwritten(tmp_path):
    m = RunManifest("eval", {}, 1, {}, "test", "2026-01-01T00:00:00+00:00")
    a = write_manifest(tmp_path / "m", m)
    before = a.read_bytes()
    m.exit_code = 3
    b = write_manifest(tmp_path / "m", m)
    assert a != b and a.read_bytes() == before
    assert json.loads(b.read_text())["exit_code"] == 3
