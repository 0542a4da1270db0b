"""Acceptance gate: one PASS/FAIL line per criterion, listed at the end of the run."""

import itertools
import time

import numpy as np
import pytest

from satlstm.autodiff import Tape, param
from satlstm.cli import main
from satlstm.data import build_vocab, flatten_conll, parse_conll, parse_sexpr
from satlstm.encoders import ConstTreeLstmParams, DepTreeLstmParams, encode_const_tree, encode_dep_tree
from satlstm.gradcheck import random_bracketing, random_example, random_heads, randomize
from satlstm.model import Variant, forward
from satlstm.synthetic import bundled_overfit_corpus, swap_pairs, write_bundle
from satlstm.train import (
    AdaGrad,
    TrainConfig,
    accuracy,
    clip_gradients,
    global_norm,
    init_params,
    is_orthogonal_param,
    train_loop,
)

from conftest import ACCEPTANCE_LINES

pytestmark = pytest.mark.slow


def report(name: str, ok: bool, detail: str) -> None:
    line = f"{'PASS' if ok else 'FAIL'}  {name}: {detail}"
    ACCEPTANCE_LINES.append(line)
    print(line)
    assert ok, line


def test_gradient_fidelity(tmp_path, capsys):
    worst_time, failures = 0.0, []
    for variant in Variant:
        start = time.perf_counter()
        for seed in range(3):
            # 3-token premise (5 constituency nodes) and 3-token hypothesis
            code = main(["gradcheck", "--variant", variant.value, "--seed", str(seed), "--sizes", "3,3",
                         "--manifest-dir", str(tmp_path)])
            if code != 0:
                failures.append(f"{variant.value}/seed{seed}")
        worst_time = max(worst_time, time.perf_counter() - start)
    out = capsys.readouterr().out
    worst = max(float(l.split("\t")[2]) for l in out.splitlines() if "\tworst\t" in l)
    ok = not failures and worst < 1e-4 and worst_time < 120
    report("gradient fidelity", ok, f"worst rel err {worst:.2e} over 7 variants x 3 seeds, "
           f"slowest variant {worst_time:.1f}s, failures {failures or 'none'}")


def test_attention_normalization():
    rng = np.random.default_rng(2024)
    attending = [v for v in Variant if v.attends]
    worst, negative, passes = 0.0, 0, 0
    for k in range(1000):
        variant = attending[k % 3]
        ex = random_example(rng, int(rng.integers(1, 7)), int(rng.integers(1, 7)))
        params = init_params(variant, TrainConfig(embedding_size=3, hidden_size=4), build_vocab([ex]), rng=rng)
        randomize(params, rng, scale=float(rng.uniform(0.1, 3.0)))
        alpha = forward(variant, params, ex).trace.alpha
        worst = max(worst, float(np.max(np.abs(alpha.sum(axis=1) - 1))))
        negative += int(np.sum(alpha < 0))
        passes += 1
    report("attention normalization", worst < 1e-6 and negative == 0,
           f"{passes} passes, max |row sum - 1| = {worst:.1e}, negative entries {negative}")


def test_child_order():
    rng = np.random.default_rng(99)
    d, e = 5, 4
    u = lambda *s: param(rng.uniform(-0.8, 0.8, s))
    dep = DepTreeLstmParams(u(3 * d, e + d), u(3 * d), u(d, e), u(d, d))
    const = ConstTreeLstmParams(u(3 * d, e + 2 * d), u(3 * d), u(d, e), [u(d, 2 * d), u(d, 2 * d)])
    table = param(rng.normal(size=(12, e)))
    embed = lambda tape: (lambda tok: tape.row(table, int(tok[1:])))
    dep_worst, const_min = 0.0, np.inf
    for _ in range(100):
        n = int(rng.integers(2, 11))
        toks = [f"t{i}" for i in range(n)]
        tree = parse_conll([(i + 1, t, h) for i, (t, h) in enumerate(zip(toks, random_heads(n, rng)))])
        tape = Tape()
        before = encode_dep_tree(tape, dep, tree, embed(tape))
        for node in tree.nodes:
            rng.shuffle(node.children)
        after = encode_dep_tree(tape, dep, tree, embed(tape))
        for nid, s in before.nodes:
            dep_worst = max(dep_worst, float(np.max(np.abs(s.h.data - after.state(nid).h.data))))
            dep_worst = max(dep_worst, float(np.max(np.abs(s.c.data - after.state(nid).c.data))))

        ctree = parse_sexpr(random_bracketing(toks, rng))
        tape = Tape()
        a = encode_const_tree(tape, const, ctree, embed(tape))
        ctree.nodes[ctree.root].children.reverse()
        b = encode_const_tree(tape, const, ctree, embed(tape))
        const_min = min(const_min, float(np.max(np.abs(a.state(ctree.root).h.data - b.state(ctree.root).h.data))))
    report("child-sum order invariance", dep_worst < 1e-12 and const_min > 1e-6,
           f"dependency max diff {dep_worst:.1e} over 100 trees; constituency min diff {const_min:.1e}")


@pytest.mark.parametrize("variant", [Variant.SAT_CLSTM, Variant.SAT_DLSTM, Variant.AT_LSTM], ids=lambda v: v.value)
def test_overfit(variant):
    corpus = bundled_overfit_corpus()
    # default optimizer settings; early stopping disabled so only the 100-epoch budget applies
    cfg = TrainConfig(epochs=100, early_stop_patience=100)
    assert (cfg.learning_rate, cfg.hidden_size, cfg.clip_threshold) == (0.005, 100, 50.0)
    start = time.perf_counter()
    params, hist = train_loop(variant, cfg, corpus, corpus, on_epoch=lambda r: r.dev_acc == 1.0)
    elapsed = time.perf_counter() - start
    acc = accuracy(params, corpus)
    report(f"overfit {variant.value}", len(corpus) == 50 and acc == 1.0 and elapsed < 300,
           f"train accuracy {acc:.2f} after {len(hist)} epochs in {elapsed:.0f}s")


def test_variant_ordering():
    data = swap_pairs(500, seed=11)
    train, dev = data[:400], data[400:]
    # premise and hypothesis share one encoder so identical phrases land on identical states
    cfg = TrainConfig(embedding_size=50, hidden_size=50, learning_rate=0.02, epochs=40, early_stop_patience=40,
                      share_encoders=True)
    results = {}
    for variant in (Variant.NBOW, Variant.SAT_CLSTM):
        params, _ = train_loop(variant, cfg, train, dev)
        results[variant] = accuracy(params, dev)
    gap = results[Variant.SAT_CLSTM] - results[Variant.NBOW]
    report("variant ordering", gap >= 0.10,
           f"SAT_CLSTM dev {results[Variant.SAT_CLSTM]:.2f} vs NBOW dev {results[Variant.NBOW]:.2f} "
           f"(gap {100 * gap:.0f} points)")


def test_optimizer_contracts():
    from satlstm.data import UNK, Vocabulary
    from satlstm.model import ModelParams
    from satlstm.autodiff import Tensor

    rng = np.random.default_rng(5)
    worst_ratio = 0.0
    for _ in range(200):
        t = Tensor(np.zeros(7), requires_grad=True)
        p = ModelParams(Variant.NBOW, Vocabulary([UNK]), {"w": t})
        t.grad = rng.normal(size=7) * 10 ** rng.uniform(-3, 4)
        rho = float(10 ** rng.uniform(-1, 2))
        clip_gradients(p, rho)
        worst_ratio = max(worst_ratio, global_norm(p) / rho)

    lr, eps, theta_ref, acc = 0.5, 1e-8, 1.0, 0.0
    t = Tensor(np.array([1.0]), requires_grad=True)
    p, opt = ModelParams(Variant.NBOW, Vocabulary([UNK]), {"theta": t}), AdaGrad(eps)
    drift = 0.0
    for _ in range(100):
        g = 2 * theta_ref
        acc += g * g
        theta_ref -= lr * g / (np.sqrt(acc) + eps)
        t.grad = 2 * t.data
        opt.step(p, lr)
        drift = max(drift, abs(t.data[0] - theta_ref))
    ok = worst_ratio <= 1 + 1e-12 and abs(t.data[0]) < 0.05 and drift < 1e-12
    report("optimizer and clipping", ok,
           f"max post-clip norm / rho {worst_ratio:.12f}; AdaGrad |theta_100| {abs(t.data[0]):.4f}, "
           f"max deviation from recurrence {drift:.1e}")


def test_orthogonal_init():
    vocab = build_vocab(bundled_overfit_corpus())
    worst, blocks = 0.0, 0
    for variant, seed in itertools.product(Variant, range(3)):
        params = init_params(variant, TrainConfig(embedding_size=30, hidden_size=20, seed=seed), vocab)
        d = 20
        for name, t in params.items():
            if not is_orthogonal_param(name):
                continue
            rows, cols = t.shape
            for r0, c0 in itertools.product(range(0, rows - d + 1, d), range(0, cols - d + 1, d)):
                w = t.data[r0 : r0 + d, c0 : c0 + d]
                worst = max(worst, float(np.max(np.abs(w.T @ w - np.eye(d)))))
                blocks += 1
    report("orthogonal init", blocks > 0 and worst < 1e-5, f"{blocks} square blocks, max |W^T W - I| = {worst:.1e}")


def test_data_roundtrips():
    rng = np.random.default_rng(31)
    sexpr_bad = 0
    for _ in range(1000):
        toks = [f"w{i}" for i in range(int(rng.integers(1, 15)))]
        if parse_sexpr(random_bracketing(toks, rng)).tokens() != toks:
            sexpr_bad += 1
    conll_bad = 0
    for _ in range(1000):
        n = int(rng.integers(1, 15))
        heads = random_heads(n, rng)
        tree = parse_conll([(i + 1, f"w{i}", h) for i, h in enumerate(heads)])
        if flatten_conll(tree) != heads or tree.tokens() != [f"w{i}" for i in range(n)]:
            conll_bad += 1
    report("data round-trips", sexpr_bad == 0 and conll_bad == 0,
           f"s-expression mismatches {sexpr_bad}/1000, CoNLL mismatches {conll_bad}/1000")


def test_determinism(tmp_path):
    path, dep = tmp_path / "c.jsonl", tmp_path / "c.dep"
    write_bundle(swap_pairs(40, seed=4), path, dep)
    outs = []
    for name in ("a", "b"):
        out = tmp_path / name
        code = main(["train", "--variant", "sat-clstm", "--train", str(path), "--dev", str(path), "--dep-sidecar", str(dep),
                     "--out", str(out), "--hidden", "8", "--embedding-size", "6", "--epochs", "3", "--seed", "17"])
        assert code == 0
        outs.append(out)
    same_ckpt = (outs[0] / "model.ckpt").read_bytes() == (outs[1] / "model.ckpt").read_bytes()
    same_metrics = (outs[0] / "metrics.jsonl").read_bytes() == (outs[1] / "metrics.jsonl").read_bytes()
    report("determinism", same_ckpt and same_metrics,
           f"checkpoints identical: {same_ckpt}, metrics identical: {same_metrics}")
