"""End-to-end finite-difference check of every parameter gradient."""

from __future__ import annotations

import numpy as np

from .autodiff import numeric_grad, relative_error
from .data import Example, ParseTree, build_vocab, parse_conll, parse_sexpr
from .model import ModelParams, Variant, forward, loss
from .train import TrainConfig, init_params

TOLERANCE = 1e-4
STEP = 1e-5


def random_bracketing(tokens: list[str], rng: np.random.Generator) -> str:
    if len(tokens) == 1:
        return tokens[0]
    cut = int(rng.integers(1, len(tokens)))
    return f"( {random_bracketing(tokens[:cut], rng)} {random_bracketing(tokens[cut:], rng)} )"


def random_heads(n: int, rng: np.random.Generator) -> list[int]:
    """Head array of a uniformly shuffled random tree (1-based, 0 = root)."""
    perm = rng.permutation(n) + 1
    heads = [0] * n
    for k in range(1, n):
        heads[perm[k] - 1] = int(perm[rng.integers(k)])
    return heads


def random_example(
    rng: np.random.Generator, premise_len: int = 3, hypothesis_len: int = 2, pair_id: str = "gc"
) -> Example:
    words = [f"w{k}" for k in range(premise_len + hypothesis_len)]
    px = words[:premise_len]
    # hypothesis shares one word with the premise so embeddings are reused across sides
    hy = [px[0]] + words[premise_len + 1 : premise_len + hypothesis_len]

    def dep(tokens: list[str]) -> ParseTree:
        return parse_conll([(i + 1, t, h) for i, (t, h) in enumerate(zip(tokens, random_heads(len(tokens), rng)))])

    return Example(
        pair_id,
        int(rng.integers(3)),
        parse_sexpr(random_bracketing(px, rng)),
        parse_sexpr(random_bracketing(hy, rng)),
        dep(px),
        dep(hy),
    )


def randomize(params: ModelParams, rng: np.random.Generator, scale: float = 0.5) -> None:
    """Overwrite every weight (biases included) with uniform noise so no term is trivially zero."""
    for t in params:
        t.data[...] = rng.uniform(-scale, scale, size=t.shape)


def _widened(params: ModelParams, dtype) -> ModelParams:
    wide = params.copy()
    for name, t in wide.items():
        t.data = t.data.astype(dtype)
    return wide


def check_gradients(
    params: ModelParams, example: Example, l2: float = 0.0, step: float = STEP, oracle_dtype=np.longdouble
) -> dict[str, float]:
    """Worst elementwise relative error per parameter block.

    The analytic gradient comes from the 64-bit tape. The central differences
    are evaluated on a copy of the weights held in ``oracle_dtype``: in 64-bit
    their roundoff (about 1e-11 absolute at step 1e-5) swamps gradient entries
    near 1e-8, which attention-score weights routinely have.
    """
    params.zero_grad()
    pred = forward(params.variant, params, example)
    pred.tape.backward(loss(pred, example.gold, params, l2))
    wide = _widened(params, oracle_dtype)

    def f():
        return loss(forward(wide.variant, wide, example), example.gold, wide, l2).data[()]

    worst = {}
    for name, t in params.items():
        analytic = t.grad if t.grad is not None else np.zeros_like(t.data)
        numeric = numeric_grad(f, wide[name], step)
        worst[name] = float(relative_error(analytic, numeric).max())
    params.zero_grad()
    return worst


def run(
    variant: Variant | str,
    seed: int = 0,
    premise_len: int = 3,
    hypothesis_len: int = 2,
    hidden: int = 4,
    embedding: int = 3,
    l2: float = 0.0,
    oracle_dtype=np.longdouble,
) -> dict[str, float]:
    variant = Variant.parse(variant)
    rng = np.random.default_rng(seed)
    example = random_example(rng, premise_len, hypothesis_len)
    config = TrainConfig(embedding_size=embedding, hidden_size=hidden, seed=seed)
    params = init_params(variant, config, build_vocab([example]), rng=rng)
    randomize(params, rng)
    return check_gradients(params, example, l2, oracle_dtype=oracle_dtype)
