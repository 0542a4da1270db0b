"""Word-by-word attention over a sequence and tree-over-tree attention.

Both variants walk the hypothesis (left to right, or post-order over its
tree) and at each step soft-align the current hypothesis state against every
premise state, carrying an accumulated premise summary ``r`` forward.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .autodiff import ShapeError, Tape, Tensor, zeros
from .encoders import EncodedTree, NodeState


@dataclass
class AttentionParams:
    Wy: Tensor
    Wx: Tensor
    we: Tensor
    Wx_final: Tensor
    Wy_final: Tensor
    Wr_carry: Tensor  # d x d (sequence, dependency) or d x N d (constituency)
    Wr_score: Tensor | None = None  # sequence mode only

    @property
    def hidden(self) -> int:
        return self.we.shape[0]


@dataclass
class AttentionTrace:
    """One probability row per hypothesis node over all premise nodes.

    ``premise_ids``/``hypothesis_ids`` give the node id of each column/row and
    the ``*_spans`` the token range each covers.
    """

    alpha: np.ndarray
    premise_ids: list[int]
    hypothesis_ids: list[int]
    premise_spans: list[tuple[int, int]]
    hypothesis_spans: list[tuple[int, int]]
    premise_tokens: list[str] = field(default_factory=list)
    hypothesis_tokens: list[str] = field(default_factory=list)

    def to_dict(self) -> dict:
        return {
            "premise": {
                "tokens": self.premise_tokens,
                "nodes": [{"id": i, "span": list(s)} for i, s in zip(self.premise_ids, self.premise_spans)],
            },
            "hypothesis": {
                "tokens": self.hypothesis_tokens,
                "nodes": [{"id": i, "span": list(s)} for i, s in zip(self.hypothesis_ids, self.hypothesis_spans)],
            },
            "alpha": self.alpha.tolist(),
        }


def _combine(tape: Tape, params: AttentionParams, r: Tensor, h_y: Tensor) -> Tensor:
    return tape.tanh(tape.add(tape.matmul(params.Wx_final, r), tape.matmul(params.Wy_final, h_y)))


def _check_states(states: list[Tensor], d: int, side: str) -> None:
    if not states:
        raise ValueError(f"attention: empty {side}")
    for h in states:
        if h.shape != (d,):
            raise ShapeError(f"attention: {side} state has shape {h.shape}, expected ({d},)")


def _align(tape: Tape, params: AttentionParams, WxH: Tensor, h_y: Tensor, extra: Tensor | None) -> Tensor:
    """Attention weights of one hypothesis state over all premise columns."""
    v = tape.matmul(params.Wy, h_y)
    if extra is not None:
        v = tape.add(v, extra)
    scores = tape.matmul(params.we, tape.tanh(tape.add_col(WxH, v)))
    return tape.softmax(scores)


def attend_sequence(
    tape: Tape, params: AttentionParams, premise: list[NodeState], hypothesis: list[NodeState]
) -> tuple[Tensor, AttentionTrace]:
    d = params.hidden
    hx = [s.h for s in premise]
    hy = [s.h for s in hypothesis]
    _check_states(hx, d, "premise")
    _check_states(hy, d, "hypothesis")
    if params.Wr_score is None:
        raise ValueError("sequence attention needs Wr_score")
    H = tape.stack_cols(hx)
    WxH = tape.matmul(params.Wx, H)
    r = zeros(d)
    rows = []
    for j, h_y in enumerate(hy):
        extra = tape.matmul(params.Wr_score, r) if j else None  # r_0 = 0
        alpha = _align(tape, params, WxH, h_y, extra)
        rows.append(alpha.data.copy())
        carry = tape.matmul(H, alpha)
        r = tape.add(carry, tape.tanh(tape.matmul(params.Wr_carry, r))) if j else carry
    spans_x = [(i, i + 1) for i in range(len(hx))]
    spans_y = [(j, j + 1) for j in range(len(hy))]
    trace = AttentionTrace(np.array(rows), list(range(len(hx))), list(range(len(hy))), spans_x, spans_y)
    return _combine(tape, params, r, hy[-1]), trace


def attend_tree(
    tape: Tape, params: AttentionParams, premise: EncodedTree, hypothesis: EncodedTree, mode: str
) -> tuple[Tensor, AttentionTrace]:
    """Tree-over-tree attention; ``mode`` is ``"constituency"`` or ``"dependency"``."""
    if mode not in ("constituency", "dependency"):
        raise ValueError(f"unknown attention mode {mode!r}")
    for enc in (premise, hypothesis):
        if enc.tree.kind != mode:
            raise ValueError(f"attention mode {mode} does not match a {enc.tree.kind} tree")
    d = params.hidden
    hx = [s.h for _, s in premise.nodes]
    _check_states(hx, d, "premise")
    _check_states([s.h for _, s in hypothesis.nodes], d, "hypothesis")
    if mode == "constituency":
        slots = params.Wr_carry.shape[1] // d
        if params.Wr_carry.shape != (d, slots * d) or slots < 1:
            raise ShapeError(f"constituency carry matrix has shape {params.Wr_carry.shape}")
    elif params.Wr_carry.shape != (d, d):
        raise ShapeError(f"dependency carry matrix has shape {params.Wr_carry.shape}")

    H = tape.stack_cols(hx)
    WxH = tape.matmul(params.Wx, H)
    tree = hypothesis.tree
    acc: dict[int, Tensor] = {}
    rows = []
    for nid, state in hypothesis.nodes:
        kids = tree.nodes[nid].children
        g = None
        if kids:
            if mode == "constituency":
                if len(kids) > slots:
                    raise ValueError(f"hypothesis node {nid} exceeds arity {slots}")
                R = tape.concat([acc[k] for k in kids] + [zeros(d)] * (slots - len(kids)))
            else:
                R = tape.add_n([acc[k] for k in kids])
            g = tape.matmul(params.Wr_carry, R)
        alpha = _align(tape, params, WxH, state.h, g)
        rows.append(alpha.data.copy())
        r = tape.matmul(H, alpha)
        if g is not None:
            r = tape.add(r, tape.tanh(g))
        acc[nid] = r
    root_state = hypothesis.state(tree.root)
    trace = AttentionTrace(
        np.array(rows),
        [nid for nid, _ in premise.nodes],
        [nid for nid, _ in hypothesis.nodes],
        [premise.tree.nodes[nid].span for nid, _ in premise.nodes],
        [tree.nodes[nid].span for nid, _ in hypothesis.nodes],
        premise.tree.tokens(),
        tree.tokens(),
    )
    return _combine(tape, params, acc[tree.root], root_state.h), trace
