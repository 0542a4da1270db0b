"""Sequence LSTM, N-ary constituency Tree-LSTM, child-sum dependency Tree-LSTM and NBOW.

Every encoder takes the :class:`~satlstm.autodiff.Tape` to record on as its
first argument, and an ``embed`` callable mapping a token to its input vector
(a tensor on the same tape).
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Sequence

from .autodiff import ShapeError, Tape, Tensor, zeros
from .data import ParseTree

Embed = Callable[[str], Tensor]


@dataclass
class NodeState:
    h: Tensor
    c: Tensor


@dataclass
class LstmParams:
    """``A`` is ``4d x (e + d)``; its row blocks are ordered [candidate; output; input; forget]."""

    A: Tensor
    b: Tensor

    @property
    def hidden(self) -> int:
        return self.b.shape[0] // 4

    @property
    def input_size(self) -> int:
        return self.A.shape[1] - self.hidden


@dataclass
class ConstTreeLstmParams:
    """N-ary composition; ``Wp`` rows are [candidate; output; input]."""

    Wp: Tensor  # 3d x (e + N d)
    bp: Tensor  # 3d
    Wf: Tensor  # d x e
    Uf: list[Tensor]  # N matrices, d x N d

    @property
    def hidden(self) -> int:
        return self.bp.shape[0] // 3

    @property
    def arity(self) -> int:
        return len(self.Uf)

    @property
    def input_size(self) -> int:
        return self.Wf.shape[1]


@dataclass
class DepTreeLstmParams:
    """Child-sum composition; ``Uf`` is shared by all children."""

    Wp: Tensor  # 3d x (e + d)
    bp: Tensor  # 3d
    Wf: Tensor  # d x e
    Uf: Tensor  # d x d

    @property
    def hidden(self) -> int:
        return self.bp.shape[0] // 3

    @property
    def input_size(self) -> int:
        return self.Wf.shape[1]


@dataclass
class EncodedTree:
    """Node states in post-order; children always precede their parent."""

    tree: ParseTree
    nodes: list[tuple[int, NodeState]]

    def __post_init__(self):
        self._pos = {nid: k for k, (nid, _) in enumerate(self.nodes)}

    @property
    def root(self) -> int:
        return self.tree.root

    def state(self, nid: int) -> NodeState:
        return self.nodes[self._pos[nid]][1]

    def position(self, nid: int) -> int:
        return self._pos[nid]


def _check_input(x: Tensor, size: int) -> None:
    if x.shape != (size,):
        raise ShapeError(f"input embedding has shape {x.shape}, expected ({size},)")


def _gates(tape: Tape, z: Tensor, d: int, count: int) -> list[Tensor]:
    """Split pre-activations into ``count`` blocks: tanh on the first, sigmoid on the rest."""
    blocks = [tape.slice(z, k * d, (k + 1) * d) for k in range(count)]
    return [tape.tanh(blocks[0])] + [tape.sigmoid(b) for b in blocks[1:]]


def lstm_step(tape: Tape, params: LstmParams, prev: NodeState, x: Tensor) -> NodeState:
    d = params.hidden
    _check_input(x, params.input_size)
    if prev.h.shape != (d,) or prev.c.shape != (d,):
        raise ShapeError(f"previous state has shape {prev.h.shape}/{prev.c.shape}, expected ({d},)")
    z = tape.add(tape.matmul(params.A, tape.concat([x, prev.h])), params.b)
    cand, o, i, f = _gates(tape, z, d, 4)
    c = tape.add(tape.mul(cand, i), tape.mul(prev.c, f))
    h = tape.mul(o, tape.tanh(c))
    return NodeState(h, c)


def encode_sequence(tape: Tape, params: LstmParams, embeddings: Sequence[Tensor]) -> list[NodeState]:
    if not embeddings:
        raise ValueError("encode_sequence: empty token list")
    d = params.hidden
    state = NodeState(zeros(d), zeros(d))
    out = []
    for x in embeddings:
        state = lstm_step(tape, params, state, x)
        out.append(state)
    return out


def encode_const_tree(tape: Tape, params: ConstTreeLstmParams, tree: ParseTree, embed: Embed) -> EncodedTree:
    d, n_slots, e = params.hidden, params.arity, params.input_size
    zero_h = zeros(d)
    zero_x = zeros(e)
    states: dict[int, NodeState] = {}
    order = []
    for nid in tree.postorder():
        node = tree.nodes[nid]
        if len(node.children) > n_slots:
            raise ValueError(f"node {nid} has {len(node.children)} children, arity limit is {n_slots}")
        if node.children and node.token is not None:
            raise ValueError(f"internal node {nid} carries token {node.token!r}")
        if node.children:
            x = zero_x
        else:
            if node.token is None:
                raise ValueError(f"leaf node {nid} has no token")
            x = embed(node.token)
            _check_input(x, e)
        kids = [states[c] for c in node.children]
        H = tape.concat([k.h for k in kids] + [zero_h] * (n_slots - len(kids)))
        z = tape.add(tape.matmul(params.Wp, tape.concat([x, H])), params.bp)
        cand, o, i = _gates(tape, z, d, 3)
        c = tape.mul(cand, i)
        if kids:
            wx = tape.matmul(params.Wf, x)
            terms = [c]
            # empty slots hold c = 0, so their forget terms vanish
            for k, kid in enumerate(kids):
                f = tape.sigmoid(tape.add(wx, tape.matmul(params.Uf[k], H)))
                terms.append(tape.mul(kid.c, f))
            c = tape.add_n(terms)
        h = tape.mul(o, tape.tanh(c))
        states[nid] = NodeState(h, c)
        order.append((nid, states[nid]))
    return EncodedTree(tree, order)


def encode_dep_tree(tape: Tape, params: DepTreeLstmParams, tree: ParseTree, embed: Embed) -> EncodedTree:
    d, e = params.hidden, params.input_size
    states: dict[int, NodeState] = {}
    order = []
    for nid in tree.postorder():
        node = tree.nodes[nid]
        if node.token is None:
            raise ValueError(f"dependency node {nid} has no token")
        x = embed(node.token)
        _check_input(x, e)
        kids = [states[c] for c in node.children]
        H = tape.add_n([k.h for k in kids]) if kids else zeros(d)
        z = tape.add(tape.matmul(params.Wp, tape.concat([x, H])), params.bp)
        cand, o, i = _gates(tape, z, d, 3)
        c = tape.mul(cand, i)
        if kids:
            wx = tape.matmul(params.Wf, x)
            terms = [c]
            for kid in kids:
                f = tape.sigmoid(tape.add(wx, tape.matmul(params.Uf, kid.h)))
                terms.append(tape.mul(kid.c, f))
            c = tape.add_n(terms)
        h = tape.mul(o, tape.tanh(c))
        states[nid] = NodeState(h, c)
        order.append((nid, states[nid]))
    return EncodedTree(tree, order)


def encode_nbow(tape: Tape, embed: Embed, tokens: Sequence[str]) -> Tensor:
    if not tokens:
        raise ValueError("encode_nbow: empty token list")
    return tape.add_n([embed(t) for t in tokens])
