"""The seven model variants: encoder, optional attention, softmax classifier."""

from __future__ import annotations

import enum
from dataclasses import dataclass, field

import numpy as np

from .attention import AttentionParams, AttentionTrace, attend_sequence, attend_tree
from .autodiff import Tape, Tensor
from .data import LABELS, Example, Vocabulary
from .encoders import (
    ConstTreeLstmParams,
    DepTreeLstmParams,
    LstmParams,
    encode_const_tree,
    encode_dep_tree,
    encode_nbow,
    encode_sequence,
)

NUM_CLASSES = len(LABELS)
CONST_ARITY = 2


class Variant(enum.Enum):
    NBOW = "nbow"
    LSTM_ENC = "lstm"
    AT_LSTM = "at-lstm"
    TREE_DLSTM_ENC = "tree-dlstm"
    TREE_CLSTM_ENC = "tree-clstm"
    SAT_DLSTM = "sat-dlstm"
    SAT_CLSTM = "sat-clstm"

    @classmethod
    def parse(cls, name: str | "Variant") -> "Variant":
        if isinstance(name, Variant):
            return name
        key = name.strip().lower().replace("_", "-")
        for v in cls:
            if key in (v.value, v.name.lower().replace("_", "-")):
                return v
        raise ValueError(f"unknown variant {name!r}; choose from {', '.join(v.value for v in cls)}")

    @property
    def structure(self) -> str:
        """Which parse the variant consumes: ``sequence``, ``constituency`` or ``dependency``."""
        if self in (Variant.TREE_CLSTM_ENC, Variant.SAT_CLSTM):
            return "constituency"
        if self in (Variant.TREE_DLSTM_ENC, Variant.SAT_DLSTM):
            return "dependency"
        return "sequence"

    @property
    def attends(self) -> bool:
        return self in (Variant.AT_LSTM, Variant.SAT_CLSTM, Variant.SAT_DLSTM)


def param_shapes(
    variant: Variant,
    vocab_size: int,
    embedding_size: int,
    hidden_size: int,
    share_encoders: bool = False,
    tie_attention_weights: bool = False,
) -> dict[str, tuple[int, ...]]:
    """Names and shapes of every weight the variant owns, in a fixed order."""
    e, d = embedding_size, hidden_size
    shapes: dict[str, tuple[int, ...]] = {"embed": (vocab_size, e)}
    sides = ("enc",) if share_encoders else ("enc_x", "enc_y")
    structure = variant.structure
    if variant is Variant.NBOW:
        shapes["mlp.W"] = (d, 2 * e)
        shapes["mlp.b"] = (d,)
    else:
        for side in sides:
            if structure == "sequence":
                shapes[f"{side}.A"] = (4 * d, e + d)
                shapes[f"{side}.b"] = (4 * d,)
            else:
                width = CONST_ARITY * d if structure == "constituency" else d
                shapes[f"{side}.Wp"] = (3 * d, e + width)
                shapes[f"{side}.bp"] = (3 * d,)
                shapes[f"{side}.Wf"] = (d, e)
                if structure == "constituency":
                    for k in range(CONST_ARITY):
                        shapes[f"{side}.Uf{k}"] = (d, width)
                else:
                    shapes[f"{side}.Uf"] = (d, d)
        if variant.attends:
            shapes["att.Wy"] = (d, d)
            shapes["att.Wx"] = (d, d)
            shapes["att.we"] = (d,)
            carry = CONST_ARITY * d if structure == "constituency" else d
            shapes["att.Wr_carry"] = (d, carry)
            if structure == "sequence" and not tie_attention_weights:
                shapes["att.Wr_score"] = (d, d)
        if not (variant.attends and tie_attention_weights):
            shapes["att.Wx_final"] = (d, d)
            shapes["att.Wy_final"] = (d, d)
    shapes["cls.Wo"] = (NUM_CLASSES, d)
    shapes["cls.bo"] = (NUM_CLASSES,)
    return shapes


@dataclass
class ModelParams:
    """Complete named weight set of one variant, plus the vocabulary it indexes."""

    variant: Variant
    vocab: Vocabulary
    tensors: dict[str, Tensor]
    share_encoders: bool = False
    tie_attention_weights: bool = False

    def __getitem__(self, name: str) -> Tensor:
        return self.tensors[name]

    def __iter__(self):
        return iter(self.tensors.values())

    def items(self):
        return self.tensors.items()

    @property
    def hidden_size(self) -> int:
        return self.tensors["cls.Wo"].shape[1]

    @property
    def embedding_size(self) -> int:
        return self.tensors["embed"].shape[1]

    def zero_grad(self) -> None:
        for t in self.tensors.values():
            t.grad = None

    def copy(self) -> "ModelParams":
        tensors = {}
        for name, t in self.tensors.items():
            c = Tensor(t.data.copy(), requires_grad=t.requires_grad, name=name)
            tensors[name] = c
        return ModelParams(self.variant, self.vocab, tensors, self.share_encoders, self.tie_attention_weights)

    def _side(self, side: str) -> str:
        return "enc" if self.share_encoders else f"enc_{side}"

    def lstm(self, side: str) -> LstmParams:
        p = self._side(side)
        return LstmParams(self[f"{p}.A"], self[f"{p}.b"])

    def const_tree(self, side: str) -> ConstTreeLstmParams:
        p = self._side(side)
        return ConstTreeLstmParams(
            self[f"{p}.Wp"], self[f"{p}.bp"], self[f"{p}.Wf"], [self[f"{p}.Uf{k}"] for k in range(CONST_ARITY)]
        )

    def dep_tree(self, side: str) -> DepTreeLstmParams:
        p = self._side(side)
        return DepTreeLstmParams(self[f"{p}.Wp"], self[f"{p}.bp"], self[f"{p}.Wf"], self[f"{p}.Uf"])

    def attention(self) -> AttentionParams:
        t = self.tensors
        tied = self.tie_attention_weights
        return AttentionParams(
            Wy=t["att.Wy"],
            Wx=t["att.Wx"],
            we=t["att.we"],
            Wx_final=t["att.Wx"] if tied else t["att.Wx_final"],
            Wy_final=t["att.Wy"] if tied else t["att.Wy_final"],
            Wr_carry=t["att.Wr_carry"],
            Wr_score=(t["att.Wr_carry"] if tied else t.get("att.Wr_score")),
        )


@dataclass
class Prediction:
    probs: np.ndarray
    label: int
    trace: AttentionTrace | None
    logits: Tensor = field(repr=False)
    tape: Tape = field(repr=False)
    pair_repr: Tensor | None = field(default=None, repr=False)


class MissingParseError(ValueError):
    pass


def _embedder(tape: Tape, params: ModelParams):
    table = params["embed"]
    vocab = params.vocab
    return lambda token: tape.row(table, vocab.index(token))


def _tree(example: Example, side: str, structure: str, variant: Variant):
    attr = ("premise" if side == "x" else "hypothesis") + ("_dep" if structure == "dependency" else "")
    tree = getattr(example, attr)
    if tree is None:
        role = "premise" if side == "x" else "hypothesis"
        raise MissingParseError(f"variant {variant.value} needs a {structure} parse of the {role} (pair {example.pair_id})")
    return tree


def encode_side(tape: Tape, params: ModelParams, example: Example, side: str):
    """Encoder output for one sentence: list of states, EncodedTree, or an NBOW sum."""
    variant = params.variant
    embed = _embedder(tape, params)
    structure = variant.structure
    if structure == "sequence":
        role = "premise" if side == "x" else "hypothesis"
        try:
            tokens = example.tokens(role)
        except ValueError as err:
            raise MissingParseError(f"variant {variant.value}: {err}") from None
        if variant is Variant.NBOW:
            return encode_nbow(tape, embed, tokens)
        return encode_sequence(tape, params.lstm(side), [embed(t) for t in tokens])
    tree = _tree(example, side, structure, variant)
    if structure == "constituency":
        return encode_const_tree(tape, params.const_tree(side), tree, embed)
    return encode_dep_tree(tape, params.dep_tree(side), tree, embed)


def forward(variant: Variant, params: ModelParams, example: Example, tape: Tape | None = None) -> Prediction:
    variant = Variant.parse(variant)
    if variant is not params.variant:
        raise ValueError(f"parameters belong to {params.variant.value}, not {variant.value}")
    tape = Tape() if tape is None else tape
    enc_x = encode_side(tape, params, example, "x")
    enc_y = encode_side(tape, params, example, "y")
    trace = None
    if variant is Variant.NBOW:
        pair = tape.tanh(tape.add(tape.matmul(params["mlp.W"], tape.concat([enc_x, enc_y])), params["mlp.b"]))
    elif variant is Variant.AT_LSTM:
        pair, trace = attend_sequence(tape, params.attention(), enc_x, enc_y)
        trace.premise_tokens = example.tokens("premise")
        trace.hypothesis_tokens = example.tokens("hypothesis")
    elif variant.attends:
        pair, trace = attend_tree(tape, params.attention(), enc_x, enc_y, variant.structure)
    else:
        if variant is Variant.LSTM_ENC:
            hx, hy = enc_x[-1].h, enc_y[-1].h
        else:
            hx, hy = enc_x.state(enc_x.root).h, enc_y.state(enc_y.root).h
        pair = tape.tanh(
            tape.add(tape.matmul(params["att.Wx_final"], hx), tape.matmul(params["att.Wy_final"], hy))
        )
    logits = tape.add(tape.matmul(params["cls.Wo"], pair), params["cls.bo"])
    probs = tape.softmax(logits)
    return Prediction(probs.data.copy(), int(np.argmax(probs.data)), trace, logits, tape, pair)


def loss(pred: Prediction, gold: int, params: ModelParams | None = None, l2: float = 0.0) -> Tensor:
    """Cross-entropy of the gold label, plus ``l2 * sum ||theta||^2`` when ``l2 > 0``."""
    if not 0 <= gold < NUM_CLASSES:
        raise ValueError(f"gold label {gold} outside 0..{NUM_CLASSES - 1}")
    tape = pred.tape
    value = tape.cross_entropy(pred.logits, gold)
    if l2 > 0 and params is not None:
        reg = tape.add_n([tape.sum_squares(t) for t in params])
        value = tape.add(value, tape.scale(reg, l2))
    return value


def predict(params: ModelParams, example: Example) -> Prediction:
    return forward(params.variant, params, example)
