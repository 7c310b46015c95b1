"""Learnable class-token bank of shape [classes, sentences, tokens, embd].

Each (class, sentence) slice is a complete token sequence fed to the frozen
text encoder; no vocabulary tokens are fixed.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .encoders import TKN_MAX, TokenContext
from .optim import ParamGroup
from .rng import stream
from .tensor import Tensor

__all__ = [
    "MatBank",
    "VocabTable",
    "ContextLengthError",
    "new_mat",
    "assemble_context",
    "encode_all",
    "nearest_vocab",
    "class_top_words",
    "load_vocab",
    "save_vocab",
]


class ContextLengthError(ValueError):
    """Token count exceeds the text encoder's context budget."""


class MatBank:
    def __init__(self, tokens, tkn_max=TKN_MAX):
        tokens = np.asarray(tokens, dtype=np.float32)
        if tokens.ndim != 4 or min(tokens.shape) < 1:
            raise ValueError(f"token bank must be 4-D with positive extents, got {tokens.shape}")
        if tokens.shape[2] > tkn_max:
            raise ContextLengthError(f"{tokens.shape[2]} tokens per sentence exceed tkn_max={tkn_max}")
        self.tkn_max = tkn_max
        self.params = ParamGroup("mat")
        self.params.add("tokens", Tensor(tokens))

    @property
    def tokens(self):
        return self.params.tensors["tokens"]

    @property
    def shape(self):
        return self.tokens.shape

    cls = property(lambda self: self.shape[0])
    snt = property(lambda self: self.shape[1])
    tkn = property(lambda self: self.shape[2])
    embd = property(lambda self: self.shape[3])

    def __repr__(self):
        return f"MatBank(shape={self.shape})"


def new_mat(cls, snt, tkn, embd, seed, tkn_max=TKN_MAX, std=0.02):
    for name, v in (("cls", cls), ("snt", snt), ("tkn", tkn), ("embd", embd)):
        if v < 1:
            raise ValueError(f"{name} must be positive, got {v}")
    if tkn > tkn_max:
        raise ContextLengthError(f"tkn={tkn} exceeds the maximum context length {tkn_max}")
    rng = stream(seed, "mat")
    return MatBank(rng.normal(0.0, std, size=(cls, snt, tkn, embd)), tkn_max=tkn_max)


def assemble_context(bank, i, j):
    """Rows ``bank[i, j]`` followed by zero rows up to ``tkn_max``."""
    if not (0 <= i < bank.cls and 0 <= j < bank.snt):
        raise IndexError(f"(class {i}, sentence {j}) outside bank of shape {bank.shape}")
    live = bank.tokens[i, j]
    pad = bank.tkn_max - bank.tkn
    rows = live if pad == 0 else T.concat([live, Tensor(np.zeros((pad, bank.embd)))], axis=0)
    return TokenContext(rows=rows, valid_len=bank.tkn)


def encode_all(bank, text_enc):
    """Text features for every (class, sentence): Tensor [cls, snt, D]."""
    if bank.embd != text_enc.embd:
        raise T.ShapeError("encode_all", bank.shape, (text_enc.config.tkn_max, text_enc.embd))
    if bank.tkn > text_enc.config.tkn_max:
        raise ContextLengthError(
            f"bank uses {bank.tkn} tokens; encoder accepts {text_enc.config.tkn_max}")
    return text_enc.encode_rows(bank.tokens)


@dataclass
class VocabTable:
    words: list
    embeddings: np.ndarray

    def __post_init__(self):
        self.embeddings = np.asarray(self.embeddings, dtype=np.float64)
        if self.embeddings.ndim != 2 or len(self.words) != self.embeddings.shape[0]:
            raise ValueError("vocab: one embedding row per word required")
        if len(self.words) and (np.abs(self.embeddings).sum(axis=1) == 0).any():
            raise ValueError("vocab: embedding rows must be non-zero")


def load_vocab(path):
    words, rows = [], []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            parts = line.split()
            if not parts:
                continue
            try:
                rows.append([float(x) for x in parts[1:]])
            except ValueError:
                raise ValueError(f"{path}:{lineno}: non-numeric embedding value") from None
            if rows and len(rows[-1]) != len(rows[0]):
                raise ValueError(f"{path}:{lineno}: expected {len(rows[0])} values, got {len(rows[-1])}")
            words.append(parts[0])
    if not words:
        raise ValueError(f"{path}: empty vocabulary")
    return VocabTable(words, np.array(rows))


def save_vocab(vocab, path):
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        for w, row in zip(vocab.words, vocab.embeddings):
            fh.write(w + " " + " ".join(repr(float(x)) for x in row) + "\n")


def _cosine_table(bank, vocab):
    if not vocab.words:
        raise ValueError("vocabulary is empty")
    if vocab.embeddings.shape[1] != bank.embd:
        raise T.ShapeError("nearest_vocab", bank.shape, vocab.embeddings.shape)
    tok = bank.tokens.data.astype(np.float64).reshape(-1, bank.embd)
    tn = tok / np.maximum(np.linalg.norm(tok, axis=1, keepdims=True), 1e-300)
    v = vocab.embeddings
    vn = v / np.linalg.norm(v, axis=1, keepdims=True)
    return tn @ vn.T  # [cls*snt*tkn, |vocab|]


def nearest_vocab(bank, vocab, k):
    """Top-``k`` vocabulary indices and cosines for every token.

    Returns ``(indices, sims)`` of shape [cls, snt, tkn, k]; ties go to the
    lower vocabulary index.
    """
    if k < 1:
        raise ValueError("k must be at least 1")
    sims = _cosine_table(bank, vocab)
    k = min(k, sims.shape[1])
    order = np.argsort(-sims, axis=1, kind="stable")[:, :k]
    top = np.take_along_axis(sims, order, axis=1)
    shape = bank.shape[:3] + (k,)
    return order.reshape(shape), top.reshape(shape)


def class_top_words(bank, vocab, k):
    """Per class, the ``k`` words with the highest cosine to any of its tokens."""
    sims = _cosine_table(bank, vocab).reshape(bank.cls, -1, len(vocab.words)).max(axis=1)
    out = []
    for row in sims:
        order = np.argsort(-row, kind="stable")[:k]
        out.append([(vocab.words[w], float(row[w])) for w in order])
    return out
