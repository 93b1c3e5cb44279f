"""Character-level text encoding and the conv + recurrent text encoder.

Descriptions are lowercased, mapped onto a fixed 70-symbol alphabet and
one-hot encoded to a fixed length of 201 characters.  The encoder runs two
temporal conv/pool blocks, a tanh recurrent layer, averages the hidden states
over the remaining steps and projects the average into the shared embedding
space (dimension 64 by default, matching the image encoder).
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from . import tensor as T
from .errors import EmptyClassError, EmptyDescriptionError, ShapeError

# 70 symbols: 26 lowercase letters, 10 digits, space, 31 punctuation marks,
# pad, unknown.  Frozen; checkpoint compatibility depends on this ordering.
LETTERS = "abcdefghijklmnopqrstuvwxyz"
DIGITS = "0123456789"
PUNCTUATION = "!\"#$%&'()*+,-./:;<=>?@[\\]^_{|}~"
SYMBOLS = LETTERS + DIGITS + " " + PUNCTUATION

SEQUENCE_LENGTH = 201


@dataclass(frozen=True)
class Alphabet:
    symbols: str
    index: dict[str, int]
    pad_index: int
    unknown_index: int

    @property
    def size(self) -> int:
        return len(self.symbols) + 2  # + pad + unknown


def build_alphabet() -> Alphabet:
    index = {ch: i for i, ch in enumerate(SYMBOLS)}
    return Alphabet(
        symbols=SYMBOLS,
        index=index,
        pad_index=len(SYMBOLS),
        unknown_index=len(SYMBOLS) + 1,
    )


@dataclass
class EncodedText:
    """Index sequence over the alphabet; `onehot` materializes the A x L matrix."""

    indices: np.ndarray  # (SEQUENCE_LENGTH,) int32
    effective_length: int
    alphabet_size: int

    @property
    def onehot(self) -> np.ndarray:
        out = np.zeros((self.alphabet_size, SEQUENCE_LENGTH))
        out[self.indices, np.arange(SEQUENCE_LENGTH)] = 1.0
        return out


def encode_chars(text: str, alphabet: Alphabet) -> EncodedText:
    normalized = text.strip().lower()
    if not normalized:
        raise EmptyDescriptionError("description is empty after trimming")
    chars = normalized[:SEQUENCE_LENGTH]
    indices = np.full(SEQUENCE_LENGTH, alphabet.pad_index, dtype=np.int32)
    for i, ch in enumerate(chars):
        indices[i] = alphabet.index.get(ch, alphabet.unknown_index)
    return EncodedText(indices=indices, effective_length=len(chars),
                       alphabet_size=alphabet.size)


def stack_onehots(texts: Sequence[EncodedText]) -> np.ndarray:
    """(B, A, L) one-hot batch for a list of encoded texts."""
    if not texts:
        raise EmptyClassError("no texts to stack")
    a = texts[0].alphabet_size
    out = np.zeros((len(texts), a, SEQUENCE_LENGTH))
    cols = np.arange(SEQUENCE_LENGTH)
    for i, t in enumerate(texts):
        out[i, t.indices, cols] = 1.0
    return out


# ---------------------------------------------------------------------------
# encoder parameters


@dataclass
class TextEncoderParams:
    conv1_w: np.ndarray  # (n_filters, A, 7)
    conv1_b: np.ndarray
    conv2_w: np.ndarray  # (n_filters, n_filters, 5)
    conv2_b: np.ndarray
    rnn_wx: np.ndarray  # (hidden, n_filters)
    rnn_wh: np.ndarray  # (hidden, hidden)
    rnn_b: np.ndarray
    proj_w: np.ndarray  # (embed_dim, hidden)
    proj_b: np.ndarray

    def to_dict(self) -> dict[str, np.ndarray]:
        return {
            "conv1_w": self.conv1_w, "conv1_b": self.conv1_b,
            "conv2_w": self.conv2_w, "conv2_b": self.conv2_b,
            "rnn_wx": self.rnn_wx, "rnn_wh": self.rnn_wh, "rnn_b": self.rnn_b,
            "proj_w": self.proj_w, "proj_b": self.proj_b,
        }

    @classmethod
    def from_dict(cls, d: dict[str, np.ndarray]) -> "TextEncoderParams":
        return cls(**{k: np.asarray(v, dtype=np.float64) for k, v in d.items()})

    @property
    def embed_dim(self) -> int:
        return self.proj_w.shape[0]


def init_text_params(
    rng: np.random.Generator,
    alphabet_size: int = 70,
    n_filters: int = 128,
    hidden: int = 128,
    embed_dim: int = 64,
) -> TextEncoderParams:
    def he(shape, fan_in):
        return rng.normal(0.0, np.sqrt(2.0 / fan_in), size=shape)

    return TextEncoderParams(
        conv1_w=he((n_filters, alphabet_size, 7), alphabet_size * 7),
        conv1_b=np.zeros(n_filters),
        conv2_w=he((n_filters, n_filters, 5), n_filters * 5),
        conv2_b=np.zeros(n_filters),
        rnn_wx=he((hidden, n_filters), n_filters),
        rnn_wh=rng.normal(0.0, 1.0 / np.sqrt(hidden), size=(hidden, hidden)),
        rnn_b=np.zeros(hidden),
        proj_w=he((embed_dim, hidden), hidden),
        proj_b=np.zeros(embed_dim),
    )


# ---------------------------------------------------------------------------
# forward / backward

POOL_WIDTH = 3
POOL_STRIDE = 3


def _onehot_conv_forward(indices: np.ndarray, w: np.ndarray, b: np.ndarray
                         ) -> tuple[np.ndarray, tuple]:
    """temporal_conv specialized to one-hot input given as index rows.

    Equivalent to temporal_conv_forward on the materialized one-hot batch but
    gathers filter columns instead of multiplying by zeros.
    """
    bsz, length = indices.shape
    n_out, a, k = w.shape
    l_out = length - k + 1
    y = np.empty((bsz, n_out, l_out))
    y[:] = b[None, :, None]
    for off in range(k):
        y += w[:, indices[:, off : off + l_out], off].transpose(1, 0, 2)
    return y, (indices, a, k, l_out)


def _onehot_conv_backward(dy: np.ndarray, cache: tuple) -> tuple[np.ndarray, np.ndarray]:
    indices, a, k, l_out = cache
    n_out = dy.shape[1]
    windows = sliding_window_view(indices, k, axis=1)  # (B, L_out, k)
    ci = (windows + np.arange(k) * a).ravel()
    dyf = np.ascontiguousarray(dy.transpose(1, 0, 2)).reshape(n_out, -1)
    dw = np.empty((n_out, a, k))
    for o in range(n_out):
        binned = np.bincount(ci, weights=np.repeat(dyf[o], k), minlength=a * k)
        dw[o] = binned.reshape(k, a).T
    return dw, dy.sum(axis=(0, 2))


def encoder_forward(onehots: np.ndarray, p: TextEncoderParams
                    ) -> tuple[np.ndarray, np.ndarray, tuple]:
    """Batched forward pass.

    onehots: (B, A, L), strictly one-hot per column.  Returns (hiddens
    (B, L', hidden), embeddings (B, embed_dim), cache).
    """
    if onehots.ndim != 3 or onehots.shape[1] != p.conv1_w.shape[1]:
        raise ShapeError(f"encoder input {onehots.shape} vs conv1 {p.conv1_w.shape}")
    indices = onehots.argmax(axis=1)
    c1, c1c = _onehot_conv_forward(indices, p.conv1_w, p.conv1_b)
    r1, r1c = T.relu_forward(c1)
    p1, p1c = T.temporal_maxpool_forward(r1, POOL_WIDTH, POOL_STRIDE)
    c2, c2c = T.temporal_conv_forward(p1, p.conv2_w, p.conv2_b)
    r2, r2c = T.relu_forward(c2)
    p2, p2c = T.temporal_maxpool_forward(r2, POOL_WIDTH, POOL_STRIDE)
    xs = np.ascontiguousarray(p2.transpose(0, 2, 1))  # (B, L', n_filters)
    h0 = np.zeros(p.rnn_wh.shape[0])
    hs, rnnc = T.rnn_forward(xs, h0, p.rnn_wx, p.rnn_wh, p.rnn_b)
    mean, meanc = T.mean_over_time_forward(hs)
    emb, linc = T.linear_forward(mean, p.proj_w, p.proj_b)
    cache = (c1c, r1c, p1c, c2c, r2c, p2c, rnnc, meanc, linc)
    return hs, emb, cache


def encoder_backward(d_emb: np.ndarray, cache: tuple, p: TextEncoderParams
                     ) -> dict[str, np.ndarray]:
    """Gradients of a loss on the embeddings w.r.t. every encoder parameter."""
    c1c, r1c, p1c, c2c, r2c, p2c, rnnc, meanc, linc = cache
    dmean, dproj_w, dproj_b = T.linear_backward(d_emb, linc)
    dhs = T.mean_over_time_backward(dmean, meanc)
    dxs, _, dwx, dwh, drb = T.rnn_backward(dhs, rnnc)
    dp2 = np.ascontiguousarray(dxs.transpose(0, 2, 1))
    dr2 = T.temporal_maxpool_backward(dp2, p2c)
    dc2 = T.relu_backward(dr2, r2c)
    dp1, dconv2_w, dconv2_b = T.temporal_conv_backward(dc2, c2c)
    dr1 = T.temporal_maxpool_backward(dp1, p1c)
    dc1 = T.relu_backward(dr1, r1c)
    dconv1_w, dconv1_b = _onehot_conv_backward(dc1, c1c)
    return {
        "conv1_w": dconv1_w, "conv1_b": dconv1_b,
        "conv2_w": dconv2_w, "conv2_b": dconv2_b,
        "rnn_wx": dwx, "rnn_wh": dwh, "rnn_b": drb,
        "proj_w": dproj_w, "proj_b": dproj_b,
    }


@dataclass
class TextEmbedding:
    vector: np.ndarray


def text_forward(enc: EncodedText, p: TextEncoderParams
                 ) -> tuple[np.ndarray, TextEmbedding]:
    """Single-sample forward: (per-step hidden states, final embedding)."""
    hs, emb, _ = encoder_forward(enc.onehot[None], p)
    return hs[0], TextEmbedding(vector=emb[0])


def embed_texts(texts: Sequence[EncodedText], p: TextEncoderParams,
                batch_size: int = 64) -> np.ndarray:
    """(N, embed_dim) embeddings, computed in batches."""
    out = np.empty((len(texts), p.embed_dim))
    for start in range(0, len(texts), batch_size):
        chunk = texts[start : start + batch_size]
        _, emb, _ = encoder_forward(stack_onehots(chunk), p)
        out[start : start + len(chunk)] = emb
    return out


def embed_class_texts(texts: Sequence[EncodedText], p: TextEncoderParams) -> TextEmbedding:
    """Mean embedding over a class's descriptions (the class prototype)."""
    if not texts:
        raise EmptyClassError("class has no descriptions")
    return TextEmbedding(vector=embed_texts(texts, p).mean(axis=0))
