"""Transformer encoder turning token ids into a conditioning sequence."""

from __future__ import annotations

from dataclasses import asdict, dataclass
from typing import Sequence

import numpy as np

from cheff import tensor as T
from cheff.errors import ShapeError
from cheff.nn.layers import LayerNorm, Linear, scaled_dot_attention
from cheff.optim import ParamSet
from cheff.rng import RngState
from cheff.tensor import Tensor

PAD_ID = 0


@dataclass
class TextEncoderSpec:
    vocab_size: int
    dim: int = 64
    depth: int = 2
    heads: int = 4
    max_len: int = 150
    mlp_ratio: int = 4
    allow_empty: bool = False

    def __post_init__(self):
        if min(self.vocab_size, self.dim, self.heads, self.max_len, self.mlp_ratio) < 1 or self.depth < 0:
            raise ValueError("text encoder sizes must be positive")
        if self.dim % self.heads:
            raise ValueError(f"{self.heads} heads do not divide width {self.dim}")

    def to_dict(self) -> dict:
        return asdict(self)


class TextEncoder:
    """Pre-norm transformer: token + learned position embeddings, ``depth`` blocks."""

    def __init__(self, spec: TextEncoderSpec, rng: RngState | int = 0, dtype=np.float32):
        if not isinstance(rng, RngState):
            rng = RngState(rng)
        self.spec = spec
        self.dtype = np.dtype(dtype)
        self.params = p = ParamSet()
        d = spec.dim
        self.tok = p.add("tok_embed", (rng.normal((spec.vocab_size, d)) * 0.02).astype(dtype))
        self.pos = p.add("pos_embed", (rng.normal((spec.max_len, d)) * 0.02).astype(dtype))
        self.blocks = []
        for i in range(spec.depth):
            self.blocks.append({
                "ln1": LayerNorm(p, f"block.{i}.ln1", d, dtype),
                "qkv": Linear(p, f"block.{i}.qkv", d, 3 * d, rng, dtype),
                "proj": Linear(p, f"block.{i}.proj", d, d, rng, dtype),
                "ln2": LayerNorm(p, f"block.{i}.ln2", d, dtype),
                "fc1": Linear(p, f"block.{i}.fc1", d, spec.mlp_ratio * d, rng, dtype),
                "fc2": Linear(p, f"block.{i}.fc2", spec.mlp_ratio * d, d, rng, dtype),
            })
        self.ln_out = LayerNorm(p, "ln_out", d, dtype)

    def _check(self, tokens: Sequence[int]) -> np.ndarray:
        ids = np.asarray(list(tokens), dtype=np.int64)
        if ids.size == 0 and not self.spec.allow_empty:
            raise ValueError("cannot encode an empty token sequence")
        if ids.size > self.spec.max_len:
            raise ValueError(f"{ids.size} tokens exceed max_len {self.spec.max_len}")
        if ids.size and (ids.min() < 0 or ids.max() >= self.spec.vocab_size):
            raise ValueError("token id outside the vocabulary")
        return ids

    def encode_batch(self, batch: Sequence[Sequence[int]]) -> tuple[Tensor, np.ndarray]:
        """Encode a padded batch; returns ``([N, L, d], key_mask[N, L])``."""
        seqs = [self._check(tokens) for tokens in batch]
        length = max((s.size for s in seqs), default=0)
        if length == 0:
            return Tensor(np.zeros((len(seqs), 0, self.spec.dim), self.dtype)), np.zeros((len(seqs), 0), bool)
        ids = np.full((len(seqs), length), PAD_ID, dtype=np.int64)
        mask = np.zeros((len(seqs), length), dtype=bool)
        for i, s in enumerate(seqs):
            ids[i, :s.size] = s
            mask[i, :s.size] = True
        n, d, heads = len(seqs), self.spec.dim, self.spec.heads
        h = T.embedding(self.tok, ids) + self.pos[:length]
        for blk in self.blocks:
            qkv = blk["qkv"](blk["ln1"](h))
            q, k, v = qkv[:, :, :d], qkv[:, :, d:2 * d], qkv[:, :, 2 * d:]
            h = h + blk["proj"](scaled_dot_attention(q, k, v, heads, mask))
            h = h + blk["fc2"](T.gelu(blk["fc1"](blk["ln2"](h))))
        return self.ln_out(h), mask


def text_encode(model: TextEncoder, tokens: Sequence[int]) -> Tensor:
    """Embed one token sequence as ``[L, d_tau]``."""
    out, _ = model.encode_batch([tokens])
    return T.reshape(out, out.shape[1:])
