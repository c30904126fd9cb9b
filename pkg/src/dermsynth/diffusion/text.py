"""Toy text encoder: every token maps to a fixed pseudo-random vector."""

from __future__ import annotations

import hashlib
import re
from dataclasses import dataclass

import numpy as np
import torch

from ..captioning import DEFAULT_BUDGET, count_tokens
from ..errors import BudgetError, ValidationError

_TOKEN = re.compile(r"[a-z0-9\-]+")


@dataclass(frozen=True, eq=False)
class TextEmbedding:
    text: str
    tokens: torch.Tensor  # (n_tokens, dim)

    def __eq__(self, other):
        return isinstance(other, TextEmbedding) and self.text == other.text and torch.equal(self.tokens, other.tokens)

    __hash__ = None


class HashedTextEncoder:
    """Bag-of-tokens encoder: no positions, one seeded unit vector per token."""

    def __init__(self, dim=64, seed=0, budget=DEFAULT_BUDGET):
        self.dim = dim
        self.seed = seed
        self.budget = budget
        self._cache = {}

    @property
    def id(self):
        return f"hashed/{self.dim}/{self.seed}"

    def token_vector(self, token):
        vec = self._cache.get(token)
        if vec is None:
            digest = hashlib.sha256(f"{self.seed}:{token}".encode()).digest()
            rng = np.random.default_rng(int.from_bytes(digest[:8], "little"))
            v = rng.standard_normal(self.dim)
            vec = torch.tensor(v / np.linalg.norm(v) * np.sqrt(self.dim), dtype=torch.float32)
            self._cache[token] = vec
        return vec

    def tokenize(self, text):
        return _TOKEN.findall(text.lower())

    def encode(self, text) -> TextEmbedding:
        text = getattr(text, "text", text)
        if count_tokens(text) > self.budget:
            raise BudgetError(f"text exceeds the {self.budget}-token budget")
        tokens = self.tokenize(text)
        if not tokens:
            raise ValidationError("cannot encode empty text")
        return TextEmbedding(text, torch.stack([self.token_vector(t) for t in tokens]))

    def null(self) -> TextEmbedding:
        """Unconditional embedding: a single all-zero token."""
        return TextEmbedding("", torch.zeros(1, self.dim))


def encode_text(caption, encoder) -> TextEmbedding:
    return encoder.encode(caption)


def collate(embeddings, dtype=torch.float32):
    """Pad a list of embeddings to (B, L, D) plus a boolean validity mask (B, L)."""
    n = max(e.tokens.shape[0] for e in embeddings)
    dim = embeddings[0].tokens.shape[1]
    ctx = torch.zeros(len(embeddings), n, dim, dtype=dtype)
    mask = torch.zeros(len(embeddings), n, dtype=torch.bool)
    for i, e in enumerate(embeddings):
        k = e.tokens.shape[0]
        ctx[i, :k] = e.tokens.to(dtype)
        mask[i, :k] = True
    return ctx, mask
