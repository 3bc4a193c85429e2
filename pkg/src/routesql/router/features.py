"""Hashed unigram+bigram counts concatenated with the entity multi-hot bits."""
from __future__ import annotations

import re
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from ..rules import entity_vector
from ._kernels import hash_ngrams

TOKENIZER_VERSION = 1
_PUNCT = re.compile(r"[^\w\s]")


@dataclass(frozen=True)
class FeatureConfig:
    d_t: int = 1 << 16
    hash_seed: int = 0
    tokenizer_version: int = TOKENIZER_VERSION

    def to_json(self):
        return {"d_t": self.d_t, "hash_seed": self.hash_seed, "tokenizer_version": self.tokenizer_version}


@dataclass(frozen=True)
class FeatureVector:
    text_index: np.ndarray  # sorted unique bucket ids
    text_counts: np.ndarray
    entity_bits: np.ndarray
    d_t: int

    @property
    def dim(self) -> int:
        return self.d_t + len(self.entity_bits)

    def dense(self) -> np.ndarray:
        x = np.zeros(self.dim)
        x[self.text_index] = self.text_counts
        x[self.d_t:] = self.entity_bits
        return x

    def __eq__(self, other):
        return (
            isinstance(other, FeatureVector)
            and self.d_t == other.d_t
            and np.array_equal(self.text_index, other.text_index)
            and np.array_equal(self.text_counts, other.text_counts)
            and np.array_equal(self.entity_bits, other.entity_bits)
        )

    __hash__ = None


def tokenize(text: str) -> list[str]:
    return _PUNCT.sub("", text.lower()).split()


def featurize(
    q_augmented: str,
    entity_assignment,
    feature_config: FeatureConfig,
    entity_vocabulary: Sequence,
) -> FeatureVector:
    if feature_config.tokenizer_version != TOKENIZER_VERSION:
        raise ValueError(f"tokenizer version {feature_config.tokenizer_version} not supported")
    buckets = hash_ngrams(tokenize(q_augmented), feature_config.d_t, feature_config.hash_seed)
    idx, counts = np.unique(buckets, return_counts=True)
    bits = np.asarray(entity_vector(entity_assignment, entity_vocabulary), dtype=np.float64)
    return FeatureVector(idx.astype(np.int64), counts.astype(np.float64), bits, feature_config.d_t)
