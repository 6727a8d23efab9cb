"""Synthetic displacement-translation task, vocabulary and parallel-text I/O.

Each source sentence is ``TAG_d w_1 ... w_n EOS`` and its target is the
content cyclically rotated left by ``d`` positions followed by ``EOS``.
Larger ``d`` means the target needs source words further ahead, so ``d``
controls how hard the pair is for a low-latency policy.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

PAD, BOS, EOS, UNK = 0, 1, 2, 3
SPECIAL_TOKENS = ["<pad>", "<s>", "</s>", "<unk>"]
DISPLACEMENTS = (0, 2, 4, 6)
DEFAULT_DISPLACEMENT_MIX = {0: 0.3, 2: 0.3, 4: 0.25, 6: 0.15}
BUCKETS = {0: "easy", 2: "middle", 4: "hard", 6: "hard"}


class DataFormatError(ValueError):
    pass


def tag_token(d):
    return f"<d{d}>"


class Vocab:
    """Token <-> id map with stable reserved ids and one TAG token per displacement."""

    def __init__(self, tokens):
        self.itos = list(tokens)
        if self.itos[: len(SPECIAL_TOKENS)] != SPECIAL_TOKENS:
            raise DataFormatError("vocabulary must start with " + " ".join(SPECIAL_TOKENS))
        self.stoi = {}
        for i, tok in enumerate(self.itos):
            if tok in self.stoi:
                raise DataFormatError(f"duplicate vocabulary entry {tok!r}")
            self.stoi[tok] = i
        self.tag_ids = {}
        for tok, i in self.stoi.items():
            if tok.startswith("<d") and tok.endswith(">") and tok[2:-1].isdigit():
                self.tag_ids[int(tok[2:-1])] = i
        self.tag_displacement = {i: d for d, i in self.tag_ids.items()}
        self.special_ids = frozenset(range(len(SPECIAL_TOKENS))) | frozenset(self.tag_ids.values())
        self.content_ids = np.array([i for i in range(len(self.itos)) if i not in self.special_ids],
                                    dtype=np.int64)

    @classmethod
    def build(cls, content_size, displacements=DISPLACEMENTS):
        width = len(str(content_size - 1))
        tokens = SPECIAL_TOKENS + [tag_token(d) for d in displacements]
        tokens += [f"w{i:0{width}d}" for i in range(content_size)]
        return cls(tokens)

    def __len__(self):
        return len(self.itos)

    def __eq__(self, other):
        return isinstance(other, Vocab) and self.itos == other.itos

    def encode(self, tokens):
        return [self.stoi.get(t, UNK) for t in tokens]

    def decode(self, ids):
        return [self.itos[i] for i in ids]

    def save(self, path):
        Path(path).write_text("\n".join(self.itos) + "\n", encoding="utf-8")

    @classmethod
    def load(cls, path):
        lines = Path(path).read_text(encoding="utf-8").splitlines()
        return cls([ln for ln in lines if ln != ""])


@dataclass
class SentencePair:
    source: list
    target: list
    d: int = -1

    @property
    def bucket(self):
        return BUCKETS.get(self.d, "unknown")


@dataclass
class Batch:
    source: np.ndarray
    target: np.ndarray
    source_lens: np.ndarray
    target_lens: np.ndarray
    d: np.ndarray = field(default=None)

    def __len__(self):
        return len(self.source_lens)


def rotate(content, d):
    d %= max(len(content), 1)
    return list(content[d:]) + list(content[:d])


def generate_task(seed, size, vocab, length_range=(8, 16), mix=None):
    """Draw ``size`` displacement pairs; deterministic given ``seed``."""
    mix = DEFAULT_DISPLACEMENT_MIX if mix is None else mix
    n_min, n_max = length_range
    if size < 0:
        raise ValueError(f"size must be non-negative, got {size}")
    content_ids = vocab.content_ids
    if len(content_ids) < 8:
        raise ValueError(f"need at least 8 content tokens, got {len(content_ids)}")
    ds = sorted(mix)
    if any(d not in vocab.tag_ids for d in ds):
        raise ValueError(f"displacements {ds} not all covered by vocabulary tags")
    if n_min > n_max or n_min < max(ds) + 2:
        raise ValueError(f"length range {length_range} invalid for displacements {ds}")
    probs = np.array([mix[d] for d in ds], dtype=np.float64)
    probs /= probs.sum()

    rng = np.random.default_rng(seed)
    pairs = []
    for _ in range(size):
        d = int(ds[rng.choice(len(ds), p=probs)])
        n = int(rng.integers(n_min, n_max + 1))
        content = [int(t) for t in rng.choice(content_ids, size=n)]
        source = [vocab.tag_ids[d]] + content + [EOS]
        target = rotate(content, d) + [EOS]
        pairs.append(SentencePair(source, target, d))
    return pairs


def wait_k_feasibility(d, k):
    """Whether wait-k always has the needed source word in view.

    Target word t needs source position t + d + 1 (the tag occupies
    position 1), which wait-k exposes from step t on iff k >= d + 2.
    """
    if k is None or math.isinf(k):
        return True
    return k >= d + 2


def displacement_of(source, vocab):
    if source and source[0] in vocab.tag_displacement:
        return vocab.tag_displacement[source[0]]
    return -1


def save_parallel(pairs, source_path, target_path, vocab):
    def strip(ids):
        return " ".join(vocab.decode(ids[:-1] if ids and ids[-1] == EOS else ids))

    Path(source_path).write_text("".join(strip(p.source) + "\n" for p in pairs), encoding="utf-8")
    Path(target_path).write_text("".join(strip(p.target) + "\n" for p in pairs), encoding="utf-8")


def _read_lines(path):
    text = Path(path).read_text(encoding="utf-8")
    lines = text.split("\n")
    if lines and lines[-1] == "":
        lines.pop()
    return lines


def load_parallel(source_path, target_path, vocab):
    src_lines = _read_lines(source_path)
    tgt_lines = _read_lines(target_path)
    if len(src_lines) != len(tgt_lines):
        raise DataFormatError(
            f"line count mismatch: {source_path} has {len(src_lines)} lines, "
            f"{target_path} has {len(tgt_lines)}")
    pairs = []
    for s, t in zip(src_lines, tgt_lines):
        source = vocab.encode(s.split()) + [EOS]
        target = vocab.encode(t.split()) + [EOS]
        pairs.append(SentencePair(source, target, displacement_of(source, vocab)))
    return pairs


def collate(pairs):
    src_lens = np.array([len(p.source) for p in pairs], dtype=np.int64)
    tgt_lens = np.array([len(p.target) for p in pairs], dtype=np.int64)
    src = np.full((len(pairs), src_lens.max()), PAD, dtype=np.int64)
    tgt = np.full((len(pairs), tgt_lens.max()), PAD, dtype=np.int64)
    for i, p in enumerate(pairs):
        src[i, : len(p.source)] = p.source
        tgt[i, : len(p.target)] = p.target
    return Batch(src, tgt, src_lens, tgt_lens, np.array([p.d for p in pairs], dtype=np.int64))


def make_batches(pairs, batch_size, rng, pool_factor=50):
    """One epoch of shuffled, length-bucketed batches covering every pair once."""
    if batch_size < 1:
        raise ValueError("batch_size must be >= 1")
    order = rng.permutation(len(pairs))
    pool = batch_size * pool_factor
    groups = []
    for start in range(0, len(order), pool):
        chunk = sorted(order[start:start + pool], key=lambda i: len(pairs[i].source))
        groups += [chunk[j:j + batch_size] for j in range(0, len(chunk), batch_size)]
    groups = [groups[i] for i in rng.permutation(len(groups))]
    return [collate([pairs[i] for i in g]) for g in groups]
