"""Latency (AL), quality (BLEU, token accuracy) and last-token noise."""

from __future__ import annotations

import math
from collections import Counter
from dataclasses import dataclass

import numpy as np

from .data import EOS, PAD


@dataclass
class LatencyReport:
    al: list
    truncated: list

    @property
    def mean(self):
        return float(np.mean(self.al)) if self.al else float("nan")


def average_lagging(trace, target_len=None):
    """Average Lagging of one streaming decode.

    ``tau`` is the first step at which the whole source has been read.
    If that never happens the sum runs over every emitted step and the
    result is flagged as truncated. Returns ``(al, truncated)``.
    """
    g = list(trace.g)
    x_len = trace.source_len
    y_len = len(g) if target_len is None else target_len
    if not g:
        raise ValueError("trace has no WRITE actions")
    tau = next((t for t, gt in enumerate(g, 1) if gt >= x_len), None)
    truncated = tau is None
    if truncated:
        tau = len(g)
    ratio = y_len / x_len
    al = sum(g[t - 1] - (t - 1) / ratio for t in range(1, tau + 1)) / tau
    return al, truncated


def latency_report(traces):
    results = [average_lagging(tr) for tr in traces]
    return LatencyReport([r[0] for r in results], [r[1] for r in results])


def strip_special(ids, specials=(EOS, PAD)):
    out = []
    for t in ids:
        if t == EOS:
            break
        if t not in specials:
            out.append(t)
    return out


def _ngrams(tokens, n):
    return Counter(tuple(tokens[i:i + n]) for i in range(len(tokens) - n + 1))


def bleu_stats(hypotheses, references, max_n=4):
    matches = [0] * max_n
    totals = [0] * max_n
    hyp_len = ref_len = 0
    for hyp, ref in zip(hypotheses, references):
        hyp_len += len(hyp)
        ref_len += len(ref)
        for n in range(1, max_n + 1):
            h, r = _ngrams(hyp, n), _ngrams(ref, n)
            matches[n - 1] += sum(min(c, r[g]) for g, c in h.items())
            totals[n - 1] += max(len(hyp) - n + 1, 0)
    return matches, totals, hyp_len, ref_len


def corpus_bleu(hypotheses, references, max_n=4, smooth=True):
    """Corpus BLEU in [0, 1] over token sequences.

    With ``smooth`` add-one smoothing is applied to the n-gram counts for
    n > 1; unigram precision is never smoothed.
    """
    if len(hypotheses) != len(references):
        raise ValueError(f"{len(hypotheses)} hypotheses vs {len(references)} references")
    if not hypotheses:
        raise ValueError("empty corpus")
    matches, totals, hyp_len, ref_len = bleu_stats(hypotheses, references, max_n)
    log_p = 0.0
    for n in range(max_n):
        m, tot = matches[n], totals[n]
        if smooth and n > 0:
            m, tot = m + 1, tot + 1
        if m == 0 or tot == 0:
            return 0.0
        log_p += math.log(m / tot) / max_n
    bp = 1.0 if hyp_len > ref_len else math.exp(1 - ref_len / max(hyp_len, 1))
    return bp * math.exp(log_p)


def token_accuracy(hypotheses, references):
    """Position-wise matches over the common prefix length, divided by total reference length."""
    hits = total = 0
    for hyp, ref in zip(hypotheses, references):
        m = min(len(hyp), len(ref))
        hits += sum(1 for a, b in zip(hyp[:m], ref[:m]) if a == b)
        total += len(ref)
    return hits / total if total else 1.0


@dataclass
class NoiseSpec:
    p: float = 0.0
    seed: int = 0

    def __post_init__(self):
        if not 0.0 <= self.p <= 1.0:
            raise ValueError(f"noise proportion must be in [0, 1], got {self.p}")


def noise_rngs(seed, n, offset=0):
    """One independent generator per sentence, derived from ``(seed, index)``."""
    return [np.random.default_rng([seed, offset + i]) for i in range(n)]


def apply_last_token_noise(prefix, spec, rng, vocab):
    """With probability ``spec.p`` swap the last visible token for another content token.

    Exactly two draws are consumed per call whatever ``p`` is, so runs at
    different ``p`` with the same seed perturb nested sets of steps.
    Special tokens are never replaced nor used as replacements.
    """
    if len(prefix) == 0:
        raise ValueError("empty prefix")
    candidates = vocab.content_ids
    u = rng.random()
    j = int(rng.integers(len(candidates) - 1))
    last = prefix[-1]
    if u >= spec.p or last in vocab.special_ids:
        return prefix
    pos = np.searchsorted(candidates, last)
    if pos < len(candidates) and candidates[pos] == last and j >= pos:
        j += 1
    out = list(prefix)
    out[-1] = int(candidates[j])
    return out
