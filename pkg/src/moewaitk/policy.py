"""Wait-k schedule, multipath lagging sampling and the streaming simulator."""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .data import EOS

UNBOUNDED = math.inf


def is_unbounded(k):
    return k is None or (isinstance(k, float) and math.isinf(k))


def check_lagging(k):
    if is_unbounded(k):
        return UNBOUNDED
    if int(k) != k or k < 1:
        raise ValueError(f"lagging must be a positive int or UNBOUNDED, got {k!r}")
    return int(k)


def parse_lagging(text):
    text = str(text).strip().lower()
    if text in ("inf", "unbounded", "full", "offline"):
        return UNBOUNDED
    return check_lagging(int(text))


def format_lagging(k):
    return "inf" if is_unbounded(k) else str(int(k))


def schedule_g(t, k, source_len):
    """Source tokens visible when writing target step ``t`` (1-based) under wait-k."""
    if is_unbounded(k):
        return source_len
    return min(k + t - 1, source_len)


def schedule_g_array(steps, k, source_lens):
    """Vectorised ``schedule_g`` returning ints shaped ``[len(source_lens), steps]``."""
    source_lens = np.asarray(source_lens, dtype=np.int64)[:, None]
    t = np.arange(1, steps + 1, dtype=np.int64)[None, :]
    if is_unbounded(k):
        return np.broadcast_to(source_lens, (source_lens.shape[0], steps)).copy()
    return np.minimum(int(k) + t - 1, source_lens)


def sample_multipath_k(rng, batch_max_source_len):
    """Uniform lagging in ``[1, batch_max_source_len]``, drawn once per batch."""
    if batch_max_source_len < 1:
        raise ValueError("batch_max_source_len must be >= 1")
    return int(rng.integers(1, batch_max_source_len + 1))


@dataclass
class StreamTrace:
    actions: list = field(default_factory=list)
    g: list = field(default_factory=list)
    tokens: list = field(default_factory=list)
    source_len: int = 0

    @property
    def target_len(self):
        return len(self.g)

    def to_text(self):
        return "\n".join([
            " ".join(self.actions),
            " ".join(str(v) for v in self.g),
            " ".join(str(v) for v in self.tokens),
        ]) + "\n"

    @classmethod
    def from_text(cls, text):
        lines = text.rstrip("\n").split("\n")
        if len(lines) != 3:
            raise ValueError(f"trace record needs 3 lines, got {len(lines)}")
        actions = lines[0].split()
        g = [int(v) for v in lines[1].split()]
        tokens = [int(v) for v in lines[2].split()]
        return cls(actions, g, tokens, source_len=actions.count("R"))

    @classmethod
    def from_g(cls, g, source_len, tokens=None):
        """Rebuild the READ/WRITE interleaving implied by ``g``."""
        actions, read = [], 0
        for gt in g:
            actions += ["R"] * (gt - read)
            read = gt
            actions.append("W")
        return cls(actions, list(g), list(tokens or []), source_len)


def wait_k_trace(k, source_len, target_len):
    g = [schedule_g(t, k, source_len) for t in range(1, target_len + 1)]
    return StreamTrace.from_g(g, source_len)


def simulate_corpus(model, sources, k_test, noise=None, vocab=None, max_len=None,
                    record_gates=False, record_experts=False, noise_offset=0):
    """Greedy wait-k streaming decode of every source sentence, batched.

    Each sentence is driven by its own READ/WRITE schedule: before writing
    step t exactly ``g(t; k_test)`` source tokens have been read, and when
    ``noise`` is active the last read token may be swapped before the
    write. Returns ``(hypotheses, traces, extras)``; hypotheses include the
    final EOS when one was produced.
    """
    from .metrics import noise_rngs, apply_last_token_noise

    k_test = check_lagging(k_test)
    sources = [list(s) for s in sources]
    if any(len(s) == 0 for s in sources):
        raise ValueError("empty source sentence")
    n = len(sources)
    src_lens = np.array([len(s) for s in sources], dtype=np.int64)
    limits = 2 * src_lens + 10 if max_len is None else np.full(n, max_len)
    steps = int(limits.max())
    if noise is not None and vocab is None:
        raise ValueError("noise needs the vocabulary to pick replacement tokens")
    rngs = noise_rngs(noise.seed, n, noise_offset) if noise is not None else None

    state = model.start_stream(n)
    hyps = [[] for _ in range(n)]
    gs = [[] for _ in range(n)]
    active = np.ones(n, dtype=bool)
    prev = None
    gate_log, expert_log = [], []
    for t in range(1, steps + 1):
        vis = np.array([schedule_g(t, k_test, L) for L in src_lens], dtype=np.int64)
        views = []
        for i, s in enumerate(sources):
            prefix = s[: vis[i]]
            if rngs is not None and active[i]:
                prefix = apply_last_token_noise(prefix, noise, rngs[i], vocab)
            views.append(prefix)
        logits, info = model.decode_step(state, prev, views, k_test,
                                         record_gates=record_gates,
                                         record_experts=record_experts)
        nxt = logits.argmax(axis=-1)
        writing = active.copy()
        for i in np.flatnonzero(active):
            hyps[i].append(int(nxt[i]))
            gs[i].append(int(vis[i]))
            if nxt[i] == EOS or len(hyps[i]) >= limits[i]:
                active[i] = False
        if record_gates:
            gate_log.append((info["gates"], writing))
        if record_experts:
            expert_log.append((info["experts"], writing))
        prev = nxt
        if not active.any():
            break
    traces = [StreamTrace.from_g(g, int(L), h) for g, L, h in zip(gs, src_lens, hyps)]
    return hyps, traces, {"gates": gate_log, "experts": expert_log}


def simulate_stream(model, source, k_test, noise=None, vocab=None):
    """Stream one sentence; returns ``(hypothesis, StreamTrace)``."""
    if len(source) == 0:
        raise ValueError("empty source sentence")
    hyps, traces, _ = simulate_corpus(model, [source], k_test, noise, vocab)
    return hyps[0], traces[0]
