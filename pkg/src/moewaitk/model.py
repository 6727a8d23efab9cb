"""Encoder-decoder transformer with mixture-of-experts wait-k cross-attention.

Every cross-attention head is an expert with its own lagging ``k_E``: at
target step t it sees ``min(g(t; k_E), g(t; k))`` source positions. Head
outputs are projected through their row block of the output matrix and
scaled by h, then mixed with weights that are either fixed at 1/h
(``equal`` mode) or predicted per step by a small gate (``gated`` mode).

The encoder is causal, so re-encoding a source prefix yields exactly the
rows a full-sentence pass would give for those positions.
"""

from __future__ import annotations

import hashlib
import json
import math
from collections import OrderedDict
from dataclasses import asdict, dataclass, field

import numpy as np

from . import tensor as T
from .data import BOS, PAD
from .policy import UNBOUNDED, check_lagging, format_lagging, is_unbounded, parse_lagging, schedule_g_array
from .tensor import Tensor

K_CAP = 16
MODES = ("equal", "gated")


@dataclass
class ModelConfig:
    num_layers: int = 2
    d_model: int = 64
    num_heads: int = 4
    d_ff: int = 128
    src_vocab: int = 40
    tgt_vocab: int = 40
    expert_lagging: list = field(default_factory=lambda: [1, 6, 11, 16])
    max_seq_len: int = 32
    dropout: float = 0.1

    def __post_init__(self):
        self.expert_lagging = [check_lagging(parse_lagging(k) if isinstance(k, str) else k)
                               for k in self.expert_lagging]
        for name in ("num_layers", "d_model", "num_heads", "d_ff", "src_vocab", "tgt_vocab", "max_seq_len"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be positive")
        if self.d_model % self.num_heads:
            raise ValueError(f"d_model {self.d_model} not divisible by num_heads {self.num_heads}")
        if len(self.expert_lagging) != self.num_heads:
            raise ValueError(
                f"expert_lagging has {len(self.expert_lagging)} entries, expected one per head ({self.num_heads})")

    @property
    def d_k(self):
        return self.d_model // self.num_heads

    def to_dict(self):
        out = asdict(self)
        out["expert_lagging"] = [format_lagging(k) for k in self.expert_lagging]
        return out

    @classmethod
    def from_dict(cls, d):
        return cls(**d)

    def digest(self):
        blob = json.dumps(self.to_dict(), sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()[:16]


def k_feature(k):
    """Normalised external lagging fed to the gate: min(k, 16) / 16."""
    return 1.0 if is_unbounded(k) else min(k, K_CAP) / K_CAP


def sinusoid_table(n, d):
    pos = np.arange(n, dtype=np.float64)[:, None]
    i = np.arange((d + 1) // 2, dtype=np.float64)[None, :]
    angle = pos / np.power(10000.0, 2 * i / d)
    table = np.zeros((n, d))
    table[:, 0::2] = np.sin(angle)
    table[:, 1::2] = np.cos(angle[:, : d // 2])
    return table.astype(np.float32)


# building blocks ------------------------------------------------------------

def split_heads(x, h):
    b, t, d = x.shape
    return x.reshape(b, t, h, d // h).transpose(0, 2, 1, 3)


def merge_heads(x):
    b, h, t, dk = x.shape
    return x.transpose(0, 2, 1, 3).reshape(b, t, h * dk)


def head_attention(q, k, v, visible):
    """Scaled dot-product attention per head over the first ``visible`` keys.

    ``q`` is ``[B,h,T,dk]``, ``k``/``v`` are ``[B,h,S,dk]`` and ``visible``
    broadcasts to ``[B,h,T]``. Returns the head outputs and ``e``, the mean
    scaled logit over the visible keys (``[B,h,T]``).
    """
    scale = 1.0 / math.sqrt(q.shape[-1])
    scores = T.matmul(q, T.transpose(k, (0, 1, 3, 2))) * np.float32(scale)
    probs = T.masked_softmax(scores, visible)
    if visible is None:
        visible = np.array(scores.shape[-1])
    return T.matmul(probs, v), T.masked_mean(scores, visible)


def expert_head_attention(q, k, v, t, k_expert, k_external, source_len):
    """Single-head form: attention of expert with lagging ``k_expert`` at step ``t``.

    ``q`` is ``[dk]``; ``k``/``v`` are ``[S, dk]``. Returns ``(H, e, visible)``.
    """
    visible = min(schedule_g_array(t, k_expert, [source_len])[0, -1],
                  schedule_g_array(t, k_external, [source_len])[0, -1])
    qt = T.reshape(T.as_tensor(q), (1, 1, 1, -1))
    kt = T.reshape(T.as_tensor(k), (1, 1) + tuple(np.shape(k)))
    vt = T.reshape(T.as_tensor(v), (1, 1) + tuple(np.shape(v)))
    H, e = head_attention(qt, kt, vt, np.array([[[visible]]]))
    return T.reshape(H, (-1,)), float(e.data.reshape(-1)[0]), int(visible)


def expert_output(H, w_out, i, h):
    """E_i = h * H_i @ W^O_i where W^O_i is row block i of the output matrix."""
    dk = w_out.shape[0] // h
    block = T.getitem(T.as_tensor(w_out), (slice(i * dk, (i + 1) * dk), slice(None)))
    Hm = T.as_tensor(H)
    if Hm.ndim == 1:
        Hm = T.reshape(Hm, (1, -1))
    return T.matmul(Hm, block) * np.float32(h)


def expert_outputs(H, w_out):
    """All experts at once: ``[B,h,T,dk]`` heads -> ``[h,B,T,d]`` expert outputs."""
    b, h, t, dk = H.shape
    d = w_out.shape[1]
    blocks = T.reshape(w_out, (h, dk, d))
    Hh = T.reshape(T.transpose(H, (1, 0, 2, 3)), (h, b * t, dk))
    return T.reshape(T.matmul(Hh, blocks) * np.float32(h), (h, b, t, d))


def gate_weights(e, k_feat, w, b):
    """G = softmax(tanh([e_1..e_h; k_feat] W + b)) over experts.

    ``e`` is ``[..., h]``; ``k_feat`` a scalar broadcast to every row.
    """
    e = T.as_tensor(e)
    kcol = Tensor(np.full(e.shape[:-1] + (1,), k_feat, dtype=np.float32))
    beta = T.tanh(T.add(T.matmul(T.concat([e, kcol], axis=-1), w), b))
    return T.masked_softmax(beta)


def mix_experts(G, E):
    """C = sum_i G_i E_i with ``G`` ``[B,T,h]`` and ``E`` ``[h,B,T,d]``."""
    Gh = T.reshape(T.transpose(G, (2, 0, 1)), G.shape[2:] + G.shape[:2] + (1,))
    return T.sum_axis(T.mul(Gh, E), 0)


def cross_visible(k_experts, k, source_lens, steps, offset=0):
    """Visible source counts per expert: ``[B,h,steps]`` for steps offset+1.."""
    ext = schedule_g_array(offset + steps, k, source_lens)[:, offset:]
    per = [np.minimum(schedule_g_array(offset + steps, ke, source_lens)[:, offset:], ext)
           for ke in k_experts]
    return np.stack(per, axis=1)


class Transformer:
    def __init__(self, config, seed=0):
        self.config = config
        self.params = OrderedDict()
        self.stage = "init"
        self.meta = {}
        self._pe = sinusoid_table(max(config.max_seq_len, 128), config.d_model)
        rng = np.random.default_rng(seed)
        c = config
        self._add("src_embed", rng.normal(0, c.d_model ** -0.5, (c.src_vocab, c.d_model)))
        self._add("tgt_embed", rng.normal(0, c.d_model ** -0.5, (c.tgt_vocab, c.d_model)))
        for l in range(c.num_layers):
            p = f"enc.{l}."
            self._norm(p + "ln1")
            self._attn(p + "self", rng)
            self._norm(p + "ln2")
            self._ff(p + "ff", rng)
        self._norm("enc.ln")
        for l in range(c.num_layers):
            p = f"dec.{l}."
            self._norm(p + "ln1")
            self._attn(p + "self", rng)
            self._norm(p + "ln2")
            self._attn(p + "cross", rng)
            self._add(p + "gate.w", np.zeros((c.num_heads + 1, c.num_heads)))
            self._add(p + "gate.b", np.zeros(c.num_heads))
            self._norm(p + "ln3")
            self._ff(p + "ff", rng)
        self._norm("dec.ln")
        self._add("out.w", _xavier(rng, c.d_model, c.tgt_vocab))
        self._add("out.b", np.zeros(c.tgt_vocab))

    # parameters -------------------------------------------------------------

    def _add(self, name, value):
        self.params[name] = Tensor(np.asarray(value, dtype=np.float32), requires_grad=True)

    def _norm(self, name):
        self._add(name + ".g", np.ones(self.config.d_model))
        self._add(name + ".b", np.zeros(self.config.d_model))

    def _attn(self, name, rng):
        d = self.config.d_model
        for w in ("q", "k", "v", "o"):
            self._add(f"{name}.w{w}", _xavier(rng, d, d))
            self._add(f"{name}.b{w}", np.zeros(d))

    def _ff(self, name, rng):
        c = self.config
        self._add(name + ".w1", _xavier(rng, c.d_model, c.d_ff))
        self._add(name + ".b1", np.zeros(c.d_ff))
        self._add(name + ".w2", _xavier(rng, c.d_ff, c.d_model))
        self._add(name + ".b2", np.zeros(c.d_model))

    def gate_names(self):
        return [n for n in self.params if ".gate." in n]

    def reset_gates(self):
        for n in self.gate_names():
            self.params[n].data[...] = 0

    def parameters(self):
        return list(self.params.values())

    def num_parameters(self):
        return sum(p.data.size for p in self.params.values())

    def zero_grad(self):
        for p in self.params.values():
            p.grad = None

    def state_dict(self):
        return OrderedDict((n, p.data.copy()) for n, p in self.params.items())

    def load_state_dict(self, state):
        for n, p in self.params.items():
            if state[n].shape != p.data.shape:
                raise ValueError(f"shape mismatch for {n}: {state[n].shape} vs {p.data.shape}")
            p.data = np.array(state[n], dtype=np.float32)

    # layers -----------------------------------------------------------------

    def _ln(self, x, name):
        return T.layer_norm(x, self.params[name + ".g"], self.params[name + ".b"])

    def _linear(self, x, w, b):
        return T.add(T.matmul(x, self.params[w]), self.params[b])

    def _proj(self, x, name, which):
        return self._linear(x, f"{name}.w{which}", f"{name}.b{which}")

    def _ff_block(self, x, name, rng):
        # dropout goes on the block output (residual dropout), not the hidden activation
        hdn = T.relu(self._linear(x, name + ".w1", name + ".b1"))
        return self._linear(hdn, name + ".w2", name + ".b2")

    def _embed(self, table, ids, offset=0):
        c = self.config
        ids = np.asarray(ids)
        n = ids.shape[1]
        if offset + n > len(self._pe):
            self._pe = sinusoid_table(2 * (offset + n), c.d_model)
        x = T.embedding(self.params[table], ids) * np.float32(math.sqrt(c.d_model))
        return T.add(x, self._pe[offset:offset + n])

    def _self_attention(self, x, name, rng):
        h = self.config.num_heads
        n = x.shape[1]
        q = split_heads(self._proj(x, name, "q"), h)
        k = split_heads(self._proj(x, name, "k"), h)
        v = split_heads(self._proj(x, name, "v"), h)
        causal = np.arange(1, n + 1)[None, None, :]
        H, _ = head_attention(q, k, v, causal)
        out = self._proj(merge_heads(H), name, "o")
        return T.dropout(out, self.config.dropout, rng)

    def _cross_attention(self, s, z, visible, k, mode, name, gate_prefix, record=None):
        """MoE wait-k cross-attention; ``visible`` is ``[B,h,T]``."""
        h = self.config.num_heads
        q = split_heads(self._proj(s, name, "q"), h)
        kk = split_heads(self._proj(z, name, "k"), h)
        vv = split_heads(self._proj(z, name, "v"), h)
        H, e = head_attention(q, kk, vv, visible)
        E = expert_outputs(H, self.params[name + ".wo"])
        b, t = s.shape[0], s.shape[1]
        if mode == "equal":
            G = Tensor(np.full((b, t, h), 1.0 / h, dtype=np.float32))
        elif mode == "gated":
            G = gate_weights(T.transpose(e, (0, 2, 1)), k_feature(k),
                             self.params[gate_prefix + ".w"], self.params[gate_prefix + ".b"])
        else:
            raise ValueError(f"unknown mixing mode {mode!r}")
        if record is not None:
            record.setdefault("gates", []).append(G.data)
            record.setdefault("experts", []).append(E.data)
        return T.add(mix_experts(G, E), self.params[name + ".bo"])

    # full-sequence paths ----------------------------------------------------

    def encode(self, src, rng=None):
        """Causal encoder over ``[B,S]`` ids; returns ``[B,S,d]``."""
        drop = rng
        x = T.dropout(self._embed("src_embed", src), self.config.dropout, drop)
        for l in range(self.config.num_layers):
            p = f"enc.{l}."
            x = T.add(x, self._self_attention(self._ln(x, p + "ln1"), p + "self", drop))
            x = T.add(x, T.dropout(self._ff_block(self._ln(x, p + "ln2"), p + "ff", drop),
                                   self.config.dropout, drop))
        return self._ln(x, "enc.ln")

    def encode_prefix(self, source, j):
        """Encoder states for the first ``j`` source tokens, ``[j, d]``.

        Tokens past ``j`` are never read; the prefix is padded to
        ``max_seq_len`` so every prefix of a sentence is encoded with the
        same shapes and shared rows agree bitwise.
        """
        if not 1 <= j <= len(source):
            raise IndexError(f"prefix length {j} outside [1, {len(source)}]")
        return self.encode_views([list(source[:j])])[0, :j]

    def encode_views(self, views):
        L = self.config.max_seq_len
        if max(len(v) for v in views) > L:
            raise ValueError(f"source longer than max_seq_len={L}")
        ids = np.full((len(views), L), PAD, dtype=np.int64)
        for i, v in enumerate(views):
            ids[i, : len(v)] = v
        return self.encode(ids).data

    def decode(self, z, src_lens, tgt_in, k, mode, rng=None, record=None):
        """Teacher-forced decoder over ``[B,T]`` inputs; returns logits ``[B,T,V]``."""
        c = self.config
        k = check_lagging(k)
        steps = tgt_in.shape[1]
        visible = cross_visible(c.expert_lagging, k, src_lens, steps)
        y = T.dropout(self._embed("tgt_embed", tgt_in), c.dropout, rng)
        for l in range(c.num_layers):
            p = f"dec.{l}."
            y = T.add(y, self._self_attention(self._ln(y, p + "ln1"), p + "self", rng))
            ctx = self._cross_attention(self._ln(y, p + "ln2"), z, visible, k, mode,
                                        p + "cross", p + "gate", record)
            y = T.add(y, T.dropout(ctx, c.dropout, rng))
            y = T.add(y, T.dropout(self._ff_block(self._ln(y, p + "ln3"), p + "ff", rng),
                                   c.dropout, rng))
        return self._linear(self._ln(y, "dec.ln"), "out.w", "out.b")

    def forward(self, src, src_lens, tgt, k, mode="equal", rng=None, record=None):
        """Logits for every target position of a padded batch (teacher forcing)."""
        tgt = np.asarray(tgt)
        tgt_in = np.concatenate([np.full((tgt.shape[0], 1), BOS, dtype=tgt.dtype), tgt[:, :-1]], axis=1)
        z = self.encode(np.asarray(src), rng)
        return self.decode(z, np.asarray(src_lens), tgt_in, k, mode, rng, record)

    def loss(self, batch, k, mode="equal", rng=None, smoothing=0.0):
        """Mean token cross-entropy of a batch under external lagging ``k``."""
        if not is_unbounded(k) and k < 1:
            raise ValueError(f"lagging must be >= 1, got {k}")
        logits = self.forward(batch.source, batch.source_lens, batch.target, k, mode, rng)
        return T.cross_entropy(logits, batch.target, ignore_index=PAD, smoothing=smoothing)

    def sentence_losses(self, batch, k, mode="equal"):
        logits = self.forward(batch.source, batch.source_lens, batch.target, k, mode)
        nll = T.token_losses(logits, batch.target, PAD)
        return nll.sum(axis=1) / np.maximum(batch.target_lens, 1)

    def forced_logits(self, source, prefix, k, mode="equal"):
        """Logits ``[len(prefix)+1, V]`` for a single pair under wait-k masks."""
        src = np.asarray([source])
        tgt = np.asarray([list(prefix) + [PAD]])
        return self.forward(src, [len(source)], tgt, k, mode).data[0]

    # incremental decoding ---------------------------------------------------

    def start_stream(self, n):
        return DecodeState(n, self.config.num_layers)

    def decode_step(self, state, prev_tokens, source_views, k, mode=None,
                    record_gates=False, record_experts=False):
        """Advance every stream by one target position.

        ``prev_tokens`` is None at the first step (BOS is fed) and otherwise
        the tokens emitted at the previous step. ``source_views`` holds the
        source prefix each stream has read so far; its length is the visible
        count ``g(t; k)``. Returns ``(logits [n,V], info)``.
        """
        c = self.config
        mode = mode or self.meta.get("mode", "equal")
        k = check_lagging(k)
        n = state.n
        if len(source_views) != n:
            raise StateError(f"expected {n} source views, got {len(source_views)}")
        if (prev_tokens is None) != (state.step == 0):
            raise StateError(f"token/prefix mismatch at step {state.step}")
        if prev_tokens is None:
            prev_tokens = np.full(n, BOS, dtype=np.int64)
        prev_tokens = np.asarray(prev_tokens, dtype=np.int64).reshape(n)
        lens = np.array([len(v) for v in source_views], dtype=np.int64)
        if lens.min() < 1:
            raise StateError("no source token visible")
        z = Tensor(self.encode_views(source_views))
        t = state.step
        visible = np.stack([np.minimum(schedule_g_array(t + 1, ke, lens)[:, t], lens)
                            for ke in c.expert_lagging], axis=1)[:, :, None]
        record = {} if (record_gates or record_experts) else None
        y = self._embed("tgt_embed", prev_tokens[:, None], offset=t)
        h = c.num_heads
        for l in range(c.num_layers):
            p = f"dec.{l}."
            x = self._ln(y, p + "ln1")
            q = split_heads(self._proj(x, p + "self", "q"), h)
            state.append(l, split_heads(self._proj(x, p + "self", "k"), h).data,
                         split_heads(self._proj(x, p + "self", "v"), h).data)
            kc, vc = state.cache(l)
            H, _ = head_attention(q, Tensor(kc), Tensor(vc), np.array([[[t + 1]]]))
            y = T.add(y, self._proj(merge_heads(H), p + "self", "o"))
            ctx = self._cross_attention(self._ln(y, p + "ln2"), z, visible, k, mode,
                                        p + "cross", p + "gate", record)
            y = T.add(y, ctx)
            y = T.add(y, self._ff_block(self._ln(y, p + "ln3"), p + "ff", None))
        logits = self._linear(self._ln(y, "dec.ln"), "out.w", "out.b").data[:, 0]
        state.step += 1
        info = {"visible": visible[:, :, 0]}
        if record is not None:
            info["gates"] = np.stack([g[:, 0] for g in record["gates"]])
            info["experts"] = np.stack([e[:, :, 0] for e in record["experts"]])  # [L,h,n,d]
        return logits, info

    def copy(self):
        other = Transformer.__new__(Transformer)
        other.config = self.config
        other.params = OrderedDict((n, Tensor(p.data.copy(), requires_grad=True))
                                   for n, p in self.params.items())
        other.stage = self.stage
        other.meta = dict(self.meta)
        other._pe = self._pe
        return other


class StateError(RuntimeError):
    pass


class DecodeState:
    """Per-session decoder self-attention cache for ``n`` parallel streams."""

    def __init__(self, n, num_layers):
        self.n = n
        self.step = 0
        self._k = [[] for _ in range(num_layers)]
        self._v = [[] for _ in range(num_layers)]

    def append(self, layer, k, v):
        self._k[layer].append(k)
        self._v[layer].append(v)

    def cache(self, layer):
        return np.concatenate(self._k[layer], axis=2), np.concatenate(self._v[layer], axis=2)


def _xavier(rng, fan_in, fan_out):
    a = math.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-a, a, (fan_in, fan_out))


def vanilla_cross_attention(s, z, wq, bq, wk, bk, wv, bv, wo, bo, h):
    """Plain concat-then-project multi-head attention, for reference checks."""
    q = split_heads(T.add(T.matmul(s, wq), bq), h)
    k = split_heads(T.add(T.matmul(z, wk), bk), h)
    v = split_heads(T.add(T.matmul(z, wv), bv), h)
    H, _ = head_attention(q, k, v, None)
    return T.add(T.matmul(merge_heads(H), wo), bo)
