"""Reference computations shared by the unit and acceptance tests."""

import numpy as np

from moewaitk import tensor as T
from moewaitk.data import EOS, Vocab, generate_task
from moewaitk.model import ModelConfig, Transformer, vanilla_cross_attention
from moewaitk.policy import UNBOUNDED, schedule_g
from moewaitk.tensor import Tensor


def moe_vs_vanilla_gap(h, seed):
    """Max |equal-weight MoE cross-attention - vanilla| for one random draw with unbounded laggings.

    Weights are drawn N(0, 1/d) and inputs N(0, 1), the scale layer-normed
    activations run at, in float32.
    """
    rng = np.random.default_rng(seed)
    d = h * int(rng.integers(2, 6))
    cfg = ModelConfig(num_layers=1, d_model=d, num_heads=h, d_ff=4, src_vocab=8, tgt_vocab=8,
                      expert_lagging=[UNBOUNDED] * h, max_seq_len=16, dropout=0.0)
    model = Transformer(cfg, seed=seed)
    name = "dec.0.cross"
    for w in ("q", "k", "v", "o"):
        model.params[f"{name}.w{w}"].data[...] = rng.normal(0, d ** -0.5, (d, d))
        model.params[f"{name}.b{w}"].data[...] = rng.normal(0, 0.1, d)
    b, t, s = int(rng.integers(1, 4)), int(rng.integers(1, 7)), int(rng.integers(1, 9))
    dec = Tensor(rng.normal(size=(b, t, d)).astype(np.float32))
    enc = Tensor(rng.normal(size=(b, s, d)).astype(np.float32))
    visible = np.full((b, h, t), s)
    moe = model._cross_attention(dec, enc, visible, UNBOUNDED, "equal", name, "dec.0.gate").data
    p = {w: model.params[f"{name}.{w}"] for w in ("wq", "bq", "wk", "bk", "wv", "bv", "wo", "bo")}
    ref = vanilla_cross_attention(dec, enc, p["wq"], p["bq"], p["wk"], p["bk"], p["wv"], p["bv"],
                                  p["wo"], p["bo"], h).data
    return float(np.max(np.abs(moe - ref)))


def stream_with_logits(model, source, k, mode, forced=None, max_steps=None):
    """Greedy (or ``forced``) streaming decode of one sentence; returns (tokens, logits per step)."""
    state = model.start_stream(1)
    prev, tokens, logits = None, [], []
    steps = max_steps or (len(forced) if forced is not None else 2 * len(source) + 10)
    for t in range(1, steps + 1):
        view = list(source[: schedule_g(t, k, len(source))])
        out, _ = model.decode_step(state, prev, [view], k, mode)
        logits.append(out[0])
        tok = int(out[0].argmax()) if forced is None else forced[t - 1]
        tokens.append(tok)
        prev = [tok]
        if forced is None and tok == EOS:
            break
    return tokens, np.array(logits)


def forced_vs_stream_gap(model, source, k, mode):
    tokens, stream = stream_with_logits(model, source, k, mode)
    forced = model.forced_logits(source, tokens[:-1], k, mode)[: len(tokens)]
    return float(np.max(np.abs(forced - stream)))


def batched_forced_vs_stream_gap(model, sources, k, mode):
    """Stream every source at once (greedy, stopping at EOS) and compare with one forced pass."""
    n = len(sources)
    lens = np.array([len(x) for x in sources])
    limit = 2 * lens + 10
    state = model.start_stream(n)
    prev, steps = None, []
    active = np.ones(n, dtype=bool)
    stop = limit.copy()
    for t in range(1, int(limit.max()) + 1):
        views = [list(x[: schedule_g(t, k, len(x))]) for x in sources]
        out, _ = model.decode_step(state, prev, views, k, mode)
        prev = out.argmax(-1)
        steps.append((out, prev))
        for i in np.flatnonzero(active):
            if prev[i] == EOS or t >= limit[i]:
                active[i] = False
                stop[i] = t
        if not active.any():
            break
    stream = np.stack([o for o, _ in steps], axis=1)          # [n, steps, V]
    tokens = np.stack([tk for _, tk in steps], axis=1)
    src = np.zeros((n, lens.max()), dtype=np.int64)
    for i, x in enumerate(sources):
        src[i, : len(x)] = x
    forced = model.forward(src, lens, tokens, k, mode).data
    return max(float(np.max(np.abs(forced[i, : stop[i]] - stream[i, : stop[i]]))) for i in range(n))


def random_pairs(n, seed, vocab=None):
    vocab = vocab or Vocab.build(32)
    return generate_task(seed, n, vocab)


def perturb_after(source, keep, rng, vocab):
    """Copy of ``source`` with every position past the first ``keep`` replaced by other content ids."""
    out = list(source)
    for j in range(keep, len(out)):
        choices = vocab.content_ids[vocab.content_ids != out[j]]
        out[j] = int(rng.choice(choices))
    return out


def forced_record(model, source, prefix, k, mode):
    record = {}
    logits = model.forward(np.asarray([source]), [len(source)], np.asarray([list(prefix) + [0]]),
                           k, mode, record=record).data[0]
    return logits, record


def to_float64(model):
    for p in model.params.values():
        p.data = p.data.astype(np.float64)
    return model


def param_gradcheck(model, batch, k, mode, eps=1e-3):
    """Autodiff of ``model`` vs central differences for every scalar parameter.

    The finite differences are taken on a float64 copy at the same point:
    at eps=1e-3 a float32 loss difference would carry ~1e-4 of rounding
    noise, which swamps small gradients. Relative error is
    |a - n| / max(|a|, |n|, 1e-3), so numerically-zero gradients compare on
    absolute error. Returns ``(max_rel_err, count)``.
    """
    model.zero_grad()
    with T.recording():
        T.backward(model.loss(batch, k, mode))
    ref = to_float64(model.copy())
    worst, count = 0.0, 0
    for name, p in model.params.items():
        auto = p.grad if p.grad is not None else np.zeros_like(p.data)
        flat = ref.params[name].data.reshape(-1)
        for i in range(flat.size):
            old = flat[i]
            flat[i] = old + eps
            hi = ref.loss(batch, k, mode).item()
            flat[i] = old - eps
            lo = ref.loss(batch, k, mode).item()
            flat[i] = old
            num = (hi - lo) / (2 * eps)
            a = float(auto.reshape(-1)[i])
            worst = max(worst, abs(a - num) / max(abs(a), abs(num), 1e-3))
            count += 1
    return worst, count


def causality_violations(model, pair, k, mode, rng, vocab, claimed=None):
    """Count bitwise changes after perturbing source tokens the policy has not yet read.

    For every target step t the source is perturbed past ``g(t; k)`` (logits
    and every expert must be unchanged at step t) and, per expert i, past
    ``min(g(t; k_E_i), g(t; k))`` (that expert's first-layer output must be
    unchanged; deeper layers mix every expert through the residual stream).
    ``claimed`` overrides the expert laggings the check assumes.
    Returns ``(checked, logit_changes, expert_changes)``.
    """
    source, prefix = pair.source, pair.target[:-1]
    L = len(source)
    lags = claimed or model.config.expert_lagging
    rows, checks = [], []
    for t in range(1, len(prefix) + 2):
        g = schedule_g(t, k, L)
        if g < L:
            rows.append(perturb_after(source, g, rng, vocab))
            checks.append((t, None))
        for i, ke in enumerate(lags):
            gi = min(schedule_g(t, ke, L), g)
            if gi < L:
                rows.append(perturb_after(source, gi, rng, vocab))
                checks.append((t, i))
    if not rows:
        return 0, 0, 0
    n = len(rows)
    tgt = np.tile(np.asarray(list(prefix) + [0]), (n, 1))
    lens = np.full(n, L)
    rec_a, rec_b = {}, {}
    base = model.forward(np.tile(np.asarray(source), (n, 1)), lens, tgt, k, mode, record=rec_a).data
    pert = model.forward(np.asarray(rows), lens, tgt, k, mode, record=rec_b).data
    bad_logits = bad_experts = 0
    for j, (t, i) in enumerate(checks):
        if i is None:
            bad_logits += not np.array_equal(base[j, t - 1], pert[j, t - 1])
            bad_experts += sum(not np.array_equal(a[:, j, t - 1], b[:, j, t - 1])
                               for a, b in zip(rec_a["experts"], rec_b["experts"]))
        else:
            bad_experts += not np.array_equal(rec_a["experts"][0][i, j, t - 1],
                                              rec_b["experts"][0][i, j, t - 1])
    return n, bad_logits, bad_experts
