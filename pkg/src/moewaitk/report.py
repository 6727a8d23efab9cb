"""Test-set sweeps, gate-weight tables and expert-output dumps."""

from __future__ import annotations

import csv
import io
import logging
from concurrent.futures import ProcessPoolExecutor

import numpy as np

from .data import BUCKETS
from .metrics import NoiseSpec, average_lagging, corpus_bleu, strip_special, token_accuracy
from .policy import format_lagging, simulate_corpus

log = logging.getLogger(__name__)

SWEEP_HEADER = ["system", "k_test", "al", "bleu", "token_acc", "bucket", "noise_p"]


def bucket_of(d, split):
    if split == "displacement":
        return f"d{d}"
    return BUCKETS.get(d, "unknown")


def _simulate_chunk(args):
    model, sources, k_test, noise, vocab, offset = args
    hyps, traces, _ = simulate_corpus(model, sources, k_test, noise, vocab, noise_offset=offset)
    return hyps, traces


def simulate_all(model, sources, k_test, noise=None, vocab=None, workers=1, chunk=250):
    """Streaming decode of a whole test set, optionally across worker processes.

    Results are merged in sentence order; the noise generator of sentence
    i depends only on (seed, i), not on how the set is chunked.
    """
    jobs = [(model, sources[i:i + chunk], k_test, noise, vocab, i)
            for i in range(0, len(sources), chunk)]
    if workers > 1 and len(jobs) > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            results = list(pool.map(_simulate_chunk, jobs))
    else:
        results = [_simulate_chunk(j) for j in jobs]
    hyps, traces = [], []
    for h, t in results:
        hyps += h
        traces += t
    return hyps, traces


def score(hyps, traces, refs, index):
    sub_h = [hyps[i] for i in index]
    sub_r = [refs[i] for i in index]
    al = float(np.mean([average_lagging(traces[i])[0] for i in index]))
    bleu = corpus_bleu([strip_special(h) for h in sub_h], [strip_special(r) for r in sub_r])
    return al, bleu, token_accuracy(sub_h, sub_r)


def evaluate(model, pairs, k_test, noise_p=0.0, noise_seed=0, vocab=None, split="level",
             workers=1, system=None):
    """Rows for the whole set and every difficulty bucket at one (k_test, noise)."""
    noise = NoiseSpec(noise_p, noise_seed) if noise_p > 0 else None
    hyps, traces = simulate_all(model, [p.source for p in pairs], k_test, noise, vocab, workers)
    refs = [p.target for p in pairs]
    groups = {"all": list(range(len(pairs)))}
    if split != "none":
        for i, p in enumerate(pairs):
            groups.setdefault(bucket_of(p.d, split), []).append(i)
    order = ["all"] + sorted(b for b in groups if b != "all")
    rows = []
    for b in order:
        al, bleu, acc = score(hyps, traces, refs, groups[b])
        rows.append({"system": system or model.meta.get("system", "model"),
                     "k_test": format_lagging(k_test), "al": al, "bleu": bleu,
                     "token_acc": acc, "bucket": b, "noise_p": noise_p})
    return rows


def system_label(model):
    system = model.meta.get("system", "model")
    if system == "standard_waitk":
        return f"standard_waitk@k{model.meta.get('k_train')}"
    return system


def sweep(models, pairs, k_tests, noises=(0.0,), vocab=None, split="level", noise_seed=0, workers=1):
    """Evaluate every model at every (k_test, noise); adds Standard/Optimal wait-k rows."""
    rows = []
    for model in models:
        label = system_label(model)
        for k in k_tests:
            for p in noises:
                rows += evaluate(model, pairs, k, p, noise_seed, vocab, split, workers, label)
    rows += waitk_summary_rows(rows)
    return rows


def waitk_summary_rows(rows):
    """Standard wait-k (k_train == k_test) and oracle-optimal rows from the grid."""
    grid = [r for r in rows if r["system"].startswith("standard_waitk@k")]
    out = []
    keys = []
    for r in grid:
        key = (r["k_test"], r["bucket"], r["noise_p"])
        if key not in keys:
            keys.append(key)
    for key in keys:
        cands = [r for r in grid if (r["k_test"], r["bucket"], r["noise_p"]) == key]
        match = [r for r in cands if r["system"] == f"standard_waitk@k{key[0]}"]
        if match:
            out.append(dict(match[0], system="standard_waitk"))
        best = max(cands, key=lambda r: (r["token_acc"], r["bleu"]))
        out.append(dict(best, system="optimal_waitk"))
    return out


def format_rows(rows):
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(SWEEP_HEADER)
    for r in rows:
        w.writerow([r["system"], r["k_test"], f"{r['al']:.6f}", f"{r['bleu']:.6f}",
                    f"{r['token_acc']:.6f}", r["bucket"], f"{r['noise_p']:g}"])
    return buf.getvalue()


def parse_rows(text):
    rows = []
    for r in csv.DictReader(io.StringIO(text)):
        for key in ("al", "bleu", "token_acc", "noise_p"):
            r[key] = float(r[key])
        rows.append(r)
    return rows


def gate_report(model, pairs, k_tests):
    """Average gate weight per expert at each k_test, over layers, steps and sentences.

    Returns ``(rows, uniform)``; ``uniform`` is True when the model mixes
    experts with fixed equal weights.
    """
    mode = model.meta.get("mode", "equal")
    uniform = mode != "gated"
    lags = model.config.expert_lagging
    rows = []
    for k in k_tests:
        _, _, extras = simulate_corpus(model, [p.source for p in pairs], k, record_gates=True)
        total = np.zeros(len(lags))
        count = 0
        for gates, writing in extras["gates"]:
            sel = gates[:, writing]          # [L, active, h]
            total += sel.sum(axis=(0, 1))
            count += sel.shape[0] * sel.shape[1]
        weights = total / max(count, 1)
        best = int(np.argmax(weights))
        rows.append({"k_test": format_lagging(k), "weights": weights.tolist(),
                     "argmax_expert": best + 1, "argmax_lagging": format_lagging(lags[best]),
                     "uniform": uniform})
    return rows, uniform


def format_gate_report(rows, laggings):
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["k_test"] + [f"E{i + 1}(k={format_lagging(k)})" for i, k in enumerate(laggings)]
               + ["argmax_expert", "argmax_lagging", "uniform_gate"])
    for r in rows:
        w.writerow([r["k_test"]] + [f"{x:.6f}" for x in r["weights"]]
                   + [r["argmax_expert"], r["argmax_lagging"], int(r["uniform"])])
    return buf.getvalue()


def dump_expert_outputs(model, pairs, k_test, samples=200, layer=-1):
    """Rows ``(sample, step, expert, lagging, vector)`` of per-step expert outputs."""
    chosen = pairs[:samples]
    _, _, extras = simulate_corpus(model, [p.source for p in chosen], k_test, record_experts=True)
    lags = model.config.expert_lagging
    rows = []
    for step, (experts, writing) in enumerate(extras["experts"], 1):
        E = experts[layer]                   # [h, n, d]
        for i in np.flatnonzero(writing):
            for e in range(E.shape[0]):
                rows.append((int(i), step, e + 1, format_lagging(lags[e]), E[e, i]))
    return rows


def format_expert_dump(rows, d_model):
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["sample", "step", "expert", "lagging"] + [f"v{j}" for j in range(d_model)])
    for sample, step, e, lag, vec in rows:
        w.writerow([sample, step, e, lag] + [f"{x:.6g}" for x in vec])
    return buf.getvalue()
