"""Evaluation utilities: perplexity, kernel curve emission, and the
embedding-space disambiguation probe."""

from __future__ import annotations

import math
import os
from dataclasses import dataclass, field
from typing import List, Optional, Sequence

import numpy as np

from . import data as data_mod
from . import encoder as encoder_mod
from . import kernels
from . import output_layer
from .errors import TokenOutOfRange
from .kernels import KernelSpec


def mean_nll_and_pi(enc: "encoder_mod.EncoderParams",
                    config: "output_layer.MixtureConfig",
                    out: "output_layer.OutputParams",
                    sentences, n: int, batch_size: int = 512):
    """(mean NLL, per-component mean pi, mean per-datum pi variance) over
    every target position of ``sentences``."""
    windows, targets = data_mod.make_examples(sentences, n)
    total_nll = 0.0
    pi_sum = np.zeros(config.K)
    pi_var_sum = 0.0
    count = len(targets)
    if count == 0:
        raise ValueError("empty split")
    for lo in range(0, count, batch_size):
        w = windows[lo:lo + batch_size]
        t = targets[lo:lo + batch_size]
        H, _ = encoder_mod.encode(enc, w)
        cache = output_layer._forward(config, out, H)
        total_nll -= float(cache.log_posterior[np.arange(len(t)), t].sum())
        pi_sum += cache.pi.sum(axis=0)
        pi_var_sum += float(cache.pi.var(axis=1).sum())
    return total_nll / count, pi_sum / count, pi_var_sum / count


def perplexity(state, sentences) -> float:
    """exp of the mean negative log posterior over all target positions.

    ``state`` is any object with .enc, .mixture, .out and .config.n
    (a training.TrainState fits).
    """
    nll, _, _ = mean_nll_and_pi(state.enc, state.mixture, state.out,
                                sentences, state.config.n)
    try:
        return math.exp(nll)
    except OverflowError:
        return math.inf


def unigram_ppl(train_sentences, eval_sentences, V: int) -> float:
    """Closed-form add-one-smoothed unigram baseline perplexity."""
    counts = np.zeros(V)
    for sent in train_sentences:
        for tok in sent:
            counts[tok] += 1
    probs = (counts + 1.0) / (counts.sum() + V)
    nll = 0.0
    total = 0
    for sent in eval_sentences:
        for tok in sent:
            nll -= math.log(probs[tok])
            total += 1
    return math.exp(nll / total)


CURVE_HEADER = "x,score,dscore_dx"


def emit_kernel_curves(specs: Sequence[KernelSpec], x_max: float, steps: int,
                       out_dir) -> list:
    """One CSV per kernel tabulating the 1-D profile and its derivative.

    Distance-based kernels are profiled against the squared distance
    x = ||W_v - h||^2; lin and pol against the dot product (same column
    name, noted in the README).
    """
    if steps < 2:
        raise ValueError("steps must be >= 2")
    os.makedirs(out_dir, exist_ok=True)
    xs = np.linspace(0.0, x_max, steps)
    paths = []
    for spec in specs:
        s, ds = kernels.radial_profile(spec, xs)
        path = os.path.join(out_dir, f"curve_{spec.kind}.csv")
        with open(path, "w", encoding="utf-8") as f:
            f.write(CURVE_HEADER + "\n")
            for x, sv, dv in zip(xs, s, ds):
                f.write(f"{x:.12g},{sv:.12g},{dv:.12g}\n")
        paths.append(path)
    return paths


@dataclass
class ContextReport:
    tokens: list                 # context window as tokens
    pi: np.ndarray               # K
    neighbor_logits: np.ndarray  # K x m, per-component logits of neighbors
    neighbor_posterior: np.ndarray  # m
    top_predictions: list        # [(token, prob)] over full vocabulary


@dataclass
class QueryReport:
    query: str
    neighbors: list              # [(token, inner product)], descending
    contexts: list               # ContextReport per supplied context


@dataclass
class ProbeReport:
    queries: list

    def to_text(self) -> str:
        lines = []
        for q in self.queries:
            lines.append(f"query: {q.query}")
            lines.append("  neighbors (inner product):")
            for tok, s in q.neighbors:
                lines.append(f"    {tok}\t{s:.6g}")
            for ctx in q.contexts:
                lines.append(f"  context: {' '.join(ctx.tokens)}")
                lines.append("    pi: " + " ".join(f"{p:.4g}" for p in ctx.pi))
                for k in range(ctx.neighbor_logits.shape[0]):
                    row = " ".join(f"{v:.6g}" for v in ctx.neighbor_logits[k])
                    lines.append(f"    component {k} logits: {row}")
                lines.append("    neighbor posterior: "
                             + " ".join(f"{p:.6g}" for p in ctx.neighbor_posterior))
                lines.append("    top predictions: "
                             + " ".join(f"{t}:{p:.4g}" for t, p in ctx.top_predictions))
        return "\n".join(lines) + "\n"

    def to_tsv(self) -> str:
        rows = []
        for q in self.queries:
            for rank, (tok, s) in enumerate(q.neighbors):
                rows.append(f"neighbor\t{q.query}\t{rank}\t{tok}\t{s:.10g}")
            for ci, ctx in enumerate(q.contexts):
                for m, p in enumerate(ctx.neighbor_posterior):
                    rows.append(
                        f"posterior\t{q.query}\t{ci}\t{q.neighbors[m][0]}\t{p:.10g}")
        return "\n".join(rows) + "\n"


def disambiguation_probe(state, vocab: "data_mod.Vocabulary",
                         query_tokens: Sequence[str],
                         contexts: Sequence[Sequence[str]] = (),
                         top_m: int = 5) -> ProbeReport:
    """Inner-product neighbors of each query word plus, for each supplied
    context, the per-component logits and posterior over the neighbor set."""
    W = state.out.W
    config = state.mixture
    queries = []
    for qt in query_tokens:
        if qt not in vocab.token_to_id:
            raise TokenOutOfRange(f"token {qt!r} not in vocabulary")
        qid = vocab.token_to_id[qt]
        sims = W[:, qid] @ W
        order = np.argsort(-sims, kind="stable")[:top_m]
        neighbors = [(vocab.decode(int(v)), float(sims[v])) for v in order]

        ctx_reports = []
        for ctx in contexts:
            toks = list(ctx)
            ids = [vocab.encode_token(t) for t in toks]
            n = state.config.n
            window = ([data_mod.BOS_ID] * n + ids)[-n:]
            H, _ = encoder_mod.encode(state.enc, np.asarray([window]))
            cache = output_layer._forward(config, state.out, H)
            logits = np.stack([c.logits[0, order] for c in cache.kernel_caches])
            post = np.exp(cache.log_posterior[0])
            top = np.argsort(-post, kind="stable")[:top_m]
            ctx_reports.append(ContextReport(
                tokens=toks,
                pi=cache.pi[0],
                neighbor_logits=logits,
                neighbor_posterior=post[order],
                top_predictions=[(vocab.decode(int(v)), float(post[v])) for v in top],
            ))
        queries.append(QueryReport(query=qt, neighbors=neighbors,
                                   contexts=ctx_reports))
    return ProbeReport(queries=queries)
