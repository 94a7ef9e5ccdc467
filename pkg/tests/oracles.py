"""Independent oracles used across the test suite.

Everything here is deliberately naive: central finite differences, scalar
loops, exhaustive enumeration. None of it shares code with the paths it
checks.
"""

import math
from collections import Counter

import numpy as np

from caption_forge.tensor import Tape, Tensor, backward

FD_H = 1e-5


def finite_difference_grads(f, params, h=FD_H):
    """Central-difference gradients of the scalar f() w.r.t. each param entry.

    f is re-evaluated forward-only (no tape), so this oracle never touches
    the backward rules it is checking.
    """
    grads = []
    for p in params:
        flat = p.data.reshape(-1)
        g = np.zeros_like(flat)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + h
            up = f().item()
            flat[i] = orig - h
            down = f().item()
            flat[i] = orig
            g[i] = (up - down) / (2.0 * h)
        grads.append(g.reshape(p.data.shape))
    return grads


def analytic_grads(f, params):
    """Gradients from one taped forward/backward pass of the scalar f()."""
    for p in params:
        p.zero_grad()
    with Tape() as tape:
        loss = f()
    backward(loss, tape)
    return [np.zeros_like(p.data) if p.grad is None else p.grad.copy() for p in params]


def assert_grads_match(f, params, rtol=1e-4, floor=1e-8, h=FD_H):
    """Check analytic vs central-FD gradients entrywise (relative, floored)."""
    ana = analytic_grads(f, params)
    num = finite_difference_grads(f, params, h=h)
    for p, a, n in zip(params, ana, num):
        live = np.abs(a) > floor
        denom = np.maximum(np.abs(a), np.abs(n))
        rel = np.zeros_like(a)
        rel[live] = np.abs(a - n)[live] / denom[live]
        worst = rel.max() if rel.size else 0.0
        assert worst <= rtol, f"gradient mismatch {worst:.3e} on shape {p.shape}"


def mlp_attention_loop(v_rows, h_t, w_v, w_h, w_score):
    """Scalar-loop MLP attention: scores, softmax, context, all per-k, per-j."""
    k_count, enc_dim = v_rows.shape
    scores = []
    for k in range(k_count):
        pre = w_v @ v_rows[k] + w_h @ h_t
        scores.append(float(w_score @ np.tanh(pre)))
    mx = max(scores)
    exps = [math.exp(s - mx) for s in scores]
    z = sum(exps)
    alphas = [e / z for e in exps]
    context = np.zeros(enc_dim)
    for k in range(k_count):
        context += alphas[k] * v_rows[k]
    return np.array(alphas), context


def single_head_attention_loop(q, keys, values, wq, wk, wl, mask=None):
    """One attention head by explicit loops: softmax(qWq (kWk)^T / sqrt(du)) vWl."""
    du = wq.shape[1]
    qp = q @ wq
    kp = keys @ wk
    vp = values @ wl
    n_q, n_k = qp.shape[0], kp.shape[0]
    out = np.zeros((n_q, du))
    for i in range(n_q):
        scores = []
        for j in range(n_k):
            if mask is not None and not mask[i, j]:
                scores.append(-math.inf)
            else:
                scores.append(float(qp[i] @ kp[j]) / math.sqrt(du))
        mx = max(scores)
        exps = [0.0 if s == -math.inf else math.exp(s - mx) for s in scores]
        z = sum(exps)
        for j in range(n_k):
            out[i] += (exps[j] / z) * vp[j]
    return out


# ---------------------------------------------------------------------------
# metric oracles (scalar loops, written before the main implementations)


def _ngrams(tokens, n):
    return [tuple(tokens[i:i + n]) for i in range(len(tokens) - n + 1)]


def bleu_loop(corpus, max_n):
    """Corpus BLEU by explicit counting: clipped precisions, geometric mean, BP."""
    num = [0] * max_n
    den = [0] * max_n
    cand_len = 0
    ref_len = 0
    for cand, refs in corpus:
        cand_len += len(cand)
        best = None
        for r in refs:
            key = (abs(len(r) - len(cand)), len(r))
            if best is None or key < best:
                best = key
        ref_len += best[1]
        for n in range(1, max_n + 1):
            cc = Counter(_ngrams(cand, n))
            clip = Counter()
            for r in refs:
                rc = Counter(_ngrams(r, n))
                for gram, c in rc.items():
                    clip[gram] = max(clip[gram], c)
            for gram, c in cc.items():
                num[n - 1] += min(c, clip[gram])
                den[n - 1] += c
    if cand_len == 0:
        return 0.0
    logsum = 0.0
    for n in range(max_n):
        if den[n] == 0 or num[n] == 0:
            return 0.0
        logsum += math.log(num[n] / den[n])
    bp = min(1.0, math.exp(1.0 - ref_len / cand_len))
    return bp * math.exp(logsum / max_n)


def cider_d_loop(corpus, sigma=6.0, idf_refs=None):
    """CIDEr-D by explicit loops over n-grams, references, and images."""
    max_n = 4
    doc_refs = idf_refs if idf_refs is not None else [refs for _, refs in corpus]
    n_images = len(doc_refs)
    df = [Counter() for _ in range(max_n)]
    for refs in doc_refs:
        for n in range(1, max_n + 1):
            seen = set()
            for r in refs:
                seen.update(_ngrams(r, n))
            for gram in seen:
                df[n - 1][gram] += 1

    def vec(tokens, n):
        counts = Counter(_ngrams(tokens, n))
        out = {}
        for gram, c in counts.items():
            idf = math.log(n_images) - math.log(max(1.0, df[n - 1][gram]))
            out[gram] = c * idf
        return out

    def norm(v):
        return math.sqrt(sum(x * x for x in v.values()))

    total = 0.0
    for cand, refs in corpus:
        per_n = [0.0] * max_n
        for n in range(1, max_n + 1):
            cv = vec(cand, n)
            cn = norm(cv)
            acc = 0.0
            for r in refs:
                rv = vec(r, n)
                rn = norm(rv)
                val = 0.0
                for gram, cx in cv.items():
                    val += min(cx, rv.get(gram, 0.0)) * rv.get(gram, 0.0)
                if cn != 0.0 and rn != 0.0:
                    val /= cn * rn
                delta = len(cand) - len(r)
                val *= math.exp(-(delta * delta) / (2.0 * sigma * sigma))
                acc += val
            per_n[n - 1] = acc / len(refs)
        total += 10.0 * sum(per_n) / max_n
    return total / len(corpus)


# ---------------------------------------------------------------------------
# exhaustive sequence search


def enumerate_best_sequences(step_logprobs, vocab_size, bos_id, eos_id, max_len):
    """Score every BOS-free token sequence of up to max_len tokens, EOS-closed.

    step_logprobs(prefix) must return the log-probability row for the token
    following ``prefix`` (a tuple that starts with BOS). Returns all complete
    sequences as (tokens, logprob), best first under the beam tie-break rule.
    """
    results = []
    choices = [t for t in range(vocab_size) if t != bos_id]

    def walk(prefix, acc):
        lp = step_logprobs(prefix)
        if len(prefix) - 1 == max_len:
            results.append((prefix + (eos_id,), acc + float(lp[eos_id])))
            return
        for t in choices:
            seq = prefix + (t,)
            if t == eos_id:
                results.append((seq, acc + float(lp[t])))
            else:
                walk(seq, acc + float(lp[t]))

    walk((bos_id,), 0.0)
    results.sort(key=lambda r: (-r[1], len(r[0]), r[0]))
    return results


def all_sequences_upper_bound(vocab_size, max_len):
    """Loose count of sequences the exhaustive walk can produce."""
    return sum((vocab_size - 1) ** t for t in range(max_len + 1)) + 1
