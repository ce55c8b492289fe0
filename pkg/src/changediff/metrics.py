"""Corpus BLEU-4 and ROUGE-L over multi-reference caption sets.

Variant choices, since reported scores depend on them:

* BLEU: clipped n-gram precisions for n = 1..4, uniform geometric mean,
  brevity penalty ``exp(1 - r/c)`` when ``c <= r`` with ``r`` the sum of
  closest reference lengths (shorter wins ties).  A zero precision is
  replaced by ``1e-9`` so the geometric mean stays defined.
* ROUGE-L: LCS precision/recall against each reference, combined as
  ``(1 + b2) P R / (R + b2 P)`` with ``b2 = 1.2``, best reference wins.
"""

from __future__ import annotations

import math
from collections import Counter
from typing import Sequence

Tokens = Sequence[str]

BLEU_EPSILON = 1e-9
ROUGE_BETA_SQ = 1.2


def ngrams(tokens: Tokens, n: int) -> Counter:
    return Counter(tuple(tokens[i:i + n]) for i in range(len(tokens) - n + 1))


def bleu4(candidates: Sequence[Tokens], references: Sequence[Sequence[Tokens]], max_n: int = 4) -> float:
    if len(candidates) != len(references):
        raise ValueError(f"{len(candidates)} candidates but {len(references)} reference sets")
    if any(len(refs) == 0 for refs in references):
        raise ValueError("every reference set must be non-empty")
    matches = [0] * max_n
    totals = [0] * max_n
    cand_len = ref_len = 0
    for cand, refs in zip(candidates, references):
        cand_len += len(cand)
        ref_len += min((abs(len(r) - len(cand)), len(r)) for r in refs)[1]
        for n in range(1, max_n + 1):
            counts = ngrams(cand, n)
            max_ref = Counter()
            for r in refs:
                max_ref |= ngrams(r, n)
            matches[n - 1] += sum(min(c, max_ref[g]) for g, c in counts.items())
            totals[n - 1] += max(len(cand) - n + 1, 0)
    if cand_len == 0:
        return 0.0
    log_p = 0.0
    for m, total in zip(matches, totals):
        p = m / total if m > 0 else BLEU_EPSILON
        log_p += math.log(p) / max_n
    bp = 1.0 if cand_len > ref_len else math.exp(1.0 - ref_len / cand_len)
    return bp * math.exp(log_p)


def lcs_length(a: Tokens, b: Tokens) -> int:
    prev = [0] * (len(b) + 1)
    for x in a:
        cur = [0]
        for j, y in enumerate(b):
            cur.append(prev[j] + 1 if x == y else max(prev[j + 1], cur[j]))
        prev = cur
    return prev[-1]


def rouge_l(candidate: Tokens, references: Sequence[Tokens], beta_sq: float = ROUGE_BETA_SQ) -> float:
    if not references:
        raise ValueError("reference set must be non-empty")
    best = 0.0
    for ref in references:
        lcs = lcs_length(candidate, ref)
        if lcs == 0:
            continue
        p, r = lcs / len(candidate), lcs / len(ref)
        best = max(best, (1 + beta_sq) * p * r / (r + beta_sq * p))
    return best


def corpus_rouge_l(candidates: Sequence[Tokens], references: Sequence[Sequence[Tokens]]) -> float:
    if len(candidates) != len(references):
        raise ValueError(f"{len(candidates)} candidates but {len(references)} reference sets")
    if not candidates:
        return 0.0
    return sum(rouge_l(c, r) for c, r in zip(candidates, references)) / len(candidates)


def evaluate(candidates: Sequence[Tokens], references: Sequence[Sequence[Tokens]]) -> dict:
    return {
        "bleu4": bleu4(candidates, references),
        "rougeL": corpus_rouge_l(candidates, references),
        "n_items": len(candidates),
    }
