"""Corpus BLEU-1..4 and ROUGE-L over tokenized captions.

BLEU is corpus-level with a single reference per candidate: clipped n-gram
counts and lengths are pooled over the corpus, precisions combined by
geometric mean with uniform weights, times the brevity penalty
min(1, exp(1 - r/c)). No smoothing: a zero precision zeroes the score.
ROUGE-L is the LCS F-measure with beta=1.2; the corpus value is the mean of
sentence scores.
"""

from __future__ import annotations

import math
from collections import Counter
from dataclasses import dataclass, field
from typing import Sequence

from .errors import DataError

# Published full-scale results for the combined thumbnail+hierarchical model
# (GTEx test split, external pre-trained weights). Not reproducible at desk
# scale; kept for documentation and report headers.
PUBLISHED_FULL_SCALE = {
    "bleu1": 0.4116,
    "bleu2": 0.3037,
    "bleu3": 0.2147,
    "bleu4": 0.1470,
    "rouge_l": 0.4480,
}

Tokens = Sequence[str]


def _ngrams(tokens: Tokens, n: int) -> Counter:
    return Counter(tuple(tokens[i:i + n]) for i in range(len(tokens) - n + 1))


def bleu(candidates: Sequence[Tokens], references: Sequence[Tokens],
         max_n: int = 4) -> list[float]:
    """Corpus BLEU-1..max_n for aligned candidate/reference token lists."""
    if len(candidates) != len(references):
        raise DataError(
            f"{len(candidates)} candidates vs {len(references)} references")
    if not candidates:
        raise DataError("empty corpus")

    matches = [0] * max_n
    totals = [0] * max_n
    cand_len = 0
    ref_len = 0
    for cand, ref in zip(candidates, references):
        cand_len += len(cand)
        ref_len += len(ref)
        for n in range(1, max_n + 1):
            cn = _ngrams(cand, n)
            rn = _ngrams(ref, n)
            totals[n - 1] += max(0, len(cand) - n + 1)
            matches[n - 1] += sum(min(c, rn[g]) for g, c in cn.items())

    bp = 1.0 if cand_len >= ref_len else (
        math.exp(1.0 - ref_len / cand_len) if cand_len > 0 else 0.0)
    scores = []
    for n in range(1, max_n + 1):
        ps = []
        for k in range(n):
            ps.append(matches[k] / totals[k] if totals[k] > 0 else 0.0)
        if any(p == 0.0 for p in ps):
            scores.append(0.0)
        else:
            scores.append(bp * math.exp(sum(math.log(p) for p in ps) / n))
    return scores


def lcs_length(a: Tokens, b: Tokens) -> int:
    """Longest common subsequence length by dynamic programming."""
    if not a or not b:
        return 0
    prev = [0] * (len(b) + 1)
    for x in a:
        cur = [0]
        for j, y in enumerate(b, 1):
            cur.append(prev[j - 1] + 1 if x == y else max(prev[j], cur[j - 1]))
        prev = cur
    return prev[-1]


def rouge_l(candidate: Tokens, reference: Tokens, beta: float = 1.2) -> float:
    """LCS-based F-measure; 0 when there is no common subsequence."""
    lcs = lcs_length(candidate, reference)
    if lcs == 0:
        return 0.0
    r = lcs / len(reference)
    p = lcs / len(candidate)
    return (1 + beta * beta) * r * p / (r + beta * beta * p)


@dataclass
class MetricsReport:
    bleu1: float
    bleu2: float
    bleu3: float
    bleu4: float
    rouge_l: float
    n_slides: int
    per_slide: dict[str, dict[str, float]] = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {
            "bleu1": self.bleu1, "bleu2": self.bleu2, "bleu3": self.bleu3,
            "bleu4": self.bleu4, "rouge_l": self.rouge_l,
            "n_slides": self.n_slides, "per_slide": self.per_slide,
        }


def score_corpus(candidates_by_id: dict[str, Tokens],
                 references_by_id: dict[str, Tokens]) -> MetricsReport:
    """Full report: corpus BLEU, mean-sentence ROUGE-L, per-slide sentence scores."""
    ids = sorted(references_by_id)
    missing = [i for i in ids if i not in candidates_by_id]
    if missing:
        raise DataError(f"missing candidates for slides: {missing[:5]}")
    cands = [list(candidates_by_id[i]) for i in ids]
    refs = [list(references_by_id[i]) for i in ids]
    corpus = bleu(cands, refs)
    per_slide = {}
    rouge_total = 0.0
    for sid, cand, ref in zip(ids, cands, refs):
        rl = rouge_l(cand, ref)
        rouge_total += rl
        sent = bleu([cand], [ref]) if cand else [0.0] * 4
        per_slide[sid] = {"bleu4": sent[3], "rouge_l": rl}
    return MetricsReport(
        bleu1=corpus[0], bleu2=corpus[1], bleu3=corpus[2], bleu4=corpus[3],
        rouge_l=rouge_total / len(ids), n_slides=len(ids), per_slide=per_slide)
