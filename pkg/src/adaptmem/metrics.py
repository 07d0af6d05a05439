"""Answer-quality metrics: token F1 and BLEU-1.

Tokenization for both: lowercase, delete ASCII punctuation, split on
whitespace.
"""

from __future__ import annotations

import math
import string
from collections import Counter

_PUNCT = str.maketrans("", "", string.punctuation)


def tokenize(text: str) -> list[str]:
    return text.lower().translate(_PUNCT).split()


def metric_f1(pred: str, gold: str) -> float:
    p, g = tokenize(pred), tokenize(gold)
    if not p and not g:
        return 1.0
    if not p or not g:
        return 0.0
    common = sum((Counter(p) & Counter(g)).values())
    if common == 0:
        return 0.0
    precision = common / len(p)
    recall = common / len(g)
    return 2 * precision * recall / (precision + recall)


def metric_bleu1(pred: str, gold: str) -> float:
    """Clipped unigram precision times the brevity penalty."""
    p, g = tokenize(pred), tokenize(gold)
    c, r = len(p), len(g)
    if c == 0:
        return 0.0
    ref = Counter(g)
    clipped = sum(min(n, ref[tok]) for tok, n in Counter(p).items())
    if clipped == 0:
        return 0.0
    bp = 1.0 if c > r else math.exp(1 - r / c)
    return bp * clipped / c
