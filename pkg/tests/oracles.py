"""Independent reference implementations used by the tests.

Written with plain Python loops and exact fractions so they share no code
path with the vectorised library functions they check.
"""

from __future__ import annotations

import itertools
import math
from fractions import Fraction


def confusion_by_group(preds, labels, groups):
    """{group: {"tp", "fp", "tn", "fn", "n", "correct"}} counted one sample at a time."""
    out = {}
    for p, y, g in zip(preds, labels, groups):
        c = out.setdefault(int(g), {"tp": 0, "fp": 0, "tn": 0, "fn": 0, "n": 0, "correct": 0})
        c["n"] += 1
        c["correct"] += int(p == y)
        if y == 1:
            c["tp" if p == 1 else "fn"] += 1
        else:
            c["fp" if p == 1 else "tn"] += 1
    return out


def brute_dp(preds, groups):
    conf = confusion_by_group(preds, [0] * len(preds), groups)
    rates = {g: Fraction(c["fp"], c["n"]) for g, c in conf.items()}
    if len(rates) < 2:
        return math.nan
    return float(max(abs(rates[a] - rates[b]) for a, b in itertools.combinations(rates, 2)))


def brute_eodds(preds, labels, groups):
    conf = confusion_by_group(preds, labels, groups)
    best = None
    for a, b in itertools.combinations(sorted(conf), 2):
        ca, cb = conf[a], conf[b]
        gaps = []
        if ca["tp"] + ca["fn"] and cb["tp"] + cb["fn"]:
            gaps.append(abs(Fraction(ca["tp"], ca["tp"] + ca["fn"])
                            - Fraction(cb["tp"], cb["tp"] + cb["fn"])))
        if ca["fp"] + ca["tn"] and cb["fp"] + cb["tn"]:
            gaps.append(abs(Fraction(ca["fp"], ca["fp"] + ca["tn"])
                            - Fraction(cb["fp"], cb["fp"] + cb["tn"])))
        if gaps:
            best = max(gaps) if best is None else max(best, max(gaps))
    return math.nan if best is None else float(best)


def brute_accuracy(preds, labels):
    return float(Fraction(sum(int(p == y) for p, y in zip(preds, labels)), len(preds)))


def brute_gap(preds, labels, groups):
    conf = confusion_by_group(preds, labels, groups)
    accs = {g: Fraction(c["correct"], c["n"]) for g, c in conf.items()}
    if len(accs) < 2:
        return math.nan
    return float(max(abs(accs[a] - accs[b]) for a, b in itertools.combinations(accs, 2)))


def hamilton_quotas(probs, n):
    """Largest remainder apportionment with exact rationals; ties to lower index."""
    exact = [Fraction(p).limit_denominator(10**12) * n for p in probs]
    base = [int(math.floor(e)) for e in exact]
    left = n - sum(base)
    order = sorted(range(len(probs)), key=lambda i: (-(exact[i] - base[i]), i))
    for i in order[:left]:
        base[i] += 1
    return base


def kl(p, q):
    return sum(pi * math.log(pi / qi) for pi, qi in zip(p, q) if pi > 0)
