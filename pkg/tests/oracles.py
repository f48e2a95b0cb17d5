"""Independent brute-force oracles. Nothing here calls into the code under test."""

import itertools
import math
from fractions import Fraction

import numpy as np


def random_table(rng, vocab_size, horizon, zero_frac=0.2):
    """Full conditional table over every context shorter than ``horizon``."""
    table = {}
    for length in range(horizon):
        for ctx in itertools.product(range(vocab_size), repeat=length):
            row = rng.dirichlet(np.ones(vocab_size))
            mask = rng.random(vocab_size) < zero_frac
            mask[rng.integers(vocab_size)] = False
            row[mask] = 0.0
            table[ctx] = (row / row.sum()).tolist()
    return table


def joint_logprob(table, seq):
    total = 0.0
    for i, tok in enumerate(seq):
        p = table[tuple(seq[:i])][tok]
        if p == 0:
            return -math.inf
        total += math.log(p)
    return total


def best_sequence(table, vocab_size, horizon, eos=None):
    """Exhaustive argmax of joint log-prob; ties to the lexicographically smallest."""
    best, best_score = None, -math.inf
    candidates = []
    for seq in itertools.product(range(vocab_size), repeat=horizon):
        if eos is not None and eos in seq:
            seq = seq[: seq.index(eos) + 1]
        candidates.append(tuple(seq))
    for seq in sorted(set(candidates)):
        score = joint_logprob(table, seq)
        if score > best_score:
            best, best_score = seq, score
    return best, best_score


def naive_ngram_counts(tokens, n):
    """(unique, total) n-grams: sort the windows, count runs of equal neighbours."""
    grams = sorted(list(tokens[i:i + n]) for i in range(len(tokens) - n + 1))
    unique = sum(1 for i, g in enumerate(grams) if i == 0 or g != grams[i - 1])
    return unique, len(grams)


def naive_diversity(tokens):
    if len(tokens) < 5:
        return 0.0
    score = 1.0
    for n in (2, 3, 4):
        u, t = naive_ngram_counts(list(tokens), n)
        score *= u / t
    return score


def nucleus_oracle(probs, p):
    """Smallest descending prefix with exact rational mass >= p."""
    fr = [Fraction(x) for x in probs]
    order = sorted((i for i in range(len(fr)) if fr[i] > 0), key=lambda i: (-fr[i], i))
    target = Fraction(p)
    mass = Fraction(0)
    for n, i in enumerate(order, start=1):
        mass += fr[i]
        if mass >= target:
            return sorted(order[:n])
    return sorted(order)


def typical_oracle(probs, tau):
    support = [i for i, x in enumerate(probs) if x > 0]
    h = -sum(probs[i] * math.log(probs[i]) for i in support)
    ranked = sorted(support, key=lambda i: (abs(-math.log(probs[i]) - h), i))
    mass = 0.0
    for n, i in enumerate(ranked, start=1):
        mass += probs[i]
        if mass >= tau - 1e-12:
            return sorted(ranked[:n])
    return sorted(ranked)


def shannon_entropy(probs):
    return -sum(p * math.log(p) for p in probs if p > 0)
