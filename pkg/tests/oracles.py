"""Independent reference implementations used to check the decoder."""

from __future__ import annotations

import math
import random
from fractions import Fraction

OTHERS = "Others"
NAMES = ["Alice", "Bob", "Carol", "Dave", "Erin", "Frank", "Grace", "Heidi"]


def oracle_argmax(clip_probs: list[dict[str, list[float]]]) -> str:
    """Linear-space product over every token of every clip, exact in rationals.

    Ties go to the alphabetically first name, with Others behind every cast name.
    """
    totals = {}
    for cand in clip_probs[0]:
        prod = Fraction(1)
        for clip in clip_probs:
            for p in clip[cand]:
                prod *= Fraction(p)
        totals[cand] = prod
    top = max(totals.values())
    winners = [c for c, v in totals.items() if v == top]
    cast = sorted(w for w in winners if w != OTHERS)
    return cast[0] if cast else OTHERS


def random_instance(rng: random.Random, max_clips: int = 5, max_cands: int = 6):
    """Per-clip token probabilities for one speaker over a random cast.

    About one instance in four gets a deliberate exact tie: a second cast
    member copies the leader's token multiset in every clip.
    """
    n_cast = rng.randint(1, max_cands - 1)
    cast = rng.sample(NAMES, n_cast)
    cands = [*cast, OTHERS]
    n_clips = rng.randint(1, max_clips)
    clips = []
    for _ in range(n_clips):
        table = {}
        for c in cands:
            n_tok = 1 if c == OTHERS else rng.randint(1, 4)
            table[c] = [rng.uniform(0.01, 1.0) for _ in range(n_tok)]
        clips.append(table)
    if len(cast) >= 2 and rng.random() < 0.25:
        a, b = rng.sample(cast, 2)
        for table in clips:
            toks = list(table[a])
            rng.shuffle(toks)
            table[b] = toks
    return cast, clips


def near_tie(clip_probs: list[dict[str, list[float]]], rel: float = 1e-9) -> bool:
    """True when the two best distinct products are within ``rel`` of each other."""
    prods = sorted({math.prod(p for clip in clip_probs for p in clip[c]) for c in clip_probs[0]}, reverse=True)
    return len(prods) > 1 and (prods[0] - prods[1]) <= rel * prods[0]


def to_logs(clip_probs: list[dict[str, list[float]]]) -> list[dict[str, list[float]]]:
    return [{c: [math.log(p) for p in toks] for c, toks in clip.items()} for clip in clip_probs]
