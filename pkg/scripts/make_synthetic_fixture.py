#!/usr/bin/env python3
"""Regenerate the bundled synthetic three-minute fixture.

Three speakers: two cast members and one uncast policeman. Embeddings are
speaker centroids plus small fixed noise, rounded so the files are stable.
"""

import json
import random
from itertools import combinations
from pathlib import Path

OUT = Path(__file__).resolve().parents[1] / "src" / "storypipe" / "data" / "synthetic"

DURATION = 180_000

# (start_ms, end_ms, speaker, text)
LINES = [
    (4_000, 7_500, "Jiang Feng", "You are late again."),
    (8_200, 10_900, "Hui Lan", "The bus never came."),
    (12_000, 15_400, "Jiang Feng", "Then you should have walked."),
    (21_000, 24_800, "Hui Lan", "Are you going to lecture me all morning?"),
    (30_500, 33_000, "Policeman", "Is this your car outside?"),
    (33_600, 36_100, "Jiang Feng", "Yes, officer. Is there a problem?"),
    (37_000, 41_500, "Policeman", "You are parked in a fire lane."),
    (58_000, 61_200, "Hui Lan", "I told you to move it last night."),
    (62_000, 64_000, "Jiang Feng", "I forgot."),
    (80_000, 84_300, "Hui Lan", "We need to talk about the apartment."),
    (84_300, 88_000, "Jiang Feng", "Not now. I have to find the keys."),
    (110_000, 113_500, "Policeman", "Sir, I need to see your license."),
    (114_000, 117_000, "Jiang Feng", "It is in the glove box."),
    (150_000, 155_000, "Hui Lan", "Call me when you get to the station."),
]

# shot cuts as a detector might report them; some fall inside dialogue
CUTS = [0, 6_000, 19_000, 27_000, 27_000, 35_000, 50_000, 70_000, 86_000, 100_000, 125_000, 152_000, 170_000]

CAST = [
    {"name": "Jiang Feng", "photo": "cast/jiang_feng.png"},
    {"name": "Hui Lan", "photo": "cast/hui_lan.png"},
]

CENTROIDS = {
    "Jiang Feng": [1.0, 0.2, 0.0, 0.1, 0.0, 0.3, 0.0, 0.1],
    "Hui Lan": [0.0, 1.0, 0.3, 0.0, 0.2, 0.0, 0.1, 0.0],
    "Policeman": [0.1, 0.0, 0.1, 1.0, 0.0, 0.0, 0.4, 0.2],
}

QA = [
    ("q01", "Character", "Who arrives late at the start?", ["Jiang Feng", "Hui Lan", "The policeman", "Nobody"], "B"),
    ("q02", "Character", "Who asks about the car outside?", ["Hui Lan", "Jiang Feng", "The policeman", "A waiter"], "C"),
    ("q03", "Character", "Who forgot to move the car?", ["Jiang Feng", "Hui Lan", "The policeman", "A neighbour"], "A"),
    ("q04", "Character", "Who wants to talk about the apartment?", ["The policeman", "Jiang Feng", "A driver", "Hui Lan"], "D"),
    ("q05", "Action", "Where is the car parked?", ["In a garage", "In a fire lane", "On the roof", "At the station"], "B"),
    ("q06", "Action", "What does the policeman ask to see?", ["A passport", "A ticket", "A license", "A receipt"], "C"),
    ("q07", "Action", "Where is the license kept?", ["In the glove box", "In a wallet", "In a drawer", "At home"], "A"),
    ("q08", "Plot", "Why is Hui Lan late?", ["She overslept", "The bus never came", "Her car broke down", "She got lost"], "B"),
    ("q09", "Plot", "What is Jiang Feng looking for?", ["His phone", "His wallet", "The keys", "His coat"], "C"),
    ("q10", "Plot", "Where is Jiang Feng going at the end?", ["The station", "The airport", "The office", "A restaurant"], "A"),
]


def dump(name: str, obj) -> None:
    (OUT / name).write_text(json.dumps(obj, indent=2, ensure_ascii=False) + "\n", encoding="utf-8")


def main() -> None:
    OUT.mkdir(parents=True, exist_ok=True)
    rng = random.Random(7)
    lines = [
        {"index": i, "start_ms": s, "end_ms": e, "text": t}
        for i, (s, e, _, t) in enumerate(LINES, start=1)
    ]
    dump("subtitles.json", {"duration_ms": DURATION, "lines": lines})
    dump("cuts.json", {"duration_ms": DURATION, "cuts_ms": CUTS})
    dump("cast.json", {"members": CAST})

    items = []
    for i, (_, _, who, _) in enumerate(LINES, start=1):
        vec = [round(c + rng.uniform(-0.08, 0.08), 4) for c in CENTROIDS[who]]
        items.append({"subtitle_index": i, "vector": vec})
    dump("embeddings.json", {"dim": 8, "items": items})

    pairs = [
        {"a": a, "b": b, "same_speaker": LINES[a - 1][2] == LINES[b - 1][2]}
        for a, b in combinations(range(1, len(LINES) + 1), 2)
    ]
    dump("pairs.json", {"pairs": pairs})

    dump("qa.json", {"items": [
        {"id": qid, "category": cat, "question": q, "options": dict(zip("ABCD", opts)), "gold": gold}
        for qid, cat, q, opts, gold in QA
    ]})
    dump("config.json", {
        "subtitles": "subtitles.json",
        "cuts": "cuts.json",
        "cast": "cast.json",
        "embeddings": "embeddings.json",
        "qa": "qa.json",
        "policy": "midpoint",
        "threshold": 0.85,
        "backend": "mock:42",
    })


if __name__ == "__main__":
    main()
