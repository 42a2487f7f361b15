#!/usr/bin/env python3
"""Generate the bundled desk-scale entailment corpus.

Each premise is emitted with four entailed hypotheses, one tab-separated
pair per line, so that premise groups can be split across up to five users.

    python scripts/make_desk_corpus.py --premises 1500 --out src/semsic/data/desk_pairs.tsv
"""
import argparse
import random

SUBJECTS = [
    # (phrase, generic noun, hypernym)
    ("man", "man", "person"),
    ("woman", "woman", "person"),
    ("boy", "boy", "child"),
    ("girl", "girl", "child"),
    ("child", "child", "kid"),
    ("dog", "dog", "animal"),
    ("worker", "worker", "person"),
    ("teenager", "teenager", "person"),
    ("lady", "lady", "woman"),
    ("guy", "guy", "man"),
    ("player", "player", "person"),
    ("musician", "musician", "person"),
]
ADJECTIVES = ["young", "old", "tall", "little", "smiling", "happy", "tired", "blond"]
COLORS = ["red", "blue", "green", "black", "white", "yellow", "orange", "purple"]
CLOTHES = ["shirt", "hat", "jacket", "dress", "coat", "sweater", "helmet", "scarf"]
ACTIONS = [
    # (progressive phrase, short generalization, location class)
    ("riding a bike", "riding", "outside"),
    ("playing a guitar", "playing music", "any"),
    ("throwing a ball", "playing", "outside"),
    ("reading a book", "reading", "any"),
    ("cooking some food", "cooking", "inside"),
    ("climbing a rock", "climbing", "outside"),
    ("walking a dog", "walking", "outside"),
    ("eating a sandwich", "eating", "any"),
    ("painting a wall", "painting", "any"),
    ("kicking a soccer ball", "playing soccer", "outside"),
    ("jumping over a fence", "jumping", "outside"),
    ("carrying a box", "carrying something", "any"),
    ("drinking a coffee", "drinking", "any"),
    ("washing a car", "cleaning", "outside"),
    ("singing a song", "singing", "any"),
    ("sleeping on a bench", "sleeping", "outside"),
    ("fixing a roof", "working", "outside"),
    ("selling some fruit", "selling", "any"),
]
PLACES = {
    "outside": ["on the street", "in the park", "at the beach", "near a river",
                "in a field", "on a hill", "by the lake"],
    "inside": ["in a kitchen", "in a restaurant", "in a small house", "in an office"],
}
INDOOR_WORD = {"outside": "outside", "inside": "inside"}


def pick_place(rng, klass):
    if klass == "any":
        klass = rng.choice(["outside", "inside"])
    return klass, rng.choice(PLACES[klass])


def make_group(rng):
    noun, generic, hyper = rng.choice(SUBJECTS)
    adj = rng.choice(ADJECTIVES)
    color = rng.choice(COLORS)
    cloth = rng.choice(CLOTHES)
    action, short, klass = rng.choice(ACTIONS)
    klass, place = pick_place(rng, klass)
    with_cloth = noun != "dog" and rng.random() < 0.7
    subject = f"a {adj} {noun}"
    if with_cloth:
        subject += f" in a {color} {cloth}"
    premise = f"{subject} is {action} {place}"
    hyps = [
        f"a {generic} is {action}",
        f"a {hyper} is {short} {INDOOR_WORD[klass]}",
        f"the {adj} {noun} is {place}",
        f"a {hyper} is {action} {place}",
    ]
    if with_cloth:
        hyps[2] = f"a {noun} is wearing a {color} {cloth}"
    rng.shuffle(hyps)
    return premise, hyps


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--premises", type=int, default=1500)
    ap.add_argument("--seed", type=int, default=2024)
    ap.add_argument("--out", required=True)
    args = ap.parse_args()
    rng = random.Random(args.seed)
    seen = set()
    lines = []
    while len(seen) < args.premises:
        premise, hyps = make_group(rng)
        if premise in seen:
            continue
        seen.add(premise)
        for h in hyps:
            lines.append(f"{premise.capitalize()}.\t{h.capitalize()}.")
    with open(args.out, "w", encoding="utf-8") as fh:
        fh.write("\n".join(lines) + "\n")


if __name__ == "__main__":
    main()
