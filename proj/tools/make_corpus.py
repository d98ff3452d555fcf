#!/usr/bin/env python3
"""Writes data/corpus.txt: seeded, grammar-generated English-like prose.

The output is original text dedicated to the public domain (CC0).
"""

import random
import sys
import textwrap

NAMES = ["Ada", "Bram", "Cora", "Dell", "Esme", "Finn", "Greta", "Hale", "Ines", "Jory",
         "Kit", "Lena", "Milo", "Nell", "Otto", "Pia", "Quill", "Rosa", "Silas", "Tova"]
PLACES = ["the harbor", "the old mill", "the lighthouse", "the market square", "the orchard",
          "the river road", "the north field", "the bell tower", "the station", "the long bridge",
          "the library", "the salt marsh", "the hill farm", "the ferry landing", "the quarry"]
NOUNS = ["lantern", "letter", "boat", "basket", "map", "clock", "kettle", "rope", "ledger",
         "window", "garden", "wagon", "fiddle", "compass", "blanket", "ladder", "bucket",
         "notebook", "coat", "key", "candle", "net", "barrel", "drum", "kite", "sack of flour"]
ADJS = ["quiet", "narrow", "bright", "heavy", "crooked", "patient", "cold", "golden", "small",
        "tired", "careful", "distant", "restless", "gentle", "wet", "old", "sharp", "empty",
        "warm", "muddy", "steady", "hollow", "green", "pale"]
WEATHER = ["rain came in from the sea", "the wind turned to the east", "fog settled over the water",
           "the sun broke through the clouds", "frost whitened the fences", "a storm gathered in the west",
           "the air grew still and heavy", "snow fell in slow flakes", "the tide ran out past the rocks"]
TIMES = ["At dawn", "Before noon", "In the evening", "Late that night", "On the third day",
         "By the end of the week", "Early in the spring", "When the bells rang", "After supper",
         "Some time later", "That autumn", "Just before dark"]
VERBS_T = ["carried", "mended", "found", "opened", "counted", "painted", "lost", "sold", "borrowed",
           "cleaned", "hid", "traded", "checked", "lifted", "wrapped", "tied", "dropped", "fixed"]
VERBS_I = ["waited", "laughed", "listened", "walked on", "sat down", "hesitated", "slept",
           "worked late", "hummed softly", "looked away", "stood still", "kept going"]
ADVS = ["slowly", "quickly", "carefully", "without a word", "twice", "again", "at last",
        "in silence", "with some effort", "as usual", "for a while", "once more"]
FEELINGS = ["glad", "uneasy", "curious", "certain", "worried", "proud", "hungry", "sure of nothing",
            "amused", "homesick", "hopeful", "annoyed"]
SAYS = ["said", "asked", "whispered", "called", "answered", "muttered", "replied"]
QUESTIONS = ["Where did you put the {n}?", "Have you seen {name} today?", "Is the {n} still at {p}?",
             "Why is the {n} so {a}?", "Will the boat leave before the rain?", "Who left the {n} by the door?",
             "Can we reach {p} before dark?", "What time does the ferry run?"]
REPLIES = ["It is where you left it.", "Not since morning.", "Ask {name}, not me.", "I think so.",
           "Only if we hurry.", "Nobody knows.", "I put it near {p}.", "Give me a moment to think."]
CONNECT = ["and", "but", "so", "while", "because", "although", "until", "after"]


def noun_phrase(r):
    n = r.choice(NOUNS)
    if r.random() < 0.55:
        return f"the {r.choice(ADJS)} {n}"
    return f"the {n}"


def clause(r, name):
    kind = r.random()
    if kind < 0.35:
        return f"{name} {r.choice(VERBS_T)} {noun_phrase(r)} {r.choice(ADVS)}"
    if kind < 0.55:
        return f"{name} {r.choice(VERBS_I)} near {r.choice(PLACES)}"
    if kind < 0.7:
        return f"{name} felt {r.choice(FEELINGS)}"
    if kind < 0.85:
        return r.choice(WEATHER)
    return f"{noun_phrase(r)} was {r.choice(ADJS)} and {r.choice(ADJS)}"


def sentence(r, cast):
    name = r.choice(cast)
    s = clause(r, name)
    if r.random() < 0.45:
        s = f"{s} {r.choice(CONNECT)} {clause(r, r.choice(cast))}"
    if r.random() < 0.3:
        s = f"{r.choice(TIMES)}, {s}"
    return s[0].upper() + s[1:] + "."


def dialogue(r, cast):
    a, b = r.sample(cast, 2)
    fill = dict(n=r.choice(NOUNS), name=r.choice(NAMES), p=r.choice(PLACES), a=r.choice(ADJS))
    q = r.choice(QUESTIONS).format(**fill)
    ans = r.choice(REPLIES).format(**fill)
    return f'"{q}" {a} {r.choice(SAYS)}. "{ans}" {b} {r.choice(SAYS)}.'


def chapter(r, number):
    cast = r.sample(NAMES, 4)
    place = r.choice(PLACES)
    title = f"Chapter {number}: {cast[0]} at {place[4:].title()}"
    paras = [title]
    for _ in range(r.randint(6, 10)):
        parts = []
        for _ in range(r.randint(3, 7)):
            parts.append(dialogue(r, cast) if r.random() < 0.2 else sentence(r, cast))
        paras.append(textwrap.fill(" ".join(parts), width=72))
    return "\n\n".join(paras)


def main():
    out = sys.argv[1] if len(sys.argv) > 1 else "data/corpus.txt"
    target = int(sys.argv[2]) if len(sys.argv) > 2 else 100_000
    r = random.Random(20240611)
    chapters = []
    size = 0
    n = 1
    while size < target:
        c = chapter(r, n)
        chapters.append(c)
        size += len(c) + 2
        n += 1
    text = "\n\n".join(chapters) + "\n"
    assert all(32 <= ord(ch) < 127 or ch == "\n" for ch in text)
    with open(out, "w", encoding="ascii") as f:
        f.write(text)


if __name__ == "__main__":
    main()
