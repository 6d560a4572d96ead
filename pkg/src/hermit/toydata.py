"""Deterministic synthetic tri-layer corpus used for smoke runs and tests.

Sentences come from a handful of robot-assistant templates. Vocabulary stays
under 40 tokens, with 4 dialogue-act, 6 frame and 8 frame-element labels.
"""
from __future__ import annotations

import itertools
from importlib import resources

import numpy as np

from .corpus import AnnotatedSentence, parse_conll, serialize_conll

PLACES = [["kitchen"], ["bedroom"], ["starbucks"], ["office"], ["garden"], ["coffee", "shop"]]
FOODS = [["coffee"], ["tea"], ["pizza"], ["water"]]
DEVICES = ["lights", "radio", "tv"]


def _span(label: str, n: int) -> list[str]:
    return [f"B-{label}"] + [f"I-{label}"] * (n - 1)


def _locating(place):
    toks = ["where", "can", "i", "find", *place, "?"]
    n = len(toks) - 1
    return (toks, _span("Req_info", n) + ["O"], _span("Locating", n) + ["O"],
            ["O", "O", "B-Cognizer", "B-Lexical_unit", *_span("Entity", len(place)), "O"])


def _being_located(place):
    toks = ["where", "is", "the", *place, "?"]
    n = len(toks) - 1
    return (toks, _span("Req_info", n) + ["O"], _span("Being_located", n) + ["O"],
            ["O", "B-Lexical_unit", *_span("Theme", 1 + len(place)), "O"])


def _motion(place, manner):
    toks = ["go", "to", "the", *place] + ([manner] if manner else [])
    ar = ["B-Lexical_unit", *_span("Goal", 2 + len(place))] + (["B-Manner"] if manner else [])
    return toks, _span("Instruction", len(toks)), _span("Motion", len(toks)), ar


def _desiring(food, polite):
    toks = ["i", "want", "a" if food[0] == "pizza" else "some", *food] + (["please"] if polite else [])
    ar = ["B-Cognizer", "B-Lexical_unit", *_span("Theme", 1 + len(food))] + (["O"] if polite else [])
    return toks, _span("Inform", len(toks)), _span("Desiring", len(toks)), ar


def _switch(state, device):
    toks = ["turn", state, "the", device]
    return (toks, _span("Instruction", 4), _span("Change_operational_state", 4),
            ["B-Lexical_unit", "O", *_span("Device", 2)])


def _greeting():
    toks = ["hello", "robot"]
    return toks, _span("Opening", 2), _span("Greeting", 2), ["B-Lexical_unit", "B-Location"]


def _with_greeting(parts):
    g = _greeting()
    return tuple(a + b for a, b in zip(g, parts))


def templates():
    out = []
    for place in PLACES:
        out.append(_locating(place))
        out.append(_being_located(place))
        out.append(_with_greeting(_locating(place)))
        out.append(_with_greeting(_being_located(place)))
        for manner in (None, "slowly", "quickly"):
            out.append(_motion(place, manner))
    for food in FOODS:
        for polite in (False, True):
            out.append(_desiring(food, polite))
        out.append(_with_greeting(_desiring(food, False)))
        out.append(_locating(food))
    for state, device in itertools.product(("on", "off"), DEVICES):
        out.append(_switch(state, device))
    out.append(_greeting())
    return out


def toy_corpus(n: int = 64, seed: int = 0) -> list[AnnotatedSentence]:
    pool = {tuple(t[0]): t for t in templates()}
    keys = sorted(pool)
    order = np.random.default_rng(seed).permutation(len(keys))[:n]
    return [AnnotatedSentence(f"toy-{i:03d}", *pool[keys[j]]) for i, j in enumerate(order)]


def bundled_toy_corpus() -> list[AnnotatedSentence]:
    text = resources.files("hermit").joinpath("data/toy.conll").read_text(encoding="utf-8")
    return parse_conll(text)


def bundled_path(name: str = "toy.conll"):
    return resources.files("hermit").joinpath(f"data/{name}")


if __name__ == "__main__":
    print(serialize_conll(toy_corpus()), end="")
