"""Synthetic editing corpora with known ground truth, for offline evaluation.

Subjects and answers are made-up words, so the mock base model cannot
know them, and every subject is unique, so edits never collide.
"""

from __future__ import annotations

import random
import re
from dataclasses import dataclass, field

from .augmenter import Edit
from .backends import ScriptedBackend
from .evaluator import EvalRecord
from .retrieval import OracleFilter

_ONSETS = ["b", "d", "f", "g", "k", "l", "m", "n", "p", "r", "s", "t", "v", "z", "br", "kr", "st", "tr", "gl", "sp"]
_VOWELS = ["a", "e", "i", "o", "u", "ae", "io", "ou"]
_CODAS = ["", "n", "r", "s", "th", "x", "l", "m"]


@dataclass(frozen=True)
class Relation:
    name: str
    query: str
    declarative: str
    paraphrases: tuple[str, str, str]
    reversed: str
    paraphrase_probe: str  # same fact, worded differently from the edit query
    reverse_probe: str  # asks from the answer's side


RELATIONS = (
    Relation(
        "capital",
        "What is the capital of {s}?",
        "The capital of {s} is {a}.",
        ("{s} has {a} as its seat of government.", "{a} serves as the capital city of {s}.", "The government of {s} sits in {a}."),
        "{a} is the capital of {s}.",
        "In which city does the government of {s} sit?",
        "{a} is the capital of which place?",
    ),
    Relation(
        "founder",
        "Who founded {s}?",
        "{s} was founded by {a}.",
        ("The founder of {s} is {a}.", "{a} established {s}.", "{s} owes its creation to {a}."),
        "{a} is the person who founded {s}.",
        "Which person established {s}?",
        "What did {a} found?",
    ),
    Relation(
        "year",
        "What year was {s} made?",
        "The year {s} was made is {a}.",
        ("{s} was produced in the year {a}.", "The production year of {s} is {a}.", "In {a}, {s} was made."),
        "{a} is the year {s} was made.",
        "When was {s} produced?",
        "What was made in the year {a}?",
    ),
    Relation(
        "language",
        "Which language is spoken in {s}?",
        "The language spoken in {s} is {a}.",
        ("People in {s} speak {a}.", "{a} is the tongue of the people of {s}.", "The inhabitants of {s} talk in {a}."),
        "{a} is the language spoken in {s}.",
        "What do the people of {s} speak?",
        "Where is {a} the spoken language?",
    ),
)

_LOCALITY = (
    "Describe the weather in {w} during spring.",
    "How many legs does a {w} beetle have?",
    "Name a famous painting kept in {w}.",
    "What sport is popular among students of {w}?",
)


def make_word(rng: random.Random, syllables: int) -> str:
    word = "".join(rng.choice(_ONSETS) + rng.choice(_VOWELS) + rng.choice(_CODAS) for _ in range(syllables))
    return word.capitalize()


@dataclass
class SyntheticCorpus:
    records: list[EvalRecord]
    relations: dict[str, Relation]
    subjects: dict[str, str]
    relevant: dict[str, set[str]] = field(default_factory=dict)

    def oracle_filter(self) -> OracleFilter:
        return OracleFilter({q: frozenset(ids) for q, ids in self.relevant.items()})

    def probe(self, edit_id: str, kind: str) -> str:
        """A query of class ``edit``, ``paraphrase`` or ``reverse`` about one edit."""
        record = next(r for r in self.records if r.id == edit_id)
        rel, s, a = self.relations[edit_id], self.subjects[edit_id], record.edit.answer
        if kind == "edit":
            return record.edit.query
        if kind == "paraphrase":
            return rel.paraphrase_probe.format(s=s, a=a)
        if kind == "reverse":
            return rel.reverse_probe.format(s=s, a=a)
        raise ValueError(f"unknown probe kind {kind!r}")

    def forms(self, edit_id: str) -> dict[str, list[str]]:
        rel = self.relations[edit_id]
        record = next(r for r in self.records if r.id == edit_id)
        s, a = self.subjects[edit_id], record.edit.answer
        return {
            "declarative": [rel.declarative.format(s=s, a=a)],
            "paraphrased": [p.format(s=s, a=a) for p in rel.paraphrases],
            "reversed": [rel.reversed.format(s=s, a=a)],
        }

    def augmentation_backend(self) -> ScriptedBackend:
        """A stand-in augmentation LLM replying with this corpus' known forms."""
        by_pair = {(r.edit.query, r.edit.answer): r.id for r in self.records}

        def reply(prompt: str) -> str:
            questions = re.findall(r"^Question: (.*)$", prompt, flags=re.M)
            answers = re.findall(r"^Answer: (.*)$", prompt, flags=re.M)
            edit_id = by_pair[(questions[-1], answers[-1])]
            forms = self.forms(edit_id)
            tail = prompt.rstrip().splitlines()[-1]
            if tail.startswith("Paraphrases"):
                return "\n".join(f"{i}. {p}" for i, p in enumerate(forms["paraphrased"], start=1))
            if tail.startswith("Reversed"):
                return forms["reversed"][0]
            return forms["declarative"][0]

        return ScriptedBackend(reply, name="augmenter")


def make_corpus(n: int, seed: int = 0, locality_per_record: int = 1, portability: bool = True) -> SyntheticCorpus:
    rng = random.Random(seed)
    used: set[str] = set()

    def fresh(syllables: int) -> str:
        while True:
            word = make_word(rng, syllables)
            if word not in used:
                used.add(word)
                return word

    records, relations, subjects, relevant = [], {}, {}, {}
    for i in range(n):
        rel = RELATIONS[i % len(RELATIONS)]
        subject, answer = fresh(3), fresh(2)
        edit_id = f"syn-{i:04d}"
        query = rel.query.format(s=subject)
        loc = tuple(rng.choice(_LOCALITY).format(w=fresh(3)) for _ in range(locality_per_record))
        port = ((rel.paraphrase_probe.format(s=subject), answer),) if portability else ()
        records.append(EvalRecord(Edit(edit_id, query, answer, i + 1), loc, port))
        relations[edit_id] = rel
        subjects[edit_id] = subject
        relevant.setdefault(query, set()).add(edit_id)
        for q, _ in port:
            relevant.setdefault(q, set()).add(edit_id)
    return SyntheticCorpus(records, relations, subjects, relevant)
