"""Dataset records, instruction templates, task mixtures and few-shot prompts."""

from __future__ import annotations

import json
import math
import re
from collections import Counter
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path
from typing import NamedTuple

import numpy as np

from .tokenizer import BOS, EOS, PAD, VOCAB_SIZE, Encoded, detokenize, tokenize  # noqa: F401

INTENTS = ("INF", "POS", "QUE", "DEN")
INTENT_WORDS = {"INF": "informative", "POS": "positive", "QUE": "questioning", "DEN": "denouncing"}
SPLITS = ("train", "dev", "test")
DIMENSIONS = (
    "offensiveness",
    "target_group",
    "speaker_intent",
    "power_dynamics",
    "implication",
    "emotional_reaction",
    "cognitive_reaction",
)
DIMENSION_TASK = {dim: f"I{i + 1}" for i, dim in enumerate(DIMENSIONS)}
COUNTERSPEECH_TASK = "I8"
TASK_IDS = tuple(f"I{i}" for i in range(1, 9))

BM25_K1 = 1.2
BM25_B = 0.75


class DatasetError(ValueError):
    pass


def resource_path(name: str) -> Path:
    return Path(str(resources.files("coarl") / "resources" / name))


# --------------------------------------------------------------------------
# records


@dataclass
class CSRecord:
    id: str
    hate_speech: str
    intent: str
    counterspeech: str
    target_group: str | None = None
    split: str = "train"
    extra: dict = field(default_factory=dict)

    def __post_init__(self):
        problems = cs_problems(self.__dict__)
        if problems:
            raise DatasetError("; ".join(problems))

    @classmethod
    def from_dict(cls, obj: dict) -> "CSRecord":
        known = {"id", "hate_speech", "intent", "counterspeech", "target_group", "split"}
        extra = {k: v for k, v in obj.items() if k not in known}
        return cls(
            id=str(obj["id"]),
            hate_speech=obj["hate_speech"],
            intent=obj["intent"],
            counterspeech=obj["counterspeech"],
            target_group=obj.get("target_group"),
            split=obj.get("split", "train"),
            extra=extra,
        )

    def to_dict(self) -> dict:
        out = {
            "id": self.id,
            "hate_speech": self.hate_speech,
            "intent": self.intent,
            "counterspeech": self.counterspeech,
            "target_group": self.target_group,
            "split": self.split,
        }
        out.update(self.extra)
        return out


@dataclass
class ExplanationRecord:
    statement: str
    dimension: str
    explanation: str
    extra: dict = field(default_factory=dict)

    def __post_init__(self):
        problems = explanation_problems(self.__dict__)
        if problems:
            raise DatasetError("; ".join(problems))

    @classmethod
    def from_dict(cls, obj: dict) -> "ExplanationRecord":
        known = {"statement", "dimension", "explanation"}
        return cls(
            statement=obj["statement"],
            dimension=obj["dimension"],
            explanation=obj["explanation"],
            extra={k: v for k, v in obj.items() if k not in known},
        )

    def to_dict(self) -> dict:
        out = {"statement": self.statement, "dimension": self.dimension, "explanation": self.explanation}
        out.update(self.extra)
        return out


def _nonempty_str(v):
    return isinstance(v, str) and v.strip() != ""


def cs_problems(obj: dict) -> list:
    problems = []
    for key in ("id", "hate_speech", "intent", "counterspeech"):
        if key not in obj or obj[key] is None:
            problems.append(f"missing field {key!r}")
    if problems:
        return problems
    if not _nonempty_str(obj["hate_speech"]):
        problems.append("empty hate_speech")
    if not _nonempty_str(obj["counterspeech"]):
        problems.append("empty counterspeech")
    if obj["intent"] not in INTENTS:
        problems.append(f"unknown intent {obj['intent']!r} (expected one of {', '.join(INTENTS)})")
    if obj.get("split", "train") not in SPLITS:
        problems.append(f"unknown split {obj.get('split')!r}")
    tg = obj.get("target_group")
    if tg is not None and not isinstance(tg, str):
        problems.append("target_group must be text or null")
    return problems


def explanation_problems(obj: dict) -> list:
    problems = [f"missing field {k!r}" for k in ("statement", "dimension", "explanation") if obj.get(k) is None]
    if problems:
        return problems
    if not _nonempty_str(obj["statement"]):
        problems.append("empty statement")
    if not _nonempty_str(obj["explanation"]):
        problems.append("empty explanation")
    if obj["dimension"] not in DIMENSIONS:
        problems.append(f"unknown dimension {obj['dimension']!r}")
    return problems


# --------------------------------------------------------------------------
# JSONL


class Issue(NamedTuple):
    line: int
    message: str

    def __str__(self):
        return f"line {self.line}: {self.message}"


def load_jsonl(path) -> list:
    """Parse one JSON object per non-blank line; malformed lines raise with their line number."""
    rows = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            if not line.strip():
                continue
            try:
                obj = json.loads(line)
            except json.JSONDecodeError as exc:
                raise DatasetError(f"{path}:{lineno}: malformed JSON: {exc.msg}") from exc
            if not isinstance(obj, dict):
                raise DatasetError(f"{path}:{lineno}: expected a JSON object")
            rows.append(obj)
    return rows


def write_jsonl(path, rows) -> None:
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", encoding="utf-8") as fh:
        for row in rows:
            fh.write(json.dumps(row, ensure_ascii=False, sort_keys=True) + "\n")


def _detect_kind(obj):
    return "explanation" if "dimension" in obj else "counterspeech"


def validate_dataset(path, kind: str | None = None):
    """Return ``(records, issues)``; every bad line is reported, none aborts the scan."""
    records, issues = [], []
    seen_ids = set()
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            if not line.strip():
                continue
            try:
                obj = json.loads(line)
            except json.JSONDecodeError as exc:
                issues.append(Issue(lineno, f"malformed JSON: {exc.msg}"))
                continue
            if not isinstance(obj, dict):
                issues.append(Issue(lineno, "expected a JSON object"))
                continue
            k = kind or _detect_kind(obj)
            problems = cs_problems(obj) if k == "counterspeech" else explanation_problems(obj)
            if k == "counterspeech" and not problems:
                if str(obj["id"]) in seen_ids:
                    problems.append(f"duplicate id {obj['id']!r}")
                seen_ids.add(str(obj["id"]))
            if problems:
                issues.extend(Issue(lineno, p) for p in problems)
                continue
            records.append(CSRecord.from_dict(obj) if k == "counterspeech" else ExplanationRecord.from_dict(obj))
    return records, issues


def load_records(path, kind: str | None = None) -> list:
    records, issues = validate_dataset(path, kind)
    if issues:
        raise DatasetError(f"{path}: {len(issues)} invalid line(s); first: {issues[0]}")
    return records


# --------------------------------------------------------------------------
# instruction templates


def load_templates(path=None) -> dict:
    path = resource_path("templates.json") if path is None else Path(path)
    with open(path, encoding="utf-8") as fh:
        templates = json.load(fh)
    missing = [t for t in TASK_IDS if t not in templates]
    if missing:
        raise DatasetError(f"{path}: template file lacks task ids {missing}")
    return templates


DEFAULT_TEMPLATES = load_templates()


def normalize_task_id(task_id) -> str:
    tid = str(task_id).strip().upper()
    if not tid.startswith("I"):
        tid = "I" + tid
    if tid not in TASK_IDS:
        raise DatasetError(f"unknown task id {task_id!r}")
    return tid


def render_instruction(task_id, hs: str, intent: str | None = None, templates: dict | None = None) -> str:
    tid = normalize_task_id(task_id)
    template = (templates or DEFAULT_TEMPLATES)[tid]
    if tid == COUNTERSPEECH_TASK:
        if intent is None:
            raise DatasetError("task I8 needs an intent")
        if intent not in INTENT_WORDS:
            raise DatasetError(f"unknown intent {intent!r}")
        template = template.replace("{INT}", INTENT_WORDS[intent])
    elif intent is not None:
        raise DatasetError(f"task {tid} takes no intent")
    return template.replace("{HS}", hs)


class PromptSample(NamedTuple):
    task_id: str
    source: str
    target: str


def build_multitask_mixture(explanations, seed: int, epoch: int = 0, mixing: str = "uniform",
                            templates: dict | None = None) -> list:
    """Render every explanation through its dimension's template and shuffle.

    ``mixing="uniform"`` gives each of the seven tasks equal weight by cycling
    smaller tasks up to the size of the largest; ``"proportional"`` keeps each
    record exactly once. Balanced inputs give the same multiset either way.
    """
    by_task = {DIMENSION_TASK[d]: [] for d in DIMENSIONS}
    for rec in explanations:
        by_task[DIMENSION_TASK[rec.dimension]].append(
            PromptSample(DIMENSION_TASK[rec.dimension], render_instruction(DIMENSION_TASK[rec.dimension], rec.statement, templates=templates), rec.explanation)
        )
    empty = [t for t, s in by_task.items() if not s]
    if empty:
        raise DatasetError(f"no explanation records for tasks {empty}")
    rng = np.random.default_rng([seed, epoch])
    samples = []
    if mixing == "uniform":
        target = max(len(s) for s in by_task.values())
        for task in sorted(by_task):
            pool = by_task[task]
            samples.extend(pool[i % len(pool)] for i in range(target))
    elif mixing == "proportional":
        for task in sorted(by_task):
            samples.extend(by_task[task])
    else:
        raise DatasetError(f"unknown mixing mode {mixing!r}")
    order = rng.permutation(len(samples))
    return [samples[i] for i in order]


def counterspeech_samples(records, templates: dict | None = None) -> list:
    return [
        PromptSample(COUNTERSPEECH_TASK, render_instruction(COUNTERSPEECH_TASK, r.hate_speech, r.intent, templates), r.counterspeech)
        for r in records
    ]


# --------------------------------------------------------------------------
# BM25 exemplar selection


def bm25_tokens(text: str) -> list:
    return text.lower().split()


def bm25_scores(query: str, documents, k1: float = BM25_K1, b: float = BM25_B) -> np.ndarray:
    """Okapi BM25 of ``query`` against each document string.

    idf(t) = ln(1 + (N - n_t + 0.5) / (n_t + 0.5)), which stays positive so the
    score never decreases as a query term becomes more frequent in a document.
    """
    docs = [Counter(bm25_tokens(d)) for d in documents]
    n_docs = len(docs)
    if n_docs == 0:
        raise DatasetError("BM25 corpus is empty")
    lengths = np.array([sum(c.values()) for c in docs], dtype=np.float64)
    avgdl = lengths.mean() if lengths.mean() > 0 else 1.0
    df = Counter()
    for c in docs:
        df.update(c.keys())
    scores = np.zeros(n_docs)
    for term in bm25_tokens(query):
        n_t = df.get(term, 0)
        if n_t == 0:
            continue
        idf = math.log(1.0 + (n_docs - n_t + 0.5) / (n_t + 0.5))
        for i, c in enumerate(docs):
            tf = c.get(term, 0)
            if tf:
                scores[i] += idf * tf * (k1 + 1) / (tf + k1 * (1 - b + b * lengths[i] / avgdl))
    return scores


def bm25_select_exemplars(query_hs: str, corpus, n: int) -> list:
    """Top-``n`` records by BM25 over ``hate_speech``; ties go to the smaller id."""
    corpus = list(corpus)
    if not corpus:
        raise DatasetError("BM25 corpus is empty")
    if n > len(corpus):
        raise DatasetError(f"asked for {n} exemplars from a corpus of {len(corpus)}")
    scores = bm25_scores(query_hs, [r.hate_speech for r in corpus])
    order = sorted(range(len(corpus)), key=lambda i: (-scores[i], corpus[i].id))
    return [corpus[i] for i in order[:n]]


# --------------------------------------------------------------------------
# few-shot prompts

DASH = "–"
SECTION = "»»»»"


def load_preamble(path=None) -> str:
    path = resource_path("preamble.txt") if path is None else Path(path)
    return Path(path).read_text(encoding="utf-8").strip()


def build_fewshot_prompt(query_hs: str, intent: str, exemplars=(), preamble: str | None = None) -> str:
    """Preamble, instruction, optional examples block, then the open query."""
    if intent not in INTENT_WORDS:
        raise DatasetError(f"unknown intent {intent!r}")
    label = INTENT_WORDS[intent].capitalize() + " Counterspeech"
    preamble = load_preamble() if preamble is None else preamble
    parts = [
        preamble,
        f"{SECTION} Instruction {SECTION}\n"
        f"Write a {label} replying to the last statement below, following the guidance above.",
    ]
    if exemplars:
        lines = [f"{SECTION} Examples {SECTION}"]
        for ex in exemplars:
            ex_label = INTENT_WORDS[ex.intent].capitalize() + " Counterspeech"
            lines.append(f"Statement {DASH} {ex.hate_speech}")
            lines.append(f"{ex_label} {DASH} {ex.counterspeech}")
        parts.append("\n".join(lines))
    parts.append(f"Statement {DASH} {query_hs}\n{label} {DASH}")
    return "\n\n".join(parts)
