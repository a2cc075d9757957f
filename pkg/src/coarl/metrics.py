"""Automatic evaluation: ROUGE, METEOR-exact, embedding cosine, category accuracy, toxicity.

Metric tokenization: lowercase, then ``re.findall(r"\\w+|[^\\w\\s]")``, so words
are split on whitespace and every punctuation character is its own token.
"""

from __future__ import annotations

import csv
import io
import json
import logging
import re
from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import kernels
from .data import INTENTS, load_jsonl, render_instruction
from .model import SamplingConfig, generate
from .reward import ReferenceQuality, ReferenceStance, ReferenceToxicity
from .tokenizer import VOCAB_SIZE, detokenize, tokenize

log = logging.getLogger(__name__)

METRICS = ("R1", "R2", "RL", "METEOR", "CosineSim", "CategoryAccuracy", "Toxicity", "PC_ref", "AQ_ref")
_TOKEN_RE = re.compile(r"\w+|[^\w\s]")

INF_CUES = ("in fact", "research", "according to", "studies", "evidence")
DEN_CUES = ("unacceptable", "wrong", "hateful", "harmful", "not okay")


class EvaluationError(ValueError):
    pass


def metric_tokens(text: str) -> list:
    return _TOKEN_RE.findall(text.lower())


def _f1(p, r):
    return 0.0 if p + r == 0 else 2 * p * r / (p + r)


def _ngrams(toks, n):
    return Counter(tuple(toks[i : i + n]) for i in range(len(toks) - n + 1))


def rouge_n(candidate: str, reference: str, n: int = 1) -> float:
    """Clipped n-gram overlap F1."""
    if n < 1:
        raise ValueError("n must be >= 1")
    c, r = _ngrams(metric_tokens(candidate), n), _ngrams(metric_tokens(reference), n)
    nc, nr = sum(c.values()), sum(r.values())
    if nc == 0 or nr == 0:
        return 0.0
    overlap = sum((c & r).values())
    return _f1(overlap / nc, overlap / nr)


def _as_ids(a, b):
    vocab = {}
    ids = [[vocab.setdefault(t, len(vocab)) for t in toks] for toks in (a, b)]
    return ids[0], ids[1]


def rouge_l(candidate: str, reference: str) -> float:
    c, r = metric_tokens(candidate), metric_tokens(reference)
    if not c or not r:
        return 0.0
    lcs = kernels.lcs_length(*_as_ids(c, r))
    return _f1(lcs / len(c), lcs / len(r))


def _align(c, r):
    """Greedy exact unigram alignment as (cand_idx, ref_idx) pairs.

    Each candidate token, left to right, takes the reference position right
    after the previous match when it fits (extending the current chunk),
    otherwise the earliest unused matching reference position.
    """
    positions = {}
    for j, t in enumerate(r):
        positions.setdefault(t, []).append(j)
    used = set()
    pairs = []
    prev = None
    for i, t in enumerate(c):
        cands = [j for j in positions.get(t, ()) if j not in used]
        if not cands:
            continue
        j = prev + 1 if prev is not None and (prev + 1) in cands else cands[0]
        used.add(j)
        pairs.append((i, j))
        prev = j
    return pairs


def _chunks(pairs):
    if not pairs:
        return 0
    n = 1
    for (i0, j0), (i1, j1) in zip(pairs, pairs[1:]):
        if not (i1 == i0 + 1 and j1 == j0 + 1):
            n += 1
    return n


def meteor_simplified(candidate: str, reference: str) -> float:
    """METEOR-exact: ``F = 10PR/(R+9P)`` times ``1 - 0.5*(chunks/m)**3``."""
    c, r = metric_tokens(candidate), metric_tokens(reference)
    pairs = _align(c, r)
    m = len(pairs)
    if m == 0:
        return 0.0
    p, rec = m / len(c), m / len(r)
    f = 10 * p * rec / (rec + 9 * p)
    penalty = 0.5 * (_chunks(pairs) / m) ** 3
    return f * (1 - penalty)


def _embedding_table(model_or_table):
    if model_or_table is None:
        return None
    if isinstance(model_or_table, np.ndarray):
        return model_or_table
    return model_or_table.params["embed"].data


def text_embedding(text: str, model_or_table=None) -> np.ndarray:
    """Mean embedding of the text's bytes; without a table, the normalised byte histogram."""
    ids = tokenize(text).ids
    table = _embedding_table(model_or_table)
    if table is None:
        vec = np.zeros(VOCAB_SIZE)
        if ids:
            np.add.at(vec, ids, 1.0)
            vec /= len(ids)
        return vec
    if not ids:
        return np.zeros(table.shape[1])
    return table[ids].mean(axis=0)


def cosine(a: np.ndarray, b: np.ndarray) -> float:
    na, nb = float(np.sqrt(np.dot(a, a))), float(np.sqrt(np.dot(b, b)))
    if na == 0.0 or nb == 0.0:
        return 0.0
    return float(min(1.0, max(-1.0, float(np.dot(a, b)) / (na * nb))))


def cosine_sim(model, text_a: str, text_b: str) -> float:
    """Cosine of mean token-embedding vectors (``model`` may be a model, a table, or None)."""
    return cosine(text_embedding(text_a, model), text_embedding(text_b, model))


def classify_intent(text: str) -> str:
    """Reference rule classifier: QUE on '?', then INF cues, then DEN cues, else POS."""
    low = text.lower()
    if "?" in text:
        return "QUE"
    if any(c in low for c in INF_CUES):
        return "INF"
    if any(c in low for c in DEN_CUES):
        return "DEN"
    return "POS"


def category_accuracy(generated: str, intended_intent: str, classifier=classify_intent) -> int:
    return int(classifier(generated) == intended_intent)


def corpus_category_accuracy(generated, intents, classifier=classify_intent) -> float:
    hits = [category_accuracy(g, i, classifier) for g, i in zip(generated, intents)]
    return float(np.mean(hits)) if hits else 0.0


# --------------------------------------------------------------------------
# run-level report


@dataclass
class MetricReport:
    samples: list  # dicts with id, intent and one value per metric
    overall: dict
    per_intent: dict
    counts: dict
    columns: tuple = METRICS
    notes: list = field(default_factory=list)

    def table(self) -> str:
        header = ["group", "n"] + list(self.columns)
        rows = [header]
        for intent in self.per_intent:
            rows.append([intent, str(self.counts[intent])] + ["%.4f" % self.per_intent[intent][c] for c in self.columns])
        rows.append(["ALL", str(len(self.samples))] + ["%.4f" % self.overall[c] for c in self.columns])
        widths = [max(len(r[i]) for r in rows) for i in range(len(header))]
        lines = ["  ".join(cell.rjust(w) if k else cell.ljust(w) for k, (cell, w) in enumerate(zip(r, widths))) for r in rows]
        lines.append("PC_ref / AQ_ref / Toxicity use the reference-scorer variants.")
        return "\n".join(lines) + "\n"

    def to_csv(self, path=None) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["group", "n"] + list(self.columns))
        for intent in self.per_intent:
            w.writerow([intent, self.counts[intent]] + [repr(self.per_intent[intent][c]) for c in self.columns])
        w.writerow(["ALL", len(self.samples)] + [repr(self.overall[c]) for c in self.columns])
        text = buf.getvalue()
        if path is not None:
            Path(path).parent.mkdir(parents=True, exist_ok=True)
            Path(path).write_text(text, encoding="utf-8")
        return text


def score_sample(generated: str, reference: str, hate_speech: str, intent: str, embed=None,
                 classifier=classify_intent, scorers=None) -> dict:
    scorers = scorers or _default_scorers()
    return {
        "R1": rouge_n(generated, reference, 1),
        "R2": rouge_n(generated, reference, 2),
        "RL": rouge_l(generated, reference),
        "METEOR": meteor_simplified(generated, reference),
        "CosineSim": cosine_sim(embed, generated, reference),
        "CategoryAccuracy": float(category_accuracy(generated, intent, classifier)),
        "Toxicity": float(scorers["toxicity"](hate_speech, generated)),
        "PC_ref": float(scorers["stance"](hate_speech, generated)),
        "AQ_ref": float(scorers["quality"](hate_speech, generated)),
    }


def _default_scorers():
    return {"stance": ReferenceStance(), "quality": ReferenceQuality(), "toxicity": ReferenceToxicity()}


def _means(rows, columns):
    return {c: float(np.mean([r[c] for r in rows])) if rows else 0.0 for c in columns}


def load_generations(path) -> list:
    rows = load_jsonl(path)
    for n, r in enumerate(rows, 1):
        missing = [k for k in ("id", "generated") if k not in r]
        if missing:
            raise EvaluationError(f"{path}: line {n}: missing field(s) {', '.join(missing)}")
    return rows


def generate_outputs(model, test_set, sampling: SamplingConfig | None = None, max_input: int = 256) -> list:
    """Greedy-decode the rendered I8 prompt for every test record."""
    sampling = sampling or SamplingConfig(max_new_tokens=64)
    limit = min(max_input, model.config.max_seq_len)
    out = []
    for rec in test_set:
        src = tokenize(render_instruction("I8", rec.hate_speech, rec.intent), limit).ids
        ids = generate(model, src, sampling, np.random.default_rng(sampling.seed))
        out.append({"id": rec.id, "intent": rec.intent, "generated": detokenize(ids)})
    return out


def evaluate_run(outputs, test_set, scorers=None, model=None, classifier=classify_intent,
                 sampling: SamplingConfig | None = None) -> MetricReport:
    """Score generations against references.

    ``outputs`` is a generations JSONL path, a list of ``{id, intent, generated}``
    dicts, or None to decode with ``model``. ``model`` also supplies the
    embedding table for CosineSim (byte histograms are used without one).
    """
    test_set = list(test_set)
    if outputs is None:
        if model is None:
            raise EvaluationError("evaluate_run needs either outputs or a model to decode with")
        outputs = generate_outputs(model, test_set, sampling)
    elif isinstance(outputs, (str, Path)):
        outputs = load_generations(outputs)
    by_id = {}
    for o in outputs:
        if o["id"] in by_id:
            raise EvaluationError(f"duplicate output id {o['id']!r}")
        by_id[o["id"]] = o
    test_ids = [r.id for r in test_set]
    missing = sorted(set(test_ids) - set(by_id))
    extra = sorted(set(by_id) - set(test_ids))
    if missing or extra:
        raise EvaluationError(f"id mismatch between outputs and test set: missing={missing} extra={extra}")
    scorers = scorers or _default_scorers()
    notes = []
    if model is None:
        notes.append("CosineSim uses byte-histogram vectors (no model embedding table given)")
    rows = []
    for rec in test_set:
        o = by_id[rec.id]
        if o.get("intent") not in (None, rec.intent):
            raise EvaluationError(f"output {rec.id!r} has intent {o['intent']!r}, test set says {rec.intent!r}")
        vals = score_sample(o["generated"], rec.counterspeech, rec.hate_speech, rec.intent, model, classifier, scorers)
        rows.append({"id": rec.id, "intent": rec.intent, **vals})
    per_intent, counts = {}, {}
    for intent in INTENTS:
        group = [r for r in rows if r["intent"] == intent]
        if group:
            per_intent[intent] = _means(group, METRICS)
            counts[intent] = len(group)
    return MetricReport(rows, _means(rows, METRICS), per_intent, counts, notes=notes)


def write_generations(path, outputs) -> None:
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", encoding="utf-8") as fh:
        for o in outputs:
            fh.write(json.dumps(o, ensure_ascii=False, sort_keys=True) + "\n")
