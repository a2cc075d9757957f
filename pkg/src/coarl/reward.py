"""Composite stance / argument-quality / toxicity reward.

``total = ((1 - pc) / 2 + aq + (1 - tox)) / 3``, each term already on [0, 1],
so 1 is the ideal reward. Scorers are plain callables ``score(x, y) -> float``
tagged with a ``kind``; the reference scorers below are deterministic
rule-based stand-ins and :class:`RemoteScorer` talks to an HTTP service.
"""

from __future__ import annotations

import json
import logging
import re
import time
import urllib.error
import urllib.request
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass
from pathlib import Path

from .data import resource_path

log = logging.getLogger(__name__)

RANGES = {"stance": (-1.0, 1.0), "quality": (0.0, 1.0), "toxicity": (0.0, 1.0)}
KINDS = tuple(RANGES)
QUALITY_LENGTH = 40


class RewardError(RuntimeError):
    pass


class ScorerError(RewardError):
    def __init__(self, kind, message, attempts=1):
        super().__init__(f"{kind} scorer failed after {attempts} attempt(s): {message}")
        self.kind = kind
        self.attempts = attempts


@dataclass
class RewardBreakdown:
    pc_raw: float
    aq_raw: float
    tox_raw: float
    pc_norm: float
    aq_term: float
    tox_term: float
    total: float

    def to_dict(self):
        return asdict(self)


def reward_tokens(text: str) -> list:
    """Lowercase alphanumeric words; apostrophes are dropped first (isn't -> isnt)."""
    return re.findall(r"[a-z0-9]+", text.lower().replace("'", "").replace("’", ""))


def load_wordlist(path) -> frozenset:
    path = Path(path)
    if not path.is_file():
        raise FileNotFoundError(f"word list not found: {path}")
    words = (w.strip().lower() for w in path.read_text(encoding="utf-8").splitlines())
    return frozenset(w for w in words if w and not w.startswith("#"))


def _clamp(kind, value):
    lo, hi = RANGES[kind]
    if value < lo or value > hi:
        log.info("clamping %s score %r into [%g, %g]", kind, value, lo, hi)
        return min(max(value, lo), hi)
    return value


def combine(pc_raw: float, aq_raw: float, tox_raw: float) -> RewardBreakdown:
    pc = _clamp("stance", float(pc_raw))
    aq = _clamp("quality", float(aq_raw))
    tox = _clamp("toxicity", float(tox_raw))
    pc_norm = (1.0 - pc) / 2.0
    tox_term = 1.0 - tox
    total = (pc_norm + aq + tox_term) / 3.0
    return RewardBreakdown(pc, aq, tox, pc_norm, aq, tox_term, total)


def _call(kind, scorer, x, y):
    try:
        value = scorer(x, y)
    except ScorerError:
        raise
    except Exception as exc:  # scorer plug-ins may raise anything
        raise ScorerError(kind, repr(exc)) from exc
    try:
        value = float(value)
    except (TypeError, ValueError) as exc:
        raise ScorerError(kind, f"non-numeric score {value!r}") from exc
    if value != value:
        raise ScorerError(kind, "score is NaN")
    return value


def composite_reward(x: str, y: str, scorers: dict) -> RewardBreakdown:
    """Score ``(x, y)`` with one scorer per kind and fold into a breakdown."""
    missing = [k for k in KINDS if k not in scorers]
    if missing:
        raise RewardError(f"missing scorer kind(s): {', '.join(missing)}")
    return combine(
        _call("stance", scorers["stance"], x, y),
        _call("quality", scorers["quality"], x, y),
        _call("toxicity", scorers["toxicity"], x, y),
    )


def score_batch(pairs, scorers: dict, max_workers: int = 1) -> list:
    if max_workers <= 1:
        return [composite_reward(x, y, scorers) for x, y in pairs]
    with ThreadPoolExecutor(max_workers) as pool:
        return list(pool.map(lambda p: composite_reward(p[0], p[1], scorers), pairs))


# --------------------------------------------------------------------------
# reference scorers


class ReferenceToxicity:
    kind = "toxicity"

    def __init__(self, lexicon_path=None):
        self.lexicon = load_wordlist(lexicon_path or resource_path("toxicity_lexicon.txt"))

    def __call__(self, x, y):
        toks = reward_tokens(y)
        if not toks:
            return 0.0
        hits = sum(t in self.lexicon for t in toks)
        return min(1.0, max(0.0, hits / len(toks)))


class ReferenceStance:
    """Signed content overlap: +overlap when ``y`` echoes ``x``, negated by a negation cue."""

    kind = "stance"

    def __init__(self, stopwords_path=None, negations_path=None):
        self.stopwords = load_wordlist(stopwords_path or resource_path("stopwords.txt"))
        self.negations = load_wordlist(negations_path or resource_path("negations.txt"))

    def __call__(self, x, y):
        content_x = {t for t in reward_tokens(x) if t not in self.stopwords}
        if not content_x:
            return 0.0
        y_toks = reward_tokens(y)
        content_y = {t for t in y_toks if t not in self.stopwords}
        overlap = len(content_x & content_y) / len(content_x)
        neg = any(t in self.negations for t in y_toks)
        return (1.0 - 2.0 * neg) * overlap


class ReferenceQuality:
    kind = "quality"

    def __call__(self, x, y):
        toks = reward_tokens(y)
        n = len(toks)
        if n == 0:
            return 0.0
        return min(1.0, n / QUALITY_LENGTH) * (len(set(toks)) / n)


def reference_scorers(lexicon_path=None, stopwords_path=None, negations_path=None) -> dict:
    return {
        "stance": ReferenceStance(stopwords_path, negations_path),
        "quality": ReferenceQuality(),
        "toxicity": ReferenceToxicity(lexicon_path),
    }


def reference_toxicity(y: str, lexicon_path=None) -> float:
    return ReferenceToxicity(lexicon_path)("", y)


def reference_stance(x: str, y: str) -> float:
    return ReferenceStance()(x, y)


def reference_quality(y: str) -> float:
    return ReferenceQuality()("", y)


# --------------------------------------------------------------------------
# remote scorer


class RemoteScorer:
    """POST ``{"topic", "text", "kind"}`` to ``endpoint`` and read ``{"score"}``.

    Timeouts and non-2xx replies are retried ``retries`` times with exponential
    backoff (``backoff * 2**attempt`` seconds). Out-of-range scores are an
    error; no fallback score is ever substituted.
    """

    def __init__(self, endpoint: str, kind: str, timeout: float = 10.0, retries: int = 2, backoff: float = 0.5):
        if kind not in RANGES:
            raise ValueError(f"unknown scorer kind {kind!r}")
        if not endpoint:
            raise ValueError("remote scorer needs an endpoint URL")
        self.endpoint = endpoint
        self.kind = kind
        self.timeout = timeout
        self.retries = retries
        self.backoff = backoff

    def _request(self, x, y):
        body = json.dumps({"topic": x, "text": y, "kind": self.kind}).encode("utf-8")
        req = urllib.request.Request(self.endpoint, data=body, headers={"Content-Type": "application/json"}, method="POST")
        with urllib.request.urlopen(req, timeout=self.timeout) as resp:
            return json.loads(resp.read().decode("utf-8"))

    def __call__(self, x, y):
        last = None
        attempts = 0
        for attempt in range(self.retries + 1):
            attempts = attempt + 1
            try:
                payload = self._request(x, y)
                break
            except urllib.error.HTTPError as exc:
                last = f"HTTP {exc.code}"
            except (urllib.error.URLError, TimeoutError, OSError) as exc:
                last = f"{type(exc).__name__}: {getattr(exc, 'reason', exc)}"
            except json.JSONDecodeError as exc:
                raise ScorerError(self.kind, f"invalid JSON response: {exc}", attempts) from exc
            if attempt < self.retries:
                time.sleep(self.backoff * 2**attempt)
        else:
            raise ScorerError(self.kind, last, attempts)
        if not isinstance(payload, dict) or "score" not in payload:
            raise ScorerError(self.kind, f"response lacks 'score': {payload!r}", attempts)
        try:
            score = float(payload["score"])
        except (TypeError, ValueError) as exc:
            raise ScorerError(self.kind, f"non-numeric score {payload['score']!r}", attempts) from exc
        lo, hi = RANGES[self.kind]
        if not lo <= score <= hi:
            raise ScorerError(self.kind, f"score {score} outside [{lo}, {hi}]", attempts)
        return score


def remote_scorer(endpoint: str, kind: str, **kw) -> RemoteScorer:
    return RemoteScorer(endpoint, kind, **kw)
