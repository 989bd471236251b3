"""Figure-text consistency (exaggeration) scoring.

A deterministic keyword rubric stands in for a vision-language scorer at
desk scale; :class:`ExternalScorer` speaks the JSON wire protocol to a real
one over HTTP or a command pipe. Document scores average over figure pairs,
then over repeated runs.
"""

from __future__ import annotations

import json
import logging
import math
import re
import subprocess
import time
import urllib.error
import urllib.request
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path
from typing import Callable, Mapping, Protocol, Sequence

import numpy as np

from .errors import ConfigError, DataError, ProtocolError, ScorerError

log = logging.getLogger(__name__)

FLAG_NAMES = ("has_architecture_diagram_terms", "has_parameter_spec", "has_quant_benchmark", "is_generic_stock_image")
_NUMBER_RE = re.compile(r"\d+(?:\.\d+)?")


@dataclass
class Rubric:
    w_arch: float = 0.4
    w_param: float = 0.4
    w_bench: float = 0.4
    w_stock: float = 0.2
    architecture_terms: tuple = ()
    parameter_patterns: tuple = ()
    benchmark_metrics: tuple = ()
    stock_terms: tuple = ()

    def __post_init__(self):
        ws = (self.w_arch, self.w_param, self.w_bench, self.w_stock)
        if any(w < 0 or not math.isfinite(w) for w in ws) or sum(ws) > 100:
            raise ConfigError("rubric weights must be finite, nonnegative and bounded")
        self._param_res = [re.compile(p) for p in self.parameter_patterns]

    @classmethod
    def from_dict(cls, doc: Mapping) -> "Rubric":
        unknown = set(doc) - {"weights", "architecture_terms", "parameter_patterns", "benchmark_metrics", "stock_terms"}
        if unknown:
            raise ConfigError(f"unknown rubric key(s): {sorted(unknown)}")
        w = doc.get("weights", {})
        bad = set(w) - {"architecture", "parameters", "benchmark", "stock_image"}
        if bad:
            raise ConfigError(f"unknown rubric weight(s): {sorted(bad)}")
        return cls(
            w_arch=float(w.get("architecture", 0.4)),
            w_param=float(w.get("parameters", 0.4)),
            w_bench=float(w.get("benchmark", 0.4)),
            w_stock=float(w.get("stock_image", 0.2)),
            architecture_terms=tuple(t.casefold() for t in doc.get("architecture_terms", ())),
            parameter_patterns=tuple(doc.get("parameter_patterns", ())),
            benchmark_metrics=tuple(t.casefold() for t in doc.get("benchmark_metrics", ())),
            stock_terms=tuple(t.casefold() for t in doc.get("stock_terms", ())),
        )

    @classmethod
    def load(cls, path=None) -> "Rubric":
        if path is None:
            text = resources.files("aiwash.data").joinpath("rubric.json").read_text(encoding="utf-8")
        else:
            text = Path(path).read_text(encoding="utf-8")
        return cls.from_dict(json.loads(text))

    def extract_flags(self, text: str) -> dict[str, bool]:
        """Evidence flags from caption plus adjacent text."""
        t = " " + " ".join(re.findall(r"[^\W_]+(?:\.\d+)?|%", text.casefold())) + " "
        has_number = bool(_NUMBER_RE.search(t))
        return {
            "has_architecture_diagram_terms": any(f" {a} " in t for a in self.architecture_terms),
            "has_parameter_spec": any(r.search(t) for r in self._param_res),
            "has_quant_benchmark": has_number and any(f" {m} " in t for m in self.benchmark_metrics),
            "is_generic_stock_image": any(f" {s} " in t for s in self.stock_terms),
        }

    def numeric_mentions(self, text: str) -> list[tuple[str, float]]:
        toks = re.findall(r"[^\W_]+(?:\.\d+)?", text.casefold())
        out = []
        joined = " ".join(toks)
        for m in self.benchmark_metrics:
            for hit in re.finditer(rf"(?<!\S){re.escape(m)}(?:\s+\S+){{0,3}}?\s+(\d+(?:\.\d+)?)", joined):
                out.append((m, float(hit.group(1))))
        return out


def default_rubric() -> Rubric:
    return Rubric.load()


@dataclass
class FigureTextPair:
    pair_id: str
    doc_id: str
    caption: str = ""
    adjacent_text: str = ""
    evidence_flags: dict = field(default_factory=dict)
    numeric_mentions: list = field(default_factory=list)
    image_ref: str | None = None

    def __post_init__(self):
        if not (self.caption.strip() or self.adjacent_text.strip()):
            raise DataError(f"figure pair {self.pair_id!r} has neither caption nor adjacent text")
        unknown = set(self.evidence_flags) - set(FLAG_NAMES)
        if unknown:
            raise DataError(f"figure pair {self.pair_id!r}: unknown flag(s) {sorted(unknown)}")

    @property
    def caption_tokens(self):
        from .text import tokenize

        return tokenize(self.caption)

    @property
    def adjacent_text_tokens(self):
        from .text import tokenize

        return tokenize(self.adjacent_text)

    def with_flags(self, rubric: Rubric) -> "FigureTextPair":
        """Copy with evidence flags and numeric mentions (re)derived from text."""
        text = f"{self.caption} \n {self.adjacent_text}"
        return FigureTextPair(self.pair_id, self.doc_id, self.caption, self.adjacent_text,
                              rubric.extract_flags(text), rubric.numeric_mentions(text), self.image_ref)

    @classmethod
    def from_dict(cls, obj: Mapping, doc_id: str | None = None) -> "FigureTextPair":
        return cls(
            pair_id=str(obj["pair_id"]),
            doc_id=str(obj.get("doc_id", doc_id)),
            caption=obj.get("caption", ""),
            adjacent_text=obj.get("adjacent_text", ""),
            evidence_flags=dict(obj.get("evidence_flags", {})),
            numeric_mentions=[tuple(m) for m in obj.get("numeric_mentions", [])],
            image_ref=obj.get("image_ref"),
        )

    def to_dict(self) -> dict:
        out = {"pair_id": self.pair_id, "doc_id": self.doc_id, "caption": self.caption,
               "adjacent_text": self.adjacent_text}
        if self.evidence_flags:
            out["evidence_flags"] = {k: bool(self.evidence_flags[k]) for k in FLAG_NAMES if k in self.evidence_flags}
        if self.numeric_mentions:
            out["numeric_mentions"] = [list(m) for m in self.numeric_mentions]
        if self.image_ref is not None:
            out["image_ref"] = self.image_ref
        return out

    def payload(self) -> dict:
        out = {"pair_id": self.pair_id, "caption": self.caption, "adjacent_text": self.adjacent_text}
        if self.image_ref is not None:
            out["image_ref"] = self.image_ref
        return out


def heuristic_score_pair(pair: FigureTextPair, rubric: Rubric | None = None) -> float:
    """Rubric exaggeration score in [0, 1].

    ``clamp(1 - w_arch*arch - w_param*param - w_bench*bench + w_stock*stock)``
    over the pair's evidence flags; flags missing from the pair are derived
    from its text first.
    """
    rubric = rubric or default_rubric()
    flags = pair.evidence_flags
    if set(FLAG_NAMES) - set(flags):
        flags = {**rubric.extract_flags(f"{pair.caption} \n {pair.adjacent_text}"), **flags}
    raw = (1.0
           - rubric.w_arch * bool(flags["has_architecture_diagram_terms"])
           - rubric.w_param * bool(flags["has_parameter_spec"])
           - rubric.w_bench * bool(flags["has_quant_benchmark"])
           + rubric.w_stock * bool(flags["is_generic_stock_image"]))
    return min(1.0, max(0.0, raw))


# ---------------------------------------------------------------------------
# scorers


class Scorer(Protocol):
    scorer_id: str

    def __call__(self, pair: FigureTextPair) -> float: ...


class RubricScorer:
    def __init__(self, rubric: Rubric | None = None):
        self.rubric = rubric or default_rubric()
        self.scorer_id = "rubric-v1"
        self.deterministic = True

    def __call__(self, pair: FigureTextPair) -> float:
        return heuristic_score_pair(pair, self.rubric)


class HttpTransport:
    """POST the JSON payload to ``url``; the body of the reply is JSON."""

    def __init__(self, url: str):
        self.url = url

    def __call__(self, payload: dict, timeout: float) -> dict:
        req = urllib.request.Request(
            self.url, data=json.dumps(payload).encode("utf-8"),
            headers={"Content-Type": "application/json"}, method="POST",
        )
        try:
            with urllib.request.urlopen(req, timeout=timeout) as resp:
                body = resp.read()
        except (TimeoutError, urllib.error.URLError, OSError) as exc:
            if isinstance(getattr(exc, "reason", None), TimeoutError) or isinstance(exc, TimeoutError):
                raise TimeoutError(str(exc)) from exc
            raise ScorerError(f"transport failure: {exc}") from exc
        try:
            return json.loads(body)
        except ValueError as exc:
            raise ProtocolError(f"non-JSON response: {body[:80]!r}") from exc


class CommandTransport:
    """Run ``argv`` once per call, writing the payload as one JSON line to stdin."""

    def __init__(self, argv: Sequence[str]):
        self.argv = list(argv)

    def __call__(self, payload: dict, timeout: float) -> dict:
        try:
            proc = subprocess.run(self.argv, input=json.dumps(payload) + "\n", capture_output=True,
                                  text=True, timeout=timeout, check=False)
        except subprocess.TimeoutExpired as exc:
            raise TimeoutError(f"command timed out after {timeout}s") from exc
        if proc.returncode != 0:
            raise ScorerError(f"scorer command exited {proc.returncode}: {proc.stderr.strip()[:200]}")
        try:
            return json.loads(proc.stdout.strip().splitlines()[-1])
        except (ValueError, IndexError) as exc:
            raise ProtocolError(f"non-JSON response: {proc.stdout[:80]!r}") from exc


def parse_score(response, pair_id: str, tol: float = 1e-6) -> float:
    if not isinstance(response, Mapping) or "score" not in response:
        raise ProtocolError("response lacks a score field")
    if "pair_id" in response and str(response["pair_id"]) != str(pair_id):
        raise ProtocolError(f"response for pair {response['pair_id']!r}, expected {pair_id!r}")
    score = response["score"]
    if isinstance(score, bool) or not isinstance(score, (int, float)) or not math.isfinite(score):
        raise ProtocolError(f"non-numeric score {score!r}")
    if score < -tol or score > 1 + tol:
        raise ProtocolError(f"score {score} outside [0, 1]")
    return min(1.0, max(0.0, float(score)))


def external_scorer_call(
    payload: dict,
    transport: Callable[[dict, float], dict],
    timeout: float = 30.0,
    retries: int = 3,
    backoff: float = 0.5,
    sleep: Callable[[float], None] = time.sleep,
) -> float:
    """One scored pair from a remote scorer.

    Timeouts and transport failures are retried up to ``retries`` times with
    exponential backoff; protocol violations are raised immediately.
    """
    attempt = 0
    while True:
        try:
            score = parse_score(transport(payload, timeout), payload["pair_id"])
            if attempt:
                log.info("external scorer: pair %s succeeded after %d retr%s", payload["pair_id"], attempt,
                         "y" if attempt == 1 else "ies")
            return score
        except ProtocolError:
            raise
        except (TimeoutError, ScorerError) as exc:
            if attempt >= retries:
                raise ScorerError(f"pair {payload['pair_id']}: giving up after {attempt + 1} attempts ({exc})") from exc
            log.warning("external scorer: pair %s attempt %d failed: %s", payload["pair_id"], attempt + 1, exc)
            sleep(backoff * 2**attempt)
            attempt += 1


class ExternalScorer:
    def __init__(self, transport, timeout: float = 30.0, retries: int = 3, backoff: float = 0.5,
                 scorer_id: str = "external", max_in_flight: int = 4):
        self.transport = transport
        self.timeout = timeout
        self.retries = retries
        self.backoff = backoff
        self.scorer_id = scorer_id
        self.max_in_flight = max_in_flight

    def __call__(self, pair: FigureTextPair) -> float:
        return external_scorer_call(pair.payload(), self.transport, self.timeout, self.retries, self.backoff)

    def score_many(self, pairs: Sequence[FigureTextPair]) -> dict[str, float]:
        with ThreadPoolExecutor(max_workers=max(1, self.max_in_flight)) as pool:
            results = list(pool.map(self, pairs))
        return {p.pair_id: s for p, s in zip(pairs, results)}


# ---------------------------------------------------------------------------
# document aggregation


@dataclass
class ExaggerationScore:
    value: float
    runs: list[float]
    scorer_id: str
    missing_cause: str | None = None

    @property
    def missing(self) -> bool:
        return self.missing_cause is not None


def score_document(pairs: Sequence[FigureTextPair], scorer: Scorer | None = None, runs: int = 3) -> ExaggerationScore:
    """Mean over figure pairs per run, then mean over runs.

    No pairs, or a scorer that keeps failing, gives a missing score with
    its cause recorded.
    """
    if runs < 1:
        raise ValueError("runs must be >= 1")
    scorer = scorer or RubricScorer()
    sid = getattr(scorer, "scorer_id", type(scorer).__name__)
    if not pairs:
        return ExaggerationScore(math.nan, [], sid, "no figure pairs")
    ordered = sorted(pairs, key=lambda p: p.pair_id)
    per_run = []
    # a deterministic scorer gives the same value every run; score once
    n_calls = 1 if getattr(scorer, "deterministic", False) else runs
    for _ in range(n_calls):
        try:
            if hasattr(scorer, "score_many"):
                got = scorer.score_many(ordered)
                vals = [got[p.pair_id] for p in ordered]
            else:
                vals = [scorer(p) for p in ordered]
        except ScorerError as exc:
            return ExaggerationScore(math.nan, per_run, sid, f"scorer failure: {exc}")
        per_run.append(math.fsum(vals) / len(vals))
    per_run = per_run * (runs // n_calls)
    return ExaggerationScore(math.fsum(per_run) / len(per_run), per_run, sid)


def combine_firm_quarter(values: Sequence[float], weights: Sequence[float] | None = None) -> float:
    """Weighted mean over a firm-quarter's documents, skipping missing values."""
    v = np.asarray(values, dtype=float)
    w = np.ones_like(v) if weights is None else np.asarray(weights, dtype=float)
    ok = ~np.isnan(v) & (w > 0)
    if not ok.any():
        return math.nan
    return float(np.sum(v[ok] * w[ok]) / np.sum(w[ok]))


# ---------------------------------------------------------------------------
# validation against annotations


def average_ranks(x) -> np.ndarray:
    """1-based ranks with ties sharing their average rank."""
    x = np.asarray(x, dtype=float)
    order = np.argsort(x, kind="mergesort")
    ranks = np.empty(len(x))
    xs = x[order]
    i = 0
    while i < len(x):
        j = i
        while j + 1 < len(x) and xs[j + 1] == xs[i]:
            j += 1
        ranks[order[i:j + 1]] = (i + j) / 2 + 1
        i = j + 1
    return ranks


def spearman(x, y) -> float:
    """Rank correlation: Pearson correlation of average ranks."""
    x = np.asarray(x, dtype=float)
    y = np.asarray(y, dtype=float)
    if x.shape != y.shape or x.ndim != 1:
        raise DataError("spearman needs two series of equal length")
    if len(x) < 3:
        raise DataError("spearman needs at least 3 observations")
    rx, ry = average_ranks(x), average_ranks(y)
    rx -= rx.mean()
    ry -= ry.mean()
    sxx, syy = float(rx @ rx), float(ry @ ry)
    if sxx == 0 or syy == 0:
        raise DataError("spearman undefined: a series has constant ranks")
    # sqrt of the product keeps identical or mirrored ranks at exactly +-1
    return float(np.clip(float(rx @ ry) / math.sqrt(sxx * syy), -1.0, 1.0))


@dataclass
class AnnotationSet:
    scores: dict[str, float]

    def __post_init__(self):
        for k, v in self.scores.items():
            if not 0 <= v <= 1:
                raise DataError(f"annotation for {k!r} outside [0, 1]")

    @classmethod
    def from_pairs(cls, pairs) -> "AnnotationSet":
        out: dict[str, float] = {}
        for doc_id, s in pairs:
            if doc_id in out:
                raise DataError(f"duplicate annotation for {doc_id!r}")
            out[str(doc_id)] = float(s)
        return cls(out)

    def validate(self, predicted: Mapping[str, float]) -> float:
        keys = sorted(k for k in self.scores if k in predicted and not math.isnan(predicted[k]))
        return spearman([predicted[k] for k in keys], [self.scores[k] for k in keys])
