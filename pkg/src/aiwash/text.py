"""Keyword lexicons, AI-paragraph extraction and TF-IDF keyword density.

Tokens are case-folded runs of letters/digits; each CJK ideograph is its
own token. Multiword lexicon entries match as contiguous token sequences
(leftmost-longest, non-overlapping). Entries flagged ``cjk`` match as raw
substrings of the case-folded paragraph instead.
"""

from __future__ import annotations

import hashlib
import json
import math
import re
from dataclasses import dataclass, field
from functools import cached_property
from importlib import resources
from pathlib import Path
from typing import Iterable, Mapping, Sequence

from .errors import ConfigError, DataError

_TOKEN_RE = re.compile(r"[\u3400-\u4dbf\u4e00-\u9fff]|[^\W_]+")
_WS_RE = re.compile(r"\s+")

DOC_KINDS = ("periodic_report", "presentation")


def tokenize(text: str) -> list[str]:
    return _TOKEN_RE.findall(text.casefold())


def normalize_term(term: str) -> str:
    return _WS_RE.sub(" ", term.casefold()).strip()


@dataclass(frozen=True)
class Lexicon:
    theme: str
    terms: frozenset
    variant_map: Mapping[str, str] = field(default_factory=dict)
    cjk: frozenset = frozenset()

    def __post_init__(self):
        if not self.terms:
            raise ConfigError(f"lexicon {self.theme!r} has no terms")
        bad = {v: t for v, t in self.variant_map.items() if t not in self.terms}
        if bad:
            raise ConfigError(f"variant(s) point at unknown term(s): {bad}")

    @cached_property
    def _surface(self) -> dict[str, str]:
        # surface form (token-joined) -> canonical term
        out = {}
        for t in sorted(self.terms):
            if t not in self.cjk:
                out[" ".join(tokenize(t))] = t
        for v, t in sorted(self.variant_map.items()):
            if v not in self.cjk:
                out[" ".join(tokenize(v))] = t
        return {k: v for k, v in out.items() if k}

    @cached_property
    def _cjk_surface(self) -> list[tuple[str, str]]:
        forms = [(t, t) for t in sorted(self.terms) if t in self.cjk]
        forms += [(v, t) for v, t in sorted(self.variant_map.items()) if v in self.cjk]
        return sorted(forms, key=lambda p: (-len(p[0]), p[0]))

    @cached_property
    def _regex(self):
        forms = sorted(self._surface, key=lambda s: (-len(s), s))
        if not forms:
            return None
        alt = "|".join(re.escape(f) for f in forms)
        return re.compile(rf"(?<!\S)(?:{alt})(?!\S)")

    def count(self, text: str, tokens: Sequence[str] | None = None) -> dict[str, int]:
        """Hit counts per canonical term in one paragraph."""
        counts: dict[str, int] = {}
        if tokens is None:
            tokens = tokenize(text)
        if self._regex is not None and tokens:
            for m in self._regex.findall(" ".join(tokens)):
                t = self._surface[m]
                counts[t] = counts.get(t, 0) + 1
        if self._cjk_surface:
            folded = text.casefold()
            for form, t in self._cjk_surface:
                n = folded.count(form)
                if n:
                    counts[t] = counts.get(t, 0) + n
                    folded = folded.replace(form, " ")
        return counts

    def digest(self) -> str:
        payload = json.dumps(
            {"theme": self.theme, "terms": sorted(self.terms), "variants": sorted(self.variant_map.items()),
             "cjk": sorted(self.cjk)},
            ensure_ascii=False,
        )
        return hashlib.sha256(payload.encode("utf-8")).hexdigest()[:16]


def compile_lexicon(
    entries: Iterable[str],
    variants: Iterable[tuple[str, str]] = (),
    theme: str = "ai",
    cjk: Iterable[str] = (),
) -> Lexicon:
    """Normalize and validate a raw term list and its variant pairs.

    Terms and variants are case-folded with whitespace collapsed, so
    ``"Neural Network"`` and ``"neural  network"`` become one term. Each
    variant must target a term present in ``entries``.
    """
    terms = {normalize_term(e) for e in entries if normalize_term(e)}
    if not terms:
        raise ConfigError("lexicon needs at least one term")
    vmap: dict[str, str] = {}
    for surface, target in variants:
        s, t = normalize_term(surface), normalize_term(target)
        if t not in terms:
            raise ConfigError(f"variant {surface!r} targets unknown term {target!r}")
        if s in terms:
            continue
        vmap[s] = t
    cjk_set = frozenset(normalize_term(c) for c in cjk)
    unknown = cjk_set - terms - set(vmap)
    if unknown:
        raise ConfigError(f"cjk flag on unknown entr(ies): {sorted(unknown)}")
    return Lexicon(theme, frozenset(terms), vmap, cjk_set)


def load_lexicon(path) -> Lexicon:
    """Read a lexicon file.

    JSON object with keys ``theme`` (str), ``terms`` (list of str or
    ``{"term": str, "cjk": bool}``) and ``variants`` (list of
    ``[surface, canonical]`` pairs or ``{"surface", "term", "cjk"}``
    objects). Unknown keys are rejected.
    """
    doc = json.loads(Path(path).read_text(encoding="utf-8"))
    return lexicon_from_dict(doc, source=str(path))


def lexicon_from_dict(doc: Mapping, source: str = "<dict>") -> Lexicon:
    unknown = set(doc) - {"theme", "terms", "variants", "description"}
    if unknown:
        raise ConfigError(f"{source}: unknown lexicon key(s) {sorted(unknown)}")
    entries, cjk, variants = [], [], []
    for item in doc.get("terms", []):
        if isinstance(item, str):
            entries.append(item)
        else:
            entries.append(item["term"])
            if item.get("cjk"):
                cjk.append(item["term"])
    for item in doc.get("variants", []):
        if isinstance(item, Mapping):
            variants.append((item["surface"], item["term"]))
            if item.get("cjk"):
                cjk.append(item["surface"])
        else:
            variants.append((item[0], item[1]))
    return compile_lexicon(entries, variants, theme=doc.get("theme", "ai"), cjk=cjk)


def builtin_lexicon(theme: str = "ai") -> Lexicon:
    """Lexicons shipped with the package: ``ai``, ``blockchain``, ``metaverse``."""
    ref = resources.files("aiwash.data").joinpath(f"lexicon_{theme}.json")
    if not ref.is_file():
        raise ConfigError(f"no built-in lexicon for theme {theme!r}")
    return lexicon_from_dict(json.loads(ref.read_text(encoding="utf-8")), source=f"builtin:{theme}")


# ---------------------------------------------------------------------------
# documents


@dataclass
class DisclosureDocument:
    doc_id: str
    firm_id: str
    quarter: int
    doc_kind: str
    paragraphs: list[str]
    figure_pairs: list = field(default_factory=list)

    def __post_init__(self):
        if not self.paragraphs:
            raise DataError(f"document {self.doc_id!r} has no paragraphs")
        if self.doc_kind not in DOC_KINDS:
            raise DataError(f"document {self.doc_id!r}: unknown doc_kind {self.doc_kind!r}")

    @cached_property
    def tokens(self) -> list[list[str]]:
        return [tokenize(p) for p in self.paragraphs]

    @property
    def n_tokens(self) -> int:
        return sum(len(t) for t in self.tokens)

    def self_concatenated(self) -> "DisclosureDocument":
        return DisclosureDocument(
            self.doc_id, self.firm_id, self.quarter, self.doc_kind,
            self.paragraphs + self.paragraphs, list(self.figure_pairs),
        )


@dataclass
class ParagraphMatch:
    index: int
    text: str
    n_tokens: int
    counts: dict[str, int]


def extract_ai_paragraphs(doc: DisclosureDocument, lex: Lexicon) -> list[ParagraphMatch]:
    """Paragraphs with at least one lexicon hit, with per-term counts."""
    out = []
    for i, (text, toks) in enumerate(zip(doc.paragraphs, doc.tokens)):
        counts = lex.count(text, toks)
        if counts:
            out.append(ParagraphMatch(i, text, len(toks), counts))
    return out


def term_counts(matches: Iterable[ParagraphMatch]) -> dict[str, int]:
    total: dict[str, int] = {}
    for m in matches:
        for t, n in m.counts.items():
            total[t] = total.get(t, 0) + n
    return total


@dataclass
class CorpusStats:
    n_docs: int
    doc_freq: dict[str, int]

    def idf(self, term: str) -> float:
        return math.log((1 + self.n_docs) / (1 + self.doc_freq.get(term, 0))) + 1.0


def compute_corpus_stats(docs: Sequence[DisclosureDocument], lex: Lexicon, matches=None) -> CorpusStats:
    """Document frequencies of canonical terms (variants folded in).

    ``matches`` may carry precomputed :func:`extract_ai_paragraphs` output
    aligned with ``docs`` to avoid rescanning.
    """
    if not docs:
        raise DataError("cannot build corpus statistics from an empty corpus")
    df = {t: 0 for t in sorted(lex.terms)}
    for i, d in enumerate(docs):
        m = matches[i] if matches is not None else extract_ai_paragraphs(d, lex)
        for t in term_counts(m):
            df[t] += 1
    return CorpusStats(len(docs), df)


def base_tfidf(
    doc: DisclosureDocument,
    lex: Lexicon,
    stats: CorpusStats,
    scope: str = "document",
    matches: list[ParagraphMatch] | None = None,
) -> float:
    """TF-IDF keyword density of one document.

    ``sum_t count(t) / n_tokens * (ln((1 + N) / (1 + df_t)) + 1)``. With
    ``scope="matched"`` the denominator counts tokens of matched paragraphs
    only.
    """
    if matches is None:
        matches = extract_ai_paragraphs(doc, lex)
    if scope == "document":
        n = doc.n_tokens
    elif scope == "matched":
        n = sum(m.n_tokens for m in matches)
    else:
        raise ConfigError(f"unknown density scope {scope!r}")
    counts = term_counts(matches)
    if not counts:
        if doc.n_tokens == 0:
            raise DataError(f"document {doc.doc_id!r} has no tokens")
        return 0.0
    if n == 0:
        raise DataError(f"document {doc.doc_id!r} has no tokens")
    return sum(c / n * stats.idf(t) for t, c in sorted(counts.items()))


# ---------------------------------------------------------------------------
# document files


def document_from_dict(obj: Mapping) -> DisclosureDocument:
    from .panel import encode_quarter
    from .exaggeration import FigureTextPair

    pairs = [FigureTextPair.from_dict(p, doc_id=obj["doc_id"]) if isinstance(p, Mapping) else p
             for p in obj.get("figure_pairs", [])]
    return DisclosureDocument(
        doc_id=str(obj["doc_id"]),
        firm_id=str(obj["firm_id"]),
        quarter=encode_quarter(obj["quarter"]),
        doc_kind=obj.get("doc_kind", "periodic_report"),
        paragraphs=list(obj["paragraphs"]),
        figure_pairs=pairs,
    )


def document_to_dict(doc: DisclosureDocument) -> dict:
    from .panel import decode_quarter

    return {
        "doc_id": doc.doc_id,
        "firm_id": doc.firm_id,
        "quarter": decode_quarter(doc.quarter),
        "doc_kind": doc.doc_kind,
        "paragraphs": doc.paragraphs,
        "figure_pairs": [p.to_dict() if hasattr(p, "to_dict") else p for p in doc.figure_pairs],
    }


def load_documents(path) -> list[DisclosureDocument]:
    """Load documents from a directory of ``*.json`` files or a ``.jsonl`` bundle."""
    path = Path(path)
    if path.is_dir():
        objs = [json.loads(p.read_text(encoding="utf-8")) for p in sorted(path.glob("*.json"))]
    else:
        with open(path, encoding="utf-8") as fh:
            objs = [json.loads(line) for line in fh if line.strip()]
    docs = [document_from_dict(o) for o in objs]
    seen = set()
    for d in docs:
        key = (d.firm_id, d.quarter, d.doc_kind, d.doc_id)
        if key in seen:
            raise DataError(f"duplicate document key {key}")
        seen.add(key)
    return docs


def dump_documents(docs: Iterable[DisclosureDocument], path) -> None:
    path = Path(path)
    lines = [json.dumps(document_to_dict(d), ensure_ascii=False, sort_keys=True) for d in docs]
    from .panel import write_atomic

    write_atomic(path, "\n".join(lines) + "\n")


def score_corpus(docs: Sequence[DisclosureDocument], lex: Lexicon, scope: str = "document"):
    """Base_TFIDF for every document with IDF from its own quarter's corpus.

    Returns a DataFrame with one row per document: identifiers, token and
    hit counts, ``has_hit`` and ``base_tfidf``.
    """
    import pandas as pd

    matches = [extract_ai_paragraphs(d, lex) for d in docs]
    by_q: dict[int, list[int]] = {}
    for i, d in enumerate(docs):
        by_q.setdefault(d.quarter, []).append(i)
    scores = [0.0] * len(docs)
    for q in sorted(by_q):
        idx = by_q[q]
        stats = compute_corpus_stats([docs[i] for i in idx], lex, [matches[i] for i in idx])
        for i in idx:
            scores[i] = base_tfidf(docs[i], lex, stats, scope=scope, matches=matches[i])
    return pd.DataFrame({
        "doc_id": [d.doc_id for d in docs],
        "firm_id": [d.firm_id for d in docs],
        "quarter": [d.quarter for d in docs],
        "doc_kind": [d.doc_kind for d in docs],
        "n_tokens": [d.n_tokens for d in docs],
        "n_hits": [sum(term_counts(m).values()) for m in matches],
        "has_hit": [bool(m) for m in matches],
        "base_tfidf": scores,
    })
