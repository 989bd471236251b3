import math

import pytest

from aiwash.errors import ConfigError, DataError
from aiwash.text import (
    DisclosureDocument,
    base_tfidf,
    builtin_lexicon,
    compile_lexicon,
    compute_corpus_stats,
    dump_documents,
    extract_ai_paragraphs,
    load_documents,
    score_corpus,
    term_counts,
    tokenize,
)


def doc(doc_id, *paragraphs, quarter=0, firm="F1"):
    return DisclosureDocument(doc_id, firm, quarter, "periodic_report", list(paragraphs))


def _oracle(d, terms, corpus):
    """Term loop over contiguous token windows."""
    def count(tokens, term):
        t = term.split()
        return sum(tokens[i:i + len(t)] == t for i in range(len(tokens) - len(t) + 1))

    toks = [tokenize(p) for p in d.paragraphs]
    n = sum(len(t) for t in toks)
    total = 0.0
    for term in terms:
        c = sum(count(t, term) for t in toks)
        df = sum(any(count(tokenize(p), term) for p in other.paragraphs) for other in corpus)
        total += c / n * (math.log((1 + len(corpus)) / (1 + df)) + 1)
    return total


# -- lexicon -----------------------------------------------------------------

def test_case_fold_dedupe():
    lex = compile_lexicon(["Neural Network", "neural  network"])
    assert lex.terms == frozenset({"neural network"})


def test_variant_to_present_term():
    lex = compile_lexicon(["Artificial Intelligence"], [("Intelligent Manufacturing", "artificial intelligence")])
    assert lex.variant_map["intelligent manufacturing"] == "artificial intelligence"


def test_variant_to_absent_term():
    with pytest.raises(ConfigError):
        compile_lexicon(["machine learning"], [("smart factory", "artificial intelligence")])


def test_empty_lexicon():
    with pytest.raises(ConfigError):
        compile_lexicon([])


def test_builtin_lexicons_load():
    ai = builtin_lexicon("ai")
    assert "large language model" in ai.terms
    assert ai.variant_map["intelligent manufacturing"] == "artificial intelligence"
    assert builtin_lexicon("blockchain").theme == "blockchain"


# -- paragraph extraction ----------------------------------------------------

def test_single_match():
    lex = compile_lexicon(["large language model"])
    m = extract_ai_paragraphs(doc("d", "our large language model pipeline"), lex)
    assert len(m) == 1 and m[0].counts == {"large language model": 1}


def test_zero_hit_paragraph_excluded():
    lex = compile_lexicon(["deep learning"])
    m = extract_ai_paragraphs(doc("d", "deep learning here", "nothing relevant", "deeply learning"), lex)
    assert [x.index for x in m] == [0]


def test_variant_counted_under_canonical():
    lex = compile_lexicon(["artificial intelligence"], [("intelligent manufacturing", "artificial intelligence")])
    m = extract_ai_paragraphs(doc("d", "Intelligent Manufacturing lines and artificial intelligence"), lex)
    assert term_counts(m) == {"artificial intelligence": 2}


def test_whole_token_matching():
    lex = compile_lexicon(["ai"])
    assert extract_ai_paragraphs(doc("d", "the maintenance of AI, said ai-driven"), lex)[0].counts == {"ai": 2}


def test_cjk_substring():
    lex = compile_lexicon(["人工智能", "machine learning"], cjk=["人工智能"])
    m = extract_ai_paragraphs(doc("d", "公司推进人工智能与人工智能平台"), lex)
    assert term_counts(m) == {"人工智能": 2}


# -- corpus stats ------------------------------------------------------------

def test_doc_freq_counting():
    lex = compile_lexicon(["computing power", "foundation model"])
    docs = [doc("a", "computing power"), doc("b", "computing power " * 50), doc("c", "other")]
    st = compute_corpus_stats(docs, lex)
    assert st.n_docs == 3
    assert st.doc_freq == {"computing power": 2, "foundation model": 0}


def test_empty_corpus():
    with pytest.raises(DataError):
        compute_corpus_stats([], compile_lexicon(["x"]))


# -- base_tfidf --------------------------------------------------------------

def test_zero_hits_is_zero():
    lex = compile_lexicon(["generative ai"])
    d = doc("d", "no matching words here")
    assert base_tfidf(d, lex, compute_corpus_stats([d], lex)) == 0.0


def test_single_doc_hand_value():
    lex = compile_lexicon(["neural network"])
    # 10 tokens, term twice: tf 0.2, idf ln(2/2) + 1
    d = doc("d", "neural network one two", "three neural network four five six")
    assert d.n_tokens == 10
    assert base_tfidf(d, lex, compute_corpus_stats([d], lex)) == 0.2


def test_matches_term_loop_oracle():
    lex = compile_lexicon(["machine learning", "deep learning", "intelligent agent"])
    corpus = [
        doc("a", "machine learning and deep learning", "we build an intelligent agent"),
        doc("b", "deep learning deep learning", "plain text"),
        doc("c", "unrelated words only"),
        doc("d", "machine learning", "machine learning again", "intelligent agent"),
    ]
    st = compute_corpus_stats(corpus, lex)
    for d in corpus:
        assert base_tfidf(d, lex, st) == pytest.approx(_oracle(d, sorted(lex.terms), corpus), abs=1e-14)


def test_self_concatenation_invariance():
    lex = compile_lexicon(["computing power", "neural network"])
    corpus = [doc("a", "computing power rises", "neural network and computing power"), doc("b", "x y z")]
    st = compute_corpus_stats(corpus, lex)
    for d in corpus:
        assert base_tfidf(d.self_concatenated(), lex, st) == base_tfidf(d, lex, st)


def test_nonnegative_and_zero_iff_no_hit():
    lex = builtin_lexicon("ai")
    corpus = [doc("a", "generative ai tools"), doc("b", "revenue grew"), doc("c", "deep learning " * 3)]
    st = compute_corpus_stats(corpus, lex)
    for d in corpus:
        s = base_tfidf(d, lex, st)
        assert s >= 0
        assert (s == 0) == (not extract_ai_paragraphs(d, lex))


def test_unrelated_doc_never_lowers_idf():
    lex = compile_lexicon(["foundation model", "machine learning"])
    corpus = [doc("a", "foundation model"), doc("b", "machine learning")]
    before = compute_corpus_stats(corpus, lex)
    after = compute_corpus_stats(corpus + [doc("c", "machine learning only")], lex)
    assert after.idf("foundation model") >= before.idf("foundation model")


def test_matched_scope():
    lex = compile_lexicon(["machine learning"])
    d = doc("d", "machine learning x", "a b c d e f")
    st = compute_corpus_stats([d], lex)
    assert base_tfidf(d, lex, st, scope="matched") == pytest.approx(1 / 3)
    assert base_tfidf(d, lex, st) == pytest.approx(1 / 9)


def test_score_corpus_uses_per_quarter_idf():
    lex = compile_lexicon(["machine learning"])
    docs = [doc("a", "machine learning", quarter=1), doc("b", "other", quarter=1),
            doc("c", "machine learning", quarter=2)]
    s = score_corpus(docs, lex)
    assert s.loc[0, "base_tfidf"] == pytest.approx(0.5 * (math.log(3 / 2) + 1))
    assert s.loc[2, "base_tfidf"] == pytest.approx(0.5)


def test_document_round_trip(tmp_path):
    docs = [doc("a", "p1", "p2", quarter=8084), doc("b", "q", quarter=8085, firm="F2")]
    dump_documents(docs, tmp_path / "d.jsonl")
    back = load_documents(tmp_path / "d.jsonl")
    assert [(d.doc_id, d.firm_id, d.quarter, d.paragraphs) for d in back] == \
           [(d.doc_id, d.firm_id, d.quarter, d.paragraphs) for d in docs]


def test_document_needs_paragraphs():
    with pytest.raises(DataError):
        DisclosureDocument("x", "F", 0, "periodic_report", [])
