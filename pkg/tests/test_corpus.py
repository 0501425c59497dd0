import json
from collections import Counter

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from hivt5.corpus import (
    Corpus,
    Document,
    OcrToken,
    Page,
    QASample,
    SyntheticConfig,
    construct_multipage,
    dumps,
    embed_in_long_documents,
    filter_ambiguous,
    from_json,
    generate_synthetic,
    ingest_corpus,
    reading_order,
    shorten_two_pages,
    split_and_trim,
    to_json,
    write_corpus,
)
from hivt5.errors import ConfigError, ValidationError
from hivt5.tensor import make_rng

MINIMAL = {
    "format_version": 1,
    "documents": [{"id": "d0", "pages": [{"tokens": [{"text": "hello", "box": [0.1, 0.1, 0.2, 0.15]}]}]}],
    "samples": [{"question": "what is it ?", "answers": ["hello"], "doc_id": "d0", "answer_page_idx": 0,
                 "split": "train"}],
}


def tiny(**kw):
    base = dict(n_docs=20, pages_range=(2, 4), rows=4, cols=3, seed=0)
    base.update(kw)
    return SyntheticConfig(**base)


def numbered_doc(doc_id, n):
    return Document(doc_id, tuple(Page((OcrToken(f"p{i}", (0, 0, 0.1, 0.1)),)) for i in range(n)))


class TestDataModel:
    def test_bad_box(self):
        with pytest.raises(ValidationError):
            OcrToken("x", (0.5, 0.1, 0.4, 0.2))

    def test_reading_order(self):
        toks = [OcrToken("c", (0.1, 0.5, 0.2, 0.55)), OcrToken("b", (0.6, 0.1, 0.7, 0.15)),
                OcrToken("a", (0.1, 0.11, 0.2, 0.16))]
        assert [t.text for t in reading_order(toks)] == ["a", "b", "c"]

    def test_stats_percentages(self):
        docs = (numbered_doc("a", 1), numbered_doc("b", 3))
        samples = (QASample("q", ("p0",), "a", 0), QASample("q", ("p1",), "b", 1), QASample("q", ("p2",), "b", 2))
        s = Corpus(docs, samples).stats()
        assert s["multi_page_questions_pct"] == pytest.approx(200 / 3)
        assert s["multi_page_questions_pct"] + s["single_page_questions_pct"] == pytest.approx(100.0)


class TestIngest:
    def test_minimal_round_trip(self, tmp_path):
        path = tmp_path / "c.json"
        path.write_text(json.dumps(MINIMAL))
        corpus = ingest_corpus(path)
        assert to_json(corpus) == MINIMAL

    def test_answer_page_out_of_range(self):
        bad = json.loads(json.dumps(MINIMAL))
        bad["samples"][0]["answer_page_idx"] = 1
        with pytest.raises(ValidationError, match=r"samples\[0\]"):
            from_json(bad)

    def test_malformed_record_reports_path(self):
        bad = json.loads(json.dumps(MINIMAL))
        del bad["documents"][0]["pages"][0]["tokens"][0]["box"]
        with pytest.raises(ValidationError, match=r"documents\[0\]"):
            from_json(bad)

    def test_wrong_version(self):
        with pytest.raises(ValidationError, match="format_version"):
            from_json({**MINIMAL, "format_version": 7})

    def test_not_json(self, tmp_path):
        path = tmp_path / "c.json"
        path.write_text("{nope")
        with pytest.raises(ValidationError):
            ingest_corpus(path)

    def test_images_round_trip(self, tmp_path):
        corpus = generate_synthetic(tiny(n_docs=3, with_images=True, image_size=16))
        path = tmp_path / "c.json"
        write_corpus(corpus, path)
        again = ingest_corpus(path)
        assert again == corpus
        assert again.documents[0].pages[0].image.shape == (16, 16)

    def test_generator_output_ingests_for_many_seeds(self):
        for seed in range(100):
            corpus = generate_synthetic(tiny(n_docs=3, seed=seed))
            assert from_json(json.loads(dumps(corpus))) == corpus


class TestGenerator:
    def test_deterministic(self):
        assert dumps(generate_synthetic(tiny(seed=7))) == dumps(generate_synthetic(tiny(seed=7)))
        assert dumps(generate_synthetic(tiny(seed=7))) != dumps(generate_synthetic(tiny(seed=8)))

    def test_extractive_and_keys_unique(self):
        corpus = generate_synthetic(tiny(n_docs=50, qa_per_doc=2))
        for s in corpus.samples:
            words = corpus.doc(s.doc_id).pages[s.answer_page_idx].words
            key = s.question.split()[2]
            i = words.index(key)
            assert words[i + 1] == s.answers[0]
        for d in corpus.documents:
            keys = [w for p in d.pages for w in p.words if w.startswith("k")]
            assert len(keys) == len(set(keys))

    def test_no_decoys_on_answer_pages(self):
        corpus = generate_synthetic(tiny(n_docs=30, decoys_on_answer_pages=False))
        for s in corpus.samples:
            page = corpus.doc(s.doc_id).pages[s.answer_page_idx]
            assert sum(w.startswith("k") for w in page.words) == 1

    def test_key_inventory_too_small(self):
        with pytest.raises(ConfigError):
            generate_synthetic(tiny(n_keys=3, pages_range=(4, 4)))

    def test_pages_range_checked(self):
        with pytest.raises(ConfigError):
            generate_synthetic(tiny(pages_range=(0, 3)))
        with pytest.raises(ConfigError):
            generate_synthetic(tiny(pages_range=(2, 21)))

    def test_answer_page_uniform(self):
        corpus = generate_synthetic(SyntheticConfig(n_docs=2500, qa_per_doc=4, pages_range=(4, 4), rows=4, cols=2,
                                                    decoys_per_page=0, seed=3))
        counts = np.bincount([s.answer_page_idx for s in corpus.samples], minlength=4)
        expected = len(corpus.samples) / 4
        chi2 = float(((counts - expected) ** 2 / expected).sum())
        assert chi2 < 11.345  # chi-square critical value, 3 dof, p = 0.01

    def test_ambiguous_rate(self):
        corpus = generate_synthetic(tiny(n_docs=200, ambiguous_rate=0.5))
        n = sum("document" in s.question for s in corpus.samples)
        assert 60 < n < 140


class TestConstruction:
    def test_short_document_unchanged(self):
        doc = numbered_doc("d", 5)
        corpus = Corpus((doc,), (QASample("q", ("p3",), "d", 3),))
        out = construct_multipage(corpus, make_rng(0))
        assert out.documents == (doc,)
        assert out.samples == corpus.samples

    def test_long_document_cut_to_window(self):
        doc = numbered_doc("d", 30)
        samples = tuple(QASample("q", (f"p{i}",), "d", i) for i in (0, 17, 29))
        out = construct_multipage(Corpus((doc,), samples), make_rng(1))
        assert len(out.documents) == 3
        for s, orig in zip(out.samples, samples):
            pages = out.doc(s.doc_id).pages
            assert len(pages) == 20
            assert pages[s.answer_page_idx] == doc.pages[orig.answer_page_idx]
            order = [int(p.words[0][1:]) for p in pages]
            assert order == sorted(order)

    def test_filter_examples(self):
        qs = ["What is the title of the document?", "What is the date?", "Who signed this documentation?",
              "DOCUMENT number ?", "which documents ?"]
        kept, removed = filter_ambiguous([QASample(q, ("a",), "d", 0) for q in qs])
        assert [s.question for s in removed] == [qs[0], qs[3]]
        assert len(kept) == 3

    def test_split_ratios_and_disjointness(self):
        docs = tuple(numbered_doc(f"d{i}", 1) for i in range(100))
        samples = tuple(QASample("q", ("p0",), f"d{i}", 0) for i in range(100) for _ in range(2))
        out = split_and_trim(Corpus(docs, samples), make_rng(0))
        per_split = {name: {s.doc_id for s in out.samples if s.split == name} for name in ("train", "val", "test")}
        assert [len(v) for v in per_split.values()] == [80, 10, 10]
        assert not (per_split["train"] & per_split["val"] or per_split["train"] & per_split["test"]
                    or per_split["val"] & per_split["test"])
        again = split_and_trim(Corpus(docs, samples), make_rng(0))
        assert again.samples == out.samples

    def test_bad_ratios(self):
        with pytest.raises(ConfigError):
            split_and_trim(Corpus((), ()), make_rng(0), (0.5, 0.2, 0.2))

    def test_two_page_boundaries(self):
        doc = numbered_doc("d", 5)
        pages, idx, chosen = shorten_two_pages(QASample("q", ("a",), "d", 0), doc, make_rng(0))
        assert chosen == (0, 1) and idx == 0
        pages, idx, chosen = shorten_two_pages(QASample("q", ("a",), "d", 4), doc, make_rng(0))
        assert chosen == (3, 4) and idx == 1
        pages, idx, chosen = shorten_two_pages(QASample("q", ("a",), "d", 0), numbered_doc("e", 1), make_rng(0))
        assert chosen == (0,) and idx == 0

    def test_two_page_interior_balance(self):
        doc = numbered_doc("d", 5)
        rng = make_rng(0)
        counts = Counter(shorten_two_pages(QASample("q", ("a",), "d", 2), doc, rng)[2] for _ in range(4000))
        assert set(counts) == {(1, 2), (2, 3)}
        assert abs(counts[(1, 2)] / 4000 - 0.5) < 0.03

    def test_embed_in_long_documents(self):
        base = generate_synthetic(tiny(n_docs=30))
        filler = [p for d in generate_synthetic(tiny(n_docs=60, qa_per_doc=0, seed=9)).documents for p in d.pages]
        long = embed_in_long_documents(base, filler, 12, make_rng(4))
        assert len(long.samples) == len(base.samples)
        for s, orig in zip(long.samples, base.samples):
            pages = long.doc(s.doc_id).pages
            assert len(pages) == 12
            assert pages[s.answer_page_idx] == base.doc(orig.doc_id).pages[orig.answer_page_idx]
            key = s.question.split()[2]
            assert sum(key in p.words for p in pages) == 1

    def test_embed_page_count_checked(self):
        with pytest.raises(ConfigError):
            embed_in_long_documents(Corpus((), ()), [], 21, make_rng(0))


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 10_000), st.integers(1, 6), st.integers(1, 40))
def test_construction_invariants(seed, window, n_pages):
    rng = make_rng(seed)
    docs = (numbered_doc("d", n_pages),)
    samples = tuple(QASample(q, ("x",), "d", int(rng.integers(n_pages)))
                    for q in ("what is it ?", "what is the document ?"))
    built = construct_multipage(Corpus(docs, samples), rng, window)
    kept, _ = filter_ambiguous(built.samples)
    assert all("document" not in s.question for s in kept)
    for s in built.samples:
        assert len(built.doc(s.doc_id).pages) == min(window, n_pages)
        assert 0 <= s.answer_page_idx < len(built.doc(s.doc_id).pages)
