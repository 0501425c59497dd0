import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from hivt5.corpus import OcrToken, Page
from hivt5.errors import ConfigError, ValidationError
from hivt5.model import HiVt5, HiVt5Config, PageInput, featurize_patches, make_page_input, page_budget
from hivt5.tensor import make_rng, no_grad
from hivt5.training import IGNORE, decoder_arrays, page_inputs
from hivt5.vocab import Vocab

WORDS = [f"w{i}" for i in range(20)] + ["what", "is", "?", "k1", "v1", "v2"]


def small(**kw):
    base = dict(vocab_size=len(Vocab(WORDS)), d_model=16, d_ff=32, n_heads=2, page_tokens=2,
                page_length=64, decoder_length=64, max_pages=6, x_buckets=8, y_buckets=8)
    base.update(kw)
    return HiVt5Config(**base)


def page_of(words, cols=4):
    toks = []
    for i, w in enumerate(words):
        r, c = divmod(i, cols)
        toks.append(OcrToken(w, (c / cols, r / 8, (c + 0.8) / cols, (r + 0.8) / 8)))
    return Page(tuple(toks))


def random_doc(rng, n_pages, vocab, config, n_words=8):
    pages = [page_of([WORDS[int(i)] for i in rng.integers(0, 20, size=n_words)]) for _ in range(n_pages)]
    return page_inputs(vocab, config, "what is k1 ?", pages)


class TestBudget:
    @pytest.mark.parametrize("s,p,m", [(1024, 20, 51), (1024, 1, 1024), (1024, 1024, 1), (7, 2, 3)])
    def test_examples(self, s, p, m):
        assert page_budget(s, p) == m

    def test_zero_pages(self):
        with pytest.raises(ValidationError):
            page_budget(1024, 0)

    @given(st.integers(1, 10**6), st.integers(1, 10**4))
    def test_floor_law(self, s, p):
        m = page_budget(s, p)
        assert m * p <= s < (m + 1) * p


class TestConfig:
    def test_page_tokens_limited_by_budget(self):
        with pytest.raises(ConfigError):
            HiVt5Config(page_tokens=52, decoder_length=1024, max_pages=20)
        HiVt5Config(page_tokens=51, decoder_length=1024, max_pages=20)

    def test_heads_divide_width(self):
        with pytest.raises(ConfigError):
            HiVt5Config(d_model=30, n_heads=4)

    def test_capacity(self):
        assert HiVt5Config(page_length=1024, max_pages=20).encoder_capacity == 20480

    def test_dict_roundtrip(self):
        c = small(page_head="pooled")
        assert HiVt5Config.from_dict(c.to_dict()) == c


class TestPatches:
    def test_count(self):
        assert featurize_patches(np.zeros((64, 64), dtype=np.uint8), 16).shape == (16, 4)

    def test_padding(self):
        assert featurize_patches(np.zeros((20, 33)), 16).shape == (2 * 3, 4)

    def test_constant_image(self):
        f = featurize_patches(np.full((32, 32), 200, dtype=np.uint8), 8)
        np.testing.assert_allclose(f[:, 0], 200 / 255)
        np.testing.assert_allclose(f[:, 1], 0.0, atol=1e-15)
        assert len({(r, c) for r, c in f[:, 2:]}) == 16

    def test_checkerboard_means_match_pixel_loop(self):
        img = (np.indices((48, 48)).sum(axis=0) % 2 * 255).astype(np.uint8)
        img[:13, :7] = 17
        f = featurize_patches(img, 16)
        k = 0
        for pr in range(3):
            for pc in range(3):
                total = 0.0
                for y in range(pr * 16, pr * 16 + 16):
                    for x in range(pc * 16, pc * 16 + 16):
                        total += img[y, x] / 255.0
                assert f[k, 0] == pytest.approx(total / 256, abs=1e-12)
                k += 1

    def test_empty(self):
        with pytest.raises(ValidationError):
            featurize_patches(np.zeros((0, 4)), 2)


class TestPageInput:
    def test_task_token_and_no_boxes_for_question(self):
        vocab = Vocab(WORDS)
        inp = make_page_input(vocab, small(), vocab.encode("what is k1 ?"), page_of(["w1", "w2"]))
        assert inp.question_ids[0] == vocab.qa_id
        assert inp.ocr_boxes.shape == (2, 4)

    def test_ocr_truncated_to_budget(self):
        vocab = Vocab(WORDS)
        cfg = small(page_length=12)
        inp = make_page_input(vocab, cfg, vocab.encode("what is k1 ?"), page_of(["w1"] * 30))
        assert cfg.page_tokens + len(inp) == 12
        assert len(inp.ocr_ids) == 12 - 2 - 5

    def test_mandatory_segments_overflow(self):
        vocab = Vocab(WORDS)
        with pytest.raises(ConfigError):
            make_page_input(vocab, small(page_length=5), vocab.encode("what is k1 ?"), page_of(["w1"]))


class TestForward:
    def test_shapes(self):
        vocab, cfg = Vocab(WORDS), small()
        model = HiVt5(cfg)
        rng = make_rng(0)
        docs = [random_doc(rng, 3, vocab, cfg), random_doc(rng, 1, vocab, cfg)]
        inp, tgt = decoder_arrays([[7, 8], [9]], vocab)
        out = model.forward(docs, inp)
        assert out.answer_logits.shape == (2, 3, cfg.vocab_size)
        assert out.page_logits.shape == (2, cfg.max_pages)
        assert out.memory_length.tolist() == [3 * cfg.page_tokens, cfg.page_tokens]
        assert out.page_present.sum(axis=1).tolist() == [3, 1]

    def test_capacity_structural(self):
        cfg = HiVt5Config(vocab_size=64, d_model=8, d_ff=8, n_heads=2, n_enc_layers=1, n_dec_layers=1,
                          page_tokens=10, page_length=1024, max_pages=20)
        assert cfg.max_pages * cfg.page_tokens <= cfg.decoder_length

    def test_too_many_pages(self):
        vocab, cfg = Vocab(WORDS), small(max_pages=2, decoder_length=8)
        model = HiVt5(cfg)
        doc = random_doc(make_rng(0), 3, vocab, cfg)
        with pytest.raises(ValidationError):
            model.forward([doc], np.array([[vocab.start_id]]))

    def test_pages_encoded_independently(self):
        vocab, cfg = Vocab(WORDS), small()
        model = HiVt5(cfg)
        rng = make_rng(1)
        doc = random_doc(rng, 3, vocab, cfg) + random_doc(rng, 1, vocab, cfg, n_words=3)
        with no_grad():
            together = model.encode_pages(doc).data
            alone = np.stack([model.encode_page(p).data for p in doc])
            reversed_ = model.encode_pages(doc[::-1]).data[::-1]
        np.testing.assert_allclose(together, alone, atol=1e-12)
        np.testing.assert_allclose(together, reversed_, atol=1e-12)

    def test_identical_pages_identical_summaries(self):
        vocab, cfg = Vocab(WORDS), small()
        model = HiVt5(cfg)
        doc = random_doc(make_rng(2), 1, vocab, cfg)
        twin = PageInput(doc[0].question_ids, doc[0].ocr_ids, doc[0].ocr_boxes, None, 5)
        with no_grad():
            k = model.encode_pages([doc[0], twin]).data
        np.testing.assert_array_equal(k[0], k[1])

    def test_zero_head_uniform_over_present_pages(self):
        vocab, cfg = Vocab(WORDS), small()
        model = HiVt5(cfg)
        doc = random_doc(make_rng(3), 4, vocab, cfg)
        out = model.forward([doc], np.array([[vocab.start_id]]))
        probs = np.exp(out.masked_page_logits())
        probs /= probs.sum()
        np.testing.assert_allclose(probs[0, :4], 0.25)
        np.testing.assert_array_equal(probs[0, 4:], 0.0)

    def test_flat_head_initial_page_loss(self):
        vocab, cfg = Vocab(WORDS), small()
        model = HiVt5(cfg)
        rng = make_rng(4)
        docs = [random_doc(rng, 2, vocab, cfg) for _ in range(3)]
        inp, tgt = decoder_arrays([[7]] * 3, vocab)
        _, page = model.losses(model.forward(docs, inp), tgt, np.array([0, 1, 0]))
        assert page.item() == pytest.approx(math.log(cfg.max_pages), rel=1e-12)

    def test_pooled_head_initial_page_loss_two_pages(self):
        vocab, cfg = Vocab(WORDS), small(page_head="pooled")
        model = HiVt5(cfg)
        rng = make_rng(4)
        docs = [random_doc(rng, 2, vocab, cfg) for _ in range(3)]
        inp, tgt = decoder_arrays([[7]] * 3, vocab)
        _, page = model.losses(model.forward(docs, inp), tgt, np.array([0, 1, 0]))
        assert page.item() == pytest.approx(math.log(2), rel=1e-12)

    def test_pooled_head_equivariant_under_page_permutation(self):
        vocab, cfg = Vocab(WORDS), small(page_head="pooled")
        model = HiVt5(cfg)
        model.page_head_w.data[...] = make_rng(5).normal(size=model.page_head_w.shape)
        doc = random_doc(make_rng(6), 5, vocab, cfg)
        perm = [3, 0, 4, 1, 2]
        start = np.array([[vocab.start_id]])
        with no_grad():
            a = model.forward([doc], start).page_logits.data[0, :5]
            b = model.forward([[doc[i] for i in perm]], start).page_logits.data[0, :5]
        np.testing.assert_allclose(b, a[perm], atol=1e-12)

    def test_initial_answer_loss_near_uniform(self):
        vocab, cfg = Vocab(WORDS), small()
        model = HiVt5(cfg)
        rng = make_rng(7)
        docs = [random_doc(rng, 2, vocab, cfg) for _ in range(4)]
        inp, tgt = decoder_arrays([[7, 8, 9]] * 4, vocab)
        answer, _ = model.losses(model.forward(docs, inp), tgt)
        assert answer.item() == pytest.approx(math.log(cfg.vocab_size), rel=0.1)

    def test_freeze_blocks_encoder_gradients(self):
        vocab, cfg = Vocab(WORDS), small()
        model = HiVt5(cfg)
        rng = make_rng(8)
        docs = [random_doc(rng, 2, vocab, cfg)]
        inp, tgt = decoder_arrays([[7, 8]], vocab)
        answer, page = model.losses(model.forward(docs, inp, freeze_encoder=True), tgt, np.array([1]))
        (answer + page).backward()
        for name, p in model.parameters().items():
            if model.is_encoder_param(name):
                assert p.grad is None or not np.any(p.grad), name
        assert np.any(model.decoder[0].cross_attn.q.w.grad)

    def test_ignore_index_positions_do_not_count(self):
        vocab, cfg = Vocab(WORDS), small()
        model = HiVt5(cfg)
        docs = [random_doc(make_rng(9), 1, vocab, cfg)]
        inp, tgt = decoder_arrays([[7, 8]], vocab)
        full, _ = model.losses(model.forward(docs, inp), tgt)
        tgt2 = tgt.copy()
        tgt2[0, 1:] = IGNORE
        part, _ = model.losses(model.forward(docs, inp), tgt2)
        assert part.item() != pytest.approx(full.item())


class TestGenerate:
    def test_memorizes_one_pair_and_is_more_confident_on_it(self):
        from hivt5.training import AdamW

        vocab, cfg = Vocab(WORDS), small()
        model = HiVt5(cfg)
        page = page_of(["w1", "w2", "k1", "v1", "w3", "w4"])
        doc = page_inputs(vocab, cfg, "what is k1 ?", [page])
        inp, tgt = decoder_arrays([vocab.encode("v1")], vocab)
        opt = AdamW(model.parameters(), lr=3e-3, warmup_steps=0)
        for _ in range(60):
            for p in model.parameters().values():
                p.grad = None
            loss, _ = model.losses(model.forward([doc], inp), tgt)
            loss.backward()
            opt.step()
        other = page_inputs(vocab, cfg, "? k1 what is", [page])
        out = model.generate([doc, other], max_len=4, vocab=vocab)
        assert out[0]["answer"] == "v1"
        assert out[0]["page"] == 0
        assert out[0]["confidence"] >= out[1]["confidence"]
        assert out[0]["confidence"] <= 0.0

    def test_deterministic(self):
        vocab, cfg = Vocab(WORDS), small()
        model = HiVt5(cfg)
        docs = [random_doc(make_rng(10), 3, vocab, cfg)]
        assert model.generate(docs, 5, vocab) == model.generate(docs, 5, vocab)


@settings(max_examples=15, deadline=None)
@given(st.integers(1, 6), st.integers(0, 2**16))
def test_memory_length_is_pages_times_tokens(n_pages, seed):
    vocab, cfg = Vocab(WORDS), small()
    model = HiVt5(cfg)
    doc = random_doc(make_rng(seed), n_pages, vocab, cfg)
    with no_grad():
        out = model.forward([doc], np.array([[vocab.start_id]]))
    assert out.memory_length[0] == n_pages * cfg.page_tokens
    assert out.predicted_pages()[0] < n_pages
