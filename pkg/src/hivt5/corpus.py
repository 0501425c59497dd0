"""Multi-page document QA corpora: data model, JSON I/O, a deterministic
synthetic generator and the dataset-construction steps (page windowing,
ambiguous-question filtering, leakage-free splits, two-page views)."""

from __future__ import annotations

import base64
import json
import re
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .errors import ConfigError, ValidationError
from .tensor import make_rng

FORMAT_VERSION = 1
MAX_PAGES = 20
SPLITS = ("train", "val", "test")


@dataclass(frozen=True)
class OcrToken:
    text: str
    box: tuple[float, float, float, float]

    def __post_init__(self):
        x0, y0, x1, y1 = self.box
        if not (0.0 <= x0 <= x1 <= 1.0 and 0.0 <= y0 <= y1 <= 1.0):
            raise ValidationError(f"token {self.text!r} has invalid box {self.box}")


def reading_order(tokens: Sequence[OcrToken], line_height: float | None = None) -> list[OcrToken]:
    """Sort top-left to bottom-right: by row band (y0 // line_height), then x0.

    ``line_height`` defaults to the median token height.
    """
    tokens = list(tokens)
    if not tokens:
        return tokens
    if line_height is None:
        heights = [t.box[3] - t.box[1] for t in tokens]
        line_height = float(np.median(heights)) or 1e-3
    return sorted(tokens, key=lambda t: (int(t.box[1] // line_height), t.box[0]))


@dataclass(frozen=True, eq=False)
class Page:
    tokens: tuple[OcrToken, ...]
    image: np.ndarray | None = None

    @classmethod
    def from_tokens(cls, tokens: Iterable[OcrToken], image=None) -> "Page":
        return cls(tuple(reading_order(tokens)), None if image is None else np.asarray(image, dtype=np.uint8))

    @property
    def words(self) -> list[str]:
        return [t.text for t in self.tokens]

    def __eq__(self, other) -> bool:
        if not isinstance(other, Page) or self.tokens != other.tokens:
            return False
        if self.image is None or other.image is None:
            return self.image is None and other.image is None
        return np.array_equal(self.image, other.image)

    def __hash__(self):
        return hash(self.tokens)


@dataclass(frozen=True)
class Document:
    id: str
    pages: tuple[Page, ...]


@dataclass(frozen=True)
class QASample:
    question: str
    answers: tuple[str, ...]
    doc_id: str
    answer_page_idx: int
    split: str = "train"


@dataclass(frozen=True)
class Corpus:
    documents: tuple[Document, ...]
    samples: tuple[QASample, ...]
    _index: dict = field(default=None, compare=False, repr=False)

    def __post_init__(self):
        object.__setattr__(self, "_index", {d.id: d for d in self.documents})

    def doc(self, doc_id: str) -> Document:
        return self._index[doc_id]

    def split(self, name: str) -> "Corpus":
        samples = tuple(s for s in self.samples if s.split == name)
        ids = {s.doc_id for s in samples}
        return Corpus(tuple(d for d in self.documents if d.id in ids), samples)

    def stats(self) -> dict:
        n_pages = sum(len(d.pages) for d in self.documents)
        multi = sum(1 for s in self.samples if len(self.doc(s.doc_id).pages) > 1)
        n = len(self.samples)
        return {
            "documents": len(self.documents),
            "pages": n_pages,
            "questions": n,
            "multi_page_questions_pct": 100.0 * multi / n if n else 0.0,
            "single_page_questions_pct": 100.0 * (n - multi) / n if n else 0.0,
        }


def validate(corpus: Corpus, max_pages: int | None = MAX_PAGES) -> None:
    seen = set()
    for i, d in enumerate(corpus.documents):
        if d.id in seen:
            raise ValidationError(f"documents[{i}]: duplicate id {d.id!r}")
        seen.add(d.id)
        if not d.pages:
            raise ValidationError(f"documents[{i}] ({d.id}): no pages")
        if max_pages is not None and len(d.pages) > max_pages:
            raise ValidationError(f"documents[{i}] ({d.id}): {len(d.pages)} pages exceeds {max_pages}")
    for i, s in enumerate(corpus.samples):
        where = f"samples[{i}]"
        if s.doc_id not in seen:
            raise ValidationError(f"{where}: unknown doc_id {s.doc_id!r}")
        if not s.answers:
            raise ValidationError(f"{where}: empty answer list")
        n = len(corpus.doc(s.doc_id).pages)
        if not 0 <= s.answer_page_idx < n:
            raise ValidationError(f"{where}: answer_page_idx {s.answer_page_idx} outside document of {n} pages")
        if s.split not in SPLITS:
            raise ValidationError(f"{where}: unknown split {s.split!r}")


# -- JSON interchange -----------------------------------------------------------------


def to_json(corpus: Corpus) -> dict:
    docs = []
    for d in corpus.documents:
        pages = []
        for p in d.pages:
            entry = {"tokens": [{"text": t.text, "box": list(t.box)} for t in p.tokens]}
            if p.image is not None:
                h, w = p.image.shape
                entry["image"] = {"h": h, "w": w,
                                  "pixels": base64.b64encode(p.image.astype(np.uint8).tobytes()).decode("ascii")}
            pages.append(entry)
        docs.append({"id": d.id, "pages": pages})
    samples = [{"question": s.question, "answers": list(s.answers), "doc_id": s.doc_id,
                "answer_page_idx": s.answer_page_idx, "split": s.split} for s in corpus.samples]
    return {"format_version": FORMAT_VERSION, "documents": docs, "samples": samples}


def from_json(obj: dict, max_pages: int | None = MAX_PAGES) -> Corpus:
    def fail(path, msg):
        raise ValidationError(f"{path}: {msg}")

    if not isinstance(obj, dict):
        fail("$", "top level must be an object")
    if obj.get("format_version") != FORMAT_VERSION:
        fail("$.format_version", f"expected {FORMAT_VERSION}, got {obj.get('format_version')!r}")
    documents = []
    for i, d in enumerate(obj.get("documents", [])):
        path = f"$.documents[{i}]"
        try:
            pages = []
            for j, p in enumerate(d["pages"]):
                tokens = [OcrToken(str(t["text"]), tuple(float(c) for c in t["box"])) for t in p["tokens"]]
                if any(len(t.box) != 4 for t in tokens):
                    fail(f"{path}.pages[{j}]", "box must have 4 coordinates")
                image = None
                if p.get("image") is not None:
                    im = p["image"]
                    raw = np.frombuffer(base64.b64decode(im["pixels"]), dtype=np.uint8)
                    if raw.size != im["h"] * im["w"]:
                        fail(f"{path}.pages[{j}].image", f"{raw.size} bytes for {im['h']}x{im['w']}")
                    image = raw.reshape(im["h"], im["w"]).copy()
                pages.append(Page.from_tokens(tokens, image))
            documents.append(Document(str(d["id"]), tuple(pages)))
        except (KeyError, TypeError, ValueError) as exc:
            if isinstance(exc, ValidationError):
                raise ValidationError(f"{path}: {exc}") from exc
            fail(path, f"malformed record ({exc!r})")
    samples = []
    for i, s in enumerate(obj.get("samples", [])):
        try:
            samples.append(QASample(str(s["question"]), tuple(str(a) for a in s["answers"]), str(s["doc_id"]),
                                    int(s["answer_page_idx"]), str(s.get("split", "train"))))
        except (KeyError, TypeError, ValueError) as exc:
            fail(f"$.samples[{i}]", f"malformed record ({exc!r})")
    corpus = Corpus(tuple(documents), tuple(samples))
    validate(corpus, max_pages)
    return corpus


def ingest_corpus(path, max_pages: int | None = MAX_PAGES) -> Corpus:
    path = Path(path)
    try:
        obj = json.loads(path.read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise ValidationError(f"{path}: not valid JSON ({exc})") from exc
    return from_json(obj, max_pages)


def dumps(corpus: Corpus) -> str:
    return json.dumps(to_json(corpus), separators=(",", ":"))


def write_corpus(corpus: Corpus, path) -> None:
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_text(dumps(corpus), encoding="utf-8")
    tmp.replace(path)


# -- synthetic generator ------------------------------------------------------------------


@dataclass(frozen=True)
class SyntheticConfig:
    """Knobs of the planted key-value generator.

    Pages are ``rows x cols`` word grids of filler words drawn from a sticky
    bigram chain. Each question plants ``<key> <value>`` on one line of a
    uniformly chosen page and asks ``what is <key> ?``. Decoy pairs with other
    keys are planted on other pages; keys are unique within a document.
    """

    n_docs: int = 50
    pages_range: tuple[int, int] = (2, 4)
    rows: int = 8
    cols: int = 4
    n_filler: int = 60
    n_keys: int = 40
    n_values: int = 40
    qa_per_doc: int = 1
    decoys_per_page: int = 1
    decoys_on_answer_pages: bool = True
    ambiguous_rate: float = 0.0
    with_images: bool = False
    image_size: int = 32
    page_limit: int = MAX_PAGES
    seed: int = 0

    @property
    def tokens_per_page(self) -> int:
        return self.rows * self.cols

    def words(self) -> list[str]:
        """Every word the generator can emit (filler, keys, values, question words)."""
        return ([f"w{i:03d}" for i in range(self.n_filler)] + [f"k{i:02d}" for i in range(self.n_keys)]
                + [f"v{i:02d}" for i in range(self.n_values)] + ["what", "is", "?", "of", "the", "document"])


def _layout_box(r: int, c: int, rows: int, cols: int) -> tuple[float, float, float, float]:
    w, h = 1.0 / cols, 1.0 / rows
    return (round(c * w + 0.1 * w, 6), round(r * h + 0.1 * h, 6),
            round(c * w + 0.9 * w, 6), round(r * h + 0.9 * h, 6))


def _render(tokens: Sequence[OcrToken], size: int) -> np.ndarray:
    img = np.full((size, size), 255, dtype=np.uint8)
    for t in tokens:
        x0, y0, x1, y1 = (int(round(c * (size - 1))) for c in t.box)
        img[y0:y1 + 1, x0:x1 + 1] = 40 + (sum(map(ord, t.text)) % 160)
    return img


def generate_synthetic(config: SyntheticConfig) -> Corpus:
    """Deterministic corpus of documents with planted extractive answers."""
    c = config
    lo, hi = c.pages_range
    if not 1 <= lo <= hi <= c.page_limit:
        raise ConfigError(f"pages_range {c.pages_range} must lie within [1, {c.page_limit}]")
    if c.cols < 2:
        raise ConfigError("need at least two columns to plant key-value pairs")
    keys_needed = c.qa_per_doc + c.decoys_per_page * hi
    if keys_needed > c.n_keys:
        raise ConfigError(f"{keys_needed} distinct keys needed per document, vocabulary has {c.n_keys}")
    slots_needed = c.qa_per_doc + c.decoys_per_page
    if slots_needed > c.rows:
        raise ConfigError(f"a page may need {slots_needed} planted lines but has {c.rows} rows")
    rng = make_rng(c.seed)
    filler = [f"w{i:03d}" for i in range(c.n_filler)]
    keys = [f"k{i:02d}" for i in range(c.n_keys)]
    values = [f"v{i:02d}" for i in range(c.n_values)]
    successor = rng.integers(0, c.n_filler, size=c.n_filler)

    documents, samples = [], []
    for di in range(c.n_docs):
        n_pages = int(rng.integers(lo, hi + 1))
        grids = []
        for _ in range(n_pages):
            seq, w = [], int(rng.integers(c.n_filler))
            for _ in range(c.tokens_per_page):
                seq.append(filler[w])
                w = int(successor[w]) if rng.random() < 0.7 else int(rng.integers(c.n_filler))
            grids.append(np.array(seq, dtype=object).reshape(c.rows, c.cols))
        doc_keys = rng.choice(c.n_keys, size=keys_needed, replace=False)
        free_rows = [list(rng.permutation(c.rows)) for _ in range(n_pages)]

        def plant(page: int, key: str, value: str):
            r = int(free_rows[page].pop())
            col = int(rng.integers(0, c.cols - 1))
            grids[page][r, col], grids[page][r, col + 1] = key, value

        doc_id = f"doc{c.seed}-{di:05d}"
        k_iter = iter(doc_keys)
        for _ in range(c.qa_per_doc):
            page = int(rng.integers(n_pages))
            key, value = keys[next(k_iter)], values[int(rng.integers(c.n_values))]
            plant(page, key, value)
            if rng.random() < c.ambiguous_rate:
                question = f"what is the {key} of the document ?"
            else:
                question = f"what is {key} ?"
            samples.append(QASample(question, (value,), doc_id, page))
        answer_pages = {s.answer_page_idx for s in samples if s.doc_id == doc_id}
        for page in range(n_pages):
            if page in answer_pages and not c.decoys_on_answer_pages:
                continue
            for _ in range(c.decoys_per_page):
                plant(page, keys[next(k_iter)], values[int(rng.integers(c.n_values))])
        pages = []
        for g in grids:
            tokens = [OcrToken(str(g[r, col]), _layout_box(r, col, c.rows, c.cols))
                      for r in range(c.rows) for col in range(c.cols)]
            image = _render(tokens, c.image_size) if c.with_images else None
            pages.append(Page(tuple(tokens), image))
        documents.append(Document(doc_id, tuple(pages)))
    corpus = Corpus(tuple(documents), tuple(samples))
    validate(corpus, c.page_limit)
    return corpus


# -- dataset construction -------------------------------------------------------------------


def construct_multipage(corpus: Corpus, rng: np.random.Generator, window: int = MAX_PAGES) -> Corpus:
    """Cut documents longer than ``window`` pages to a random subset of pages
    that keeps the answer page, one document per question.

    Short documents are kept as they are. Long documents become one new
    document per question (id ``<doc>/q<i>``) with the page subset in original
    order and the answer index remapped.
    """
    documents: dict[str, Document] = {}
    samples = []
    for i, s in enumerate(corpus.samples):
        doc = corpus.doc(s.doc_id)
        n = len(doc.pages)
        if n <= window:
            documents.setdefault(doc.id, doc)
            samples.append(s)
            continue
        others = [p for p in range(n) if p != s.answer_page_idx]
        chosen = sorted([s.answer_page_idx, *rng.choice(others, size=window - 1, replace=False).tolist()])
        new_id = f"{doc.id}/q{i}"
        documents[new_id] = Document(new_id, tuple(doc.pages[p] for p in chosen))
        samples.append(replace(s, doc_id=new_id, answer_page_idx=chosen.index(s.answer_page_idx)))
    return Corpus(tuple(documents.values()), tuple(samples))


_AMBIGUOUS = re.compile(r"\bdocument\b", re.IGNORECASE)


def filter_ambiguous(samples: Sequence[QASample]) -> tuple[list[QASample], list[QASample]]:
    """Drop questions containing the whole word "document" (any case)."""
    kept, removed = [], []
    for s in samples:
        (removed if _AMBIGUOUS.search(s.question) else kept).append(s)
    return kept, removed


def filter_corpus(corpus: Corpus) -> tuple[Corpus, list[QASample]]:
    kept, removed = filter_ambiguous(corpus.samples)
    ids = {s.doc_id for s in kept}
    return Corpus(tuple(d for d in corpus.documents if d.id in ids), tuple(kept)), removed


def split_and_trim(corpus: Corpus, rng: np.random.Generator,
                   ratios: tuple[float, float, float] = (0.8, 0.1, 0.1)) -> Corpus:
    """Assign whole documents to train/val/test so no document crosses splits."""
    if len(ratios) != 3 or abs(sum(ratios) - 1.0) > 1e-9 or min(ratios) < 0:
        raise ConfigError(f"split ratios must be three non-negative numbers summing to 1, got {ratios}")
    ids = [d.id for d in corpus.documents]
    order = rng.permutation(len(ids))
    n = len(ids)
    n_train = int(round(ratios[0] * n))
    n_val = min(int(round(ratios[1] * n)), n - n_train)
    assignment = {}
    for rank, i in enumerate(order):
        assignment[ids[i]] = "train" if rank < n_train else "val" if rank < n_train + n_val else "test"
    return Corpus(corpus.documents, tuple(replace(s, split=assignment[s.doc_id]) for s in corpus.samples))


def shorten_two_pages(sample: QASample, document: Document,
                      rng: np.random.Generator) -> tuple[tuple[Page, ...], int, tuple[int, ...]]:
    """Answer page plus one adjacent page, chosen uniformly when both exist.

    Returns the view pages, the remapped answer index and the source page indices.
    """
    n = len(document.pages)
    a = sample.answer_page_idx
    if n == 1:
        chosen = (0,)
    elif a == 0:
        chosen = (0, 1)
    elif a == n - 1:
        chosen = (a - 1, a)
    else:
        chosen = (a - 1, a) if rng.random() < 0.5 else (a, a + 1)
    return tuple(document.pages[i] for i in chosen), chosen.index(a), chosen


def _mentions(page: Page, words: set[str]) -> bool:
    return any(t.text in words for t in page.tokens)


def embed_in_long_documents(corpus: Corpus, filler: Sequence[Page], n_pages: int,
                            rng: np.random.Generator, suffix: str = "long") -> Corpus:
    """Rebuild every sample as an ``n_pages`` document: its answer page at a
    uniformly drawn position, every other slot a filler page.

    Filler pages that contain any word of the question (other than the
    question's function words) are skipped, so the evidence stays unique.
    """
    if not 1 <= n_pages <= MAX_PAGES:
        raise ConfigError(f"n_pages must lie in [1, {MAX_PAGES}], got {n_pages}")
    documents, samples = [], []
    for i, s in enumerate(corpus.samples):
        banned = set(s.question.split()) - {"what", "is", "?", "of", "the"}
        pool = [p for p in filler if not _mentions(p, banned)]
        if len(pool) < n_pages - 1:
            raise ConfigError(f"only {len(pool)} usable filler pages for sample {i}")
        pick = rng.choice(len(pool), size=n_pages - 1, replace=False)
        pos = int(rng.integers(n_pages))
        pages = [pool[j] for j in pick]
        pages.insert(pos, corpus.doc(s.doc_id).pages[s.answer_page_idx])
        doc_id = f"{s.doc_id}/{suffix}{i}"
        documents.append(Document(doc_id, tuple(pages)))
        samples.append(replace(s, doc_id=doc_id, answer_page_idx=pos))
    return Corpus(tuple(documents), tuple(samples))


def two_page_views(corpus: Corpus, rng: np.random.Generator, suffix: str = "2p") -> Corpus:
    """Every sample rebuilt on its own two-page view (see ``shorten_two_pages``)."""
    documents, samples = [], []
    for i, s in enumerate(corpus.samples):
        pages, idx, _ = shorten_two_pages(s, corpus.doc(s.doc_id), rng)
        doc_id = f"{s.doc_id}/{suffix}{i}"
        documents.append(Document(doc_id, pages))
        samples.append(replace(s, doc_id=doc_id, answer_page_idx=idx))
    return Corpus(tuple(documents), tuple(samples))
