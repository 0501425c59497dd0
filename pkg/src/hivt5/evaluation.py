"""Answer and page metrics, the four evaluation setups, per-position breakdowns
and encoder attention dumps."""

from __future__ import annotations

import csv
import json
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .corpus import Corpus, OcrToken, Page
from .errors import ValidationError
from .model import HiVt5, make_page_input
from .tensor import no_grad
from .training import page_inputs
from .vocab import Vocab

SETUPS = ("oracle", "concat", "max_conf", "hierarchical")

REPORT_SCHEMA = {
    "type": "object",
    "required": ["setup", "budget", "n_samples", "accuracy", "anls", "page_accuracy", "breakdown"],
    "properties": {
        "setup": {"enum": list(SETUPS)},
        "budget": {"type": "integer", "minimum": 1},
        "n_samples": {"type": "integer", "minimum": 0},
        "accuracy": {"type": "number", "minimum": 0, "maximum": 1},
        "anls": {"type": "number", "minimum": 0, "maximum": 1},
        "page_accuracy": {"type": "number", "minimum": 0, "maximum": 1},
        "breakdown": {
            "type": "array",
            "items": {
                "type": "object",
                "required": ["answer_page", "n", "accuracy", "anls", "page_accuracy"],
                "properties": {
                    "answer_page": {"type": "integer", "minimum": 0},
                    "n": {"type": "integer", "minimum": 1},
                    "accuracy": {"type": "number", "minimum": 0, "maximum": 1},
                    "anls": {"type": "number", "minimum": 0, "maximum": 1},
                    "page_accuracy": {"type": "number", "minimum": 0, "maximum": 1},
                },
            },
        },
    },
}


# -- string metrics ----------------------------------------------------------------------------


def normalize(text: str) -> str:
    """Lowercase, trim and collapse runs of whitespace."""
    return " ".join(text.lower().split())


def levenshtein(a: str, b: str) -> int:
    if len(a) < len(b):
        a, b = b, a
    prev = list(range(len(b) + 1))
    for i, ca in enumerate(a, 1):
        cur = [i]
        for j, cb in enumerate(b, 1):
            cur.append(min(prev[j] + 1, cur[j - 1] + 1, prev[j - 1] + (ca != cb)))
        prev = cur
    return prev[-1]


def similarity(prediction: str, truth: str) -> float:
    p, t = normalize(prediction), normalize(truth)
    longest = max(len(p), len(t))
    return 1.0 if longest == 0 else 1.0 - levenshtein(p, t) / longest


def anls_sample(prediction: str, truths: Sequence[str], tau: float = 0.5) -> float:
    best = max(similarity(prediction, t) for t in truths)
    return best if best >= tau else 0.0


def anls(predictions: Sequence[str], truth_sets: Sequence[Sequence[str]], tau: float = 0.5) -> float:
    if len(predictions) != len(truth_sets):
        raise ValidationError(f"{len(predictions)} predictions for {len(truth_sets)} truth sets")
    if not predictions:
        return 0.0
    return float(np.mean([anls_sample(p, t, tau) for p, t in zip(predictions, truth_sets)]))


def exact_match(prediction: str, truths: Sequence[str]) -> bool:
    p = normalize(prediction)
    return any(p == normalize(t) for t in truths)


def exact_accuracy(predictions: Sequence[str], truth_sets: Sequence[Sequence[str]]) -> float:
    if len(predictions) != len(truth_sets):
        raise ValidationError(f"{len(predictions)} predictions for {len(truth_sets)} truth sets")
    if not predictions:
        return 0.0
    return float(np.mean([exact_match(p, t) for p, t in zip(predictions, truth_sets)]))


def page_accuracy(predicted: Sequence[int], true: Sequence[int]) -> float:
    if len(predicted) != len(true):
        raise ValidationError(f"{len(predicted)} predicted pages for {len(true)} targets")
    if not len(true):
        return 0.0
    return float(np.mean(np.asarray(predicted) == np.asarray(true)))


# -- reports -----------------------------------------------------------------------------------


@dataclass
class MetricReport:
    setup: str
    budget: int
    n_samples: int
    accuracy: float
    anls: float
    page_accuracy: float
    breakdown: list[dict] = field(default_factory=list)

    def to_dict(self) -> dict:
        return asdict(self)


def breakdown_by_answer_page(results: Sequence[dict]) -> list[dict]:
    groups: dict[int, list[dict]] = {}
    for r in results:
        groups.setdefault(int(r["true_page"]), []).append(r)
    rows = []
    for page in sorted(groups):
        g = groups[page]
        rows.append({
            "answer_page": page,
            "n": len(g),
            "accuracy": float(np.mean([r["correct"] for r in g])),
            "anls": float(np.mean([r["anls"] for r in g])),
            "page_accuracy": float(np.mean([r["page_correct"] for r in g])),
        })
    return rows


def confusion_answer_vs_page(results: Sequence[dict]) -> dict[tuple[bool, bool], int]:
    """Counts keyed by (answer correct, page correct). The (True, False) cell
    holds answers produced without locating the evidence page."""
    counts = {(a, p): 0 for a in (True, False) for p in (True, False)}
    for r in results:
        counts[(bool(r["correct"]), bool(r["page_correct"]))] += 1
    return counts


def summarize(results: Sequence[dict], setup: str, budget: int) -> MetricReport:
    n = len(results)
    mean = (lambda key: float(np.mean([r[key] for r in results]))) if n else (lambda key: 0.0)
    return MetricReport(setup, budget, n, mean("correct"), mean("anls"), mean("page_correct"),
                        breakdown_by_answer_page(results))


# -- setups ------------------------------------------------------------------------------------


def merge_pages(pages: Sequence[Page], budget: int) -> tuple[Page, list[int]]:
    """All pages' OCR in reading order as one page, cut at ``budget`` tokens,
    with the source page of every kept token."""
    tokens: list[OcrToken] = []
    source: list[int] = []
    for i, p in enumerate(pages):
        for t in p.tokens:
            if len(tokens) == budget:
                return Page(tuple(tokens)), source
            tokens.append(t)
            source.append(i)
    return Page(tuple(tokens)), source


def _find(words: Sequence[str], needle: Sequence[str]) -> int:
    n = len(needle)
    if n == 0:
        return -1
    for i in range(len(words) - n + 1):
        if list(words[i:i + n]) == list(needle):
            return i
    return -1


def _generate_all(model: HiVt5, vocab: Vocab, docs: list, max_len: int, batch_size: int,
                  workers: int) -> list[dict]:
    chunks = [docs[i:i + batch_size] for i in range(0, len(docs), batch_size)]

    def run(chunk):
        with no_grad():
            return model.generate(chunk, max_len, vocab)

    if workers > 1 and len(chunks) > 1:
        with ThreadPoolExecutor(workers) as pool:
            parts = list(pool.map(run, chunks))
    else:
        parts = [run(c) for c in chunks]
    return [r for part in parts for r in part]


def evaluate(model: HiVt5, vocab: Vocab, corpus: Corpus, setup: str = "hierarchical", budget: int = 1024,
             max_len: int = 8, batch_size: int = 32, workers: int = 1) -> tuple[MetricReport, list[dict]]:
    """Run one setup over every sample of ``corpus``.

    oracle: only the annotated answer page is given; its index is the predicted page.
    concat: all pages merged into one page of at most ``budget`` OCR tokens; the
      predicted page is the source page of the first occurrence of the generated
      answer, falling back to the page head when the answer is not found.
    max_conf: each page answered alone; the answer with the highest mean token
      log-probability wins and its page is the predicted page.
    hierarchical: the native multi-page forward pass and page head.
    """
    if setup not in SETUPS:
        raise ValidationError(f"unknown setup {setup!r}; choose from {', '.join(SETUPS)}")
    if budget < 1:
        raise ValidationError("budget must be at least 1")
    cfg = model.config
    samples = list(corpus.samples)
    docs, meta = [], []
    for si, s in enumerate(samples):
        pages = corpus.doc(s.doc_id).pages
        q = vocab.encode(s.question)
        if setup == "oracle":
            docs.append([make_page_input(vocab, cfg, q, pages[s.answer_page_idx])])
            meta.append((si, None))
        elif setup == "concat":
            merged, source = merge_pages(pages, budget)
            docs.append([make_page_input(vocab, cfg, q, merged)])
            meta.append((si, (merged, source)))
        elif setup == "max_conf":
            for pi, page in enumerate(pages):
                docs.append([make_page_input(vocab, cfg, q, page)])
                meta.append((si, pi))
        else:
            docs.append(page_inputs(vocab, cfg, s.question, pages))
            meta.append((si, None))
    outputs = _generate_all(model, vocab, docs, max_len, batch_size, workers)

    chosen: dict[int, tuple[str, int, float]] = {}
    for (si, extra), out in zip(meta, outputs):
        s = samples[si]
        if setup == "oracle":
            chosen[si] = (out["answer"], s.answer_page_idx, out["confidence"])
        elif setup == "concat":
            merged, source = extra
            pos = _find(merged.words, out["answer"].split())
            page = source[pos] if pos >= 0 else out["page"]
            chosen[si] = (out["answer"], page, out["confidence"])
        elif setup == "max_conf":
            if si not in chosen or out["confidence"] > chosen[si][2]:
                chosen[si] = (out["answer"], extra, out["confidence"])
        else:
            chosen[si] = (out["answer"], out["page"], out["confidence"])

    results = []
    for si, s in enumerate(samples):
        answer, page, conf = chosen[si]
        results.append({
            "index": si,
            "doc_id": s.doc_id,
            "question": s.question,
            "prediction": answer,
            "answers": list(s.answers),
            "true_page": s.answer_page_idx,
            "pred_page": int(page),
            "confidence": conf,
            "correct": exact_match(answer, s.answers),
            "anls": anls_sample(answer, s.answers),
            "page_correct": int(page) == s.answer_page_idx,
        })
    return summarize(results, setup, budget), results


# -- files -------------------------------------------------------------------------------------


def write_breakdown_csv(rows: Sequence[dict], path) -> None:
    with Path(path).open("w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["answer_page", "n", "accuracy", "anls", "page_accuracy"])
        for r in rows:
            w.writerow([r["answer_page"], r["n"], repr(r["accuracy"]), repr(r["anls"]), repr(r["page_accuracy"])])


def write_breakdown_svg(rows: Sequence[dict], path, title: str = "") -> None:
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    pages = [r["answer_page"] for r in rows]
    fig, ax = plt.subplots(figsize=(7, 3))
    width = 0.4
    ax.bar([p - width / 2 for p in pages], [r["anls"] for r in rows], width, label="ANLS")
    ax.bar([p + width / 2 for p in pages], [r["page_accuracy"] for r in rows], width, label="page accuracy")
    ax.set_xlabel("answer page")
    ax.set_ylim(0, 1)
    ax.set_xticks(pages)
    ax.legend(loc="upper right", fontsize=8)
    if title:
        ax.set_title(title)
    fig.tight_layout()
    fig.savefig(path, format="svg", metadata={"Date": None})
    plt.close(fig)


def write_confusion_csv(counts: dict, path) -> None:
    with Path(path).open("w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["answer_correct", "page_correct", "count"])
        for (a, p), n in counts.items():
            w.writerow([int(a), int(p), n])


def write_report(report: MetricReport, results: Sequence[dict], out_dir) -> Path:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    tmp = out / "report.json.tmp"
    tmp.write_text(json.dumps(report.to_dict(), indent=2, sort_keys=True) + "\n")
    tmp.replace(out / "report.json")
    with (out / "results.jsonl").open("w") as f:
        for r in results:
            f.write(json.dumps(r, sort_keys=True) + "\n")
    write_breakdown_csv(report.breakdown, out / "breakdown.csv")
    write_breakdown_svg(report.breakdown, out / "breakdown.svg", f"{report.setup} setup")
    write_confusion_csv(confusion_answer_vs_page(results), out / "confusion.csv")
    return out / "report.json"


def page_attention(model: HiVt5, vocab: Vocab, question: str, page: Page) -> tuple[list[np.ndarray], list[str]]:
    """Encoder attention of the page-slot query rows, one (H, M, T) array per
    layer, plus a label for every key position."""
    cfg = model.config
    inp = make_page_input(vocab, cfg, vocab.encode(question), page)
    maps: list[np.ndarray] = []
    with no_grad():
        model.encode_pages([inp], attention_out=maps)
    m = cfg.page_tokens
    n_vis = 0 if inp.visual is None else len(inp.visual)
    labels = ([f"<page_{i}>" for i in range(m)] + [f"<patch_{i}>" for i in range(n_vis)]
              + [vocab.itos[i] for i in inp.question_ids] + [vocab.itos[i] for i in inp.ocr_ids])
    return [a[0, :, :m, :] for a in maps], labels


def dump_attention(model: HiVt5, vocab: Vocab, question: str, page: Page, path) -> list[Path]:
    """Write ``attn_L{layer}_H{head}.csv`` (M rows x sequence columns) and ``attn_keys.csv``."""
    out = Path(path)
    out.mkdir(parents=True, exist_ok=True)
    maps, labels = page_attention(model, vocab, question, page)
    files = []
    for li, layer in enumerate(maps):
        for hi, mat in enumerate(layer):
            f = out / f"attn_L{li}_H{hi}.csv"
            np.savetxt(f, mat, delimiter=",", fmt="%.17g")
            files.append(f)
    with (out / "attn_keys.csv").open("w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["position", "token"])
        w.writerows(enumerate(labels))
    return files
