"""Three-stage training: layout-aware denoising pretraining on single pages,
two-page joint answer/page training, and full-length finetuning with the
encoder frozen. Also the optimizer and the checkpoint format."""

from __future__ import annotations

import csv
import dataclasses
import hashlib
import json
import time
import zlib
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from .corpus import Corpus, Document, Page, QASample, shorten_two_pages
from .errors import CheckpointError, StageError, ValidationError
from .model import HiVt5, HiVt5Config, PageInput, make_page_input
from .tensor import Tensor, make_rng
from .vocab import Vocab

STAGES = ("pretrain", "train", "finetune")
# Which checkpoint stages each stage may start from.
ALLOWED_SOURCES = {"pretrain": ("pretrain",), "train": ("pretrain", "train"), "finetune": ("train", "finetune")}
CHECKPOINT_MAGIC = b"HIVT5-CKPT\n"
CHECKPOINT_VERSION = 1
IGNORE = -100


def derive_seed(seed: int, name: str) -> int:
    """Stable sub-seed for a named subsystem."""
    return int(np.random.SeedSequence([seed, zlib.crc32(name.encode())]).generate_state(1)[0])


@dataclass(frozen=True)
class TrainConfig:
    lr: float = 3e-4
    warmup_steps: int = 100
    total_steps: int = 1000
    batch_size: int = 8
    mask_ratio: float = 0.15
    mean_span: float = 3.0
    page_loss_weight: float | None = None  # None: use the model config's weight
    weight_decay: float = 0.01
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    seed: int = 0

    def __post_init__(self):
        if not 0.0 < self.mask_ratio < 1.0:
            raise ValidationError(f"mask_ratio must lie in (0, 1), got {self.mask_ratio}")
        if self.page_loss_weight is not None and self.page_loss_weight < 0:
            raise ValidationError("page_loss_weight must be non-negative")


# -- denoising examples ---------------------------------------------------------------


@dataclass
class DenoiseExample:
    input_ids: list[int]
    input_boxes: np.ndarray  # (len(input_ids), 4)
    target_ids: list[int]
    spans: list[tuple[int, int]]  # (start, length) in the original sequence


def apply_spans(ids: Sequence[int], boxes, spans: Sequence[tuple[int, int]], vocab: Vocab) -> DenoiseExample:
    """Replace each (start, length) span by one sentinel that keeps the box of
    the span's first token; the target lists each sentinel followed by its tokens."""
    boxes = np.asarray(boxes, dtype=np.float64).reshape(-1, 4)
    inp, inp_boxes, target = [], [], []
    pos = 0
    for i, (start, length) in enumerate(sorted(spans)):
        if start < pos or length < 1:
            raise ValidationError(f"spans overlap or are empty: {spans}")
        inp.extend(ids[pos:start])
        inp_boxes.extend(boxes[pos:start])
        s = vocab.sentinel_id(i)
        inp.append(s)
        inp_boxes.append(boxes[start])
        target.append(s)
        target.extend(ids[start:start + length])
        pos = start + length
    inp.extend(ids[pos:])
    inp_boxes.extend(boxes[pos:])
    target.append(vocab.end_id)
    return DenoiseExample([int(t) for t in inp], np.asarray(inp_boxes).reshape(-1, 4),
                          [int(t) for t in target], sorted(spans))


def restore(example: DenoiseExample, vocab: Vocab) -> list[int]:
    """Undo the corruption using the target sequence."""
    spans: dict[int, list[int]] = {}
    current = None
    for t in example.target_ids:
        if t == vocab.end_id:
            break
        if vocab.is_sentinel(t):
            current = spans.setdefault(t, [])
        else:
            current.append(t)
    out = []
    for t in example.input_ids:
        out.extend(spans[t] if t in spans else [t])
    return out


def sample_spans(n: int, mask_ratio: float, mean_span: float, rng: np.random.Generator,
                 max_spans: int) -> list[tuple[int, int]]:
    """Non-overlapping, non-adjacent spans covering about ``mask_ratio`` of ``n``
    tokens, with geometric lengths of mean ``mean_span``. At least one token stays visible."""
    n_mask = min(int(np.floor(n * mask_ratio + rng.random())), n - 1)
    if n_mask <= 0:
        return []
    lengths = []
    while sum(lengths) < n_mask:
        lengths.append(int(rng.geometric(1.0 / mean_span)))
    lengths[-1] -= sum(lengths) - n_mask
    n_keep = n - n_mask
    while len(lengths) > max(1, min(max_spans, n_keep + 1)):
        last = lengths.pop()
        lengths[-1] += last
    k = len(lengths)
    gaps = rng.multinomial(n_keep - (k - 1), [1.0 / (k + 1)] * (k + 1))
    gaps[1:k] += 1
    spans, pos = [], 0
    for i, length in enumerate(lengths):
        pos += int(gaps[i])
        spans.append((pos, length))
        pos += length
    return spans


def make_denoise_example(ids: Sequence[int], boxes, mask_ratio: float, mean_span: float,
                         rng: np.random.Generator, vocab: Vocab) -> DenoiseExample:
    if len(ids) == 0:
        raise ValidationError("cannot corrupt an empty page")
    spans = sample_spans(len(ids), mask_ratio, mean_span, rng, vocab.n_sentinels)
    return apply_spans(list(ids), boxes, spans, vocab)


# -- optimizer -------------------------------------------------------------------------


class AdamW:
    """Adam with bias correction, decoupled weight decay on matrices and a
    linear warmup to a constant learning rate."""

    def __init__(self, params: dict[str, Tensor], lr=3e-4, warmup_steps=100, weight_decay=0.01,
                 beta1=0.9, beta2=0.999, eps=1e-8, trainable: Sequence[str] | None = None):
        self.params = params
        self.lr, self.warmup_steps, self.weight_decay = lr, warmup_steps, weight_decay
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.trainable = list(params) if trainable is None else list(trainable)
        self.m = {k: np.zeros_like(params[k].data) for k in self.trainable}
        self.v = {k: np.zeros_like(params[k].data) for k in self.trainable}
        self.t = 0

    def rate(self, step: int) -> float:
        if self.warmup_steps <= 0:
            return self.lr
        return self.lr * min(1.0, step / self.warmup_steps)

    def step(self) -> float:
        for k in self.trainable:
            g = self.params[k].grad
            if g is not None and not np.all(np.isfinite(g)):
                raise FloatingPointError(f"non-finite gradient in {k} at step {self.t + 1}")
        self.t += 1
        lr = self.rate(self.t)
        c1 = 1.0 - self.beta1**self.t
        c2 = 1.0 - self.beta2**self.t
        for k in self.trainable:
            p = self.params[k]
            g = p.grad if p.grad is not None else np.zeros_like(p.data)
            m, v = self.m[k], self.v[k]
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * g * g
            if self.weight_decay and p.data.ndim >= 2:
                p.data -= lr * self.weight_decay * p.data
            p.data -= lr * (m / c1) / (np.sqrt(v / c2) + self.eps)
        return lr


def adamw_update(params: dict[str, Tensor], state: AdamW) -> float:
    """One AdamW update from the ``.grad`` buffers of ``params``."""
    for k, p in params.items():
        if state.params.get(k) is not p:
            raise ValidationError(f"parameter {k} is not tracked by this optimizer state")
    return state.step()


# -- batching helpers ---------------------------------------------------------------------


def page_inputs(vocab: Vocab, config: HiVt5Config, question: str, pages: Sequence[Page]) -> list[PageInput]:
    q = vocab.encode(question)
    return [make_page_input(vocab, config, q, p, i) for i, p in enumerate(pages)]


def decoder_arrays(sequences: Sequence[Sequence[int]], vocab: Vocab) -> tuple[np.ndarray, np.ndarray]:
    """Teacher-forcing inputs ``<s> y`` and targets ``y </s>``, padded."""
    t = max(len(s) for s in sequences) + 1
    inp = np.full((len(sequences), t), vocab.pad_id, dtype=np.int64)
    tgt = np.full((len(sequences), t), IGNORE, dtype=np.int64)
    for i, s in enumerate(sequences):
        inp[i, 0] = vocab.start_id
        inp[i, 1:len(s) + 1] = s
        tgt[i, :len(s)] = s
        tgt[i, len(s)] = vocab.end_id
    return inp, tgt


def denoise_page_input(example: DenoiseExample) -> PageInput:
    return PageInput(np.zeros(0, dtype=np.int64), np.asarray(example.input_ids, dtype=np.int64),
                     example.input_boxes, None, 0)


def tensor_digest(data: np.ndarray) -> str:
    return hashlib.sha256(np.ascontiguousarray(data, dtype="<f8").tobytes()).hexdigest()


# -- trainer ---------------------------------------------------------------------------------


@dataclass
class Batch:
    documents: list[list[PageInput]]
    decoder_input: np.ndarray
    targets: np.ndarray
    answer_pages: np.ndarray | None


class Trainer:
    """Owns a model, its optimizer state and the data RNG for one stage."""

    def __init__(self, model: HiVt5, vocab: Vocab, config: TrainConfig, stage: str, seed: int | None = None):
        if stage not in STAGES:
            raise StageError(f"unknown stage {stage!r}")
        self.model, self.vocab, self.config, self.stage = model, vocab, config, stage
        self.seed = config.seed if seed is None else seed
        self.rng = make_rng(derive_seed(self.seed, f"data/{stage}"))
        params = model.parameters()
        trainable = [k for k in params if not (stage == "finetune" and model.is_encoder_param(k))]
        self.optimizer = AdamW(params, config.lr, config.warmup_steps, config.weight_decay,
                               config.beta1, config.beta2, config.adam_eps, trainable)
        self.step = 0
        self.log: list[dict] = []

    @property
    def page_loss_weight(self) -> float:
        w = self.config.page_loss_weight
        return self.model.config.page_loss_weight if w is None else w

    def _update(self, loss: Tensor, answer_loss: float, page_loss: float, t0: float) -> None:
        for p in self.model.parameters().values():
            p.grad = None
        loss.backward()
        lr = self.optimizer.step()
        self.step += 1
        self.log.append({"step": self.step, "stage": self.stage, "answer_loss": answer_loss,
                         "page_loss": page_loss, "lr": lr, "wall_ms": (time.perf_counter() - t0) * 1e3})

    # -- batch construction --------------------------------------------------------

    def pretrain_batch(self, pages: Sequence[Page]) -> Batch:
        idx = self.rng.integers(0, len(pages), size=self.config.batch_size)
        examples = []
        for i in idx:
            page = pages[int(i)]
            ids = self.vocab.encode(page.words)
            boxes = np.asarray([t.box for t in page.tokens])
            examples.append(make_denoise_example(ids, boxes, self.config.mask_ratio, self.config.mean_span,
                                                 self.rng, self.vocab))
        return self.denoise_batch(examples)

    def denoise_batch(self, examples: Sequence[DenoiseExample]) -> Batch:
        limit = self.model.config.page_length - self.model.config.page_tokens
        docs = []
        for e in examples:
            if len(e.input_ids) > limit:
                e = DenoiseExample(e.input_ids[:limit], e.input_boxes[:limit], e.target_ids, e.spans)
            docs.append([denoise_page_input(e)])
        # Targets already end with the end token; decoder_arrays appends another, so strip it.
        inp, tgt = decoder_arrays([e.target_ids[:-1] for e in examples], self.vocab)
        return Batch(docs, inp, tgt, None)

    def qa_batch(self, items: Sequence[tuple[QASample, Sequence[Page], int]]) -> Batch:
        docs, answers, pages = [], [], []
        for sample, view, page in items:
            docs.append(page_inputs(self.vocab, self.model.config, sample.question, view))
            answers.append(self.vocab.encode(sample.answers[0]))
            pages.append(page)
        inp, tgt = decoder_arrays(answers, self.vocab)
        return Batch(docs, inp, tgt, np.asarray(pages))

    def two_page_batch(self, corpus: Corpus) -> Batch:
        idx = self.rng.integers(0, len(corpus.samples), size=self.config.batch_size)
        items = []
        for i in idx:
            s = corpus.samples[int(i)]
            view, page, _ = shorten_two_pages(s, corpus.doc(s.doc_id), self.rng)
            items.append((s, view, page))
        return self.qa_batch(items)

    def full_batch(self, corpus: Corpus) -> Batch:
        idx = self.rng.integers(0, len(corpus.samples), size=self.config.batch_size)
        items = []
        for i in idx:
            s = corpus.samples[int(i)]
            items.append((s, corpus.doc(s.doc_id).pages, s.answer_page_idx))
        return self.qa_batch(items)

    # -- steps ----------------------------------------------------------------------

    def pretrain_step(self, batch: Batch) -> float:
        if self.stage != "pretrain":
            raise StageError(f"pretrain_step called in stage {self.stage!r}")
        t0 = time.perf_counter()
        out = self.model.forward(batch.documents, batch.decoder_input)
        loss, _ = self.model.losses(out, batch.targets)
        value = loss.item()
        self._update(loss, value, float("nan"), t0)
        return value

    def _qa_step(self, batch: Batch, freeze: bool) -> tuple[float, float]:
        t0 = time.perf_counter()
        out = self.model.forward(batch.documents, batch.decoder_input, freeze_encoder=freeze)
        answer, page = self.model.losses(out, batch.targets, batch.answer_pages)
        lam = self.page_loss_weight
        total = answer + page * lam if lam else answer
        a, p = answer.item(), page.item()
        self._update(total, a, p, t0)
        return a, p

    def train_step(self, batch: Batch) -> tuple[float, float]:
        if self.stage != "train":
            raise StageError(f"train_step called in stage {self.stage!r}")
        return self._qa_step(batch, freeze=False)

    def finetune_step(self, batch: Batch) -> tuple[float, float]:
        if self.stage != "finetune":
            raise StageError(f"finetune_step requires the finetune stage (frozen encoder), trainer is in {self.stage!r}")
        return self._qa_step(batch, freeze=True)

    # -- loops ----------------------------------------------------------------------

    def run(self, corpus: Corpus, steps: int, pages: Sequence[Page] | None = None, callback=None) -> list[dict]:
        """Run ``steps`` more steps of the current stage on ``corpus``."""
        if self.stage == "pretrain" and pages is None:
            pages = [p for d in corpus.documents for p in d.pages]
        for _ in range(steps):
            if self.stage == "pretrain":
                self.pretrain_step(self.pretrain_batch(pages))
            elif self.stage == "train":
                self.train_step(self.two_page_batch(corpus))
            else:
                self.finetune_step(self.full_batch(corpus))
            if callback is not None:
                callback(self)
        return self.log


def write_step_log(rows: Sequence[dict], path, append: bool = False) -> None:
    path = Path(path)
    new = not (append and path.exists())
    with path.open("a" if append else "w", newline="") as f:
        writer = csv.writer(f)
        if new:
            writer.writerow(["step", "stage", "answer_loss", "page_loss", "lr", "wall_ms"])
        for r in rows:
            writer.writerow([r["step"], r["stage"], repr(r["answer_loss"]), repr(r["page_loss"]),
                             repr(r["lr"]), f"{r['wall_ms']:.1f}"])


# -- checkpoints -------------------------------------------------------------------------------


def save_checkpoint(path, trainer: Trainer) -> None:
    """Header line of JSON followed by little-endian float64 blobs.

    Blobs are the parameters (``param/<name>``) followed by the optimizer
    moments (``adam_m/<name>``, ``adam_v/<name>``) of trainable parameters.
    """
    model, opt = trainer.model, trainer.optimizer
    blobs = [(f"param/{k}", p.data) for k, p in model.parameters().items()]
    blobs += [(f"adam_m/{k}", opt.m[k]) for k in opt.trainable]
    blobs += [(f"adam_v/{k}", opt.v[k]) for k in opt.trainable]
    header = {
        "format_version": CHECKPOINT_VERSION,
        "config": model.config.to_dict(),
        "train_config": dataclasses.asdict(trainer.config),
        "stage": trainer.stage,
        "step": trainer.step,
        "seed": trainer.seed,
        "optimizer_step": opt.t,
        "rng": trainer.rng.bit_generator.state,
        "vocab": trainer.vocab.itos,
        "blobs": [[name, list(arr.shape)] for name, arr in blobs],
    }
    payload = [CHECKPOINT_MAGIC, json.dumps(header, sort_keys=True, separators=(",", ":")).encode() + b"\n"]
    payload += [np.ascontiguousarray(arr, dtype="<f8").tobytes() for _, arr in blobs]
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_bytes(b"".join(payload))
    tmp.replace(path)


@dataclass
class Checkpoint:
    header: dict
    blobs: dict[str, np.ndarray]

    @property
    def stage(self) -> str:
        return self.header["stage"]


def read_checkpoint(path) -> Checkpoint:
    raw = Path(path).read_bytes()
    if not raw.startswith(CHECKPOINT_MAGIC):
        raise CheckpointError(f"{path}: not a checkpoint file")
    end = raw.index(b"\n", len(CHECKPOINT_MAGIC))
    header = json.loads(raw[len(CHECKPOINT_MAGIC):end])
    if header.get("format_version") != CHECKPOINT_VERSION:
        raise CheckpointError(f"{path}: format version {header.get('format_version')} != {CHECKPOINT_VERSION}")
    offset = end + 1
    blobs = {}
    for name, shape in header["blobs"]:
        n = int(np.prod(shape)) * 8
        if offset + n > len(raw):
            raise CheckpointError(f"{path}: truncated blob {name}")
        blobs[name] = np.frombuffer(raw, dtype="<f8", count=n // 8, offset=offset).reshape(shape).astype(np.float64)
        offset += n
    if offset != len(raw):
        raise CheckpointError(f"{path}: {len(raw) - offset} trailing bytes")
    return Checkpoint(header, blobs)


def load_model(path) -> tuple[HiVt5, Vocab, Checkpoint]:
    ckpt = read_checkpoint(path)
    config = HiVt5Config.from_dict(ckpt.header["config"])
    model = HiVt5(config)
    vocab = Vocab.from_tokens(ckpt.header["vocab"])
    if len(vocab) != config.vocab_size:
        raise CheckpointError(f"vocabulary has {len(vocab)} tokens, config says {config.vocab_size}")
    params = model.parameters()
    names = {n[len("param/"):] for n in ckpt.blobs if n.startswith("param/")}
    if names != set(params):
        missing, extra = sorted(set(params) - names), sorted(names - set(params))
        raise CheckpointError(f"parameter set mismatch: missing {missing}, unexpected {extra}")
    for k, p in params.items():
        blob = ckpt.blobs[f"param/{k}"]
        if blob.shape != p.shape:
            raise CheckpointError(f"{k}: checkpoint shape {blob.shape} != model shape {p.shape}")
        p.data[...] = blob
    return model, vocab, ckpt


def load_checkpoint(path, stage: str, train_config: TrainConfig | None = None) -> Trainer:
    """Restore a trainer for ``stage`` from a checkpoint.

    Loading a checkpoint of the same stage resumes it exactly (optimizer
    moments, step and data RNG). Loading from the preceding stage starts the
    new stage fresh from the stored weights. Anything else is refused.
    """
    if stage not in STAGES:
        raise StageError(f"unknown stage {stage!r}")
    model, vocab, ckpt = load_model(path)
    if ckpt.stage not in ALLOWED_SOURCES[stage]:
        raise StageError(
            f"stage {stage!r} needs a checkpoint from stage {' or '.join(ALLOWED_SOURCES[stage])}, got {ckpt.stage!r}"
        )
    if ckpt.stage == stage:
        cfg = TrainConfig(**ckpt.header["train_config"]) if train_config is None else train_config
        trainer = Trainer(model, vocab, cfg, stage, ckpt.header["seed"])
        opt = trainer.optimizer
        for k in opt.trainable:
            for name, store in (("adam_m", opt.m), ("adam_v", opt.v)):
                blob = ckpt.blobs.get(f"{name}/{k}")
                if blob is None or blob.shape != store[k].shape:
                    raise CheckpointError(f"optimizer state for {k} missing or mis-shaped")
                store[k][...] = blob
        opt.t = ckpt.header["optimizer_step"]
        trainer.step = ckpt.header["step"]
        trainer.rng.bit_generator.state = ckpt.header["rng"]
    else:
        cfg = train_config if train_config is not None else TrainConfig(**ckpt.header["train_config"])
        trainer = Trainer(model, vocab, cfg, stage, ckpt.header["seed"])
    return trainer
