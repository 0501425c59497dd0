"""The hierarchical multi-page model.

Each page is encoded on its own as ``[PAGE x M; visual patches; question; OCR]``.
The encoder outputs at the M page slots summarize the page; the summaries of
all pages are concatenated into the document memory that the decoder attends
to and that the page-identification head classifies.
"""

from __future__ import annotations

import dataclasses
import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .errors import ConfigError, ValidationError
from .nn import (
    DecoderLayer,
    EncoderLayer,
    Linear,
    Module,
    RelativeBias,
    SpatialEmbedder,
    decoder_forward,
    encoder_forward,
    padding_mask,
)
from .tensor import (
    NEG_INF,
    Tensor,
    concat,
    cross_entropy,
    embedding,
    log_softmax,
    make_rng,
    matmul,
    no_grad,
    parameter,
)
from .vocab import Vocab

VISUAL_FEATURES = 4
# Parameter-name prefixes that belong to the encoder side (frozen in finetuning).
ENCODER_PREFIXES = ("embed.", "page_tokens", "visual_proj.", "enc_bias.", "encoder.", "enc_norm")


def page_budget(decoder_tokens: int, pages: int) -> int:
    """Largest number of page tokens per page that fits ``pages`` pages in the decoder input."""
    if pages < 1 or decoder_tokens < 1:
        raise ValidationError(f"need decoder_tokens >= 1 and pages >= 1, got {decoder_tokens}, {pages}")
    return decoder_tokens // pages


@dataclass(frozen=True)
class HiVt5Config:
    vocab_size: int = 256
    d_model: int = 64
    d_ff: int = 128
    n_enc_layers: int = 2
    n_dec_layers: int = 2
    n_heads: int = 4
    page_tokens: int = 10  # M
    page_length: int = 1024  # L, encoder tokens per page
    decoder_length: int = 1024  # S, decoder memory capacity
    max_pages: int = 20  # P_max
    patch_size: int = 16
    use_visual: bool = False
    page_loss_weight: float = 1.0
    x_buckets: int = 32
    y_buckets: int = 32
    rel_buckets: int = 32
    rel_max_distance: int = 128
    page_head: str = "flat"
    eps: float = 1e-6
    init_seed: int = 0

    def __post_init__(self):
        if self.d_model % self.n_heads:
            raise ConfigError(f"d_model={self.d_model} not divisible by n_heads={self.n_heads}")
        limit = page_budget(self.decoder_length, self.max_pages)
        if self.page_tokens > limit:
            raise ConfigError(
                f"page_tokens={self.page_tokens} exceeds decoder_length // max_pages = {limit}"
            )
        if self.page_head not in ("flat", "pooled"):
            raise ConfigError(f"page_head must be 'flat' or 'pooled', got {self.page_head!r}")
        if self.page_loss_weight < 0:
            raise ConfigError("page_loss_weight must be non-negative")

    @property
    def encoder_capacity(self) -> int:
        return self.max_pages * self.page_length

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "HiVt5Config":
        return cls(**d)


@dataclass
class PageInput:
    question_ids: np.ndarray
    ocr_ids: np.ndarray
    ocr_boxes: np.ndarray
    visual: np.ndarray | None = None
    index: int = 0

    def __len__(self) -> int:
        n_vis = 0 if self.visual is None else len(self.visual)
        return len(self.question_ids) + len(self.ocr_ids) + n_vis


@dataclass
class ModelOutput:
    answer_logits: Tensor  # (B, T, V)
    page_logits: Tensor  # (B, P_max)
    page_present: np.ndarray  # (B, P_max) bool
    memory_length: np.ndarray  # (B,) number of decoder memory slots per document
    attention: list = field(default_factory=list)

    def masked_page_logits(self) -> np.ndarray:
        return np.where(self.page_present, self.page_logits.data, -np.inf)

    def predicted_pages(self) -> np.ndarray:
        return self.masked_page_logits().argmax(axis=1)


def featurize_patches(raster, patch_size: int) -> np.ndarray:
    """Per-patch statistics (mean, std, row, col) of a grayscale raster.

    The raster is zero-padded to a multiple of ``patch_size``. Intensities of
    integer rasters are rescaled by 1/255. Row and column are patch centres
    normalized to (0, 1).
    """
    img = np.asarray(raster)
    if img.ndim != 2 or img.size == 0:
        raise ValidationError(f"expected a non-empty 2-D raster, got shape {img.shape}")
    img = img.astype(np.float64) / 255.0 if np.issubdtype(img.dtype, np.integer) else img.astype(np.float64)
    h, w = img.shape
    ph, pw = -(-h // patch_size), -(-w // patch_size)
    padded = np.zeros((ph * patch_size, pw * patch_size))
    padded[:h, :w] = img
    patches = padded.reshape(ph, patch_size, pw, patch_size).transpose(0, 2, 1, 3).reshape(ph * pw, -1)
    rows, cols = np.divmod(np.arange(ph * pw), pw)
    return np.stack(
        [patches.mean(axis=1), patches.std(axis=1), (rows + 0.5) / ph, (cols + 0.5) / pw], axis=1
    )


def make_page_input(vocab: Vocab, config: HiVt5Config, question_ids: Sequence[int], page,
                    index: int = 0) -> PageInput:
    """Build the encoder input of one page.

    ``page`` needs ``tokens`` (items with ``text`` and ``box``) and ``image``.
    The task token is prepended to the question; OCR beyond the page budget is dropped.
    """
    q = np.asarray([vocab.qa_id, *question_ids], dtype=np.int64)
    visual = None
    if config.use_visual and getattr(page, "image", None) is not None:
        visual = featurize_patches(page.image, config.patch_size)
    fixed = config.page_tokens + len(q) + (0 if visual is None else len(visual))
    room = config.page_length - fixed
    if room < 0:
        raise ConfigError(
            f"page tokens, visual patches and question need {fixed} slots, page budget is {config.page_length}"
        )
    tokens = list(page.tokens)[:room]
    ids = np.asarray(vocab.encode([t.text for t in tokens]), dtype=np.int64)
    boxes = np.asarray([t.box for t in tokens], dtype=np.float64).reshape(-1, 4)
    return PageInput(q, ids, boxes, visual, index)


class HiVt5(Module):
    def __init__(self, config: HiVt5Config):
        self.config = config
        c = config
        rng = make_rng(c.init_seed)
        self.embed = SpatialEmbedder(c.vocab_size, c.d_model, c.x_buckets, c.y_buckets, rng)
        self.page_tokens = parameter(rng.normal(0.0, 1.0, size=(c.page_tokens, c.d_model)))
        self.visual_proj = Linear(VISUAL_FEATURES, c.d_model, rng, bias=True)
        self.enc_bias = RelativeBias(c.n_heads, c.rel_buckets, c.rel_max_distance, True, rng)
        self.encoder = [EncoderLayer(c.d_model, c.d_ff, rng) for _ in range(c.n_enc_layers)]
        self.enc_norm = parameter(np.ones(c.d_model))
        self.dec_bias = RelativeBias(c.n_heads, c.rel_buckets, c.rel_max_distance, False, rng)
        self.decoder = [DecoderLayer(c.d_model, c.d_ff, rng) for _ in range(c.n_dec_layers)]
        self.dec_norm = parameter(np.ones(c.d_model))
        if c.page_head == "flat":
            self.page_head_w = parameter(np.zeros((c.max_pages * c.page_tokens * c.d_model, c.max_pages)))
            self.page_head_b = parameter(np.zeros(c.max_pages))
        else:
            self.page_head_w = parameter(np.zeros((c.d_model, 1)))
            self.page_head_b = parameter(np.zeros(1))
        self._params = None

    # -- parameters ---------------------------------------------------------------

    def parameters(self) -> dict[str, Tensor]:
        if self._params is None:
            self._params = {k: v for k, v in self.named_parameters().items() if k != "config"}
        return self._params

    @staticmethod
    def is_encoder_param(name: str) -> bool:
        return name.startswith(ENCODER_PREFIXES)

    def encoder_parameters(self) -> dict[str, Tensor]:
        return {k: v for k, v in self.parameters().items() if self.is_encoder_param(k)}

    # -- encoder --------------------------------------------------------------------

    def encode_pages(self, pages: Sequence[PageInput], attention_out: list | None = None) -> Tensor:
        """Encode pages independently; returns the (n_pages, M, d) page-slot outputs."""
        c = self.config
        n, m = len(pages), c.page_tokens
        for p in pages:
            if m + len(p) > c.page_length:
                raise ConfigError(f"page of {m + len(p)} tokens exceeds page budget {c.page_length}")
        n_vis = max((0 if p.visual is None else len(p.visual)) for p in pages)
        n_txt = max(len(p.question_ids) + len(p.ocr_ids) for p in pages)
        ids = np.zeros((n, n_txt), dtype=np.int64)
        boxes = np.zeros((n, n_txt, 4))
        has_box = np.zeros((n, n_txt), dtype=bool)
        valid = np.zeros((n, m + n_vis + n_txt), dtype=bool)
        valid[:, :m] = True
        vis = np.zeros((n, n_vis, VISUAL_FEATURES))
        for i, p in enumerate(pages):
            nq, no = len(p.question_ids), len(p.ocr_ids)
            ids[i, :nq] = p.question_ids
            ids[i, nq:nq + no] = p.ocr_ids
            if no:
                boxes[i, nq:nq + no] = p.ocr_boxes
                has_box[i, nq:nq + no] = True
            valid[i, m + n_vis:m + n_vis + nq + no] = True
            if p.visual is not None:
                vis[i, :len(p.visual)] = p.visual
                valid[i, m:m + len(p.visual)] = True
        parts = [self.page_tokens.reshape(1, m, c.d_model) + np.zeros((n, m, c.d_model))]
        if n_vis:
            parts.append(self.visual_proj(Tensor(vis)))
        if n_txt:
            parts.append(self.embed(ids, boxes, has_box))
        x = concat(parts, axis=1) if len(parts) > 1 else parts[0]
        t = x.shape[1]
        out = encoder_forward(self.encoder, x, self.enc_norm, c.n_heads, padding_mask(valid),
                              self.enc_bias(t, t), c.eps, attention_out)
        return out[:, :m, :]

    def encode_page(self, page: PageInput) -> Tensor:
        return self.encode_pages([page])[0]

    # -- document-level forward -------------------------------------------------------

    def forward(self, documents: Sequence[Sequence[PageInput]], decoder_input_ids: np.ndarray,
                freeze_encoder: bool = False, page_summaries: Tensor | None = None) -> ModelOutput:
        """Teacher-forced forward pass over a batch of documents.

        ``decoder_input_ids`` is (B, T), starting with the start token.
        With ``freeze_encoder`` no gradient reaches encoder-side parameters,
        including the token table shared with the decoder.
        """
        c = self.config
        b = len(documents)
        counts = [len(d) for d in documents]
        for k in counts:
            if not 1 <= k <= c.max_pages:
                raise ValidationError(f"document has {k} pages; allowed range is 1..{c.max_pages}")
        flat = [p for d in documents for p in d]
        if page_summaries is None:
            if freeze_encoder:
                with no_grad():
                    page_summaries = self.encode_pages(flat)
            else:
                page_summaries = self.encode_pages(flat)
        m, d = c.page_tokens, c.d_model
        padded = concat([page_summaries, np.zeros((1, m, d))], axis=0)
        slot = np.full((b, c.max_pages), len(flat), dtype=np.int64)
        present = np.zeros((b, c.max_pages), dtype=bool)
        start = 0
        for i, k in enumerate(counts):
            slot[i, :k] = np.arange(start, start + k)
            present[i, :k] = True
            start += k
        doc_pages = padded[slot]  # (B, P_max, M, d)
        width = max(counts)
        if width * m > c.decoder_length:
            raise ValidationError(f"document memory of {width * m} slots exceeds decoder_length {c.decoder_length}")
        memory = doc_pages[:, :width].reshape(b, width * m, d)
        memory_valid = np.repeat(present[:, :width], m, axis=1)

        table = self.embed.token_table.detach() if freeze_encoder else self.embed.token_table
        y = embedding(table, decoder_input_ids)
        t = y.shape[1]
        h = decoder_forward(self.decoder, y, memory, self.dec_norm, c.n_heads,
                            padding_mask(memory_valid), self.dec_bias(t, t), c.eps)
        answer_logits = matmul(h, table.T) * (1.0 / math.sqrt(d))
        return ModelOutput(answer_logits, self.page_head(doc_pages), present,
                           np.asarray(counts) * m)

    def page_head(self, doc_pages: Tensor) -> Tensor:
        """(B, P_max, M, d) page summaries, zero for absent pages -> (B, P_max) logits."""
        b, p, m, d = doc_pages.shape
        if self.config.page_head == "flat":
            return matmul(doc_pages.reshape(b, p * m * d), self.page_head_w) + self.page_head_b
        pooled = doc_pages.mean(axis=2)
        return matmul(pooled, self.page_head_w).reshape(b, p) + self.page_head_b

    def losses(self, output: ModelOutput, targets: np.ndarray, answer_pages=None,
               ignore_index: int = -100) -> tuple[Tensor, Tensor | None]:
        """Answer cross-entropy and, if ``answer_pages`` is given, page cross-entropy.

        The flat head is a plain classifier over all P_max slots; the pooled
        head has no per-slot parameters, so absent slots are masked out of its softmax.
        """
        v = output.answer_logits.shape[-1]
        answer = cross_entropy(output.answer_logits.reshape(-1, v), np.asarray(targets).reshape(-1),
                               ignore_index)
        if answer_pages is None:
            return answer, None
        logits = output.page_logits
        if self.config.page_head == "pooled":
            logits = logits + np.where(output.page_present, 0.0, NEG_INF)
        return answer, cross_entropy(logits, np.asarray(answer_pages))

    # -- inference ------------------------------------------------------------------

    def generate(self, documents: Sequence[Sequence[PageInput]], max_len: int = 8,
                 vocab: Vocab | None = None) -> list[dict]:
        """Greedy decoding for a batch of documents.

        Returns per document the generated token ids, the decoded answer (if a
        vocabulary is given), the argmax over present page slots and the mean
        per-token log-probability of the generated sequence (end token included).
        """
        start_id, end_id = (1, 2) if vocab is None else (vocab.start_id, vocab.end_id)
        b = len(documents)
        with no_grad():
            summaries = self.encode_pages([p for d in documents for p in d])
            seq = np.full((b, 1), start_id, dtype=np.int64)
            done = np.zeros(b, dtype=bool)
            logp_sum = np.zeros(b)
            n_tok = np.zeros(b)
            pages = None
            for _ in range(max_len):
                out = self.forward(documents, seq, page_summaries=summaries)
                if pages is None:
                    pages = out.predicted_pages()
                logp = log_softmax(out.answer_logits[:, -1, :]).data
                nxt = logp.argmax(axis=1)
                step = logp[np.arange(b), nxt]
                logp_sum += np.where(done, 0.0, step)
                n_tok += ~done
                nxt = np.where(done, end_id, nxt)
                seq = np.concatenate([seq, nxt[:, None]], axis=1)
                done |= nxt == end_id
                if done.all():
                    break
        results = []
        for i in range(b):
            ids = []
            for tok in seq[i, 1:]:
                if tok == end_id:
                    break
                ids.append(int(tok))
            results.append({
                "ids": ids,
                "answer": vocab.decode(ids) if vocab is not None else None,
                "page": int(pages[i]),
                "confidence": float(logp_sum[i] / max(n_tok[i], 1)),
            })
        return results
