"""Run configuration: a flat, versioned ``key = value`` text file.

The first non-comment line must be ``format_version = 1``. Unknown keys are
rejected, missing keys take the defaults below, and every key can be
overridden from the command line as ``--kebab-case``.
"""

from __future__ import annotations

import configparser
import dataclasses
from dataclasses import dataclass, fields
from pathlib import Path

from .corpus import SyntheticConfig
from .errors import ConfigError
from .model import HiVt5Config
from .training import TrainConfig

CONFIG_VERSION = 1
SECTION = "run"
EVAL_CORPORA = ("corpus", "long_train", "long_probe", "long_test")


@dataclass(frozen=True)
class RunConfig:
    out_dir: str = "run"
    seed: int = 0

    # synthetic corpus
    n_docs: int = 250
    pages_min: int = 2
    pages_max: int = 4
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

    # construction
    window: int = 20
    split_train: float = 0.8
    split_val: float = 0.1
    split_test: float = 0.1
    long_pages: int = 20  # length of the finetuning / probe documents; 0 disables
    filler_docs: int = 300

    # model (vocab_size is derived from the corpus vocabulary)
    d_model: int = 64
    d_ff: int = 128
    n_enc_layers: int = 2
    n_dec_layers: int = 2
    n_heads: int = 4
    page_tokens: int = 4
    page_length: int = 1024
    decoder_length: int = 1024
    max_pages: int = 20
    patch_size: int = 16
    use_visual: bool = False
    page_loss_weight: float = 1.0
    x_buckets: int = 32
    y_buckets: int = 32
    rel_buckets: int = 32
    rel_max_distance: int = 128
    page_head: str = "flat"

    # optimization
    lr: float = 1e-3
    warmup_steps: int = 100
    batch_size: int = 8
    mask_ratio: float = 0.15
    mean_span: float = 3.0
    weight_decay: float = 0.01
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    pretrain_steps: int = 500
    train_steps: int = 2000
    finetune_steps: int = 500
    train_init: str = "pretrain"  # or "scratch"

    # evaluation
    eval_checkpoint: str = "finetune"
    eval_corpus: str = "corpus"
    eval_split: str = "test"
    setup: str = "hierarchical"
    budget: int = 1024
    max_answer_len: int = 8
    eval_batch: int = 32

    def __post_init__(self):
        if self.train_init not in ("pretrain", "scratch"):
            raise ConfigError(f"train_init must be 'pretrain' or 'scratch', got {self.train_init!r}")
        if self.eval_checkpoint not in ("pretrain", "train", "finetune"):
            raise ConfigError(f"eval_checkpoint must name a stage, got {self.eval_checkpoint!r}")
        if self.eval_corpus not in EVAL_CORPORA:
            raise ConfigError(f"eval_corpus must be one of {', '.join(EVAL_CORPORA)}")
        if self.eval_split not in ("train", "val", "test", "all"):
            raise ConfigError(f"eval_split must be train, val, test or all, got {self.eval_split!r}")
        if self.long_pages < 0:
            raise ConfigError("long_pages must be non-negative")

    # -- derived configs --------------------------------------------------------------

    def synthetic(self, seed: int) -> SyntheticConfig:
        return SyntheticConfig(
            n_docs=self.n_docs, pages_range=(self.pages_min, self.pages_max), rows=self.rows, cols=self.cols,
            n_filler=self.n_filler, n_keys=self.n_keys, n_values=self.n_values, qa_per_doc=self.qa_per_doc,
            decoys_per_page=self.decoys_per_page, decoys_on_answer_pages=self.decoys_on_answer_pages,
            ambiguous_rate=self.ambiguous_rate, with_images=self.with_images, image_size=self.image_size,
            seed=seed,
        )

    def model(self, vocab_size: int, init_seed: int) -> HiVt5Config:
        names = {f.name for f in fields(HiVt5Config)} - {"vocab_size", "init_seed", "eps"}
        return HiVt5Config(vocab_size=vocab_size, init_seed=init_seed, **{k: getattr(self, k) for k in names})

    def train(self, total_steps: int, seed: int) -> TrainConfig:
        return TrainConfig(lr=self.lr, warmup_steps=self.warmup_steps, total_steps=total_steps,
                           batch_size=self.batch_size, mask_ratio=self.mask_ratio, mean_span=self.mean_span,
                           weight_decay=self.weight_decay, beta1=self.beta1, beta2=self.beta2,
                           adam_eps=self.adam_eps, seed=seed)

    @property
    def ratios(self) -> tuple[float, float, float]:
        return (self.split_train, self.split_val, self.split_test)

    def path(self, name: str) -> Path:
        return Path(self.out_dir) / name

    # -- text form ----------------------------------------------------------------------

    def dumps(self) -> str:
        lines = [f"format_version = {CONFIG_VERSION}"]
        for f in fields(self):
            lines.append(f"{f.name} = {_format(getattr(self, f.name))}")
        return "\n".join(lines) + "\n"


def _format(value) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    return repr(value) if isinstance(value, float) else str(value)


def _coerce(name: str, kind, raw: str):
    raw = raw.strip()
    try:
        if kind is bool:
            low = raw.lower()
            if low not in ("true", "false", "1", "0", "yes", "no"):
                raise ValueError(raw)
            return low in ("true", "1", "yes")
        if kind is int:
            return int(raw)
        if kind is float:
            return float(raw)
        return raw
    except ValueError:
        raise ConfigError(f"{name}: cannot parse {raw!r} as {kind.__name__}") from None


def field_types() -> dict[str, type]:
    hints = {"int": int, "float": float, "bool": bool, "str": str}
    return {f.name: hints[f.type] for f in fields(RunConfig)}


def parse(text: str, source: str = "<config>") -> dict[str, object]:
    """Parse config text into a dict of typed values (only the keys present)."""
    body = [ln for ln in text.splitlines() if ln.strip() and not ln.lstrip().startswith("#")]
    if not body or body[0].replace(" ", "") != f"format_version={CONFIG_VERSION}":
        raise ConfigError(f"{source}: first line must be 'format_version = {CONFIG_VERSION}'")
    cp = configparser.ConfigParser(interpolation=None, delimiters=("=",), comment_prefixes=("#",),
                                   inline_comment_prefixes=("#",))
    cp.optionxform = str
    try:
        cp.read_string(f"[{SECTION}]\n" + text, source=source)
    except configparser.Error as exc:
        raise ConfigError(f"{source}: {exc}") from None
    types = field_types()
    values = {}
    for key, raw in cp[SECTION].items():
        if key == "format_version":
            continue
        if key not in types:
            raise ConfigError(f"{source}: unknown key {key!r}")
        values[key] = _coerce(key, types[key], raw)
    return values


def resolve(path: str | Path | None = None, overrides: dict | None = None) -> RunConfig:
    """Defaults, then the file at ``path``, then ``overrides``."""
    values: dict = {}
    if path is not None:
        p = Path(path)
        if not p.exists():
            raise ConfigError(f"config file {p} does not exist")
        values.update(parse(p.read_text(), str(p)))
    types = field_types()
    for key, value in (overrides or {}).items():
        if key not in types:
            raise ConfigError(f"unknown key {key!r}")
        values[key] = _coerce(key, types[key], value) if isinstance(value, str) else value
    return dataclasses.replace(RunConfig(), **values)
