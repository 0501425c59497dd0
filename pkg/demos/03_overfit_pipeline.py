"""A tiny end-to-end run: denoising pretraining, two-page training and a look
at what the model answers. Takes seconds on one core."""
# %%
from hivt5.corpus import SyntheticConfig, generate_synthetic, two_page_views
from hivt5.evaluation import evaluate
from hivt5.model import HiVt5, HiVt5Config
from hivt5.tensor import make_rng
from hivt5.training import TrainConfig, Trainer
from hivt5.vocab import Vocab

syn = SyntheticConfig(n_docs=40, pages_range=(2, 3), rows=4, cols=3, n_filler=20, n_keys=12, n_values=12, seed=3)
corpus = generate_synthetic(syn)
vocab = Vocab(syn.words())
cfg = HiVt5Config(vocab_size=len(vocab), d_model=32, d_ff=64, n_heads=4, page_tokens=4, page_length=64,
                  decoder_length=128, max_pages=20)
model = HiVt5(cfg)

# %% stage 1: layout-aware span denoising on single pages
pre = Trainer(model, vocab, TrainConfig(lr=1e-3, warmup_steps=20), "pretrain")
log = pre.run(corpus, 150)
print("denoising loss", round(log[0]["answer_loss"], 3), "->", round(log[-1]["answer_loss"], 3))

# %% stage 2: question answering on two-page views
train = Trainer(model, vocab, TrainConfig(lr=1e-3, warmup_steps=20), "train")
log = train.run(corpus, 400)
print("answer loss", round(log[-1]["answer_loss"], 3), "page loss", round(log[-1]["page_loss"], 3))

# %% evaluate on two-page views of the training questions
views = two_page_views(corpus, make_rng(4))
report, results = evaluate(model, vocab, views, "hierarchical", max_len=4)
print(f"accuracy {report.accuracy:.2f}  ANLS {report.anls:.2f}  page accuracy {report.page_accuracy:.2f}")
for r in results[:5]:
    print(f"{r['question']:<20} -> {r['prediction']:<6} gold {r['answers'][0]:<6} page {r['pred_page']}/{r['true_page']}")
