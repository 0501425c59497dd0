"""Generate a raw synthetic corpus, cut long documents to 20-page windows,
drop ambiguous questions and split by document."""
# %%
from collections import Counter

from hivt5.corpus import SyntheticConfig, construct_multipage, filter_corpus, generate_synthetic, split_and_trim
from hivt5.tensor import make_rng

syn = SyntheticConfig(n_docs=30, pages_range=(5, 35), rows=4, cols=3, n_keys=60, ambiguous_rate=0.25,
                      page_limit=40, seed=1)
raw = generate_synthetic(syn)
print(raw.stats())

# %% one page, as OCR words in reading order
doc = raw.documents[0]
print(doc.id, len(doc.pages), "pages")
print(" ".join(doc.pages[0].words))

# %% windows of at most 20 pages that keep the answer page
rng = make_rng(2)
built = construct_multipage(raw, rng, 20)
print("longest document:", max(len(d.pages) for d in built.documents))

# %% remove questions that refer to "the document" as a whole
kept, removed = filter_corpus(built)
print("removed ambiguous questions:", len(removed))
for s in removed[:3]:
    print("  ", s.question)

# %% whole documents go to exactly one split
split = split_and_trim(kept, rng)
print(Counter(s.split for s in split.samples))
