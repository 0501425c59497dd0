"""Word-level vocabulary with the reserved control tokens the model relies on."""

from __future__ import annotations

from typing import Iterable, Sequence

PAD, START, END, UNK, QA_TASK, PAGE = "<pad>", "<s>", "</s>", "<unk>", "<qa>", "<page>"
RESERVED = (PAD, START, END, UNK, QA_TASK, PAGE)


def sentinel(i: int) -> str:
    return f"<extra_{i}>"


def tokenize(text: str) -> list[str]:
    return text.split()


class Vocab:
    """Fixed mapping between words and ids.

    Ids 0-5 are the reserved tokens, followed by ``n_sentinels`` span-corruption
    sentinels and then the words in the order given.
    """

    def __init__(self, words: Iterable[str] = (), n_sentinels: int = 16):
        self.n_sentinels = n_sentinels
        self.itos: list[str] = list(RESERVED) + [sentinel(i) for i in range(n_sentinels)]
        self.stoi: dict[str, int] = {w: i for i, w in enumerate(self.itos)}
        for w in words:
            if w not in self.stoi:
                self.stoi[w] = len(self.itos)
                self.itos.append(w)

    @classmethod
    def build(cls, texts: Iterable[str], n_sentinels: int = 16) -> "Vocab":
        words = set()
        for text in texts:
            words.update(tokenize(text))
        return cls(sorted(words), n_sentinels)

    @classmethod
    def from_tokens(cls, itos: Sequence[str]) -> "Vocab":
        n = sum(1 for w in itos if w.startswith("<extra_"))
        vocab = cls((), n)
        if list(itos[: len(vocab.itos)]) != vocab.itos:
            raise ValueError("token list does not start with the reserved and sentinel tokens")
        for w in itos[len(vocab.itos):]:
            vocab.stoi[w] = len(vocab.itos)
            vocab.itos.append(w)
        return vocab

    def __len__(self) -> int:
        return len(self.itos)

    def __eq__(self, other) -> bool:
        return isinstance(other, Vocab) and self.itos == other.itos

    pad_id = property(lambda self: 0)
    start_id = property(lambda self: 1)
    end_id = property(lambda self: 2)
    unk_id = property(lambda self: 3)
    qa_id = property(lambda self: 4)
    page_id = property(lambda self: 5)

    def sentinel_id(self, i: int) -> int:
        if not 0 <= i < self.n_sentinels:
            raise IndexError(f"sentinel {i} out of range (have {self.n_sentinels})")
        return len(RESERVED) + i

    def is_sentinel(self, token_id: int) -> bool:
        return len(RESERVED) <= token_id < len(RESERVED) + self.n_sentinels

    def encode(self, text_or_words) -> list[int]:
        words = tokenize(text_or_words) if isinstance(text_or_words, str) else text_or_words
        return [self.stoi.get(w, self.unk_id) for w in words]

    def decode(self, ids: Iterable[int]) -> str:
        words = []
        for i in ids:
            if i == self.end_id:
                break
            if i in (self.pad_id, self.start_id):
                continue
            words.append(self.itos[i])
        return " ".join(words)
