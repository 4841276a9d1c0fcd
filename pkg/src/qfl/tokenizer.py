"""Closed-vocabulary word tokenizer."""

from __future__ import annotations

import json
from pathlib import Path
from typing import Iterable

PAD, CLS, BOS, EOS, UNK, SEP = "[PAD]", "[CLS]", "[BOS]", "[EOS]", "[UNK]", "[SEP]"
SPECIALS = (PAD, CLS, BOS, EOS, UNK, SEP)


class Tokenizer:
    """Whitespace tokenizer; ids 0-5 are the special tokens, then words in sorted order."""

    def __init__(self, words: Iterable[str], marker_words: Iterable[str] = ()):
        words = sorted(set(words))
        for w in words:
            if w in SPECIALS or not w or any(ch.isspace() for ch in w):
                raise ValueError(f"invalid vocabulary word {w!r}")
        self.itos = list(SPECIALS) + words
        self.stoi = {w: i for i, w in enumerate(self.itos)}
        self.marker_ids = frozenset(self.stoi[w] for w in marker_words if w in self.stoi)

    @classmethod
    def from_texts(cls, texts: Iterable[str], marker_words: Iterable[str] = ()) -> Tokenizer:
        words = set()
        for t in texts:
            words.update(t.split())
        return cls(words, marker_words)

    pad_id = property(lambda self: 0)
    cls_id = property(lambda self: 1)
    bos_id = property(lambda self: 2)
    eos_id = property(lambda self: 3)
    unk_id = property(lambda self: 4)
    sep_id = property(lambda self: 5)

    def __len__(self) -> int:
        return len(self.itos)

    @property
    def vocab_size(self) -> int:
        return len(self.itos)

    def tokenize(self, text: str) -> list[int]:
        return [self.stoi.get(w, self.unk_id) for w in text.split()]

    def detokenize(self, ids: Iterable[int], skip_special: bool = True) -> str:
        out = []
        for i in ids:
            i = int(i)
            if skip_special and i < len(SPECIALS):
                continue
            out.append(self.itos[i])
        return " ".join(out)

    def to_json(self) -> str:
        vocab = {w: i for i, w in enumerate(self.itos)}
        markers = sorted(self.itos[i] for i in self.marker_ids)
        return json.dumps({"vocab": vocab, "markers": markers}, sort_keys=True, indent=1)

    @classmethod
    def from_json(cls, text: str) -> Tokenizer:
        obj = json.loads(text)
        words = [w for w in obj["vocab"] if w not in SPECIALS]
        tok = cls(words, obj["markers"])
        if tok.stoi != obj["vocab"]:
            raise ValueError("vocabulary ids are not in canonical order")
        return tok

    def save(self, path) -> None:
        Path(path).write_text(self.to_json() + "\n", encoding="utf-8")

    @classmethod
    def load(cls, path) -> Tokenizer:
        return cls.from_json(Path(path).read_text(encoding="utf-8"))
