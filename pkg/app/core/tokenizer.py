"""
Whitespace tokenizer with character fallback over a fixed synthetic vocabulary
"""
import string
from typing import Dict, Iterable, List, Sequence

PAD, SEP, UNK = 0, 1, 2
RESERVED = ["<pad>", "<sep>", "<unk>"]

# Tokens every vocabulary carries: template words, punctuation, single characters
TEMPLATE_WORDS = [
    ":", ",", ".", "?", "[", "]", "(", ")",
    "options", "task", "which", "option", "fits", "extract", "the", "marked", "phrase",
]
CHARACTERS = list(string.ascii_lowercase + string.digits)


class Vocabulary:
    """Bidirectional token <-> id map with reserved PAD/SEP/UNK ids"""

    def __init__(self, words: Iterable[str]):
        self.tokens: List[str] = list(RESERVED)
        self.index: Dict[str, int] = {tok: i for i, tok in enumerate(self.tokens)}
        for w in list(TEMPLATE_WORDS) + list(CHARACTERS) + list(words):
            self.add(w)

    def add(self, token: str) -> int:
        if not token or any(ch.isspace() for ch in token):
            raise ValueError(f"invalid token {token!r}")
        if token not in self.index:
            self.index[token] = len(self.tokens)
            self.tokens.append(token)
        return self.index[token]

    def __len__(self) -> int:
        return len(self.tokens)

    def __contains__(self, token: str) -> bool:
        return token in self.index

    def encode_word(self, word: str) -> List[int]:
        if word in self.index:
            return [self.index[word]]
        if all(ch in self.index for ch in word):
            return [self.index[ch] for ch in word]
        return [UNK]

    def encode(self, text: str) -> List[int]:
        ids: List[int] = []
        for word in text.split():
            ids.extend(self.encode_word(word))
        return ids

    def decode(self, ids: Sequence[int]) -> str:
        return " ".join(self.tokens[i] for i in ids)
