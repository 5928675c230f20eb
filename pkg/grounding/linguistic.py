"""
Linguistic branch: vocabulary, tokenization with [CLS]/[SEP]/[PAD]/[UNK],
embedding lookup and the linguistic transformer.
"""
import logging
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .exceptions import ContractError, FormatError
from .layers import Module, xavier_uniform
from .tensor import Tensor, embedding_lookup
from .transformer import PositionalEncoding, TransformerEncoder

logger = logging.getLogger(__name__)

PAD, UNK, CLS, SEP = '[PAD]', '[UNK]', '[CLS]', '[SEP]'
RESERVED = (PAD, UNK, CLS, SEP)
PAD_ID, UNK_ID, CLS_ID, SEP_ID = range(4)


def split_words(expression):
    return expression.lower().split()


class Vocabulary:
    """Word to id mapping; ids 0-3 are always [PAD], [UNK], [CLS], [SEP]."""

    def __init__(self, tokens):
        tokens = list(tokens)
        if tuple(tokens[:4]) != RESERVED:
            raise FormatError(f"vocabulary must start with {', '.join(RESERVED)}")
        self.tokens = tokens
        self.ids = {}
        for i, token in enumerate(tokens):
            if token in self.ids:
                raise FormatError(f"token '{token}' appears twice in the vocabulary")
            self.ids[token] = i

    def __len__(self):
        return len(self.tokens)

    def __contains__(self, word):
        return word in self.ids

    def __eq__(self, other):
        return isinstance(other, Vocabulary) and self.tokens == other.tokens

    def id_of(self, word):
        return self.ids.get(word, UNK_ID)

    def word_of(self, token_id):
        return self.tokens[token_id]

    def save(self, path):
        Path(path).write_text('\n'.join(self.tokens) + '\n', encoding='utf-8')

    @classmethod
    def load(cls, path):
        lines = Path(path).read_text(encoding='utf-8').splitlines()
        return cls(line for line in lines if line)


def build_vocab(corpus):
    """Assign ids to lowercase whitespace tokens in order of first occurrence."""
    corpus = list(corpus)
    if not corpus:
        raise ContractError("cannot build a vocabulary from an empty corpus")
    tokens = list(RESERVED)
    seen = set(tokens)
    for expression in corpus:
        for word in split_words(expression):
            if word not in seen:
                seen.add(word)
                tokens.append(word)
    logger.debug(f"Built vocabulary of {len(tokens)} tokens from {len(corpus)} expressions")
    return Vocabulary(tokens)


@dataclass
class TokenizedText:
    ids: np.ndarray
    mask: np.ndarray

    @property
    def valid_count(self):
        return int(self.mask.sum())


def tokenize(expression, vocab, max_len):
    """[CLS] w1 .. wm [SEP] [PAD]..., words truncated to max_len - 2."""
    if max_len < 3:
        raise ContractError(f"max_len must be at least 3, got {max_len}")
    words = split_words(expression)[:max_len - 2]
    ids = [CLS_ID] + [vocab.id_of(word) for word in words] + [SEP_ID]
    mask = np.zeros(max_len, dtype=bool)
    mask[:len(ids)] = True
    ids = np.array(ids + [PAD_ID] * (max_len - len(ids)), dtype=np.int64)
    return TokenizedText(ids, mask)


def detokenize(ids, vocab):
    words = []
    for token_id in ids[1:]:
        if token_id in (SEP_ID, PAD_ID):
            break
        words.append(vocab.word_of(int(token_id)))
    return ' '.join(words)


@dataclass
class LinguisticTokens:
    embeddings: Tensor
    token_mask: np.ndarray
    cls_index: int = 0


class LinguisticBranch(Module):
    def __init__(self, config, vocab_size, rng):
        super().__init__()
        self.embedding = xavier_uniform(rng, vocab_size, config.text_dim)
        self.positions = PositionalEncoding('learnable-1d', config.text_dim, max_len=config.max_text_len, rng=rng)
        self.encoder = None
        if config.linguistic_transformer:
            self.encoder = TransformerEncoder(
                config.text_layers, config.text_dim, config.text_heads,
                config.ffn_ratio * config.text_dim, config.dropout, rng,
            )

    def __call__(self, ids, mask, rng=None):
        """ids and mask are (B, N_l); [PAD] keys are masked in every layer."""
        tokens = embedding_lookup(self.embedding, ids)
        if self.encoder is not None:
            tokens, _ = self.encoder(tokens, mask, self.positions(length=ids.shape[1]), rng)
        return LinguisticTokens(tokens, np.asarray(mask, dtype=bool))
