"""Word-level vocabulary, turn encoding, and masked-language-model batches.

The text side of the model is deliberately simple: utterances come from a
closed simulated domain, so a word-level vocabulary with an UNK fallback
covers it. Action names ride along in the token stream as dedicated
special tokens (one per action) so an action's identity is never split
across word pieces.
"""

from __future__ import annotations

import re
from dataclasses import dataclass
from pathlib import Path
from typing import Dict, Iterable, List, Sequence, Tuple, Union

import numpy as np

from nap.errors import ConfigError, UnknownActionError

PAD, UNK, CLS, SEP, MASK = "[PAD]", "[UNK]", "[CLS]", "[SEP]", "[MASK]"
CORE_SPECIALS = (PAD, UNK, CLS, SEP, MASK)
ACTION_PREFIX = "ACT:"
MAX_LEN = 128
HISTORY_CAP = 10          # most recent actions kept in the text channel
IGNORE_LABEL = -100       # MLM label sentinel for positions not predicted

_WORD_RE = re.compile(r"[a-z0-9']+")


def normalize_words(text: str) -> List[str]:
    """Lower-case and split into word tokens, discarding punctuation."""
    return _WORD_RE.findall(text.lower())


class Vocab:
    """Immutable token table: core specials, one token per action, then words.

    ids are dense and 0-based with PAD == 0. Word ids are assigned by
    descending corpus frequency with lexicographic tie-breaks, so the same
    corpus always produces the same table.
    """

    def __init__(self, action_names: Sequence[str], words: Sequence[str],
                 min_freq: int = 1):
        self.action_names = tuple(action_names)
        self.min_freq = int(min_freq)
        tokens = list(CORE_SPECIALS)
        tokens.extend(ACTION_PREFIX + a for a in action_names)
        self.n_special = len(tokens)
        tokens.extend(words)
        if len(set(tokens)) != len(tokens):
            raise ConfigError("duplicate tokens in vocabulary")
        self.id_to_token: Tuple[str, ...] = tuple(tokens)
        self.token_to_id: Dict[str, int] = {t: i for i, t in enumerate(tokens)}

    # -- ids ---------------------------------------------------------------

    pad_id, unk_id, cls_id, sep_id, mask_id = 0, 1, 2, 3, 4

    def __len__(self) -> int:
        return len(self.id_to_token)

    def is_special(self, token_id: int) -> bool:
        return token_id < self.n_special

    def action_token_id(self, action_name: str) -> int:
        try:
            return self.token_to_id[ACTION_PREFIX + action_name]
        except KeyError:
            raise UnknownActionError([action_name]) from None

    def word_id(self, word: str) -> int:
        return self.token_to_id.get(word, self.unk_id)

    def encode_words(self, text: str) -> List[int]:
        return [self.word_id(w) for w in normalize_words(text)]

    def decode(self, ids: Iterable[int], keep_structure: bool = False) -> List[str]:
        """ids -> token strings. By default PAD/CLS/SEP/MASK are dropped and
        action tokens keep their ``ACT:`` prefix; ``keep_structure`` keeps
        everything verbatim."""
        out = []
        structural = {self.pad_id, self.cls_id, self.sep_id, self.mask_id}
        for i in ids:
            i = int(i)
            if not keep_structure and i in structural:
                continue
            out.append(self.id_to_token[i])
        return out


def build_vocab(corpus: Iterable[str], min_freq: int, action_names: Sequence[str]) -> Vocab:
    """Count words over the corpus and keep those seen at least min_freq times."""
    counts: Dict[str, int] = {}
    saw_any = False
    for utterance in corpus:
        saw_any = True
        for w in normalize_words(utterance):
            counts[w] = counts.get(w, 0) + 1
    if not saw_any:
        raise ConfigError("cannot build a vocabulary from an empty corpus")
    if min_freq < 1:
        raise ConfigError(f"min_freq must be >= 1, got {min_freq}")
    kept = sorted((w for w, c in counts.items() if c >= min_freq),
                  key=lambda w: (-counts[w], w))
    return Vocab(action_names, kept, min_freq=min_freq)


def encode_turn(utterance: str, action_history: Sequence[str], vocab: Vocab,
                max_len: int = MAX_LEN) -> Tuple[np.ndarray, np.ndarray]:
    """Encode one turn as ``[CLS] words [SEP] ACT:... [SEP]`` padded to max_len.

    The action channel wins over the utterance when space runs out: the
    utterance is truncated from the left (oldest words first), and only if
    the frame alone overflows are the oldest of the (at most HISTORY_CAP)
    retained actions dropped. Returns (ids, attention_mask), both int64.
    """
    word_ids = vocab.encode_words(utterance)
    recent = list(action_history)[-HISTORY_CAP:]
    act_ids = [vocab.action_token_id(a) for a in recent]
    frame = 3  # CLS + 2 * SEP
    while len(act_ids) + frame > max_len:
        act_ids.pop(0)
    budget = max_len - frame - len(act_ids)
    if len(word_ids) > budget:
        word_ids = word_ids[len(word_ids) - budget:]
    ids = [vocab.cls_id, *word_ids, vocab.sep_id, *act_ids, vocab.sep_id]
    n = len(ids)
    ids.extend([vocab.pad_id] * (max_len - n))
    mask = [1] * n + [0] * (max_len - n)
    return np.asarray(ids, dtype=np.int64), np.asarray(mask, dtype=np.int64)


def encode_batch(turns: Sequence[Tuple[str, Sequence[str]]], vocab: Vocab,
                 max_len: int = MAX_LEN) -> Tuple[np.ndarray, np.ndarray]:
    """Stack encode_turn over (utterance, action_history) pairs."""
    ids = np.empty((len(turns), max_len), dtype=np.int64)
    mask = np.empty((len(turns), max_len), dtype=np.int64)
    for row, (utterance, history) in enumerate(turns):
        ids[row], mask[row] = encode_turn(utterance, history, vocab, max_len)
    return ids, mask


@dataclass(frozen=True)
class MaskedBatch:
    """Inputs and labels for one masked-language-model step."""
    input_ids: np.ndarray       # [rows, len] after corruption
    attention_mask: np.ndarray  # [rows, len]
    mlm_labels: np.ndarray      # [rows, len]; IGNORE_LABEL except selected positions
    original_ids: np.ndarray    # [rows, len] uncorrupted


def mask_for_mlm(ids: np.ndarray, vocab: Vocab, mask_prob: float = 0.15,
                 rng_seed: int = 0) -> MaskedBatch:
    """Select ~mask_prob of each row's word positions and corrupt them.

    Selection is exact-count per row: round(mask_prob * candidates), where
    candidates are non-special positions (PAD and action tokens excluded).
    Corruption follows the 80/10/10 recipe: mask token, random word token,
    or left unchanged; labels carry the original id at selected positions
    and IGNORE_LABEL elsewhere.
    """
    if not 0.0 < mask_prob < 1.0:
        raise ConfigError(f"mask_prob must be in (0, 1), got {mask_prob}")
    ids = np.asarray(ids, dtype=np.int64)
    squeeze = ids.ndim == 1
    if squeeze:
        ids = ids[None, :]
    rng = np.random.default_rng(rng_seed)
    out = ids.copy()
    labels = np.full_like(ids, IGNORE_LABEL)
    n_words = len(vocab) - vocab.n_special
    for row in range(ids.shape[0]):
        candidates = np.flatnonzero(ids[row] >= vocab.n_special)
        n_pick = int(round(mask_prob * candidates.size))
        if n_pick == 0:
            continue
        picked = rng.permutation(candidates)[:n_pick]
        labels[row, picked] = ids[row, picked]
        rolls = rng.random(n_pick)
        for pos, u in zip(picked, rolls):
            if u < 0.8:
                out[row, pos] = vocab.mask_id
            elif u < 0.9 and n_words > 0:
                out[row, pos] = vocab.n_special + rng.integers(n_words)
            # else: unchanged, but still predicted
    mask = (ids != vocab.pad_id).astype(np.int64)
    if squeeze:
        return MaskedBatch(out[0], mask[0], labels[0], ids[0])
    return MaskedBatch(out, mask, labels, ids)


def save_vocab(path: Union[str, Path], vocab: Vocab) -> None:
    """Write ``token<TAB>id`` lines in id order (specials first by construction)."""
    lines = [f"{tok}\t{i}" for i, tok in enumerate(vocab.id_to_token)]
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


def load_vocab(path: Union[str, Path]) -> Vocab:
    text = Path(path).read_text(encoding="utf-8")
    tokens: List[str] = []
    for lineno, line in enumerate(text.splitlines()):
        if not line:
            continue
        try:
            tok, id_str = line.split("\t")
        except ValueError:
            raise ConfigError(f"vocab line {lineno + 1}: expected token<TAB>id") from None
        if int(id_str) != len(tokens):
            raise ConfigError(f"vocab line {lineno + 1}: ids must be dense and in order")
        tokens.append(tok)
    if tuple(tokens[:len(CORE_SPECIALS)]) != CORE_SPECIALS:
        raise ConfigError("vocab file must start with the core special tokens")
    rest = tokens[len(CORE_SPECIALS):]
    actions = []
    for tok in rest:
        if not tok.startswith(ACTION_PREFIX):
            break
        actions.append(tok[len(ACTION_PREFIX):])
    words = rest[len(actions):]
    if any(w.startswith(ACTION_PREFIX) for w in words):
        raise ConfigError("action tokens must precede word tokens in the vocab file")
    return Vocab(actions, words)
