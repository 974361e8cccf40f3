"""Tweet text pipeline: tokenizer, vocabulary, JSONL dataset loading and
the two split protocols (leave-one-event-out and stratified holdout).

Input is a JSONL file, one object per line:

    {"id": str, "text": str, "event": str,
     "labels": {"detection": "Rumor"|"Nonrumor"|null,
                "stance": "Support"|"Deny"|"Comment"|"Query"|null,
                "veracity": "True"|"False"|"Unverified"|null}}

Tracking labels are not stored; they are derived from the event string at
training time (binary relative to a query event, or the event itself for
the five-way setup).
"""

from __future__ import annotations

import json
import logging
import re
from dataclasses import dataclass, field
from typing import Callable, Iterable, Sequence

import numpy as np

log = logging.getLogger(__name__)

PAD_ID = 0
UNK_ID = 1
BOS_ID = 2
EOS_ID = 3

PAD_TOKEN = "⟨pad⟩"
UNK_TOKEN = "⟨unk⟩"
BOS_TOKEN = "⟨bos⟩"
EOS_TOKEN = "⟨eos⟩"
URL_TOKEN = "⟨url⟩"
USER_TOKEN = "⟨user⟩"
NUM_TOKEN = "⟨num⟩"

_SPECIAL_TOKENS = (PAD_TOKEN, UNK_TOKEN, BOS_TOKEN, EOS_TOKEN)

DETECTION_LABELS = ("Nonrumor", "Rumor")
STANCE_LABELS = ("Support", "Deny", "Comment", "Query")
VERACITY_LABELS = ("True", "False", "Unverified")

# Alternatives are tried in order: placeholders pass through unchanged
# (this is what makes the tokenizer idempotent), then URLs, mentions,
# hashtags, standalone numbers, words, and finally any single
# non-space character as punctuation.
_TOKEN_RE = re.compile(
    r"⟨url⟩|⟨user⟩|⟨num⟩"
    r"|https?://\S+"
    r"|www\.\S+"
    r"|@\w+"
    r"|#\w+"
    r"|\d+(?:[.,]\d+)*(?!\w)"
    r"|\w+"
    r"|\S"
)

# A piece is a number only when it is nothing but digits and digit
# groups; words that merely start with a digit ("9news") stay words.
_NUM_ONLY_RE = re.compile(r"\d+(?:[.,]\d+)*")


def tokenize(text: str) -> list[str]:
    """Lowercase and split tweet text into tokens.

    URLs become ⟨url⟩, user mentions ⟨user⟩ and standalone numbers
    ⟨num⟩; hashtags keep their word with the '#' dropped; punctuation is
    split off one character at a time.  Idempotent: re-tokenizing the
    space-joined output reproduces it.
    """
    out = []
    for piece in _TOKEN_RE.findall(text.lower()):
        if piece in (URL_TOKEN, USER_TOKEN, NUM_TOKEN):
            out.append(piece)
        elif piece.startswith(("http://", "https://", "www.")):
            out.append(URL_TOKEN)
        elif piece.startswith("@") and len(piece) > 1:
            out.append(USER_TOKEN)
        elif piece.startswith("#") and len(piece) > 1:
            body = piece[1:]
            out.append(NUM_TOKEN if _NUM_ONLY_RE.fullmatch(body) else body)
        elif _NUM_ONLY_RE.fullmatch(piece):
            out.append(NUM_TOKEN)
        else:
            out.append(piece)
    return out


class Vocabulary:
    """Token/id bijection with four reserved ids: PAD=0, UNK=1, BOS=2,
    EOS=3.  Non-special tokens start at id 4."""

    def __init__(self, tokens: Sequence[str], min_freq: int = 1):
        self.min_freq = min_freq
        self._id_to_token = list(_SPECIAL_TOKENS) + list(tokens)
        self._token_to_id = {t: i for i, t in enumerate(self._id_to_token)}
        if len(self._token_to_id) != len(self._id_to_token):
            seen = set()
            dup = next(t for t in self._id_to_token if t in seen or seen.add(t))
            raise ValueError(f"Vocabulary: duplicate token {dup!r}")

    def __len__(self) -> int:
        return len(self._id_to_token)

    def __contains__(self, token: str) -> bool:
        return token in self._token_to_id

    def id_of(self, token: str) -> int:
        return self._token_to_id.get(token, UNK_ID)

    def token_of(self, idx: int) -> str:
        if not 0 <= idx < len(self._id_to_token):
            raise ValueError(f"Vocabulary: id {idx} out of range [0, {len(self)})")
        return self._id_to_token[idx]

    def save(self, path) -> None:
        """Write non-special tokens, one per line; line number = id - 4."""
        with open(path, "w", encoding="utf-8") as fh:
            for token in self._id_to_token[4:]:
                fh.write(token + "\n")

    @classmethod
    def load(cls, path) -> "Vocabulary":
        with open(path, encoding="utf-8") as fh:
            tokens = [line.rstrip("\n") for line in fh]
        return cls([t for t in tokens if t])


def build_vocab(corpus: Iterable, min_freq: int = 2) -> Vocabulary:
    """Count tokens over the corpus (raw strings are tokenized, lists of
    tokens used as-is) and keep those seen at least ``min_freq`` times,
    ordered by descending count then lexicographically."""
    if min_freq < 1:
        raise ValueError(f"build_vocab: min_freq must be >= 1, got {min_freq}")
    counts: dict[str, int] = {}
    for item in corpus:
        tokens = tokenize(item) if isinstance(item, str) else item
        for t in tokens:
            counts[t] = counts.get(t, 0) + 1
    kept = sorted(
        (t for t, c in counts.items() if c >= min_freq and t not in _SPECIAL_TOKENS),
        key=lambda t: (-counts[t], t),
    )
    if not kept:
        log.warning("build_vocab: no token reached min_freq=%d; vocabulary is specials only",
                    min_freq)
    return Vocabulary(kept, min_freq=min_freq)


def encode_tokens(tokens: Sequence[str], vocab: Vocabulary, max_len: int) -> list[int]:
    """BOS + token ids (UNK for out-of-vocabulary) + EOS, truncated to at
    most ``max_len`` ids total with BOS and EOS always kept."""
    if max_len < 3:
        raise ValueError(f"encode_tokens: max_len must be >= 3, got {max_len}")
    interior = [vocab.id_of(t) for t in tokens]
    if len(interior) > max_len - 2:
        interior = interior[: max_len - 2]
    return [BOS_ID] + interior + [EOS_ID]


def decode_ids(ids: Sequence[int], vocab: Vocabulary) -> list[str]:
    """Tokens for ``ids`` with PAD/BOS/EOS stripped."""
    return [vocab.token_of(i) for i in ids if i not in (PAD_ID, BOS_ID, EOS_ID)]


@dataclass(frozen=True)
class Example:
    """One tweet with its source event and whatever task labels exist."""

    id: str
    text: str
    tokens: tuple
    event: str
    detection: str | None = None
    stance: str | None = None
    veracity: str | None = None

    def label(self, task: str) -> str | None:
        if task == "detection":
            return self.detection
        if task == "stance":
            return self.stance
        if task == "veracity":
            return self.veracity
        raise ValueError(f"Example.label: unknown task {task!r}")


@dataclass(frozen=True)
class Dataset:
    """An immutable collection of examples plus the load skip report."""

    examples: tuple
    skipped: tuple = field(default=(), compare=False)

    def __len__(self) -> int:
        return len(self.examples)

    def __iter__(self):
        return iter(self.examples)

    def __getitem__(self, i):
        return self.examples[i]

    @property
    def events(self) -> list[str]:
        seen: dict[str, None] = {}
        for ex in self.examples:
            seen.setdefault(ex.event, None)
        return list(seen)

    def class_counts(self, task: str) -> dict[str, int]:
        """Label histogram for one task; unlabeled examples are omitted."""
        counts: dict[str, int] = {}
        for ex in self.examples:
            lab = ex.label(task)
            if lab is not None:
                counts[lab] = counts.get(lab, 0) + 1
        return counts

    def texts(self) -> list[str]:
        return [ex.text for ex in self.examples]


def _parse_line(obj: dict) -> Example:
    if not isinstance(obj, dict):
        raise ValueError("line is not a JSON object")
    for key, kind in (("id", str), ("text", str), ("event", str)):
        if key not in obj:
            raise ValueError(f"missing field {key!r}")
        if not isinstance(obj[key], kind):
            raise ValueError(f"field {key!r} has value {obj[key]!r}, expected a string")
    labels = obj.get("labels") or {}
    if not isinstance(labels, dict):
        raise ValueError(f"field 'labels' has value {labels!r}, expected an object")

    def pick(name: str, allowed: tuple) -> str | None:
        value = labels.get(name)
        if value is None:
            return None
        if value not in allowed:
            raise ValueError(
                f"unknown {name} label {value!r}; expected one of {list(allowed)}"
            )
        return value

    return Example(
        id=obj["id"],
        text=obj["text"],
        tokens=tuple(tokenize(obj["text"])),
        event=obj["event"],
        detection=pick("detection", DETECTION_LABELS),
        stance=pick("stance", STANCE_LABELS),
        veracity=pick("veracity", VERACITY_LABELS),
    )


def load_dataset(path) -> Dataset:
    """Read a JSONL file into a Dataset.

    Malformed lines (bad JSON, missing fields, labels outside their
    enumerated sets) are skipped; each skip is recorded as (line number,
    reason) on the returned Dataset and summarized in a warning.
    """
    examples = []
    skipped = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                obj = json.loads(line)
            except json.JSONDecodeError as exc:
                skipped.append((lineno, f"invalid JSON: {exc.msg}"))
                continue
            try:
                examples.append(_parse_line(obj))
            except ValueError as exc:
                skipped.append((lineno, str(exc)))
    if skipped:
        lines = ", ".join(str(n) for n, _ in skipped[:20])
        log.warning("load_dataset: skipped %d line(s) (%s%s)",
                    len(skipped), lines, "..." if len(skipped) > 20 else "")
    if not examples:
        log.warning("load_dataset: %s produced an empty dataset", path)
    ds = Dataset(examples=tuple(examples), skipped=tuple(skipped))
    for task in ("detection", "stance", "veracity"):
        counts = ds.class_counts(task)
        if counts:
            log.info("load_dataset: %s labels: %s", task,
                     ", ".join(f"{k}={v}" for k, v in sorted(counts.items())))
    return ds


def split_leave_one_out(dataset: Dataset, held_out_event: str):
    """Exact partition: test = every example of ``held_out_event``,
    train = everything else."""
    events = dataset.events
    if held_out_event not in events:
        raise ValueError(
            f"split_leave_one_out: unknown event {held_out_event!r}; "
            f"available events: {events}"
        )
    if len(events) < 2:
        raise ValueError(
            "split_leave_one_out: dataset has a single event; train side would be empty"
        )
    train = tuple(ex for ex in dataset if ex.event != held_out_event)
    test = tuple(ex for ex in dataset if ex.event == held_out_event)
    return Dataset(train), Dataset(test)


def split_holdout(dataset: Dataset, fraction: float, seed: int,
                  label_of: Callable | None = None):
    """Random split with ``fraction`` of examples held out for test.

    When ``label_of`` is given (an Example -> label function), the split
    is stratified: each label's test share is its count times the
    fraction, rounded, so class ratios hold within one example.  Labels
    with fewer than two members go entirely to train with a warning.
    Deterministic for a given seed.
    """
    if not 0.0 < fraction < 1.0:
        raise ValueError(f"split_holdout: fraction must be in (0, 1), got {fraction}")
    rng = np.random.default_rng(seed)
    groups: dict = {}
    for i, ex in enumerate(dataset):
        key = label_of(ex) if label_of is not None else ""
        groups.setdefault(key, []).append(i)

    test_idx = set()
    for key in sorted(groups, key=lambda k: (k is None, str(k))):
        members = groups[key]
        if label_of is not None and key is not None and len(members) < 2:
            log.warning("split_holdout: class %r has %d example(s); kept in train",
                        key, len(members))
            continue
        n_test = int(round(len(members) * fraction))
        n_test = min(n_test, len(members) - 1) if len(members) > 1 else 0
        order = rng.permutation(len(members))
        test_idx.update(members[j] for j in order[:n_test])

    train = tuple(ex for i, ex in enumerate(dataset) if i not in test_idx)
    test = tuple(ex for i, ex in enumerate(dataset) if i in test_idx)
    return Dataset(train), Dataset(test)


def pad_batch(id_seqs: Sequence[Sequence[int]]):
    """Right-pad id sequences with PAD into an (n, max_T) int array and a
    matching float mask (1.0 where real, 0.0 where padding)."""
    if not id_seqs:
        raise ValueError("pad_batch: empty batch")
    width = max(len(s) for s in id_seqs)
    ids = np.full((len(id_seqs), width), PAD_ID, dtype=np.intp)
    mask = np.zeros((len(id_seqs), width), dtype=np.float64)
    for r, seq in enumerate(id_seqs):
        ids[r, : len(seq)] = seq
        mask[r, : len(seq)] = 1.0
    return ids, mask
