"""Deterministic synthetic paired corpus: character strings + feature frames.

Each character owns a fixed prototype vector (drawn once from the corpus
seed). An utterance's features are its characters' prototypes, each repeated
for a random number of frames, plus Gaussian noise. That makes the
acoustic-to-token mapping exactly learnable, with `noise_std` as the
difficulty knob, and the true alignment approximately monotonic.

Two knobs make the task text-dependent rather than purely acoustic:

* Texts are sampled from a seeded sparse successor graph: after each
  character, only `text_branching` characters may follow (uniform among
  them). Branching >= vocab_chars degenerates to i.i.d. uniform characters.
* The first `2 * confusable_pairs` characters form confusable pairs: each
  odd prototype sits exactly `confusable_gap` away from its even partner's,
  so at moderate noise those pairs are hard to tell apart from a frame
  alone. Resolving them requires context, not just the local frames. No
  utterance ever contains both members of a pair, so the token side of an
  utterance is always unambiguous about which member it holds.

Generation is bit-reproducible from the seed; train/dev/test use independent
spawned RNG streams and disjoint utterance ids.
"""

from __future__ import annotations

import os
from dataclasses import dataclass

import numpy as np

from . import arrayio
from .ctc import NUM_RESERVED, min_frames

_ALPHABET = "abcdefghijklmnopqrstuvwxyz0123456789"

SPLITS = ("train", "dev", "test")


@dataclass
class CorpusConfig:
    vocab_chars: int = 30
    num_train: int = 640
    num_dev: int = 80
    num_test: int = 320
    min_len: int = 2
    max_len: int = 5
    frames_min: int = 8
    frames_max: int = 10
    noise_std: float = 0.8
    feat_dim: int = 16
    text_branching: int = 4
    confusable_pairs: int = 5
    confusable_gap: float = 0.25
    seed: int = 0

    def __post_init__(self):
        if not 1 <= self.vocab_chars <= len(_ALPHABET):
            raise ValueError(
                f"vocab_chars must be in [1, {len(_ALPHABET)}], got {self.vocab_chars}"
            )
        if self.min_len < 1 or self.min_len > self.max_len:
            raise ValueError("need 1 <= min_len <= max_len")
        if self.frames_min < 1 or self.frames_min > self.frames_max:
            raise ValueError("need 1 <= frames_min <= frames_max")
        if self.noise_std < 0:
            raise ValueError("noise_std must be >= 0")
        if self.feat_dim < 1:
            raise ValueError("feat_dim must be positive")
        if self.text_branching < 1:
            raise ValueError("text_branching must be positive")
        if not 0 <= 2 * self.confusable_pairs <= self.vocab_chars:
            raise ValueError("need 0 <= 2 * confusable_pairs <= vocab_chars")
        if self.confusable_gap < 0:
            raise ValueError("confusable_gap must be >= 0")

    @property
    def alphabet(self) -> str:
        return _ALPHABET[: self.vocab_chars]


@dataclass
class Utterance:
    utt_id: str
    text: str
    tokens: list[int]
    features: np.ndarray  # T x feat_dim


def tokenize(text: str, vocab_chars: int = 30) -> list[int]:
    """Character ids offset past the reserved {BLANK, CLS, SEP} block."""
    alphabet = _ALPHABET[:vocab_chars]
    out = []
    for pos, ch in enumerate(text):
        idx = alphabet.find(ch)
        if idx < 0:
            raise ValueError(f"tokenize: unknown character {ch!r} at position {pos}")
        out.append(NUM_RESERVED + idx)
    return out


def detokenize(tokens: list[int], vocab_chars: int = 30) -> str:
    alphabet = _ALPHABET[:vocab_chars]
    chars = []
    for pos, t in enumerate(tokens):
        idx = t - NUM_RESERVED
        if not 0 <= idx < len(alphabet):
            raise ValueError(f"detokenize: id {t} at position {pos} is not a character")
        chars.append(alphabet[idx])
    return "".join(chars)


def prototype_matrix(cfg: CorpusConfig) -> np.ndarray:
    """The per-character feature prototypes implied by the corpus seed.

    Odd characters inside the paired block are rewritten as near-copies of
    their even partner: prototype[2k+1] = prototype[2k] + confusable_gap *
    (unit direction), for k < confusable_pairs.
    """
    proto_ss = np.random.SeedSequence(cfg.seed).spawn(1 + len(SPLITS))[0]
    rng = np.random.default_rng(proto_ss)
    protos = rng.normal(0.0, 1.0, size=(cfg.vocab_chars, cfg.feat_dim))
    for hi in range(1, 2 * cfg.confusable_pairs, 2):
        direction = rng.normal(0.0, 1.0, size=cfg.feat_dim)
        direction /= np.linalg.norm(direction)
        protos[hi] = protos[hi - 1] + cfg.confusable_gap * direction
    return protos


def successor_table(cfg: CorpusConfig) -> np.ndarray | None:
    """Allowed follow-up characters for each character, or None if unconstrained.

    The graph depends only on the corpus seed, so all splits share one
    language. Rows are sorted sets of `text_branching` character ids.
    """
    if cfg.text_branching >= cfg.vocab_chars:
        return None
    graph_ss = np.random.SeedSequence(cfg.seed).spawn(2 + len(SPLITS))[1 + len(SPLITS)]
    rng = np.random.default_rng(graph_ss)
    rows = [np.sort(rng.choice(cfg.vocab_chars, size=cfg.text_branching, replace=False))
            for _ in range(cfg.vocab_chars)]
    return np.stack(rows)


def _partner(c: int, confusable_pairs: int) -> int | None:
    """The confusable twin of character c (None for unpaired characters)."""
    twin = c ^ 1
    return twin if c < 2 * confusable_pairs else None


def _sample_char_ids(cfg: CorpusConfig, succ: np.ndarray | None, length: int, rng):
    """Draw a text, never using both members of a confusable pair at once.

    Keeping the pairs disjoint within an utterance matters for training: the
    text-side transport marginal then contains at most one member of any
    pair, so frames of a confusable character can only be coupled to the
    correct side of the pair.
    """
    banned: set[int] = set()

    def pick(options) -> int:
        allowed = [int(c) for c in options if int(c) not in banned]
        pool = allowed if allowed else [int(c) for c in options]
        c = pool[int(rng.integers(0, len(pool)))]
        twin = _partner(c, cfg.confusable_pairs)
        if twin is not None:
            banned.add(twin)
        return c

    ids = [pick(np.arange(cfg.vocab_chars))]
    while len(ids) < length:
        options = succ[ids[-1]] if succ is not None else np.arange(cfg.vocab_chars)
        ids.append(pick(options))
    return np.asarray(ids)


def _gen_split(cfg: CorpusConfig, split: str, count: int, protos, succ, rng) -> list[Utterance]:
    utts = []
    for i in range(count):
        length = int(rng.integers(cfg.min_len, cfg.max_len + 1))
        char_ids = _sample_char_ids(cfg, succ, length, rng)
        text = "".join(cfg.alphabet[c] for c in char_ids)
        tokens = [NUM_RESERVED + int(c) for c in char_ids]
        frames = [int(rng.integers(cfg.frames_min, cfg.frames_max + 1))
                  for _ in range(length)]
        # Keep every utterance usable: long enough for the 4x subsampling
        # minimum and for CTC feasibility after subsampling (T_a >= needed
        # states requires T >= 4*needed + 3).
        required = max(8, 4 * min_frames(tokens) + 3)
        deficit = required - sum(frames)
        if deficit > 0:
            frames[-1] += deficit
        rows = np.concatenate(
            [np.repeat(protos[c][None, :], n, axis=0)
             for c, n in zip(char_ids, frames)]
        )
        if cfg.noise_std > 0:
            rows = rows + rng.normal(0.0, cfg.noise_std, size=rows.shape)
        utts.append(Utterance(
            utt_id=f"{split}-{i:04d}",
            text=text,
            tokens=tokens,
            features=np.ascontiguousarray(rows),
        ))
    return utts


def gen_corpus(cfg: CorpusConfig) -> dict[str, list[Utterance]]:
    streams = np.random.SeedSequence(cfg.seed).spawn(1 + len(SPLITS))
    protos = prototype_matrix(cfg)
    succ = successor_table(cfg)
    counts = {"train": cfg.num_train, "dev": cfg.num_dev, "test": cfg.num_test}
    return {
        split: _gen_split(cfg, split, counts[split], protos, succ,
                          np.random.default_rng(streams[1 + k]))
        for k, split in enumerate(SPLITS)
    }


def save_corpus(out_dir, splits: dict[str, list[Utterance]]) -> None:
    for split, utts in splits.items():
        split_dir = os.path.join(out_dir, split)
        os.makedirs(split_dir, exist_ok=True)
        lines = []
        for utt in utts:
            arrayio.save_arrays(os.path.join(split_dir, f"{utt.utt_id}.arr"),
                                {"features": utt.features})
            lines.append(f"{utt.utt_id}\t{utt.text}\n")
        with open(os.path.join(split_dir, "manifest.txt"), "w") as f:
            f.writelines(lines)


def load_split(corpus_dir, split: str, vocab_chars: int = 30) -> list[Utterance]:
    manifest = os.path.join(corpus_dir, split, "manifest.txt")
    if not os.path.exists(manifest):
        raise FileNotFoundError(f"no manifest for split {split!r} at {manifest}")
    utts = []
    with open(manifest) as f:
        for line in f:
            line = line.rstrip("\n")
            if not line:
                continue
            utt_id, text = line.split("\t", 1)
            arrays = arrayio.load_arrays(
                os.path.join(corpus_dir, split, f"{utt_id}.arr"))
            utts.append(Utterance(
                utt_id=utt_id,
                text=text,
                tokens=tokenize(text, vocab_chars),
                features=arrays["features"],
            ))
    return utts
