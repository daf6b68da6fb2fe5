"""Synthetic question/context corpus plus a synthetic acoustic channel.

The corpus emulates a question-answering setup: two topic pools (A and B)
each own a disjoint inventory of rare entity words, every pool-A question
mentions a pool-A entity, and every entity is described by several
context sentences of its own pool.  A separate background pool of generic
sentences (no entities) pretrains the transducer and the retrieval LM.

Entity words are multi-piece: a plain first piece followed by "##"
continuation pieces ("do ##za ##ke" detokenizes to "dozake").  All pieces
also occur inside generic background words, so the acoustic model knows
every token, but the piece bigrams that make up an entity never appear
outside its pool.  A recognizer therefore tends to garble entity tails,
and retrieving continuations of the partially emitted entity from a
context datastore is exactly the information that repairs them.

The acoustic channel gives every token a fixed 16-dim unit-norm prototype
frame (seeded globally) repeated for 2-4 frames with Gaussian noise, so
alignment stays non-trivial while no real TTS or audio front-end is
involved.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .params import FormatError

FEATURE_MAGIC = b"RTFE"
FEATURE_VERSION = 1

_COMMON_WORDS = [
    "the", "a", "of", "in", "on", "who", "what", "where", "is", "was",
    "did", "does", "about", "tell", "me", "find", "show", "said", "to",
    "from", "by", "with", "at", "for", "and", "or", "it", "this", "that",
    "when",
]

_FIRST_PIECES = [c + v for c in "bdfgklmnpr" for v in "ao"]
_CONT_PIECES = ["##" + c + v for c in "stvzjh" for v in "aeiou"][:24]

_QUESTION_TEMPLATES = [
    ["who", "is", "E"],
    ["what", "is", "E", "about"],
    ["where", "is", "E"],
    ["tell", "me", "about", "E"],
    ["show", "me", "E", "and", "C"],
    ["what", "did", "E", "find"],
    ["when", "did", "E", "show", "C"],
    ["who", "said", "E", "was", "C"],
]

_CONTEXT_TEMPLATES = [
    ["the", "C", "of", "E", "was", "C"],
    ["E", "is", "a", "C", "C"],
    ["in", "the", "C", "E", "said", "C"],
    ["E", "was", "with", "C", "at", "the", "C"],
    ["the", "C", "said", "E", "did", "C"],
    ["it", "was", "E", "that", "C", "the", "C"],
    ["E", "and", "the", "C", "was", "from", "C"],
]


@dataclass(frozen=True)
class SyntheticCorpusSpec:
    seed: int = 0
    num_entities: int = 48
    zipf_exponent: float = 1.3
    contexts_per_entity: int = 6
    num_train_questions: int = 600
    num_val_questions: int = 150
    num_test_questions: int = 200
    num_background: int = 2500
    num_generic_words: int = 50
    feature_dim: int = 16
    sigma: float = 0.3

    def to_json(self) -> str:
        return json.dumps(self.__dict__, sort_keys=True, indent=2)

    @classmethod
    def from_json(cls, text: str) -> "SyntheticCorpusSpec":
        return cls(**json.loads(text))


class Vocabulary:
    """Bidirectional token string <-> id map, fixed at corpus build time."""

    def __init__(self, tokens: list):
        if len(set(tokens)) != len(tokens):
            raise ValueError("duplicate token strings")
        self.tokens = list(tokens)
        self.index = {t: i for i, t in enumerate(self.tokens)}

    def __len__(self) -> int:
        return len(self.tokens)

    def encode(self, words: list) -> np.ndarray:
        return np.array([self.index[w] for w in words], dtype=np.int64)

    def decode(self, ids) -> list:
        return [self.tokens[int(i)] for i in ids]

    def save(self, path):
        Path(path).write_text("\n".join(self.tokens) + "\n", encoding="utf-8")

    @classmethod
    def load(cls, path) -> "Vocabulary":
        lines = Path(path).read_text(encoding="utf-8").splitlines()
        return cls([ln for ln in lines if ln])


def detokenize(token_strings: list) -> list:
    """Merge "##" continuation pieces into their preceding word."""
    words: list = []
    for tok in token_strings:
        if tok.startswith("##") and words:
            words[-1] += tok[2:]
        else:
            words.append(tok[2:] if tok.startswith("##") else tok)
    return words


def token_mask_to_word_mask(token_strings: list, mask) -> list:
    """Project a per-token 0/1 mask onto detokenized words (any-piece rule)."""
    word_mask: list = []
    for tok, m in zip(token_strings, mask):
        if tok.startswith("##") and word_mask:
            word_mask[-1] = max(word_mask[-1], int(m))
        else:
            word_mask.append(int(m))
    return word_mask


@dataclass
class Utterance:
    tokens: np.ndarray
    entity_mask: np.ndarray
    feats: np.ndarray | None = None


@dataclass
class CorpusBundle:
    spec: SyntheticCorpusSpec
    vocab: Vocabulary
    entities_a: list
    entities_b: list
    questions: dict
    contexts_a: list
    contexts_b: list
    background: list
    prototypes: np.ndarray = field(repr=False)


def _distinct_piece_words(rng: np.random.Generator, count: int,
                          taken: set, min_pieces: int, max_pieces: int) -> list:
    words = []
    while len(words) < count:
        first = _FIRST_PIECES[rng.integers(0, len(_FIRST_PIECES))]
        n_cont = int(rng.integers(min_pieces, max_pieces + 1))
        conts = [_CONT_PIECES[rng.integers(0, len(_CONT_PIECES))]
                 for _ in range(n_cont)]
        word = (first, *conts)
        if word in taken:
            continue
        taken.add(word)
        words.append(word)
    return words


def _zipf_probs(n: int, exponent: float) -> np.ndarray:
    w = np.arange(1, n + 1, dtype=np.float64) ** -exponent
    return w / w.sum()


def _fill_template(template: list, entity: tuple,
                   rng: np.random.Generator) -> tuple:
    words: list = []
    mask: list = []
    for slot in template:
        if slot == "E":
            words.extend(entity)
            mask.extend([1] * len(entity))
        elif slot == "C":
            words.append(_COMMON_WORDS[rng.integers(0, len(_COMMON_WORDS))])
            mask.append(0)
        else:
            words.append(slot)
            mask.append(0)
    return words, mask


def token_prototypes(spec: SyntheticCorpusSpec, vocab_size: int) -> np.ndarray:
    """Unit-norm per-token frame prototypes, a pure function of the seed."""
    rng = np.random.default_rng([spec.seed, 7701])
    protos = rng.normal(size=(vocab_size, spec.feature_dim))
    return protos / np.linalg.norm(protos, axis=1, keepdims=True)


def synth_features(tokens, rng: np.random.Generator, prototypes: np.ndarray,
                   sigma: float) -> np.ndarray:
    """Each token emits 2-4 frames of its prototype plus Gaussian noise."""
    tokens = np.asarray(tokens, dtype=np.int64)
    if len(tokens) == 0:
        raise ValueError("cannot synthesize features for an empty utterance")
    durations = rng.integers(2, 5, size=len(tokens))
    frames = np.repeat(prototypes[tokens], durations, axis=0)
    if sigma > 0:
        frames = frames + sigma * rng.normal(size=frames.shape)
    return frames


def generate_corpus(spec: SyntheticCorpusSpec) -> CorpusBundle:
    """Deterministic function of the spec; see the module docstring."""
    rng = np.random.default_rng([spec.seed, 1001])
    vocab = Vocabulary(_COMMON_WORDS + _FIRST_PIECES + _CONT_PIECES)

    taken: set = set()
    generic = _distinct_piece_words(rng, spec.num_generic_words, taken, 1, 2)
    entities_a = _distinct_piece_words(rng, spec.num_entities, taken, 2, 3)
    entities_b = _distinct_piece_words(rng, spec.num_entities, taken, 2, 3)

    def make_contexts(entities: list) -> list:
        sentences = []
        for ent in entities:
            for _ in range(spec.contexts_per_entity):
                tpl = _CONTEXT_TEMPLATES[rng.integers(0, len(_CONTEXT_TEMPLATES))]
                words, _ = _fill_template(tpl, ent, rng)
                sentences.append(vocab.encode(words))
        order = rng.permutation(len(sentences))
        return [sentences[i] for i in order]

    contexts_a = make_contexts(entities_a)
    contexts_b = make_contexts(entities_b)

    zipf = _zipf_probs(spec.num_entities, spec.zipf_exponent)

    def make_questions(count: int) -> list:
        out = []
        for _ in range(count):
            ent = entities_a[rng.choice(spec.num_entities, p=zipf)]
            tpl = _QUESTION_TEMPLATES[rng.integers(0, len(_QUESTION_TEMPLATES))]
            words, mask = _fill_template(tpl, ent, rng)
            out.append(Utterance(tokens=vocab.encode(words),
                                 entity_mask=np.array(mask, dtype=np.int8)))
        return out

    questions = {"train": make_questions(spec.num_train_questions),
                 "val": make_questions(spec.num_val_questions),
                 "test": make_questions(spec.num_test_questions)}

    # Half the background follows the question/context templates with
    # generic words in the entity slot, half is free word salad: the
    # recognizer learns the sentence shapes without ever seeing an entity.
    background = []
    tpl_pool = _QUESTION_TEMPLATES + _CONTEXT_TEMPLATES
    for _ in range(spec.num_background):
        if rng.random() < 0.5:
            tpl = tpl_pool[rng.integers(0, len(tpl_pool))]
            filler = generic[rng.integers(0, len(generic))]
            words, _ = _fill_template(tpl, filler, rng)
        else:
            length = int(rng.integers(5, 11))
            words = []
            while len(words) < length:
                if rng.random() < 0.3:
                    words.extend(generic[rng.integers(0, len(generic))])
                else:
                    words.append(_COMMON_WORDS[rng.integers(0, len(_COMMON_WORDS))])
        background.append(Utterance(tokens=vocab.encode(words),
                                    entity_mask=np.zeros(len(words), dtype=np.int8)))

    prototypes = token_prototypes(spec, len(vocab))
    feat_rng = np.random.default_rng([spec.seed, 2002])
    for split in ("train", "val", "test"):
        for utt in questions[split]:
            utt.feats = synth_features(utt.tokens, feat_rng, prototypes,
                                       spec.sigma).astype(np.float32)
    for utt in background:
        utt.feats = synth_features(utt.tokens, feat_rng, prototypes,
                                   spec.sigma).astype(np.float32)

    return CorpusBundle(spec=spec, vocab=vocab, entities_a=entities_a,
                        entities_b=entities_b, questions=questions,
                        contexts_a=contexts_a, contexts_b=contexts_b,
                        background=background, prototypes=prototypes)


# ---------------------------------------------------------------------------
# Persistence
# ---------------------------------------------------------------------------

def save_features(path, utterances: list, feature_dim: int):
    with open(path, "wb") as f:
        f.write(FEATURE_MAGIC)
        f.write(struct.pack("<IQI", FEATURE_VERSION, len(utterances), feature_dim))
        for utt in utterances:
            feats = np.ascontiguousarray(utt.feats, dtype="<f4")
            f.write(struct.pack("<I", feats.shape[0]))
            f.write(feats.tobytes())


def load_features(path) -> list:
    """Returns one float64 (frames, F) array per utterance."""
    with open(path, "rb") as f:
        blob = f.read()
    if blob[:4] != FEATURE_MAGIC:
        raise FormatError(f"{path}: bad magic {blob[:4]!r}, expected RTFE")
    version, count, dim = struct.unpack("<IQI", blob[4:20])
    if version != FEATURE_VERSION:
        raise FormatError(f"{path}: unsupported feature-file version {version}")
    off = 20
    out = []
    for _ in range(count):
        (frames,) = struct.unpack("<I", blob[off:off + 4])
        off += 4
        arr = np.frombuffer(blob[off:off + 4 * frames * dim], dtype="<f4")
        out.append(arr.reshape(frames, dim).astype(np.float64))
        off += 4 * frames * dim
    if off != len(blob):
        raise FormatError(f"{path}: trailing bytes in feature file")
    return out


def _write_text(path, rows: list):
    with open(path, "w", encoding="utf-8") as f:
        for row in rows:
            f.write(" ".join(row) + "\n")


def write_corpus(bundle: CorpusBundle, out_dir):
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    vocab = bundle.vocab
    (out / "corpus.json").write_text(bundle.spec.to_json(), encoding="utf-8")
    vocab.save(out / "vocab.txt")
    for split in ("train", "val", "test"):
        utts = bundle.questions[split]
        _write_text(out / f"questions.{split}.txt",
                    [vocab.decode(u.tokens) for u in utts])
        _write_text(out / f"questions.{split}.ent",
                    [[str(int(m)) for m in u.entity_mask] for u in utts])
        save_features(out / f"features.{split}.bin", utts, bundle.spec.feature_dim)
    _write_text(out / "contexts.poolA.txt", [vocab.decode(s) for s in bundle.contexts_a])
    _write_text(out / "contexts.poolB.txt", [vocab.decode(s) for s in bundle.contexts_b])
    _write_text(out / "background.txt",
                [vocab.decode(u.tokens) for u in bundle.background])
    save_features(out / "features.background.bin", bundle.background,
                  bundle.spec.feature_dim)


def load_questions(corpus_dir, split: str) -> list:
    """Rebuild Utterances (tokens, mask, features) for one question split."""
    base = Path(corpus_dir)
    vocab = Vocabulary.load(base / "vocab.txt")
    texts = (base / f"questions.{split}.txt").read_text(encoding="utf-8").splitlines()
    masks = (base / f"questions.{split}.ent").read_text(encoding="utf-8").splitlines()
    feats = load_features(base / f"features.{split}.bin")
    if not (len(texts) == len(masks) == len(feats)):
        raise FormatError(f"{corpus_dir}: question files disagree on count")
    out = []
    for text, mask, f in zip(texts, masks, feats):
        out.append(Utterance(tokens=vocab.encode(text.split()),
                             entity_mask=np.array(mask.split(), dtype=np.int8),
                             feats=f))
    return out


def load_token_lines(path, vocab: Vocabulary) -> list:
    lines = Path(path).read_text(encoding="utf-8").splitlines()
    return [vocab.encode(ln.split()) for ln in lines if ln.strip()]
