"""Word error rate with an entity/other split, plus result tables.

WER uses the standard Levenshtein alignment over detokenized words.  When
several alignments tie, substitutions are preferred over insert/delete
pairs, then deletions over insertions, so the attribution below is well
defined.  Every error is charged to one class: substitutions and
deletions to their reference word's class, insertions to the class of the
preceding reference word (an insertion before the first word counts as
"other").  By construction entity errors + other errors equals total
errors.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field

import numpy as np

from .corpus import detokenize, token_mask_to_word_mask

CSV_COLUMNS = ["config_hash", "datastore", "fusion", "lambda", "K_train",
               "K_test", "adaptee", "split", "wer", "entity_wer",
               "other_wer", "seed"]


@dataclass
class WerReport:
    errors: int = 0
    ref_words: int = 0
    entity_errors: int = 0
    entity_words: int = 0
    other_errors: int = 0
    other_words: int = 0

    @staticmethod
    def _rate(errors: int, words: int) -> float:
        return errors / words if words else 0.0

    @property
    def wer(self) -> float:
        return self._rate(self.errors, self.ref_words)

    @property
    def entity_wer(self) -> float:
        return self._rate(self.entity_errors, self.entity_words)

    @property
    def other_wer(self) -> float:
        return self._rate(self.other_errors, self.other_words)

    def add(self, other: "WerReport"):
        self.errors += other.errors
        self.ref_words += other.ref_words
        self.entity_errors += other.entity_errors
        self.entity_words += other.entity_words
        self.other_errors += other.other_errors
        self.other_words += other.other_words


def align(ref: list, hyp: list) -> list:
    """Minimal edit script as (op, ref_index) pairs.

    op is one of "match", "sub", "del", "ins"; ref_index is the reference
    position of the word (for "ins", of the preceding reference word, -1
    when inserting before the first).  Tie order: sub, then del, then ins.
    """
    R, H = len(ref), len(hyp)
    dist = np.zeros((R + 1, H + 1), dtype=np.int64)
    dist[:, 0] = np.arange(R + 1)
    dist[0, :] = np.arange(H + 1)
    for i in range(1, R + 1):
        for j in range(1, H + 1):
            sub = dist[i - 1, j - 1] + (ref[i - 1] != hyp[j - 1])
            dist[i, j] = min(sub, dist[i - 1, j] + 1, dist[i, j - 1] + 1)
    ops = []
    i, j = R, H
    while i > 0 or j > 0:
        if i > 0 and j > 0 and dist[i, j] == dist[i - 1, j - 1] + (ref[i - 1] != hyp[j - 1]):
            ops.append(("match" if ref[i - 1] == hyp[j - 1] else "sub", i - 1))
            i -= 1
            j -= 1
        elif i > 0 and dist[i, j] == dist[i - 1, j] + 1:
            ops.append(("del", i - 1))
            i -= 1
        else:
            ops.append(("ins", i - 1))
            j -= 1
    ops.reverse()
    return ops


def wer(ref: list, hyp: list) -> float:
    """Word error rate of one hypothesis against one reference."""
    if not ref:
        raise ValueError("empty reference")
    ops = align(ref, hyp)
    return sum(op != "match" for op, _ in ops) / len(ref)


def wer_entity_split(ref: list, hyp: list, ref_entity_mask: list) -> WerReport:
    """Score one utterance, attributing each error to entity or other."""
    if len(ref) != len(ref_entity_mask):
        raise ValueError("mask length must match reference length")
    rep = WerReport(ref_words=len(ref),
                    entity_words=int(sum(ref_entity_mask)))
    rep.other_words = rep.ref_words - rep.entity_words
    for op, ri in align(ref, hyp):
        if op == "match":
            continue
        rep.errors += 1
        is_entity = ri >= 0 and bool(ref_entity_mask[ri])
        if is_entity:
            rep.entity_errors += 1
        else:
            rep.other_errors += 1
    return rep


def score_utterance(vocab, ref_tokens, ref_token_mask, hyp_tokens) -> WerReport:
    """Detokenize both sides to words and score with the entity split."""
    ref_strings = vocab.decode(ref_tokens)
    ref_words = detokenize(ref_strings)
    word_mask = token_mask_to_word_mask(ref_strings, ref_token_mask)
    hyp_words = detokenize(vocab.decode(hyp_tokens))
    return wer_entity_split(ref_words, hyp_words, word_mask)


def score_corpus(vocab, utterances: list, hypotheses: list) -> WerReport:
    """Pooled (corpus-level) report over aligned (utterance, hyp) pairs."""
    if len(utterances) != len(hypotheses):
        raise ValueError("need one hypothesis per utterance")
    total = WerReport()
    for utt, hyp in zip(utterances, hypotheses):
        total.add(score_utterance(vocab, utt.tokens, utt.entity_mask, hyp))
    return total


# ---------------------------------------------------------------------------
# Result rows
# ---------------------------------------------------------------------------

def make_row(config_hash: str, datastore: str, fusion: str, lam: float,
             k_train, k_test, adaptee: str, split: str, report: WerReport,
             seed: int) -> dict:
    return {"config_hash": config_hash, "datastore": datastore,
            "fusion": fusion, "lambda": f"{lam:g}",
            "K_train": str(k_train), "K_test": str(k_test),
            "adaptee": adaptee, "split": split,
            "wer": f"{report.wer:.6f}", "entity_wer": f"{report.entity_wer:.6f}",
            "other_wer": f"{report.other_wer:.6f}", "seed": str(seed)}


def write_results_csv(path, rows: list):
    with open(path, "w", newline="", encoding="utf-8") as f:
        writer = csv.DictWriter(f, fieldnames=CSV_COLUMNS)
        writer.writeheader()
        for row in rows:
            writer.writerow(row)


def read_results_csv(path) -> list:
    with open(path, newline="", encoding="utf-8") as f:
        return list(csv.DictReader(f))


def mean_over_seeds(rows: list, key=lambda r: r["wer"]) -> float:
    if not rows:
        raise ValueError("no rows to average")
    return float(np.mean([float(key(r)) for r in rows]))


def select(rows: list, **filters) -> list:
    out = []
    for r in rows:
        if all(str(r[k]) == str(v) for k, v in filters.items()):
            out.append(r)
    return out


def markdown_table(headers: list, body: list) -> str:
    lines = ["| " + " | ".join(headers) + " |",
             "|" + "|".join("---" for _ in headers) + "|"]
    for row in body:
        lines.append("| " + " | ".join(str(c) for c in row) + " |")
    return "\n".join(lines) + "\n"
