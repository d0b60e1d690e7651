"""Word-level edit distance, WER, and relative improvement (WERR)."""
from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

from .errors import ContractError

__all__ = ["ErrorCounts", "edit_distance", "wer", "werr"]


@dataclass(frozen=True)
class ErrorCounts:
    substitutions: int
    insertions: int
    deletions: int
    ref_words: int

    @property
    def distance(self) -> int:
        return self.substitutions + self.insertions + self.deletions


def _words(seq) -> list[str]:
    if isinstance(seq, str):
        return seq.split()
    return [str(w) for w in seq]


def edit_distance(ref: Sequence[str] | str, hyp: Sequence[str] | str) -> ErrorCounts:
    """Minimal S+I+D alignment via dynamic programming.

    Tie-breaking is deterministic: substitution is preferred over insertion,
    insertion over deletion, so equal-cost alignments always decompose the
    same way.
    """
    ref, hyp = _words(ref), _words(hyp)
    n, m = len(ref), len(hyp)
    # dist[i][j]: cost of aligning ref[:i] with hyp[:j]
    dist = [[0] * (m + 1) for _ in range(n + 1)]
    for i in range(1, n + 1):
        dist[i][0] = i
    for j in range(1, m + 1):
        dist[0][j] = j
    for i in range(1, n + 1):
        for j in range(1, m + 1):
            sub = dist[i - 1][j - 1] + (ref[i - 1] != hyp[j - 1])
            ins = dist[i][j - 1] + 1
            delete = dist[i - 1][j] + 1
            dist[i][j] = min(sub, ins, delete)
    s = ins = dels = 0
    i, j = n, m
    while i > 0 or j > 0:
        here = dist[i][j]
        if i > 0 and j > 0 and here == dist[i - 1][j - 1] + (ref[i - 1] != hyp[j - 1]):
            s += ref[i - 1] != hyp[j - 1]
            i, j = i - 1, j - 1
        elif j > 0 and here == dist[i][j - 1] + 1:
            ins += 1
            j -= 1
        else:
            dels += 1
            i -= 1
    return ErrorCounts(s, ins, dels, n)


def wer(refs: Sequence, hyps: Sequence) -> float:
    """Corpus-pooled word error rate in percent: 100 * sum(S+I+D) / sum(ref words)."""
    if len(refs) != len(hyps):
        raise ContractError(f"wer: {len(refs)} references vs {len(hyps)} hypotheses")
    errors = 0
    ref_words = 0
    for r, h in zip(refs, hyps):
        counts = edit_distance(r, h)
        errors += counts.distance
        ref_words += counts.ref_words
    if ref_words == 0:
        if errors == 0:
            return 0.0
        raise ContractError("wer: reference corpus has no words but hypotheses do")
    return 100.0 * errors / ref_words


def werr(baseline_wer: float, new_wer: float) -> float:
    """Relative WER reduction in percent versus a baseline."""
    if baseline_wer <= 0:
        raise ContractError(f"werr: baseline must be positive, got {baseline_wer}")
    return 100.0 * (baseline_wer - new_wer) / baseline_wer
