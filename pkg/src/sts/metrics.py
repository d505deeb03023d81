"""Scoring: ORC WER, turn counting accuracy and emission latency.

ORC WER scores each hypothesis channel against the concatenation of the
reference turns assigned to it and keeps the assignment with the fewest
errors. Assignments never reorder turns within a channel, so every subset
split of the temporally ordered turns is one candidate.
"""

from __future__ import annotations

import math
from collections import Counter
from dataclasses import asdict, dataclass, field
from typing import Dict, List, Mapping, Optional, Sequence, Tuple

import numpy as np

from .errors import AssignmentLimitError, ShapeError
from .segmenter import ChannelHypothesis, Turn, TurnHypothesis, count_turns, split_hypothesis
from .vocab import Vocab

EXHAUSTIVE_MAX_TURNS = 12
MAX_TURNS = 30
PERCENTILES = (50, 60, 70, 80, 90)
LATENCY_KINDS = ("EP", "LS", "SP", "FS")


@dataclass
class AlignmentCounts:
    substitutions: int = 0
    deletions: int = 0
    insertions: int = 0
    reference_length: int = 0

    @property
    def errors(self) -> int:
        return self.substitutions + self.deletions + self.insertions

    @property
    def wer(self) -> Optional[float]:
        if self.reference_length == 0:
            return None if self.errors == 0 else math.inf
        return self.errors / self.reference_length

    def __add__(self, other: "AlignmentCounts") -> "AlignmentCounts":
        return AlignmentCounts(
            self.substitutions + other.substitutions,
            self.deletions + other.deletions,
            self.insertions + other.insertions,
            self.reference_length + other.reference_length,
        )

    def to_dict(self) -> dict:
        d = asdict(self)
        n = self.reference_length
        d["wer"] = self.wer
        d["deletion_rate"] = self.deletions / n if n else None
        d["insertion_rate"] = self.insertions / n if n else None
        d["insertion_deletion_ratio"] = self.insertions / self.deletions if self.deletions else None
        return d


def _distance_table(ref, hyp) -> list:
    n, m = len(ref), len(hyp)
    table = [list(range(m + 1))]
    for i in range(1, n + 1):
        prev = table[-1]
        row = [i] + [0] * m
        r = ref[i - 1]
        for j in range(1, m + 1):
            row[j] = min(prev[j - 1] + (r != hyp[j - 1]), row[j - 1] + 1, prev[j] + 1)
        table.append(row)
    return table


def levenshtein(ref: Sequence, hyp: Sequence) -> AlignmentCounts:
    """Minimal edit alignment; ties prefer substitution, then insertion, then deletion."""
    table = _distance_table(ref, hyp)
    i, j = len(ref), len(hyp)
    s = d = ins = 0
    while i > 0 or j > 0:
        cost = table[i][j]
        if i > 0 and j > 0 and cost == table[i - 1][j - 1] + (ref[i - 1] != hyp[j - 1]):
            s += ref[i - 1] != hyp[j - 1]
            i, j = i - 1, j - 1
        elif j > 0 and cost == table[i][j - 1] + 1:
            ins += 1
            j -= 1
        else:
            d += 1
            i -= 1
    return AlignmentCounts(s, d, ins, len(ref))


def edit_distance(ref: Sequence, hyp: Sequence) -> int:
    return _distance_table(ref, hyp)[-1][-1]


def _extend_row(prev: list, tokens: Sequence, hyp: Sequence) -> list:
    """Advance a Levenshtein DP row by extra reference tokens."""
    row = prev
    for r in tokens:
        new = [row[0] + 1]
        for j in range(1, len(hyp) + 1):
            new.append(min(row[j - 1] + (r != hyp[j - 1]), new[j - 1] + 1, row[j] + 1))
        row = new
    return row


def orc_errors_exhaustive(ref_turns: Sequence[Sequence], hyp_channels: Sequence[Sequence]):
    """Enumerate every turn-to-channel assignment; return ``(errors, assignment)``.

    Assignments are visited in lexicographic order and the first minimum is
    kept. DP rows are shared along common assignment prefixes.
    """
    n_ch = len(hyp_channels)
    best = [math.inf, None]
    start_rows = [list(range(len(h) + 1)) for h in hyp_channels]

    def visit(k, rows, assign):
        if k == len(ref_turns):
            total = sum(r[-1] for r in rows)
            if total < best[0]:
                best[0], best[1] = total, tuple(assign)
            return
        for c in range(n_ch):
            new_rows = list(rows)
            new_rows[c] = _extend_row(rows[c], ref_turns[k], hyp_channels[c])
            assign.append(c)
            visit(k + 1, new_rows, assign)
            assign.pop()

    visit(0, start_rows, [])
    return int(best[0]), best[1]


def _segment_costs(turn: Sequence, hyp: Sequence) -> np.ndarray:
    """``out[j, j2]`` = edit distance of ``turn`` against ``hyp[j:j2]`` (inf for j2 < j)."""
    m = len(hyp)
    out = np.full((m + 1, m + 1), np.inf)
    for j in range(m + 1):
        sub = hyp[j:]
        row = _extend_row(list(range(len(sub) + 1)), turn, sub)
        out[j, j:] = row
    return out


def orc_errors_dp(ref_turns: Sequence[Sequence], hyp_channels: Sequence[Sequence]):
    """Exact ORC search in polynomial time for two channels.

    Each hypothesis stream is cut into consecutive segments, one per assigned
    turn; state is the pair of cut positions after the first ``k`` turns.
    Returns ``(errors, assignment)``.
    """
    if len(hyp_channels) != 2:
        raise ShapeError("the assignment DP supports exactly two channels", n=len(hyp_channels))
    h1, h2 = hyp_channels
    m1, m2 = len(h1), len(h2)
    K = len(ref_turns)
    D = np.full((m1 + 1, m2 + 1), np.inf)
    D[0, 0] = 0.0
    choices = []
    for turn in ref_turns:
        s1 = _segment_costs(turn, h1)  # (j1, j1')
        s2 = _segment_costs(turn, h2)
        # channel 0: cand0[j1', j2] = min_j1 D[j1, j2] + s1[j1, j1']
        c0 = D[:, None, :] + s1[:, :, None]
        arg0 = c0.argmin(axis=0)
        cand0 = np.take_along_axis(c0, arg0[None], axis=0)[0]
        c1 = D[:, :, None] + s2[None, :, :]
        arg1 = c1.argmin(axis=1)
        cand1 = np.take_along_axis(c1, arg1[:, None, :], axis=1)[:, 0, :]
        use1 = cand1 < cand0
        D = np.where(use1, cand1, cand0)
        choices.append((use1, arg0, arg1))
    tail = D + (m1 - np.arange(m1 + 1))[:, None] + (m2 - np.arange(m2 + 1))[None, :]
    j1, j2 = np.unravel_index(int(np.argmin(tail)), tail.shape)
    total = int(tail[j1, j2])
    assign = []
    for k in range(K - 1, -1, -1):
        use1, arg0, arg1 = choices[k]
        if use1[j1, j2]:
            assign.append(1)
            j2 = int(arg1[j1, j2])
        else:
            assign.append(0)
            j1 = int(arg0[j1, j2])
    return total, tuple(reversed(assign))


def channel_references(ref_turns: Sequence[Sequence], assignment, n_channels: int) -> list:
    return [
        [tok for turn, a in zip(ref_turns, assignment) if a == c for tok in turn]
        for c in range(n_channels)
    ]


def orc_wer(ref_turns: Sequence[Sequence], hyp_channels: Sequence[Sequence]):
    """Best order-preserving assignment and its summed alignment counts.

    ``ref_turns`` are token lists in temporal order; ``hyp_channels`` are the
    per-channel content-token streams (boundary tokens already stripped).
    Uses exhaustive search up to ``EXHAUSTIVE_MAX_TURNS`` turns and the DP
    above that.
    """
    K = len(ref_turns)
    if K > MAX_TURNS:
        raise AssignmentLimitError("too many reference turns for ORC search", K=K, cap=MAX_TURNS)
    ref_turns = [list(t) for t in ref_turns]
    hyp_channels = [list(h) for h in hyp_channels]
    if K <= EXHAUSTIVE_MAX_TURNS or len(hyp_channels) != 2:
        _, assignment = orc_errors_exhaustive(ref_turns, hyp_channels)
    else:
        _, assignment = orc_errors_dp(ref_turns, hyp_channels)
    counts = AlignmentCounts()
    for ref, hyp in zip(channel_references(ref_turns, assignment, len(hyp_channels)), hyp_channels):
        counts = counts + levenshtein(ref, hyp)
    return assignment, counts


def _ordered_turns(turns: Sequence[Turn]) -> List[Turn]:
    return sorted(turns, key=lambda t: (t.start_frame, t.end_frame))


def orc_wer_example(turns: Sequence[Turn], hyps: Sequence[ChannelHypothesis], vocab: Vocab):
    refs = [list(t.tokens) for t in _ordered_turns(turns)]
    streams = [[t for t in h.tokens if vocab.is_content(t)] for h in hyps]
    return orc_wer(refs, streams)


def turn_counting(ref_counts: Mapping[str, int], hyp_counts: Mapping[str, int]):
    """``(overall accuracy, accuracy on >2-turn references)``; ``None`` when undefined."""
    if set(ref_counts) != set(hyp_counts):
        missing = sorted(set(ref_counts) ^ set(hyp_counts))
        raise ShapeError("reference and hypothesis example ids differ", ids=missing[:10])
    if not ref_counts:
        return None, None
    hits = [ref_counts[k] == hyp_counts[k] for k in ref_counts]
    gt2 = [ref_counts[k] == hyp_counts[k] for k in ref_counts if ref_counts[k] > 2]
    return sum(hits) / len(hits), (sum(gt2) / len(gt2) if gt2 else None)


@dataclass
class LatencySample:
    metric_kind: str
    value: float
    example_id: str = ""
    turn_index: int = 0

    def to_dict(self) -> dict:
        return asdict(self)


def emission_latency(
    ref_turns: Sequence[Turn],
    turn_hyps: Sequence[TurnHypothesis],
    frame_ms: float = 30.0,
    example_id: str = "",
    diagnostics: Optional[Counter] = None,
    min_turns: int = 3,
) -> List[LatencySample]:
    """Signed boundary latencies (ms) for one example.

    Hypothesis turns (empty ones ignored) from all channels are ordered by
    their opening frame and paired one-to-one with the reference turns in
    start order. Examples with fewer than ``min_turns`` reference turns or a
    wrong turn count contribute nothing and are counted in ``diagnostics``.
    """
    diag = diagnostics if diagnostics is not None else Counter()
    refs = _ordered_turns(ref_turns)
    hyps = sorted(
        (h for h in turn_hyps if h.tokens), key=lambda h: (h.opening_frame, h.channel)
    )
    if len(refs) < min_turns:
        diag["too_few_turns"] += 1
        return []
    if len(hyps) != len(refs):
        diag["turn_count_mismatch"] += 1
        return []
    last = max(range(len(refs)), key=lambda i: (refs[i].end_frame, i))
    samples = []
    for i, (ref, hyp) in enumerate(zip(refs, hyps)):
        end_ms = ref.encoder_end * frame_ms
        start_ms = ref.encoder_start * frame_ms
        if i != last:
            if hyp.eot_frame is None:
                diag["missing_eot"] += 1
            else:
                samples.append(LatencySample("EP", hyp.eot_frame * frame_ms - end_ms, example_id, i))
            samples.append(LatencySample("LS", hyp.last_token_frame * frame_ms - end_ms, example_id, i))
        if i != 0:
            if hyp.sot_frame is None:
                diag["missing_sot"] += 1
            else:
                samples.append(LatencySample("SP", hyp.sot_frame * frame_ms - start_ms, example_id, i))
            samples.append(LatencySample("FS", hyp.first_token_frame * frame_ms - start_ms, example_id, i))
    diag["analyzed_examples"] += 1
    return samples


def nearest_rank_percentile(sorted_values: Sequence[float], p: float) -> float:
    k = max(1, math.ceil(p / 100.0 * len(sorted_values)))
    return sorted_values[k - 1]


def percentile_table(samples: Sequence[float], percentiles: Sequence[int] = PERCENTILES) -> dict:
    """Count, mean and nearest-rank percentiles; ``None`` entries when empty."""
    values = sorted(float(v) for v in samples)
    row = {"n": len(values), "mean": float(np.mean(values)) if values else None}
    for p in percentiles:
        row[f"p{p}"] = nearest_rank_percentile(values, p) if values else None
    return row


def latency_tables(samples: Sequence[LatencySample], percentiles=PERCENTILES) -> dict:
    return {
        kind: percentile_table([s.value for s in samples if s.metric_kind == kind], percentiles)
        for kind in LATENCY_KINDS
    }


@dataclass
class EvalReport:
    partitions: Dict[str, AlignmentCounts] = field(default_factory=dict)
    overall: AlignmentCounts = field(default_factory=AlignmentCounts)
    turn_accuracy: Optional[float] = None
    turn_accuracy_gt2: Optional[float] = None
    latency: dict = field(default_factory=dict)
    samples: List[LatencySample] = field(default_factory=list)
    diagnostics: Dict[str, int] = field(default_factory=dict)
    n_examples: int = 0

    def to_dict(self, include_samples: bool = True) -> dict:
        d = {
            "schema": REPORT_SCHEMA_ID,
            "n_examples": self.n_examples,
            "partitions": {k: v.to_dict() for k, v in sorted(self.partitions.items())},
            "overall": self.overall.to_dict(),
            "turn_counting": {"overall": self.turn_accuracy, "gt2": self.turn_accuracy_gt2},
            "latency": self.latency,
            "diagnostics": dict(sorted(self.diagnostics.items())),
        }
        if include_samples:
            d["samples"] = [s.to_dict() for s in self.samples]
        return d


def evaluate(
    references: Mapping[str, Tuple[str, Sequence[Turn]]],
    hypotheses: Mapping[str, Sequence[ChannelHypothesis]],
    vocab: Vocab,
    frame_ms: float = 30.0,
    percentiles: Sequence[int] = PERCENTILES,
) -> EvalReport:
    """Score every example: ``references[id] = (partition, turns)``."""
    if set(references) != set(hypotheses):
        missing = sorted(set(references) ^ set(hypotheses))
        raise ShapeError("reference and hypothesis example ids differ", ids=missing[:10])
    report = EvalReport(n_examples=len(references))
    diag = Counter()
    ref_counts, hyp_counts = {}, {}
    for ex_id in sorted(references):
        partition, turns = references[ex_id]
        hyps = hypotheses[ex_id]
        _, counts = orc_wer_example(turns, hyps, vocab)
        report.partitions[partition] = report.partitions.get(partition, AlignmentCounts()) + counts
        report.overall = report.overall + counts
        ref_counts[ex_id] = len(turns)
        hyp_counts[ex_id] = count_turns(hyps, vocab)
        turn_hyps = [t for h in hyps for t in split_hypothesis(h, vocab, diag)]
        report.samples.extend(emission_latency(turns, turn_hyps, frame_ms, ex_id, diag))
    report.turn_accuracy, report.turn_accuracy_gt2 = turn_counting(ref_counts, hyp_counts)
    report.latency = latency_tables(report.samples, percentiles)
    report.diagnostics = dict(diag)
    return report


def _fmt(x, width=7, digits=1):
    if x is None:
        return "n/a".rjust(width)
    return f"{x:{width}.{digits}f}"


def format_wer_table(report: EvalReport) -> str:
    parts = sorted(report.partitions)
    head = ["Turn acc [%]", "", "WER [%]"]
    cols = ["Overall", ">2 turns"] + parts + ["full"]
    lines = [f"{head[0]:<18}{head[2]}", "".join(f"{c:>9}" for c in cols)]
    acc = [report.turn_accuracy, report.turn_accuracy_gt2]
    wers = [report.partitions[p].wer for p in parts] + [report.overall.wer]
    vals = [None if a is None else 100 * a for a in acc] + [None if w is None else 100 * w for w in wers]
    lines.append("".join(f"{_fmt(v, 9)}" for v in vals))
    o = report.overall
    lines.append(
        f"S={o.substitutions} D={o.deletions} I={o.insertions} N={o.reference_length}"
    )
    return "\n".join(lines)


def format_latency_table(latency: dict, percentiles: Sequence[int] = (50, 90)) -> str:
    keys = ["mean"] + [f"p{p}" for p in percentiles]
    lines = ["Emission latency [ms]", f"{'':<6}{'n':>6}" + "".join(f"{k:>9}" for k in keys)]
    for kind in LATENCY_KINDS:
        row = latency.get(kind, {})
        lines.append(
            f"{kind:<6}{row.get('n', 0):>6}" + "".join(_fmt(row.get(k), 9, 0) for k in keys)
        )
    return "\n".join(lines)


REPORT_SCHEMA_ID = "sts.report/v1"

_nullable_number = {"type": ["number", "null"]}
_counts_schema = {
    "type": "object",
    "required": ["substitutions", "deletions", "insertions", "reference_length", "wer"],
    "properties": {
        "substitutions": {"type": "integer", "minimum": 0},
        "deletions": {"type": "integer", "minimum": 0},
        "insertions": {"type": "integer", "minimum": 0},
        "reference_length": {"type": "integer", "minimum": 0},
        "wer": _nullable_number,
    },
}
_table_schema = {
    "type": "object",
    "required": ["n", "mean"],
    "properties": {"n": {"type": "integer", "minimum": 0}, "mean": _nullable_number},
    "patternProperties": {"^p[0-9]+$": _nullable_number},
}
REPORT_SCHEMA = {
    "type": "object",
    "required": ["schema", "partitions", "overall", "turn_counting", "latency"],
    "properties": {
        "schema": {"const": REPORT_SCHEMA_ID},
        "n_examples": {"type": "integer", "minimum": 0},
        "partitions": {"type": "object", "additionalProperties": _counts_schema},
        "overall": _counts_schema,
        "turn_counting": {
            "type": "object",
            "required": ["overall", "gt2"],
            "properties": {
                "overall": {"type": ["number", "null"], "minimum": 0, "maximum": 1},
                "gt2": {"type": ["number", "null"], "minimum": 0, "maximum": 1},
            },
        },
        "latency": {
            "type": "object",
            "properties": {k: _table_schema for k in LATENCY_KINDS},
        },
        "samples": {
            "type": "array",
            "items": {
                "type": "object",
                "required": ["metric_kind", "value", "example_id", "turn_index"],
                "properties": {"metric_kind": {"enum": list(LATENCY_KINDS)}},
            },
        },
    },
}
