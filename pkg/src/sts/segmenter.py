"""Turn segmentation: channel assignment, target construction, hypothesis splitting.

Targets follow deterministic assignment: turns are swept by start time and
each goes to the lowest-index channel that is free, so channel 0 always
carries the earliest turn and a second channel is only used on overlap.
Within a channel every turn is wrapped as ``<sot> tokens <eot>``, except
that the example's first turn has no ``<sot>`` and its last turn no
``<eot>``.
"""

from __future__ import annotations

from collections import Counter
from dataclasses import dataclass, field
from typing import List, Optional, Sequence

import numpy as np

from .errors import ConfigError, OverlapError, TokenError
from .lattice import TargetSequence
from .vocab import Vocab, encoder_end, encoder_start, n_encoder_frames


@dataclass(frozen=True)
class Turn:
    """One speaker's contiguous utterance; frames are raw 10 ms indices, end exclusive."""

    speaker_id: str
    start_frame: int
    end_frame: int
    tokens: tuple

    def __post_init__(self):
        object.__setattr__(self, "tokens", tuple(int(t) for t in self.tokens))
        if not self.start_frame < self.end_frame:
            raise ValueError(f"turn must have start < end, got [{self.start_frame}, {self.end_frame})")
        if not self.tokens:
            raise ValueError("turn has no tokens")

    @property
    def encoder_start(self) -> int:
        return encoder_start(self.start_frame)

    @property
    def encoder_end(self) -> int:
        return encoder_end(self.end_frame, self.start_frame)

    def to_dict(self) -> dict:
        return {
            "speaker": self.speaker_id,
            "start_frame": self.start_frame,
            "end_frame": self.end_frame,
            "tokens": list(self.tokens),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "Turn":
        return cls(str(d["speaker"]), int(d["start_frame"]), int(d["end_frame"]), d["tokens"])


@dataclass
class ChannelTargets:
    targets: List[TargetSequence]
    masks: List[np.ndarray]
    turns: List[List[Turn]]

    @property
    def n_frames(self) -> int:
        return len(self.masks[0])


@dataclass
class ChannelHypothesis:
    """Decoded stream for one output channel, one emission frame per token."""

    tokens: List[int] = field(default_factory=list)
    frames: List[int] = field(default_factory=list)
    channel: int = 0

    def __post_init__(self):
        if len(self.tokens) != len(self.frames):
            raise ValueError("tokens and frames must have equal length")

    def to_list(self) -> list:
        return [{"token": int(t), "frame": int(f)} for t, f in zip(self.tokens, self.frames)]

    @classmethod
    def from_list(cls, items, channel: int = 0) -> "ChannelHypothesis":
        return cls([int(i["token"]) for i in items], [int(i["frame"]) for i in items], channel)


@dataclass
class TurnHypothesis:
    tokens: List[int] = field(default_factory=list)
    sot_frame: Optional[int] = None
    eot_frame: Optional[int] = None
    first_token_frame: Optional[int] = None
    last_token_frame: Optional[int] = None
    channel: int = 0

    @property
    def opening_frame(self) -> Optional[int]:
        return self.sot_frame if self.sot_frame is not None else self.first_token_frame


def _sweep_order(turns: Sequence[Turn]) -> list:
    return sorted(range(len(turns)), key=lambda i: (turns[i].start_frame, turns[i].end_frame, i))


def _assign_indices(turns: Sequence[Turn], n_channels: int) -> list:
    channels = [[] for _ in range(n_channels)]
    busy_until = [None] * n_channels
    for i in _sweep_order(turns):
        turn = turns[i]
        for c in range(n_channels):
            if busy_until[c] is None or busy_until[c] <= turn.start_frame:
                channels[c].append(i)
                busy_until[c] = turn.end_frame
                break
        else:
            raise OverlapError(
                f"more than {n_channels} turns overlap",
                frame=turn.start_frame,
                n_channels=n_channels,
            )
    return channels


def assign_channels(turns: Sequence[Turn], n_channels: int = 2) -> List[List[Turn]]:
    """Greedy start-time sweep; each turn goes to the lowest-index free channel."""
    return [[turns[i] for i in chan] for chan in _assign_indices(turns, n_channels)]


def first_and_last(turns: Sequence[Turn]):
    """Indices of the example's first (earliest start) and last (latest end) turn."""
    order = _sweep_order(turns)
    first = order[0]
    k = max(range(len(order)), key=lambda k: (turns[order[k]].end_frame, k))
    return first, order[k]


def build_targets(
    turns: Sequence[Turn],
    vocab: Vocab,
    n_channels: int = 2,
    n_frames: Optional[int] = None,
) -> ChannelTargets:
    """Per-channel token targets, eot ground truth and activity masks.

    ``n_frames`` is the encoder-frame length of the example; by default it
    ends with the latest turn.
    """
    if vocab.sot is None or vocab.eot is None:
        raise ConfigError("vocabulary lacks sot/eot ids")
    if not turns:
        raise ValueError("example has no turns")
    for turn in turns:
        bad = [t for t in turn.tokens if not vocab.is_content(t)]
        if bad:
            raise TokenError("turn contains non-content tokens", tokens=bad)
    if n_frames is None:
        n_frames = n_encoder_frames(max(t.end_frame for t in turns))

    first, last = first_and_last(turns)
    targets, masks, chan_turns = [], [], []
    for chan in _assign_indices(turns, n_channels):
        tokens, gt = [], {}
        mask = np.zeros(n_frames, dtype=np.int8)
        for i in chan:
            turn = turns[i]
            if i != first:
                tokens.append(vocab.sot)
            tokens.extend(turn.tokens)
            if i != last:
                gt[len(tokens)] = turn.encoder_end
                tokens.append(vocab.eot)
            mask[turn.encoder_start : turn.encoder_end + 1] = 1
        targets.append(TargetSequence(tokens, eot_ground_truth=gt, eot_id=vocab.eot))
        masks.append(mask)
        chan_turns.append([turns[i] for i in chan])
    return ChannelTargets(targets, masks, chan_turns)


def split_hypothesis(
    hyp: ChannelHypothesis, vocab: Vocab, diagnostics: Optional[Counter] = None
) -> List[TurnHypothesis]:
    """Cut one channel's decoded stream into turns at sot/eot tokens.

    Malformed streams never raise. ``diagnostics`` (if given) counts
    ``sot_inside_turn`` (a sot while a turn is still open: the open turn is
    closed and a new one started) and ``eot_without_turn`` (dropped).
    """
    diag = diagnostics if diagnostics is not None else Counter()
    turns: List[TurnHypothesis] = []
    current: Optional[TurnHypothesis] = None

    for tok, frame in zip(hyp.tokens, hyp.frames):
        if tok == vocab.sot:
            if current is not None:
                diag["sot_inside_turn"] += 1
                turns.append(current)
            current = TurnHypothesis(sot_frame=frame, channel=hyp.channel)
        elif tok == vocab.eot:
            if current is None:
                diag["eot_without_turn"] += 1
                continue
            current.eot_frame = frame
            turns.append(current)
            current = None
        elif tok == vocab.blank:
            continue
        else:
            if current is None:
                current = TurnHypothesis(channel=hyp.channel)
            if current.first_token_frame is None:
                current.first_token_frame = frame
            current.last_token_frame = frame
            current.tokens.append(tok)
    if current is not None:
        turns.append(current)
    return turns


def count_turns(hyps: Sequence[ChannelHypothesis], vocab: Vocab) -> int:
    """Non-empty turns over all channels."""
    return sum(1 for h in hyps for turn in split_hypothesis(h, vocab) if turn.tokens)


def content_tokens(hyp: ChannelHypothesis, vocab: Vocab) -> List[int]:
    return [t for t in hyp.tokens if vocab.is_content(t)]


def oracle_hypotheses(targets: ChannelTargets, vocab: Vocab) -> List[ChannelHypothesis]:
    """Emit the targets themselves with ideal timestamps.

    Boundary tokens land on the turn's ground-truth boundary frames; content
    tokens are spread from the first to the last frame of the turn.
    """
    hyps = []
    for c, (tgt, chan_turns) in enumerate(zip(targets.targets, targets.turns)):
        frames = []
        k = 0
        for turn in chan_turns:
            start, end = turn.encoder_start, turn.encoder_end
            if k < len(tgt.tokens) and tgt.tokens[k] == vocab.sot:
                frames.append(start)
                k += 1
            n = len(turn.tokens)
            spread = np.linspace(start, end, n) if n > 1 else np.array([start])
            frames.extend(int(round(f)) for f in spread)
            k += n
            if k < len(tgt.tokens) and tgt.tokens[k] == vocab.eot:
                frames.append(end)
                k += 1
        hyps.append(ChannelHypothesis(list(tgt.tokens), frames, channel=c))
    return hyps
