from collections import Counter

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from sts.errors import ConfigError, OverlapError, TokenError
from sts.segmenter import (
    ChannelHypothesis,
    Turn,
    assign_channels,
    build_targets,
    count_turns,
    oracle_hypotheses,
    split_hypothesis,
)
from sts.vocab import Vocab

V = Vocab(16)
SOT, EOT = V.sot, V.eot


def turn(name, start, end, *tokens):
    return Turn(name, start, end, tokens or (3,))


def names(channels):
    return [[t.speaker_id for t in chan] for chan in channels]


def test_disjoint_turns_share_first_channel():
    chans = assign_channels([turn("A", 0, 30), turn("B", 40, 90)])
    assert names(chans) == [["A", "B"], []]


def test_overlapping_turns_split():
    chans = assign_channels([turn("B", 20, 90), turn("A", 0, 30)])
    assert names(chans) == [["A"], ["B"]]


def test_five_turn_pattern():
    turns = [
        turn("A", 0, 50),
        turn("B", 30, 80),
        turn("C", 90, 140),
        turn("D", 120, 170),
        turn("E", 180, 200),
    ]
    assert names(assign_channels(turns)) == [["A", "C", "E"], ["B", "D"]]


def test_three_way_overlap_rejected():
    with pytest.raises(OverlapError):
        assign_channels([turn("A", 0, 50), turn("B", 10, 60), turn("C", 20, 30)])


def test_touching_turns_do_not_overlap():
    chans = assign_channels([turn("A", 0, 30), turn("B", 30, 60)])
    assert names(chans) == [["A", "B"], []]


def test_single_turn_has_no_boundary_tokens():
    ct = build_targets([Turn("A", 0, 12, (3, 4, 5))], V)
    assert ct.targets[0].tokens == (3, 4, 5)
    assert ct.targets[1].tokens == ()
    assert ct.targets[0].eot_ground_truth == {}
    assert list(ct.masks[0]) == [1, 1, 1, 1]
    assert list(ct.masks[1]) == [0, 0, 0, 0]


def test_two_sequential_turns():
    ct = build_targets([Turn("A", 0, 12, (3, 4)), Turn("B", 20, 32, (5,))], V)
    assert ct.targets[0].tokens == (3, 4, EOT, SOT, 5)
    # turn A ends at raw frame 12 (exclusive) -> last encoder frame 3
    assert ct.targets[0].eot_ground_truth == {2: 3}
    assert ct.targets[1].tokens == ()
    assert list(ct.masks[0]) == [1, 1, 1, 1, 0, 0, 1, 1, 1, 1, 1]


def test_three_turns_with_overlap():
    turns = [
        Turn("A", 0, 30, (3, 4)),
        Turn("B", 36, 66, (5, 6)),
        Turn("C", 54, 90, (7,)),
    ]
    ct = build_targets(turns, V)
    # hand construction: A, B sequential on channel 0; C overlaps B -> channel 1
    assert ct.targets[0].tokens == (3, 4, EOT, SOT, 5, 6, EOT)
    assert ct.targets[1].tokens == (SOT, 7)
    assert ct.targets[0].eot_ground_truth == {2: 9, 6: 21}
    assert np.array_equal(np.flatnonzero(ct.masks[1]), np.arange(18, 30))
    assert np.array_equal(np.flatnonzero(ct.masks[0]), np.r_[0:10, 12:22])


def test_last_turn_is_latest_end_not_last_start():
    # B starts last but A ends last: A keeps no eot, B gets one
    turns = [Turn("A", 0, 90, (3,)), Turn("B", 30, 60, (4,))]
    ct = build_targets(turns, V)
    assert ct.targets[0].tokens == (3,)
    assert ct.targets[1].tokens == (SOT, 4, EOT)


def test_build_targets_validates():
    with pytest.raises(ConfigError):
        build_targets([turn("A", 0, 3)], Vocab(8, sot=None))
    with pytest.raises(TokenError):
        build_targets([Turn("A", 0, 3, (EOT,))], V)


def hyp(tokens, frames=None, channel=0):
    return ChannelHypothesis(list(tokens), list(frames or range(len(tokens))), channel)


def test_split_canonical():
    a, b, c = 3, 4, 5
    turns = split_hypothesis(hyp([a, b, EOT, SOT, c], [1, 2, 4, 6, 7]), V)
    assert [t.tokens for t in turns] == [[a, b], [c]]
    assert turns[0].eot_frame == 4 and turns[0].sot_frame is None
    assert turns[0].first_token_frame == 1 and turns[0].last_token_frame == 2
    assert turns[1].sot_frame == 6 and turns[1].eot_frame is None


def test_split_single_turn():
    turns = split_hypothesis(hyp([3, 4]), V)
    assert len(turns) == 1
    assert turns[0].sot_frame is None and turns[0].eot_frame is None


def test_split_malformed_double_sot():
    diag = Counter()
    turns = split_hypothesis(hyp([SOT, 3, SOT, 4]), V, diag)
    assert [t.tokens for t in turns] == [[3], [4]]
    assert sum(diag.values()) == 1


def test_split_keeps_empty_turns_and_drops_stray_eot():
    diag = Counter()
    turns = split_hypothesis(hyp([EOT, 3, EOT, SOT, EOT, SOT, 4]), V, diag)
    assert [t.tokens for t in turns] == [[3], [], [4]]
    assert diag == Counter({"eot_without_turn": 1})


def test_count_turns():
    assert count_turns([hyp([]), hyp([])], V) == 0
    assert count_turns([hyp([3, EOT, SOT, 4]), hyp([5], channel=1)], V) == 3
    assert count_turns([hyp([3, EOT, SOT, EOT])], V) == 1


def test_count_turns_five_turn_fixture():
    turns = [
        Turn("A", 0, 50, (3, 4)),
        Turn("B", 30, 80, (5,)),
        Turn("C", 90, 140, (6, 7)),
        Turn("D", 120, 170, (8,)),
        Turn("E", 180, 200, (9, 10)),
    ]
    ct = build_targets(turns, V)
    assert count_turns(oracle_hypotheses(ct, V), V) == 5


def random_geometry(rng, max_turns=6):
    """Random sequential placement with occasional overlap, never 3-way."""
    n = int(rng.integers(1, max_turns + 1))
    turns = []
    prev_end = prev_prev_end = 0
    for k in range(n):
        length = int(rng.integers(3, 40))
        if k == 0:
            start = 0
        elif rng.random() < 0.5:
            start = prev_end + int(rng.integers(0, 20))
        else:
            start = max(prev_prev_end, prev_end - int(rng.integers(1, length)))
        tokens = tuple(int(x) for x in rng.choice(V.content_ids, size=int(rng.integers(1, 5))))
        turns.append(Turn(f"s{k}", start, max(start + length, prev_end + 1), tokens))
        prev_prev_end, prev_end = prev_end, turns[-1].end_frame
    return turns


def round_trip_mismatches(seed):
    rng = np.random.default_rng(seed)
    turns = random_geometry(rng)
    ct = build_targets(turns, V)
    hyps = oracle_hypotheses(ct, V)
    errors = 0
    for c, h in enumerate(hyps):
        split = split_hypothesis(h, V)
        errors += len(split) != len(ct.turns[c])
        errors += [t.tokens for t in split] != [list(t.tokens) for t in ct.turns[c]]
    first = min(turns, key=lambda t: t.start_frame)
    last = max(turns, key=lambda t: t.end_frame)
    for c, chan in enumerate(ct.turns):
        split = split_hypothesis(hyps[c], V)
        for ref, got in zip(chan, split):
            errors += (got.sot_frame is None) != (ref is first)
            errors += (got.eot_frame is None) != (ref is last)
    errors += count_turns(hyps, V) != len(turns)
    return errors


def test_round_trip_many_geometries():
    assert sum(round_trip_mismatches(seed) for seed in range(1000)) == 0


@settings(max_examples=200, deadline=None)
@given(st.integers(0, 2**31))
def test_assignment_invariants(seed):
    turns = random_geometry(np.random.default_rng(seed))
    chans = assign_channels(turns)
    earliest = min(turns, key=lambda t: (t.start_frame, t.end_frame))
    assert chans[0][0] == earliest
    for chan in chans:
        for a, b in zip(chan, chan[1:]):
            assert a.end_frame <= b.start_frame


@settings(max_examples=200, deadline=None)
@given(st.lists(st.sampled_from([0, 1, 2, 3, 4, 5]), max_size=20))
def test_token_conservation(stream):
    h = hyp(stream)
    turns = split_hypothesis(h, V)
    assert [t for turn in turns for t in turn.tokens] == [
        t for t in stream if V.is_content(t)
    ]
