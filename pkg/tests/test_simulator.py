import hashlib
import json
from collections import Counter

import numpy as np
import pytest
from scipy.stats import chisquare

from sts import io as sio
from sts.errors import GeometryError, SimulationError
from sts.segmenter import Turn
from sts.simulator import (
    SimConfig,
    make_eval_set,
    mean_overlap_ratio,
    mean_square,
    mix,
    overlap_ratios,
    partition_configs,
    place_turns,
    simulate_example,
    stack_frames,
    synth_utterance,
    token_embedding,
)
from sts.vocab import Vocab


def rng(seed=0):
    return np.random.default_rng(seed)


def test_noiseless_utterance_is_embeddings():
    block, spans = synth_utterance([3, 4, 5], 4, 0.0, rng(), feature_dim=8)
    assert block.shape == (12, 8)
    expected = np.concatenate([np.tile(token_embedding(t, 8), (4, 1)) for t in [3, 4, 5]])
    assert np.array_equal(block, expected)
    assert spans == [(0, 4), (4, 8), (8, 12)]


def test_utterance_determinism():
    a, _ = synth_utterance([3, 7], 5, 0.3, rng(42))
    b, _ = synth_utterance([3, 7], 5, 0.3, rng(42))
    assert np.array_equal(a, b)


def test_long_gap_placement():
    for seed in range(50):
        offsets = place_turns([100, 100], "0L", rng(seed))
        gap = offsets[1] - 100
        assert 50 <= gap <= 150


def test_short_gap_placement():
    offsets = place_turns([20, 20, 20], "0S", rng(1))
    assert 1 <= offsets[1] - 20 <= 10
    assert 1 <= offsets[2] - offsets[1] - 20 <= 10


@pytest.mark.parametrize("style,expected", [("OV10", 10), ("OV20", 20), ("OV30", 30), ("OV40", 40)])
def test_overlap_placement(style, expected):
    offsets = place_turns([100, 100], style, rng())
    turns = [Turn("a", offsets[0], offsets[0] + 100, (3,)), Turn("b", offsets[1], offsets[1] + 100, (3,))]
    overlap = 200 - (turns[1].end_frame - turns[0].start_frame)
    assert abs(overlap - expected) <= 1
    assert overlap_ratios(turns) == [pytest.approx(expected / 100, abs=0.01)]


@pytest.mark.parametrize("style", ["0S", "0L", "OV10", "OV40", "mixed"])
def test_single_turn_offset_zero(style):
    assert place_turns([37], style, rng()) == [0]


def test_impossible_overlap_raises():
    # two 70 % overlaps cannot both fit inside the middle turn
    with pytest.raises(GeometryError):
        place_turns([100, 50, 100], 0.7, rng())
    assert place_turns([100, 50, 100], 0.4, rng()) == [0, 80, 110]


def test_no_three_way_overlap_in_placement():
    for seed in range(200):
        r = rng(seed)
        lengths = list(r.integers(5, 60, size=5))
        try:
            offsets = place_turns(lengths, "OV40", r)
        except GeometryError:
            continue
        active = np.zeros(max(o + l for o, l in zip(offsets, lengths)), dtype=int)
        for o, l in zip(offsets, lengths):
            active[o : o + l] += 1
        assert active.max() <= 2


def test_equal_energy_mix_doubles_overlap():
    block, _ = synth_utterance([3, 4], 5, 0.0, rng())
    features, scales = mix([block, block], [0, 4], [0.0, 0.0])
    assert scales == [1.0, 1.0]
    np.testing.assert_allclose(features[4:10], block[4:10] + block[0:6])
    np.testing.assert_allclose(features[0:4], block[0:4])


def test_minus_five_db_scale():
    block, _ = synth_utterance([3, 4], 5, 0.0, rng())
    _, scales = mix([block, block], [0, 20], [0.0, -5.0])
    assert scales[1] == pytest.approx(10 ** (-5 / 20), rel=1e-12)
    assert scales[1] == pytest.approx(0.5623, abs=1e-4)


def test_energy_ratio_remeasured():
    r = rng(3)
    blocks = [synth_utterance(toks, 6, 0.1, r)[0] for toks in ([3, 4, 5], [6, 7], [8, 9, 10, 11])]
    ratios = [0.0, 3.7, -4.2]
    _, scales = mix(blocks, [0, 30, 70], ratios)
    for k in (1, 2):
        measured = 10 * np.log10(mean_square(scales[k] * blocks[k]) / mean_square(scales[0] * blocks[0]))
        assert abs(measured - ratios[k]) <= 0.1


def test_silence_is_noise_only():
    block, _ = synth_utterance([3], 4, 0.0, rng())
    features, _ = mix([block, block], [0, 10], [0.0, 0.0], noise_std=0.5, rng=rng(1))
    assert np.all(features[4:10] != 0)
    assert np.array_equal(features[:4], block)


def test_single_turn_config_has_no_boundary_tokens():
    cfg = SimConfig(n_turns_range=(1, 1))
    vocab = Vocab()
    for seed in range(20):
        ex = simulate_example(cfg, rng(seed), vocab)
        assert len(ex.turns) == 1
        for tgt in ex.channel_targets.targets:
            assert vocab.sot not in tgt.tokens and vocab.eot not in tgt.tokens


def test_simulation_determinism():
    cfg = SimConfig()
    a = simulate_example(cfg, rng(11))
    b = simulate_example(cfg, rng(11))
    assert np.array_equal(a.features, b.features)
    assert a.turns == b.turns
    assert a.meta == b.meta


def test_turn_count_distribution_uniform():
    cfg = SimConfig(n_turns_range=(1, 5), tokens_per_turn_range=(1, 2), frames_per_token=3)
    r = rng(123)
    counts = Counter(len(simulate_example(cfg, r).turns) for _ in range(10_000))
    observed = [counts[k] for k in range(1, 6)]
    assert chisquare(observed).pvalue > 0.01


def test_example_invariants():
    cfg = SimConfig(max_duration_frames=400)
    for seed in range(100):
        ex = simulate_example(cfg, rng(seed))
        T_raw = ex.features.shape[0]
        assert T_raw <= cfg.max_duration_frames
        assert np.all(np.isfinite(ex.features))
        active = np.zeros(T_raw, dtype=int)
        for t in ex.turns:
            assert 0 <= t.start_frame < t.end_frame <= T_raw
            active[t.start_frame : t.end_frame] += 1
        assert active.max() <= 2
        for mask, chan in zip(ex.channel_targets.masks, ex.channel_targets.turns):
            expected = np.zeros_like(mask)
            for t in chan:
                expected[t.encoder_start : t.encoder_end + 1] = 1
            assert np.array_equal(mask, expected)
        assert ex.stacked.shape == (len(ex.channel_targets.masks[0]), 3 * cfg.feature_dim)
        scaled = [ex.meta["scales"][k] for k in range(len(ex.turns))]
        assert len(scaled) == len(ex.meta["energy_ratios_db"])


def test_duration_filter_rejects():
    cfg = SimConfig(n_turns_range=(5, 5), tokens_per_turn_range=(5, 5), max_duration_frames=20)
    with pytest.raises(SimulationError):
        simulate_example(cfg, rng())


def test_stack_frames():
    x = np.arange(14, dtype=float).reshape(7, 2)
    s = stack_frames(x)
    assert s.shape == (3, 6)
    assert list(s[0]) == [0, 1, 2, 3, 4, 5]
    assert list(s[2]) == [12, 13, 0, 0, 0, 0]


def _digest(root):
    h = hashlib.sha256()
    for p in sorted(root.rglob("*")):
        if p.is_file():
            h.update(str(p.relative_to(root)).encode())
            h.update(p.read_bytes())
    return h.hexdigest()


def test_empty_eval_set(tmp_path):
    path = make_eval_set(partition_configs(SimConfig()), 0, 7, tmp_path)
    manifest = sio.read_manifest(path)
    assert manifest["examples"] == []
    assert sio.load_dataset(path) == []


def test_eval_set_regeneration_is_byte_identical(tmp_path):
    cfgs = partition_configs(SimConfig(), ["0S", "OV20"])
    make_eval_set(cfgs, 4, 99, tmp_path / "a")
    make_eval_set(cfgs, 4, 99, tmp_path / "b")
    assert _digest(tmp_path / "a") == _digest(tmp_path / "b")


def test_eval_set_round_trip(tmp_path):
    cfgs = partition_configs(SimConfig(), ["OV10"])
    path = make_eval_set(cfgs, 12, 5, tmp_path)
    examples = sio.load_dataset(path)
    assert len(examples) == 12
    assert {e.meta["split"] for e in examples} == {"dev", "test"}
    assert len(sio.load_dataset(path, split="dev")) == 2
    manifest = json.loads(path.read_text())
    assert manifest["partitions"]["OV10"]["n_examples"] == 12


def test_ov30_partition_overlap_ratio(tmp_path):
    cfgs = {"OV30": SimConfig(overlap_style="OV30", n_turns_range=(2, 5))}
    path = make_eval_set(cfgs, 40, 1, tmp_path)
    examples = sio.load_dataset(path)
    assert abs(mean_overlap_ratio(examples) - 0.30) <= 0.05
    assert abs(sio.read_manifest(path)["partitions"]["OV30"]["mean_overlap_ratio"] - 0.30) <= 0.05
