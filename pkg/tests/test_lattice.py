import json
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from oracles import (
    alignment_paths,
    brute_force_loss,
    central_differences,
    max_relative_error,
    random_log_probs,
)
from sts.errors import ConfigError, NonFiniteError, ShapeError, TokenError
from sts.lattice import (
    LogProbLattice,
    PenaltyConfig,
    TargetSequence,
    apply_eot_penalty,
    apply_fastemit,
    dat_loss,
    dump_lattice_json,
    eot_penalty_values,
    forward_backward,
    load_lattice_json,
    log_softmax,
    rnnt_gradients,
)

BLANK = 0
EOT = 2


def random_case(seed, T, U, V):
    rng = np.random.default_rng(seed)
    lp = random_log_probs(rng, T, U, V)
    tokens = rng.integers(1, V, size=U)
    return LogProbLattice(lp, blank_id=BLANK), TargetSequence(tokens)


def test_single_blank_path():
    lp = np.log([[[0.6, 0.4]]])
    loss, alpha, beta = forward_backward(LogProbLattice(lp), TargetSequence([]))
    assert loss == pytest.approx(-math.log(0.6), abs=1e-12)
    assert loss == pytest.approx(0.5108, abs=1e-4)
    assert loss == pytest.approx(-(alpha[0, 0] + lp[0, 0, 0]))


def test_uniform_two_frames_one_token():
    lp = np.full((2, 2, 3), math.log(1 / 3))
    loss, _, _ = forward_backward(LogProbLattice(lp), TargetSequence([1]))
    assert loss == pytest.approx(-math.log(2 / 27), abs=1e-12)
    assert loss == pytest.approx(2.6027, abs=1e-4)


def test_random_three_frames_two_tokens_matches_enumeration():
    lattice, targets = random_case(7, 3, 2, 4)
    assert len(list(alignment_paths(3, 2))) == 6
    loss, alpha, beta = forward_backward(lattice, targets)
    assert loss == pytest.approx(
        brute_force_loss(lattice.log_probs, targets.tokens), abs=1e-6
    )
    T, U = 3, 2
    assert -beta[0, 0] == pytest.approx(-(alpha[T - 1, U] + lattice.log_probs[T - 1, U, BLANK]))


@settings(max_examples=60, deadline=None)
@given(
    seed=st.integers(0, 2**32 - 1),
    T=st.integers(1, 4),
    U=st.integers(0, 3),
    V=st.integers(2, 5),
)
def test_path_sum_equivalence(seed, T, U, V):
    lattice, targets = random_case(seed, T, U, V)
    loss, _, _ = forward_backward(lattice, targets)
    assert loss == pytest.approx(brute_force_loss(lattice.log_probs, targets.tokens), abs=1e-6)


@pytest.mark.parametrize("seed", range(10))
def test_gradient_matches_finite_differences(seed):
    lattice, targets = random_case(100 + seed, 4, 3, 5)
    result = rnnt_gradients(lattice, targets)

    def f(x):
        return forward_backward(LogProbLattice(x, normalized=False), targets)[0]

    numeric = central_differences(f, lattice.log_probs, 1e-5)
    assert max_relative_error(result.grad, numeric) <= 1e-4


def test_single_node_gradient():
    lp = np.log([[[0.6, 0.3, 0.1]]])
    result = rnnt_gradients(LogProbLattice(lp), TargetSequence([]))
    expected = np.zeros((1, 1, 3))
    expected[0, 0, BLANK] = -1.0
    np.testing.assert_array_equal(result.grad, expected)


def test_gradient_slice_sums_to_node_occupancy():
    lattice, targets = random_case(5, 4, 3, 5)
    result = rnnt_gradients(lattice, targets)
    _, alpha, beta = forward_backward(lattice, targets)
    occupancy = np.exp(alpha + beta - beta[0, 0])
    np.testing.assert_allclose(result.grad.sum(axis=-1), -occupancy, atol=1e-12)


def test_unreached_token_gets_only_softmax_coupling():
    rng = np.random.default_rng(11)
    logits = rng.normal(size=(4, 4, 5))
    targets = TargetSequence([1, 2, 3])
    lattice = LogProbLattice.from_logits(logits)
    result = rnnt_gradients(lattice, targets)
    # token 4 never appears in the targets: no direct log-prob gradient
    assert np.all(result.grad[:, :, 4] == 0.0)

    def f(z):
        return forward_backward(LogProbLattice.from_logits(z), targets)[0]

    numeric = central_differences(f, logits, 1e-5)
    probs = np.exp(lattice.log_probs)
    coupling = -probs[:, :, 4] * result.grad.sum(axis=-1)
    np.testing.assert_allclose(numeric[:, :, 4], coupling, atol=1e-8)


def augmented_fastemit_objective(x, x0, targets, lam):
    """L(x) + lam * L(blank entries frozen at x0, label entries from x)."""
    frozen = x0.copy()
    T, U1, _ = x.shape
    for u, tok in enumerate(targets.tokens):
        frozen[:, u, tok] = x[:, u, tok]
    base = forward_backward(LogProbLattice(x, normalized=False), targets)[0]
    label_path = forward_backward(LogProbLattice(frozen, normalized=False), targets)[0]
    return base + lam * label_path


@pytest.mark.parametrize("lam", [0.005, 0.1])
@pytest.mark.parametrize("seed", range(5))
def test_fastemit_matches_augmented_objective(lam, seed):
    lattice, targets = random_case(200 + seed, 4, 3, 5)
    result = apply_fastemit(rnnt_gradients(lattice, targets), targets, lattice, lam)
    x0 = lattice.log_probs.copy()
    numeric = central_differences(
        lambda x: augmented_fastemit_objective(x, x0, targets, lam), x0, 1e-5
    )
    assert max_relative_error(result.grad, numeric) <= 1e-4
    assert result.loss == rnnt_gradients(lattice, targets).loss


def test_fastemit_zero_is_identity():
    lattice, targets = random_case(3, 4, 2, 4)
    vanilla = rnnt_gradients(lattice, targets)
    out = apply_fastemit(vanilla, targets, lattice, 0.0)
    assert out.loss == vanilla.loss
    assert np.array_equal(out.grad, vanilla.grad)


def test_fastemit_two_path_hand_expansion():
    rng = np.random.default_rng(9)
    lp = random_log_probs(rng, 2, 1, 3)
    k = 2
    y00, y10 = lp[0, 0, k], lp[1, 0, k]
    b00, b01, b11 = lp[0, 0, BLANK], lp[0, 1, BLANK], lp[1, 1, BLANK]
    p1 = math.exp(y00 + b01 + b11)  # emit at t=0
    p2 = math.exp(b00 + y10 + b11)  # emit at t=1
    P = p1 + p2
    expected = np.zeros_like(lp)
    expected[0, 0, k] = -2 * p1 / P
    expected[1, 0, k] = -2 * p2 / P
    expected[0, 0, BLANK] = -p2 / P
    expected[0, 1, BLANK] = -p1 / P
    expected[1, 1, BLANK] = -1.0
    lattice, targets = LogProbLattice(lp), TargetSequence([k])
    out = apply_fastemit(rnnt_gradients(lattice, targets), targets, lattice, 1.0)
    np.testing.assert_allclose(out.grad, expected, atol=1e-12)
    assert out.loss == pytest.approx(-math.log(P), abs=1e-12)


def test_fastemit_rejects_negative_lambda():
    lattice, targets = random_case(1, 2, 1, 3)
    with pytest.raises(ConfigError):
        apply_fastemit(rnnt_gradients(lattice, targets), targets, lattice, -0.1)


def eot_case(T, t_end, seed=0):
    rng = np.random.default_rng(seed)
    lp = random_log_probs(rng, T, 3, 5)
    targets = TargetSequence([3, EOT, 4], eot_ground_truth={1: t_end}, eot_id=EOT)
    return LogProbLattice(lp), targets


def test_penalty_substitution():
    lattice, targets = eot_case(20, 10)
    out = apply_eot_penalty(lattice, targets, PenaltyConfig(alpha=1, tau=3))
    pen = eot_penalty_values(20, 10, PenaltyConfig(alpha=1, tau=3))
    assert pen[14] == 1.0
    assert pen[13] == 0.0
    expected = lattice.log_probs.copy()
    expected[:, 1, EOT] -= pen
    assert np.array_equal(out.log_probs, expected)
    assert not out.normalized


def test_penalty_long_buffer():
    lattice, targets = eot_case(20, 5)
    out = apply_eot_penalty(lattice, targets, PenaltyConfig(alpha=1, tau=10))
    t = np.arange(20)
    pen = np.where(t > 15, t - 15, 0.0)
    assert np.array_equal(eot_penalty_values(20, 5, PenaltyConfig(alpha=1, tau=10)), pen)
    assert np.array_equal(out.log_probs[:, 1, EOT], lattice.log_probs[:, 1, EOT] - pen)


def test_penalty_zero_scale_is_noop():
    lattice, targets = eot_case(12, 4)
    out = apply_eot_penalty(lattice, targets, PenaltyConfig(alpha=0, tau=3))
    assert np.array_equal(out.log_probs, lattice.log_probs)


def test_penalty_requires_ground_truth():
    lp = random_log_probs(np.random.default_rng(0), 6, 2, 5)
    targets = TargetSequence([3, EOT], eot_id=EOT)
    with pytest.raises(ConfigError):
        apply_eot_penalty(LogProbLattice(lp), targets, PenaltyConfig())


def test_penalty_multiple_eots_independent():
    rng = np.random.default_rng(4)
    lp = random_log_probs(rng, 15, 5, 5)
    targets = TargetSequence([3, EOT, 1, 4, EOT], eot_ground_truth={1: 3, 4: 9}, eot_id=EOT)
    out = apply_eot_penalty(LogProbLattice(lp), targets, PenaltyConfig(alpha=2, tau=1))
    t = np.arange(15)
    np.testing.assert_allclose(lp[:, 1, EOT] - out.log_probs[:, 1, EOT], np.maximum(0, 2 * (t - 4)))
    np.testing.assert_allclose(lp[:, 4, EOT] - out.log_probs[:, 4, EOT], np.maximum(0, 2 * (t - 10)))


@pytest.mark.parametrize("seed", range(4))
def test_penalized_gradient_matches_finite_differences(seed):
    rng = np.random.default_rng(300 + seed)
    lp = random_log_probs(rng, 4, 3, 5)
    targets = TargetSequence([3, EOT, 4], eot_ground_truth={1: 0}, eot_id=EOT)
    cfg = PenaltyConfig(alpha=1.0, tau=1)
    lattice = LogProbLattice(lp)
    penalized = apply_eot_penalty(lattice, targets, cfg)
    result = rnnt_gradients(penalized, targets)

    def f(x):
        lat = apply_eot_penalty(LogProbLattice(x, normalized=False), targets, cfg)
        return forward_backward(lat, targets)[0]

    numeric = central_differences(f, lp, 1e-5)
    assert max_relative_error(result.grad, numeric) <= 1e-4
    assert result.loss > forward_backward(lattice, targets)[0]


def test_dat_loss_empty_second_channel():
    lat1, tgt1 = random_case(21, 5, 3, 5)
    lat2, _ = random_case(22, 5, 0, 5)
    total, per = dat_loss([lat1, lat2], [tgt1, TargetSequence([])])
    blank_path = -lat2.log_probs[:, 0, BLANK].sum()
    assert total == pytest.approx(forward_backward(lat1, tgt1)[0] + blank_path, abs=1e-12)
    assert per[1].loss == pytest.approx(blank_path, abs=1e-12)


def test_dat_loss_symmetric_channels():
    lat, tgt = random_case(23, 4, 2, 4)
    total, _ = dat_loss([lat, lat], [tgt, tgt])
    assert total == 2 * forward_backward(lat, tgt)[0]


def test_dat_loss_is_sum_of_channels():
    lat1, tgt1 = random_case(24, 6, 3, 5)
    lat2, tgt2 = random_case(25, 6, 2, 5)
    total, _ = dat_loss([lat1, lat2], [tgt1, tgt2], fastemit_lambda=0.005)
    expected = forward_backward(lat1, tgt1)[0] + forward_backward(lat2, tgt2)[0]
    assert abs(total - expected) <= 1e-9


def test_dat_loss_channel_count_mismatch():
    lat, tgt = random_case(1, 2, 1, 3)
    with pytest.raises(ShapeError):
        dat_loss([lat, lat], [tgt])


def test_errors():
    lattice, _ = random_case(1, 3, 2, 4)
    with pytest.raises(ShapeError):
        forward_backward(lattice, TargetSequence([1]))
    with pytest.raises(TokenError):
        forward_backward(lattice, TargetSequence([1, BLANK]))
    with pytest.raises(TokenError):
        forward_backward(lattice, TargetSequence([1, 9]))
    bad = lattice.log_probs.copy()
    bad[0, 0, 1] = np.nan
    with pytest.raises(NonFiniteError):
        LogProbLattice(bad)
    bad[0, 0, 1] = -np.inf
    with pytest.raises(NonFiniteError):
        LogProbLattice(bad)


def test_very_small_log_probs_stay_finite():
    rng = np.random.default_rng(2)
    V = 4
    lp = np.full((30, 6, V), -40.0)
    lp[..., 1] = rng.uniform(-40, -35, size=(30, 6))
    lp = log_softmax(lp)
    targets = TargetSequence([1, 2, 3, 1, 2])
    result = rnnt_gradients(LogProbLattice(lp), targets)
    assert np.isfinite(result.loss)
    assert np.all(np.isfinite(result.grad))


def test_json_dump_round_trip():
    lattice, targets = random_case(31, 3, 2, 4)
    result = rnnt_gradients(lattice, targets)
    text = dump_lattice_json(lattice, result.grad)
    obj = json.loads(text)
    assert obj["shape"] == [3, 3, 4]
    loaded, grad = load_lattice_json(text)
    assert np.array_equal(loaded.log_probs, lattice.log_probs)
    assert np.array_equal(grad, result.grad)
