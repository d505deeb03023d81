"""Transducer losses over explicit log-probability lattices.

A lattice holds ``log_probs[t, u, v]``: the log-probability of emitting
vocabulary entry ``v`` from node ``(t, u)``, where ``t`` indexes encoder
frames and ``u`` the number of target tokens already emitted. A path starts
at ``(0, 0)``, moves ``(t, u) -> (t + 1, u)`` on blank and
``(t, u) -> (t, u + 1)`` on the next target token, and ends with the blank
leaving ``(T - 1, U)``.

Everything here works in float64 and in the log domain.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Mapping, Optional, Sequence

import numpy as np

from .errors import ConfigError, NonFiniteError, ShapeError, TokenError

NEG_INF = -1e30
NORMALIZATION_TOL = 1e-6


def _logsumexp_last(x: np.ndarray) -> np.ndarray:
    m = x.max(axis=-1, keepdims=True)
    return (m + np.log(np.exp(x - m).sum(axis=-1, keepdims=True)))[..., 0]


def log_softmax(logits: np.ndarray) -> np.ndarray:
    logits = np.asarray(logits, dtype=np.float64)
    m = logits.max(axis=-1, keepdims=True)
    shifted = logits - m
    return shifted - np.log(np.exp(shifted).sum(axis=-1, keepdims=True))


@dataclass(frozen=True)
class LogProbLattice:
    """A ``T x (U+1) x V`` grid of log-probabilities for one output channel.

    ``normalized=False`` skips the log-softmax check; it is used for lattices
    that carry an additive training bias (see :func:`apply_eot_penalty`).
    """

    log_probs: np.ndarray
    blank_id: int = 0
    normalized: bool = True

    def __post_init__(self):
        lp = np.array(self.log_probs, dtype=np.float64)
        if lp.ndim != 3:
            raise ShapeError("log_probs must be 3-D (T, U+1, V)", shape=list(lp.shape))
        T, U1, V = lp.shape
        if T < 1 or U1 < 1 or V < 2:
            raise ShapeError("lattice needs T >= 1, U >= 0, V >= 2", shape=[T, U1, V])
        if not 0 <= self.blank_id < V:
            raise TokenError("blank_id out of range", blank_id=self.blank_id, vocab_size=V)
        if not np.all(np.isfinite(lp)):
            raise NonFiniteError("lattice contains NaN or Inf entries")
        if self.normalized:
            dev = np.abs(np.exp(_logsumexp_last(lp)) - 1.0).max()
            if dev > NORMALIZATION_TOL:
                raise ValueError(f"lattice slices are not log-softmax normalized (max deviation {dev:.3g})")
        lp.setflags(write=False)
        object.__setattr__(self, "log_probs", lp)

    @property
    def T(self) -> int:
        return self.log_probs.shape[0]

    @property
    def U(self) -> int:
        return self.log_probs.shape[1] - 1

    @property
    def V(self) -> int:
        return self.log_probs.shape[2]

    @classmethod
    def from_logits(cls, logits, blank_id: int = 0) -> "LogProbLattice":
        return cls(log_softmax(logits), blank_id=blank_id)


@dataclass(frozen=True)
class TargetSequence:
    """Target tokens for one channel.

    ``eot_ground_truth`` maps the position of each end-of-turn token in
    ``tokens`` to the encoder frame where that turn really ended.
    """

    tokens: tuple
    eot_ground_truth: Mapping[int, int] = field(default_factory=dict)
    eot_id: Optional[int] = None

    def __post_init__(self):
        object.__setattr__(self, "tokens", tuple(int(t) for t in self.tokens))
        gt = {int(k): int(v) for k, v in dict(self.eot_ground_truth).items()}
        object.__setattr__(self, "eot_ground_truth", gt)
        for pos in gt:
            if not 0 <= pos < len(self.tokens):
                raise ShapeError("eot ground truth position outside the sequence", position=pos)
            if self.eot_id is None or self.tokens[pos] != self.eot_id:
                raise TokenError("eot ground truth attached to a non-eot token", position=pos)

    @property
    def U(self) -> int:
        return len(self.tokens)

    def eot_positions(self) -> list:
        if self.eot_id is None:
            return []
        return [i for i, tok in enumerate(self.tokens) if tok == self.eot_id]


@dataclass
class LossResult:
    loss: float
    grad: np.ndarray


@dataclass(frozen=True)
class PenaltyConfig:
    alpha: float = 1.0
    tau: int = 3

    def __post_init__(self):
        if self.alpha < 0:
            raise ConfigError("penalty alpha must be >= 0", alpha=self.alpha)
        if self.tau < 0 or int(self.tau) != self.tau:
            raise ConfigError("penalty tau must be a nonnegative integer", tau=self.tau)


def _check_pair(lattice: LogProbLattice, targets: TargetSequence):
    if lattice.U != targets.U:
        raise ShapeError(
            "lattice target axis does not match target length",
            lattice_u=lattice.U,
            target_u=targets.U,
        )
    for tok in targets.tokens:
        if not 0 <= tok < lattice.V:
            raise TokenError("target token outside vocabulary", token=tok, vocab_size=lattice.V)
        if tok == lattice.blank_id:
            raise TokenError("target sequence contains the blank id", token=tok)


def _transition_scores(lattice: LogProbLattice, targets: TargetSequence):
    lp = lattice.log_probs
    blank = lp[:, :, lattice.blank_id]
    if targets.U:
        idx = np.asarray(targets.tokens)
        label = lp[:, np.arange(targets.U), idx]
    else:
        label = np.zeros((lattice.T, 0))
    return blank, label


def _forward(blank: np.ndarray, label: np.ndarray) -> np.ndarray:
    T, U1 = blank.shape
    U = U1 - 1
    alpha = np.full((T, U1), NEG_INF)
    alpha[0, 0] = 0.0
    # sweep anti-diagonals d = t + u; every cell on one depends only on the previous one
    for d in range(1, T + U):
        ts = np.arange(max(0, d - U), min(T - 1, d) + 1)
        us = d - ts
        from_blank = np.where(
            ts > 0, alpha[np.maximum(ts - 1, 0), us] + blank[np.maximum(ts - 1, 0), us], NEG_INF
        )
        if U:
            prev_u = np.maximum(us - 1, 0)
            from_label = np.where(us > 0, alpha[ts, prev_u] + label[ts, prev_u], NEG_INF)
        else:
            from_label = NEG_INF
        alpha[ts, us] = np.logaddexp(from_blank, from_label)
    return alpha


def _backward(blank: np.ndarray, label: np.ndarray) -> np.ndarray:
    T, U1 = blank.shape
    U = U1 - 1
    beta = np.full((T, U1), NEG_INF)
    beta[T - 1, U] = blank[T - 1, U]
    for d in range(T + U - 2, -1, -1):
        ts = np.arange(max(0, d - U), min(T - 1, d) + 1)
        us = d - ts
        nxt_t = np.minimum(ts + 1, T - 1)
        via_blank = np.where(ts < T - 1, beta[nxt_t, us] + blank[ts, us], NEG_INF)
        if U:
            nxt_u = np.minimum(us + 1, U)
            via_label = np.where(
                us < U, beta[ts, nxt_u] + label[ts, np.minimum(us, U - 1)], NEG_INF
            )
        else:
            via_label = np.full(ts.shape, NEG_INF)
        beta[ts, us] = np.logaddexp(via_blank, via_label)
    return beta


def forward_backward(lattice: LogProbLattice, targets: TargetSequence):
    """Negative log-likelihood of ``targets`` plus the alpha and beta grids.

    Returns ``(loss, alpha, beta)``; ``loss == -beta[0, 0]``.
    """
    _check_pair(lattice, targets)
    blank, label = _transition_scores(lattice, targets)
    alpha = _forward(blank, label)
    beta = _backward(blank, label)
    return float(-beta[0, 0]), alpha, beta


def rnnt_gradients(lattice: LogProbLattice, targets: TargetSequence) -> LossResult:
    """Loss and ``d loss / d log_probs`` from transition occupancies.

    Only the blank entry and the next-target entry of each node receive
    gradient; every other entry is zero in log-probability coordinates.
    """
    _check_pair(lattice, targets)
    blank, label = _transition_scores(lattice, targets)
    alpha = _forward(blank, label)
    beta = _backward(blank, label)
    log_p = beta[0, 0]
    T, U1 = blank.shape
    U = U1 - 1

    beta_next_t = np.full((T, U1), NEG_INF)
    beta_next_t[:-1] = beta[1:]
    beta_next_t[T - 1, U] = 0.0  # the final blank terminates the path
    grad = np.zeros(lattice.log_probs.shape)
    grad[:, :, lattice.blank_id] = -np.exp(alpha + blank + beta_next_t - log_p)
    if U:
        occ = -np.exp(alpha[:, :U] + label + beta[:, 1:] - log_p)
        grad[:, np.arange(U), np.asarray(targets.tokens)] += occ
    return LossResult(loss=float(-log_p), grad=grad)


def apply_fastemit(
    result: LossResult,
    targets: TargetSequence,
    lattice: LogProbLattice,
    lam: float,
) -> LossResult:
    """FastEmit: scale the label-transition part of the gradient by ``1 + lam``.

    The blank-transition part is untouched and the reported loss stays the
    transducer NLL. This is the gradient of ``L(x) + lam * L(x_blank^0, x_label)``
    with the blank entries held at their current values.
    """
    if lam < 0:
        raise ConfigError("FastEmit lambda must be >= 0", lam=lam)
    if lam == 0:
        return result
    _check_pair(lattice, targets)
    if result.grad.shape != lattice.log_probs.shape:
        raise ShapeError("gradient shape does not match lattice", grad=list(result.grad.shape))
    grad = result.grad.copy()
    if targets.U:
        us = np.arange(targets.U)
        toks = np.asarray(targets.tokens)
        grad[:, us, toks] *= 1.0 + lam
    return LossResult(loss=result.loss, grad=grad)


def eot_penalty_values(T: int, t_end: int, config: PenaltyConfig) -> np.ndarray:
    """``max(0, alpha * (t - tau - t_end))`` for ``t = 0 .. T-1``."""
    t = np.arange(T, dtype=np.float64)
    return np.maximum(0.0, config.alpha * (t - config.tau - t_end))


def apply_eot_penalty(
    lattice: LogProbLattice, targets: TargetSequence, config: PenaltyConfig
) -> LogProbLattice:
    """Subtract the late-emission penalty from each target eot row.

    The result is not renormalized.
    """
    _check_pair(lattice, targets)
    positions = targets.eot_positions()
    missing = [p for p in positions if p not in targets.eot_ground_truth]
    if missing:
        raise ConfigError("eot token without ground-truth end frame", positions=missing)
    if config.alpha == 0 or not positions:
        return lattice
    lp = lattice.log_probs.copy()
    for pos in positions:
        t_end = targets.eot_ground_truth[pos]
        if not 0 <= t_end < lattice.T:
            raise ShapeError("t_end outside the lattice time axis", t_end=t_end, T=lattice.T)
        lp[:, pos, targets.eot_id] -= eot_penalty_values(lattice.T, t_end, config)
    return LogProbLattice(lp, blank_id=lattice.blank_id, normalized=False)


def channel_loss(
    lattice: LogProbLattice,
    targets: TargetSequence,
    fastemit_lambda: float = 0.0,
    penalty: Optional[PenaltyConfig] = None,
) -> LossResult:
    if penalty is not None:
        lattice = apply_eot_penalty(lattice, targets, penalty)
    result = rnnt_gradients(lattice, targets)
    return apply_fastemit(result, targets, lattice, fastemit_lambda)


def dat_loss(
    lattices: Sequence[LogProbLattice],
    targets: Sequence[TargetSequence],
    fastemit_lambda: float = 0.0,
    penalty: Optional[PenaltyConfig] = None,
):
    """Sum of per-channel transducer losses with a fixed channel pairing.

    Channel ``n`` is always scored against ``targets[n]``; no permutation
    search is done. Returns ``(total, [LossResult per channel])``.
    """
    if len(lattices) != len(targets):
        raise ShapeError(
            "one target sequence per channel lattice is required",
            n_lattices=len(lattices),
            n_targets=len(targets),
        )
    per_channel = [
        channel_loss(lat, tgt, fastemit_lambda, penalty) for lat, tgt in zip(lattices, targets)
    ]
    return float(sum(r.loss for r in per_channel)), per_channel


def _fmt(x: float) -> str:
    return format(float(x), ".17g")


def _nested(a: np.ndarray) -> str:
    if a.ndim == 1:
        return "[" + ",".join(_fmt(x) for x in a) + "]"
    return "[" + ",".join(_nested(sub) for sub in a) + "]"


def dump_lattice_json(lattice: LogProbLattice, grad: Optional[np.ndarray] = None) -> str:
    """Debug dump: row-major ``[t][u][v]`` arrays at 17 significant digits."""
    parts = [
        '"schema":"sts.lattice/v1"',
        f'"shape":[{lattice.T},{lattice.U + 1},{lattice.V}]',
        f'"blank_id":{lattice.blank_id}',
        f'"log_probs":{_nested(lattice.log_probs)}',
    ]
    if grad is not None:
        parts.append(f'"grad":{_nested(np.asarray(grad, dtype=np.float64))}')
    return "{" + ",".join(parts) + "}"


def load_lattice_json(text: str):
    import json

    obj = json.loads(text)
    lattice = LogProbLattice(
        np.asarray(obj["log_probs"], dtype=np.float64), blank_id=obj["blank_id"], normalized=False
    )
    grad = np.asarray(obj["grad"], dtype=np.float64) if "grad" in obj else None
    return lattice, grad
