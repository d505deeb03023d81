"""Desk-scale separator-transducer network.

A mixture encoder feeds two separation encoders with distinct weights; a
recognition encoder shared across channels turns each separated stream
into ``h_n``. A prediction network over the blank-prepended target prefix
and a one-hidden-layer joint network produce one log-probability lattice
per channel.
"""

from dataclasses import asdict, dataclass
from typing import Dict, List, Optional

import numpy as np

from ..errors import ConfigError, NonFiniteError, ShapeError, TokenError
from ..lattice import LogProbLattice, TargetSequence, dat_loss, log_softmax
from ..segmenter import ChannelHypothesis
from ..vocab import STACK, Vocab
from . import layers as L

NORM_RATIO_CAP = 1e9
INIT_SCALE = 0.1


@dataclass(frozen=True)
class ModelConfig:
    feature_dim: int = 8
    hidden_dim: int = 16
    joint_dim: int = 16
    vocab_size: int = 16
    mix_layers: int = 1
    sep_layers: int = 1
    rec_layers: int = 1
    pred_layers: int = 1
    n_channels: int = 2
    shared_recognition: bool = True
    seed: int = 0

    def __post_init__(self):
        dims = ("feature_dim", "hidden_dim", "joint_dim", "mix_layers", "sep_layers", "rec_layers", "pred_layers")
        for name in dims:
            if int(getattr(self, name)) < 1:
                raise ConfigError(f"{name} must be >= 1", **{name: getattr(self, name)})
        if self.n_channels != 2:
            raise ConfigError("only two output channels are supported", n_channels=self.n_channels)
        if self.vocab_size < 4:
            raise ConfigError("vocab_size must cover blank, sot, eot and one content token", vocab_size=self.vocab_size)
        if not 0 <= int(self.seed) < 2**64:
            raise ConfigError("seed must be a 64-bit unsigned integer", seed=self.seed)

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        known = set(cls.__dataclass_fields__)
        unknown = set(d) - known
        if unknown:
            raise ConfigError("unknown model config keys", keys=sorted(unknown))
        return cls(**d)

    def to_dict(self) -> dict:
        return asdict(self)


# Documented only; never instantiated by the tests.
FULL_SCALE_PROFILE = dict(
    hidden_dim=1024,
    joint_dim=512,
    output_dim=640,
    vocab_size=2503,
    mix_layers=2,
    sep_layers=2,
    rec_layers=2,
    pred_layers=2,
    cell="lstm",
)


@dataclass
class EncoderOutputs:
    h: List[np.ndarray]

    @property
    def n_frames(self) -> int:
        return self.h[0].shape[0]


@dataclass(frozen=True)
class NormRatio:
    value: float
    defined: bool

    def to_json(self):
        return self.value if self.defined else None


def _stack_names(prefix, n_layers, in_dim, H):
    shapes = {}
    for l in range(n_layers):
        p = f"{prefix}.{l}"
        shapes[p + ".W"] = (in_dim if l == 0 else H, 2 * H)
        shapes[p + ".U"] = (H, 2 * H)
        shapes[p + ".b"] = (2 * H,)
        shapes[p + ".ln_g"] = (H,)
        shapes[p + ".ln_b"] = (H,)
    return shapes


def parameter_shapes(cfg: ModelConfig) -> Dict[str, tuple]:
    H, J, V = cfg.hidden_dim, cfg.joint_dim, cfg.vocab_size
    shapes = {}
    shapes.update(_stack_names("mix", cfg.mix_layers, STACK * cfg.feature_dim, H))
    for n in range(cfg.n_channels):
        shapes.update(_stack_names(f"sep{n}", cfg.sep_layers, H, H))
    rec_prefixes = ["rec"] if cfg.shared_recognition else [f"rec{n}" for n in range(cfg.n_channels)]
    for p in rec_prefixes:
        shapes.update(_stack_names(p, cfg.rec_layers, H, H))
        shapes[p + ".out.W"] = (H, H)
        shapes[p + ".out.b"] = (H,)
    shapes["pred.emb"] = (V, H)
    shapes.update(_stack_names("pred", cfg.pred_layers, H, H))
    shapes["pred.out.W"] = (H, H)
    shapes["pred.out.b"] = (H,)
    shapes["joint.We"] = (H, J)
    shapes["joint.Wp"] = (H, J)
    shapes["joint.b"] = (J,)
    shapes["joint.Wo"] = (J, V)
    shapes["joint.bo"] = (V,)
    return shapes


def init_params(cfg: ModelConfig) -> Dict[str, np.ndarray]:
    """Uniform init in [-0.1, 0.1]; layer-norm gains start at one."""
    rng = np.random.default_rng(cfg.seed)
    params = {}
    for name, shape in parameter_shapes(cfg).items():
        if name.endswith(".ln_g"):
            params[name] = np.ones(shape)
        elif name.endswith(".ln_b"):
            params[name] = np.zeros(shape)
        else:
            params[name] = rng.uniform(-INIT_SCALE, INIT_SCALE, size=shape)
    return params


def stack_features(features: np.ndarray) -> np.ndarray:
    T_raw, F = features.shape
    T = -(-T_raw // STACK)
    padded = np.zeros((T * STACK, F))
    padded[:T_raw] = features
    return padded.reshape(T, STACK * F)


class STSModel:
    """Parameters plus forward, loss and decoding routines.

    ``params`` is a plain dict of float64 arrays; gradients come back in a
    dict with the same keys.
    """

    def __init__(self, config: Optional[ModelConfig] = None, params: Optional[Dict[str, np.ndarray]] = None):
        self.config = config or ModelConfig()
        self.vocab = Vocab(self.config.vocab_size)
        if params is None:
            params = init_params(self.config)
        else:
            expected = parameter_shapes(self.config)
            if set(params) != set(expected):
                raise ShapeError("parameter names do not match the config", missing=sorted(set(expected) - set(params)))
            for k, shape in expected.items():
                if tuple(np.shape(params[k])) != shape:
                    raise ShapeError("parameter shape mismatch", name=k, expected=shape, got=np.shape(params[k]))
            params = {k: np.array(params[k], dtype=np.float64) for k in expected}
        self.params = params

    def rec_prefix(self, n: int) -> str:
        return "rec" if self.config.shared_recognition else f"rec{n}"

    def copy(self) -> "STSModel":
        return STSModel(self.config, {k: v.copy() for k, v in self.params.items()})

    def zero_grads(self) -> Dict[str, np.ndarray]:
        return {k: np.zeros_like(v) for k, v in self.params.items()}

    # forward pieces

    def _stack_forward(self, prefix, x, n_layers):
        P = self.params
        caches = []
        for l in range(n_layers):
            p = f"{prefix}.{l}"
            hs, cc = L.gated_cell_forward(x, P[p + ".W"], P[p + ".U"], P[p + ".b"])
            x, lc = L.layernorm_forward(hs, P[p + ".ln_g"], P[p + ".ln_b"])
            caches.append((cc, lc))
        return x, caches

    def _stack_backward(self, prefix, dy, caches, grads):
        P = self.params
        for l in range(len(caches) - 1, -1, -1):
            p = f"{prefix}.{l}"
            cc, lc = caches[l]
            dhs, dg, db = L.layernorm_backward(dy, lc, P[p + ".ln_g"])
            grads[p + ".ln_g"] += dg
            grads[p + ".ln_b"] += db
            dy, dW, dU, dbc = L.gated_cell_backward(dhs, cc, P[p + ".W"], P[p + ".U"])
            grads[p + ".W"] += dW
            grads[p + ".U"] += dU
            grads[p + ".b"] += dbc
        return dy

    def _check_features(self, features) -> np.ndarray:
        x = np.asarray(features, dtype=np.float64)
        if x.ndim != 2 or x.shape[1] != self.config.feature_dim:
            raise ShapeError("features must be T x feature_dim", shape=x.shape, feature_dim=self.config.feature_dim)
        if x.shape[0] == 0:
            raise ShapeError("features have no frames", shape=x.shape)
        if not np.all(np.isfinite(x)):
            raise NonFiniteError("features contain non-finite values")
        return x

    def _encode(self, features):
        cfg = self.config
        x = stack_features(self._check_features(features))
        mix_out, mix_cache = self._stack_forward("mix", x, cfg.mix_layers)
        hs, caches = [], []
        for n in range(cfg.n_channels):
            sep_out, sep_cache = self._stack_forward(f"sep{n}", mix_out, cfg.sep_layers)
            rp = self.rec_prefix(n)
            rec_out, rec_cache = self._stack_forward(rp, sep_out, cfg.rec_layers)
            h, _ = L.linear_forward(rec_out, self.params[rp + ".out.W"], self.params[rp + ".out.b"])
            hs.append(h)
            caches.append((sep_cache, rec_cache, rec_out))
        return EncoderOutputs(hs), (mix_cache, caches)

    def _encode_backward(self, dhs, cache, grads):
        cfg = self.config
        mix_cache, caches = cache
        dmix = 0.0
        for n in range(cfg.n_channels):
            sep_cache, rec_cache, rec_out = caches[n]
            rp = self.rec_prefix(n)
            drec, dW, db = L.linear_backward(dhs[n], rec_out, self.params[rp + ".out.W"])
            grads[rp + ".out.W"] += dW
            grads[rp + ".out.b"] += db
            dsep = self._stack_backward(rp, drec, rec_cache, grads)
            dmix = dmix + self._stack_backward(f"sep{n}", dsep, sep_cache, grads)
        self._stack_backward("mix", dmix, mix_cache, grads)

    def encode(self, features) -> EncoderOutputs:
        """Per-channel recognition-encoder outputs for raw ``T_raw x F`` features.

        Raw frames are stacked three at a time, so the output has
        ``ceil(T_raw / 3)`` frames.
        """
        return self._encode(features)[0]

    def _check_tokens(self, tokens):
        tokens = [int(t) for t in tokens]
        for t in tokens:
            if not 0 <= t < self.config.vocab_size:
                raise TokenError("token id outside the vocabulary", token=t, vocab_size=self.config.vocab_size)
        return tokens

    def _predict(self, tokens):
        P = self.params
        prefix = np.array([self.vocab.blank] + tokens, dtype=int)
        e = P["pred.emb"][prefix]
        y, caches = self._stack_forward("pred", e, self.config.pred_layers)
        g, _ = L.linear_forward(y, P["pred.out.W"], P["pred.out.b"])
        return g, (prefix, caches, y)

    def _predict_backward(self, dg, cache, grads):
        prefix, caches, y = cache
        dy, dW, db = L.linear_backward(dg, y, self.params["pred.out.W"])
        grads["pred.out.W"] += dW
        grads["pred.out.b"] += db
        de = self._stack_backward("pred", dy, caches, grads)
        np.add.at(grads["pred.emb"], prefix, de)

    def _joint(self, h, g):
        P = self.params
        he = h @ P["joint.We"]
        ge = g @ P["joint.Wp"]
        z = np.tanh(he[:, None, :] + ge[None, :, :] + P["joint.b"])
        logp = log_softmax(z @ P["joint.Wo"] + P["joint.bo"])
        return logp, z

    def _joint_backward(self, dlogp, logp, z, h, g, grads):
        P = self.params
        dlogits = L.log_softmax_backward(dlogp, logp)
        J, V = P["joint.Wo"].shape
        grads["joint.Wo"] += z.reshape(-1, J).T @ dlogits.reshape(-1, V)
        grads["joint.bo"] += dlogits.sum(axis=(0, 1))
        da = (dlogits @ P["joint.Wo"].T) * (1.0 - z * z)
        grads["joint.b"] += da.sum(axis=(0, 1))
        dhe = da.sum(axis=1)
        dge = da.sum(axis=0)
        grads["joint.We"] += h.T @ dhe
        grads["joint.Wp"] += g.T @ dge
        return dhe @ P["joint.We"].T, dge @ P["joint.Wp"].T

    def joint_lattice(self, h: np.ndarray, targets) -> LogProbLattice:
        """Log-probability lattice ``T x (U+1) x V`` for one channel."""
        tokens = self._check_tokens(targets.tokens if isinstance(targets, TargetSequence) else targets)
        g, _ = self._predict(tokens)
        logp, _ = self._joint(np.asarray(h, dtype=np.float64), g)
        return LogProbLattice(logp, blank_id=self.vocab.blank)

    # losses

    @staticmethod
    def _check_masks(h: EncoderOutputs, masks):
        out = []
        for n, m in enumerate(masks):
            m = np.asarray(m)
            if m.shape != (h.h[n].shape[0],):
                raise ShapeError("mask length must equal the encoder frame count", channel=n, mask=m.shape, frames=h.h[n].shape[0])
            if not np.all((m == 0) | (m == 1)):
                raise ShapeError("mask entries must be 0 or 1", channel=n)
            out.append(m.astype(np.float64))
        if len(out) != len(h.h):
            raise ShapeError("one mask per channel is required", n_masks=len(out), n_channels=len(h.h))
        return out

    def masking_loss(self, h: EncoderOutputs, masks) -> float:
        return masking_loss(h, masks)

    def norm_ratio(self, h: EncoderOutputs, masks) -> NormRatio:
        return norm_ratio(h, masks)

    def total_loss(self, example, cfg, grads=None):
        """Combined transducer and masking loss for one example with gradients.

        ``cfg`` needs ``gamma``, ``fastemit_lambda`` and ``penalty``
        attributes. Returns ``(loss, grads, info)``; when ``grads`` is given
        the gradients are accumulated into it.
        """
        ct = example.channel_targets
        enc, enc_cache = self._encode(example.features)
        masks = self._check_masks(enc, ct.masks)
        if grads is None:
            grads = self.zero_grads()
        lattices, joint_caches = [], []
        for n in range(self.config.n_channels):
            tokens = self._check_tokens(ct.targets[n].tokens)
            g, pcache = self._predict(tokens)
            logp, z = self._joint(enc.h[n], g)
            lattices.append(LogProbLattice(logp, blank_id=self.vocab.blank))
            joint_caches.append((logp, z, g, pcache))
        rnnt, per_channel = dat_loss(lattices, ct.targets, cfg.fastemit_lambda, cfg.penalty)
        l_mask = masking_loss(enc, masks)
        dhs = []
        for n in range(self.config.n_channels):
            logp, z, g, pcache = joint_caches[n]
            dh, dg = self._joint_backward(per_channel[n].grad, logp, z, enc.h[n], g, grads)
            self._predict_backward(dg, pcache, grads)
            dhs.append(dh + 2.0 * cfg.gamma * enc.h[n] * (1.0 - masks[n])[:, None])
        self._encode_backward(dhs, enc_cache, grads)
        info = dict(
            l_rnnt=rnnt,
            l_mask=l_mask,
            channel_losses=[r.loss for r in per_channel],
            norm_ratio=norm_ratio(enc, masks),
        )
        return rnnt + cfg.gamma * l_mask, grads, info

    # decoding

    def _pred_step(self, token, states):
        P = self.params
        x = P["pred.emb"][token]
        new_states = []
        for l, h_prev in enumerate(states):
            p = f"pred.{l}"
            h, _ = L.gated_cell_step(x @ P[p + ".W"], h_prev, P[p + ".U"], P[p + ".b"])
            new_states.append(h)
            x, _ = L.layernorm_forward(h, P[p + ".ln_g"], P[p + ".ln_b"])
        g, _ = L.linear_forward(x, P["pred.out.W"], P["pred.out.b"])
        return g, new_states

    def greedy_decode(self, features, max_symbols_per_frame: int = 3) -> List[ChannelHypothesis]:
        """Frame-synchronous greedy search on every channel.

        Each emitted token records the encoder frame it was emitted at.
        """
        if int(max_symbols_per_frame) < 1:
            raise ConfigError("max_symbols_per_frame must be >= 1", max_symbols_per_frame=max_symbols_per_frame)
        P = self.params
        enc = self.encode(features)
        blank = self.vocab.blank
        H = self.config.hidden_dim
        hyps = []
        for n, h in enumerate(enc.h):
            he = h @ P["joint.We"] + P["joint.b"]
            states = [np.zeros(H) for _ in range(self.config.pred_layers)]
            g, states = self._pred_step(blank, states)
            ge = g @ P["joint.Wp"]
            tokens, frames = [], []
            for t in range(h.shape[0]):
                emitted = 0
                while emitted < max_symbols_per_frame:
                    logits = np.tanh(he[t] + ge) @ P["joint.Wo"] + P["joint.bo"]
                    k = int(np.argmax(logits))
                    if k == blank:
                        break
                    tokens.append(k)
                    frames.append(t)
                    emitted += 1
                    g, states = self._pred_step(k, states)
                    ge = g @ P["joint.Wp"]
            hyps.append(ChannelHypothesis(tokens, frames, n))
        return hyps


def masking_loss(h: EncoderOutputs, masks) -> float:
    """Sum over channels of squared encoder outputs on non-active frames."""
    masks = STSModel._check_masks(h, masks)
    return float(sum(np.sum((hn * (1.0 - m)[:, None]) ** 2) for hn, m in zip(h.h, masks)))


def norm_ratio(h: EncoderOutputs, masks) -> NormRatio:
    """Mean per-frame L2 norm on active frames over that on non-active frames.

    Frames are pooled across channels. If either side has no frames, or the
    non-active mean is zero, the ratio is undefined and reported as
    ``NORM_RATIO_CAP`` with ``defined=False``.
    """
    masks = STSModel._check_masks(h, masks)
    norms = np.concatenate([np.linalg.norm(hn, axis=1) for hn in h.h])
    active = np.concatenate(masks).astype(bool)
    if active.all() or not active.any():
        return NormRatio(NORM_RATIO_CAP, False)
    den = norms[~active].mean()
    if den == 0:
        return NormRatio(NORM_RATIO_CAP, False)
    return NormRatio(float(min(norms[active].mean() / den, NORM_RATIO_CAP)), True)
