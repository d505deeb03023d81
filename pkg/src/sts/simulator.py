"""On-the-fly synthetic multi-turn mixtures.

Each turn is a short "utterance" whose frames are fixed per-token embedding
vectors plus noise. Turns are placed one after another with a gap or an
overlap depending on the partition style, rescaled to a sampled energy ratio
against the first turn, and summed. Examples longer than the duration cap
are rejected and resampled rather than truncated.
"""

from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from .errors import ConfigError, GeometryError, SimulationError
from .segmenter import ChannelTargets, Turn, build_targets
from .vocab import STACK, Vocab, n_encoder_frames

OVERLAP_RATIOS = {"OV10": 0.10, "OV20": 0.20, "OV30": 0.30, "OV40": 0.40}
GAP_RANGES = {"0S": (1, 10), "0L": (50, 150)}
STYLES = ("0S", "0L", "OV10", "OV20", "OV30", "OV40")
PARTITIONS = STYLES
MAX_TRIES = 100
EMBEDDING_SEED = 20220517


@dataclass(frozen=True)
class SimConfig:
    n_turns_range: Tuple[int, int] = (1, 5)
    energy_ratio_db_range: Tuple[float, float] = (-5.0, 5.0)
    max_duration_frames: int = 3000
    overlap_style: str = "mixed"
    tokens_per_turn_range: Tuple[int, int] = (2, 5)
    frames_per_token: int = 6
    noise_std: float = 0.1
    feature_dim: int = 8
    smearing: bool = False
    seed: int = 0

    def __post_init__(self):
        for name in ("n_turns_range", "energy_ratio_db_range", "tokens_per_turn_range"):
            lo, hi = getattr(self, name)
            if lo > hi:
                raise ConfigError(f"{name} is empty", value=[lo, hi])
            object.__setattr__(self, name, (lo, hi))
        if self.n_turns_range[0] < 1 or self.tokens_per_turn_range[0] < 1:
            raise ConfigError("turn and token counts must be >= 1")
        if self.overlap_style not in STYLES + ("mixed",):
            raise ConfigError("unknown overlap style", style=self.overlap_style)
        if self.frames_per_token < 1 or self.feature_dim < 1:
            raise ConfigError("frames_per_token and feature_dim must be >= 1")
        if self.noise_std < 0:
            raise ConfigError("noise_std must be >= 0")

    @classmethod
    def from_dict(cls, d: dict) -> "SimConfig":
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ConfigError("unknown simulator config keys", keys=sorted(unknown))
        d = {k: tuple(v) if isinstance(v, list) else v for k, v in d.items()}
        return cls(**d)

    def to_dict(self) -> dict:
        return {k: list(v) if isinstance(v, tuple) else v for k, v in dataclasses.asdict(self).items()}


@dataclass
class MixtureExample:
    example_id: str
    features: np.ndarray
    turns: List[Turn]
    channel_targets: ChannelTargets
    meta: dict = field(default_factory=dict)

    @property
    def stacked(self) -> np.ndarray:
        return stack_frames(self.features)


def stack_frames(features: np.ndarray, stack: int = STACK) -> np.ndarray:
    """Concatenate each group of ``stack`` raw frames; the tail is zero-padded."""
    n, f = features.shape
    T = -(-n // stack)
    padded = np.zeros((T * stack, f))
    padded[:n] = features
    return padded.reshape(T, stack * f)


def token_embedding(token: int, dim: int) -> np.ndarray:
    """Fixed unit-RMS feature vector for a token id."""
    v = np.random.default_rng([EMBEDDING_SEED, int(token), dim]).normal(size=dim)
    return v / np.sqrt(np.mean(v**2))


def synth_utterance(tokens, frames_per_token, noise_std, rng, feature_dim=8):
    """Render tokens as repeated embeddings plus Gaussian noise.

    Returns ``(block, spans)`` with ``spans[i] = (start, end)`` of token ``i``
    inside the block.
    """
    rows, spans = [], []
    for i, tok in enumerate(tokens):
        rows.append(np.tile(token_embedding(tok, feature_dim), (frames_per_token, 1)))
        spans.append((i * frames_per_token, (i + 1) * frames_per_token))
    block = np.concatenate(rows) if rows else np.zeros((0, feature_dim))
    if noise_std > 0:
        block = block + rng.normal(scale=noise_std, size=block.shape)
    return block, spans


def place_turns(utterance_lengths: Sequence[int], overlap_style: str, rng) -> List[int]:
    """Start offsets for sequentially placed turns.

    ``overlap_style`` is a partition name or a bare overlap ratio. Overlap
    ratio is the overlap duration over the shorter turn of a consecutive pair. Raises GeometryError when the requested overlap would
    reach back into a third turn.
    """
    if not utterance_lengths:
        raise ValueError("need at least one utterance")
    if overlap_style == "mixed":
        overlap_style = STYLES[int(rng.integers(len(STYLES)))]
    if isinstance(overlap_style, (int, float)):
        if not 0 <= overlap_style < 1:
            raise ConfigError("overlap ratio must be in [0, 1)", ratio=overlap_style)
        ratio = float(overlap_style)
    elif overlap_style in OVERLAP_RATIOS:
        ratio = OVERLAP_RATIOS[overlap_style]
    elif overlap_style not in GAP_RANGES:
        raise ConfigError("unknown overlap style", style=overlap_style)
    offsets = [0]
    prev_prev_end = 0
    for k in range(1, len(utterance_lengths)):
        prev_start = offsets[-1]
        prev_end = prev_start + utterance_lengths[k - 1]
        if overlap_style in GAP_RANGES:
            lo, hi = GAP_RANGES[overlap_style]
            offsets.append(prev_end + int(rng.integers(lo, hi + 1)))
        else:
            overlap = int(round(ratio * min(utterance_lengths[k - 1], utterance_lengths[k])))
            room = prev_end - max(prev_start, prev_prev_end)
            if overlap > room:
                raise GeometryError(
                    "overlap would create a three-way overlap",
                    turn=k,
                    overlap=overlap,
                    room=room,
                )
            offsets.append(prev_end - overlap)
        prev_prev_end = prev_end
    return offsets


def smear(block: np.ndarray) -> np.ndarray:
    """Causal 3-tap exponential-decay filter along time."""
    out = block.copy()
    out[1:] += 0.5 * block[:-1]
    out[2:] += 0.25 * block[:-2]
    return out


def mean_square(x: np.ndarray) -> float:
    return float(np.mean(x**2))


def energy_scales(blocks: Sequence[np.ndarray], energy_ratios_db: Sequence[float]) -> List[float]:
    """Amplitude factors so that turn ``k`` sits ``ratio_k`` dB from turn 0."""
    ref = mean_square(blocks[0])
    scales = []
    for block, db in zip(blocks, energy_ratios_db):
        e = mean_square(block)
        scales.append(float(np.sqrt(ref * 10 ** (db / 10) / e)) if e > 0 else 1.0)
    return scales


def mix(blocks, offsets, energy_ratios_db, total_frames=None, noise_std=0.0, rng=None):
    """Sum rescaled blocks at their offsets; silent frames get noise only.

    ``energy_ratios_db[0]`` is ignored (the first turn is the reference).
    Returns ``(features, scales)``.
    """
    ratios = [0.0] + list(energy_ratios_db[1:])
    scales = energy_scales(blocks, ratios)
    if total_frames is None:
        total_frames = max(o + len(b) for o, b in zip(offsets, blocks))
    dim = blocks[0].shape[1]
    out = np.zeros((total_frames, dim))
    active = np.zeros(total_frames, dtype=bool)
    for block, off, scale in zip(blocks, offsets, scales):
        out[off : off + len(block)] += scale * block
        active[off : off + len(block)] = True
    if noise_std > 0 and rng is not None and not active.all():
        out[~active] += rng.normal(scale=noise_std, size=(int((~active).sum()), dim))
    return out, scales


def _sample_tokens(rng, n, content_ids):
    out = []
    for _ in range(n):
        choices = [t for t in content_ids if not out or t != out[-1]]
        out.append(int(choices[int(rng.integers(len(choices)))]))
    return out


def simulate_example(
    cfg: SimConfig,
    rng,
    vocab: Optional[Vocab] = None,
    example_id: str = "ex",
) -> MixtureExample:
    """Draw one example; deterministic for a given generator state."""
    vocab = vocab or Vocab()
    for attempt in range(MAX_TRIES):
        n_turns = int(rng.integers(cfg.n_turns_range[0], cfg.n_turns_range[1] + 1))
        token_lists = [
            _sample_tokens(
                rng,
                int(rng.integers(cfg.tokens_per_turn_range[0], cfg.tokens_per_turn_range[1] + 1)),
                vocab.content_ids,
            )
            for _ in range(n_turns)
        ]
        blocks = [
            synth_utterance(toks, cfg.frames_per_token, cfg.noise_std, rng, cfg.feature_dim)[0]
            for toks in token_lists
        ]
        if cfg.smearing:
            blocks = [smear(b) for b in blocks]
        style = cfg.overlap_style
        if style == "mixed":
            style = STYLES[int(rng.integers(len(STYLES)))]
        ratios_db = [0.0] + [
            float(rng.uniform(*cfg.energy_ratio_db_range)) for _ in range(n_turns - 1)
        ]
        try:
            offsets = place_turns([len(b) for b in blocks], style, rng)
        except GeometryError:
            continue
        total = max(o + len(b) for o, b in zip(offsets, blocks))
        if total > cfg.max_duration_frames:
            continue
        features, scales = mix(blocks, offsets, ratios_db, total, cfg.noise_std, rng)
        speakers = _sample_speakers(rng, n_turns)
        turns = [
            Turn(spk, off, off + len(b), toks)
            for spk, off, b, toks in zip(speakers, offsets, blocks, token_lists)
        ]
        targets = build_targets(turns, vocab, n_frames=n_encoder_frames(total))
        meta = {
            "style": style,
            "energy_ratios_db": ratios_db,
            "scales": scales,
            "rejections": attempt,
        }
        return MixtureExample(example_id, features, turns, targets, meta)
    raise SimulationError(f"{MAX_TRIES} consecutive rejections", config=cfg.to_dict())


def _sample_speakers(rng, n, pool=8):
    out = []
    for _ in range(n):
        choices = [s for s in range(pool) if not out or s != out[-1]]
        out.append(choices[int(rng.integers(len(choices)))])
    return [f"spk{s}" for s in out]


def derive_seed(base_seed: int, *keys: int) -> int:
    return int(np.random.SeedSequence([int(base_seed), *map(int, keys)]).generate_state(1)[0])


def example_stream(cfg: SimConfig, vocab: Optional[Vocab] = None, stream_key: int = 0):
    """Infinite, index-addressable stream: ``stream(i)`` is example ``i``."""
    vocab = vocab or Vocab()

    def get(index: int) -> MixtureExample:
        seed = derive_seed(cfg.seed, stream_key, index)
        ex = simulate_example(cfg, np.random.default_rng(seed), vocab, example_id=f"sim-{index:07d}")
        ex.meta["seed"] = seed
        return ex

    return get


def overlap_ratios(turns: Sequence[Turn]) -> List[float]:
    """Overlap / shorter duration for each consecutive pair (by start)."""
    ordered = sorted(turns, key=lambda t: (t.start_frame, t.end_frame))
    out = []
    for a, b in zip(ordered, ordered[1:]):
        overlap = max(0, min(a.end_frame, b.end_frame) - max(a.start_frame, b.start_frame))
        out.append(overlap / min(a.end_frame - a.start_frame, b.end_frame - b.start_frame))
    return out


def mean_overlap_ratio(examples) -> Optional[float]:
    ratios = [r for ex in examples for r in overlap_ratios(ex.turns)]
    return float(np.mean(ratios)) if ratios else None


MANIFEST_SCHEMA = "sts.manifest/v1"
TURNS_SCHEMA = "sts.turns/v1"


def partition_configs(base: SimConfig, partitions: Sequence[str] = PARTITIONS) -> Dict[str, SimConfig]:
    return {p: dataclasses.replace(base, overlap_style=p) for p in partitions}


def make_eval_set(
    configs: Dict[str, SimConfig],
    n_examples: int,
    seed: int,
    out_dir,
    vocab: Optional[Vocab] = None,
    dev_every: int = 10,
) -> Path:
    """Generate and persist one dataset per partition plus a manifest.

    Every ``dev_every``-th example (by index) goes to the dev split, the rest
    to test. Returns the manifest path.
    """
    from . import io as sio

    vocab = vocab or Vocab()
    out_dir = Path(out_dir)
    entries = []
    partitions = {}
    for p_index, (name, cfg) in enumerate(sorted(configs.items())):
        cfg = dataclasses.replace(cfg, seed=seed)
        part_dir = out_dir / name
        feat_dir = part_dir / "features"
        try:
            feat_dir.mkdir(parents=True, exist_ok=True)
        except OSError as exc:
            raise OSError(f"cannot create {feat_dir}: {exc}") from exc
        records = []
        examples = []
        for i in range(n_examples):
            ex_seed = derive_seed(seed, p_index, i)
            ex_id = f"{name}-{i:05d}"
            ex = simulate_example(cfg, np.random.default_rng(ex_seed), vocab, example_id=ex_id)
            feat_path = feat_dir / f"{ex_id}.npy"
            sio.write_features(feat_path, ex.features)
            split = "dev" if i % dev_every == 0 else "test"
            records.append(
                {
                    "schema": TURNS_SCHEMA,
                    "example_id": ex_id,
                    "partition": name,
                    "turns": [t.to_dict() for t in ex.turns],
                }
            )
            entries.append(
                {
                    "example_id": ex_id,
                    "partition": name,
                    "split": split,
                    "seed": ex_seed,
                    "n_raw_frames": int(ex.features.shape[0]),
                    "features": str(feat_path.relative_to(out_dir)),
                    "style": ex.meta["style"],
                }
            )
            examples.append(ex)
        turns_path = part_dir / "turns.jsonl"
        sio.write_jsonl(turns_path, records)
        ratio = mean_overlap_ratio(examples)
        partitions[name] = {
            "n_examples": n_examples,
            "turns": str(turns_path.relative_to(out_dir)),
            "config": cfg.to_dict(),
            "mean_overlap_ratio": ratio,
        }
    manifest = {
        "schema": MANIFEST_SCHEMA,
        "seed": seed,
        "vocab": vocab.to_dict(),
        "partitions": partitions,
        "examples": entries,
    }
    manifest_path = out_dir / "manifest.json"
    out_dir.mkdir(parents=True, exist_ok=True)
    manifest_path.write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    return manifest_path
