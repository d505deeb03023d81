"""SGD training loop, learning-rate schedule and checkpoints."""

import json
import math
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Callable, Dict, List, Optional

import numpy as np

from ..errors import CheckpointError, ConfigError, NonFiniteError, NumericalAbort
from ..lattice import PenaltyConfig
from .network import ModelConfig, STSModel, parameter_shapes

CHECKPOINT_MAGIC = "STS-CHECKPOINT"
CHECKPOINT_VERSION = 1


@dataclass(frozen=True)
class TrainConfig:
    gamma: float = 0.0
    fastemit_lambda: float = 0.0
    penalty: Optional[PenaltyConfig] = None
    learning_rate: float = 0.1
    warmup_steps: int = 50
    hold_steps: int = 300
    decay_factor: float = 0.995
    max_steps: int = 1000
    batch_size: int = 1
    grad_clip: float = 5.0
    seed: int = 0

    def __post_init__(self):
        if self.gamma < 0:
            raise ConfigError("gamma must be nonnegative", gamma=self.gamma)
        if self.learning_rate < 0:
            raise ConfigError("learning_rate must be nonnegative", learning_rate=self.learning_rate)
        if not 0 < self.decay_factor <= 1:
            raise ConfigError("decay_factor must lie in (0, 1]", decay_factor=self.decay_factor)
        for name in ("warmup_steps", "hold_steps", "max_steps"):
            if getattr(self, name) < 0:
                raise ConfigError(f"{name} must be nonnegative", **{name: getattr(self, name)})
        if self.batch_size < 1:
            raise ConfigError("batch_size must be >= 1", batch_size=self.batch_size)
        if self.grad_clip <= 0:
            raise ConfigError("grad_clip must be positive", grad_clip=self.grad_clip)
        if isinstance(self.penalty, dict):
            object.__setattr__(self, "penalty", PenaltyConfig(**self.penalty))

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        unknown = set(d) - set(cls.__dataclass_fields__)
        if unknown:
            raise ConfigError("unknown train config keys", keys=sorted(unknown))
        return cls(**d)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["penalty"] = None if self.penalty is None else asdict(self.penalty)
        return d


def learning_rate(step: int, cfg: TrainConfig) -> float:
    """Linear warmup, constant hold, then per-step exponential decay."""
    if step < cfg.warmup_steps:
        return cfg.learning_rate * (step + 1) / cfg.warmup_steps
    k = step - cfg.warmup_steps - cfg.hold_steps + 1
    if k <= 0:
        return cfg.learning_rate
    return cfg.learning_rate * cfg.decay_factor**k


def global_norm(grads: Dict[str, np.ndarray]) -> float:
    return math.sqrt(sum(float(np.sum(g * g)) for g in grads.values()))


def clip_gradients(grads: Dict[str, np.ndarray], max_norm: float) -> float:
    """Scale gradients in place so their global norm is at most ``max_norm``."""
    norm = global_norm(grads)
    if norm > max_norm:
        scale = max_norm / norm
        for g in grads.values():
            g *= scale
    return norm


def _dump_failure(dump_dir, step, indices, examples, info):
    if dump_dir is None:
        return None
    path = Path(dump_dir) / f"nan_step{step}.json"
    path.parent.mkdir(parents=True, exist_ok=True)
    payload = dict(
        step=step,
        indices=indices,
        examples=[
            dict(
                example_id=ex.example_id,
                turns=[t.to_dict() for t in ex.turns],
                features=ex.features.tolist(),
            )
            for ex in examples
        ],
        info={k: v for k, v in info.items() if isinstance(v, (int, float, str, list, type(None)))},
    )
    path.write_text(json.dumps(payload, sort_keys=True, default=str))
    return str(path)


def train(
    model: STSModel,
    get_example: Callable[[int], object],
    cfg: TrainConfig,
    start_step: int = 0,
    steps: Optional[int] = None,
    dump_dir=None,
    on_step: Optional[Callable[[dict], None]] = None,
) -> List[dict]:
    """Run SGD updates on ``model`` in place and return the per-step log.

    ``get_example(i)`` must be a pure function of ``i``; step ``s`` uses
    examples ``s * batch_size ... (s + 1) * batch_size - 1`` so that a
    resumed run continues exactly where a straight run would be.
    """
    end = cfg.max_steps if steps is None else start_step + steps
    log = []
    for step in range(start_step, end):
        indices = list(range(step * cfg.batch_size, (step + 1) * cfg.batch_size))
        examples = [get_example(i) for i in indices]
        grads = model.zero_grads()
        loss = l_rnnt = l_mask = 0.0
        ratios = []
        for ex in examples:
            try:
                with np.errstate(over="ignore", invalid="ignore"):
                    value, grads, info = model.total_loss(ex, cfg, grads)
            except NonFiniteError as exc:
                path = _dump_failure(dump_dir, step, indices, examples, dict(reason=str(exc)))
                raise NumericalAbort("non-finite values during the forward pass", step=step, dump_path=path) from exc
            loss += value
            l_rnnt += info["l_rnnt"]
            l_mask += info["l_mask"]
            ratios.append(info["norm_ratio"])
        scale = 1.0 / len(examples)
        for g in grads.values():
            g *= scale
        grad_norm = global_norm(grads)
        if not (math.isfinite(loss) and math.isfinite(grad_norm)):
            path = _dump_failure(dump_dir, step, indices, examples, dict(loss=loss, l_rnnt=l_rnnt, l_mask=l_mask))
            raise NumericalAbort("non-finite loss or gradient", step=step, dump_path=path)
        clip_gradients(grads, cfg.grad_clip)
        lr = learning_rate(step, cfg)
        if lr != 0:
            for k, p in model.params.items():
                p -= lr * grads[k]
        defined = [r.value for r in ratios if r.defined]
        record = dict(
            step=step,
            loss=loss * scale,
            l_rnnt=l_rnnt * scale,
            l_mask=l_mask * scale,
            lr=lr,
            grad_norm=grad_norm,
            norm_ratio=float(np.mean(defined)) if defined else None,
        )
        log.append(record)
        if on_step is not None:
            on_step(record)
    return log


def _encode_array(a: np.ndarray) -> dict:
    return {"shape": list(a.shape), "data": [float(x) for x in a.ravel()]}


def save_checkpoint(path, model: STSModel, step: int, train_config: Optional[TrainConfig] = None, extra=None):
    """Write a JSON checkpoint.

    Floats are written with Python's shortest round-trip repr, so loading
    restores parameters bit for bit.
    """
    payload = {
        "magic": CHECKPOINT_MAGIC,
        "version": CHECKPOINT_VERSION,
        "model_config": model.config.to_dict(),
        "train_config": None if train_config is None else train_config.to_dict(),
        "seed": model.config.seed,
        "step": int(step),
        "vocab": model.vocab.to_dict(),
        "params": {k: _encode_array(v) for k, v in sorted(model.params.items())},
    }
    if extra:
        payload["extra"] = extra
    Path(path).write_text(json.dumps(payload, sort_keys=True))
    return Path(path)


def load_checkpoint(path):
    """Return ``(model, step, train_config, payload)``; raises CheckpointError."""
    try:
        payload = json.loads(Path(path).read_text())
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CheckpointError("checkpoint is not valid JSON", path=str(path), reason=str(exc)) from exc
    if not isinstance(payload, dict) or payload.get("magic") != CHECKPOINT_MAGIC:
        raise CheckpointError("checkpoint magic header missing", path=str(path))
    if payload.get("version") != CHECKPOINT_VERSION:
        raise CheckpointError("unsupported checkpoint version", path=str(path), version=payload.get("version"))
    try:
        mcfg = ModelConfig.from_dict(payload["model_config"])
        shapes = parameter_shapes(mcfg)
        params = {}
        for k, shape in shapes.items():
            entry = payload["params"][k]
            arr = np.array(entry["data"], dtype=np.float64)
            if tuple(entry["shape"]) != shape or arr.size != int(np.prod(shape)):
                raise CheckpointError("parameter shape mismatch", name=k)
            params[k] = arr.reshape(shape)
        tcfg = payload.get("train_config")
        tcfg = None if tcfg is None else TrainConfig.from_dict(tcfg)
        model = STSModel(mcfg, params)
        step = int(payload["step"])
    except CheckpointError:
        raise
    except (KeyError, TypeError, ValueError) as exc:
        raise CheckpointError("checkpoint content is malformed", path=str(path), reason=str(exc)) from exc
    return model, step, tcfg, payload
