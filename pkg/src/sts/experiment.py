"""Experiment configs and the simulate / train / evaluate / latency pipeline.

The CLI is a thin shell over these functions; the acceptance suite calls
them directly.
"""

import copy
import json
import os
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Sequence

import numpy as np

from . import io as sio
from .errors import CompatibilityError, ConfigError
from .metrics import (
    PERCENTILES,
    EvalReport,
    evaluate,
    format_latency_table,
    format_wer_table,
    latency_tables,
)
from .model import (
    EncoderOutputs,
    ModelConfig,
    STSModel,
    TrainConfig,
    load_checkpoint,
    norm_ratio,
    save_checkpoint,
    train,
)
from .segmenter import ChannelHypothesis, oracle_hypotheses
from .simulator import SimConfig, example_stream, make_eval_set
from .vocab import Vocab

OUTPUT_DIR_ENV = "STS_OUTPUT_DIR"
LATENCY_SCHEMA_ID = "sts.latency/v1"
LOSS_LOG_NAME = "loss.jsonl"
CHECKPOINT_NAME = "checkpoint.json"


@dataclass(frozen=True)
class EvalSettings:
    n_examples: int = 60
    seed: int = 1000
    frame_ms: float = 30.0
    max_symbols_per_frame: int = 3
    split: Optional[str] = "test"

    @classmethod
    def from_dict(cls, d: dict) -> "EvalSettings":
        unknown = set(d) - set(cls.__dataclass_fields__)
        if unknown:
            raise ConfigError("unknown eval config keys", keys=sorted(unknown))
        return cls(**d)


@dataclass
class ExperimentConfig:
    run_id: str
    output_dir: str
    model: ModelConfig
    train: TrainConfig
    train_sim: SimConfig
    partitions: Dict[str, SimConfig]
    eval: EvalSettings = field(default_factory=EvalSettings)
    baseline: dict = field(default_factory=dict)
    raw: dict = field(default_factory=dict)

    @property
    def vocab(self) -> Vocab:
        return Vocab(self.model.vocab_size)

    @property
    def out(self) -> Path:
        return Path(self.output_dir)

    @property
    def manifest_path(self) -> Path:
        return self.out / "data" / "manifest.json"

    @property
    def checkpoint_path(self) -> Path:
        return self.out / CHECKPOINT_NAME


def _set_path(d: dict, dotted: str, value):
    keys = dotted.split(".")
    node = d
    for k in keys[:-1]:
        if node.get(k) is None:
            node[k] = {}
        node = node[k]
        if not isinstance(node, dict):
            raise ConfigError("override path runs through a non-object", key=dotted)
    node[keys[-1]] = value


def parse_override(text: str):
    """``a.b=value`` with the value parsed as JSON when possible."""
    if "=" not in text:
        raise ConfigError("override must look like key=value", override=text)
    key, value = text.split("=", 1)
    try:
        value = json.loads(value)
    except json.JSONDecodeError:
        pass
    return key.strip(), value


def config_from_dict(raw: dict, overrides: Sequence[str] = ()) -> ExperimentConfig:
    raw = copy.deepcopy(raw)
    for item in overrides:
        _set_path(raw, *parse_override(item))
    try:
        run_id = raw["run_id"]
        if not isinstance(run_id, str) or not run_id:
            raise ConfigError("run_id must be a nonempty string")
        output_dir = os.environ.get(OUTPUT_DIR_ENV) or raw.get("output_dir") or os.path.join("runs", run_id)
        model = ModelConfig.from_dict(raw.get("model", {}))
        trn = TrainConfig.from_dict(raw.get("train", {}))
        sim = raw.get("sim", {})
        train_sim = SimConfig.from_dict(sim.get("train", {}))
        partitions = {k: SimConfig.from_dict(v) for k, v in sim.get("partitions", {}).items()}
        ev = EvalSettings.from_dict(raw.get("eval", {}))
    except KeyError as exc:
        raise ConfigError("missing config key", key=str(exc)) from exc
    except TypeError as exc:
        raise ConfigError("malformed config", reason=str(exc)) from exc
    if not partitions:
        raise ConfigError("at least one evaluation partition is required")
    for name, cfg in [("train", train_sim)] + list(partitions.items()):
        if cfg.feature_dim != model.feature_dim:
            raise ConfigError("simulator and model feature_dim differ", sim=name)
    return ExperimentConfig(
        run_id=run_id,
        output_dir=str(output_dir),
        model=model,
        train=trn,
        train_sim=train_sim,
        partitions=partitions,
        eval=ev,
        baseline=raw.get("baseline", {}),
        raw=raw,
    )


def load_config(path, overrides: Sequence[str] = ()) -> ExperimentConfig:
    try:
        raw = json.loads(Path(path).read_text())
    except json.JSONDecodeError as exc:
        raise ConfigError("config is not valid JSON", path=str(path), reason=str(exc)) from exc
    if not isinstance(raw, dict):
        raise ConfigError("config must be a JSON object", path=str(path))
    return config_from_dict(raw, overrides)


# simulate


def simulate(cfg: ExperimentConfig, out_dir=None, seed=None, n=None):
    """Write the evaluation set; returns ``(manifest_path, summary)``."""
    out_dir = Path(out_dir) if out_dir is not None else cfg.manifest_path.parent
    seed = cfg.eval.seed if seed is None else seed
    n = cfg.eval.n_examples if n is None else n
    if n < 0:
        raise ConfigError("number of examples must be nonnegative", n=n)
    path = make_eval_set(cfg.partitions, n, seed, out_dir, cfg.vocab)
    manifest = sio.read_manifest(path)
    summary = {
        name: {"n_examples": p["n_examples"], "mean_overlap_ratio": p["mean_overlap_ratio"]}
        for name, p in sorted(manifest["partitions"].items())
    }
    return path, summary


# train


def run_training(cfg: ExperimentConfig, steps: Optional[int] = None, resume=None, out_dir=None, dump_dir=None):
    """Train from scratch or resume; writes checkpoint and JSONL loss log.

    ``steps`` is the number of updates in this call; by default training
    runs up to ``train.max_steps``. Returns ``(model, log, checkpoint_path)``.
    """
    out = Path(out_dir) if out_dir is not None else cfg.out
    out.mkdir(parents=True, exist_ok=True)
    log_path = out / LOSS_LOG_NAME
    if resume is not None:
        model, start, saved_cfg, _ = load_checkpoint(resume)
        if model.config != cfg.model:
            raise CompatibilityError("checkpoint model config differs from the experiment config")
        if saved_cfg is not None and saved_cfg != cfg.train:
            raise CompatibilityError("checkpoint train config differs from the experiment config")
        previous = sio.read_jsonl(log_path) if log_path.exists() else []
        previous = [r for r in previous if r["step"] < start]
    else:
        model, start, previous = STSModel(cfg.model), 0, []
    if steps is None:
        steps = max(cfg.train.max_steps - start, 0)
    if steps < 0:
        raise ConfigError("steps must be nonnegative", steps=steps)
    get = example_stream(cfg.train_sim, cfg.vocab, stream_key=0)
    log = train(model, get, cfg.train, start_step=start, steps=steps, dump_dir=dump_dir or out)
    full_log = previous + log
    sio.write_jsonl(log_path, full_log)
    ckpt = save_checkpoint(out / CHECKPOINT_NAME, model, start + steps, cfg.train, extra={"run_id": cfg.run_id})
    return model, full_log, ckpt


def loss_drop_ratio(log: Sequence[dict], window: int = 50) -> float:
    """Mean loss over the last ``window`` steps over that of the first."""
    if len(log) < 2:
        raise ConfigError("need at least two logged steps", n=len(log))
    w = max(1, min(window, len(log) // 2))
    head = np.mean([r["loss"] for r in log[:w]])
    tail = np.mean([r["loss"] for r in log[-w:]])
    return float(tail / head)


# evaluate


def check_vocab(model: STSModel, manifest: dict):
    data_vocab = sio.manifest_vocab(manifest)
    if data_vocab != model.vocab:
        raise CompatibilityError(
            "checkpoint and dataset vocabularies differ",
            checkpoint=model.vocab.to_dict(),
            dataset=data_vocab.to_dict(),
        )


def decode_examples(model: STSModel, examples, max_symbols_per_frame: int = 3) -> Dict[str, List[ChannelHypothesis]]:
    return {ex.example_id: model.greedy_decode(ex.features, max_symbols_per_frame) for ex in examples}


def heldout_norm_ratio(model: STSModel, examples):
    """Active/non-active norm ratio pooled over all frames of all examples."""
    hs = [[], []]
    ms = [[], []]
    for ex in examples:
        enc = model.encode(ex.features)
        for n in range(2):
            hs[n].append(enc.h[n])
            ms[n].append(np.asarray(ex.channel_targets.masks[n]))
    pooled = EncoderOutputs([np.concatenate(h) for h in hs])
    return norm_ratio(pooled, [np.concatenate(m) for m in ms])


def write_report(report: EvalReport, report_dir, extra: Optional[dict] = None) -> Dict[str, Path]:
    report_dir = Path(report_dir)
    report_dir.mkdir(parents=True, exist_ok=True)
    d = report.to_dict(include_samples=False)
    if extra:
        d.update(extra)
    paths = {"json": report_dir / "report.json", "table": report_dir / "report.txt"}
    paths["json"].write_text(json.dumps(d, indent=2, sort_keys=True) + "\n")
    text = format_wer_table(report) + "\n\n" + format_latency_table(report.latency) + "\n"
    paths["table"].write_text(text)
    return paths


def run_evaluation(
    manifest_path,
    report_dir,
    checkpoint=None,
    hypotheses=None,
    oracle: bool = False,
    split: Optional[str] = "test",
    partitions=None,
    frame_ms: float = 30.0,
    max_symbols_per_frame: int = 3,
):
    """Decode (or load, or synthesize oracle) hypotheses and score them.

    Exactly one of ``checkpoint``, ``hypotheses`` or ``oracle`` selects the
    hypothesis source. Writes ``hyps.jsonl``, ``report.json`` and
    ``report.txt`` into ``report_dir``; returns ``(report, paths)``.
    """
    sources = sum([checkpoint is not None, hypotheses is not None, bool(oracle)])
    if sources != 1:
        raise ConfigError("choose exactly one of checkpoint, hypotheses or oracle")
    manifest = sio.read_manifest(manifest_path)
    vocab = sio.manifest_vocab(manifest)
    examples = sio.load_dataset(manifest_path, split=split, partitions=partitions)
    if checkpoint is not None:
        model, _, _, _ = load_checkpoint(checkpoint)
        check_vocab(model, manifest)
        hyps = decode_examples(model, examples, max_symbols_per_frame)
    elif hypotheses is not None:
        hyps = sio.read_hypotheses(hypotheses)
        wanted = {ex.example_id for ex in examples}
        hyps = {k: v for k, v in hyps.items() if k in wanted}
    else:
        hyps = {ex.example_id: oracle_hypotheses(ex.channel_targets, vocab) for ex in examples}
    refs = {ex.example_id: (ex.meta["partition"], ex.turns) for ex in examples}
    report = evaluate(refs, hyps, vocab, frame_ms)
    report_dir = Path(report_dir)
    report_dir.mkdir(parents=True, exist_ok=True)
    hyps_path = report_dir / "hyps.jsonl"
    sio.write_hypotheses(hyps_path, hyps)
    paths = write_report(report, report_dir)
    paths["hyps"] = hyps_path
    return report, paths


def analyze_latency(hypotheses, manifest_path, out_dir, frame_ms: float = 30.0, extended: bool = False):
    """Latency percentile tables plus a per-turn sample dump.

    Only examples whose decoded turn count matches the reference and that
    have at least three turns contribute samples.
    """
    manifest = sio.read_manifest(manifest_path)
    vocab = sio.manifest_vocab(manifest)
    hyps = sio.read_hypotheses(hypotheses)
    examples = {ex.example_id: ex for ex in sio.load_dataset(manifest_path)}
    missing = sorted(set(hyps) - set(examples))
    if missing:
        raise ConfigError("hypotheses reference unknown example ids", ids=missing[:10])
    refs = {k: (examples[k].meta["partition"], examples[k].turns) for k in hyps}
    report = evaluate(refs, hyps, vocab, frame_ms)
    percentiles = PERCENTILES if extended else (50, 90)
    tables = latency_tables(report.samples, percentiles)
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    payload = {
        "schema": LATENCY_SCHEMA_ID,
        "frame_ms": frame_ms,
        "n_examples": len(hyps),
        "n_samples": len(report.samples),
        "latency": tables,
        "diagnostics": dict(sorted(report.diagnostics.items())),
    }
    paths = {
        "json": out_dir / "latency.json",
        "table": out_dir / "latency.txt",
        "samples": out_dir / "latency_samples.jsonl",
    }
    paths["json"].write_text(json.dumps(payload, indent=2, sort_keys=True) + "\n")
    paths["table"].write_text(format_latency_table(tables, percentiles) + "\n")
    sio.write_jsonl(paths["samples"], (s.to_dict() for s in report.samples))
    return payload, paths
