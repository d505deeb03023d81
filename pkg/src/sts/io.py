"""File formats: JSONL turn/hypothesis files, ``.npy`` features, manifests."""

from __future__ import annotations

import json
from pathlib import Path
from typing import Dict, Iterable, List, Optional

import numpy as np

from .errors import ConfigError
from .segmenter import ChannelHypothesis, Turn, build_targets
from .simulator import MANIFEST_SCHEMA, TURNS_SCHEMA, MixtureExample
from .vocab import Vocab, n_encoder_frames

HYPS_SCHEMA = "sts.hyps/v1"


def dumps(obj) -> str:
    return json.dumps(obj, sort_keys=True, separators=(",", ":"))


def write_jsonl(path, records: Iterable[dict]):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w") as fh:
        for rec in records:
            fh.write(dumps(rec) + "\n")


def read_jsonl(path) -> List[dict]:
    with open(path) as fh:
        return [json.loads(line) for line in fh if line.strip()]


def write_features(path, features: np.ndarray):
    np.save(path, np.ascontiguousarray(features, dtype=np.float64), allow_pickle=False)


def read_features(path) -> np.ndarray:
    arr = np.load(path, allow_pickle=False)
    if arr.ndim != 2:
        raise ConfigError("feature file must hold a 2-D array", path=str(path), shape=list(arr.shape))
    return arr


def read_turns(path) -> Dict[str, List[Turn]]:
    out = {}
    for rec in read_jsonl(path):
        if rec.get("schema", TURNS_SCHEMA) != TURNS_SCHEMA:
            raise ConfigError("unsupported turn file schema", schema=rec.get("schema"))
        out[rec["example_id"]] = [Turn.from_dict(t) for t in rec["turns"]]
    return out


def write_hypotheses(path, hyps: Dict[str, List[ChannelHypothesis]]):
    write_jsonl(
        path,
        (
            {
                "schema": HYPS_SCHEMA,
                "example_id": ex_id,
                "channels": [h.to_list() for h in hyps[ex_id]],
            }
            for ex_id in sorted(hyps)
        ),
    )


def read_hypotheses(path) -> Dict[str, List[ChannelHypothesis]]:
    out = {}
    for rec in read_jsonl(path):
        if rec.get("schema", HYPS_SCHEMA) != HYPS_SCHEMA:
            raise ConfigError("unsupported hypothesis file schema", schema=rec.get("schema"))
        out[rec["example_id"]] = [
            ChannelHypothesis.from_list(items, channel=c) for c, items in enumerate(rec["channels"])
        ]
    return out


def read_manifest(path) -> dict:
    path = Path(path)
    manifest = json.loads(path.read_text())
    if manifest.get("schema") != MANIFEST_SCHEMA:
        raise ConfigError("unsupported manifest schema", schema=manifest.get("schema"))
    return manifest


def manifest_vocab(manifest: dict) -> Vocab:
    return Vocab(**manifest["vocab"])


def load_dataset(
    manifest_path, split: Optional[str] = None, partitions: Optional[Iterable[str]] = None
) -> List[MixtureExample]:
    """Examples listed in a manifest, ordered by example id."""
    manifest_path = Path(manifest_path)
    root = manifest_path.parent
    manifest = read_manifest(manifest_path)
    vocab = manifest_vocab(manifest)
    wanted = set(partitions) if partitions is not None else None
    turns_by_part = {}
    examples = []
    for entry in sorted(manifest["examples"], key=lambda e: e["example_id"]):
        part = entry["partition"]
        if wanted is not None and part not in wanted:
            continue
        if split is not None and entry["split"] != split:
            continue
        if part not in turns_by_part:
            turns_by_part[part] = read_turns(root / manifest["partitions"][part]["turns"])
        features = read_features(root / entry["features"])
        turns = turns_by_part[part][entry["example_id"]]
        targets = build_targets(turns, vocab, n_frames=n_encoder_frames(features.shape[0]))
        meta = {"partition": part, "split": entry["split"], "seed": entry["seed"]}
        examples.append(MixtureExample(entry["example_id"], features, turns, targets, meta))
    return examples
