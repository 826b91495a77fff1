"""Pipeline manifest: one JSON file tying together artifacts, seeds, and params.

Every stage reads the manifest, verifies the checksums of the artifacts it
consumes, writes its outputs to the paths the manifest names, and records
their checksums. All paths are relative to the manifest's directory.
"""

from __future__ import annotations

import json
from pathlib import Path

from .errors import ValidationError
from .tensor_core import sha256_file

MANIFEST_VERSION = 1


def default_manifest(params: dict, seeds: dict) -> dict:
    return {
        "version": MANIFEST_VERSION,
        "model": {"json": "model.json", "weights_dir": "weights"},
        "seeds": dict(seeds),
        "params": dict(params),
        "artifacts": {
            "sensitivity_weight": "sensitivity_weight.jsonl",
            "sensitivity_activation": "sensitivity_activation.jsonl",
            "config": "config.json",
            "frontier": "frontier.csv",
            "frontier_configs_dir": "frontier_configs",
            "report": "report.json",
        },
        "checksums": {},
    }


def load_manifest(path: Path | str) -> tuple[dict, Path]:
    path = Path(path)
    try:
        with open(path) as f:
            data = json.load(f)
    except json.JSONDecodeError as exc:
        raise ValidationError(f"manifest {path} is not valid JSON: {exc}") from exc
    if data.get("version") != MANIFEST_VERSION:
        raise ValidationError(f"manifest {path} has unsupported version {data.get('version')!r}")
    return data, path.parent.resolve()


def save_manifest(data: dict, path: Path | str) -> None:
    with open(path, "w") as f:
        json.dump(data, f, sort_keys=True, indent=2)
        f.write("\n")


def record_checksums(data: dict, root: Path, rel_paths: list[str]) -> None:
    for rel in rel_paths:
        data.setdefault("checksums", {})[rel] = sha256_file(root / rel)


def verify_artifacts(data: dict, root: Path, rel_paths: list[str]) -> None:
    """Each referenced file must exist and match its recorded checksum."""
    sums = data.get("checksums", {})
    for rel in rel_paths:
        full = root / rel
        if not full.exists():
            raise ValidationError(f"required artifact missing: {rel}")
        if rel not in sums:
            raise ValidationError(f"artifact has no recorded checksum: {rel}")
        if sha256_file(full) != sums[rel]:
            raise ValidationError(f"artifact checksum mismatch: {rel}")


def model_artifact_paths(data: dict, layer_ids: list[str]) -> list[str]:
    wdir = data["model"]["weights_dir"]
    paths = [data["model"]["json"]]
    for lid in layer_ids:
        paths.append(f"{wdir}/{lid}.bin")
        paths.append(f"{wdir}/{lid}.json")
    return paths
