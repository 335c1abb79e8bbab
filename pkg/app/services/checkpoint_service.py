"""
Checkpoint persistence: text manifest plus raw little-endian f32 blob
"""
import json
import logging
import math
from pathlib import Path
from typing import Dict, List, Mapping, Optional, Tuple

import numpy as np
from pydantic import ValidationError

from app.core.errors import CheckpointError, Mp2Error
from app.models.mp2_model import ModularPromptModel
from app.schemas.checkpoint import BYTES_PER_VALUE, FORMAT_VERSION, TensorRecord

logger = logging.getLogger(__name__)

MANIFEST = "manifest.jsonl"
BLOB = "weights.bin"
CONFIG = "config.json"
LE_F32 = np.dtype("<f4")


def build_manifest(tensors: Mapping[str, np.ndarray]) -> List[TensorRecord]:
    records, offset = [], 0
    for name, values in tensors.items():
        length = int(np.asarray(values).size) * BYTES_PER_VALUE
        records.append(TensorRecord(name=name, shape=list(np.shape(values)), offset=offset, length=length))
        offset += length
    return records


def save_tensors(
    tensors: Mapping[str, np.ndarray], path: Path, config: Optional[dict] = None
) -> List[TensorRecord]:
    """
    Write manifest.jsonl, weights.bin and config.json into ``path``

    Tensors are written in mapping order; the manifest has one record per line.
    """
    for name, values in tensors.items():
        if not np.all(np.isfinite(values)):
            raise CheckpointError(f"tensor {name} has non-finite values")
    records = build_manifest(tensors)
    try:
        path.mkdir(parents=True, exist_ok=True)
        with open(path / BLOB, "wb") as fh:
            for values in tensors.values():
                fh.write(np.ascontiguousarray(values, dtype=LE_F32).tobytes(order="C"))
        with open(path / MANIFEST, "w", encoding="utf-8") as fh:
            for rec in records:
                fh.write(rec.model_dump_json() + "\n")
        (path / CONFIG).write_text(json.dumps(config or {}, indent=2, sort_keys=True), encoding="utf-8")
    except OSError as e:
        raise CheckpointError(f"cannot write checkpoint to {path}: {e}") from e
    return records


def read_manifest(path: Path) -> List[TensorRecord]:
    manifest = path / MANIFEST
    if not manifest.is_file():
        raise CheckpointError(f"manifest missing in {path}")
    records = []
    for lineno, line in enumerate(manifest.read_text(encoding="utf-8").splitlines(), start=1):
        if not line.strip():
            continue
        try:
            raw = json.loads(line)
        except json.JSONDecodeError as e:
            raise CheckpointError(f"manifest line {lineno}: {e}") from e
        if raw.get("format_version") != FORMAT_VERSION:
            raise CheckpointError(
                f"manifest line {lineno}: format version {raw.get('format_version')} != {FORMAT_VERSION}"
            )
        try:
            records.append(TensorRecord.model_validate(raw))
        except ValidationError as e:
            raise CheckpointError(f"manifest line {lineno}: {e}") from e
    return records


def validate_layout(records: List[TensorRecord], blob_size: int) -> None:
    """Offsets must be in bounds and non-overlapping; names unique"""
    names = [r.name for r in records]
    if len(set(names)) != len(names):
        raise CheckpointError("duplicate tensor names in manifest")
    previous: Optional[TensorRecord] = None
    for rec in sorted(records, key=lambda r: (r.offset, r.end)):
        if rec.end > blob_size:
            raise CheckpointError(f"tensor {rec.name} ends at byte {rec.end}, blob has {blob_size} (truncated)")
        if previous is not None and rec.offset < previous.end:
            raise CheckpointError(f"tensors {previous.name} and {rec.name} overlap")
        previous = rec


def load_tensors(path: Path) -> Tuple[Dict[str, np.ndarray], dict]:
    """Validate the whole manifest first, then read every tensor"""
    records = read_manifest(path)
    blob_path = path / BLOB
    if not blob_path.is_file():
        raise CheckpointError(f"blob missing: {blob_path}")
    blob = blob_path.read_bytes()
    validate_layout(records, len(blob))

    config_path = path / CONFIG
    try:
        config = json.loads(config_path.read_text(encoding="utf-8")) if config_path.is_file() else {}
    except json.JSONDecodeError as e:
        raise CheckpointError(f"config snapshot is not valid JSON: {e}") from e

    tensors: Dict[str, np.ndarray] = {}
    for rec in records:
        count = math.prod(rec.shape)
        values = np.frombuffer(blob, dtype=LE_F32, count=count, offset=rec.offset)
        tensors[rec.name] = values.astype(np.float32).reshape(rec.shape)
    return tensors, config


class CheckpointService:
    """Save and restore a ModularPromptModel"""

    def save(self, model: ModularPromptModel, path: Path, extra: Optional[dict] = None) -> List[TensorRecord]:
        tensors = {name: p.data for name, p in model.named_tensors().items()}
        config = {"model": model.snapshot(), **(extra or {})}
        records = save_tensors(tensors, path, config)
        logger.info(f"Saved {len(records)} tensors to {path}")
        return records

    def load(self, path: Path) -> ModularPromptModel:
        model, _ = self.load_with_extra(path)
        return model

    def load_with_extra(self, path: Path) -> Tuple[ModularPromptModel, dict]:
        """Model plus the non-model config entries, from a single read of the blob"""
        tensors, config = load_tensors(path)
        if "model" not in config:
            raise CheckpointError(f"{path} has no model snapshot")
        try:
            model = ModularPromptModel.from_tensors(config["model"], tensors)
        except CheckpointError:
            raise
        except Mp2Error as e:
            raise CheckpointError(f"checkpoint does not describe a valid model: {e.message}") from e
        logger.info(f"Loaded {len(tensors)} tensors from {path}")
        return model, {k: v for k, v in config.items() if k != "model"}
