"""On-disk formats: ``.emb`` matrices, JSONL manifests, plans, id lists, reports.

``.emb`` layout (little-endian)::

    magic  b"AEMB"   4 bytes
    version u32      = 1
    rows    u64
    dim     u32
    payload rows*dim float32, row-major
"""

from __future__ import annotations

import json
import math
import struct
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .core import FormatError, ImageTokenRecord, NonFinite, ValidationError
from .packer import PackedSequence, PackerConfig, PackingPlan, SequenceEntry, build_segment_mask

EMB_MAGIC = b"AEMB"
EMB_VERSION = 1
_HEADER = struct.Struct("<4sIQI")


def write_emb(path, matrix) -> None:
    m = np.asarray(matrix)
    if m.ndim == 1:
        m = m.reshape(1, -1)
    if m.ndim != 2:
        raise ValidationError(f"cannot store a {m.ndim}-D array as .emb")
    m = np.ascontiguousarray(m, dtype="<f4")
    with open(path, "wb") as fh:
        fh.write(_HEADER.pack(EMB_MAGIC, EMB_VERSION, m.shape[0], m.shape[1]))
        fh.write(m.tobytes())


def read_emb(path) -> np.ndarray:
    raw = Path(path).read_bytes()
    if len(raw) < _HEADER.size:
        raise FormatError(f"{path}: truncated .emb header")
    magic, version, rows, dim = _HEADER.unpack_from(raw)
    if magic != EMB_MAGIC:
        raise FormatError(f"{path}: bad magic {magic!r}")
    if version != EMB_VERSION:
        raise FormatError(f"{path}: unsupported .emb version {version}")
    expected = rows * dim * 4
    if len(raw) - _HEADER.size != expected:
        raise FormatError(f"{path}: payload is {len(raw) - _HEADER.size} bytes, expected {expected}")
    m = np.frombuffer(raw, dtype="<f4", offset=_HEADER.size).reshape(rows, dim).astype(np.float32)
    if not np.all(np.isfinite(m)):
        raise NonFinite(f"{path}: contains NaN or Inf")
    return m


def read_jsonl(path) -> list:
    out = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            line = line.strip()
            if not line:
                continue
            try:
                out.append(json.loads(line))
            except json.JSONDecodeError as exc:
                raise FormatError(f"{path}:{lineno}: {exc.msg}") from None
    return out


def write_jsonl(path, rows: Iterable[dict]) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for row in rows:
            fh.write(json.dumps(row, sort_keys=True) + "\n")


def read_manifest(path, patch_size: int = 16) -> list[ImageTokenRecord]:
    """Image manifest: one ``{"id", "width", "height"}`` object per line."""
    records = []
    for i, row in enumerate(read_jsonl(path)):
        try:
            records.append(ImageTokenRecord(str(row["id"]), int(row["width"]), int(row["height"]), patch_size))
        except (KeyError, TypeError) as exc:
            raise FormatError(f"{path}: manifest row {i + 1} lacks id/width/height ({exc})") from None
    ids = [r.id for r in records]
    if len(set(ids)) != len(ids):
        raise ValidationError(f"{path}: duplicate image ids in manifest")
    return records


def read_ids(path) -> list[str]:
    with open(path, encoding="utf-8") as fh:
        return [line.rstrip("\n") for line in fh if line.strip()]


def write_ids(path, ids: Iterable[str]) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for i in ids:
            fh.write(f"{i}\n")


def read_labels(path) -> list[int]:
    """Integer labels, one per line: bare ints or JSON objects with ``label``."""
    labels = []
    for i, row in enumerate(read_jsonl(path)):
        value = row.get("label") if isinstance(row, dict) else row
        if isinstance(value, bool) or not isinstance(value, int):
            raise FormatError(f"{path}: line {i + 1} is not an integer label")
        labels.append(value)
    return labels


def round_floats(obj, digits: int = 9):
    """Round every float to ``digits`` significant digits for stable diffs."""
    if isinstance(obj, (float, np.floating)):
        x = float(obj)
        return x if not math.isfinite(x) else float(f"{x:.{digits}g}")
    if isinstance(obj, (np.integer,)):
        return int(obj)
    if isinstance(obj, (np.bool_,)):
        return bool(obj)
    if isinstance(obj, dict):
        return {k: round_floats(v, digits) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [round_floats(v, digits) for v in obj]
    if isinstance(obj, np.ndarray):
        return round_floats(obj.tolist(), digits)
    return obj


def dumps_json(obj) -> str:
    return json.dumps(round_floats(obj), indent=2, sort_keys=True) + "\n"


def write_json(path, obj) -> None:
    Path(path).write_text(dumps_json(obj), encoding="utf-8")


def read_json(path):
    try:
        return json.loads(Path(path).read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise FormatError(f"{path}: {exc.msg}") from None


# --- packing plans -------------------------------------------------------------


def plan_to_dict(plan: PackingPlan, cfg: PackerConfig, rank_of: Sequence[int] | None = None,
                 include_segments: bool = True) -> dict:
    seqs = []
    for j, seq in enumerate(plan.sequences):
        item = {
            "index": j,
            "used_tokens": seq.used_tokens,
            "spans": [
                {"id": e.image_id, "offset": e.token_offset, "length": e.token_length} for e in seq.entries
            ],
        }
        if rank_of is not None:
            item["rank"] = int(rank_of[j])
        if include_segments:
            item["segment_ids"] = build_segment_mask(seq, cfg.c_max).tolist()
        seqs.append(item)
    return {
        "c_max": cfg.c_max,
        "extra_tokens_per_image": cfg.extra_tokens_per_image,
        "max_images_per_sequence": cfg.max_images_per_sequence,
        "sequences": seqs,
    }


def plan_from_dict(data: dict) -> tuple[PackingPlan, PackerConfig, list[int] | None]:
    try:
        cfg = PackerConfig(int(data["c_max"]), int(data["extra_tokens_per_image"]),
                           int(data["max_images_per_sequence"]))
        seqs = []
        ranks = []
        for item in data["sequences"]:
            seqs.append(PackedSequence(tuple(
                SequenceEntry(str(s["id"]), int(s["offset"]), int(s["length"])) for s in item["spans"]
            )))
            ranks.append(item.get("rank"))
    except (KeyError, TypeError) as exc:
        raise FormatError(f"malformed plan: missing {exc}") from None
    rank_of = None if any(r is None for r in ranks) else [int(r) for r in ranks]
    return PackingPlan(tuple(seqs)), cfg, rank_of


# --- assignment tables ---------------------------------------------------------


def write_assignments(path, ids: Sequence[str], leaf: np.ndarray, num_leaves: int) -> None:
    """Leaf indices as raw little-endian u32 plus a ``.json`` sidecar with the ids."""
    path = Path(path)
    np.asarray(leaf, dtype="<u4").tofile(path)
    sidecar = {"count": len(ids), "dtype": "u32le", "num_leaves": int(num_leaves), "ids": list(ids)}
    write_json(path.with_name(path.name + ".json"), sidecar)


def read_assignments(path) -> tuple[list[str], np.ndarray, int]:
    path = Path(path)
    side = read_json(path.with_name(path.name + ".json"))
    leaf = np.fromfile(path, dtype="<u4").astype(np.int64)
    if leaf.size != side["count"] or len(side["ids"]) != side["count"]:
        raise FormatError(f"{path}: assignment count does not match sidecar")
    return list(side["ids"]), leaf, int(side["num_leaves"])
