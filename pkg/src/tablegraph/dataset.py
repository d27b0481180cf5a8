"""On-disk sample format: binary PGM image + JSON metadata, JSON-lines manifest."""
from __future__ import annotations

import json
import os
from collections import Counter
from dataclasses import replace
from pathlib import Path

import numpy as np

from .synth import GenConfig, TableSample, WordVertex, derive_seed, generate

FORMAT_VERSION = 1
MANIFEST = "manifest.jsonl"


class FormatError(ValueError):
    def __init__(self, msg: str, path=None, offset: int | None = None):
        where = f"{path}" if path is not None else "<data>"
        if offset is not None:
            where += f" @ byte {offset}"
        super().__init__(f"{where}: {msg}")
        self.path = path
        self.offset = offset


# -- PGM ------------------------------------------------------------------------------


def encode_pgm(image: np.ndarray) -> bytes:
    if image.dtype != np.uint8 or image.ndim != 2:
        raise ValueError(f"PGM needs a 2-D uint8 image, got {image.dtype} {image.shape}")
    h, w = image.shape
    return f"P5\n{w} {h}\n255\n".encode("ascii") + image.tobytes()


def decode_pgm(data: bytes, path=None) -> np.ndarray:
    pos = 0
    fields = []

    def skip_ws():
        nonlocal pos
        while pos < len(data):
            c = data[pos:pos + 1]
            if c == b"#":
                while pos < len(data) and data[pos:pos + 1] not in (b"\n", b"\r"):
                    pos += 1
            elif c.isspace():
                pos += 1
            else:
                break

    while len(fields) < 4:
        skip_ws()
        start = pos
        while pos < len(data) and not data[pos:pos + 1].isspace() and data[pos:pos + 1] != b"#":
            pos += 1
        if pos == start:
            raise FormatError("truncated PGM header", path, pos)
        fields.append((data[start:pos], start))
    if pos >= len(data):
        raise FormatError("truncated PGM header", path, pos)
    pos += 1  # single whitespace byte before raster

    magic, off = fields[0]
    if magic != b"P5":
        raise FormatError(f"expected P5 magic, got {magic!r}", path, off)
    try:
        w, h, maxval = (int(f) for f, _ in fields[1:])
    except ValueError:
        raise FormatError("non-integer PGM header field", path, fields[1][1]) from None
    if maxval != 255:
        raise FormatError(f"only 8-bit PGM supported, maxval={maxval}", path, fields[3][1])
    need = w * h
    if len(data) - pos < need:
        raise FormatError(f"raster truncated: need {need} bytes, have {len(data) - pos}", path, len(data))
    if len(data) - pos > need:
        raise FormatError("trailing bytes after raster", path, pos + need)
    return np.frombuffer(data, dtype=np.uint8, count=need, offset=pos).reshape(h, w).copy()


# -- sample files ---------------------------------------------------------------------


def sample_to_meta(sample: TableSample) -> dict:
    h, w = sample.image.shape
    return {
        "version": FORMAT_VERSION,
        "category": sample.category,
        "seed": sample.seed,
        "image": {"h": h, "w": w},
        "vertices": [
            {
                "bbox": list(v.bbox),
                "text_len": v.text_len,
                "cell_id": v.cell_id,
                "row_ids": list(v.row_ids),
                "col_ids": list(v.col_ids),
            }
            for v in sample.vertices
        ],
    }


def _atomic_write(path: Path, data: bytes):
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_bytes(data)
    os.replace(tmp, path)


def write_sample(sample: TableSample, stem) -> tuple[Path, Path]:
    """Write ``<stem>.pgm`` and ``<stem>.json``; returns both paths."""
    stem = Path(stem)
    img_path, meta_path = stem.with_suffix(".pgm"), stem.with_suffix(".json")
    _atomic_write(img_path, encode_pgm(sample.image))
    meta = json.dumps(sample_to_meta(sample), sort_keys=True, separators=(",", ":"))
    _atomic_write(meta_path, meta.encode("utf-8") + b"\n")
    return img_path, meta_path


def _parse_meta(raw: bytes, path) -> dict:
    try:
        meta = json.loads(raw.decode("utf-8"))
    except UnicodeDecodeError as e:
        raise FormatError("metadata is not UTF-8", path, e.start) from None
    except json.JSONDecodeError as e:
        raise FormatError(f"bad JSON: {e.msg}", path, e.pos) from None
    if not isinstance(meta, dict):
        raise FormatError("metadata must be a JSON object", path, 0)
    version = meta.get("version")
    if version != FORMAT_VERSION:
        raise FormatError(
            f"format version mismatch: file has {version!r}, reader supports {FORMAT_VERSION}", path, 0
        )
    for key in ("category", "seed", "image", "vertices"):
        if key not in meta:
            raise FormatError(f"missing field {key!r}", path, 0)
    return meta


def read_sample(stem) -> TableSample:
    stem = Path(stem)
    img_path, meta_path = stem.with_suffix(".pgm"), stem.with_suffix(".json")
    meta = _parse_meta(meta_path.read_bytes(), meta_path)
    image = decode_pgm(img_path.read_bytes(), img_path)
    if image.shape != (meta["image"]["h"], meta["image"]["w"]):
        raise FormatError(f"image shape {image.shape} disagrees with metadata", img_path, 0)
    try:
        vertices = tuple(
            WordVertex(
                bbox=tuple(float(x) for x in d["bbox"]),
                text_len=int(d["text_len"]),
                cell_id=int(d["cell_id"]),
                row_ids=tuple(int(x) for x in d["row_ids"]),
                col_ids=tuple(int(x) for x in d["col_ids"]),
            )
            for d in meta["vertices"]
        )
    except (KeyError, TypeError, ValueError) as e:
        raise FormatError(f"bad vertex record: {e!r}", meta_path, 0) from None
    return TableSample(image, vertices, int(meta["category"]), int(meta["seed"]))


# -- datasets -------------------------------------------------------------------------


def category_for_index(category, index: int) -> int:
    """Fixed category, or round-robin 1..4 for ``"mixed"``."""
    if category == "mixed":
        return index % 4 + 1
    return int(category)


def write_dataset(out_dir, count: int, category, cfg: GenConfig) -> Counter:
    """Generate ``count`` samples into ``out_dir`` with a manifest; returns per-category counts."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    counts: Counter = Counter()
    lines = []
    for i in range(count):
        cat = category_for_index(category, i)
        seed = derive_seed(cfg.seed, i)
        sample = generate(replace(cfg, seed=seed), cat)
        sid = f"{i:06d}"
        write_sample(sample, out / sid)
        counts[cat] += 1
        lines.append(json.dumps(
            {"id": sid, "category": cat, "seed": seed, "image": f"{sid}.pgm", "meta": f"{sid}.json",
             "v": sample.v},
            sort_keys=True,
        ))
    _atomic_write(out / MANIFEST, ("\n".join(lines) + "\n").encode("utf-8") if lines else b"")
    return counts


def read_manifest(data_dir) -> list[dict]:
    path = Path(data_dir) / MANIFEST
    records = []
    offset = 0
    for line in path.read_bytes().splitlines(keepends=True):
        if line.strip():
            try:
                records.append(json.loads(line))
            except json.JSONDecodeError as e:
                raise FormatError(f"bad manifest line: {e.msg}", path, offset + e.pos) from None
        offset += len(line)
    return records


def load_dataset(data_dir) -> list[tuple[str, TableSample]]:
    data_dir = Path(data_dir)
    return [(r["id"], read_sample(data_dir / r["id"])) for r in read_manifest(data_dir)]
