"""Line-delimited dataset manifests and lossless image IO.

A manifest is a JSONL file: the first line is a header carrying the schema
version, run seed, and config digest; every following line is one record.
Images are stored as 8-bit grayscale PNGs; pixels map linearly between
[-1, 1] floats and [0, 255].
"""

from __future__ import annotations

import hashlib
import json
import os
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from PIL import Image

SCHEMA_VERSION = 1


def config_digest(cfg: dict) -> str:
    """Short stable digest of a JSON-serializable config."""
    blob = json.dumps(cfg, sort_keys=True, separators=(",", ":")).encode()
    return hashlib.sha256(blob).hexdigest()[:12]


def save_image(path: str | Path, img: np.ndarray) -> None:
    """Write a [-1, 1] float image as an 8-bit grayscale PNG."""
    arr = np.clip((np.asarray(img, dtype=np.float64) + 1.0) * 127.5, 0, 255)
    Image.fromarray(np.round(arr).astype(np.uint8), mode="L").save(path, format="PNG")


def load_image(path: str | Path) -> np.ndarray:
    """Read a grayscale PNG back into a [-1, 1] float32 array."""
    arr = np.asarray(Image.open(path).convert("L"), dtype=np.float32)
    return arr / 127.5 - 1.0


@dataclass
class DatasetManifest:
    """In-memory view of one manifest: a header dict plus record dicts."""

    path: Path
    header: dict
    records: list[dict] = field(default_factory=list)

    @property
    def kind(self) -> str:
        return self.header.get("kind", "unknown")

    def accepted(self) -> list[dict]:
        return [r for r in self.records if r.get("accepted", True)]

    def image_dir(self) -> Path:
        return self.path.parent

    def load_images(self, records: list[dict] | None = None) -> np.ndarray:
        recs = self.records if records is None else records
        return np.stack([load_image(self.image_dir() / r["image"]) for r in recs])


def write_manifest(path: str | Path, header: dict, records: list[dict]) -> DatasetManifest:
    """Atomic write (temp then rename); header gets the schema version."""
    path = Path(path)
    header = {"schema": SCHEMA_VERSION, **header}
    tmp = path.with_suffix(path.suffix + ".tmp")
    with open(tmp, "w") as fh:
        fh.write(json.dumps(header, sort_keys=True) + "\n")
        for rec in records:
            fh.write(json.dumps(rec, sort_keys=True) + "\n")
    os.replace(tmp, path)
    return DatasetManifest(path, header, list(records))


def read_manifest(path: str | Path) -> DatasetManifest:
    path = Path(path)
    with open(path) as fh:
        lines = fh.read().splitlines()
    if not lines:
        raise ValueError(f"empty manifest: {path}")
    header = json.loads(lines[0])
    if header.get("schema") != SCHEMA_VERSION:
        raise ValueError(f"unsupported manifest schema in {path}: {header.get('schema')}")
    records = [json.loads(line) for line in lines[1:]]
    return DatasetManifest(path, header, records)
