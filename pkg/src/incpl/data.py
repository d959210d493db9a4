"""Dataset manifests and image loading.

Manifests are JSON lines, one record per sample: {"path": str, "class": str}.
Paths resolve relative to the manifest file; images are stored as .npy float
arrays of shape (C, H, W) with values in [0, 1]. Class order is
first-appearance order, which also fixes argmax tie-breaking downstream.
"""

from __future__ import annotations

import json
import warnings
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .backbone import ImageSample
from .errors import ConfigurationError


@dataclass(frozen=True)
class ManifestRecord:
    path: str        # as written in the manifest (used as the sample id)
    class_name: str
    resolved: Path   # absolute location on disk


@dataclass
class DatasetManifest:
    records: list[ManifestRecord]
    class_list: list[str]
    split: str
    source: Path | None = None

    def by_class(self) -> dict[str, list[ManifestRecord]]:
        out: dict[str, list[ManifestRecord]] = {name: [] for name in self.class_list}
        for rec in self.records:
            out[rec.class_name].append(rec)
        return out


def load_manifest(path: str | Path, split: str = "test", class_list: list[str] | None = None) -> DatasetManifest:
    """Parse and validate a JSON-lines manifest.

    If ``class_list`` is given, records naming a class outside it are an
    error; otherwise the class list is derived in first-appearance order.
    """
    path = Path(path)
    if not path.exists():
        raise ConfigurationError(f"manifest file not found: {path}")
    records: list[ManifestRecord] = []
    seen_classes: list[str] = []
    seen_paths: set[str] = set()
    base = path.parent
    for lineno, raw in enumerate(path.read_text(encoding="utf-8").splitlines(), start=1):
        line = raw.strip()
        if not line:
            continue
        try:
            obj = json.loads(line)
        except json.JSONDecodeError as exc:
            raise ConfigurationError(f"{path}:{lineno}: invalid JSON: {exc.msg}") from exc
        if not isinstance(obj, dict) or "path" not in obj or "class" not in obj:
            raise ConfigurationError(f"{path}:{lineno}: record must have 'path' and 'class' keys")
        rel, cls = str(obj["path"]), str(obj["class"])
        if class_list is not None and cls not in class_list:
            raise ConfigurationError(f"{path}:{lineno}: unknown class {cls!r}")
        resolved = (base / rel).resolve()
        if not resolved.exists():
            raise ConfigurationError(f"{path}:{lineno}: sample file not found: {resolved}")
        if rel in seen_paths:
            warnings.warn(f"{path}:{lineno}: duplicate path {rel!r}", stacklevel=2)
        seen_paths.add(rel)
        if cls not in seen_classes:
            seen_classes.append(cls)
        records.append(ManifestRecord(path=rel, class_name=cls, resolved=resolved))
    return DatasetManifest(
        records=records,
        class_list=list(class_list) if class_list is not None else seen_classes,
        split=split,
        source=path,
    )


def write_manifest(entries: list[tuple[str, str]], path: str | Path) -> None:
    """Write (relative path, class name) pairs as JSON lines."""
    path = Path(path)
    with path.open("w", encoding="utf-8") as fh:
        for rel, cls in entries:
            fh.write(json.dumps({"path": rel, "class": cls}) + "\n")


def load_image(record: ManifestRecord) -> ImageSample:
    pixels = np.load(record.resolved)
    return ImageSample(pixels=np.asarray(pixels, dtype=np.float64), id=record.path)


class ImageStore:
    """Small per-stream cache so repeated context draws do not re-read files."""

    def __init__(self):
        self._cache: dict[str, ImageSample] = {}

    def get(self, record: ManifestRecord) -> ImageSample:
        hit = self._cache.get(record.path)
        if hit is None:
            hit = load_image(record)
            self._cache[record.path] = hit
        return hit


def unified_class_list(test: DatasetManifest, labeled: DatasetManifest) -> list[str]:
    """Run vocabulary: test-manifest order first, labeled-only classes appended."""
    names = list(test.class_list)
    names.extend(c for c in labeled.class_list if c not in names)
    return names
