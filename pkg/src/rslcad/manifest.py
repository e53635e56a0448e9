"""Dataset manifests: CSV with header ``path,label,laterality,split``."""
from __future__ import annotations

import csv
import io
import logging
import os
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterator, List, Optional, Union

from .preprocess import Laterality

log = logging.getLogger(__name__)

HEADER = ["path", "label", "laterality", "split"]
SPLITS = ("train", "val")


class ManifestError(ValueError):
    pass


@dataclass(frozen=True)
class ManifestEntry:
    path: Path
    label: int  # 0 benign, 1 malignant
    laterality: Laterality
    split: str


@dataclass
class DatasetManifest:
    entries: List[ManifestEntry] = field(default_factory=list)

    def __len__(self) -> int:
        return len(self.entries)

    def __iter__(self) -> Iterator[ManifestEntry]:
        return iter(self.entries)

    def split(self, name: str) -> "DatasetManifest":
        return DatasetManifest([e for e in self.entries if e.split == name])

    def __add__(self, other: "DatasetManifest") -> "DatasetManifest":
        return DatasetManifest(self.entries + other.entries)


def load_manifest(path: Union[str, Path], check_files: bool = True) -> DatasetManifest:
    """Parse and validate a manifest; relative image paths resolve against its directory."""
    path = Path(path)
    root = path.parent
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    if not rows:
        raise ManifestError(f"{path}: empty file (missing header)")
    if [c.strip() for c in rows[0]] != HEADER:
        raise ManifestError(f"{path}:1: header must be {','.join(HEADER)}, got {','.join(rows[0])}")

    entries, missing = [], []
    for lineno, row in enumerate(rows[1:], start=2):
        if not row or all(not c.strip() for c in row):
            continue
        if len(row) != 4:
            raise ManifestError(f"{path}:{lineno}: expected 4 fields, got {len(row)}")
        img, label, lat, split = (c.strip() for c in row)
        if label not in ("0", "1"):
            raise ManifestError(f"{path}:{lineno}: label must be 0 or 1, got {label!r}")
        if lat not in ("L", "R", "U"):
            raise ManifestError(f"{path}:{lineno}: laterality must be L, R or U, got {lat!r}")
        if split not in SPLITS:
            raise ManifestError(f"{path}:{lineno}: split must be train or val, got {split!r}")
        img_path = Path(img)
        if not img_path.is_absolute():
            img_path = root / img_path
        if check_files and not os.access(img_path, os.R_OK):
            missing.append(f"line {lineno}: {img_path}")
        entries.append(ManifestEntry(img_path, int(label), Laterality(lat), split))

    if missing:
        raise OSError(f"{path}: unreadable image files:\n  " + "\n  ".join(missing))
    if not entries:
        log.warning("%s: manifest has no entries", path)
    return DatasetManifest(entries)


def write_manifest(manifest: DatasetManifest, path: Union[str, Path]) -> None:
    path = Path(path)
    root = path.parent.resolve()
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(HEADER)
    for e in manifest:
        p = Path(e.path).resolve()
        try:
            p = p.relative_to(root)
        except ValueError:
            pass
        writer.writerow([p.as_posix(), e.label, e.laterality.value, e.split])
    path.write_text(buf.getvalue())
