"""Manifest ingestion, label derivation and deterministic splits."""

from __future__ import annotations

import csv
import json
import random
from collections import Counter
from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path
from typing import Iterable, Sequence

from PIL import Image

from .errors import (
    DuplicateId,
    EmptyTestSet,
    MissingColumn,
    SingleClassInput,
    TooFewRecords,
    UnknownConfidenceValue,
    UnknownSpeciesValue,
    UnreadableImage,
)

REQUIRED_COLUMNS = ("id", "relative_path", "species", "confidence")


class Species(str, Enum):
    ALBOPICTUS = "albopictus"
    AEGYPTI = "aegypti"
    OTHER = "other"
    CANNOT_TELL = "cannot_tell"


class Confidence(str, Enum):
    CONFIRMED = "confirmed"
    PROBABLE = "probable"
    NOT_CLASSIFIED = "not_classified"


class BinaryLabel(str, Enum):
    TIGER = "tiger"
    NON_TIGER = "non_tiger"
    EXCLUDED = "excluded"


# Class index used by the network output: index 1 is the positive (tiger) class.
CLASS_NAMES = (BinaryLabel.NON_TIGER.value, BinaryLabel.TIGER.value)


def class_index(label: BinaryLabel | str) -> int:
    label = BinaryLabel(label)
    if label is BinaryLabel.EXCLUDED:
        raise ValueError("excluded records have no class index")
    return CLASS_NAMES.index(label.value)


def derive_label(species: Species | str, confidence: Confidence | str,
                 include_probable: bool = False) -> BinaryLabel:
    """Training label of a manifest row.

    Only confirmed albopictus are positives. ``include_probable`` additionally
    admits probable albopictus. Aegypti and other species are negatives at any
    confidence; ``cannot_tell`` is always excluded.
    """
    species, confidence = Species(species), Confidence(confidence)
    if species is Species.CANNOT_TELL:
        return BinaryLabel.EXCLUDED
    if species is Species.ALBOPICTUS:
        if confidence is Confidence.CONFIRMED:
            return BinaryLabel.TIGER
        if confidence is Confidence.PROBABLE and include_probable:
            return BinaryLabel.TIGER
        return BinaryLabel.EXCLUDED
    return BinaryLabel.NON_TIGER


def evaluation_label(species: Species | str) -> BinaryLabel:
    """Label used to score unconfirmed (volunteer-labelled) records."""
    species = Species(species)
    if species is Species.CANNOT_TELL:
        return BinaryLabel.EXCLUDED
    return BinaryLabel.TIGER if species is Species.ALBOPICTUS else BinaryLabel.NON_TIGER


@dataclass(frozen=True)
class ImageRecord:
    id: str
    path: Path
    species: Species
    confidence: Confidence
    binary_label: BinaryLabel = field(default=None)  # type: ignore[assignment]
    category: str | None = None

    def __post_init__(self):
        object.__setattr__(self, "path", Path(self.path))
        object.__setattr__(self, "species", Species(self.species))
        object.__setattr__(self, "confidence", Confidence(self.confidence))
        if self.binary_label is None:
            object.__setattr__(self, "binary_label", derive_label(self.species, self.confidence))
        else:
            object.__setattr__(self, "binary_label", BinaryLabel(self.binary_label))

    @property
    def target(self) -> int:
        """Class index of the label this record is trained or scored against."""
        if self.binary_label is not BinaryLabel.EXCLUDED:
            return class_index(self.binary_label)
        return class_index(evaluation_label(self.species))


def relabel(records: Iterable[ImageRecord], include_probable: bool) -> list[ImageRecord]:
    out = []
    for r in records:
        label = derive_label(r.species, r.confidence, include_probable)
        out.append(ImageRecord(r.id, r.path, r.species, r.confidence, label, r.category))
    return out


def _check_image(path: Path) -> bool:
    try:
        with Image.open(path) as im:
            im.convert("RGB").size
    except Exception:
        return False
    return True


def ingest_manifest(csv_path, image_root, *, check_images: bool = True,
                    include_probable: bool = False) -> list[ImageRecord]:
    """Read a manifest CSV into records with derived binary labels.

    Rows whose image cannot be decoded are collected and reported together in
    a single :class:`UnreadableImage` error.
    """
    csv_path, image_root = Path(csv_path), Path(image_root)
    if not image_root.is_dir():
        raise FileNotFoundError(f"image root not found: {image_root}")
    with open(csv_path, newline="", encoding="utf-8") as fh:
        reader = csv.DictReader(fh)
        header = [h.strip() for h in (reader.fieldnames or [])]
        missing = [c for c in REQUIRED_COLUMNS if c not in header]
        if missing:
            raise MissingColumn(f"manifest lacks column(s): {', '.join(missing)}", columns=missing)
        rows = [{k.strip(): (v or "").strip() for k, v in row.items() if k} for row in reader]

    records: list[ImageRecord] = []
    seen_ids: set[str] = set()
    seen_paths: set[str] = set()
    unreadable: list[str] = []
    for row in rows:
        rid, rel = row["id"], row["relative_path"]
        try:
            species = Species(row["species"])
        except ValueError:
            raise UnknownSpeciesValue(f"row {rid}: unknown species {row['species']!r}",
                                      row_id=rid) from None
        try:
            confidence = Confidence(row["confidence"])
        except ValueError:
            raise UnknownConfidenceValue(f"row {rid}: unknown confidence {row['confidence']!r}",
                                         row_id=rid) from None
        if rid in seen_ids:
            raise DuplicateId(f"duplicate id {rid!r}", row_id=rid)
        if rel in seen_paths:
            raise DuplicateId(f"row {rid}: duplicate image path {rel!r}", row_id=rid)
        seen_ids.add(rid)
        seen_paths.add(rel)
        path = image_root / rel
        if check_images and not _check_image(path):
            unreadable.append(rid)
        label = derive_label(species, confidence, include_probable)
        records.append(ImageRecord(rid, path, species, confidence, label,
                                   row.get("category") or None))
    if unreadable:
        raise UnreadableImage(unreadable)
    return records


def summarize(records: Sequence[ImageRecord]) -> dict:
    labels = Counter(r.binary_label.value for r in records)
    return {
        "total": len(records),
        "tiger": labels.get("tiger", 0),
        "non_tiger": labels.get("non_tiger", 0),
        "excluded": labels.get("excluded", 0),
        "eligible": len(eligible(records)),
        "by_confidence": dict(Counter(r.confidence.value for r in records)),
        "by_species": dict(Counter(r.species.value for r in records)),
    }


def eligible(records: Iterable[ImageRecord]) -> list[ImageRecord]:
    """Expert-labelled records that may enter training or cross-validation."""
    return [r for r in records
            if r.binary_label is not BinaryLabel.EXCLUDED
            and r.confidence is not Confidence.NOT_CLASSIFIED]


@dataclass(frozen=True)
class FoldPlan:
    k: int
    seed: int
    assignments: dict[str, int]

    def fold_ids(self, fold: int) -> set[str]:
        return {rid for rid, f in self.assignments.items() if f == fold}

    def split(self, records: Sequence[ImageRecord], fold: int):
        """(train, validation) records for one fold."""
        train = [r for r in records if r.id in self.assignments and self.assignments[r.id] != fold]
        val = [r for r in records if self.assignments.get(r.id) == fold]
        return train, val

    def to_json(self) -> str:
        return json.dumps({"k": self.k, "seed": self.seed,
                           "assignments": dict(sorted(self.assignments.items()))}, indent=2)

    @classmethod
    def from_json(cls, text: str) -> "FoldPlan":
        data = json.loads(text)
        return cls(int(data["k"]), int(data["seed"]),
                   {str(k): int(v) for k, v in data["assignments"].items()})


def make_folds(records: Sequence[ImageRecord], k: int = 5, seed: int = 42) -> FoldPlan:
    """Stratified, seed-deterministic assignment of eligible records to k folds.

    Each class is shuffled independently, then the concatenated sequence
    (positives first) is dealt round-robin, so fold sizes and per-class counts
    each differ by at most one across folds.
    """
    pool = eligible(records)
    if k < 2 or len(pool) < k:
        raise TooFewRecords(f"need k >= 2 and at least k eligible records (k={k}, n={len(pool)})")
    pos = sorted(r.id for r in pool if r.binary_label is BinaryLabel.TIGER)
    neg = sorted(r.id for r in pool if r.binary_label is BinaryLabel.NON_TIGER)
    if not pos or not neg:
        raise SingleClassInput("both tiger and non_tiger records are required for stratified folds")
    rng = random.Random(seed)
    rng.shuffle(pos)
    rng.shuffle(neg)
    assignments = {rid: i % k for i, rid in enumerate(pos + neg)}
    return FoldPlan(k, seed, assignments)


def split_protocol_b(records: Sequence[ImageRecord]):
    """Train on expert-labelled records, test on not-classified ones."""
    train = eligible(records)
    test = [r for r in records
            if r.confidence is Confidence.NOT_CLASSIFIED
            and evaluation_label(r.species) is not BinaryLabel.EXCLUDED]
    if not test:
        raise EmptyTestSet("manifest has no not_classified records to test on")
    assert not {r.id for r in train} & {r.id for r in test}
    return train, test
