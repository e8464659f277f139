"""Training-manifest construction: face boxes, tagging, year filtering, stats."""

from __future__ import annotations

import csv
import hashlib
import io
import json
import logging
import os
import re
from collections import Counter
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Callable, Iterable, Mapping, Sequence

import numpy as np
from PIL import Image

from .errors import ValidationError
from .tagspace import TagTaxonomy, default_taxonomy, estimate_tags_batch, hard_violations

log = logging.getLogger(__name__)

UNKNOWN_YEAR_SENTINEL = 2030  # the source site's placeholder for "release date undetermined"
MANIFEST_FORMAT = 1


@dataclass(frozen=True)
class BoundingBox:
    x: float
    y: float
    w: float
    h: float

    @property
    def center(self) -> tuple[float, float]:
        return (self.x + self.w / 2.0, self.y + self.h / 2.0)

    def pixel_bounds(self) -> tuple[int, int, int, int]:
        """(left, top, right, bottom) rounded to whole pixels, for cropping."""
        return (
            int(round(self.x)),
            int(round(self.y)),
            int(round(self.x + self.w)),
            int(round(self.y + self.h)),
        )

    @classmethod
    def coerce(cls, value) -> "BoundingBox":
        if isinstance(value, BoundingBox):
            return value
        if isinstance(value, Mapping):
            return cls(float(value["x"]), float(value["y"]), float(value["w"]), float(value["h"]))
        x, y, w, h = value
        return cls(float(x), float(y), float(w), float(h))


def _fit_axis(start: float, length: float, limit: float) -> tuple[float, float]:
    if length >= limit:
        return 0.0, float(limit)
    return min(max(start, 0.0), limit - length), length


def scale_box(box: BoundingBox, factor: float = 1.5, image_w: int = None, image_h: int = None) -> BoundingBox:
    """Grow a box about its center, then shift it back inside the image.

    When the grown box is larger than the image along an axis it saturates to
    the full image extent on that axis.
    """
    if image_w is None or image_h is None:
        raise ValidationError("image_w and image_h are required")
    if box.w <= 0 or box.h <= 0:
        raise ValidationError(f"degenerate box {box}")
    if factor < 1.0:
        raise ValidationError("scale factor must be >= 1")
    if box.x < 0 or box.y < 0 or box.x + box.w > image_w or box.y + box.h > image_h:
        raise ValidationError(f"box {box} lies outside the {image_w}x{image_h} image")
    cx, cy = box.center
    w, h = box.w * factor, box.h * factor
    x, w = _fit_axis(cx - w / 2.0, w, image_w)
    y, h = _fit_axis(cy - h / 2.0, h, image_h)
    return BoundingBox(x, y, w, h)


@dataclass(frozen=True)
class FaceRecord:
    source_id: str
    source_url: str
    source_image: str
    face_index: int
    image_ref: str
    detector_box: BoundingBox
    scaled_box: BoundingBox
    release_year: int | None
    tags: tuple[int, ...]
    rejected: bool = False
    rejection_reason: str | None = None

    def to_json(self) -> dict:
        doc = asdict(self)
        doc["tags"] = list(self.tags)
        return doc

    @classmethod
    def from_json(cls, doc: Mapping) -> "FaceRecord":
        return cls(
            source_id=str(doc["source_id"]),
            source_url=doc["source_url"],
            source_image=doc["source_image"],
            face_index=int(doc["face_index"]),
            image_ref=doc["image_ref"],
            detector_box=BoundingBox.coerce(doc["detector_box"]),
            scaled_box=BoundingBox.coerce(doc["scaled_box"]),
            release_year=doc["release_year"],
            tags=tuple(int(t) for t in doc["tags"]),
            rejected=bool(doc["rejected"]),
            rejection_reason=doc.get("rejection_reason"),
        )


def _dumps(doc) -> str:
    return json.dumps(doc, sort_keys=True, separators=(",", ":"), ensure_ascii=False)


@dataclass
class DatasetManifest:
    records: list[FaceRecord]
    taxonomy_version: str
    image_size: int = 128
    root: Path | None = field(default=None, compare=False)

    def __len__(self):
        return len(self.records)

    @property
    def retained(self) -> list[FaceRecord]:
        return [r for r in self.records if not r.rejected]

    def validate(self, taxonomy: TagTaxonomy | None = None) -> None:
        taxonomy = taxonomy or default_taxonomy()
        if taxonomy.version != self.taxonomy_version:
            raise ValidationError(
                f"manifest uses taxonomy {self.taxonomy_version}, expected {taxonomy.version}"
            )
        kept = self.retained
        if kept:
            problems = hard_violations(np.array([r.tags for r in kept]), taxonomy)
            for rec, problem in zip(kept, problems):
                if problem:
                    raise ValidationError(f"record {rec.image_ref}: {problem}")

    def image_path(self, record: FaceRecord) -> Path:
        if self.root is None:
            raise ValidationError("manifest has no image directory attached")
        return self.root / "images" / (record.image_ref.split(":", 1)[1] + ".png")

    def load_image(self, record: FaceRecord) -> np.ndarray:
        with Image.open(self.image_path(record)) as im:
            arr = np.asarray(im.convert("RGB"))
        if arr.shape[:2] != (self.image_size, self.image_size):
            raise ValidationError(f"{record.image_ref} is {arr.shape[:2]}, expected {self.image_size}")
        return arr

    def verify_images(self) -> list[str]:
        """Image refs whose file is missing or whose checksum does not match."""
        bad = []
        for rec in self.records:
            path = self.image_path(rec)
            if not path.exists() or "sha256:" + _sha256(path.read_bytes()) != rec.image_ref:
                bad.append(rec.image_ref)
        return bad

    def meta(self) -> dict:
        return {
            "format": MANIFEST_FORMAT,
            "taxonomy_version": self.taxonomy_version,
            "image_size": self.image_size,
        }

    def to_jsonl(self) -> str:
        return "".join(_dumps(r.to_json()) + "\n" for r in self.records)

    def save(self, directory: str | os.PathLike) -> Path:
        directory = Path(directory)
        (directory / "images").mkdir(parents=True, exist_ok=True)
        if self.root is not None and Path(self.root).resolve() != directory.resolve():
            for rec in self.records:
                target = directory / "images" / (rec.image_ref.split(":", 1)[1] + ".png")
                if not target.exists():
                    _atomic_write(target, self.image_path(rec).read_bytes())
        _atomic_write(directory / "meta.json", (_dumps(self.meta()) + "\n").encode())
        _atomic_write(directory / "manifest.jsonl", self.to_jsonl().encode())
        self.root = directory
        return directory

    @classmethod
    def load(cls, directory: str | os.PathLike) -> "DatasetManifest":
        directory = Path(directory)
        meta = json.loads((directory / "meta.json").read_text())
        if meta.get("format") != MANIFEST_FORMAT:
            raise ValidationError(f"unsupported manifest format {meta.get('format')}")
        text = (directory / "manifest.jsonl").read_text(encoding="utf-8")
        records = [FaceRecord.from_json(json.loads(line)) for line in text.splitlines() if line.strip()]
        return cls(records, meta["taxonomy_version"], int(meta["image_size"]), directory)


def _sha256(data: bytes) -> str:
    return hashlib.sha256(data).hexdigest()


def _atomic_write(path: Path, data: bytes) -> None:
    tmp = path.with_name(f".{path.name}.{os.getpid()}.tmp")
    tmp.write_bytes(data)
    os.replace(tmp, path)


def encode_png(array: np.ndarray) -> bytes:
    buf = io.BytesIO()
    Image.fromarray(np.asarray(array, dtype=np.uint8)).save(buf, format="PNG")
    return buf.getvalue()


# -- source listing ---------------------------------------------------------

LISTING_COLUMNS = ("id", "name", "sell_day", "url", "path")


def read_listing(path: str | os.PathLike) -> list[dict]:
    """Read a CSV or JSON source listing.

    Rows carry ``id, name, sell_day, url`` as exported by the bundled SQL
    query, plus ``path`` naming the locally downloaded image.
    """
    path = Path(path)
    if path.suffix.lower() == ".json":
        rows = json.loads(path.read_text())
    elif path.suffix.lower() in (".jsonl", ".ndjson"):
        rows = [json.loads(l) for l in path.read_text().splitlines() if l.strip()]
    else:
        with path.open(newline="", encoding="utf-8") as fh:
            rows = list(csv.DictReader(fh))
    for i, row in enumerate(rows):
        missing = [c for c in LISTING_COLUMNS if c not in row]
        if missing:
            raise ValidationError(f"listing row {i} lacks columns {missing}")
        p = Path(row["path"])
        if not p.is_absolute():
            row["path"] = str(path.parent / p)
    return rows


def parse_release_year(sell_day) -> int | None:
    if sell_day is None:
        return None
    m = re.match(r"\s*(\d{4})", str(sell_day))
    if not m:
        return None
    year = int(m.group(1))
    return None if year == UNKNOWN_YEAR_SENTINEL else year


# -- ingestion --------------------------------------------------------------

Detector = Callable[[Image.Image], Sequence]
Estimator = Callable[[Image.Image], Sequence[float]]


def _process_row(row, detector, estimator, image_dir, image_size, factor, threshold, taxonomy):
    try:
        with Image.open(row["path"]) as im:
            image = im.convert("RGB")
        boxes = [BoundingBox.coerce(b) for b in detector(image)]
    except Exception as exc:
        log.warning("skipping %s: %s", row["path"], exc)
        return []
    out = []
    for face_index, box in enumerate(boxes):
        try:
            scaled = scale_box(box, factor, image.width, image.height)
            face = image.crop(scaled.pixel_bounds()).resize((image_size, image_size), Image.BILINEAR)
            probs = np.asarray(estimator(face), dtype=np.float64)
            tags = estimate_tags_batch(probs[None], threshold, taxonomy)[0]
        except Exception as exc:
            log.warning("skipping face %d of %s: %s", face_index, row["path"], exc)
            continue
        data = encode_png(np.asarray(face))
        digest = _sha256(data)
        target = image_dir / f"{digest}.png"
        if not target.exists():
            _atomic_write(target, data)
        out.append(
            FaceRecord(
                source_id=str(row["id"]),
                source_url=str(row["url"]),
                source_image=str(row["path"]),
                face_index=face_index,
                image_ref=f"sha256:{digest}",
                detector_box=box,
                scaled_box=scaled,
                release_year=parse_release_year(row.get("sell_day")),
                tags=tuple(int(t) for t in tags),
            )
        )
    return out


def ingest(
    listing: Iterable[Mapping],
    detector: Detector,
    estimator: Estimator,
    out_dir: str | os.PathLike,
    *,
    image_size: int = 128,
    factor: float = 1.5,
    threshold: float = 0.25,
    workers: int = 1,
    taxonomy: TagTaxonomy | None = None,
) -> DatasetManifest:
    """Detect, crop, resize and tag every listed image into a saved manifest.

    ``detector`` maps a PIL image to face boxes ``(x, y, w, h)``; ``estimator``
    maps a cropped face to one probability per taxonomy attribute. A failure
    on one image is logged and that image skipped.
    """
    taxonomy = taxonomy or default_taxonomy()
    out_dir = Path(out_dir)
    image_dir = out_dir / "images"
    image_dir.mkdir(parents=True, exist_ok=True)
    rows = list(listing)

    def work(row):
        return _process_row(row, detector, estimator, image_dir, image_size, factor, threshold, taxonomy)

    if workers > 1:
        with ThreadPoolExecutor(workers) as pool:
            chunks = list(pool.map(work, rows))
    else:
        chunks = [work(r) for r in rows]
    records = [rec for chunk in chunks for rec in chunk]
    log.info("ingested %d faces from %d images", len(records), len(rows))
    manifest = DatasetManifest(records, taxonomy.version, image_size, out_dir)
    manifest.save(out_dir)
    return manifest


# -- curation ---------------------------------------------------------------


def read_rejection_list(path: str | os.PathLike) -> set[str]:
    refs = set()
    for line in Path(path).read_text().splitlines():
        line = line.split("#", 1)[0].strip()
        if line:
            refs.add(line if ":" in line else f"sha256:{line}")
    return refs


def filter_manifest(
    manifest: DatasetManifest, min_year: int = 2005, rejection_list: Iterable[str] = ()
) -> DatasetManifest:
    """Mark records rejected by year (``>= min_year`` kept) or by manual review.

    Records already rejected keep their original reason, so the operation is
    idempotent.
    """
    rejects = set(rejection_list)
    out = []
    for rec in manifest.records:
        if rec.rejected:
            out.append(rec)
            continue
        reason = None
        if rec.image_ref in rejects:
            reason = "manual"
        elif rec.release_year is None:
            reason = "unknown-year"
        elif rec.release_year < min_year:
            reason = f"year<{min_year}"
        out.append(replace(rec, rejected=True, rejection_reason=reason) if reason else rec)
    return DatasetManifest(out, manifest.taxonomy_version, manifest.image_size, manifest.root)


def stats(manifest: DatasetManifest, edge_bin: int = 32, taxonomy: TagTaxonomy | None = None) -> dict:
    """Distribution report.

    Year and short-edge histograms cover every record (what is available);
    tag counts cover retained records only (what is trained on).
    """
    taxonomy = taxonomy or default_taxonomy()
    years = Counter(
        "unknown" if r.release_year is None else r.release_year for r in manifest.records
    )
    edges = Counter(
        int(min(r.scaled_box.w, r.scaled_box.h) // edge_bin) * edge_bin for r in manifest.records
    )
    kept = manifest.retained
    tag_counts = dict.fromkeys(taxonomy.names, 0)
    if kept:
        sums = np.array([r.tags for r in kept], dtype=np.int64).sum(axis=0)
        tag_counts = {n: int(c) for n, c in zip(taxonomy.names, sums)}
    rejected = Counter(r.rejection_reason for r in manifest.records if r.rejected)
    return {
        "n_records": len(manifest.records),
        "n_retained": len(kept),
        "by_year": {str(k): v for k, v in sorted(years.items(), key=lambda kv: str(kv[0]))},
        "by_short_edge": {str(k): v for k, v in sorted(edges.items())},
        "short_edge_bin": edge_bin,
        "tag_counts": tag_counts,
        "rejections": dict(sorted(rejected.items())),
    }


def render_stats(report: Mapping, out_dir: str | os.PathLike) -> list[Path]:
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    written = []
    for key, title in (
        ("by_year", "images by release year"),
        ("by_short_edge", "images by short edge size (px)"),
        ("tag_counts", "retained images per tag"),
    ):
        data = report[key]
        fig, ax = plt.subplots(figsize=(max(6, 0.3 * len(data)), 4))
        ax.bar(range(len(data)), list(data.values()))
        ax.set_xticks(range(len(data)))
        ax.set_xticklabels(list(data.keys()), rotation=90, fontsize=7)
        ax.set_title(title)
        fig.tight_layout()
        path = out_dir / f"{key}.png"
        fig.savefig(path, dpi=100)
        plt.close(fig)
        written.append(path)
    return written
