"""Frame extraction, face cropping, manifests and person-disjoint splits.

Crops live under ``<root>/<subject_id>/<real|fake>/<attack_type>/<frame>.ppm``.
A manifest is JSON Lines with one :class:`SampleRecord` per line; paths in
it are relative to the crops root.
"""

from __future__ import annotations

import csv
import json
import math
import re
from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Iterator, Sequence

import numpy as np

from .imaging import read_image, resize_bilinear, to_uint8, write_image
from .tensor import Tensor

ATTACK_TYPES = ("genuine", "mask_crop", "mask_full", "mask_upper", "paper_print", "replay")
LABELS = ("real", "fake")
IMAGE_SUFFIXES = (".ppm", ".pgm")
FRAME_SUFFIXES = (".ppm", ".pgm", ".png", ".jpg", ".jpeg", ".bmp")
RECORD_KEYS = ("crop_path", "label", "subject_id", "attack_type", "source_video", "frame_index")
_CROP_NAME = re.compile(r"^(?P<video>.+)__f(?P<index>\d+)$")


class DataError(Exception):
    pass


class FrameSourceError(DataError):
    pass


class DetectorError(DataError):
    pass


class ManifestError(DataError):
    pass


class SplitError(DataError):
    pass


@dataclass(frozen=True)
class SampleRecord:
    crop_path: str
    label: str
    subject_id: int
    attack_type: str
    source_video: str
    frame_index: int

    def __post_init__(self):
        if not isinstance(self.crop_path, str) or not self.crop_path:
            raise ManifestError("crop_path must be a non-empty string")
        if self.label not in LABELS:
            raise ManifestError(f"label must be real or fake, got {self.label!r}")
        if self.attack_type not in ATTACK_TYPES:
            raise ManifestError(f"unknown attack type {self.attack_type!r}")
        if (self.label == "real") != (self.attack_type == "genuine"):
            raise ManifestError(f"{self.crop_path}: label {self.label} inconsistent with attack {self.attack_type}")
        if type(self.subject_id) is not int or self.subject_id < 1:
            raise ManifestError(f"subject_id must be an integer >= 1, got {self.subject_id!r}")
        if type(self.frame_index) is not int or self.frame_index < 0:
            raise ManifestError(f"frame_index must be a non-negative integer, got {self.frame_index!r}")
        if not isinstance(self.source_video, str):
            raise ManifestError("source_video must be a string")

    @property
    def target(self) -> int:
        return 1 if self.label == "real" else 0

    def to_json(self) -> str:
        return json.dumps({k: getattr(self, k) for k in RECORD_KEYS}, ensure_ascii=False)


@dataclass
class Manifest:
    records: list[SampleRecord]
    root: Path = field(default_factory=Path)

    def __post_init__(self):
        self.root = Path(self.root)
        seen = set()
        for r in self.records:
            if r.crop_path in seen:
                raise ManifestError(f"duplicate crop path {r.crop_path}")
            seen.add(r.crop_path)

    def __len__(self) -> int:
        return len(self.records)

    def __iter__(self):
        return iter(self.records)

    @property
    def subjects(self) -> set[int]:
        return {r.subject_id for r in self.records}

    @property
    def summary(self) -> dict[str, dict]:
        return {
            "label": dict(sorted(Counter(r.label for r in self.records).items())),
            "subject": dict(sorted(Counter(r.subject_id for r in self.records).items())),
            "attack": dict(sorted(Counter(r.attack_type for r in self.records).items())),
        }

    def path_of(self, record: SampleRecord) -> Path:
        return self.root / record.crop_path

    def targets(self) -> np.ndarray:
        return np.array([r.target for r in self.records], dtype=np.int64)


# frames and detection ----------------------------------------------------------


def extract_frames(source: str | Path, stride: int = 1) -> Iterator[tuple[int, np.ndarray]]:
    """Yield ``(index, frame)`` for every ``stride``-th image of a frame directory.

    Files are taken in lexicographic name order; the source is validated
    before the first frame is decoded.
    """
    if stride < 1:
        raise ValueError(f"stride must be >= 1, got {stride}")
    src = Path(source)
    if not src.is_dir():
        raise FrameSourceError(f"frame source {src} does not exist")
    files = sorted(p for p in src.iterdir() if p.is_file() and p.suffix.lower() in FRAME_SUFFIXES)
    if not files:
        raise FrameSourceError(f"no frames in {src}")

    def _gen():
        for i in range(0, len(files), stride):
            yield i, read_image(files[i])

    return _gen()


@dataclass(frozen=True)
class FaceBox:
    x: int
    y: int
    width: int
    height: int
    confidence: float = 1.0

    def __post_init__(self):
        if self.width <= 0 or self.height <= 0:
            raise DetectorError(f"face box must have positive size, got {self.width}x{self.height}")
        if not 0.0 <= self.confidence <= 1.0:
            raise DetectorError(f"confidence must be in [0, 1], got {self.confidence}")

    @property
    def area(self) -> int:
        return self.width * self.height

    def fits(self, frame_h: int, frame_w: int) -> bool:
        return self.x >= 0 and self.y >= 0 and self.x + self.width <= frame_w and self.y + self.height <= frame_h


Detector = Callable[[np.ndarray], Sequence[FaceBox]]


class CenterBoxDetector:
    """Deterministic stand-in for a face detector: one box over the central 60%."""

    fraction = 0.6

    def __call__(self, frame: np.ndarray) -> list[FaceBox]:
        h, w = frame.shape[:2]
        bw, bh = max(1, round(w * self.fraction)), max(1, round(h * self.fraction))
        return [FaceBox((w - bw) // 2, (h - bh) // 2, bw, bh, 1.0)]


@dataclass
class RejectionReport:
    frames_in: int = 0
    crops_out: int = 0
    rows: list[tuple[str, int, str]] = field(default_factory=list)

    @property
    def rejections(self) -> int:
        return len(self.rows)

    def reject(self, source: str, frame_index: int, reason: str) -> None:
        self.rows.append((source, frame_index, reason))

    def write_csv(self, path: str | Path) -> None:
        with open(path, "w", newline="", encoding="utf-8") as fh:
            writer = csv.writer(fh, lineterminator="\n")
            writer.writerow(["source", "frame_index", "reason"])
            writer.writerows(self.rows)


def detect_and_crop(
    frame: np.ndarray,
    detector: Detector,
    policy: str = "reject_multi",
    out_size: tuple[int, int] = (96, 96),
    frame_index: int = 0,
    report: RejectionReport | None = None,
    source: str = "",
) -> np.ndarray | None:
    """Crop the face of one frame, or return None when the frame is rejected.

    ``largest_only`` keeps the biggest box; ``reject_multi`` discards frames
    that show more than one face (bystanders, portraits in the background).
    """
    if policy not in ("largest_only", "reject_multi"):
        raise ValueError(f"unknown policy {policy!r}")
    if out_size[0] < 1 or out_size[1] < 1:
        raise ValueError("out_size must be positive")
    report = report if report is not None else RejectionReport()
    try:
        boxes = list(detector(frame))
    except Exception as exc:
        raise DetectorError(f"detector failed on frame {frame_index} of {source or 'stream'}: {exc}") from exc
    h, w = frame.shape[:2]
    for b in boxes:
        if not isinstance(b, FaceBox) or not b.fits(h, w):
            raise DetectorError(f"detector returned an invalid box on frame {frame_index}: {b!r}")
    report.frames_in += 1
    if not boxes:
        report.reject(source, frame_index, "no_face")
        return None
    if len(boxes) > 1 and policy == "reject_multi":
        report.reject(source, frame_index, "multiple_faces")
        return None
    box = max(boxes, key=lambda b: b.area)  # first one wins ties
    patch = frame[box.y : box.y + box.height, box.x : box.x + box.width]
    report.crops_out += 1
    return to_uint8(resize_bilinear(patch, out_size[0], out_size[1]))


# manifests ---------------------------------------------------------------------


def _parse_crop_name(stem: str) -> tuple[str, int]:
    m = _CROP_NAME.match(stem)
    if m:
        return m.group("video"), int(m.group("index"))
    return stem, 0


def build_manifest(crops_root: str | Path) -> Manifest:
    """Walk a crops tree into a path-sorted manifest.

    Plain files directly under the root (manifests, reports) are ignored;
    anything else that does not fit the layout is an error.
    """
    root = Path(crops_root)
    if not root.is_dir():
        raise ManifestError(f"crops root {root} does not exist")
    records = []
    for path in sorted(root.rglob("*")):
        rel = path.relative_to(root)
        if path.is_dir() or len(rel.parts) == 1 or rel.name.startswith("."):
            if path.is_dir() and len(rel.parts) > 3:
                raise ManifestError(f"unexpected directory {rel.as_posix()}")
            continue
        if len(rel.parts) != 4 or path.suffix.lower() not in IMAGE_SUFFIXES:
            raise ManifestError(f"cannot parse layout at {rel.as_posix()}")
        subject, label, attack, name = rel.parts
        if not subject.isdigit():
            raise ManifestError(f"subject directory must be an integer id: {rel.as_posix()}")
        video, index = _parse_crop_name(Path(name).stem)
        records.append(SampleRecord(rel.as_posix(), label, int(subject), attack, video, index))
    records.sort(key=lambda r: r.crop_path)
    return Manifest(records, root)


def write_manifest(manifest: Manifest, path: str | Path) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        for r in manifest.records:
            fh.write(r.to_json() + "\n")


def read_manifest(path: str | Path, root: str | Path | None = None) -> Manifest:
    """Parse a JSON Lines manifest; crop paths resolve against ``root`` (default: its folder)."""
    path = Path(path)
    try:
        text = path.read_bytes().decode("utf-8")
    except OSError as exc:
        raise ManifestError(f"cannot read manifest {path}: {exc}") from exc
    except UnicodeDecodeError as exc:
        raise ManifestError(f"manifest {path} is not UTF-8") from exc
    records = []
    for lineno, line in enumerate(text.split("\n"), 1):
        if not line.strip():
            continue
        try:
            obj = json.loads(line)
        except json.JSONDecodeError as exc:
            raise ManifestError(f"{path}:{lineno}: invalid JSON ({exc.msg})") from exc
        if not isinstance(obj, dict) or set(obj) != set(RECORD_KEYS):
            raise ManifestError(f"{path}:{lineno}: record must have exactly the keys {', '.join(RECORD_KEYS)}")
        try:
            records.append(SampleRecord(**obj))
        except ManifestError as exc:
            raise ManifestError(f"{path}:{lineno}: {exc}") from exc
    try:
        return Manifest(records, root if root is not None else path.parent)
    except ManifestError as exc:
        raise ManifestError(f"{path}: {exc}") from exc


def split_manifest(
    manifest: Manifest, holdout_subjects, train_fraction: float = 0.8, seed: int = 0
) -> dict[str, Manifest]:
    """Hold out whole subjects as the test set; split the rest by sample.

    The remainder is shuffled with ``seed`` and the first
    ``floor(train_fraction * R)`` records become the training set.
    """
    holdout = set(holdout_subjects)
    if not holdout:
        raise SplitError("at least one holdout subject is required")
    unknown = holdout - manifest.subjects
    if unknown:
        raise SplitError(f"unknown holdout subjects: {sorted(unknown)}")
    if not 0 < train_fraction <= 1:
        raise SplitError(f"train_fraction must be in (0, 1], got {train_fraction}")
    test = [r for r in manifest.records if r.subject_id in holdout]
    rest = [r for r in manifest.records if r.subject_id not in holdout]
    if not rest:
        raise SplitError("no records left after removing the holdout subjects")
    order = np.random.default_rng(seed).permutation(len(rest))
    shuffled = [rest[i] for i in order]
    n_train = math.floor(round(train_fraction * len(rest), 9))
    root = manifest.root
    return {
        "train": Manifest(shuffled[:n_train], root),
        "val": Manifest(shuffled[n_train:], root),
        "test": Manifest(test, root),
    }


def load_image(manifest: Manifest, record: SampleRecord, out_size: tuple[int, int]) -> np.ndarray:
    pixels = read_image(manifest.path_of(record))
    if pixels.shape[:2] != tuple(out_size):
        pixels = resize_bilinear(pixels, out_size[0], out_size[1])
    return np.asarray(pixels, dtype=np.float64) / 255.0


def load_batch(manifest: Manifest, indices: Sequence[int], out_size: tuple[int, int]) -> tuple[Tensor, Tensor]:
    """Decode, resize and scale records to [0, 1]; labels are 1 for real, 0 for fake."""
    n = len(manifest)
    for i in indices:
        if not 0 <= i < n:
            raise IndexError(f"record index {i} outside manifest of {n}")
    images = np.stack([load_image(manifest, manifest.records[i], out_size) for i in indices])
    labels = np.array([manifest.records[i].target for i in indices], dtype=np.float32)
    return Tensor(images), Tensor(labels)


def prepare_crops(
    source_root: str | Path,
    out_root: str | Path,
    detector: Detector | None = None,
    policy: str = "reject_multi",
    size: int = 96,
    stride: int = 1,
) -> tuple[Manifest, RejectionReport]:
    """Run the whole crop flow over ``<src>/<subject>/<label>/<attack>/<video>/<frames>``."""
    src, out = Path(source_root), Path(out_root)
    if not src.is_dir():
        raise FrameSourceError(f"source {src} does not exist")
    detector = detector or CenterBoxDetector()
    report = RejectionReport()
    videos = sorted(p for p in src.glob("*/*/*/*") if p.is_dir())
    if not videos:
        raise FrameSourceError(f"no video frame directories under {src}")
    for vdir in videos:
        subject, label, attack, video = vdir.relative_to(src).parts
        dest = out / subject / label / attack
        rel_source = vdir.relative_to(src).as_posix()
        for index, frame in extract_frames(vdir, stride):
            crop = detect_and_crop(frame, detector, policy, (size, size), index, report, rel_source)
            if crop is not None:
                dest.mkdir(parents=True, exist_ok=True)
                write_image(dest / f"{video}__f{index:06d}.ppm", crop)
    out.mkdir(parents=True, exist_ok=True)
    manifest = build_manifest(out)
    write_manifest(manifest, out / "manifest.jsonl")
    report.write_csv(out / "rejections.csv")
    return manifest, report
