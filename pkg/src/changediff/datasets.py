"""Toy change-captioning scenes and the LEVIR-CC on-disk layout.

On-disk layout (shared by the toy export and the real dataset)::

    root/
      LevirCCcaptions.json
      images/{train,val,test}/A/<filename>   # before
      images/{train,val,test}/B/<filename>   # after

``LevirCCcaptions.json`` is ``{"images": [record, ...]}`` with records::

    {"filepath": "train", "filename": "train_000001.png", "imgid": 0,
     "split": "train", "changeflag": 1, "sentids": [0, ...],
     "sentences": [{"raw": " a road is built .", "tokens": [...],
                    "imgid": 0, "sentid": 0}, ...]}

Captions are re-tokenised from ``raw`` with :func:`textspace.tokenize`.
"""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .textspace import Vocabulary, build_vocab, tokenize

log = logging.getLogger(__name__)

SPLITS = ("train", "val", "test")
LEVIR_SPLIT_SIZES = {"train": 6815, "val": 1333, "test": 1929}
CAPTION_FILE = "LevirCCcaptions.json"

CHANGE_TYPES = ("building", "road", "vegetation")
LOCATIONS = ("top left", "top right", "bottom left", "bottom right")

UNCHANGED_CAPTION = "the scene is the same as before"
TEMPLATES = {
    "building": "a building appears in the {where} of the bare land",
    "road": "a {where} road is built across the bare land",
    "vegetation": "the trees in the {where} are removed",
}

# Colour ranges are chosen so every change colour differs from every
# background pixel in at least one channel; the diff mask is then exact.
_BACKGROUND = np.array([150, 120, 80])
_BACKGROUND_JITTER = 15
_BUILDING = np.array([175, 175, 175])
_ROAD = np.array([60, 60, 60])
_TREES = np.array([40, 130, 45])


class DataError(RuntimeError):
    """Missing or malformed dataset files."""


@dataclass
class CaptionedPair:
    pair_id: str
    captions: list[list[str]]
    change: str = "unknown"
    before: np.ndarray | None = field(default=None, repr=False)
    after: np.ndarray | None = field(default=None, repr=False)
    before_path: Path | None = None
    after_path: Path | None = None
    mask: np.ndarray | None = field(default=None, repr=False)

    def __post_init__(self):
        if not self.captions or any(len(c) == 0 for c in self.captions):
            raise DataError(f"pair {self.pair_id}: every pair needs non-empty captions")
        if self.before is not None and self.after is not None and self.before.shape != self.after.shape:
            raise DataError(f"pair {self.pair_id}: before/after shapes differ")

    def images(self) -> tuple[np.ndarray, np.ndarray]:
        if self.before is not None:
            return self.before, self.after
        from PIL import Image

        before = np.asarray(Image.open(self.before_path).convert("RGB"))
        after = np.asarray(Image.open(self.after_path).convert("RGB"))
        if before.shape != after.shape:
            raise DataError(f"pair {self.pair_id}: before/after shapes differ")
        return before, after


@dataclass
class DatasetSplit:
    name: str
    pairs: list[CaptionedPair]

    def __len__(self) -> int:
        return len(self.pairs)

    def captions(self) -> list[list[str]]:
        return [c for p in self.pairs for c in p.captions]


# -- toy generator -----------------------------------------------------------


def _background(rng: np.random.Generator, size: int) -> np.ndarray:
    coarse = rng.integers(-8, 9, size=(size // 8, size // 8, 1))
    coarse = np.kron(coarse, np.ones((8, 8, 1), dtype=np.int64))
    fine = rng.integers(-7, 8, size=(size, size, 3))
    img = _BACKGROUND + np.clip(coarse + fine, -_BACKGROUND_JITTER, _BACKGROUND_JITTER)
    return img.astype(np.uint8)


def _quadrant_box(rng, where: str, size: int, side: int) -> tuple[slice, slice]:
    half = size // 2
    row0 = 0 if where.startswith("top") else half
    col0 = 0 if where.endswith("left") else half
    r = row0 + int(rng.integers(1, half - side))
    c = col0 + int(rng.integers(1, half - side))
    return slice(r, r + side), slice(c, c + side)


def render_pair(rng: np.random.Generator, change: str | None, size: int = 32):
    """Render one scene pair.  Returns ``(before, after, mask, caption)``."""
    before = _background(rng, size)
    after = before.copy()
    mask = np.zeros((size, size), dtype=bool)
    if change is None:
        return before, after, mask, UNCHANGED_CAPTION

    if change == "road":
        where = ("horizontal", "vertical")[int(rng.integers(2))]
        width = 4
        pos = int(rng.integers(4, size - 4 - width))
        region = (slice(pos, pos + width), slice(None)) if where == "horizontal" else (slice(None), slice(pos, pos + width))
        mask[region] = True
        after[mask] = _ROAD
    else:
        where = LOCATIONS[int(rng.integers(len(LOCATIONS)))]
        side = int(rng.integers(7, 10))
        mask[_quadrant_box(rng, where, size, side)] = True
        if change == "building":
            after[mask] = _BUILDING
        elif change == "vegetation":
            before[mask] = _TREES
        else:
            raise ValueError(f"unknown change type {change!r}")
    return before, after, mask, TEMPLATES[change].format(where=where)


def generate_toy_dataset(
    sizes: Sequence[int] = (64, 16, 16),
    seed: int = 0,
    change_ratio: float = 0.5,
    image_size: int = 32,
    change_types: Sequence[str] = CHANGE_TYPES,
) -> dict[str, DatasetSplit]:
    """Deterministic train/val/test splits of rendered scene pairs."""
    if len(sizes) != 3 or any(int(s) < 1 for s in sizes):
        raise ValueError(f"need three positive split sizes, got {sizes}")
    if not 0.0 <= change_ratio <= 1.0:
        raise ValueError(f"change_ratio must lie in [0, 1], got {change_ratio}")
    if image_size % 16 or image_size < 16:
        raise ValueError("image_size must be a multiple of 16")
    streams = np.random.SeedSequence(seed).spawn(3)
    splits = {}
    for name, n, stream in zip(SPLITS, sizes, streams):
        rng = np.random.default_rng(stream)
        pairs = []
        for i in range(int(n)):
            changed = rng.random() < change_ratio
            change = change_types[int(rng.integers(len(change_types)))] if changed else None
            before, after, mask, caption = render_pair(rng, change, image_size)
            pairs.append(
                CaptionedPair(
                    pair_id=f"{name}_{i:06d}",
                    captions=[tokenize(caption)],
                    change=change or "none",
                    before=before,
                    after=after,
                    mask=mask,
                )
            )
        splits[name] = DatasetSplit(name, pairs)
    return splits


# -- LEVIR-CC layout -----------------------------------------------------------


def export_levir_layout(splits: dict[str, DatasetSplit], root) -> Path:
    """Write splits as PNG pairs plus a caption index in the LEVIR-CC schema."""
    from PIL import Image

    root = Path(root)
    records = []
    sentid = 0
    for name in SPLITS:
        if name not in splits:
            continue
        (root / "images" / name / "A").mkdir(parents=True, exist_ok=True)
        (root / "images" / name / "B").mkdir(parents=True, exist_ok=True)
        for pair in splits[name].pairs:
            filename = f"{pair.pair_id}.png"
            before, after = pair.images()
            Image.fromarray(before).save(root / "images" / name / "A" / filename)
            Image.fromarray(after).save(root / "images" / name / "B" / filename)
            imgid = len(records)
            sentences = []
            for tokens in pair.captions:
                sentences.append({"raw": " " + " ".join(tokens) + " .", "tokens": list(tokens), "imgid": imgid, "sentid": sentid})
                sentid += 1
            records.append({
                "filepath": name,
                "filename": filename,
                "imgid": imgid,
                "split": name,
                "changeflag": int(pair.change != "none"),
                "sentids": [s["sentid"] for s in sentences],
                "sentences": sentences,
            })
    (root / CAPTION_FILE).write_text(json.dumps({"images": records}, indent=1))
    return root


def read_caption_index(path) -> dict[str, list[list[str]]]:
    """``{pair_id: [tokens, ...]}`` from a caption index file, in file order."""
    path = Path(path)
    if not path.is_file():
        raise DataError(f"caption index not found: {path}")
    records = _records(path)
    return {Path(r["filename"]).stem: [tokenize(s["raw"]) for s in r["sentences"]] for r in records}


def _records(path: Path) -> list[dict]:
    try:
        data = json.loads(path.read_text())
        records = data["images"]
    except (json.JSONDecodeError, KeyError, TypeError) as exc:
        raise DataError(f"malformed caption index {path}: {exc}") from None
    for r in records:
        if not isinstance(r, dict) or not {"filename", "split", "sentences"} <= r.keys():
            raise DataError(f"malformed caption record in {path}: {r!r:.200}")
        if not all(isinstance(s, dict) and "raw" in s for s in r["sentences"]):
            raise DataError(f"caption record {r['filename']} has sentences without 'raw'")
    return records


def load_levir_cc(root) -> tuple[dict[str, DatasetSplit], Vocabulary]:
    """Load splits from the LEVIR-CC layout; the vocabulary covers every train token."""
    root = Path(root)
    index = root / CAPTION_FILE
    if not root.is_dir() or not index.is_file():
        raise DataError(f"no dataset at {root}: expected {CAPTION_FILE} and images/")
    splits = {name: DatasetSplit(name, []) for name in SPLITS}
    off_count = []
    for r in _records(index):
        split = r["split"]
        if split not in splits:
            raise DataError(f"record {r['filename']} has unknown split {split!r}")
        folder = root / "images" / r.get("filepath", split)
        a, b = folder / "A" / r["filename"], folder / "B" / r["filename"]
        if not a.is_file() or not b.is_file():
            raise DataError(f"missing image files for {r['filename']} under {folder}")
        captions = [tokenize(s["raw"]) for s in r["sentences"]]
        if len(captions) != 5:
            off_count.append(r["filename"])
        flag = r.get("changeflag")
        change = "unknown" if flag is None else ("changed" if flag else "none")
        splits[split].pairs.append(
            CaptionedPair(Path(r["filename"]).stem, captions, change, before_path=a, after_path=b)
        )
    if off_count:
        log.warning("%d pairs do not have 5 captions (e.g. %s); keeping them", len(off_count), off_count[0])
    sizes = {name: len(s) for name, s in splits.items()}
    if sizes == LEVIR_SPLIT_SIZES:
        log.info("official LEVIR-CC split sizes detected")
    if not splits["train"].pairs:
        raise DataError(f"no training pairs in {index}")
    vocab = build_vocab(splits["train"].captions())
    return splits, vocab
