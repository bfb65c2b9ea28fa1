"""Image/description corpus: category join index, pair sampling, ablation variants.

Positive training pairs join an image and a description of the same category;
negatives come from different categories. ``shuffle_pairs`` destroys that
association for the shuffled-source ablation while keeping both item sets
intact.
"""

from __future__ import annotations

import json
import logging
import math
import random
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .errors import ManifestError, SamplingError
from .promptgen import DescriptionRecord, stable_hash

logger = logging.getLogger(__name__)

MANIFEST_VERSION = 1

SPLITS = ("pretrain", "eval")


@dataclass(frozen=True)
class ImageRecord:
    """An image with a category label; either a file URI or a procedural seed."""

    image_id: str
    category_id: str
    split: str = "pretrain"
    source_uri: str | None = None
    synthetic_seed: int | None = None

    def __post_init__(self):
        if self.split not in SPLITS:
            raise ValueError(f"split must be one of {SPLITS}, got {self.split!r}")
        if self.source_uri is None and self.synthetic_seed is None:
            raise ValueError(f"image {self.image_id!r} needs a source_uri or a synthetic_seed")

    def to_dict(self) -> dict:
        d = {"image_id": self.image_id, "category_id": self.category_id, "split": self.split}
        if self.source_uri is not None:
            d["source_uri"] = self.source_uri
        if self.synthetic_seed is not None:
            d["synthetic_seed"] = self.synthetic_seed
        return d

    @staticmethod
    def from_dict(d: dict) -> "ImageRecord":
        return ImageRecord(
            image_id=d["image_id"],
            category_id=d["category_id"],
            split=d.get("split", "pretrain"),
            source_uri=d.get("source_uri"),
            synthetic_seed=d.get("synthetic_seed"),
        )


@dataclass
class CategoryBucket:
    image_ids: list[str] = field(default_factory=list)
    description_ids: list[str] = field(default_factory=list)

    @property
    def usable(self) -> bool:
        return bool(self.image_ids) and bool(self.description_ids)


@dataclass(frozen=True)
class Triple:
    image_id: str
    description_id: str
    category_id: str


@dataclass
class PairBatch:
    triples: list[Triple]
    seed: int

    def __len__(self) -> int:
        return len(self.triples)


@dataclass
class CategoryIndex:
    """Join structure: category -> (image ids, description ids), plus record maps."""

    images: dict[str, ImageRecord]
    descriptions: dict[str, DescriptionRecord]
    buckets: dict[str, CategoryBucket]
    categories_without_images: tuple[str, ...] = ()
    categories_without_descriptions: tuple[str, ...] = ()
    shuffled: bool = False
    shuffle_seed: int | None = None

    def category_ids(self) -> list[str]:
        return sorted(self.buckets)

    def usable_categories(self, prompt_filter: frozenset[str] | None = None) -> list[str]:
        """Categories with at least one image and one (filter-eligible) description."""
        out = []
        for cat in self.category_ids():
            bucket = self.buckets[cat]
            if not bucket.image_ids:
                continue
            if prompt_filter is None:
                if bucket.description_ids:
                    out.append(cat)
            else:
                if any(self.descriptions[d].prompt_id in prompt_filter
                       for d in bucket.description_ids):
                    out.append(cat)
        return out

    def eligible_descriptions(self, category_id: str,
                              prompt_filter: frozenset[str] | None = None) -> list[str]:
        ids = self.buckets[category_id].description_ids
        if prompt_filter is None:
            return list(ids)
        return [d for d in ids if self.descriptions[d].prompt_id in prompt_filter]


def build_manifest(
    images: Sequence[ImageRecord],
    descriptions: Sequence[DescriptionRecord],
    categories: Iterable[str] | None = None,
) -> CategoryIndex:
    """Join images and descriptions by category.

    With an explicit ``categories`` taxonomy, any record referencing an
    unknown category is a manifest error; without one, the taxonomy is the
    union of the referenced ids. Categories missing one side are reported on
    the index and excluded from pairing.
    """
    if not images:
        raise ManifestError("image list is empty")
    if not descriptions:
        raise ManifestError("description list is empty")

    image_map: dict[str, ImageRecord] = {}
    for rec in images:
        if rec.image_id in image_map:
            raise ManifestError(f"duplicate image_id {rec.image_id!r}")
        image_map[rec.image_id] = rec
    desc_map: dict[str, DescriptionRecord] = {}
    for rec in descriptions:
        if rec.description_id in desc_map:
            raise ManifestError(f"duplicate description_id {rec.description_id!r}")
        desc_map[rec.description_id] = rec

    if categories is not None:
        known = set(categories)
        for rec in images:
            if rec.category_id not in known:
                raise ManifestError(
                    f"image {rec.image_id!r} references unknown category {rec.category_id!r}"
                )
        for rec in descriptions:
            if rec.category_id not in known:
                raise ManifestError(
                    f"description {rec.description_id!r} references unknown category "
                    f"{rec.category_id!r}"
                )
    else:
        known = {r.category_id for r in images} | {r.category_id for r in descriptions}

    buckets = {cat: CategoryBucket() for cat in sorted(known)}
    for rec in sorted(image_map.values(), key=lambda r: r.image_id):
        buckets[rec.category_id].image_ids.append(rec.image_id)
    for rec in sorted(desc_map.values(), key=lambda r: r.description_id):
        buckets[rec.category_id].description_ids.append(rec.description_id)

    no_images = tuple(c for c in sorted(known) if not buckets[c].image_ids)
    no_descriptions = tuple(c for c in sorted(known) if not buckets[c].description_ids)
    if no_images:
        logger.info("categories without images: %s", ", ".join(no_images))
    if no_descriptions:
        logger.info("categories without descriptions: %s", ", ".join(no_descriptions))

    return CategoryIndex(
        images=image_map,
        descriptions=desc_map,
        buckets=buckets,
        categories_without_images=no_images,
        categories_without_descriptions=no_descriptions,
    )


def sample_batch(
    index: CategoryIndex,
    batch_size: int,
    seed: int,
    prompt_filter: Iterable[str] | None = None,
    allow_repeated_categories: bool = False,
) -> PairBatch:
    """Draw (image, description) pairs: uniform over categories, then uniform within.

    Deterministic given (index, batch_size, seed, prompt_filter). By default a
    batch never repeats a category, so every other in-batch pair is a valid
    negative; pass ``allow_repeated_categories=True`` to relax.
    """
    if batch_size < 2:
        raise SamplingError("batch_size must be >= 2 so in-batch negatives exist")
    pf = frozenset(prompt_filter) if prompt_filter is not None else None
    usable = index.usable_categories(prompt_filter=pf)
    if pf is not None and not usable and index.usable_categories():
        raise SamplingError(
            f"prompt_filter {sorted(pf)} eliminates every description of every category"
        )
    if len(usable) < 2:
        raise SamplingError(
            f"need at least 2 usable categories for in-batch negatives, have {len(usable)}"
        )
    if not allow_repeated_categories and batch_size > len(usable):
        raise SamplingError(
            f"batch_size {batch_size} exceeds {len(usable)} usable categories; "
            "pass allow_repeated_categories=True to relax"
        )

    rng = random.Random(seed)
    if allow_repeated_categories:
        cats = [rng.choice(usable) for _ in range(batch_size)]
    else:
        cats = rng.sample(usable, batch_size)

    triples = []
    for cat in cats:
        image_id = rng.choice(index.buckets[cat].image_ids)
        description_id = rng.choice(index.eligible_descriptions(cat, pf))
        triples.append(Triple(image_id, description_id, cat))
    return PairBatch(triples=triples, seed=seed)


def shuffle_pairs(index: CategoryIndex, seed: int) -> CategoryIndex:
    """Destroy the image-description category association.

    All description ids are pooled (in canonical category order), uniformly
    permuted, and dealt back into the same per-category slot counts. The image
    set and the description multiset are unchanged. An identity permutation is
    re-drawn; a single-category index is returned unchanged with a warning.
    """
    cats = index.category_ids()
    if len(cats) <= 1:
        logger.warning("shuffle_pairs over %d category is a no-op", len(cats))
        return replace(index, shuffled=True, shuffle_seed=seed)

    pooled = [d for cat in cats for d in index.buckets[cat].description_ids]
    permuted = list(pooled)
    used_seed = seed
    for attempt in range(100):
        rng = random.Random(used_seed)
        permuted = list(pooled)
        rng.shuffle(permuted)
        if permuted != pooled:
            break
        used_seed += 1
    else:
        raise SamplingError("could not draw a non-identity permutation")

    buckets: dict[str, CategoryBucket] = {}
    cursor = 0
    for cat in cats:
        n = len(index.buckets[cat].description_ids)
        buckets[cat] = CategoryBucket(
            image_ids=list(index.buckets[cat].image_ids),
            description_ids=permuted[cursor:cursor + n],
        )
        cursor += n

    return CategoryIndex(
        images=dict(index.images),
        descriptions=dict(index.descriptions),
        buckets=buckets,
        categories_without_images=index.categories_without_images,
        categories_without_descriptions=index.categories_without_descriptions,
        shuffled=True,
        shuffle_seed=used_seed,
    )


def cross_category_fraction(index: CategoryIndex) -> float:
    """Fraction of description slots whose record's true category differs."""
    total = 0
    crossed = 0
    for cat in index.category_ids():
        for did in index.buckets[cat].description_ids:
            total += 1
            if index.descriptions[did].category_id != cat:
                crossed += 1
    return crossed / total if total else 0.0


# ---------------------------------------------------------------------------
# Splits
# ---------------------------------------------------------------------------

SPLIT_POLICIES = ("category-holdout", "instance-holdout")


def assign_splits(
    images: Sequence[ImageRecord],
    descriptions: Sequence[DescriptionRecord],
    policy: str = "category-holdout",
    eval_fraction: float = 0.25,
    seed: int = 0,
) -> tuple[list[ImageRecord], dict[str, str]]:
    """Assign pretrain/eval splits; returns re-split images and a description split map.

    category-holdout moves whole categories (images and their descriptions)
    to eval; instance-holdout holds out a fraction of images and descriptions
    inside every category, keeping at least one of each per side.
    """
    if policy not in SPLIT_POLICIES:
        raise ValueError(f"policy must be one of {SPLIT_POLICIES}, got {policy!r}")
    if not 0.0 < eval_fraction < 1.0:
        raise ValueError("eval_fraction must be in (0, 1)")
    rng = random.Random(seed)
    cats = sorted({r.category_id for r in images})
    desc_by_cat: dict[str, list[DescriptionRecord]] = {}
    for rec in sorted(descriptions, key=lambda r: r.description_id):
        desc_by_cat.setdefault(rec.category_id, []).append(rec)

    out_images: list[ImageRecord] = []
    desc_splits: dict[str, str] = {r.description_id: "pretrain" for r in descriptions}

    if policy == "category-holdout":
        n_eval = max(1, math.floor(eval_fraction * len(cats)))
        if n_eval >= len(cats):
            raise ValueError("eval_fraction leaves no pretrain categories")
        eval_cats = set(rng.sample(cats, n_eval))
        for rec in images:
            split = "eval" if rec.category_id in eval_cats else "pretrain"
            out_images.append(replace(rec, split=split))
        for cat in eval_cats:
            for drec in desc_by_cat.get(cat, ()):
                desc_splits[drec.description_id] = "eval"
    else:
        img_by_cat: dict[str, list[ImageRecord]] = {}
        for rec in sorted(images, key=lambda r: r.image_id):
            img_by_cat.setdefault(rec.category_id, []).append(rec)
        for cat in cats:
            cat_images = img_by_cat[cat]
            n_eval = min(len(cat_images) - 1, max(1, math.floor(eval_fraction * len(cat_images))))
            eval_ids = set(r.image_id for r in rng.sample(cat_images, n_eval)) if n_eval > 0 else set()
            for rec in cat_images:
                out_images.append(replace(rec, split="eval" if rec.image_id in eval_ids else "pretrain"))
            # Stratify description holdout by prompt type so every prompt keeps
            # at least one pretrain text per category (prompt-filtered runs stay
            # well-posed); singleton groups fall back to unstratified holdout.
            cat_descs = desc_by_cat.get(cat, [])
            by_prompt: dict[str, list[DescriptionRecord]] = {}
            for drec in cat_descs:
                by_prompt.setdefault(drec.prompt_id, []).append(drec)
            held_any = False
            for pid in sorted(by_prompt):
                group = by_prompt[pid]
                if len(group) < 2:
                    continue
                n_eval_d = min(len(group) - 1, max(1, math.floor(eval_fraction * len(group))))
                for drec in rng.sample(group, n_eval_d):
                    desc_splits[drec.description_id] = "eval"
                held_any = True
            if not held_any and len(cat_descs) >= 2:
                n_eval_d = min(len(cat_descs) - 1,
                               max(1, math.floor(eval_fraction * len(cat_descs))))
                for drec in rng.sample(cat_descs, n_eval_d):
                    desc_splits[drec.description_id] = "eval"
    return out_images, desc_splits


def split_records(
    images: Sequence[ImageRecord],
    descriptions: Sequence[DescriptionRecord],
    desc_splits: dict[str, str],
    split: str,
) -> tuple[list[ImageRecord], list[DescriptionRecord]]:
    imgs = [r for r in images if r.split == split]
    descs = [r for r in descriptions if desc_splits.get(r.description_id, "pretrain") == split]
    return imgs, descs


# ---------------------------------------------------------------------------
# Synthetic images
# ---------------------------------------------------------------------------


def category_texture_params(category_id: str) -> dict:
    """Deterministic per-category texture parameters (palette, orientation, frequency)."""
    h = stable_hash("texture", category_id)
    palette = np.array([
        0.15 + 0.7 * (((h >> (8 * i)) & 0xFF) / 255.0) for i in range(3)
    ])
    angle = ((h >> 24) % 8) * (np.pi / 8.0)
    freq = 2.0 + ((h >> 32) % 4)
    phase = (((h >> 40) & 0xFF) / 255.0) * 2 * np.pi
    return {"palette": palette, "angle": angle, "freq": freq, "phase": phase}


def render_synthetic_image(record: ImageRecord, image_size: int) -> np.ndarray:
    """Render a class-conditional texture, (H, W, 3) float32 in [-1, 1].

    The category fixes palette/orientation/frequency; the instance seed only
    jitters phase and adds low-amplitude noise, so categories stay separable.
    """
    params = category_texture_params(record.category_id)
    rng = np.random.default_rng(np.uint64(record.synthetic_seed or 0))
    phase = params["phase"] + rng.uniform(0, 2 * np.pi)
    yy, xx = np.meshgrid(np.arange(image_size), np.arange(image_size), indexing="ij")
    coord = (xx * np.cos(params["angle"]) + yy * np.sin(params["angle"])) / image_size
    wave = 0.5 + 0.5 * np.sin(2 * np.pi * params["freq"] * coord + phase)
    img = params["palette"][None, None, :] * (0.55 + 0.45 * wave[:, :, None])
    img = img + rng.normal(0.0, 0.03, size=img.shape)
    img = np.clip(img, 0.0, 1.0)
    return (img * 2.0 - 1.0).astype(np.float32)


def load_image_array(record: ImageRecord, image_size: int) -> np.ndarray:
    """Materialize an image record as (H, W, 3) float32 in [-1, 1]."""
    if record.synthetic_seed is not None:
        return render_synthetic_image(record, image_size)
    from PIL import Image

    with Image.open(record.source_uri) as im:
        im = im.convert("RGB").resize((image_size, image_size))
        arr = np.asarray(im, dtype=np.float32) / 255.0
    return (arr * 2.0 - 1.0).astype(np.float32)


def load_image_records(path: str | Path) -> list[ImageRecord]:
    """Read image records from a JSONL file (one record object per line)."""
    records = []
    with Path(path).open("r", encoding="utf-8") as fh:
        for line in fh:
            line = line.strip()
            if line:
                records.append(ImageRecord.from_dict(json.loads(line)))
    if not records:
        raise ManifestError(f"no image records in {path}")
    return records


def make_synthetic_images(
    category_ids: Sequence[str],
    images_per_category: int,
    seed: int = 0,
) -> list[ImageRecord]:
    """Procedural image records, ``images_per_category`` for each category."""
    records = []
    for cat in category_ids:
        for i in range(images_per_category):
            records.append(
                ImageRecord(
                    image_id=f"{cat}-img{i:04d}",
                    category_id=cat,
                    synthetic_seed=stable_hash("image", str(seed), cat, str(i)) % (2 ** 32),
                )
            )
    return records


# ---------------------------------------------------------------------------
# Manifest file
# ---------------------------------------------------------------------------


def save_manifest(
    path: str | Path,
    images: Sequence[ImageRecord],
    descriptions: Sequence[DescriptionRecord],
    desc_splits: dict[str, str] | None = None,
    extra_header: dict | None = None,
) -> None:
    """Write a line-delimited manifest: header line, then image/description rows."""
    desc_splits = desc_splits or {}
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    splits = {
        "images": {s: sum(1 for r in images if r.split == s) for s in SPLITS},
        "descriptions": {
            s: sum(1 for r in descriptions
                   if desc_splits.get(r.description_id, "pretrain") == s)
            for s in SPLITS
        },
    }
    header = {
        "kind": "header",
        "version": MANIFEST_VERSION,
        "counts": {"images": len(images), "descriptions": len(descriptions)},
        "splits": splits,
    }
    if extra_header:
        header.update(extra_header)
    with path.open("w", encoding="utf-8") as fh:
        fh.write(json.dumps(header, sort_keys=True) + "\n")
        for rec in images:
            row = {"kind": "image"}
            row.update(rec.to_dict())
            fh.write(json.dumps(row, sort_keys=True) + "\n")
        for rec in descriptions:
            row = {"kind": "description",
                   "split": desc_splits.get(rec.description_id, "pretrain")}
            row.update(json.loads(rec.to_json()))
            fh.write(json.dumps(row, sort_keys=True) + "\n")


@dataclass
class ManifestData:
    header: dict
    images: list[ImageRecord]
    descriptions: list[DescriptionRecord]
    desc_splits: dict[str, str]


def load_manifest(path: str | Path) -> ManifestData:
    path = Path(path)
    if not path.exists():
        raise ManifestError(f"manifest not found: {path}")
    header: dict | None = None
    images: list[ImageRecord] = []
    descriptions: list[DescriptionRecord] = []
    desc_splits: dict[str, str] = {}
    with path.open("r", encoding="utf-8") as fh:
        for line in fh:
            line = line.strip()
            if not line:
                continue
            row = json.loads(line)
            kind = row.get("kind")
            if kind == "header":
                header = row
            elif kind == "image":
                images.append(ImageRecord.from_dict(row))
            elif kind == "description":
                rec = DescriptionRecord(
                    description_id=row["description_id"],
                    category_id=row["category_id"],
                    prompt_id=row["prompt_id"],
                    surface_label_used=row["surface_label_used"],
                    response_index=int(row["response_index"]),
                    text=row["text"],
                )
                descriptions.append(rec)
                desc_splits[rec.description_id] = row.get("split", "pretrain")
            else:
                raise ManifestError(f"unknown manifest row kind {kind!r}")
    if header is None:
        raise ManifestError("manifest has no header line")
    return ManifestData(header=header, images=images, descriptions=descriptions,
                        desc_splits=desc_splits)
