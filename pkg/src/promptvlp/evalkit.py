"""Cross-modal retrieval evaluation: ranking, optional reranking, R@K reports.

Rankings sort gallery items by descending dot-product similarity with
deterministic ascending-id tie breaking. Reports carry R@1/5/10 percentages
and their mean (AvgR) for each direction.
"""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np
import torch

from .corpus import ImageRecord, load_image_array
from .errors import ContractError, ReportError
from .promptgen import DescriptionRecord
from .tokenizer import Tokenizer

logger = logging.getLogger(__name__)

DEFAULT_KS = (1, 5, 10)

RELEVANCE_MODES = ("instance", "category")


@dataclass
class RelevanceMap:
    """Per-query relevant counterpart ids; every query must have at least one."""

    mode: str
    relevant: dict[str, frozenset[str]]

    def __post_init__(self):
        if self.mode not in RELEVANCE_MODES:
            raise ReportError(f"mode must be one of {RELEVANCE_MODES}, got {self.mode!r}")
        self.relevant = {q: frozenset(r) for q, r in self.relevant.items()}

    def validate(self, query_ids: Sequence[str], gallery_ids: Sequence[str]) -> None:
        gallery = set(gallery_ids)
        if not query_ids:
            raise ReportError("query set is empty")
        for q in query_ids:
            rel = self.relevant.get(q)
            if not rel:
                raise ReportError(f"query {q!r} has no relevant items")
            missing = rel - gallery
            if missing:
                raise ReportError(f"query {q!r} references ids outside the gallery: "
                                  f"{sorted(missing)[:3]}")


def category_relevance(
    query_categories: Mapping[str, str],
    gallery_categories: Mapping[str, str],
) -> RelevanceMap:
    """Relevant = every gallery item sharing the query's category."""
    by_cat: dict[str, set[str]] = {}
    for gid, cat in gallery_categories.items():
        by_cat.setdefault(cat, set()).add(gid)
    relevant = {qid: frozenset(by_cat.get(cat, ())) for qid, cat in query_categories.items()}
    return RelevanceMap(mode="category", relevant=relevant)


def rank_candidates(
    query_embeddings,
    gallery_embeddings,
    gallery_ids: Sequence[str],
) -> list[list[str]]:
    """Per-query gallery ids in descending similarity, ties by ascending id."""
    q = np.asarray(query_embeddings, dtype=np.float64)
    g = np.asarray(gallery_embeddings, dtype=np.float64)
    if q.ndim != 2 or g.ndim != 2:
        raise ContractError("embeddings must be 2-D (n, dim)")
    if g.shape[0] == 0:
        raise ContractError("gallery is empty")
    if g.shape[0] != len(gallery_ids):
        raise ContractError("gallery_ids length does not match gallery embeddings")
    if q.shape[1] != g.shape[1]:
        raise ContractError(f"query dim {q.shape[1]} != gallery dim {g.shape[1]}")
    id_order = sorted(range(len(gallery_ids)), key=lambda i: gallery_ids[i])
    ordered_ids = [gallery_ids[i] for i in id_order]
    sims = q @ g[id_order].T
    ranked = np.argsort(-sims, axis=1, kind="stable")
    return [[ordered_ids[j] for j in row] for row in ranked]


def rerank_topk(
    ranked_ids: Sequence[str],
    k: int,
    scores: Mapping[str, float],
) -> list[str]:
    """Reorder the first k entries by descending score; the tail is untouched."""
    if k < 0:
        raise ValueError("k must be >= 0")
    if k <= 1:
        return list(ranked_ids)
    head = list(ranked_ids[:k])
    head.sort(key=lambda cid: (-float(scores[cid]), cid))
    return head + list(ranked_ids[k:])


def recall_at_k(
    ranked: Sequence[Sequence[str]],
    query_ids: Sequence[str],
    relevance: RelevanceMap,
    k: int,
) -> float:
    """100 x fraction of queries with at least one relevant item in the top k."""
    if k < 1:
        raise ValueError("k must be >= 1")
    if not ranked or not query_ids:
        raise ReportError("query set is empty")
    if len(ranked) != len(query_ids):
        raise ReportError("ranked lists and query_ids differ in length")
    hits = 0
    for qid, row in zip(query_ids, ranked):
        rel = relevance.relevant.get(qid)
        if rel is None:
            raise ReportError(f"query {qid!r} missing from the relevance map")
        if any(c in rel for c in row[:k]):
            hits += 1
    return 100.0 * hits / len(query_ids)


def avg_recall(r1: float, r5: float, r10: float) -> float:
    """Arithmetic mean of R@1, R@5, R@10."""
    return (r1 + r5 + r10) / 3.0


@dataclass
class RetrievalReport:
    direction: str  # "I2T" or "T2I"
    mode: str
    r_at: dict[int, float]
    avg_r: float
    query_count: int
    rerank_k: int = 0
    config_hash: str | None = None

    def __post_init__(self):
        ks = sorted(self.r_at)
        values = [self.r_at[k] for k in ks]
        if any(b < a for a, b in zip(values, values[1:])):
            raise ReportError(f"R@k must be non-decreasing in k, got {self.r_at}")
        if not all(0.0 <= v <= 100.0 for v in values):
            raise ReportError("R@k values must be percentages")

    def to_dict(self) -> dict:
        return {
            "direction": self.direction,
            "mode": self.mode,
            "k_grid": sorted(self.r_at),
            "recall": {str(k): self.r_at[k] for k in sorted(self.r_at)},
            "avg_recall": self.avg_r,
            "query_count": self.query_count,
            "rerank_k": self.rerank_k,
            "config_hash": self.config_hash,
        }

    def save(self, path: str | Path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n",
                              encoding="utf-8")


def overall_avg_recall(i2t: RetrievalReport, t2i: RetrievalReport) -> float:
    return (i2t.avg_r + t2i.avg_r) / 2.0


def evaluate_rankings(
    ranked: Sequence[Sequence[str]],
    query_ids: Sequence[str],
    relevance: RelevanceMap,
    direction: str,
    ks: Sequence[int] = DEFAULT_KS,
    rerank_k: int = 0,
    config_hash: str | None = None,
) -> RetrievalReport:
    r_at = {k: recall_at_k(ranked, query_ids, relevance, k) for k in ks}
    return RetrievalReport(
        direction=direction,
        mode=relevance.mode,
        r_at=r_at,
        avg_r=avg_recall(*[r_at[k] for k in sorted(r_at)]) if set(ks) == set(DEFAULT_KS)
        else float(np.mean([r_at[k] for k in sorted(r_at)])),
        query_count=len(query_ids),
        rerank_k=rerank_k,
        config_hash=config_hash,
    )


@dataclass
class EvalItems:
    """Embedded gallery/query items for one modality."""

    ids: list[str]
    categories: dict[str, str]
    embeddings: np.ndarray


def embed_images(model, records: Sequence[ImageRecord], batch_size: int = 32) -> EvalItems:
    model.eval()
    size = model.config.image_size
    chunks = []
    with torch.no_grad():
        for start in range(0, len(records), batch_size):
            batch = records[start:start + batch_size]
            pixels = np.stack([load_image_array(r, size) for r in batch])
            chunks.append(model.image_embedding(pixels).cpu().numpy())
    return EvalItems(
        ids=[r.image_id for r in records],
        categories={r.image_id: r.category_id for r in records},
        embeddings=np.concatenate(chunks, axis=0),
    )


def embed_texts(model, records: Sequence[DescriptionRecord], tokenizer: Tokenizer,
                batch_size: int = 64) -> EvalItems:
    model.eval()
    max_len = model.config.max_text_len
    encoded = [tokenizer.encode(r.text, max_len) for r in records]
    chunks = []
    with torch.no_grad():
        for start in range(0, len(records), batch_size):
            ids = torch.tensor([e[0] for e in encoded[start:start + batch_size]])
            mask = torch.tensor([e[1] for e in encoded[start:start + batch_size]])
            chunks.append(model.text_embedding(ids, mask).cpu().numpy())
    return EvalItems(
        ids=[r.description_id for r in records],
        categories={r.description_id: r.category_id for r in records},
        embeddings=np.concatenate(chunks, axis=0),
    )


def _itm_rerank_scores(model, tokenizer, image_records, text_records,
                       query_id: str, candidate_ids: Sequence[str],
                       direction: str) -> dict[str, float]:
    """Matched-probability of each (query, candidate) pair from the fusion head."""
    from .objectives import itm_match_probability

    images_by_id = {r.image_id: r for r in image_records}
    texts_by_id = {r.description_id: r for r in text_records}
    size = model.config.image_size
    max_len = model.config.max_text_len
    scores: dict[str, float] = {}
    with torch.no_grad():
        for cid in candidate_ids:
            img = images_by_id[query_id if direction == "I2T" else cid]
            txt = texts_by_id[cid if direction == "I2T" else query_id]
            enc_img = model.encode_image(load_image_array(img, size))
            ids, mask = tokenizer.encode(txt.text, max_len)
            enc_txt = model.encode_text(torch.tensor([ids]), torch.tensor([mask]))
            fused = model.fuse(enc_img, enc_txt)
            prob = itm_match_probability(model.itm_logits(fused.cls))
            scores[cid] = float(prob[0])
    return scores


def evaluate_model(
    model,
    image_records: Sequence[ImageRecord],
    text_records: Sequence[DescriptionRecord],
    tokenizer: Tokenizer,
    mode: str = "category",
    relevance_i2t: RelevanceMap | None = None,
    relevance_t2i: RelevanceMap | None = None,
    rerank_k: int = 0,
    config_hash: str | None = None,
    ks: Sequence[int] = DEFAULT_KS,
) -> tuple[RetrievalReport, RetrievalReport]:
    """Evaluate both retrieval directions over the same image/text galleries."""
    if not image_records or not text_records:
        raise ReportError("evaluation split needs both images and texts")
    images = embed_images(model, image_records)
    texts = embed_texts(model, text_records, tokenizer)

    if mode == "category":
        relevance_i2t = category_relevance(images.categories, texts.categories)
        relevance_t2i = category_relevance(texts.categories, images.categories)
    elif relevance_i2t is None or relevance_t2i is None:
        raise ReportError("instance mode requires explicit relevance maps")

    relevance_i2t.validate(images.ids, texts.ids)
    relevance_t2i.validate(texts.ids, images.ids)

    ranked_i2t = rank_candidates(images.embeddings, texts.embeddings, texts.ids)
    ranked_t2i = rank_candidates(texts.embeddings, images.embeddings, images.ids)

    if rerank_k > 0:
        ranked_i2t = [
            rerank_topk(row, rerank_k,
                        _itm_rerank_scores(model, tokenizer, image_records, text_records,
                                           qid, row[:rerank_k], "I2T"))
            for qid, row in zip(images.ids, ranked_i2t)
        ]
        ranked_t2i = [
            rerank_topk(row, rerank_k,
                        _itm_rerank_scores(model, tokenizer, image_records, text_records,
                                           qid, row[:rerank_k], "T2I"))
            for qid, row in zip(texts.ids, ranked_t2i)
        ]

    report_i2t = evaluate_rankings(ranked_i2t, images.ids, relevance_i2t, "I2T",
                                   ks=ks, rerank_k=rerank_k, config_hash=config_hash)
    report_t2i = evaluate_rankings(ranked_t2i, texts.ids, relevance_t2i, "T2I",
                                   ks=ks, rerank_k=rerank_k, config_hash=config_hash)
    return report_i2t, report_t2i
