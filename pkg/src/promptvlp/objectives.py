"""Pre-training objectives: ITC, ITM, MLM, IMC, embedding queues, temperature.

The two contrastive losses score each query against the matching queue plus
the in-batch embeddings, softmax at a learnable temperature, and take
cross-entropy against category-derived targets (uniform over all candidates
sharing the query's category). ITM classifies fused pairs as matched or not;
MLM predicts corrupted tokens through the fusion encoder.
"""

from __future__ import annotations

import logging
import random
from dataclasses import dataclass
from typing import Sequence

import torch
import torch.nn as nn
import torch.nn.functional as F

from .errors import ContractError
from .model import EncodedImage, VisionTextModel

logger = logging.getLogger(__name__)

TARGET_MODES = ("uniform", "binary-sum")

IGNORE_INDEX = -100

QUEUE_NORM_TOL = 1e-5


class TemperatureParam(nn.Module):
    """Learnable softmax temperature, stored as log(tau), clamped to [1e-3, 10]."""

    def __init__(self, init: float = 0.07, min_value: float = 1e-3, max_value: float = 10.0):
        super().__init__()
        if not min_value < init < max_value:
            raise ValueError(f"init {init} outside ({min_value}, {max_value})")
        self.min_value = min_value
        self.max_value = max_value
        self.log_tau = nn.Parameter(torch.tensor(float(init)).log())

    def value(self) -> torch.Tensor:
        bounds = torch.log(torch.tensor([self.min_value, self.max_value],
                                        dtype=self.log_tau.dtype,
                                        device=self.log_tau.device))
        return torch.exp(torch.clamp(self.log_tau, bounds[0], bounds[1]))


class EmbeddingQueue:
    """Fixed-capacity FIFO of unit-norm embeddings tagged with category ids."""

    def __init__(self, capacity: int, dim: int):
        if capacity < 1:
            raise ValueError("capacity must be >= 1")
        self.capacity = capacity
        self.dim = dim
        self.vectors = torch.zeros((0, dim))
        self.categories: list[str] = []

    def __len__(self) -> int:
        return self.vectors.shape[0]

    def enqueue(self, embeddings: torch.Tensor, categories: Sequence[str]) -> None:
        if embeddings.shape[0] != len(categories):
            raise ContractError("embeddings/categories length mismatch")
        if embeddings.shape[-1] != self.dim:
            raise ContractError(f"embedding dim {embeddings.shape[-1]} != queue dim {self.dim}")
        norms = embeddings.detach().norm(dim=-1)
        if bool(((norms - 1.0).abs() > QUEUE_NORM_TOL).any()):
            raise ContractError("queue entries must be unit-norm within 1e-5")
        incoming = embeddings.detach().clone()
        self.vectors = torch.cat([self.vectors.to(incoming.dtype), incoming], dim=0)
        self.categories = self.categories + list(categories)
        if len(self.categories) > self.capacity:
            overflow = len(self.categories) - self.capacity
            self.vectors = self.vectors[overflow:]
            self.categories = self.categories[overflow:]

    def snapshot(self) -> tuple[torch.Tensor, tuple[str, ...]]:
        return self.vectors, tuple(self.categories)

    def state_dict(self) -> dict:
        return {"capacity": self.capacity, "dim": self.dim,
                "vectors": self.vectors.clone(), "categories": list(self.categories)}

    @staticmethod
    def from_state_dict(state: dict) -> "EmbeddingQueue":
        q = EmbeddingQueue(state["capacity"], state["dim"])
        q.vectors = state["vectors"].clone()
        q.categories = list(state["categories"])
        return q


def enqueue(queue: EmbeddingQueue, embeddings: torch.Tensor,
            categories: Sequence[str]) -> EmbeddingQueue:
    """Append a batch to the queue (FIFO eviction beyond capacity)."""
    queue.enqueue(embeddings, categories)
    return queue


@dataclass
class QueuePair:
    image: EmbeddingQueue
    text: EmbeddingQueue

    def state_dict(self) -> dict:
        return {"image": self.image.state_dict(), "text": self.text.state_dict()}

    @staticmethod
    def from_state_dict(state: dict) -> "QueuePair":
        return QueuePair(
            image=EmbeddingQueue.from_state_dict(state["image"]),
            text=EmbeddingQueue.from_state_dict(state["text"]),
        )


def similarity(a: torch.Tensor, b: torch.Tensor) -> torch.Tensor:
    """Dot product of unit vectors; in [-1, 1]."""
    return (a * b).sum(-1)


def contrastive_targets(
    query_categories: Sequence[str],
    candidate_categories: Sequence[str],
    exclude: torch.Tensor | None = None,
    mode: str = "uniform",
    dtype: torch.dtype = torch.float32,
) -> tuple[torch.Tensor, torch.Tensor]:
    """Category-match target rows over candidate slots.

    Returns (targets (B, M), has_positive (B,)). Uniform mode normalizes each
    row to sum to 1 over matching slots; binary-sum leaves raw 0/1 entries.
    Rows with no positive are all-zero and flagged for exclusion.
    """
    if mode not in TARGET_MODES:
        raise ValueError(f"mode must be one of {TARGET_MODES}")
    b, m = len(query_categories), len(candidate_categories)
    match = torch.zeros((b, m), dtype=dtype)
    for i, qc in enumerate(query_categories):
        for j, cc in enumerate(candidate_categories):
            match[i, j] = 1.0 if qc == cc else 0.0
    if exclude is not None:
        match = match * (~exclude).to(dtype)
    counts = match.sum(dim=1)
    has_positive = counts > 0
    targets = match
    if mode == "uniform":
        targets = match / counts.clamp_min(1.0).unsqueeze(1)
    return targets, has_positive


def _direction_loss(
    queries: torch.Tensor,
    query_categories: Sequence[str],
    candidates: torch.Tensor,
    candidate_categories: Sequence[str],
    tau: torch.Tensor,
    exclude: torch.Tensor | None = None,
    target_mode: str = "uniform",
) -> tuple[torch.Tensor, int]:
    """Mean cross-entropy of softmax similarities for one retrieval direction.

    Queries without any positive candidate are excluded from the mean; the
    second return value counts the exclusions.
    """
    logits = queries @ candidates.t() / tau
    if exclude is not None:
        logits = logits.masked_fill(exclude, float("-inf"))
    log_p = F.log_softmax(logits, dim=1)
    targets, has_positive = contrastive_targets(
        query_categories, candidate_categories, exclude=exclude,
        mode=target_mode, dtype=queries.dtype,
    )
    targets = targets.to(queries.device)
    if exclude is not None:
        # Targets at excluded slots are exactly zero; blank their -inf log-probs
        # so 0 * -inf cannot poison the row sum.
        log_p = log_p.masked_fill(exclude, 0.0)
    per_query = -(targets * log_p).sum(dim=1)
    included = has_positive.to(queries.device)
    n_excluded = int((~included).sum())
    if n_excluded == len(query_categories):
        logger.warning("all queries excluded from a contrastive direction; loss set to 0")
        return queries.sum() * 0.0, n_excluded
    loss = per_query[included].mean()
    return loss, n_excluded


@dataclass
class ContrastiveResult:
    loss: torch.Tensor
    forward_loss: torch.Tensor
    backward_loss: torch.Tensor
    excluded_queries: int


def itc_loss(
    image_proj: torch.Tensor,
    text_proj: torch.Tensor,
    batch_categories: Sequence[str],
    queues: QueuePair,
    temperature: TemperatureParam,
    target_mode: str = "uniform",
    update_queues: bool = True,
) -> ContrastiveResult:
    """Image-text contrastive loss over queue plus in-batch candidates.

    Symmetric cross-entropy: images score against text candidates and texts
    against image candidates. Afterwards (by default) the batch embeddings are
    enqueued with their category tags.
    """
    tau = temperature.value()
    q_img_vecs, q_img_cats = queues.image.snapshot()
    q_txt_vecs, q_txt_cats = queues.text.snapshot()

    text_cands = torch.cat([q_txt_vecs.to(text_proj.dtype), text_proj], dim=0)
    text_cats = list(q_txt_cats) + list(batch_categories)
    image_cands = torch.cat([q_img_vecs.to(image_proj.dtype), image_proj], dim=0)
    image_cats = list(q_img_cats) + list(batch_categories)

    l_i2t, ex_i = _direction_loss(image_proj, batch_categories, text_cands, text_cats,
                                  tau, target_mode=target_mode)
    l_t2i, ex_t = _direction_loss(text_proj, batch_categories, image_cands, image_cats,
                                  tau, target_mode=target_mode)
    loss = 0.5 * (l_i2t + l_t2i)

    if update_queues:
        queues.image.enqueue(image_proj, batch_categories)
        queues.text.enqueue(text_proj, batch_categories)
    return ContrastiveResult(loss=loss, forward_loss=l_i2t, backward_loss=l_t2i,
                             excluded_queries=ex_i + ex_t)


def imc_loss(
    image_proj: torch.Tensor,
    text_proj: torch.Tensor,
    batch_categories: Sequence[str],
    queues: QueuePair,
    temperature: TemperatureParam,
    target_mode: str = "uniform",
) -> ContrastiveResult:
    """Intra-modal contrastive loss (image-image and text-text).

    Candidates are the same-modality queue plus the in-batch embeddings with
    each query's own slot excluded. Queries whose category is absent from the
    remaining candidates drop out of the mean. Queues are not updated here.
    """
    tau = temperature.value()
    b = image_proj.shape[0]

    def one_side(batch_vecs: torch.Tensor, queue: EmbeddingQueue):
        q_vecs, q_cats = queue.snapshot()
        cands = torch.cat([q_vecs.to(batch_vecs.dtype), batch_vecs], dim=0)
        cats = list(q_cats) + list(batch_categories)
        exclude = torch.zeros((b, len(cats)), dtype=torch.bool, device=batch_vecs.device)
        offset = len(q_cats)
        for i in range(b):
            exclude[i, offset + i] = True
        return _direction_loss(batch_vecs, batch_categories, cands, cats, tau,
                               exclude=exclude, target_mode=target_mode)

    l_ii, ex_i = one_side(image_proj, queues.image)
    l_tt, ex_t = one_side(text_proj, queues.text)
    return ContrastiveResult(loss=0.5 * (l_ii + l_tt), forward_loss=l_ii,
                             backward_loss=l_tt, excluded_queries=ex_i + ex_t)


# ---------------------------------------------------------------------------
# ITM
# ---------------------------------------------------------------------------


def itm_loss(fused_cls_batch: torch.Tensor, labels: torch.Tensor,
             matching_head: nn.Module) -> torch.Tensor:
    """Binary matched/unmatched cross-entropy on fused CLS states."""
    logits = matching_head(fused_cls_batch)
    labels = labels.to(dtype=torch.long, device=logits.device)
    if len(torch.unique(labels)) < 2:
        logger.info("ITM batch contains a single class")
    return F.cross_entropy(logits, labels)


def itm_match_probability(logits: torch.Tensor) -> torch.Tensor:
    return F.softmax(logits, dim=-1)[..., 1]


@dataclass
class ItmSelection:
    """Index pairs for the ITM batch: positives first, then constructed negatives."""

    image_indices: list[int]
    text_indices: list[int]
    labels: list[int]
    skipped: int


def sample_itm_negatives(
    batch_categories: Sequence[str],
    rng: random.Random,
    strategy: str = "uniform",
    itc_similarities: torch.Tensor | None = None,
) -> ItmSelection:
    """One wrong-text and one wrong-image negative per positive pair.

    Negatives always cross categories. ``hard`` picks the category-disjoint
    candidate with the highest contrastive similarity and requires the
    in-batch image x text similarity matrix.
    """
    if strategy not in ("uniform", "hard"):
        raise ValueError(f"strategy must be 'uniform' or 'hard', got {strategy!r}")
    if strategy == "hard" and itc_similarities is None:
        raise ValueError("hard negative mining requires itc_similarities")
    b = len(batch_categories)
    if len(set(batch_categories)) < 2:
        logger.warning("single-category batch: no ITM negatives constructed")
    image_indices = list(range(b))
    text_indices = list(range(b))
    labels = [1] * b
    skipped = 0

    def pick(anchor: int, scores_for_anchor) -> int | None:
        candidates = [j for j in range(b) if batch_categories[j] != batch_categories[anchor]]
        if not candidates:
            return None
        if strategy == "uniform":
            return rng.choice(candidates)
        best = max(candidates, key=lambda j: float(scores_for_anchor[j]))
        return best

    for i in range(b):
        j = pick(i, itc_similarities[i] if itc_similarities is not None else None)
        if j is None:
            skipped += 1
        else:
            image_indices.append(i)
            text_indices.append(j)
            labels.append(0)
    for i in range(b):
        j = pick(i, itc_similarities[:, i] if itc_similarities is not None else None)
        if j is None:
            skipped += 1
        else:
            image_indices.append(j)
            text_indices.append(i)
            labels.append(0)
    return ItmSelection(image_indices, text_indices, labels, skipped)


# ---------------------------------------------------------------------------
# MLM
# ---------------------------------------------------------------------------


def mask_tokens(
    token_ids: torch.Tensor,
    attention_mask: torch.Tensor,
    special_ids: Sequence[int],
    mask_token_id: int,
    vocab_size: int,
    mask_rate: float = 0.15,
    generator: torch.Generator | None = None,
) -> tuple[torch.Tensor, torch.Tensor]:
    """BERT-style corruption: select positions at mask_rate, then 80/10/10.

    Returns (corrupted ids, labels) where unselected labels are IGNORE_INDEX.
    Special tokens and padding are never selected.
    """
    if not 0.0 < mask_rate < 1.0:
        raise ValueError("mask_rate must be in (0, 1)")
    token_ids = token_ids.clone()
    special = torch.zeros_like(token_ids, dtype=torch.bool)
    for sid in special_ids:
        special |= token_ids == sid
    maskable = (attention_mask == 1) & ~special

    u = torch.rand(token_ids.shape, generator=generator)
    selected = (u < mask_rate) & maskable
    labels = torch.where(selected, token_ids, torch.full_like(token_ids, IGNORE_INDEX))

    action = torch.rand(token_ids.shape, generator=generator)
    use_mask = selected & (action < 0.8)
    use_random = selected & (action >= 0.8) & (action < 0.9)
    random_tokens = torch.randint(0, vocab_size, token_ids.shape, generator=generator)
    corrupted = token_ids.clone()
    corrupted[use_mask] = mask_token_id
    corrupted[use_random] = random_tokens[use_random]
    return corrupted, labels


def masked_lm_loss(logits: torch.Tensor, labels: torch.Tensor) -> torch.Tensor:
    """Cross-entropy over the vocabulary at selected positions only."""
    n_masked = int((labels != IGNORE_INDEX).sum())
    if n_masked == 0:
        logger.warning("no maskable tokens in batch; MLM loss is 0")
        return logits.sum() * 0.0
    vocab = logits.shape[-1]
    return F.cross_entropy(logits.reshape(-1, vocab), labels.reshape(-1),
                           ignore_index=IGNORE_INDEX)


def mlm_loss(
    model: VisionTextModel,
    token_ids: torch.Tensor,
    attention_mask: torch.Tensor,
    encoded_image: EncodedImage,
    special_ids: Sequence[int],
    mask_token_id: int,
    mask_rate: float = 0.15,
    generator: torch.Generator | None = None,
) -> tuple[torch.Tensor, int]:
    """Corrupt, re-encode, fuse with the image, and score masked positions."""
    corrupted, labels = mask_tokens(
        token_ids, attention_mask, special_ids, mask_token_id,
        model.config.vocab_size, mask_rate=mask_rate, generator=generator,
    )
    encoded = model.encode_text(corrupted, attention_mask)
    fused = model.fuse(encoded_image, encoded)
    logits = model.mlm_logits(fused)
    return masked_lm_loss(logits, labels), int((labels != IGNORE_INDEX).sum())


def total_loss(itc: torch.Tensor, itm: torch.Tensor, mlm: torch.Tensor,
               imc: torch.Tensor) -> torch.Tensor:
    """Equal-weight sum of the four objectives."""
    return itc + itm + mlm + imc
