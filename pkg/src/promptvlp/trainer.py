"""Deterministic pre-training loop over the four objectives.

One master seed fans out into named substreams (sampler, mask, init,
negatives, shuffle), each re-derived per step, so runs replay exactly and
resume from a checkpoint continues the identical trace.
"""

from __future__ import annotations

import copy
import hashlib
import json
import logging
import math
import random
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Mapping, Sequence

import numpy as np
import torch

from .corpus import (
    CategoryIndex,
    ImageRecord,
    PairBatch,
    build_manifest,
    load_image_array,
    sample_batch,
    shuffle_pairs,
    split_records,
)
from .errors import TrainingDivergedError
from .model import (
    EncodedImage,
    EncodedText,
    ModelConfig,
    VisionTextModel,
    load_checkpoint,
    normalize_embeddings,
    save_checkpoint,
)
from .objectives import (
    EmbeddingQueue,
    QueuePair,
    TemperatureParam,
    imc_loss,
    itc_loss,
    itm_loss,
    mask_tokens,
    masked_lm_loss,
    mlm_loss,
    sample_itm_negatives,
    total_loss,
)
from .promptgen import DescriptionRecord
from .tokenizer import Tokenizer

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class TrainConfig:
    steps: int
    batch_size: int = 8
    learning_rate: float = 1e-4
    weight_decay: float = 0.02
    warmup_steps: int | None = None  # None -> 10% of steps
    seed: int = 0
    queue_size: int = 256
    mask_rate: float = 0.15
    checkpoint_interval: int = 0  # 0 -> final checkpoint only
    prompt_filter: tuple[str, ...] | None = None
    shuffled: bool = False
    itm_strategy: str = "uniform"
    target_mode: str = "uniform"
    allow_repeated_categories: bool = False
    ema_momentum: float | None = None

    def __post_init__(self):
        if self.steps < 1:
            raise ValueError("steps must be >= 1")
        if self.batch_size < 2:
            raise ValueError("batch_size must be >= 2")
        if not 0.0 < self.mask_rate < 1.0:
            raise ValueError("mask_rate must be in (0, 1)")
        if self.warmup_steps is not None and self.warmup_steps > self.steps:
            raise ValueError("warmup_steps must be <= steps")
        if self.prompt_filter is not None:
            object.__setattr__(self, "prompt_filter", tuple(self.prompt_filter))
        if self.ema_momentum is not None and not 0.0 < self.ema_momentum < 1.0:
            raise ValueError("ema_momentum must be in (0, 1)")

    @property
    def effective_warmup(self) -> int:
        if self.warmup_steps is not None:
            return self.warmup_steps
        return max(1, round(0.1 * self.steps))

    def to_dict(self) -> dict:
        d = asdict(self)
        if d["prompt_filter"] is not None:
            d["prompt_filter"] = list(d["prompt_filter"])
        return d

    @staticmethod
    def from_dict(d: dict) -> "TrainConfig":
        d = dict(d)
        if d.get("prompt_filter") is not None:
            d["prompt_filter"] = tuple(d["prompt_filter"])
        return TrainConfig(**d)


def derive_seed(master: int, *streams) -> int:
    """Stable substream seed from the master seed and stream labels."""
    raw = "\x1f".join([str(master)] + [str(s) for s in streams])
    digest = hashlib.sha256(raw.encode("utf-8")).digest()
    return int.from_bytes(digest[:8], "big") % (2 ** 63)


def lr_at(step: int, config: TrainConfig) -> float:
    """Linear warmup to learning_rate, then cosine decay to zero."""
    warmup = config.effective_warmup
    if step < warmup:
        return config.learning_rate * (step + 1) / warmup
    remaining = max(1, config.steps - warmup)
    progress = (step - warmup) / remaining
    return config.learning_rate * 0.5 * (1.0 + math.cos(math.pi * min(progress, 1.0)))


@dataclass
class TrainerState:
    config: TrainConfig
    model_config: ModelConfig
    model: VisionTextModel
    temperature: TemperatureParam
    queues: QueuePair
    optimizer: torch.optim.Optimizer
    tokenizer: Tokenizer
    step: int = 0
    ema_model: VisionTextModel | None = None
    last_checkpoint: Path | None = None


def _embedding(model: VisionTextModel, cls: torch.Tensor, head: str) -> torch.Tensor:
    if model.config.similarity == "raw":
        return normalize_embeddings(cls)
    return model.project_cls(cls, head)


def init_state(config: TrainConfig, model_config: ModelConfig,
               tokenizer: Tokenizer) -> TrainerState:
    torch.manual_seed(derive_seed(config.seed, "init"))
    model = VisionTextModel(model_config)
    temperature = TemperatureParam()
    dim = model_config.embedding_dim
    queues = QueuePair(
        image=EmbeddingQueue(config.queue_size, dim),
        text=EmbeddingQueue(config.queue_size, dim),
    )
    params = list(model.parameters()) + list(temperature.parameters())
    optimizer = torch.optim.AdamW(params, lr=config.learning_rate,
                                  weight_decay=config.weight_decay)
    ema_model = None
    if config.ema_momentum is not None:
        ema_model = copy.deepcopy(model)
        for p in ema_model.parameters():
            p.requires_grad_(False)
    return TrainerState(
        config=config, model_config=model_config, model=model,
        temperature=temperature, queues=queues, optimizer=optimizer,
        tokenizer=tokenizer, ema_model=ema_model,
    )


def _update_ema(online: VisionTextModel, ema: VisionTextModel, momentum: float) -> None:
    with torch.no_grad():
        for p_online, p_ema in zip(online.parameters(), ema.parameters()):
            p_ema.mul_(momentum).add_(p_online, alpha=1.0 - momentum)


@dataclass
class StepBatch:
    pixels: torch.Tensor      # (B, H, W, C)
    token_ids: torch.Tensor   # (B, L)
    mask: torch.Tensor        # (B, L)
    categories: list[str]
    image_ids: list[str]
    description_ids: list[str]


def materialize_batch(
    pair_batch: PairBatch,
    pixel_cache: Mapping[str, np.ndarray],
    token_cache: Mapping[str, tuple[list[int], list[int]]],
) -> StepBatch:
    pixels = torch.from_numpy(np.stack([pixel_cache[t.image_id] for t in pair_batch.triples]))
    ids = torch.tensor([token_cache[t.description_id][0] for t in pair_batch.triples],
                       dtype=torch.long)
    mask = torch.tensor([token_cache[t.description_id][1] for t in pair_batch.triples],
                        dtype=torch.long)
    return StepBatch(
        pixels=pixels, token_ids=ids, mask=mask,
        categories=[t.category_id for t in pair_batch.triples],
        image_ids=[t.image_id for t in pair_batch.triples],
        description_ids=[t.description_id for t in pair_batch.triples],
    )


def train_step(state: TrainerState, batch: StepBatch) -> dict:
    """One optimizer update on the total loss; queues advance afterwards."""
    config = state.config
    model = state.model
    lr = lr_at(state.step, config)
    for group in state.optimizer.param_groups:
        group["lr"] = lr
    model.train()

    enc_img = model.encode_image(batch.pixels)
    enc_txt = model.encode_text(batch.token_ids, batch.mask)
    img_emb = _embedding(model, enc_img.cls, "image")
    txt_emb = _embedding(model, enc_txt.cls, "text")
    cats = batch.categories

    # IMC first: both contrastive losses see the same pre-step queue snapshot,
    # then ITC enqueues the batch.
    imc = imc_loss(img_emb, txt_emb, cats, state.queues, state.temperature,
                   target_mode=config.target_mode)
    use_online_queue = state.ema_model is None
    itc = itc_loss(img_emb, txt_emb, cats, state.queues, state.temperature,
                   target_mode=config.target_mode, update_queues=use_online_queue)
    if not use_online_queue:
        with torch.no_grad():
            ema_img = _embedding(state.ema_model, state.ema_model.encode_image(batch.pixels).cls,
                                 "image")
            ema_txt = _embedding(state.ema_model,
                                 state.ema_model.encode_text(batch.token_ids, batch.mask).cls,
                                 "text")
        state.queues.image.enqueue(ema_img, cats)
        state.queues.text.enqueue(ema_txt, cats)

    neg_rng = random.Random(derive_seed(config.seed, "negatives", state.step))
    sims = (img_emb @ txt_emb.t()).detach()
    selection = sample_itm_negatives(cats, neg_rng, strategy=config.itm_strategy,
                                     itc_similarities=sims)
    idx_i = torch.tensor(selection.image_indices, dtype=torch.long)
    idx_t = torch.tensor(selection.text_indices, dtype=torch.long)
    fused = model.fuse(
        EncodedImage(cls=enc_img.cls[idx_i], tokens=enc_img.tokens[idx_i]),
        EncodedText(cls=enc_txt.cls[idx_t], tokens=enc_txt.tokens[idx_t],
                    mask=enc_txt.mask[idx_t]),
    )
    itm = itm_loss(fused.cls, torch.tensor(selection.labels), model.itm_head)

    mask_gen = torch.Generator()
    mask_gen.manual_seed(derive_seed(config.seed, "mask", state.step))
    mlm, n_masked = mlm_loss(
        model, batch.token_ids, batch.mask, enc_img,
        special_ids=state.tokenizer.special_ids,
        mask_token_id=state.tokenizer.mask_id,
        mask_rate=config.mask_rate, generator=mask_gen,
    )

    total = total_loss(itc.loss, itm, mlm, imc.loss)
    if not bool(torch.isfinite(total)):
        raise TrainingDivergedError(
            f"non-finite loss at step {state.step}", step=state.step,
            last_checkpoint=state.last_checkpoint,
        )

    state.optimizer.zero_grad(set_to_none=True)
    total.backward()
    state.optimizer.step()
    if state.ema_model is not None:
        _update_ema(model, state.ema_model, config.ema_momentum)
    state.step += 1

    return {
        "step": state.step,
        "loss_itc": float(itc.loss.detach()),
        "loss_itm": float(itm.detach()),
        "loss_mlm": float(mlm.detach()),
        "loss_imc": float(imc.loss.detach()),
        "loss_total": float(total.detach()),
        "tau": float(state.temperature.value().detach()),
        "lr": lr,
        "queue_image": len(state.queues.image),
        "queue_text": len(state.queues.text),
        "itm_skipped": selection.skipped,
        "mlm_masked": n_masked,
    }


# ---------------------------------------------------------------------------
# Full runs
# ---------------------------------------------------------------------------


@dataclass
class PretrainResult:
    checkpoint_path: Path
    metrics: list[dict]
    state: TrainerState
    shuffle_seed: int | None = None


def _checkpoint_extra(state: TrainerState, shuffle_seed: int | None) -> dict:
    return {
        "step": state.step,
        "train_config": state.config.to_dict(),
        "optimizer_state": state.optimizer.state_dict(),
        "temperature_state": state.temperature.state_dict(),
        "queues": state.queues.state_dict(),
        "tokenizer_vocab": list(state.tokenizer.tokens),
        "shuffle_seed": shuffle_seed,
    }


def save_trainer_checkpoint(state: TrainerState, path: str | Path,
                            shuffle_seed: int | None = None) -> Path:
    path = Path(path)
    save_checkpoint(path, state.model, extra=_checkpoint_extra(state, shuffle_seed))
    state.last_checkpoint = path
    return path


def load_trainer_state(path: str | Path) -> tuple[TrainerState, int | None]:
    """Rebuild a full trainer state (model, optimizer, queues, step) from disk."""
    model, extra = load_checkpoint(path)
    config = TrainConfig.from_dict(extra["train_config"])
    tokenizer = Tokenizer(extra["tokenizer_vocab"])
    temperature = TemperatureParam()
    temperature.load_state_dict(extra["temperature_state"])
    queues = QueuePair.from_state_dict(extra["queues"])
    params = list(model.parameters()) + list(temperature.parameters())
    optimizer = torch.optim.AdamW(params, lr=config.learning_rate,
                                  weight_decay=config.weight_decay)
    optimizer.load_state_dict(extra["optimizer_state"])
    state = TrainerState(
        config=config, model_config=model.config, model=model,
        temperature=temperature, queues=queues, optimizer=optimizer,
        tokenizer=tokenizer, step=extra["step"], last_checkpoint=Path(path),
    )
    return state, extra.get("shuffle_seed")


def build_training_index(
    config: TrainConfig,
    images: Sequence[ImageRecord],
    descriptions: Sequence[DescriptionRecord],
    desc_splits: Mapping[str, str] | None = None,
) -> CategoryIndex:
    """Pretrain-split index, shuffled when the ablation flag is set."""
    splits = dict(desc_splits) if desc_splits else {}
    train_images, train_descs = split_records(images, descriptions, splits, "pretrain")
    index = build_manifest(train_images, train_descs)
    if config.shuffled:
        index = shuffle_pairs(index, derive_seed(config.seed, "shuffle") % (2 ** 31))
        logger.info("training on shuffled pairs (permutation seed %s)", index.shuffle_seed)
    return index


def run_pretraining(
    config: TrainConfig,
    model_config: ModelConfig,
    images: Sequence[ImageRecord],
    descriptions: Sequence[DescriptionRecord],
    out_dir: str | Path,
    desc_splits: Mapping[str, str] | None = None,
    tokenizer: Tokenizer | None = None,
    resume_from: str | Path | None = None,
    max_vocab: int = 4096,
) -> PretrainResult:
    """Pre-train for ``config.steps`` steps and leave a reloadable checkpoint.

    The tokenizer vocabulary is learned from the full description corpus so
    evaluation texts stay in-vocabulary; ``model_config.vocab_size`` is treated
    as an upper bound and tightened to the learned size.
    """
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    metrics_path = out_dir / "metrics.jsonl"

    if resume_from is not None:
        state, shuffle_seed = load_trainer_state(resume_from)
        if state.config != config:
            logger.warning("resume config differs from checkpoint config; using checkpoint's")
        config = state.config
        model_config = state.model_config
        mode = "a"
    else:
        if tokenizer is None:
            texts = [r.text for r in sorted(descriptions, key=lambda r: r.description_id)]
            tokenizer = Tokenizer.build(texts, max_vocab=min(max_vocab, model_config.vocab_size))
        if tokenizer.vocab_size != model_config.vocab_size:
            model_config = ModelConfig.from_dict(
                {**model_config.to_dict(), "vocab_size": tokenizer.vocab_size}
            )
        state = init_state(config, model_config, tokenizer)
        mode = "w"

    index = build_training_index(config, images, descriptions, desc_splits)
    if resume_from is None:
        shuffle_seed = index.shuffle_seed

    pixel_cache = {
        image_id: load_image_array(index.images[image_id], state.model_config.image_size)
        for image_id in sorted(index.images)
    }
    token_cache = {
        did: state.tokenizer.encode(index.descriptions[did].text,
                                    state.model_config.max_text_len)
        for did in sorted(index.descriptions)
    }

    metrics: list[dict] = []
    with metrics_path.open(mode, encoding="utf-8") as metrics_file:
        while state.step < config.steps:
            pair_batch = sample_batch(
                index, config.batch_size,
                derive_seed(config.seed, "sampler", state.step),
                prompt_filter=config.prompt_filter,
                allow_repeated_categories=config.allow_repeated_categories,
            )
            batch = materialize_batch(pair_batch, pixel_cache, token_cache)
            row = train_step(state, batch)
            metrics.append(row)
            metrics_file.write(json.dumps(row, sort_keys=True) + "\n")
            if (config.checkpoint_interval > 0
                    and state.step % config.checkpoint_interval == 0
                    and state.step < config.steps):
                save_trainer_checkpoint(
                    state, out_dir / f"checkpoint-{state.step:06d}.pt", shuffle_seed
                )

    final_path = save_trainer_checkpoint(state, out_dir / "checkpoint.pt", shuffle_seed)
    return PretrainResult(checkpoint_path=final_path, metrics=metrics, state=state,
                          shuffle_seed=shuffle_seed)


# ---------------------------------------------------------------------------
# Gradient checking
# ---------------------------------------------------------------------------


@dataclass
class CoordinateFailure:
    loss_name: str
    parameter: str
    index: int
    analytic: float
    numeric: float
    rel_error: float


@dataclass
class GradientCheckReport:
    tolerance: float
    n_coords: int
    max_rel_error: dict[str, float] = field(default_factory=dict)
    failures: list[CoordinateFailure] = field(default_factory=list)

    @property
    def passed(self) -> bool:
        return not self.failures

    def summary(self) -> str:
        lines = [f"gradient check (n_coords={self.n_coords}, tol={self.tolerance:g})"]
        for name in sorted(self.max_rel_error):
            status = "ok"
            if any(f.loss_name == name for f in self.failures):
                status = "FAIL"
            lines.append(f"  {name}: max rel err {self.max_rel_error[name]:.3e} [{status}]")
        for f in self.failures:
            lines.append(
                f"  FAIL {f.loss_name} at {f.parameter}[{f.index}]: "
                f"analytic {f.analytic:.6e} vs numeric {f.numeric:.6e} "
                f"(rel {f.rel_error:.3e})"
            )
        return "\n".join(lines)


def _relative_error(a: float, n: float, noise_floor: float) -> float:
    # Central differences on an O(1) loss cannot resolve gradients below
    # ~eps/h in absolute terms; the floor keeps such coordinates from
    # registering spurious relative errors while factor-level bugs still show.
    return abs(a - n) / max(abs(a), abs(n), noise_floor)


def gradient_check(
    loss_fns: Mapping[str, Callable[[], torch.Tensor]],
    named_parameters: Mapping[str, torch.Tensor],
    n_coords: int = 100,
    tolerance: float = 1e-5,
    seed: int = 0,
    step_scale: float = 1e-5,
    noise_floor: float = 1e-6,
) -> GradientCheckReport:
    """Compare autograd gradients against central finite differences.

    Each loss closure must be a deterministic function of the parameters.
    ``n_coords`` coordinates are sampled across all parameters per loss.
    """
    report = GradientCheckReport(tolerance=tolerance, n_coords=n_coords)
    if n_coords == 0:
        logger.warning("gradient_check called with n_coords=0; nothing verified")
        for name in loss_fns:
            report.max_rel_error[name] = 0.0
        return report

    params = [(name, p) for name, p in named_parameters.items() if p.requires_grad]
    sizes = [p.numel() for _, p in params]
    total = sum(sizes)
    rng = np.random.default_rng(seed)

    for loss_name, fn in loss_fns.items():
        for _, p in params:
            p.grad = None
        loss = fn()
        loss.backward()
        grads = {name: (p.grad.detach().clone() if p.grad is not None
                        else torch.zeros_like(p))
                 for name, p in params}

        # Roundoff in (f+ - f-)/2h scales with eps * |f| / h (times a safety
        # factor for accumulation); gradients below that over the tolerance
        # cannot be resolved relatively.
        eps = torch.finfo(loss.dtype).eps
        fd_floor = eps * max(1.0, abs(float(loss.detach()))) / (step_scale * tolerance)
        floor = max(noise_floor, fd_floor)

        flat_choices = rng.choice(total, size=min(n_coords, total), replace=False)
        max_err = 0.0
        for flat in sorted(int(c) for c in flat_choices):
            cursor = flat
            pname, tensor = None, None
            for (name, p), size in zip(params, sizes):
                if cursor < size:
                    pname, tensor = name, p
                    break
                cursor -= size
            view = tensor.data.view(-1)
            original = view[cursor].item()
            h = step_scale * max(1.0, abs(original))
            with torch.no_grad():
                view[cursor] = original + h
                f_plus = float(fn().detach())
                view[cursor] = original - h
                f_minus = float(fn().detach())
                view[cursor] = original
            numeric = (f_plus - f_minus) / (2.0 * h)
            analytic = float(grads[pname].view(-1)[cursor])
            err = _relative_error(analytic, numeric, floor)
            max_err = max(max_err, err)
            if err > tolerance:
                report.failures.append(CoordinateFailure(
                    loss_name=loss_name, parameter=pname, index=cursor,
                    analytic=analytic, numeric=numeric, rel_error=err,
                ))
        report.max_rel_error[loss_name] = max_err
    return report


def build_loss_closures(
    model: VisionTextModel,
    temperature: TemperatureParam,
    queues: QueuePair,
    batch: StepBatch,
    special_ids: Sequence[int],
    mask_token_id: int,
    mask_rate: float = 0.15,
    seed: int = 0,
    target_mode: str = "uniform",
) -> dict[str, Callable[[], torch.Tensor]]:
    """Deterministic per-loss closures over a frozen batch, for gradient checks.

    Queue snapshots, the ITM pair selection, and the MLM corruption pattern are
    fixed up front; each call re-runs the forward pass from raw inputs.
    """
    frozen_queues = QueuePair.from_state_dict(queues.state_dict())
    cats = batch.categories

    def embeddings():
        enc_img = model.encode_image(batch.pixels)
        enc_txt = model.encode_text(batch.token_ids, batch.mask)
        return enc_img, enc_txt

    def itc_fn():
        enc_img, enc_txt = embeddings()
        return itc_loss(_embedding(model, enc_img.cls, "image"),
                        _embedding(model, enc_txt.cls, "text"),
                        cats, frozen_queues, temperature,
                        target_mode=target_mode, update_queues=False).loss

    def imc_fn():
        enc_img, enc_txt = embeddings()
        return imc_loss(_embedding(model, enc_img.cls, "image"),
                        _embedding(model, enc_txt.cls, "text"),
                        cats, frozen_queues, temperature, target_mode=target_mode).loss

    selection = sample_itm_negatives(cats, random.Random(derive_seed(seed, "negatives")))
    idx_i = torch.tensor(selection.image_indices, dtype=torch.long)
    idx_t = torch.tensor(selection.text_indices, dtype=torch.long)
    labels = torch.tensor(selection.labels, dtype=torch.long)

    def itm_fn():
        enc_img, enc_txt = embeddings()
        fused = model.fuse(
            EncodedImage(cls=enc_img.cls[idx_i], tokens=enc_img.tokens[idx_i]),
            EncodedText(cls=enc_txt.cls[idx_t], tokens=enc_txt.tokens[idx_t],
                        mask=enc_txt.mask[idx_t]),
        )
        return itm_loss(fused.cls, labels, model.itm_head)

    gen = torch.Generator()
    gen.manual_seed(derive_seed(seed, "mask"))
    corrupted, mlm_labels = mask_tokens(
        batch.token_ids, batch.mask, special_ids, mask_token_id,
        model.config.vocab_size, mask_rate=mask_rate, generator=gen,
    )

    def mlm_fn():
        enc_img = model.encode_image(batch.pixels)
        enc = model.encode_text(corrupted, batch.mask)
        fused = model.fuse(enc_img, enc)
        return masked_lm_loss(model.mlm_logits(fused), mlm_labels)

    def total_fn():
        return total_loss(itc_fn(), itm_fn(), mlm_fn(), imc_fn())

    return {"itc": itc_fn, "itm": itm_fn, "mlm": mlm_fn, "imc": imc_fn, "total": total_fn}
