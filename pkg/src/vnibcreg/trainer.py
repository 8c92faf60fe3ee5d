"""Self-supervised pretraining loop: crops -> E/P/D -> combined loss -> one Adam step."""
from __future__ import annotations

import csv
import logging
import math
import os
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Optional

import numpy as np
import torch

from . import augment
from .config import ExperimentConfig
from .dataset import EventCollection
from .losses import LOG_COLUMNS, LossBreakdown, vnibcreg_loss
from .models import SSLModel, load_checkpoint, save_checkpoint
from .preprocess import SpectrogramCache

log = logging.getLogger(__name__)

CHECKPOINT_NAME = "checkpoint.pt"


class NonFiniteLossError(RuntimeError):
    def __init__(self, breakdown: Dict[str, float], epoch: int, step: int, event_ids: List[str]) -> None:
        self.breakdown = breakdown
        self.epoch = epoch
        self.step = step
        self.event_ids = event_ids
        super().__init__(f"non-finite loss at epoch {epoch} step {step}: {breakdown} (events {event_ids})")


def cosine_lr(base_lr: float, epoch: int, total_epochs: int) -> float:
    """Cosine decay from ``base_lr`` at epoch 0 toward 0 at ``total_epochs``; no warmup."""
    if total_epochs <= 0:
        return base_lr
    return base_lr * (1.0 + math.cos(math.pi * epoch / total_epochs)) / 2.0


def make_cosine_scheduler(optimizer: torch.optim.Optimizer, total_epochs: int):
    return torch.optim.lr_scheduler.LambdaLR(optimizer, lambda e: cosine_lr(1.0, e, total_epochs))


def set_num_threads(n: int) -> None:
    if n > 0:
        torch.set_num_threads(n)


def build_model(config: ExperimentConfig, seed: int) -> SSLModel:
    torch.manual_seed(seed)
    return SSLModel(config.encoder_config(), config.projector_config(), config.discriminator_config())


@dataclass
class PretrainResult:
    model: SSLModel
    loss_log: List[Dict[str, float]] = field(default_factory=list)
    epochs_completed: int = 0
    checkpoint_path: Optional[Path] = None

    @property
    def encoder(self):
        return self.model.encoder


class _TripletSampler:
    """Draws one crop triplet per event with the configured policy."""

    def __init__(self, config: ExperimentConfig, cache: SpectrogramCache) -> None:
        self.policy = config.crop_policy()
        self.kind = config["crop.policy"]
        self.cache = cache
        self._fallback_logged = set()

    def _nc_policy(self, width: int) -> augment.CropPolicy:
        if augment.nc_feasible(width, self.policy):
            return self.policy
        excl = augment.widest_feasible_exclusion(width, self.policy)
        if excl < self.policy.neighborhood_radius_crops:
            raise augment.AugmentationError(f"spectrogram width {width} cannot host a neighbouring crop")
        if width not in self._fallback_logged:
            log.warning("width %d too narrow for exclusion radius %.2f; using %.2f",
                        width, self.policy.exclusion_radius_crops, excl)
            self._fallback_logged.add(width)
        return augment.CropPolicy(self.policy.crop_width_fraction, self.policy.neighborhood_radius_crops,
                                  self.policy.neighbor_sigma_crops, excl)

    def __call__(self, event, rng: np.random.Generator) -> augment.CropTriplet:
        m, n = augment.sample_channel_pair(event.n_channels, rng)
        spec_m = self.cache.get(event, m)
        spec_n = self.cache.get(event, n)
        if self.kind == "NC":
            return augment.neighboring_crop(spec_m, spec_n, self._nc_policy(spec_m.shape[1]), rng, (m, n))
        return augment.random_crop(spec_m, spec_n, self.policy, rng, (m, n))


def _stack(crops: List[np.ndarray]) -> torch.Tensor:
    return torch.from_numpy(np.stack(crops)[:, None].astype(np.float32))


def ssl_step(model: SSLModel, w_t, w_l, w_k, config: ExperimentConfig) -> LossBreakdown:
    """Forward pass of one batch of triplets through the enabled branches."""
    use_vibcreg = config["loss.vibcreg"] == "on"
    variant = config["loss.tnc_variant"]
    y_t = model.encoder(w_t)
    y_l = model.encoder(w_l)
    z_t = z_l = y_k = d_pos = d_neg = None
    if use_vibcreg:
        z_t = model.projector(y_t)
        z_l = model.projector(y_l)
    if variant != "off":
        y_k = model.encoder(w_k)
        d_pos = model.discriminator(y_t, y_l)
        d_neg = model.discriminator(y_t, y_k)
    return vnibcreg_loss(z_t, z_l, y_t, y_l, y_k, d_pos, d_neg, config.loss_weights(), variant, use_vibcreg)


def pretrain(
    config: ExperimentConfig,
    collection: EventCollection,
    seed: Optional[int] = None,
    out_dir: Optional[str | os.PathLike] = None,
    resume: bool = False,
    cache: Optional[SpectrogramCache] = None,
) -> PretrainResult:
    """Joint SSL training of encoder, projector and discriminator.

    An epoch draws ``train.samples_per_event`` triplets per event in a seeded shuffled
    order. The learning rate follows a per-epoch cosine schedule. With ``out_dir`` set,
    a checkpoint and ``loss_log.csv`` are written after every epoch; ``resume`` picks up
    from an existing checkpoint.
    """
    seed = config["train.seed"] if seed is None else seed
    set_num_threads(config["train.num_threads"])
    cache = cache or SpectrogramCache(config.spectrogram_params(), config.cache_root())
    epochs = config["train.epochs"]
    batch_size = config["train.batch_size"]

    model = build_model(config, seed)
    params = [p for p in model.parameters()]
    optimizer = torch.optim.Adam(params, lr=config["train.learning_rate"])
    scheduler = make_cosine_scheduler(optimizer, epochs)
    rng = np.random.default_rng(seed)
    loss_log: List[Dict[str, float]] = []
    start_epoch = 0

    ckpt_path = Path(out_dir) / CHECKPOINT_NAME if out_dir is not None else None
    if resume and ckpt_path is not None and ckpt_path.is_file():
        state = load_checkpoint(ckpt_path)
        model.load_state_dict(state["model"])
        optimizer.load_state_dict(state["optimizer"])
        scheduler.load_state_dict(state["scheduler"])
        rng.bit_generator.state = state["numpy_rng"]
        torch.set_rng_state(state["torch_rng"])
        loss_log = list(state["loss_log"])
        start_epoch = state["epoch"]
        log.info("resuming from epoch %d", start_epoch)

    sampler = _TripletSampler(config, cache)
    events = list(collection)
    per_event = config["train.samples_per_event"]

    def _save(epoch: int) -> None:
        if ckpt_path is None:
            return
        ckpt_path.parent.mkdir(parents=True, exist_ok=True)
        save_checkpoint(
            ckpt_path, config=config.values, model=model.state_dict(), model_configs=model.configs,
            optimizer=optimizer.state_dict(), scheduler=scheduler.state_dict(), epoch=epoch,
            numpy_rng=rng.bit_generator.state, torch_rng=torch.get_rng_state(), loss_log=loss_log, seed=seed,
        )
        write_loss_log(loss_log, ckpt_path.parent / "loss_log.csv")

    if start_epoch == 0:
        _save(0)
    model.train()
    for epoch in range(start_epoch, epochs):
        order = np.concatenate([rng.permutation(len(events)) for _ in range(per_event)])
        for step, lo in enumerate(range(0, len(order), batch_size)):
            idx = order[lo : lo + batch_size]
            if len(idx) < 2:
                continue
            batch = [events[i] for i in idx]
            triplets = [sampler(ev, rng) for ev in batch]
            w_t = _stack([tr.w_t for tr in triplets])
            w_l = _stack([tr.w_l for tr in triplets])
            w_k = _stack([tr.w_k for tr in triplets])
            breakdown = ssl_step(model, w_t, w_l, w_k, config)
            if not breakdown.is_finite():
                raise NonFiniteLossError(breakdown.as_dict(), epoch, step, [ev.id for ev in batch])
            optimizer.zero_grad(set_to_none=True)
            breakdown.total.backward()
            optimizer.step()
            row = {"epoch": epoch, "step": step, "lr": optimizer.param_groups[0]["lr"]}
            row.update(breakdown.as_dict())
            loss_log.append(row)
        scheduler.step()
        last = [r for r in loss_log if r["epoch"] == epoch]
        if last:
            log.info("epoch %d/%d total %.4f", epoch + 1, epochs, float(np.mean([r["total"] for r in last])))
        _save(epoch + 1)

    return PretrainResult(model, loss_log, epochs, ckpt_path)


def write_loss_log(rows: List[Dict[str, float]], path: str | os.PathLike) -> None:
    columns = ["epoch", "step", "lr", *LOG_COLUMNS, "clamped"]
    with open(path, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=columns, extrasaction="ignore")
        writer.writeheader()
        writer.writerows(rows)


def load_pretrained(path: str | os.PathLike) -> PretrainResult:
    state = load_checkpoint(path)
    config = ExperimentConfig(state["config"])
    model = build_model(config, state.get("seed", 0))
    model.load_state_dict(state["model"])
    return PretrainResult(model, list(state["loss_log"]), state["epoch"], Path(path))
