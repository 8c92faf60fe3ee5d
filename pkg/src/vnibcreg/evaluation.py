"""Linear-probe and fine-tuning protocols, multi-seed reports, and the ablation grid."""
from __future__ import annotations

import copy
import csv
import logging
import os
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Dict, List, Optional, Sequence

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .config import ABLATION_ROWS, ExperimentConfig
from .dataset import EventCollection, class_indices, stratified_split, subset_fraction
from .models import Classifier, Encoder, parameter_checksum, predict
from .preprocess import SpectrogramCache
from .trainer import build_model, make_cosine_scheduler, pretrain, set_num_threads

log = logging.getLogger(__name__)


@dataclass
class SeedResult:
    seed: int
    test_accuracy: float
    train_accuracy: float
    n_train: int
    n_test: int
    confusion: List[List[int]] = field(default_factory=list)


@dataclass
class EvalReport:
    name: str
    mode: str
    seeds: List[SeedResult]
    n_percent: Optional[float] = None
    config: Dict = field(default_factory=dict)

    @property
    def accuracies(self) -> List[float]:
        return [s.test_accuracy for s in self.seeds]

    @property
    def mean(self) -> float:
        return float(np.mean(self.accuracies))

    @property
    def std(self) -> float:
        # population std (ddof=0) so a single-seed report stays defined
        return float(np.std(self.accuracies))

    def cell(self) -> str:
        return f"{self.mean:.3f} ({self.std:.3f})"


def _event_features(encoder: Encoder, events: EventCollection, cache: SpectrogramCache,
                    chunk: int = 24) -> torch.Tensor:
    """Per-channel representations, shape (events, channels, F_y), encoder in eval mode."""
    encoder.eval()
    out = []
    with torch.no_grad():
        for ev in events:
            stack = torch.from_numpy(cache.event_stack(ev))[:, None]
            reps = torch.cat([encoder(stack[i : i + chunk]) for i in range(0, stack.shape[0], chunk)])
            out.append(reps)
    return torch.stack(out)


def _aggregate(per_channel: torch.Tensor, labels: torch.Tensor, agg: str):
    if agg == "mean":
        return per_channel.mean(dim=1), labels
    n_ch = per_channel.shape[1]
    return per_channel.reshape(-1, per_channel.shape[-1]), labels.repeat_interleave(n_ch)


def _accuracy(logits: torch.Tensor, labels: torch.Tensor) -> float:
    return float((predict(logits) == labels).float().mean()) if len(labels) else float("nan")


def _confusion(logits: torch.Tensor, labels: torch.Tensor, n_classes: int) -> List[List[int]]:
    mat = np.zeros((n_classes, n_classes), dtype=int)
    for t, p in zip(labels.tolist(), predict(logits).tolist()):
        mat[t, p] += 1
    return mat.tolist()


def train_linear_head(features: torch.Tensor, labels: torch.Tensor, n_classes: int, epochs: int,
                      batch_size: int, lr: float, seed: int, standardize: bool = True) -> nn.Module:
    """Adam + cosine schedule on fixed features. With ``standardize`` the head is
    preceded by a frozen per-feature affine map fitted on the training features."""
    gen = torch.Generator().manual_seed(seed)
    torch.manual_seed(seed)
    head = Classifier(features.shape[1], n_classes)
    if standardize:
        mean = features.mean(dim=0)
        std = features.std(dim=0).clamp_min(1e-6)
    else:
        mean = torch.zeros(features.shape[1])
        std = torch.ones(features.shape[1])
    model = _Standardized(head, mean, std)
    opt = torch.optim.Adam(head.parameters(), lr=lr)
    sched = make_cosine_scheduler(opt, epochs)
    n = len(labels)
    for _ in range(epochs):
        order = torch.randperm(n, generator=gen)
        for lo in range(0, n, batch_size):
            idx = order[lo : lo + batch_size]
            loss = F.cross_entropy(model(features[idx]), labels[idx])
            opt.zero_grad(set_to_none=True)
            loss.backward()
            opt.step()
        sched.step()
    return model


class _Standardized(nn.Module):
    def __init__(self, head: nn.Module, mean: torch.Tensor, std: torch.Tensor) -> None:
        super().__init__()
        self.head = head
        self.register_buffer("mean", mean)
        self.register_buffer("std", std)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.head((x - self.mean) / self.std)


EncoderFactory = Callable[[int], Encoder]


def linear_evaluate(
    encoder_for_seed: EncoderFactory,
    labeled: EventCollection,
    config: ExperimentConfig,
    name: str = "linear",
    cache: Optional[SpectrogramCache] = None,
    label_permutation_seed: Optional[int] = None,
) -> EvalReport:
    """Frozen encoder + linear head, one stratified 80/20 split per seed.

    ``encoder_for_seed(seed)`` returns the encoder to probe for that seed (a pretrained
    one, or a fresh random one for RandInit). ``label_permutation_seed`` shuffles the
    training labels, a control that should drive accuracy to chance.
    """
    cache = cache or SpectrogramCache(config.spectrogram_params(), config.cache_root())
    class_names = labeled.class_names()
    results = []
    for seed in config["eval.seeds"]:
        encoder = encoder_for_seed(seed)
        before = parameter_checksum(encoder)
        for p in encoder.parameters():
            p.requires_grad_(False)
        train, test = stratified_split(labeled, config.split_spec(seed))
        y_train = torch.from_numpy(class_indices(train, class_names))
        y_test = torch.from_numpy(class_indices(test, class_names))
        if label_permutation_seed is not None:
            perm = torch.randperm(len(y_train), generator=torch.Generator().manual_seed(label_permutation_seed + seed))
            y_train = y_train[perm]
        agg = config["eval.channel_agg"]
        x_train, y_train = _aggregate(_event_features(encoder, train, cache), y_train, agg)
        x_test, y_test = _aggregate(_event_features(encoder, test, cache), y_test, agg)
        head = train_linear_head(
            x_train, y_train, len(class_names), config["eval.epochs"], config["eval.batch_size"],
            config["eval.linear_lr"], seed, config["eval.standardize_features"],
        )
        with torch.no_grad():
            train_logits, test_logits = head(x_train), head(x_test)
        if parameter_checksum(encoder) != before:
            raise RuntimeError("linear evaluation modified encoder parameters")
        results.append(SeedResult(
            seed, _accuracy(test_logits, y_test), _accuracy(train_logits, y_train),
            len(train), len(test), _confusion(test_logits, y_test, len(class_names)),
        ))
        log.info("%s seed %d: linear test acc %.3f", name, seed, results[-1].test_accuracy)
    return EvalReport(name, "linear", results, config=dict(config.values))


def finetune_split(labeled: EventCollection, config: ExperimentConfig, n_percent: float, seed: int):
    """20% stratified test split; the training subset is n% of each class of the whole
    labeled set, drawn from the remaining 80%."""
    train, test = stratified_split(labeled, config.split_spec(seed))
    subset = subset_fraction(train, n_percent, seed, reference_counts=labeled.class_counts)
    return subset, test


def finetune_evaluate(
    encoder_for_seed: EncoderFactory,
    labeled: EventCollection,
    config: ExperimentConfig,
    n_percent: float,
    name: str = "finetune",
    cache: Optional[SpectrogramCache] = None,
) -> EvalReport:
    """Unfrozen encoder (lr ``eval.encoder_lr``) plus linear head (``eval.classifier_lr``)."""
    cache = cache or SpectrogramCache(config.spectrogram_params(), config.cache_root())
    class_names = labeled.class_names()
    agg = config["eval.channel_agg"]
    epochs = config["eval.finetune_epochs"]
    batch_size = config["eval.batch_size"]
    results = []
    for seed in config["eval.seeds"]:
        train, test = finetune_split(labeled, config, n_percent, seed)
        encoder = copy.deepcopy(encoder_for_seed(seed))
        for p in encoder.parameters():
            p.requires_grad_(True)
        torch.manual_seed(seed)
        head = Classifier(encoder.output_dim, len(class_names))
        opt = torch.optim.Adam([
            {"params": encoder.parameters(), "lr": config["eval.encoder_lr"]},
            {"params": head.parameters(), "lr": config["eval.classifier_lr"]},
        ])
        sched = make_cosine_scheduler(opt, epochs)
        y_train = torch.from_numpy(class_indices(train, class_names))
        gen = torch.Generator().manual_seed(seed)
        events = list(train)
        for _ in range(epochs):
            encoder.train()
            order = torch.randperm(len(events), generator=gen)
            for lo in range(0, len(events), batch_size):
                idx = order[lo : lo + batch_size].tolist()
                if agg == "mean":
                    stacks = torch.from_numpy(np.stack([cache.event_stack(events[i]) for i in idx]))
                    b, c = stacks.shape[:2]
                    reps = encoder(stacks.reshape(b * c, 1, *stacks.shape[2:])).reshape(b, c, -1).mean(dim=1)
                    target = y_train[idx]
                else:
                    stacks = torch.from_numpy(np.concatenate([cache.event_stack(events[i]) for i in idx]))
                    reps = encoder(stacks[:, None])
                    target = y_train[idx].repeat_interleave(stacks.shape[0] // len(idx))
                if reps.shape[0] < 2 and encoder.training:
                    continue
                loss = F.cross_entropy(head(reps), target)
                opt.zero_grad(set_to_none=True)
                loss.backward()
                opt.step()
            sched.step()
        head.eval()
        with torch.no_grad():
            x_train, yt = _aggregate(_event_features(encoder, train, cache), y_train, agg)
            x_test, y_test = _aggregate(
                _event_features(encoder, test, cache), torch.from_numpy(class_indices(test, class_names)), agg)
            train_logits, test_logits = head(x_train), head(x_test)
        results.append(SeedResult(
            seed, _accuracy(test_logits, y_test), _accuracy(train_logits, yt),
            len(train), len(test), _confusion(test_logits, y_test, len(class_names)),
        ))
        log.info("%s seed %d: n=%s%% fine-tune test acc %.3f", name, seed, n_percent, results[-1].test_accuracy)
    return EvalReport(name, "finetune", results, n_percent=n_percent, config=dict(config.values))


# ---------------------------------------------------------------------------
# ablation grid


@dataclass
class AblationRow:
    name: str
    flags: Dict
    linear: Optional[EvalReport] = None
    finetune: Dict[float, EvalReport] = field(default_factory=dict)
    error: Optional[str] = None


def method_flags(overrides: Dict) -> Dict[str, str]:
    if overrides.get("train.epochs") == 0:
        return {"base": "RandInit", "crop": "x", "tnc_original": "x", "tnc_modified": "x"}
    variant = overrides.get("loss.tnc_variant", "modified")
    return {
        "base": "VIbCReg" if overrides.get("loss.vibcreg", "on") == "on" else "TNC",
        "crop": overrides.get("crop.policy", "NC"),
        "tnc_original": "o" if variant == "original" else "x",
        "tnc_modified": "o" if variant == "modified" else "x",
    }


def pretrained_encoders(config: ExperimentConfig, collection: EventCollection, cache: SpectrogramCache,
                        out_dir: Optional[Path] = None, resume: bool = False) -> Dict[int, Encoder]:
    """One pretraining run per evaluation seed; RandInit (0 epochs) yields fresh encoders."""
    encoders = {}
    for seed in config["eval.seeds"]:
        run_dir = out_dir / f"seed{seed}" if out_dir is not None else None
        result = pretrain(config.with_overrides({"train.seed": seed}), collection, seed, run_dir, resume, cache)
        encoders[seed] = result.encoder
    return encoders


def run_ablation(
    grid: Dict[str, Dict],
    collection: EventCollection,
    config: ExperimentConfig,
    out_dir: Optional[str | os.PathLike] = None,
    finetune: bool = True,
    resume: bool = False,
    cache: Optional[SpectrogramCache] = None,
) -> List[AblationRow]:
    """Pretrain each grid row per seed, then run linear and fine-tuning evaluations.

    SSL pretraining sees the whole collection (Unlabeled included); the supervised
    phases see labeled events only. A failing row is recorded and the rest proceed.
    """
    cache = cache or SpectrogramCache(config.spectrogram_params(), config.cache_root())
    labeled = collection.labeled()
    out_dir = Path(out_dir) if out_dir is not None else None
    rows = []
    for name, overrides in grid.items():
        row = AblationRow(name, method_flags(overrides))
        try:
            row_cfg = config.with_overrides(overrides)
            row_dir = out_dir / _slug(name) if out_dir is not None else None
            encoders = pretrained_encoders(row_cfg, collection, cache, row_dir, resume)
            row.linear = linear_evaluate(lambda s: encoders[s], labeled, row_cfg, name, cache)
            if finetune:
                for n in row_cfg["eval.n_percents"]:
                    row.finetune[n] = finetune_evaluate(lambda s: encoders[s], labeled, row_cfg, n, name, cache)
        except Exception as exc:  # a broken row must not sink the grid
            log.exception("ablation row %s failed", name)
            row.error = f"{type(exc).__name__}: {exc}"
        rows.append(row)
    return rows


def _slug(name: str) -> str:
    return "".join(c if c.isalnum() else "_" for c in name).strip("_")


def _rank_marks(values: List[Optional[float]]) -> List[str]:
    """Bold for the best mean, underline for the runner-up (ties share a mark)."""
    present = sorted({v for v in values if v is not None}, reverse=True)
    marks = []
    for v in values:
        if v is None:
            marks.append("")
        elif v == present[0]:
            marks.append("bold")
        elif len(present) > 1 and v == present[1]:
            marks.append("underline")
        else:
            marks.append("")
    return marks


def _fmt(cell: str, mark: str) -> str:
    if mark == "bold":
        return f"**{cell}**"
    if mark == "underline":
        return f"<u>{cell}</u>"
    return cell


def ablation_columns(rows: List[AblationRow]) -> List[str]:
    cols = ["linear"]
    ns = sorted({n for r in rows for n in r.finetune})
    cols += [f"finetune n={n:g}%" for n in ns]
    return cols


def _row_reports(row: AblationRow, rows: List[AblationRow]) -> List[Optional[EvalReport]]:
    ns = sorted({n for r in rows for n in r.finetune})
    return [row.linear] + [row.finetune.get(n) for n in ns]


def ablation_markdown(rows: List[AblationRow]) -> str:
    cols = ablation_columns(rows)
    header = ["method", "crop", "L_tnc original", "L_tnc modified", *cols, "note"]
    lines = ["| " + " | ".join(header) + " |", "|" + "---|" * len(header)]
    per_col = list(zip(*[_row_reports(r, rows) for r in rows])) if rows else []
    marks_by_col = [_rank_marks([rep.mean if rep else None for rep in col]) for col in per_col]
    for i, row in enumerate(rows):
        cells = []
        for j, rep in enumerate(_row_reports(row, rows)):
            cells.append(_fmt(rep.cell(), marks_by_col[j][i]) if rep else "n/a")
        f = row.flags
        lines.append("| " + " | ".join([row.name, f["crop"], f["tnc_original"], f["tnc_modified"], *cells,
                                        row.error or ""]) + " |")
    return "\n".join(lines) + "\n"


def write_ablation_csv(rows: List[AblationRow], path: str | os.PathLike) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["method", "base", "crop", "tnc_original", "tnc_modified", "protocol", "n_percent",
                         "seed", "test_accuracy", "train_accuracy", "mean", "std", "error"])
        for row in rows:
            f = row.flags
            reports = ([row.linear] if row.linear else []) + list(row.finetune.values())
            if not reports:
                writer.writerow([row.name, f["base"], f["crop"], f["tnc_original"], f["tnc_modified"],
                                 "", "", "", "", "", "", "", row.error or ""])
            for rep in reports:
                for s in rep.seeds:
                    writer.writerow([row.name, f["base"], f["crop"], f["tnc_original"], f["tnc_modified"],
                                     rep.mode, "" if rep.n_percent is None else rep.n_percent, s.seed,
                                     s.test_accuracy, s.train_accuracy, rep.mean, rep.std, row.error or ""])


def write_report_csv(report: EvalReport, path: str | os.PathLike) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["experiment", "mode", "n_percent", "seed", "test_accuracy", "train_accuracy",
                         "n_train", "n_test"])
        for s in report.seeds:
            writer.writerow([report.name, report.mode, report.n_percent or "", s.seed, s.test_accuracy,
                             s.train_accuracy, s.n_train, s.n_test])
        writer.writerow([report.name, report.mode, report.n_percent or "", "mean", report.mean, "", "", ""])
        writer.writerow([report.name, report.mode, report.n_percent or "", "std", report.std, "", "", ""])


def default_grid(names: Optional[Sequence[str]] = None) -> Dict[str, Dict]:
    if names is None:
        return dict(ABLATION_ROWS)
    unknown = [n for n in names if n not in ABLATION_ROWS]
    if unknown:
        raise ValueError(f"unknown ablation rows {unknown}; choose from {list(ABLATION_ROWS)}")
    return {n: ABLATION_ROWS[n] for n in names}
