import math

import numpy as np
import pytest
import torch

from vnibcreg import trainer
from vnibcreg.models import parameter_checksum
from vnibcreg.trainer import (
    NonFiniteLossError,
    build_model,
    cosine_lr,
    load_pretrained,
    make_cosine_scheduler,
    pretrain,
    ssl_step,
)


@pytest.mark.parametrize("epochs", [1, 30, 300])
def test_cosine_schedule(epochs):
    for e in range(epochs + 1):
        assert cosine_lr(1e-3, e, epochs) == pytest.approx(1e-3 * (1 + math.cos(math.pi * e / epochs)) / 2, abs=1e-15)
    if epochs > 1:
        assert cosine_lr(1e-3, epochs - 1, epochs) < 1e-2 * 1e-3
    opt = torch.optim.Adam([torch.nn.Parameter(torch.zeros(1))], lr=1e-3)
    sched = make_cosine_scheduler(opt, epochs)
    for e in range(epochs):
        assert abs(opt.param_groups[0]["lr"] - cosine_lr(1e-3, e, epochs)) < 1e-9
        opt.step()
        sched.step()


def _batch(config, b=4):
    torch.manual_seed(0)
    return [torch.rand(b, 1, 128, 71) for _ in range(3)]


@pytest.mark.parametrize("overrides, silent", [
    ({}, set()),
    ({"loss.vibcreg": "off", "loss.tnc_variant": "original"}, {"projector"}),
    ({"loss.tnc_variant": "off"}, {"discriminator"}),
])
def test_gradient_flow(tiny_config, overrides, silent):
    cfg = tiny_config.with_overrides(overrides)
    model = build_model(cfg, 0)
    ssl_step(model, *_batch(cfg), cfg).total.backward()
    for part in ("encoder", "projector", "discriminator"):
        grads = [p.grad for p in getattr(model, part).parameters()]
        has_grad = any(g is not None and g.abs().sum() > 0 for g in grads)
        assert has_grad == (part not in silent), part


def test_zero_epochs_keeps_initialisation(tiny_config, tiny_collection, tiny_cache, tmp_path):
    cfg = tiny_config.with_overrides({"train.epochs": 0})
    result = pretrain(cfg, tiny_collection, 0, tmp_path, cache=tiny_cache)
    assert parameter_checksum(result.model) == parameter_checksum(build_model(cfg, 0))
    loaded = load_pretrained(tmp_path / "checkpoint.pt")
    assert parameter_checksum(loaded.model) == parameter_checksum(result.model)
    assert loaded.epochs_completed == 0 and result.loss_log == []


def test_pretrain_is_deterministic_and_logs(tiny_config, tiny_collection, tiny_cache, tmp_path):
    a = pretrain(tiny_config, tiny_collection, 0, tmp_path / "a", cache=tiny_cache)
    b = pretrain(tiny_config, tiny_collection, 0, tmp_path / "b", cache=tiny_cache)
    assert [r["total"] for r in a.loss_log] == [r["total"] for r in b.loss_log]
    assert parameter_checksum(a.model) == parameter_checksum(b.model)
    steps_per_epoch = math.ceil(len(tiny_collection) / tiny_config["train.batch_size"])
    assert len(a.loss_log) == tiny_config["train.epochs"] * steps_per_epoch
    header = (tmp_path / "a" / "loss_log.csv").read_text().splitlines()[0]
    assert header.startswith("epoch,step,lr,invariance")
    lrs = sorted({r["lr"] for r in a.loss_log}, reverse=True)
    assert lrs[0] == pytest.approx(1e-3)


def test_resume_continues_without_repeating(tiny_config, tiny_collection, tiny_cache, tmp_path):
    straight = pretrain(tiny_config, tiny_collection, 0, tmp_path / "s", cache=tiny_cache)
    cfg1 = tiny_config
    # interrupt after the first epoch by running with a patched epoch loop
    partial_dir = tmp_path / "p"
    original = trainer.write_loss_log
    calls = {"n": 0}

    def interrupt(rows, path):
        original(rows, path)
        calls["n"] += 1
        if calls["n"] == 2:  # initial save plus epoch 1
            raise KeyboardInterrupt

    trainer.write_loss_log = interrupt
    try:
        with pytest.raises(KeyboardInterrupt):
            pretrain(cfg1, tiny_collection, 0, partial_dir, cache=tiny_cache)
    finally:
        trainer.write_loss_log = original
    resumed = pretrain(cfg1, tiny_collection, 0, partial_dir, resume=True, cache=tiny_cache)
    assert [r["total"] for r in resumed.loss_log] == [r["total"] for r in straight.loss_log]
    assert parameter_checksum(resumed.model) == parameter_checksum(straight.model)


def test_non_finite_loss_is_reported(tiny_config, tiny_collection, tiny_cache, monkeypatch):
    real = trainer.ssl_step

    def poisoned(*args):
        out = real(*args)
        out.total = out.total * float("nan")
        return out

    monkeypatch.setattr(trainer, "ssl_step", poisoned)
    with pytest.raises(NonFiniteLossError) as err:
        pretrain(tiny_config, tiny_collection, 0, cache=tiny_cache)
    assert err.value.epoch == 0 and err.value.step == 0 and err.value.event_ids
    assert math.isnan(err.value.breakdown["total"])


def test_random_crop_policy_runs(tiny_config, tiny_collection, tiny_cache):
    cfg = tiny_config.with_overrides({"crop.policy": "RC", "train.epochs": 1, "loss.tnc_variant": "off"})
    result = pretrain(cfg, tiny_collection, 0, cache=tiny_cache)
    assert all(np.isfinite(r["total"]) for r in result.loss_log)
    assert all(r["tnc_bce"] == 0 for r in result.loss_log)


def test_narrow_exclusion_fallback(tiny_config, tiny_collection, tiny_cache, caplog):
    cfg = tiny_config.with_overrides({"crop.width_fraction": 0.2, "train.epochs": 1})
    with caplog.at_level("WARNING"):
        pretrain(cfg, tiny_collection, 0, cache=tiny_cache)
    assert "too narrow" in caplog.text
