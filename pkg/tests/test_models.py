import pytest
import torch

from vnibcreg.models import (
    Classifier,
    Discriminator,
    DiscriminatorConfig,
    Encoder,
    EncoderConfig,
    IterNorm,
    Projector,
    ProjectorConfig,
    SSLModel,
    load_checkpoint,
    parameter_checksum,
    parameter_count,
    predict,
    save_checkpoint,
)

RESNET34_1CH_PARAMS = 21_278_400


def group_whitening_error(z, group_size):
    z = z - z.mean(dim=0)
    errs = []
    for g in range(z.shape[1] // group_size):
        block = z[:, g * group_size:(g + 1) * group_size]
        cov = block.T @ block / z.shape[0]
        errs.append(torch.linalg.norm(cov - torch.eye(group_size)).item())
    return max(errs)


@pytest.fixture(scope="module")
def resnet():
    torch.manual_seed(0)
    return Encoder(EncoderConfig()).eval()


def test_resnet_parameter_count(resnet):
    assert parameter_count(resnet) == RESNET34_1CH_PARAMS


@pytest.mark.parametrize("family, dim", [("resnet34_1ch", 512), ("tiny_cnn", 64)])
def test_output_dim_is_width_invariant(resnet, family, dim):
    torch.manual_seed(0)
    enc = resnet if family == "resnet34_1ch" else Encoder(EncoderConfig(family, dim)).eval()
    with torch.no_grad():
        for width in (16, 71, 228, 712):
            assert enc(torch.rand(2, 1, 128, width)).shape == (2, dim)


def test_encoder_zero_input_and_determinism(resnet):
    with torch.no_grad():
        assert torch.isfinite(resnet(torch.zeros(2, 1, 128, 71))).all()
        x = torch.rand(2, 1, 128, 71)
        assert torch.equal(resnet(x), resnet(x))


def test_encoder_input_validation():
    enc = Encoder(EncoderConfig("tiny_cnn", 64))
    with pytest.raises(ValueError):
        enc(torch.rand(2, 3, 128, 71))
    with pytest.raises(ValueError):
        enc(torch.rand(2, 1, 128, 4))
    with pytest.raises(ValueError):
        EncoderConfig("vgg")
    with pytest.raises(ValueError):
        EncoderConfig("resnet34_1ch", 64)


def test_projector_whitening_at_full_scale():
    torch.manual_seed(0)
    proj = Projector(512, ProjectorConfig()).train()
    z = proj(torch.randn(128, 512))
    assert z.shape == (128, 512)
    assert group_whitening_error(z.detach(), 64) < 0.1 * 64


@pytest.mark.parametrize("group_size, features", [(16, 64), (64, 128)])
def test_iternorm_whitens_correlated_input(group_size, features):
    torch.manual_seed(1)
    mix = torch.randn(features, features)
    x = torch.randn(2 * group_size * 2, features) @ mix + 3.0
    out = IterNorm(features, group_size, 5).train()(x)
    assert group_whitening_error(out, group_size) < 0.1 * group_size


def test_projector_minimal_batch_and_inference_determinism():
    torch.manual_seed(0)
    proj = Projector(64, ProjectorConfig(256, 64, 2, 5, 16))
    assert torch.isfinite(proj.train()(torch.randn(2, 64))).all()
    proj.eval()
    y = torch.randn(5, 64)
    with torch.no_grad():
        assert torch.equal(proj(y), proj(y))
    with pytest.raises(ValueError):
        proj.train()(torch.randn(1, 64))
    with pytest.raises(ValueError):
        ProjectorConfig(output_dim=100, whitening_group_size=64)


def test_discriminator_range_asymmetry_and_init_mean():
    torch.manual_seed(0)
    disc = Discriminator(64, DiscriminatorConfig()).eval()
    a, b = torch.randn(1000, 64), torch.randn(1000, 64)
    with torch.no_grad():
        p = disc(a, b)
        q = disc(b, a)
    assert p.shape == (1000,) and ((p > 0) & (p < 1)).all()
    assert not torch.allclose(p, q)
    assert 0.3 <= p.mean().item() <= 0.7
    with torch.no_grad():
        extreme = disc(1e3 * a[:10], -1e3 * b[:10])
    assert torch.isfinite(extreme).all() and (extreme >= 0).all() and (extreme <= 1).all()
    with pytest.raises(ValueError):
        disc(a, b[:, :10])


def test_classifier_examples():
    head = Classifier(4, 8)
    torch.nn.init.zeros_(head.weight)
    torch.nn.init.zeros_(head.bias)
    y = torch.randn(3, 4)
    assert not head(y).any() and predict(head(y)).tolist() == [0, 0, 0]
    with torch.no_grad():
        head.weight[5, 2] = 1.0
    assert predict(head(torch.tensor([[0.0, 0.0, 2.0, 0.0]]))).item() == 5
    assert torch.isfinite(Classifier(4)(torch.randn(6, 4))).all()


def test_checkpoint_roundtrip_and_version(tmp_path):
    torch.manual_seed(0)
    model = SSLModel(EncoderConfig("tiny_cnn", 32), ProjectorConfig(64, 32, 2, 5, 16))
    save_checkpoint(tmp_path / "c.pt", model=model.state_dict())
    other = SSLModel(EncoderConfig("tiny_cnn", 32), ProjectorConfig(64, 32, 2, 5, 16))
    assert parameter_checksum(other) != parameter_checksum(model)
    other.load_state_dict(load_checkpoint(tmp_path / "c.pt")["model"])
    assert parameter_checksum(other) == parameter_checksum(model)
    torch.save({"format_version": 99}, tmp_path / "future.pt")
    with pytest.raises(ValueError):
        load_checkpoint(tmp_path / "future.pt")
