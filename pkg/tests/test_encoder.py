import pytest
import torch

from pvseg.encoder import STAGE_CHANNELS, STAGE_STRIDES, ImageEncoder


@pytest.fixture(scope="module")
def encoder():
    torch.manual_seed(0)
    return ImageEncoder()


def test_stage_shapes_64(encoder):
    pyr = encoder(torch.randn(3, 64, 64))
    sizes = [tuple(s.shape) for s in pyr.stages]
    assert sizes == [(32, 16, 16), (64, 8, 8), (128, 4, 4), (256, 2, 2)]


def test_stage_shape_contract_other_sizes(encoder):
    for h, w in [(32, 32), (64, 96), (128, 64)]:
        pyr = encoder(torch.randn(3, h, w))
        for l, stage in enumerate(pyr.stages):
            assert stage.shape == (STAGE_CHANNELS[l], h // STAGE_STRIDES[l], w // STAGE_STRIDES[l])


def test_channels_strictly_increasing():
    assert all(a < b for a, b in zip(STAGE_CHANNELS, STAGE_CHANNELS[1:]))


def test_deterministic(encoder):
    x = torch.randn(3, 64, 64)
    a = encoder(x)
    b = encoder(x)
    for s1, s2 in zip(a.stages, b.stages):
        assert torch.equal(s1, s2)


def test_zero_input_zero_bias_gives_zero_stages():
    torch.manual_seed(1)
    enc = ImageEncoder()
    with torch.no_grad():
        for name, p in enc.named_parameters():
            if name.endswith("bias"):
                p.zero_()
    pyr = enc(torch.zeros(3, 64, 64))
    for stage in pyr.stages:
        assert torch.equal(stage, torch.zeros_like(stage))


def test_indivisible_size_rejected(encoder):
    with pytest.raises(ValueError, match="divisible by 32"):
        encoder(torch.randn(3, 60, 64))
    with pytest.raises(ValueError, match=r"\[c, h, w\]"):
        encoder(torch.randn(1, 3, 64, 64))


def test_every_parameter_gets_gradient_from_last_stage():
    torch.manual_seed(2)
    enc = ImageEncoder()
    pyr = enc(torch.randn(3, 64, 64))
    loss = (pyr.stages[-1] ** 2).sum()
    loss.backward()
    for name, p in enc.named_parameters():
        assert p.grad is not None, name
        assert p.grad.abs().max() > 0, f"dead parameter: {name}"
