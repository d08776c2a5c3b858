import numpy as np
import pytest
import torch

from pvseg.prompting_decoding import (
    MaskDecoder,
    Prompt,
    PromptEncoder,
    PromptValidationError,
    SegmentationOutput,
    finalize_mask,
    sincos_position_encoding,
)


@pytest.fixture(scope="module")
def penc():
    torch.manual_seed(0)
    return PromptEncoder(dim=8)


def small_decoder(seed=0):
    torch.manual_seed(seed)
    return MaskDecoder(dim=16, feat_dim=8, depth=2, num_heads=2, mlp_dim=32, num_masks=3)


def test_empty_prompts_learned_no_prompt_embedding(penc):
    sparse, dense = penc([], image_hw=(64, 64), grid_hw=(2, 2))
    assert sparse.shape == (0, 8)
    expected = penc.no_mask_embed.view(-1, 1, 1).expand(8, 2, 2)
    assert torch.equal(dense, expected)


def test_single_click_one_token(penc):
    sparse, _ = penc([Prompt.click(10, 20, "positive", 0)], (64, 64), (2, 2))
    assert sparse.shape == (1, 8)
    # Token = type embedding + position encoding of the normalized click.
    coords = torch.tensor([[(10 + 0.5) / 64, (20 + 0.5) / 64]])
    pe = sincos_position_encoding(coords, 8)[0]
    expected = penc.type_embed.weight[0] + pe
    assert torch.allclose(sparse[0], expected)


def test_negative_click_uses_other_type_embedding(penc):
    pos, _ = penc([Prompt.click(5, 5, "positive", 0)], (64, 64), (2, 2))
    neg, _ = penc([Prompt.click(5, 5, "negative", 0)], (64, 64), (2, 2))
    assert not torch.allclose(pos, neg)


def test_box_two_tokens_distinct_types(penc):
    sparse, _ = penc([Prompt.from_box(4, 6, 30, 40, 0)], (64, 64), (2, 2))
    assert sparse.shape == (2, 8)
    assert not torch.allclose(sparse[0], sparse[1])


def test_mask_prompt_dense_path(penc):
    mask = np.zeros((64, 64), dtype=np.uint8)
    mask[10:40, 10:40] = 1
    sparse, dense = penc([Prompt.from_mask(mask, 0)], (64, 64), (2, 2))
    assert sparse.shape == (0, 8)
    assert dense.shape == (8, 2, 2)
    _, no_prompt = penc([], (64, 64), (2, 2))
    assert not torch.allclose(dense, no_prompt)


def test_out_of_bounds_click_rejected(penc):
    with pytest.raises(PromptValidationError, match="x=64"):
        penc([Prompt.click(64, 10, "positive", 0)], (64, 64), (2, 2))
    with pytest.raises(PromptValidationError, match="y=-1"):
        penc([Prompt.click(0, -1.0, "positive", 0)], (64, 64), (2, 2))


def test_mixed_frames_rejected(penc):
    prompts = [Prompt.click(1, 1, "positive", 0), Prompt.click(1, 1, "positive", 2)]
    with pytest.raises(PromptValidationError, match="multiple frames"):
        penc(prompts, (64, 64), (2, 2))


def test_bad_box_and_polarity():
    with pytest.raises(PromptValidationError):
        Prompt.from_box(10, 0, 5, 5, 0)
    with pytest.raises(PromptValidationError):
        Prompt.click(1, 1, "middle", 0)


def test_mask_prompt_shape_checked(penc):
    with pytest.raises(PromptValidationError, match="does not match frame"):
        penc([Prompt.from_mask(np.zeros((32, 32)), 0)], (64, 64), (2, 2))


# --------------------------------------------------------------------------
# Decoder
# --------------------------------------------------------------------------


def test_decoder_output_contract():
    dec = small_decoder()
    feat = torch.randn(8, 2, 2)
    sparse = torch.randn(2, 16)
    dense = torch.randn(16, 2, 2)
    memory_prompts = torch.randn(3, 16)
    out = dec(feat, sparse, dense, memory_prompts, output_size=(64, 64))
    assert out.mask_logits.shape == (3, 64, 64)
    assert out.iou_pred.shape == (3,)
    assert ((out.iou_pred >= 0) & (out.iou_pred <= 1)).all()
    assert 0.0 <= out.object_score <= 1.0
    assert out.selected_index == int(torch.argmax(out.iou_pred))


def test_decoder_selected_index_is_argmax_over_draws():
    feat = torch.randn(8, 2, 2)
    dense = torch.randn(16, 2, 2)
    for seed in range(5):
        dec = small_decoder(seed)
        out = dec(feat, torch.zeros(0, 16), dense, None, (32, 32))
        assert out.selected_index == int(torch.argmax(out.iou_pred))


def test_decoder_works_without_memory_prompts_and_without_sparse():
    dec = small_decoder()
    feat = torch.randn(8, 2, 2)
    dense = torch.randn(16, 2, 2)
    out = dec(feat, torch.zeros(0, 16), dense, None, (64, 64))
    assert out.mask_logits.shape == (3, 64, 64)
    out2 = dec(feat, torch.zeros(0, 16), dense, torch.zeros(0, 16), (64, 64))
    assert torch.equal(out.mask_logits, out2.mask_logits)


def test_decoder_gradient_check():
    torch.manual_seed(3)
    dec = MaskDecoder(dim=16, feat_dim=8, depth=1, num_heads=2, mlp_dim=32).double()
    feat = torch.randn(8, 2, 2, dtype=torch.float64)
    sparse = torch.randn(1, 16, dtype=torch.float64)
    dense = torch.randn(16, 2, 2, dtype=torch.float64)

    weight = dec.blocks[0].cross_t2i.q_proj.weight

    def loss_fn():
        return dec(feat, sparse, dense, None, (8, 8)).mask_logits.sum()

    loss_fn().backward()
    analytic = weight.grad[2, 3].item()
    eps = 1e-6
    with torch.no_grad():
        weight[2, 3] += eps
    up = loss_fn().item()
    with torch.no_grad():
        weight[2, 3] -= 2 * eps
    down = loss_fn().item()
    numeric = (up - down) / (2 * eps)
    rel = abs(analytic - numeric) / max(abs(numeric), 1e-12)
    assert rel <= 1e-3


# --------------------------------------------------------------------------
# finalize_mask
# --------------------------------------------------------------------------


def output_with(logits, iou, object_logit):
    return SegmentationOutput(
        mask_logits=torch.as_tensor(logits, dtype=torch.float32),
        iou_pred=torch.as_tensor(iou, dtype=torch.float32),
        object_logit=torch.tensor(float(object_logit)),
    )


def test_finalize_occlusion_gate():
    logits = torch.full((3, 4, 4), 50.0)
    out = output_with(logits, [0.9, 0.1, 0.1], object_logit=-3.0)  # score ~0.047
    assert finalize_mask(out).sum() == 0
    out = output_with(logits, [0.9, 0.1, 0.1], object_logit=3.0)
    assert finalize_mask(out).sum() == 16


def test_finalize_hand_case():
    logits = torch.zeros(3, 2, 2)
    logits[0] = torch.tensor([[2.0, -2.0], [-2.0, 2.0]])
    out = output_with(logits, [0.8, 0.2, 0.2], object_logit=4.0)
    assert finalize_mask(out, threshold=0.5).tolist() == [[1, 0], [0, 1]]


def test_finalize_monotone_in_threshold():
    torch.manual_seed(4)
    logits = torch.randn(3, 8, 8) * 3
    out = output_with(logits, [0.5, 0.9, 0.1], object_logit=2.0)
    low = finalize_mask(out, threshold=0.3)
    high = finalize_mask(out, threshold=0.6)
    assert bool((high <= low).all())  # higher threshold -> subset
