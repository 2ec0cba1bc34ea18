import numpy as np
import pytest
import torch

from tamiseg.text_align import (CrossModalAlignment, HashTextEncoder, TextEmbedding,
                                cross_modal_align, embed_prompt, tokenize)

from conftest import check_grads


# --- prompt embedding ---------------------------------------------------------

def test_tokenize_splits_on_whitespace_and_punctuation():
    assert tokenize("two lesions, one small upper left") == \
        ["two", "lesions", "one", "small", "upper", "left"]
    assert tokenize("No Lesion.") == ["no", "lesion"]


def test_embed_deterministic():
    enc = HashTextEncoder(5, 32)
    a = embed_prompt("one small lesion", enc)
    b = embed_prompt("one small lesion", enc)
    assert torch.equal(a.matrix, b.matrix)
    assert a.tokens == b.tokens
    # a fresh instance with the same seed agrees (frozen table)
    c = HashTextEncoder(5, 32).embed("one small lesion")
    assert torch.equal(a.matrix, c.matrix)


def test_embed_token_count():
    enc = HashTextEncoder(0, 32)
    emb = enc.embed("two lesions")
    assert emb.matrix.shape == (2, 32)
    assert emb.tokens == ("two", "lesions")


def test_embed_single_token_difference():
    enc = HashTextEncoder(0, 16)
    a = enc.embed("one small upper left")
    b = enc.embed("one large upper left")
    diff = (a.matrix - b.matrix).abs().sum(dim=1)
    assert diff[0] == 0 and diff[2] == 0 and diff[3] == 0
    assert diff[1] > 0


def test_embed_empty_prompt_rejected():
    enc = HashTextEncoder(0, 8)
    with pytest.raises(ValueError):
        enc.embed("")
    with pytest.raises(ValueError):
        enc.embed("...")


def test_embed_seed_changes_vectors():
    a = HashTextEncoder(0, 8).embed("lesion")
    b = HashTextEncoder(1, 8).embed("lesion")
    assert not torch.equal(a.matrix, b.matrix)


# --- cross-modal attention ------------------------------------------------------

def test_alignment_preserves_shape_all_levels():
    from tamiseg.encoder import TINY
    text = torch.randn(3, TINY.text_dim)
    for width, size in zip(TINY.widths, (16, 8, 4, 2)):
        mod = CrossModalAlignment(width, TINY.text_dim)
        f = torch.randn(2, width, size, size)
        out = mod(f, text)
        assert out.shape == f.shape


def test_attention_rows_sum_to_one():
    mod = CrossModalAlignment(8, 16)
    f = torch.randn(2, 8, 4, 4)
    text = torch.randn(5, 16)
    attn, _ = mod.attention(f, text)
    sums = attn.sum(dim=-1)
    assert torch.allclose(sums, torch.ones_like(sums), atol=1e-6)
    assert attn.min() >= 0.0 and attn.max() <= 1.0


def test_single_token_attention_is_value_row():
    mod = CrossModalAlignment(6, 12)
    f = torch.randn(1, 6, 3, 3)
    text = torch.randn(1, 12)
    attn, out = mod.attention(f, text)
    assert torch.allclose(attn, torch.ones_like(attn))
    expect = (text @ mod.w_v)[0]
    for y in range(3):
        for x in range(3):
            assert torch.allclose(out[0, :, y, x], expect, atol=1e-6)


def test_hand_computed_two_by_two_oracle():
    # frozen from an independent numpy evaluation of the attention arithmetic
    mod = CrossModalAlignment(2, 2).double()
    with torch.no_grad():
        mod.w_q.copy_(torch.eye(2))
        mod.w_k.copy_(torch.tensor([[1.0, 0.5], [0.0, 1.0]]))
        mod.w_v.copy_(torch.tensor([[0.5, -0.5], [1.0, 0.25]]))
    # visual positions (1x2 grid): X = [[1,0],[0,2]] as rows
    x_rows = torch.tensor([[1.0, 0.0], [0.0, 2.0]], dtype=torch.float64)
    f = x_rows.T.reshape(1, 2, 1, 2)
    text = torch.tensor([[1.0, 1.0], [0.0, -1.0]], dtype=torch.float64)
    attn, out = mod.attention(f, text)
    expect_attn = torch.tensor([[0.6697615493266569, 0.3302384506733431],
                                [0.9716820814573544, 0.02831791854264571]],
                               dtype=torch.float64)
    assert torch.allclose(attn[0], expect_attn, atol=1e-12)
    expect_out = torch.tensor([[0.6744038733166422, -0.25],
                               [1.429205203643386, -0.25]], dtype=torch.float64)
    assert torch.allclose(out[0].flatten(1).T, expect_out, atol=1e-12)
    expect_res = torch.tensor([[1.6744038733166422, -0.25],
                               [1.429205203643386, 1.75]], dtype=torch.float64)
    assert torch.allclose(mod(f, text)[0].flatten(1).T, expect_res, atol=1e-12)


def test_zero_value_matrix_is_residual_identity():
    mod = CrossModalAlignment(8, 16)
    with torch.no_grad():
        mod.w_v.zero_()
    f = torch.randn(2, 8, 4, 4)
    text = torch.randn(3, 16)
    assert torch.equal(mod(f, text), f)


def test_permutation_equivariance_over_positions():
    mod = CrossModalAlignment(4, 8).double()
    f = torch.randn(1, 4, 2, 3, dtype=torch.float64)
    text = torch.randn(4, 8, dtype=torch.float64)
    out = mod(f, text).flatten(2)[0]            # C, HW
    perm = torch.tensor([3, 1, 4, 0, 2, 5])
    f_perm = f.flatten(2)[:, :, perm].reshape(1, 4, 2, 3)
    out_perm = mod(f_perm, text).flatten(2)[0]
    assert torch.allclose(out[:, perm], out_perm, atol=1e-12)


def test_key_mask_restricts_attention():
    mod = CrossModalAlignment(4, 8)
    f = torch.randn(2, 4, 2, 2)
    text = torch.randn(2, 5, 8)
    mask = torch.tensor([[True, True, False, False, False],
                         [True, True, True, True, True]])
    attn, _ = mod.attention(f, text, key_mask=mask)
    assert torch.all(attn[0, :, 2:] == 0.0)
    sums = attn.sum(dim=-1)
    assert torch.allclose(sums, torch.ones_like(sums), atol=1e-6)


def test_channel_mismatch_rejected():
    mod = CrossModalAlignment(8, 16)
    with pytest.raises(ValueError, match="channels"):
        mod(torch.randn(1, 4, 2, 2), torch.randn(3, 16))
    with pytest.raises(ValueError, match="text dim"):
        mod(torch.randn(1, 8, 2, 2), torch.randn(3, 8))


def test_cross_modal_align_wrapper():
    mod = CrossModalAlignment(8, 16)
    emb = TextEmbedding(matrix=torch.randn(3, 16), tokens=("a", "b", "c"))
    f = torch.randn(1, 8, 4, 4)
    out = cross_modal_align(f, emb, mod)
    assert out.shape == f.shape


def test_alignment_gradients_match_finite_differences():
    torch.manual_seed(2)
    mod = CrossModalAlignment(3, 4).double()
    f = torch.randn(1, 3, 2, 2, dtype=torch.float64, requires_grad=True)
    text = torch.randn(2, 4, dtype=torch.float64)
    target = torch.rand(1, 3, 2, 2, dtype=torch.float64)

    def fn():
        return ((mod(f, text) - target) ** 2).mean()

    check_grads(fn, [f, mod.w_q, mod.w_k, mod.w_v], max_entries_per_tensor=4)
