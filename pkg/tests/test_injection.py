import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from petprompt.errors import ConfigError, ShapeError
from petprompt.gradcheck import suite_injection
from petprompt.injection import GFL, MHTA, PromptInjection
from petprompt.layers import identity_kernel_

pytestmark = pytest.mark.usefixtures("float64")


def softmax(x):
    e = np.exp(x - x.max(axis=-1, keepdims=True))
    return e / e.sum(axis=-1, keepdims=True)


def zero_residual_projections(inj):
    with torch.no_grad():
        for blk in inj.blocks:
            blk.attn.project_out.weight.zero_()
            blk.ffn.project_out.weight.zero_()


class TestMHTA:
    def test_zero_projection_is_identity(self):
        mhta = MHTA(4, heads=2)
        with torch.no_grad():
            mhta.project_out.weight.zero_()
        x = torch.randn(2, 4, 3, 3, 3)
        assert torch.equal(mhta(x), x)

    def test_single_voxel_attention_by_hand(self, rng):
        mhta = MHTA(2, heads=1)
        with torch.no_grad():
            for p in mhta.parameters():
                p.copy_(torch.from_numpy(rng.normal(size=p.shape)))
        x = rng.normal(size=2)
        out = mhta(torch.from_numpy(x).view(1, 2, 1, 1, 1)).detach().numpy().reshape(2)

        P = {n: p.detach().numpy() for n, p in mhta.named_parameters()}
        xn = (x - x.mean()) / np.sqrt(x.var() + 1e-5) * P["norm.weight"] + P["norm.bias"]
        qkv = P["qkv.weight"].reshape(6, 2) @ xn
        qkv = qkv * P["qkv_dw.weight"][:, 0, 1, 1, 1]  # centre tap only
        q, k, v = qkv[:2], qkv[2:4], qkv[4:]
        # L2 normalization over a single spatial position reduces to the sign
        q, k = np.sign(q), np.sign(k)
        attn = softmax(np.outer(q, k) * P["temperature"].item())
        expected = x + P["project_out.weight"].reshape(2, 2) @ (attn @ v)
        assert np.allclose(out, expected, atol=1e-10, rtol=0)

    def test_rows_sum_to_one(self):
        mhta = MHTA(8, heads=4)
        _, attn = mhta.attention(torch.randn(2, 8, 4, 4, 2) * 3)
        assert attn.shape == (2, 4, 2, 2)
        assert torch.allclose(attn.sum(-1), torch.ones(2, 4, 2), atol=1e-6)

    def test_heads_must_divide_channels(self):
        with pytest.raises(ConfigError):
            MHTA(6, heads=4)


class TestGFL:
    def test_zero_gate_is_identity(self):
        gfl = GFL(4, expansion=2.0)
        hidden = 8
        with torch.no_grad():
            gfl.project_in.weight[:hidden].zero_()
        x = torch.randn(1, 4, 3, 3, 3)
        assert torch.equal(gfl(x), x)

    def test_zero_projection_is_identity(self):
        gfl = GFL(4)
        with torch.no_grad():
            gfl.project_out.weight.zero_()
        x = torch.randn(1, 4, 2, 2, 2)
        assert torch.equal(gfl(x), x)

    def test_expansion_width(self):
        gfl = GFL(4, expansion=2.0)
        assert gfl.project_in.out_channels == 16

    def test_bad_expansion(self):
        with pytest.raises(ConfigError):
            GFL(4, expansion=0.5)


class TestInjection:
    def test_zero_prompt_decouples_prompt_path(self, rng):
        inj = PromptInjection(4, heads=2)
        with torch.no_grad():
            inj.reduce.weight.zero_()
            for c in range(4):
                inj.reduce.weight[c, c, 1, 1, 1] = 1.0
        feat = torch.randn(1, 4, 3, 3, 3)
        zero = torch.zeros_like(feat)
        before = inj(feat, zero)
        assert torch.allclose(before, inj.blocks(feat))
        with torch.no_grad():
            inj.reduce.weight[:, 4:].normal_()
        assert torch.equal(inj(feat, zero), before)

    def test_identity_path_with_zeroed_projections(self):
        inj = PromptInjection(4, heads=2)
        zero_residual_projections(inj)
        feat, prompt = torch.randn(2, 4, 3, 4, 2), torch.randn(2, 4, 3, 4, 2)
        assert torch.equal(inj(feat, prompt), inj.reduce(torch.cat([feat, prompt], 1)))

    def test_identity_reduce_and_zero_projections_return_feature(self):
        inj = PromptInjection(3, heads=1)
        zero_residual_projections(inj)
        with torch.no_grad():
            inj.reduce.weight.zero_()
            inj.reduce.bias.zero_()
            for c in range(3):
                inj.reduce.weight[c, c, 1, 1, 1] = 1.0
        feat = torch.randn(1, 3, 2, 2, 2)
        assert torch.equal(inj(feat, torch.randn_like(feat)), feat)

    @settings(max_examples=25, deadline=None)
    @given(
        dims=st.tuples(st.integers(1, 5), st.integers(1, 5), st.integers(1, 5)),
        heads=st.sampled_from([1, 2, 4]),
        per_head=st.integers(1, 3),
        batch=st.integers(1, 2),
    )
    def test_shape_preserving(self, dims, heads, per_head, batch):
        c = heads * per_head
        inj = PromptInjection(c, heads=heads)
        feat = torch.randn(batch, c, *dims)
        assert inj(feat, torch.randn_like(feat)).shape == feat.shape

    def test_shape_mismatch(self):
        inj = PromptInjection(4)
        with pytest.raises(ShapeError):
            inj(torch.randn(1, 4, 2, 2, 2), torch.randn(1, 4, 2, 2, 3))

    def test_identity_kernel_helper(self):
        conv = torch.nn.Conv3d(3, 3, 3, padding=1, groups=3)
        identity_kernel_(conv)
        x = torch.randn(1, 3, 4, 4, 4)
        assert torch.equal(conv(x), x)


def test_gradcheck_injection_block():
    results = suite_injection(seed=2, tolerance=1e-4)
    assert all(r.passed for r in results), [r for r in results if not r.passed]
    assert {r.suite for r in results} == {"injection", "mhta", "gfl"}
