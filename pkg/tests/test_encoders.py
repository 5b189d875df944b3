import numpy as np
import pytest
import torch

from cdpdnet.encoders import (
    Adaptor3D, CNNEncoder, DenseBackbone, StandinViT, dense_encode, level_shapes, slice_to_2d,
)


def test_cnn_table_shapes_at_reference_input():
    enc = CNNEncoder().eval()
    with torch.no_grad():
        levels, bottleneck, stem = enc(torch.zeros(1, 1, 96, 96, 96), return_stem=True)
    assert stem.shape == (1, 32, 96, 96, 96)
    expected = [(64, 96, 48, 48), (128, 48, 24, 24), (256, 24, 12, 12), (320, 12, 6, 6)]
    assert [tuple(l.shape[1:]) for l in levels] == expected
    assert bottleneck is levels[-1]
    assert level_shapes((96, 96, 96)) == [e[1:] for e in expected]


def test_slice_to_2d_shapes():
    v = torch.rand(1, 1, 96, 96, 96)
    assert slice_to_2d(v, 16).shape == (96, 3, 96, 96)
    assert slice_to_2d(v, 14).shape == (96, 3, 98, 98)
    s = slice_to_2d(torch.full((2, 1, 4, 8, 8), 0.3), 14)
    assert torch.equal(s[:, 0], s[:, 1]) and torch.equal(s[:, 1], s[:, 2])
    assert torch.allclose(s, torch.tensor(0.3))


def test_slice_to_2d_keeps_slice_content():
    v = torch.rand(1, 1, 5, 16, 16)
    s = slice_to_2d(v, 16)
    for z in range(5):
        assert torch.equal(s[z, 0], v[0, 0, z])


def test_standin_contract():
    a, b = StandinViT(seed=4, embed_dim=16), StandinViT(seed=4, embed_dim=16)
    for pa, pb in zip(a.parameters(), b.parameters()):
        assert torch.equal(pa, pb)
        assert not pa.requires_grad
    a.train()
    assert not a.training
    x = torch.rand(3, 3, 32, 48)
    taps = a(x)
    assert len(taps) == 4 and all(t.shape == (3, 16, 2, 3) for t in taps)
    assert all(not torch.equal(taps[i], taps[i + 1]) for i in range(3))
    with pytest.raises(ValueError, match="4 tap"):
        StandinViT(depth=4, tap_layers=(1, 2, 3))


class _TableBackbone(DenseBackbone):
    """Deterministic fake with the token-grid arithmetic of a 14-pixel ViT-S."""
    patch_size, embed_dim, tap_layers = 14, 384, (0, 1, 2, 3)

    def tokens(self, images):
        g = torch.nn.functional.avg_pool2d(images[:, :1], 14)
        return [g.expand(-1, self.embed_dim, -1, -1) * (k + 1) for k in range(4)]


def test_dense_encode_stack_shape():
    slices = slice_to_2d(torch.rand(1, 1, 96, 96, 96), 14)
    out = dense_encode(slices, _TableBackbone(), batch=1, chunk=32)
    assert [tuple(t.shape) for t in out] == [(1, 384, 96, 7, 7)] * 4


def test_dense_encode_axial_permutation_covariance():
    bb = StandinViT(seed=1, embed_dim=16)
    vol = torch.rand(1, 1, 6, 32, 32)
    perm = torch.tensor([3, 0, 5, 1, 4, 2])
    ref = dense_encode(slice_to_2d(vol, 16), bb)
    out = dense_encode(slice_to_2d(vol[:, :, perm], 16), bb)
    for r, o in zip(ref, out):
        torch.testing.assert_close(o, r[:, :, perm], rtol=0, atol=1e-6)


def test_dense_encode_identical_slices():
    bb = StandinViT(seed=1, embed_dim=16)
    vol = torch.rand(1, 1, 3, 16, 16)
    vol[:, :, 2] = vol[:, :, 0]
    for t in dense_encode(slice_to_2d(vol, 16), bb):
        assert torch.equal(t[:, :, 0], t[:, :, 2])


def test_dense_encode_batched_order():
    bb = StandinViT(seed=1, embed_dim=16)
    vol = torch.rand(2, 1, 3, 16, 16)
    both = dense_encode(slice_to_2d(vol, 16), bb, batch=2)
    second = dense_encode(slice_to_2d(vol[1:], 16), bb, batch=1)
    torch.testing.assert_close(both[0][1:], second[0], rtol=0, atol=1e-6)


def test_dense_encode_names_failing_slices():
    class Broken(_TableBackbone):
        def tokens(self, images):
            raise RuntimeError("boom")
    with pytest.raises(RuntimeError, match=r"slices 0\.\.3"):
        dense_encode(torch.zeros(8, 3, 14, 14), Broken(), chunk=4)


def test_frozen_backbone_after_optimizer_steps():
    bb = StandinViT(seed=0, embed_dim=16)
    before = [p.clone() for p in bb.parameters()]
    ad = Adaptor3D(16, 8)
    opt = torch.optim.AdamW(list(ad.parameters()) + list(bb.parameters()), lr=1e-2)
    for _ in range(3):
        taps = dense_encode(slice_to_2d(torch.rand(1, 1, 2, 16, 16), 16), bb)
        ad(taps[0]).sum().backward()
        opt.step()
        opt.zero_grad()
    assert all(torch.equal(a, b) for a, b in zip(before, bb.parameters()))


# adaptor oracle

def _conv3d_same_oracle(x, w, b, groups=1):
    """Direct-loop 3D cross-correlation with zero padding, float64."""
    x, w = x.double().numpy(), w.double().numpy()
    cin, z, y, xx = x.shape
    cout, cpg, k = w.shape[0], w.shape[1], w.shape[2]
    p = k // 2
    xp = np.pad(x, ((0, 0), (p, p), (p, p), (p, p)))
    out = np.zeros((cout, z, y, xx))
    per = cout // groups
    for o in range(cout):
        g = o // per
        for ci in range(cpg):
            src = xp[g * cpg + ci]
            for dz in range(k):
                for dy in range(k):
                    for dx in range(k):
                        out[o] += w[o, ci, dz, dy, dx] * src[dz:dz + z, dy:dy + y, dx:dx + xx]
        out[o] += 0.0 if b is None else float(b[o])
    return out


def test_adaptor_matches_loop_oracle():
    torch.manual_seed(0)
    ad = Adaptor3D(3, 2).double()
    x = torch.randn(1, 3, 4, 3, 5, dtype=torch.float64)
    mid = _conv3d_same_oracle(x[0], ad.depthwise.weight.detach(), ad.depthwise.bias.detach(), groups=3)
    ref = np.maximum(_conv3d_same_oracle(torch.from_numpy(mid), ad.proj.weight.detach(), ad.proj.bias.detach()), 0)
    np.testing.assert_allclose(ad(x)[0].detach().numpy(), ref, rtol=1e-5, atol=1e-12)


def test_adaptor_trivial_cases():
    ad = Adaptor3D(2, 2)
    for conv in (ad.depthwise, ad.proj):
        torch.nn.init.zeros_(conv.bias)
    assert not ad(torch.zeros(1, 2, 3, 3, 3)).any()
    assert (ad(torch.randn(1, 2, 3, 3, 3)) >= 0).all()
    with torch.no_grad():
        ad.depthwise.weight.zero_()
        ad.depthwise.weight[:, 0, 1, 1, 1] = 1
        ad.proj.weight.zero_()
        ad.proj.weight[0, 0, 1, 1, 1] = ad.proj.weight[1, 1, 1, 1, 1] = 1
    x = torch.randn(1, 2, 3, 4, 5)
    assert torch.equal(ad(x), torch.relu(x))


def test_adaptor_gradcheck():
    torch.manual_seed(1)
    ad = Adaptor3D(2, 2).double()
    x = torch.randn(1, 2, 2, 2, 2, dtype=torch.float64)
    params = list(ad.parameters())

    def f(*ps):
        out = torch.func.functional_call(ad, {n: p for (n, _), p in zip(ad.named_parameters(), ps)}, (x,))
        return out
    assert torch.autograd.gradcheck(f, tuple(p.detach().requires_grad_() for p in params), rtol=1e-3, atol=1e-6)
