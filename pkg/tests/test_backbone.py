import numpy as np
import pytest
import torch

from smml.backbone import (
    ArchConfig,
    Branch,
    build_branch,
    load_checkpoint,
    save_checkpoint,
)
from smml.errors import ShapeError, ValidationError
from smml.masking import ModalityMask, apply_mask


@pytest.fixture(scope="module")
def branch():
    return build_branch(ArchConfig(), seed=123, dtype=torch.float64)


def _zero_params(module):
    with torch.no_grad():
        for p in module.parameters():
            p.zero_()


def test_encoder_shape_contract(branch):
    feats = branch.encoders[0](torch.randn(1, 1, 16, 16, 16, dtype=torch.float64))
    assert [tuple(f.shape) for f in feats] == [
        (1, 8, 16, 16, 16), (1, 8, 8, 8, 8), (1, 8, 4, 4, 4)]


def test_encoder_rejects_indivisible_dims(branch):
    with pytest.raises(ShapeError):
        branch.encoders[0](torch.randn(1, 1, 10, 16, 16, dtype=torch.float64))


def test_encoder_zero_params_zero_input_gives_zero():
    b = build_branch(ArchConfig(), seed=0, dtype=torch.float64)
    _zero_params(b.encoders[0])
    outs = b.encoders[0](torch.zeros(1, 1, 16, 16, 16, dtype=torch.float64))
    for out in outs:
        assert torch.equal(out, torch.zeros_like(out))


def test_encoder_eval_determinism(branch):
    branch.eval()
    x = torch.randn(1, 1, 16, 16, 16, dtype=torch.float64)
    a, b = branch.encoders[0](x), branch.encoders[0](x)
    assert all(torch.equal(u, v) for u, v in zip(a, b))


def test_fusion_singleton_mask_weight_one(branch):
    fusion = branch.fusions[-1]
    feats = torch.randn(1, 4, 8, 4, 4, 4, dtype=torch.float64)
    mask = ModalityMask((0, 0, 1, 0))
    masked = apply_mask(feats, mask)
    fused = fusion(masked, mask)
    # with one support point the softmax weight is 1: fused == value(slice 2)
    expected = fusion.value(masked[:, 2])
    assert torch.allclose(fused, expected, atol=0, rtol=0)


def test_fusion_ignores_masked_modality_bitwise(branch):
    vols = torch.randn(1, 4, 16, 16, 16, dtype=torch.float64)
    mask = ModalityMask((1, 0, 1, 1))
    logits_a, fused_a = branch.forward_masked(vols, mask)
    perturbed = vols.clone()
    perturbed[:, 1] += torch.randn_like(perturbed[:, 1]) * 10
    logits_b, fused_b = branch.forward_masked(perturbed, mask)
    assert torch.equal(logits_a, logits_b)
    assert torch.equal(fused_a, fused_b)


def test_fusion_uniform_weights_for_identical_features(branch):
    fusion = branch.fusions[-1]
    one = torch.randn(1, 1, 8, 4, 4, 4, dtype=torch.float64)
    feats = one.expand(1, 4, 8, 4, 4, 4).contiguous()
    mask = ModalityMask((1, 1, 1, 1))
    fused = fusion(feats, mask)
    # uniform simplex over identical values: fused equals the shared value
    expected = fusion.value(one[:, 0])
    assert torch.allclose(fused, expected, rtol=1e-12, atol=1e-12)


def test_fusion_rejects_all_absent(branch):
    feats = torch.zeros(1, 4, 8, 4, 4, 4, dtype=torch.float64)
    with pytest.raises(ValidationError):
        branch.fusions[-1](feats, ModalityMask((0, 0, 0, 0)))


def _fused_pyramid(rng_seed, d_f=16, dims=(16, 16, 16), levels=2, dtype=torch.float64):
    g = torch.Generator().manual_seed(rng_seed)
    scales = []
    for lvl in range(levels + 1):
        shape = (1, d_f) + tuple(d // 2 ** lvl for d in dims)
        scales.append(torch.randn(shape, generator=g, dtype=dtype))
    return scales


def test_decoder_shape_and_determinism(branch):
    branch.eval()
    fused = _fused_pyramid(3)
    out = branch.decoder(fused)
    assert out.shape == (1, 4, 16, 16, 16)
    assert torch.equal(out, branch.decoder(fused))


def test_decoder_gradient_matches_finite_differences():
    import oracles

    torch.manual_seed(5)
    arch = ArchConfig(K=2, C=2, enc_channels=4, fused_channels=4, levels=1)
    b = build_branch(arch, seed=5, dtype=torch.float64)
    skip = torch.randn(1, 4, 4, 4, 4, dtype=torch.float64)
    fused0 = torch.randn(1, 4, 2, 2, 2, dtype=torch.float64)
    target = torch.randn(1, 2, 4, 4, 4, dtype=torch.float64)

    def scalar(x):
        with torch.no_grad():
            t = torch.as_tensor(x, dtype=torch.float64).reshape(fused0.shape)
            return float(((b.decoder([skip, t]) - target) ** 2).sum())

    fused = fused0.clone().requires_grad_(True)
    ((b.decoder([skip, fused]) - target) ** 2).sum().backward()
    fd = oracles.finite_diff_grad(scalar, fused0.numpy())
    analytic = fused.grad.numpy()
    denom = max(np.abs(fd).max(), 1e-12)
    assert np.abs(analytic - fd).max() / denom < 1e-3


def test_refine_forward_contract(branch):
    x = torch.randn(1, 20, 16, 16, 16, dtype=torch.float64)
    out = branch.refiner(x)
    assert out.shape == (1, 4, 16, 16, 16)
    with pytest.raises(ShapeError):
        branch.refiner(torch.randn(1, 19, 16, 16, 16, dtype=torch.float64))


def test_refine_zero_input_zero_bias_gives_zero():
    b = build_branch(ArchConfig(), seed=9, dtype=torch.float64)
    with torch.no_grad():
        for name, p in b.refiner.named_parameters():
            if "bias" in name:
                p.zero_()
    out = b.refiner(torch.zeros(1, 20, 16, 16, 16, dtype=torch.float64))
    assert torch.equal(out, torch.zeros_like(out))


def test_branches_equal_param_count_different_values():
    b1 = build_branch(ArchConfig(), seed=1)
    b2 = build_branch(ArchConfig(), seed=2)
    n1 = sum(p.numel() for p in b1.parameters())
    n2 = sum(p.numel() for p in b2.parameters())
    assert n1 == n2
    diffs = [not torch.equal(p1, p2) for p1, p2 in zip(b1.parameters(), b2.parameters())]
    assert any(diffs)


def test_forward_nan_free(branch):
    vols = torch.randn(2, 4, 16, 16, 16, dtype=torch.float64) * 100
    logits, fused = branch.forward_masked(vols, ModalityMask((1, 1, 0, 1)))
    assert torch.isfinite(logits).all()
    assert torch.isfinite(fused).all()


def test_checkpoint_roundtrip(tmp_path):
    b1 = build_branch(ArchConfig(), seed=1, dtype=torch.float64)
    b2 = build_branch(ArchConfig(), seed=2, dtype=torch.float64)
    save_checkpoint(tmp_path / "ckpt", {"branch1": b1, "branch2": b2}, seed=1, epoch=5)
    branches, manifest = load_checkpoint(tmp_path / "ckpt")
    assert manifest["epoch"] == 5
    for name, orig in (("branch1", b1), ("branch2", b2)):
        for k, v in orig.state_dict().items():
            assert torch.equal(branches[name].state_dict()[k], v)
    vols = torch.randn(1, 4, 16, 16, 16, dtype=torch.float64)
    m = ModalityMask((1, 1, 1, 1))
    assert torch.equal(branches["branch1"].forward_masked(vols, m)[0],
                       b1.forward_masked(vols, m)[0])
