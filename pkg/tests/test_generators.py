import numpy as np
import pytest
import torch
from pydantic import ValidationError

from lenslesskit.config import GeneratorSpec
from lenslesskit.errors import NumericalError, ShapeError
from lenslesskit.generators import (
    Fusion,
    SparseBatch,
    SparsePsfEncoder,
    TUNet,
    UnfoldPsfEncoder,
    YNet,
    build_generator,
    count_parameters,
    generator_forward,
)
from lenslesskit.psf import densify_batch, caustic_psf, random_permutation, shuffle_psf, split_sections

from helpers import finite_difference_agreement


def small_spec(**kw):
    base = dict(base_channels=8, depth=4, input_resolution=128, psf_channels=[8, 16, 16, 16, 16])
    return GeneratorSpec(**{**base, **kw})


def psf_batch(n, size, seed=0):
    grid = split_sections(caustic_psf(size, 0), 5, 5)
    rng = np.random.default_rng(seed)
    return torch.as_tensor(np.stack([shuffle_psf(grid, random_permutation(25, rng)) for _ in range(n)]),
                           dtype=torch.float32)[:, None]


@pytest.fixture(scope="module")
def ynet():
    torch.manual_seed(0)
    return build_generator(small_spec()).eval()


def test_ynet_shape(ynet):
    y = torch.rand(2, 3, 128, 128)
    out = generator_forward(ynet, y, ynet.prepare_psf(psf_batch(2, 128)))
    assert out.shape == (2, 3, 128, 128)
    assert torch.isfinite(out).all() and out.min() >= 0 and out.max() <= 1


def test_tunet_stages_shape():
    torch.manual_seed(0)
    G = build_generator(small_spec(variant="TU")).eval()
    assert isinstance(G, TUNet)
    y = torch.rand(2, 3, 128, 128)
    intermediate, final = G.forward_stages(y, G.prepare_psf(psf_batch(2, 128)))
    assert intermediate.shape == final.shape == (2, 3, 128, 128)


def test_tunet_stage2_consumes_only_intermediate():
    torch.manual_seed(0)
    G = build_generator(small_spec(variant="TU", input_resolution=64)).eval()
    y = torch.rand(1, 3, 64, 64)
    with torch.no_grad():
        intermediate, final = G.forward_stages(y, G.prepare_psf(psf_batch(1, 64)))
        torch.testing.assert_close(G.stage2(intermediate), final, rtol=0, atol=0)


def test_ynet_heavier_than_tunet_stage1():
    spec = small_spec()
    y_params = count_parameters(YNet(spec))
    tu_stage1 = count_parameters(TUNet(spec.model_copy(update={"variant": "TU"})).stage1_modules())
    assert y_params > tu_stage1


def test_forward_deterministic(ynet):
    y = torch.rand(1, 3, 128, 128)
    psf = ynet.prepare_psf(psf_batch(1, 128))
    with torch.no_grad():
        assert torch.equal(ynet(y, psf), ynet(y, psf))


def test_output_depends_on_psf(ynet):
    y = torch.rand(1, 3, 128, 128)
    k = psf_batch(2, 128, seed=1)
    with torch.no_grad():
        a = ynet(y, ynet.prepare_psf(k[:1]))
        b = ynet(y, ynet.prepare_psf(k[1:]))
    assert (a - b).abs().max() > 0


def test_unfold_branch_depends_on_psf():
    torch.manual_seed(0)
    G = build_generator(small_spec(psf_branch="unfold", input_resolution=64, depth=3)).eval()
    y = torch.rand(1, 3, 64, 64)
    k = psf_batch(2, 64, seed=2)
    with torch.no_grad():
        a = G(y, G.prepare_psf(k[:1]))
        b = G(y, G.prepare_psf(k[1:]))
    assert a.shape == (1, 3, 64, 64) and (a - b).abs().max() > 0


def test_batch_order_independent(ynet):
    y = torch.rand(3, 3, 128, 128)
    k = psf_batch(3, 128)
    order = torch.tensor([2, 0, 1])
    with torch.no_grad():
        out = ynet(y, ynet.prepare_psf(k))
        shuffled = ynet(y[order], ynet.prepare_psf(k[order]))
    torch.testing.assert_close(shuffled, out[order], atol=1e-6, rtol=0)


def test_nan_guard():
    torch.manual_seed(0)
    G = build_generator(small_spec(input_resolution=32, depth=2))
    with torch.no_grad():
        G.decoder.head.bias.fill_(float("nan"))
    with pytest.raises(NumericalError):
        generator_forward(G, torch.rand(1, 3, 32, 32), G.prepare_psf(psf_batch(1, 32)))


def test_prepare_psf_fits_resolution(ynet):
    psf = ynet.prepare_psf(psf_batch(1, 64))
    assert isinstance(psf, SparseBatch)
    assert psf.coords.shape == (1, ynet.spec.pad_length, 2)
    assert psf.values.max() == pytest.approx(1.0)


# sparse encoder


def test_sparse_encoder_matches_dense_path():
    spec = small_spec()
    enc = SparsePsfEncoder(spec).eval()
    G = YNet(spec)
    s = G.prepare_psf(psf_batch(2, 128))
    with torch.no_grad():
        out = enc(s)
        ref = enc.forward_dense(densify_batch(s.coords, s.values, (128, 128)))
    torch.testing.assert_close(out, ref, rtol=0, atol=0)
    assert out.shape[-2:] == (spec.bottleneck_resolution,) * 2
    assert out.shape[1] == enc.out_channels


def test_sparse_encoder_zero_input():
    spec = small_spec()
    enc = SparsePsfEncoder(spec).eval()
    P = spec.pad_length
    zero = SparseBatch(torch.zeros(1, P, 2, dtype=torch.long), torch.zeros(1, P))
    with torch.no_grad():
        torch.testing.assert_close(enc(zero), enc.forward_dense(torch.zeros(1, 1, 128, 128)), rtol=0, atol=0)


# unfold encoder


def test_unfold_encoder_contract():
    spec = small_spec(psf_branch="unfold", input_resolution=64, depth=3)
    enc = UnfoldPsfEncoder(spec).eval()
    T, t = spec.tile_count, spec.tile_size
    assert (T, t) == (64, 8)
    with torch.no_grad():
        zero_a = enc(torch.zeros(1, T, t, t))
        zero_b = enc(torch.zeros(1, T, t, t))
        torch.testing.assert_close(zero_a, zero_b, rtol=0, atol=0)
        tiles = torch.rand(1, T, t, t)
        perm = torch.randperm(T, generator=torch.Generator().manual_seed(0))
        assert (enc(tiles) - enc(tiles[:, perm])).abs().max() > 0
    assert zero_a.shape[-2:] == (spec.bottleneck_resolution,) * 2
    with pytest.raises(ShapeError):
        enc(torch.zeros(1, T - 1, t, t))


def test_fusion_shape_mismatch():
    f = Fusion(4, 4, 8)
    with pytest.raises(ShapeError):
        f(torch.zeros(1, 4, 8, 8), torch.zeros(1, 4, 4, 4))


# spec validation


def test_spec_rejects_indivisible_resolution():
    with pytest.raises(ValidationError):
        GeneratorSpec(input_resolution=100, depth=4)


def test_spec_rejects_shallow_sparse_encoder():
    with pytest.raises(ValidationError):
        GeneratorSpec(depth=4, psf_layers=3)


def test_skipless_ynet_builds():
    G = build_generator(small_spec(input_resolution=32, depth=2, skip_connections=[False, True]))
    out = G(torch.rand(1, 3, 32, 32), G.prepare_psf(psf_batch(1, 32)))
    assert out.shape == (1, 3, 32, 32)


# gradient correctness


def test_parameter_gradients_finite_difference():
    torch.manual_seed(0)
    spec = GeneratorSpec(
        base_channels=4, depth=2, input_resolution=16, psf_channels=[4, 4, 4, 4, 4], psf_pad_fraction=1.0
    )
    G = build_generator(spec).double()
    y = torch.rand(2, 3, 16, 16, dtype=torch.float64)
    psf = G.prepare_psf(psf_batch(2, 32).double())
    probe = torch.rand(2, 3, 16, 16, dtype=torch.float64)

    def loss():
        return (G(y, psf) * probe).sum()

    frac = finite_difference_agreement(G, loss, samples=300)
    assert frac >= 0.99
