import pytest
import torch
import torch.nn.functional as F

from brainsegnet.config import ABLATION_VARIANTS, AblationSwitches, DecoderConfig, EncoderConfig
from brainsegnet.decoder import (CSA, BoundaryRefine, ChannelAttention, Decoder, DualASPP,
                                 SpatialAttention)
from brainsegnet.errors import ConfigError
from brainsegnet.model import BrainSegNet

from conftest import fd_check


def test_dual_aspp_shape_and_fusion_width():
    aspp = DualASPP(96, 128, (1, 6, 12, 18))
    assert aspp(torch.randn(2, 96, 32, 32)).shape == (2, 128, 32, 32)
    assert aspp.fusion_in_channels == 5 * 128
    assert aspp.branches[0][0].kernel_size == (1, 1)
    assert [b[0].dilation[0] for b in aspp.branches[1:]] == [6, 12, 18]


def test_dual_aspp_handles_maps_smaller_than_receptive_field():
    aspp = DualASPP(8, 8)
    assert aspp(torch.randn(1, 8, 2, 3)).shape == (1, 8, 2, 3)


def test_dual_aspp_constant_in_constant_out():
    aspp = DualASPP(8, 16)
    x = torch.randn(2, 8, 1, 1).expand(2, 8, 20, 20).contiguous()
    out = aspp(x)
    torch.testing.assert_close(out, out[..., :1, :1].expand_as(out), rtol=0, atol=1e-5)


def test_bottom_branch_sees_pooled_context():
    torch.manual_seed(0)
    aspp = DualASPP(4, 8)
    seen = {}
    aspp.branches[-1].register_forward_hook(lambda m, inp, out: seen.__setitem__("in", inp[0]))
    x = torch.randn(1, 4, 10, 10)
    aspp(x)
    expected = x + aspp.bottom_pool[1](x.mean(dim=(2, 3), keepdim=True))
    torch.testing.assert_close(seen["in"], expected)


def test_channel_attention_zero_mlp_gives_half():
    ca = ChannelAttention(16, 8)
    torch.nn.init.zeros_(ca.mlp[2].weight)
    torch.testing.assert_close(ca(torch.randn(3, 16, 5, 5)), torch.full((3, 16, 1, 1), 0.5))


def test_channel_attention_reduction_must_divide():
    with pytest.raises(ConfigError):
        ChannelAttention(12, 8)


def test_gates_in_open_unit_interval():
    torch.manual_seed(0)
    ca, sa = ChannelAttention(16, 8), SpatialAttention(7)
    for _ in range(100):
        x = torch.randn(2, 16, 6, 6) * 3
        for w in (ca(x), sa(x)):
            assert (w > 0).all() and (w < 1).all()


def test_channel_attention_permutation_equivariance():
    torch.manual_seed(0)
    c = 16
    ca = ChannelAttention(c, 4).double()
    perm = torch.randperm(c)
    conj = ChannelAttention(c, 4).double()
    with torch.no_grad():
        # permuting the input columns of layer 1 and the output rows of layer 2
        conj.mlp[0].weight.copy_(ca.mlp[0].weight[:, perm])
        conj.mlp[2].weight.copy_(ca.mlp[2].weight[perm])
    x = torch.randn(2, c, 5, 5, dtype=torch.float64)
    w = ca(x)
    w_perm = conj(x[:, perm])
    torch.testing.assert_close(w_perm, w[:, perm], rtol=0, atol=1e-12)


def test_spatial_attention_contracts():
    sa = SpatialAttention(7)
    assert sa(torch.randn(2, 3, 9, 11)).shape == (2, 1, 9, 11)
    assert sa(torch.randn(2, 40, 9, 11)).shape == (2, 1, 9, 11)
    x = torch.randn(1, 6, 1, 1).expand(1, 6, 12, 12)
    m = sa(x)
    torch.testing.assert_close(m, m[..., :1, :1].expand_as(m), rtol=0, atol=1e-6)
    torch.nn.init.zeros_(sa.conv.weight)
    torch.testing.assert_close(sa(torch.randn(2, 3, 4, 4)), torch.full((2, 1, 4, 4), 0.5))
    with pytest.raises(ConfigError):
        SpatialAttention(4)


def test_csa_contracts():
    csa = CSA(16, 8, 7)
    x = torch.randn(2, 16, 8, 8)
    out = csa(x)
    assert out.shape == x.shape
    assert (out.abs() <= x.abs()).all()
    torch.nn.init.zeros_(csa.channel.mlp[2].weight)
    torch.nn.init.zeros_(csa.spatial.conv.weight)
    torch.testing.assert_close(csa(x), 0.25 * x, rtol=0, atol=1e-7)


def test_boundary_refine_shapes_and_range():
    cfg = DecoderConfig(in_channels=32, aspp_channels=32, num_classes=96, upsample_factor=8)
    dec = Decoder(cfg)
    logits, edge = dec.forward.__self__.br(torch.randn(2, 32, 32, 32))
    up = F.interpolate(logits, scale_factor=8, mode="bilinear", align_corners=False)
    assert up.shape == (2, 96, 256, 256)
    assert edge.shape == (2, 1, 32, 32)
    assert (edge > 0).all() and (edge < 1).all()


def test_edge_loss_reaches_edge_head():
    cfg = DecoderConfig(in_channels=8, aspp_channels=8, num_classes=3, br_channels=8)
    br = BoundaryRefine(8, cfg)
    _, edge = br(torch.randn(2, 8, 8, 8))
    target = (torch.rand(2, 1, 8, 8) > 0.5).float()
    F.binary_cross_entropy(edge, target).backward()
    for conv in (br.edge_head[0], br.edge_head[2]):
        assert conv.weight.grad is not None and conv.weight.grad.abs().sum() > 0


def test_transposed_upsampling_shape():
    cfg = DecoderConfig(in_channels=16, aspp_channels=16, num_classes=4, upsample_factor=4,
                        upsample_mode="transposed")
    logits, edge = Decoder(cfg)(torch.randn(1, 16, 8, 8))
    assert logits.shape == (1, 4, 32, 32) and edge.shape == (1, 1, 8, 8)


@pytest.mark.parametrize("module", ["aspp", "csa", "br"])
def test_decoder_stage_finite_difference(module):
    torch.manual_seed(0)
    cfg = DecoderConfig(in_channels=8, aspp_channels=8, num_classes=4, br_channels=8)
    net = {"aspp": lambda: DualASPP(8, 8), "csa": lambda: CSA(8, 8, 7),
           "br": lambda: BoundaryRefine(8, cfg)}[module]().double()
    fn = net if module != "br" else (lambda t: torch.cat([o.flatten(1) for o in net(t)], 1))
    x = torch.randn(1, 8, 16, 16, dtype=torch.float64)
    assert fd_check(fn, x) < 1e-3


# -- wiring ---------------------------------------------------------------------

def decoder_for(switches, **kw):
    cfg = DecoderConfig(in_channels=16, aspp_channels=16, num_classes=5, br_channels=8, **kw)
    return Decoder(cfg, switches)


def names(module):
    return {n for n, _ in module.named_parameters()}


def test_full_wiring_order():
    dec = decoder_for(AblationSwitches())
    trace = {}
    dec.aspp.register_forward_hook(lambda m, i, o: trace.__setitem__("aspp", o))
    dec.csa.register_forward_hook(lambda m, i, o: trace.__setitem__("csa_in", i[0]) or trace.__setitem__("csa", o))
    dec.br.register_forward_hook(lambda m, i, o: trace.__setitem__("br_in", i[0]))
    logits, edge = dec(torch.randn(2, 16, 4, 4))
    assert edge is not None and logits.shape == (2, 5, 32, 32)
    assert trace["csa_in"] is trace["aspp"] and trace["br_in"] is trace["csa"]


def test_no_csa_feeds_aspp_into_br():
    dec = decoder_for(AblationSwitches(use_csa=False))
    trace = {}
    dec.aspp.register_forward_hook(lambda m, i, o: trace.__setitem__("aspp", o))
    dec.br.register_forward_hook(lambda m, i, o: trace.__setitem__("br_in", i[0]))
    dec(torch.randn(1, 16, 4, 4))
    assert trace["br_in"] is trace["aspp"]
    assert not any(n.startswith("csa.") for n in names(dec))


def test_no_aspp_connects_encoder_to_csa():
    dec = decoder_for(AblationSwitches(use_aspp=False))
    trace = {}
    dec.csa.register_forward_hook(lambda m, i, o: trace.__setitem__("csa_in", i[0]))
    x = torch.randn(1, 16, 4, 4)
    dec(x)
    torch.testing.assert_close(trace["csa_in"], dec.channel_match(x))
    assert not any(n.startswith("aspp.") for n in names(dec))


def test_no_br_uses_mlp_and_has_no_edge():
    dec = decoder_for(AblationSwitches(use_br=False))
    trace = {}
    dec.csa.register_forward_hook(lambda m, i, o: trace.__setitem__("csa", o))
    dec.mlp_head.register_forward_hook(lambda m, i, o: trace.__setitem__("mlp_in", i[0]))
    logits, edge = dec(torch.randn(2, 16, 4, 4))
    assert edge is None and logits.shape == (2, 5, 32, 32)
    assert trace["mlp_in"] is trace["csa"]
    assert not any(n.startswith("br.") for n in names(dec))
    logits.sum().backward()
    assert all(p.grad is not None for p in dec.parameters())


def test_logits_finite_for_bounded_inputs():
    torch.manual_seed(0)
    for switches in ABLATION_VARIANTS.values():
        dec = decoder_for(switches)
        for _ in range(5):
            x = (torch.rand(2, 16, 6, 6) * 2 - 1) * 10
            logits, _ = dec(x)
            assert torch.isfinite(logits).all()


def manifest(switches):
    enc = EncoderConfig(embed_dim=16, num_blocks=4, num_heads=2, input_size=(32, 32), adapter_bottleneck=4)
    dec = DecoderConfig(in_channels=16, aspp_channels=16, num_classes=5, br_channels=8)
    return set(BrainSegNet(enc, dec, switches).parameter_manifest())


STAGE_PREFIX = {"no_unet": "encoder.fuse.", "no_aspp": "decoder.aspp.",
                "no_csa": "decoder.csa.", "no_br": "decoder.br."}
STAND_INS = {"no_aspp": "decoder.channel_match.", "no_br": "decoder.mlp_head."}


@pytest.mark.parametrize("variant", list(STAGE_PREFIX))
def test_ablation_manifest_parity(variant):
    full = manifest(AblationSwitches())
    ablated = manifest(ABLATION_VARIANTS[variant])
    removed = full - ablated
    added = ablated - full
    assert removed and removed == {n for n in full if n.startswith(STAGE_PREFIX[variant])}
    assert all(n.startswith(STAND_INS.get(variant, "\0")) for n in added)
    assert bool(added) == (variant in STAND_INS)


@pytest.mark.parametrize("variant", list(STAGE_PREFIX))
def test_shared_parameters_load_between_variants(variant):
    enc = EncoderConfig(embed_dim=16, num_blocks=4, num_heads=2, input_size=(32, 32), adapter_bottleneck=4)
    dec = DecoderConfig(in_channels=16, aspp_channels=16, num_classes=5, br_channels=8)
    torch.manual_seed(0)
    full = BrainSegNet(enc, dec)
    torch.manual_seed(1)
    other = BrainSegNet(enc, dec, ABLATION_VARIANTS[variant])
    shared = {k: v for k, v in full.state_dict().items() if k in other.state_dict()}
    missing, unexpected = other.load_state_dict(shared, strict=False)
    assert not unexpected
    assert set(missing) == set(other.state_dict()) - set(full.state_dict())
    for k, v in shared.items():
        assert torch.equal(other.state_dict()[k], v)


def test_translation_equivariance_interior():
    torch.manual_seed(0)
    cfg = DecoderConfig(in_channels=8, aspp_channels=16, num_classes=4, br_channels=8, upsample_factor=1)
    dec = Decoder(cfg).double()
    background = torch.randn(1, 8, 1, 1, dtype=torch.float64)
    x = background.expand(1, 8, 48, 48).clone()
    x[..., 21:27, 21:27] += torch.randn(1, 8, 6, 6, dtype=torch.float64)
    shifted = torch.roll(x, shifts=(1, 1), dims=(2, 3))
    with torch.no_grad():
        a, _ = dec.head(x)
        b, _ = dec.head(shifted)
    window = slice(8, 40)
    interior_a = a[..., window, window]
    interior_b = b[..., 9:41, 9:41]
    assert (interior_a - interior_b).abs().max() < 1e-4
