import numpy as np
import pytest
import torch

from hrhash.backbone import BackboneConfig, build_backbone, count_parameters, forward
from hrhash.core import Sample
from hrhash.errors import ConfigError, InvalidInputError

# recorded from a seeded build of the two-stage desk preset
DESK_PARAMETERS = 842_016
DESK_OUTPUT_SUM = -67.92506873607635
DESK_OUTPUT_SQUARES = 3205.4856097459324


def tiny_input():
    return torch.rand(2, 3, 32, 32, generator=torch.Generator().manual_seed(7))


@pytest.fixture(scope="module")
def desk():
    return build_backbone(BackboneConfig.desk(), seed=0).eval()


def test_desk_preset_is_small(desk):
    assert count_parameters(desk) == DESK_PARAMETERS < 1_000_000


def test_output_shape(desk):
    assert desk(torch.zeros(5, 3, 32, 32)).shape == (5, 256)
    cfg = BackboneConfig.desk(input_size=(64, 96), head_width=128)
    m = build_backbone(cfg, 0).eval()
    assert m(torch.zeros(1, 3, 64, 96)).shape == (1, 128)


def test_frozen_checksum(desk):
    with torch.no_grad():
        y = desk(tiny_input()).double()
    assert float(y.sum()) == pytest.approx(DESK_OUTPUT_SUM, rel=1e-5)
    assert float((y * y).sum()) == pytest.approx(DESK_OUTPUT_SQUARES, rel=1e-5)


def test_same_seed_bitwise_identical():
    x = tiny_input()
    a = build_backbone(BackboneConfig.desk(), seed=3).eval()
    b = build_backbone(BackboneConfig.desk(), seed=3).eval()
    with torch.no_grad():
        assert torch.equal(a(x), b(x))
    c = build_backbone(BackboneConfig.desk(), seed=4).eval()
    with torch.no_grad():
        assert not torch.equal(a(x), c(x))


def test_duplicate_inputs_identical(desk):
    x = tiny_input()[:1]
    with torch.no_grad():
        y = desk(torch.cat([x, x]))
    assert torch.equal(y[0], y[1])


@pytest.mark.parametrize("stages", [1, 2, 3])
def test_resolution_ladder(stages):
    cfg = BackboneConfig.desk(num_stages=stages, input_size=(64, 64))
    m = build_backbone(cfg, 0).eval()
    with torch.no_grad():
        outs = m.stage_outputs(torch.zeros(1, 3, 64, 64))
    assert len(outs) == stages
    for s, branches in enumerate(outs, start=1):
        assert len(branches) == s
        sizes = [t.shape[-1] for t in branches]
        assert sizes == [16 // 2**r for r in range(s)]
        if s > 1:
            assert [t.shape[1] for t in branches] == [8 * 2**r for r in range(s)]


def test_parameter_count_monotone_in_width():
    counts = [count_parameters(build_backbone(BackboneConfig.hrnet(c), 0, device="meta")) for c in (18, 32, 48, 64)]
    assert counts == sorted(counts) and len(set(counts)) == 4


def test_smallest_config_has_parameters():
    cfg = BackboneConfig(num_stages=1, base_width=1, blocks_per_branch=1, modules_per_stage=(1,), head_width=32, input_size=(32, 32))
    assert count_parameters(build_backbone(cfg, 0)) > 0


def test_forward_accepts_samples(desk):
    rng = np.random.default_rng(0)
    samples = [Sample(rng.random((3, 32, 32)), {0}, i) for i in range(3)]
    with torch.no_grad():
        y = forward(desk, samples)
        x = torch.from_numpy(np.stack([s.pixels for s in samples]))
        assert torch.equal(y, desk(x))


def test_input_errors(desk):
    with pytest.raises(InvalidInputError):
        desk(torch.zeros(1, 3, 48, 32))
    with pytest.raises(InvalidInputError):
        desk(torch.zeros(1, 1, 32, 32))


@pytest.mark.parametrize(
    "kw",
    [dict(num_stages=0), dict(num_stages=5), dict(input_size=(30, 32)), dict(base_width=0), dict(modules_per_stage=(1,))],
)
def test_config_validation(kw):
    with pytest.raises(ConfigError):
        BackboneConfig(**kw)


def test_frozen_batchnorm_stays_in_eval():
    m = build_backbone(BackboneConfig.desk(train_batchnorm=False), 0)
    m.train()
    bns = [x for x in m.modules() if isinstance(x, torch.nn.BatchNorm2d)]
    assert bns and not any(b.training for b in bns)
    assert all(not p.requires_grad for b in bns for p in b.parameters())


def test_config_dict_round_trip():
    cfg = BackboneConfig.hrnet(32)
    assert BackboneConfig.from_dict(cfg.to_dict()) == cfg
