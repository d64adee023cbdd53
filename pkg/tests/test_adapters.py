import math

import numpy as np
import pytest

from adapterseg import tensor as T
from adapterseg.adapters import (
    AdapterBlock, AdapterPlan, attach, count_breakdown, count_trainable, plan_sites,
)
from adapterseg.errors import ConfigError, DimensionError
from adapterseg.model import CLIP_B_CONFIG, ModelConfig, VLSMModel

TOY = ModelConfig(
    image_size=32, patch_size=8, d_v=32, d_t=16, n_layers_v=9, n_layers_t=9,
    n_heads=2, proj_dim=16, extract_layers=(3, 6, 9), vocab_size=32,
    max_text_len=16, decoder_dim=8,
)


def scalar_gelu(x):
    return 0.5 * x * (1.0 + math.tanh(math.sqrt(2.0 / math.pi) * (x + 0.044715 * x**3)))


def test_zero_block_is_exact_identity():
    block = AdapterBlock("z", d=16, d_prime=4, rng=np.random.default_rng(0))
    f = T.Tensor(np.random.default_rng(1).standard_normal((5, 16)))
    out = block(f)
    assert np.array_equal(out.data, f.data)


def test_scalar_oracle_case():
    # d=2, d'=1 evaluated against independent scalar arithmetic
    block = AdapterBlock("s", d=2, d_prime=1)
    block.w1.tensor.data = np.array([[1.0], [1.0]])
    block.b1.tensor.data = np.array([0.0])
    block.w2.tensor.data = np.array([[0.5, -0.5]])
    block.b2.tensor.data = np.array([0.0, 0.0])
    out = block(T.Tensor([1.0, 0.0]))

    g1 = scalar_gelu(1.0)
    expected = [1.0 + scalar_gelu(0.5 * g1), 0.0 + scalar_gelu(-0.5 * g1)]
    assert np.allclose(out.data, expected, atol=1e-12)
    # frozen values from the oracle script, pinned
    assert np.allclose(out.data, [1.2788355144287415, -0.1417604808753969], atol=1e-12)


def test_batched_shape_preserved():
    block = AdapterBlock("b", d=6, d_prime=3)
    out = block(T.Tensor(np.zeros((4, 7, 6))))
    assert out.shape == (4, 7, 6)


def test_width_mismatch():
    block = AdapterBlock("w", d=6, d_prime=3)
    with pytest.raises(DimensionError):
        block(T.Tensor(np.zeros((4, 5))))


def test_d_prime_cannot_exceed_d():
    with pytest.raises(ConfigError):
        AdapterBlock("x", d=4, d_prime=8)


def test_plan_validation():
    with pytest.raises(ConfigError):
        AdapterPlan(variant="X", kind="dense", d_prime=4)
    with pytest.raises(ConfigError):
        AdapterPlan(variant="V", kind="flat", d_prime=4)
    plan = AdapterPlan(variant="vlc", kind="DENSE", d_prime=4)
    assert plan.variant == "VLC" and plan.kind == "dense"
    assert plan.include_conditioning  # forced for VLC


def test_plan_rejects_bad_layers():
    plan = AdapterPlan(variant="V", kind="shallow", d_prime=4, shallow_layers=(3, 5))
    with pytest.raises(ConfigError, match="5"):
        plan_sites(plan, TOY)
    plan = AdapterPlan(variant="V", kind="dense", d_prime=4, dense_max_layer=12)
    with pytest.raises(ConfigError, match="12"):
        plan_sites(plan, TOY)


def test_block_counts_per_plan():
    m = VLSMModel(TOY, seed=0)
    am = attach(AdapterPlan(variant="VL", kind="shallow", d_prime=4), m, seed=0)
    assert len(am.blocks) == 6  # 3 image + 3 text

    m = VLSMModel(TOY, seed=0)
    am = attach(AdapterPlan(variant="VL", kind="dense", d_prime=4), m, seed=0)
    assert len(am.blocks) == 36  # 2 per block, 9 blocks, both encoders

    m = VLSMModel(TOY, seed=0)
    am = attach(
        AdapterPlan(variant="VL", kind="dense", d_prime=4, include_conditioning=True), m, seed=0)
    assert len(am.blocks) == 37
    assert am.cond_block is not None


def test_identity_at_init_all_six_combos():
    rng = np.random.default_rng(5)
    image = rng.uniform(0.0, 1.0, (32, 32, 3))
    ids = [1, 4, 9, 2]
    base = VLSMModel(TOY, seed=3).forward(image, ids).data
    for kind in ("shallow", "dense"):
        for variant in ("V", "VL", "VLC"):
            model = VLSMModel(TOY, seed=3)
            adapted = attach(AdapterPlan(variant=variant, kind=kind, d_prime=4), model, seed=9)
            out = adapted.forward(image, ids).data
            assert np.array_equal(out, base), (variant, kind)


def test_single_block_count_hand_case():
    plan = AdapterPlan(variant="V", kind="shallow", d_prime=1, shallow_layers=(3,))
    cfg = ModelConfig(
        image_size=32, patch_size=8, d_v=2, d_t=2, n_layers_v=3, n_layers_t=3,
        n_heads=1, proj_dim=2, extract_layers=(3,), vocab_size=32, max_text_len=8,
        decoder_dim=2,
    )
    assert count_trainable(plan, cfg) == 7  # 2*1 + 1 + 1*2 + 2


def test_clip_b_budgets():
    dense = AdapterPlan(variant="VLC", kind="dense", d_prime=64)
    assert count_trainable(dense, CLIP_B_CONFIG) == 3_040_576
    # within 2% of the advertised 3.0M total
    assert abs(3_040_576 - 3_000_000) / 3_040_576 < 0.02

    shallow = AdapterPlan(variant="VL", kind="shallow", d_prime=512)
    assert count_trainable(shallow, CLIP_B_CONFIG) == 3_939_072
    shallow_c = AdapterPlan(variant="VLC", kind="shallow", d_prime=512)
    assert count_trainable(shallow_c, CLIP_B_CONFIG) == 4_464_384


def test_census_matches_closed_form_all_combos():
    for kind in ("shallow", "dense"):
        for variant in ("V", "VL", "VLC"):
            model = VLSMModel(TOY, seed=0)
            plan = AdapterPlan(variant=variant, kind=kind, d_prime=4)
            adapted = attach(plan, model, seed=0)
            assert adapted.n_trainable() == count_trainable(plan, TOY), (variant, kind)


def test_breakdown_sums_to_total():
    plan = AdapterPlan(variant="VLC", kind="dense", d_prime=8)
    rows = count_breakdown(plan, TOY)
    assert sum(n for _, _, n in rows) == count_trainable(plan, TOY)


def test_gradient_routing_only_adapters():
    rng = np.random.default_rng(11)
    model = VLSMModel(TOY, seed=2)
    adapted = attach(AdapterPlan(variant="VLC", kind="dense", d_prime=4), model, seed=4)
    # give the up-projections signal so every adapter participates
    for p in adapted.trainable_parameters():
        if p.name.endswith(".w2"):
            p.tensor.data = rng.standard_normal(p.tensor.shape) * 0.1
    logits = adapted.forward(rng.uniform(0, 1, (32, 32, 3)), [1, 5, 2])
    T.mean(logits).backward()
    frozen_with_grad = [p.name for p in adapted.frozen_parameters() if p.tensor.grad is not None]
    assert not frozen_with_grad
    live = [p for p in adapted.trainable_parameters() if p.tensor.grad is not None]
    assert len(live) == len(adapted.trainable_parameters())
    total = sum(float(np.abs(p.tensor.grad).sum()) for p in live)
    assert total > 0


def test_shape_invariance_through_placements():
    rng = np.random.default_rng(0)
    image = rng.uniform(0, 1, (32, 32, 3))
    for kind in ("shallow", "dense"):
        model = VLSMModel(TOY, seed=1)
        adapted = attach(AdapterPlan(variant="VLC", kind=kind, d_prime=4), model, seed=1)
        out = adapted.forward(image, [1, 6, 2])
        assert out.shape == (32, 32)


def test_plan_roundtrip_dict():
    plan = AdapterPlan(variant="VL", kind="shallow", d_prime=16, shallow_layers=(3, 6))
    again = AdapterPlan.from_dict(plan.to_dict())
    assert again == plan
    with pytest.raises(ConfigError):
        AdapterPlan.from_dict({"variant": "V", "kind": "dense", "d_prime": 2, "bogus": 1})
