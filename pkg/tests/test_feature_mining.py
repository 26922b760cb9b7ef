import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from core import ops
from core.data_feed import LabeledBatch
from core.errors import ConfigurationError, UsageError
from core.feature_mining import (FeatureMining, FMConfig, FMHead, build_strategy, fm_loss, head_forward, segment,
                                 train_forward)
from core.mask import BinaryMask, MaskKind, Pairing, complement, sample_pair
from core.models import STAGE_IDS, ModelSpec, build
from core.rng import RngStream
from core.strategy_base import BaselineStrategy, eval_forward
from core.tensor import Parameter, Tensor, no_grad

TOY = ModelSpec(family="plaincnn", stage_widths=(2, 3, 4), num_classes=3, image_size=8)
site_sets = st.sampled_from([(), ("stage3",), ("stage2", "stage3"), ("stage1", "stage2", "stage3"), ("stage1",)])


def toy(seed=0, spec=TOY, dtype=np.float32):
    model = build(spec, RngStream("init", seed))
    return model.astype(dtype) if dtype != np.float32 else model


def toy_batch(seed=0, n=4, spec=TOY, dtype=np.float32):
    gen = np.random.default_rng(seed)
    images = gen.standard_normal((n, spec.in_channels, spec.image_size, spec.image_size)).astype(dtype)
    labels = gen.integers(0, spec.num_classes, size=n)
    return LabeledBatch(Tensor(images), labels)


def test_segment_example():
    X = Tensor(np.array([[[[1.0, 2.0], [3.0, 4.0]]]]))
    m = BinaryMask(MaskKind.BOX, spatial=np.array([[1, 0], [0, 0]], dtype=np.uint8))
    x1, x2 = segment(X, (m, complement(m)))
    np.testing.assert_array_equal(x1.data[0, 0], [[1, 0], [0, 0]])
    np.testing.assert_array_equal(x2.data[0, 0], [[0, 2], [3, 4]])
    np.testing.assert_array_equal(X.data[0, 0], [[1, 2], [3, 4]])


def test_segment_all_ones_mask():
    X = Tensor(np.random.default_rng(0).standard_normal((2, 3, 4, 4)))
    ones = BinaryMask(MaskKind.BOX, spatial=np.ones((4, 4), dtype=np.uint8))
    x1, x2 = segment(X, (ones, complement(ones)))
    np.testing.assert_array_equal(x1.data, X.data)
    assert not x2.data.any()


def test_segment_shape_mismatch():
    X = Tensor(np.ones((1, 2, 4, 4)))
    m = BinaryMask(MaskKind.BOX, spatial=np.ones((3, 3), dtype=np.uint8))
    with pytest.raises(ConfigurationError):
        segment(X, (m, complement(m)))


@settings(deadline=None, max_examples=1000)
@given(seed=st.integers(0, 2 ** 32 - 1), size=st.integers(1, 8), kind=st.sampled_from(["box", "point", "channel"]))
def test_complementary_parts_sum_to_feature(seed, size, kind):
    X = Tensor(np.random.default_rng(seed).standard_normal((2, 3, size, size)).astype(np.float32))
    pair = sample_pair(size, size, Pairing.COMPLEMENTARY, RngStream("mask", seed), kind=kind, channels=3)
    x1, x2 = segment(X, pair)
    np.testing.assert_array_equal(x1.data + x2.data, X.data)


def _head(weight, bias):
    return FMHead(Parameter(np.asarray(weight, dtype=np.float64), "w"), Parameter(np.asarray(bias, dtype=np.float64), "b"))


def test_head_forward_zero_part_gives_bias():
    head = _head(np.ones((5, 4)), np.arange(5.0))
    logits = head_forward(Tensor(np.zeros((2, 4, 3, 3))), head)
    np.testing.assert_array_equal(logits.data, np.tile(np.arange(5.0), (2, 1)))


def test_head_forward_constant_part_closed_form():
    head = _head(np.full((3, 4), 0.5), np.array([0.1, 0.2, 0.3]))
    logits = head_forward(Tensor(np.full((1, 4, 2, 2), 2.0)), head)
    np.testing.assert_allclose(logits.data[0], 2.0 * 4 * 0.5 + np.array([0.1, 0.2, 0.3]))


def test_head_forward_matches_pool_then_matmul():
    gen = np.random.default_rng(3)
    part = gen.standard_normal((3, 4, 5, 5)).astype(np.float32)
    w, b = gen.standard_normal((6, 4)), gen.standard_normal(6)
    logits = head_forward(Tensor(part), _head(w, b))
    expected = part.astype(np.float64).mean(axis=(2, 3)) @ w.T + b
    np.testing.assert_allclose(logits.data, expected, atol=1e-5)


def test_head_forward_rejects_channel_mismatch():
    with pytest.raises(ConfigurationError):
        head_forward(Tensor(np.zeros((1, 3, 2, 2))), _head(np.ones((5, 4)), np.zeros(5)))


def test_fm_loss_without_aux_is_plain_cross_entropy():
    logits = Tensor(np.random.default_rng(1).standard_normal((4, 10)))
    labels = np.array([1, 2, 3, 4])
    result = fm_loss(logits, [], labels)
    assert result.num_heads == 1
    assert result.total_loss.item() == ops.softmax_cross_entropy(logits, labels).item()


def test_fm_loss_uniform_logits_three_heads():
    zeros = [Tensor(np.zeros((2, 100))) for _ in range(3)]
    result = fm_loss(zeros[0], zeros[1:], np.array([0, 99]))
    assert result.total_loss.item() == pytest.approx(3 * math.log(100), abs=1e-9)
    assert len(result.aux_logits) == 1


def test_fm_loss_rejects_mismatched_heads():
    with pytest.raises(ConfigurationError):
        fm_loss(Tensor(np.zeros((2, 3))), [Tensor(np.zeros((2, 4))), Tensor(np.zeros((2, 4)))], np.array([0, 1]))


@settings(deadline=None, max_examples=1000)
@given(seed=st.integers(0, 2 ** 16), sites=site_sets, kind=st.sampled_from(["box", "point", "channel"]),
       pairing=st.sampled_from(["complementary", "non_complementary"]))
def test_head_count_and_loss_additivity(seed, sites, kind, pairing):
    model = toy(seed % 7)
    strategy = FeatureMining(model, FMConfig(sites=sites, mask_variant=kind, pairing=pairing), RngStream("init", 1))
    result = strategy.train_forward(model, toy_batch(seed, n=2), RngStream("mask", seed))
    assert result.num_heads == 1 + 2 * len(sites) == strategy.num_classifiers
    assert len(strategy.head_names()) == result.num_heads
    assert abs(result.total_loss.item() - math.fsum(result.per_head_losses)) <= 1e-6


@settings(deadline=None, max_examples=1000)
@given(seed=st.integers(0, 2 ** 16), sites=site_sets)
def test_eval_logits_do_not_depend_on_fm(seed, sites):
    model = toy(seed % 5).eval()
    batch = toy_batch(seed, n=2)
    fm = FeatureMining(model, FMConfig(sites=sites), RngStream("init", 2))
    np.testing.assert_array_equal(fm.eval_forward(model, batch).data, BaselineStrategy().eval_forward(model, batch).data)


def test_eval_is_repeatable_and_graph_free():
    model = toy(1).eval()
    batch = toy_batch(1)
    a, b = eval_forward(model, batch), eval_forward(model, batch)
    np.testing.assert_array_equal(a.data, b.data)
    assert a._ctx is None


def test_mode_checks():
    model = toy()
    fm = FeatureMining(model, FMConfig(), RngStream("init", 0))
    with pytest.raises(UsageError):
        eval_forward(model, toy_batch())
    with pytest.raises(UsageError):
        fm.train_forward(model, toy_batch(), rng=None)
    model.eval()
    with pytest.raises(UsageError):
        fm.train_forward(model, toy_batch(), RngStream("mask", 0))


def test_zero_sites_matches_baseline_bitwise():
    batch = toy_batch(4)
    model_a, model_b = toy(3), toy(3)
    fm = FeatureMining(model_a, FMConfig(sites=()), RngStream("init", 0))
    assert fm.parameters() == []
    a = fm.train_forward(model_a, batch)
    b = BaselineStrategy().train_forward(model_b, batch)
    assert a.total_loss.item() == b.total_loss.item()
    np.testing.assert_array_equal(a.main_logits.data, b.main_logits.data)


def test_fixed_seed_replays_masks_and_loss():
    results = []
    for _ in range(2):
        model = toy(5)
        fm = FeatureMining(model, FMConfig(sites=("stage2", "stage3")), RngStream("init", 5))
        results.append(fm.train_forward(model, toy_batch(5), RngStream("mask", 9)))
    a, b = results
    assert a.total_loss.item() == b.total_loss.item()
    for pa, pb in zip(a.masks_used, b.masks_used):
        assert pa[0].equals(pb[0]) and pa[1].equals(pb[1])


def test_sites_draw_independent_masks():
    model = toy(0)
    fm = FeatureMining(model, FMConfig(sites=("stage2", "stage3")), RngStream("init", 0))
    rng = RngStream("mask", 0)
    result = fm.train_forward(model, toy_batch(0), rng)
    assert rng.counter == 2
    assert [p[0].seed_draw.counter for p in result.masks_used] == [0, 1]


def test_per_sample_masks():
    model = toy(0)
    fm = FeatureMining(model, FMConfig(per_sample_masks=True), RngStream("init", 0))
    result = fm.train_forward(model, toy_batch(0, n=3), RngStream("mask", 0))
    assert result.masks_used[0][0].spatial.shape == (3, 2, 2)


def test_head_parameters_confined_to_strategy():
    model = toy(0)
    baseline_params = model.num_parameters()
    fm = build_strategy(model, FMConfig(sites=("stage2", "stage3")), RngStream("init", 0))
    assert model.num_parameters() == baseline_params
    expected = 2 * (3 * 3 + 3) + 2 * (4 * 3 + 3)
    assert fm.num_parameters() == expected
    assert all(name.startswith("fm.") for name, _ in fm.named_parameters())
    for site in fm.sites:
        assert site.head_1.weight.shape[1] == model.stage_channels[site.stage_id]
        assert not site.head_1.bias.data.any()
    assert isinstance(build_strategy(model, FMConfig(enabled=False), RngStream("init", 0)), BaselineStrategy)


def test_fm_config_validation():
    with pytest.raises(ConfigurationError):
        FMConfig(sites=("stage3", "stage3")).validate()
    with pytest.raises(ConfigurationError):
        FMConfig(sites=("stage4",)).validate()
    with pytest.raises(ConfigurationError):
        FMConfig(mask_variant="circle").validate()
    with pytest.raises(ConfigurationError):
        FMConfig(pairing="overlapping").validate()
    assert FMConfig(sites=STAGE_IDS, enabled=False).num_classifiers == 1


def test_mixup_applies_to_every_head():
    model = toy(2)
    fm = FeatureMining(model, FMConfig(), RngStream("init", 2))
    plain = toy_batch(2)
    mixed = LabeledBatch(plain.images, plain.labels, mixup_state=(plain.labels[::-1].copy(), 0.3))
    result = fm.train_forward(model, mixed, RngStream("mask", 1))
    logits = [result.main_logits, *result.aux_logits[0]]
    for head, value in zip(logits, result.per_head_losses):
        expected = (0.3 * ops.softmax_cross_entropy(head.detach(), plain.labels).item()
                    + 0.7 * ops.softmax_cross_entropy(head.detach(), plain.labels[::-1].copy()).item())
        assert value == pytest.approx(expected, abs=1e-9)


def _grads(model, strategy):
    return {p.name: p.grad.copy() for p in model.parameters() + strategy.parameters()}


def test_gradients_add_up_over_heads():
    model = toy(6, dtype=np.float64)
    fm = FeatureMining(model, FMConfig(sites=("stage2", "stage3")), RngStream("init", 6)).astype(np.float64)
    batch = toy_batch(6, dtype=np.float64)

    fm.train_forward(model, batch, RngStream("mask", 3)).total_loss.backward()
    total = _grads(model, fm)

    summed = {k: np.zeros_like(v) for k, v in total.items()}
    for head in range(fm.num_classifiers):
        model.zero_grad()
        fm.zero_grad()
        fm.train_forward(model, batch, RngStream("mask", 3)).head_loss_tensors[head].backward()
        for k, v in _grads(model, fm).items():
            summed[k] += v
    for k in total:
        np.testing.assert_allclose(summed[k], total[k], atol=1e-5, err_msg=k)


def test_finite_differences_through_one_site():
    model = toy(8, dtype=np.float64)
    fm = FeatureMining(model, FMConfig(sites=("stage3",)), RngStream("init", 8)).astype(np.float64)
    batch = toy_batch(8, n=3, dtype=np.float64)

    def loss():
        with no_grad():
            return fm.train_forward(model, batch, RngStream("mask", 4)).total_loss.item()

    train_forward(model, batch, fm, RngStream("mask", 4)).total_loss.backward()
    picks = np.random.default_rng(0)
    for name in ("stage1.conv", "stage3.conv", "fm.stage3.head1.weight", "fm.stage3.head2.bias", "fc.weight"):
        p = model.params.get(name) or fm.params[name]
        for flat in picks.choice(p.data.size, size=min(5, p.data.size), replace=False):
            idx = np.unravel_index(flat, p.data.shape)
            orig = p.data[idx]
            p.data[idx] = orig + 1e-6
            plus = loss()
            p.data[idx] = orig - 1e-6
            minus = loss()
            p.data[idx] = orig
            assert p.grad[idx] == pytest.approx((plus - minus) / 2e-6, rel=1e-3, abs=1e-6), name
