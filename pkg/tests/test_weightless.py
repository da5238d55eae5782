import itertools

import numpy as np
import pytest

import quweit.autodiff as ad
from quweit.autodiff import Parameter, Tensor
from quweit.weightless import (
    ConditionalSummation, LutLayer, ThermometerEncoder, WeightlessBlock, WeightlessBlockConfig,
    cond_sum_forward, encode, encode_soft, fit_thermometer, gaussian_thermometer, lut_backward_efd,
    lut_forward_hard, lut_forward_soft, make_mapping, pack_init, quantize_encodings, unpack_init,
)

from _oracles import (
    multilinear, multilinear_input_grad, single_lut_layer, soft_block, soft_block_gradient_error,
)

XOR = [-1.0, 1.0, 1.0, -1.0]


def sigmoid(z):
    return 1.0 / (1.0 + np.exp(-z))


# -- thermometer -------------------------------------------------------------

def test_standard_normal_quartile_thresholds():
    enc = gaussian_thermometer([0.0], [1.0], 3)
    np.testing.assert_allclose(enc.thresholds[0], [-0.6744897501960817, 0.0, 0.6744897501960817], atol=1e-12)


def test_single_threshold_sits_at_the_mean():
    enc = gaussian_thermometer([10.0], [2.0], 1)
    np.testing.assert_allclose(enc.thresholds, [[10.0]])


def test_constant_feature_falls_back_to_uniform_span():
    cal = np.column_stack([np.full(10, 3.0), np.arange(10.0)])
    enc = fit_thermometer(cal, 3)
    np.testing.assert_allclose(enc.thresholds[0], [2.5, 3.0, 3.5])
    assert np.all(np.diff(enc.thresholds, axis=1) > 0)


def test_fit_thermometer_errors():
    with pytest.raises(ValueError):
        fit_thermometer(np.zeros((4, 2)), 0)
    with pytest.raises(ValueError):
        fit_thermometer(np.zeros((0, 2)), 3)


def test_encoder_rejects_non_increasing_thresholds():
    with pytest.raises(ValueError):
        ThermometerEncoder(np.array([[0.0, 0.0]]), np.array([1.0]))


def test_encode_bits_and_extremes():
    enc = ThermometerEncoder(np.array([[-1.0, 0.0, 1.0]]), np.array([1.0]))
    bits = encode(Tensor([[0.5], [-5.0], [5.0]]), enc).data
    np.testing.assert_array_equal(bits, [[1, 1, 0], [0, 0, 0], [1, 1, 1]])


def test_encode_is_monotone_per_feature():
    enc = gaussian_thermometer(np.zeros(6), np.ones(6), 8)
    x = Tensor(np.random.default_rng(0).normal(size=(500, 6)))
    bits = encode(x, enc).data.reshape(500, 6, 8)
    assert np.all(np.diff(bits, axis=-1) <= 0)


def test_encode_feature_mismatch():
    enc = gaussian_thermometer(np.zeros(2), np.ones(2), 3)
    with pytest.raises(ValueError):
        encode(Tensor(np.zeros((1, 3))), enc)


def test_surrogate_gradient_at_threshold_is_inverse_width():
    enc = ThermometerEncoder(np.array([[0.0]]), np.array([0.25]))
    x = Tensor([[0.0]], requires_grad=True, dtype=np.float64)
    ad.backward(encode(x, enc).sum())
    assert x.grad[0, 0] == pytest.approx(4.0)


def test_default_surrogate_width_is_mean_gap():
    enc = gaussian_thermometer([0.0], [1.0], 3)
    assert enc.width[0] == pytest.approx(0.6744897501960817)


def test_soft_encoding_is_half_at_threshold():
    enc = ThermometerEncoder(np.array([[-1.0, 0.0, 1.0]]), np.array([1.0]))
    p = encode_soft(Tensor([[0.0]], dtype=np.float64), enc).data
    assert p[0, 1] == pytest.approx(0.5)
    assert p[0, 0] > 0.95 and p[0, 2] < 0.05


# -- mapping and packing ----------------------------------------------------

@pytest.mark.parametrize("W,L,n", [(48, 20, 6), (16, 8, 2), (64, 64, 4), (1536, 768, 6), (7, 30, 3)])
def test_mapping_distinct_and_covering(W, L, n):
    m = make_mapping(W, L, n, np.random.default_rng(W + L))
    assert m.shape == (L, n)
    assert all(len(set(r)) == n for r in m.tolist())
    counts = np.bincount(m.ravel(), minlength=W)
    assert counts.min() >= (L * n) // W
    assert m.min() >= 0 and m.max() < W


def test_mapping_is_seed_deterministic():
    a = make_mapping(32, 10, 4, np.random.default_rng(5))
    b = make_mapping(32, 10, 4, np.random.default_rng(5))
    np.testing.assert_array_equal(a, b)


def test_mapping_fan_in_larger_than_width():
    with pytest.raises(ValueError):
        make_mapping(3, 2, 4, np.random.default_rng(0))


def test_xor_packs_to_hex_6():
    assert pack_init(np.array(XOR) > 0) == "6"
    np.testing.assert_array_equal(unpack_init("6", 2), [0, 1, 1, 0])


@pytest.mark.parametrize("n", range(1, 7))
def test_pack_unpack_round_trip(n):
    row = np.random.default_rng(n).random(2 ** n) > 0.5
    text = pack_init(row)
    assert len(text) == max(1, 2 ** n // 4)
    np.testing.assert_array_equal(unpack_init(text, n), row)


def test_lut_layer_validation():
    theta = Parameter(np.zeros((1, 4)), "t")
    with pytest.raises(ValueError):
        LutLayer(np.array([[0, 0]]), theta, 2)        # repeated source
    with pytest.raises(ValueError):
        LutLayer(np.array([[0, 2]]), theta, 2)        # out of range
    with pytest.raises(ValueError):
        LutLayer(np.array([[0, 1, 2]]), theta, 3)     # theta size


# -- hard forward and EFD ------------------------------------------------------

def test_xor_lookup_msb_first():
    layer = single_lut_layer(XOR)
    out = lut_forward_hard(Tensor(np.array([[1, 0], [0, 0], [1, 1], [0, 1]])), layer).data
    np.testing.assert_array_equal(out[:, 0], [1, 0, 0, 1])


def test_all_positive_theta_gives_all_ones():
    layer = single_lut_layer([0.3, 0.1, 0.9, 0.2, 0.5, 0.7, 0.4, 0.8])
    bits = np.array(list(itertools.product((0, 1), repeat=3)))
    assert np.all(lut_forward_hard(Tensor(bits), layer).data == 1)


def test_width_mismatch_raises():
    with pytest.raises(ValueError):
        lut_forward_hard(Tensor(np.zeros((1, 3))), single_lut_layer(XOR))


def test_xor_efd_input_gradient():
    layer = single_lut_layer(XOR)
    addr = layer.addresses(np.array([[1, 0]]))
    _, gb = lut_backward_efd(np.array([[1.0]]), addr, layer)
    # bit 0 (MSB): h(10)-h(00) = 1 ; bit 1: h(11)-h(10) = -1
    np.testing.assert_allclose(gb, [[1.0, -1.0]])


def test_constant_lut_has_zero_input_gradient():
    layer = single_lut_layer([0.5] * 8)
    addr = layer.addresses(np.array([[1, 0, 1], [0, 1, 1]]))
    _, gb = lut_backward_efd(np.ones((2, 1)), addr, layer)
    assert np.all(gb == 0)


def test_efd_needs_saved_addresses():
    with pytest.raises(ValueError):
        lut_backward_efd(np.ones((1, 1)), None, single_lut_layer(XOR))


def test_efd_theta_gradient_straight_through_and_masked():
    layer = single_lut_layer([0.5, -2.0, 0.1, 0.9])
    addr = layer.addresses(np.array([[0, 1], [0, 1], [1, 0], [1, 1]]))
    gt, _ = lut_backward_efd(np.array([[1.0], [2.0], [3.0], [4.0]]), addr, layer)
    # address 1 has |theta| > 1, so it receives nothing
    np.testing.assert_allclose(gt, [[0.0, 0.0, 3.0, 4.0]])


def test_unmapped_inputs_get_zero_gradient():
    theta = Parameter(np.array([XOR], dtype=np.float64), "t", dtype=np.float64)
    layer = LutLayer(np.array([[3, 1]]), theta, 5)
    bits = np.array([[0, 1, 1, 1, 1]])
    _, gb = lut_backward_efd(np.ones((1, 1)), layer.addresses(bits), layer)
    assert gb[0, 0] == gb[0, 2] == gb[0, 4] == 0
    assert gb[0, 1] != 0 and gb[0, 3] != 0


@pytest.mark.parametrize("n", [1, 2, 3, 4])
def test_efd_equals_multilinear_gradient_exhaustively(n):
    """Every address and several random tables: EFD input grads == vertex multilinear grads."""
    rng = np.random.default_rng(n)
    for _ in range(6):
        theta = rng.uniform(-1, 1, 2 ** n)
        layer = single_lut_layer(theta)
        hard = (theta > 0).astype(float)
        for a, bits in enumerate(itertools.product((0, 1), repeat=n)):
            addr = layer.addresses(np.array([bits]))
            assert addr[0, 0] == a
            _, gb = lut_backward_efd(np.ones((1, 1)), addr, layer)
            np.testing.assert_array_equal(gb[0], multilinear_input_grad(list(map(float, bits)), hard))


@pytest.mark.parametrize("n", [2, 3, 4])
def test_soft_gradient_approaches_efd_as_temperature_vanishes(n):
    rng = np.random.default_rng(10 + n)
    theta = rng.choice([-1, 1], 2 ** n) * rng.uniform(0.3, 1.0, 2 ** n)
    layer = single_lut_layer(theta)
    with ad.precision(np.float64):
        for bits in itertools.product((0, 1), repeat=n):
            p = Tensor(np.array([bits], dtype=np.float64), requires_grad=True)
            ad.backward(lut_forward_soft(p, layer, temperature=1e-3).sum())
            _, gb = lut_backward_efd(np.ones((1, 1)), layer.addresses(np.array([bits])), layer)
            np.testing.assert_allclose(p.grad, gb, atol=1e-9)


# -- soft forward ---------------------------------------------------------

def test_soft_matches_multilinear_oracle():
    rng = np.random.default_rng(3)
    theta = rng.uniform(-1, 1, 8)
    layer = single_lut_layer(theta)
    for _ in range(20):
        p = rng.random(3)
        with ad.precision(np.float64):
            got = lut_forward_soft(Tensor(p[None]), layer).item()
        assert got == pytest.approx(multilinear(list(p), sigmoid(theta * 3.0)), rel=1e-12)


def test_soft_xor_at_half_is_half():
    with ad.precision(np.float64):
        y = lut_forward_soft(Tensor([[0.5, 0.5]]), single_lut_layer(XOR)).item()
    assert y == pytest.approx(0.5, abs=1e-12)


@pytest.mark.parametrize("n", range(1, 7))
def test_vertex_consistency_exhaustive(n):
    rng = np.random.default_rng(n)
    theta = rng.uniform(-1, 1, (3, 2 ** n))
    theta[np.abs(theta) < 1e-3] = 0.5
    layer = LutLayer(np.array([rng.permutation(n) for _ in range(3)]),
                     Parameter(theta, "t", dtype=np.float64), n)
    bits = np.array(list(itertools.product((0, 1), repeat=n)), dtype=np.float64)
    with ad.precision(np.float64):
        soft = lut_forward_soft(Tensor(bits), layer).data
    hard = lut_forward_hard(Tensor(bits), layer).data
    np.testing.assert_array_equal(soft > 0.5, hard > 0.5)


def test_soft_rejects_out_of_range_probabilities():
    with pytest.raises(ValueError):
        lut_forward_soft(Tensor([[0.5, 1.1]]), single_lut_layer(XOR))


@pytest.mark.parametrize("seed", range(5))
def test_soft_block_end_to_end_gradient(seed):
    assert soft_block_gradient_error(seed) < 1e-4


# -- conditional summation and quantization ------------------------------

def test_conditional_sum_example():
    cs = ConditionalSummation(Parameter(np.array([[0.5, -1.0, 2.0]]), "e", dtype=np.float64))
    out = cond_sum_forward(Tensor([[1, 0, 1]], dtype=np.float64), cs)
    assert out.item() == 2.5


def test_conditional_sum_gradients_skip_zero_bits():
    e = Parameter(np.array([[0.5, -1.0, 2.0], [1.0, 1.0, 1.0]]), "e", dtype=np.float64)
    bits = Tensor([[1, 0, 1, 0, 0, 1]], dtype=np.float64, requires_grad=True)
    out = cond_sum_forward(bits, ConditionalSummation(e))
    ad.backward((out * Tensor([[2.0, 3.0]], dtype=np.float64)).sum())
    np.testing.assert_allclose(e.grad, [[2, 0, 2], [0, 0, 3]])
    np.testing.assert_allclose(bits.grad, [[1.0, -2.0, 4.0, 3.0, 3.0, 3.0]])


def test_conditional_sum_width_check():
    cs = ConditionalSummation(Parameter(np.zeros((2, 2)), "e"))
    with pytest.raises(ValueError):
        cond_sum_forward(Tensor(np.zeros((1, 3))), cs)


def test_quantization_example():
    cs = quantize_encodings(ConditionalSummation(Parameter(np.array([[0.5, -1.0, 2.0]]), "e", dtype=np.float64)))
    assert cs.scale == pytest.approx(2.0 / 127)
    np.testing.assert_array_equal(cs.levels, [[32, -64, 127]])


def test_quantization_rounds_half_to_even():
    # max|e| = 1 so the scale is 1/127; the other entries sit exactly on .5 levels
    e = np.array([[127.0, 0.5, 1.5, 2.5, -0.5]]) / 127.0
    cs = quantize_encodings(ConditionalSummation(Parameter(e, "e", dtype=np.float64)))
    np.testing.assert_array_equal(cs.levels, [[127, 0, 2, 2, 0]])


def test_zero_encodings_quantize_to_unit_scale():
    cs = quantize_encodings(ConditionalSummation(Parameter(np.zeros((3, 1)), "e")))
    assert cs.scale == 1.0 and np.all(cs.levels == 0)


def test_quantization_error_bound_random():
    rng = np.random.default_rng(0)
    for _ in range(50):
        e = rng.normal(0, rng.uniform(0.01, 3), (16, 3))
        cs = quantize_encodings(ConditionalSummation(Parameter(e, "e", dtype=np.float64)))
        assert np.max(np.abs(cs.effective(np.float64) - e)) <= cs.scale / 2 + 1e-15


# -- block ---------------------------------------------------------------------

def small_block(mode="hard-efd", G=1, seed=0):
    cfg = WeightlessBlockConfig(num_features=6, layer_widths=(24, 8 * G), output_dim=8, bits_per_feature=4,
                                fan_in=3, group_size=G, training_mode=mode, seed=seed)
    blk = WeightlessBlock(cfg)
    blk.fit_encoder(np.random.default_rng(seed).normal(size=(64, 6)))
    return blk


def test_block_config_validation():
    with pytest.raises(ValueError):
        WeightlessBlockConfig(num_features=4, layer_widths=(8, 5), output_dim=4, group_size=1)
    with pytest.raises(ValueError):
        WeightlessBlockConfig(num_features=4, layer_widths=(8, 4), output_dim=4, training_mode="magic")


def test_block_init_distributions():
    cfg = WeightlessBlockConfig(num_features=16, layer_widths=(256, 64), output_dim=64, seed=3)
    blk = WeightlessBlock(cfg)
    th = np.concatenate([l.theta.data.ravel() for l in blk.layers])
    assert -1 <= th.min() and th.max() <= 1 and abs(th.mean()) < 0.05
    assert abs(blk.summation.e.data.std() - 0.02) < 0.005
    assert not any(l.theta.decay for l in blk.layers)


def test_block_output_shape_and_unfitted_error():
    blk = small_block()
    assert blk.forward(Tensor(np.zeros((5, 6)))).shape == (5, 8)
    fresh = WeightlessBlock(blk.config)
    with pytest.raises(RuntimeError):
        fresh.forward(Tensor(np.zeros((1, 6))))


def test_zero_encoded_values_give_zero_output():
    blk = small_block()
    blk.summation.e.data[:] = 0
    x = np.random.default_rng(1).normal(size=(20, 6))
    assert np.all(blk.forward(Tensor(x)).data == 0)
    assert np.all(blk.infer(x) == 0)


@pytest.mark.parametrize("G", [1, 3])
def test_infer_is_bit_identical_to_hard_forward(G):
    blk = small_block(G=G)
    x = np.random.default_rng(2).normal(size=(10_000, 6)).astype(np.float32)
    hard = blk.forward(Tensor(x), "hard-efd").data
    inf = blk.infer(x)
    assert hard.dtype == inf.dtype
    assert np.array_equal(hard.view(np.uint32), inf.view(np.uint32))


def test_hard_and_soft_agree_at_vertices():
    """With inputs far from thresholds and saturated tables, soft == hard after thresholding."""
    blk = small_block(seed=4)
    for l in blk.layers:
        l.theta.data = np.where(l.theta.data > 0, 40.0, -40.0).astype(l.theta.dtype)
    blk.encoder = ThermometerEncoder(blk.encoder.thresholds, np.full(6, 1e-4))
    x = np.random.default_rng(5).normal(size=(200, 6))
    x = np.where(np.abs(x[:, :, None] - blk.encoder.thresholds).min(-1) < 0.05, x + 0.1, x)
    with ad.precision(np.float64):
        h = encode_soft(Tensor(x), blk.encoder)
        hh = encode(Tensor(x), blk.encoder)
        for l in blk.layers:
            h = lut_forward_soft(h, l)
            hh = lut_forward_hard(hh, l)
    np.testing.assert_array_equal(h.data > 0.5, hh.data > 0.5)


def test_block_gradients_flow_to_all_parameters_in_hard_mode():
    blk = small_block()
    x = Tensor(np.random.default_rng(6).normal(size=(64, 6)), requires_grad=True)
    ad.backward((blk.forward(x) ** 2).sum())
    assert blk.summation.e.grad is not None and np.any(blk.summation.e.grad != 0)
    assert all(l.theta.grad is not None for l in blk.layers)
    assert np.any(x.grad != 0)


def test_quantized_infer_within_bound():
    blk = small_block(G=3)
    x = np.random.default_rng(7).normal(size=(1000, 6))
    ref = blk.infer(x, dtype=np.float64)
    blk.quantize()
    q = blk.infer(x, dtype=np.float64)
    bound = (blk.summation.scale / 2) * blk.summation.group_size
    assert np.max(np.abs(q - ref)) <= bound
    ints = blk.infer_int(x)
    np.testing.assert_allclose(ints * blk.summation.scale, q, rtol=0, atol=1e-12)


def test_fragment_round_trip_preserves_inference():
    blk = small_block(G=2)
    blk.quantize()
    clone = WeightlessBlock.from_fragment(blk.to_fragment())
    x = np.random.default_rng(8).normal(size=(500, 6))
    np.testing.assert_array_equal(clone.output_bits(x), blk.output_bits(x))
    np.testing.assert_array_equal(clone.infer_int(x), blk.infer_int(x))


def test_soft_block_helper_is_float64():
    blk = soft_block(0)
    assert blk.layers[0].theta.dtype == np.float64
