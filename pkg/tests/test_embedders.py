import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from textmatch import embedders as E
from textmatch.tensor import ConfigurationError, Tensor

DIGITS = E.Alphabet(E.DIGIT_ALPHABET)


def test_encode_pads_and_masks():
    enc = E.encode_indices("123", DIGITS, 6)
    assert enc.indices == (1, 2, 3, 10, 10, 10)
    assert enc.pad_mask == (True, True, True, False, False, False)


def test_encode_truncates_long_text():
    enc = E.encode_indices("12345678", DIGITS, 6)
    assert len(enc.indices) == 6 and all(enc.pad_mask)


def test_out_of_alphabet_character_is_input_error():
    with pytest.raises(E.InputError, match="position 1"):
        E.encode_indices("1a", DIGITS, 6)


@given(st.text(alphabet="0123456789", max_size=10), st.integers(1, 12))
def test_mask_counts_real_characters(text, s_t):
    enc = E.encode_indices(text, DIGITS, s_t)
    assert sum(enc.pad_mask) == min(len(text), s_t)
    assert len(enc.indices) == s_t


def test_alphabet_must_end_with_pad_and_be_unique():
    with pytest.raises(ValueError):
        E.Alphabet("abc")
    with pytest.raises(ValueError):
        E.Alphabet("aab*")
    assert E.Alphabet(E.IAM_ALPHABET).pad_index == len(E.IAM_ALPHABET) - 1


def test_sinusoidal_positions_known_values():
    pos = E.sinusoidal_positions(4, 6).data
    np.testing.assert_allclose(pos[0], [0, 1, 0, 1, 0, 1], atol=1e-15)
    assert pos[1, 0] == pytest.approx(np.sin(1.0))
    assert pos[1, 1] == pytest.approx(np.cos(1.0))
    with pytest.raises(ConfigurationError):
        E.sinusoidal_positions(4, 5)


def test_preprocess_maps_to_unit_range():
    raw = np.array([[0, 255], [255, 0]], dtype=np.uint8)
    out = E.preprocess_image(raw, 32, 256)
    assert out.shape == (1, 32, 256)
    assert out.data.min() >= -1 and out.data.max() <= 1


def test_resize_identity_and_constant():
    img = np.random.default_rng(0).uniform(size=(5, 7))
    np.testing.assert_allclose(E.resize_bilinear(img, 5, 7), img)
    np.testing.assert_allclose(E.resize_bilinear(np.full((3, 4), 2.5), 9, 2), 2.5)


def test_conv_plan_reaches_one_row_of_s_i_slices():
    cfg = E.EncoderConfig(s_i=64, d_i=32, channels=(4, 4, 8))
    cfg.validate()
    params = E.init_encoder(cfg, np.random.default_rng(0))
    imgs = Tensor(np.random.default_rng(1).uniform(-1, 1, (2, 1, 32, 256)))
    out = E.encode_image_batch(imgs, params)
    assert out.shape == (2, 64, 32)


def test_bad_slice_count_is_configuration_error():
    with pytest.raises(ConfigurationError):
        E.EncoderConfig(s_i=48).validate()


def test_calibration_standardises_pre_activation():
    cfg = E.EncoderConfig(image_w=32, s_i=8, d_i=8, channels=(3, 3, 4))
    params = E.init_encoder(cfg, np.random.default_rng(0))
    imgs = np.random.default_rng(2).uniform(-1, 1, (6, 1, 32, 32))
    E.calibrate_statistics(params, imgs)
    collected = []
    E._conv_features(Tensor(imgs), params, collect=collected)
    block = params.blocks[0]
    z = (collected[0] - block.running_mean[:, None, None]) / np.sqrt(block.running_var[:, None, None] + params.eps)
    np.testing.assert_allclose(z.mean(axis=(0, 2, 3)), 0, atol=1e-8)
    np.testing.assert_allclose(z.var(axis=(0, 2, 3)), 1, atol=1e-3)


@pytest.mark.parametrize("value,want", [(255, 1.0), (0, -1.0)])
def test_preprocess_endpoints(value, want):
    out = E.preprocess_image(np.full((20, 50), value, np.uint8), 32, 256)
    assert np.all(out.data == want)


def test_preprocess_rejects_empty():
    with pytest.raises(E.InputError):
        E.preprocess_image(np.zeros((0, 5), np.uint8))


def test_checkerboard_downsize_preserves_mean():
    board = (np.indices((64, 512)).sum(axis=0) % 2 * 255).astype(np.uint8)
    out = E.preprocess_image(board, 32, 256).data
    # independent resampler: average each 2x2 block, then map to [-1, 1]
    area = board.reshape(32, 2, 256, 2).mean(axis=(1, 3)) / 127.5 - 1
    assert out.min() >= -1 and out.max() <= 1
    assert abs(out.mean() - area.mean()) <= 0.01


def test_position_row_formula():
    row = E.sinusoidal_positions(2, 4).data[1]
    np.testing.assert_allclose(row, [np.sin(1), np.cos(1), np.sin(10000**-0.5), np.cos(10000**-0.5)])
    assert np.all(np.abs(E.sinusoidal_positions(50, 8).data) <= 1)


def test_add_positions_identity_and_linearity():
    rng = np.random.default_rng(0)
    a, b, p = (Tensor(rng.normal(size=(3, 4))) for _ in range(3))
    np.testing.assert_array_equal(E.add_positions(a, Tensor(np.zeros((3, 4)))).data, a.data)
    lhs = E.add_positions(a, p).data + E.add_positions(b, p).data
    np.testing.assert_allclose(lhs, E.add_positions(Tensor(a.data + b.data), Tensor(2 * p.data)).data)
    with pytest.raises(Exception):
        E.add_positions(a, Tensor(np.zeros((2, 4))))


@pytest.mark.parametrize(
    "text,s_t,indices,mask",
    [("ab", 4, "ab**", (1, 1, 0, 0)), ("", 3, "***", (0, 0, 0)), ("abcdefgh", 6, "abcdef", (1,) * 6)],
)
def test_encode_text_examples(text, s_t, indices, mask):
    alpha = E.Alphabet(E.IAM_ALPHABET)
    T_emb = Tensor(np.arange(len(alpha) * 2, dtype=float).reshape(-1, 2))
    emb, enc = E.encode_text(text, alpha, s_t, T_emb)
    assert enc.indices == tuple(alpha.index(c) for c in indices)
    assert enc.pad_mask == tuple(bool(m) for m in mask)
    np.testing.assert_array_equal(emb.T.data, T_emb.data[list(enc.indices)])


@given(st.text(alphabet="abc", max_size=5), st.text(alphabet="abc", max_size=5))
def test_encoding_is_injective(a, b):
    alpha = E.Alphabet("abc*")
    ea, eb = E.encode_indices(a, alpha, 5), E.encode_indices(b, alpha, 5)
    assert (a == b) == ((ea.indices, ea.pad_mask) == (eb.indices, eb.pad_mask))


def test_identical_images_identical_embeddings():
    cfg = E.EncoderConfig(image_w=32, s_i=8, d_i=8, channels=(3, 3, 4))
    params = E.init_encoder(cfg, np.random.default_rng(0))
    img = E.preprocess_image(np.random.default_rng(1).integers(0, 256, (32, 32)).astype(np.uint8), 32, 32)
    a = E.encode_image(img, params).J.data
    b = E.encode_image(Tensor(img.data.copy()), params).J.data
    assert a.shape == (8, 8) and np.array_equal(a, b) and np.all(np.isfinite(a))


def test_encoder_gradient_on_two_slice_config():
    from textmatch import tensor as tn

    cfg = E.EncoderConfig(image_w=16, s_i=2, d_i=4, channels=(2, 2, 3))
    params = E.init_encoder(cfg, np.random.default_rng(3))
    imgs = Tensor(np.random.default_rng(4).uniform(-1, 1, (2, 1, 32, 16)))
    E.calibrate_statistics(params, imgs.data)
    with tn.Tape() as tape:
        loss = tn.sum(E.encode_image_batch(imgs, params))
    tn.backward(loss, tape)
    for name, t in params.named_tensors():
        fd = tn.finite_difference_gradient(lambda _: tn.sum(E.encode_image_batch(imgs, params)).item(), t).data
        err = np.linalg.norm(fd - t.grad) / max(np.linalg.norm(fd), 1e-12)
        assert err < 1e-4, name
