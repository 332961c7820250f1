import numpy as np
import pytest

from encoders import ImageEncoder, TextEncoder, encode_image, encode_text, encoder_backward
from errors import ConfigError, DimensionError
from numkernel import finite_diff_check


def test_image_encoder_grid_shape(rng):
    encoder = ImageEncoder((16, 16, 3), patch_size=2, channels=32, rng=rng)
    f = encode_image(rng.uniform(size=(16, 16, 3)), encoder)
    assert encoder.grid_shape == (8, 8, 32)
    assert f.shape == (8, 8, 32)
    assert np.all(f >= 0)


def test_image_encoder_batch_matches_single(rng):
    encoder = ImageEncoder((8, 8, 3), 2, 5, rng)
    images = rng.uniform(size=(3, 8, 8, 3))
    batch = encode_image(images, encoder)
    np.testing.assert_allclose(batch[1], encode_image(images[1], encoder), rtol=1e-12)


def test_patch_only_sees_its_own_cell(rng):
    encoder = ImageEncoder((8, 8, 3), 2, 4, rng)
    image = rng.uniform(size=(8, 8, 3))
    changed = image.copy()
    changed[0:2, 0:2] += 1.0
    a, b = encode_image(image, encoder), encode_image(changed, encoder)
    diff = np.abs(a - b).sum(axis=-1)
    assert np.all(diff[1:, :] == 0) and np.all(diff[:, 1:] == 0)


def test_patch_size_must_divide_image():
    with pytest.raises(ConfigError):
        ImageEncoder((10, 10, 3), 3, 4)


def test_image_encoder_rejects_wrong_shape(rng):
    encoder = ImageEncoder((8, 8, 3), 2, 4, rng)
    with pytest.raises(DimensionError):
        encode_image(rng.uniform(size=(8, 8, 1)), encoder)


def test_text_encoder_shapes(rng):
    encoder = TextEncoder(vocab=20, hidden=8, features=6, rng=rng)
    assert encode_text(np.ones(20), encoder).shape == (6,)
    assert encode_text(np.ones((4, 20)), encoder).shape == (4, 6)
    with pytest.raises(DimensionError):
        encode_text(np.ones(19), encoder)


def test_zero_bow_gives_bias_only_features(rng):
    encoder = TextEncoder(10, 4, 3, rng)
    f = encode_text(np.zeros(10), encoder)
    hidden = np.maximum(encoder.fc1.bias.value, 0.0)
    expected = encoder.fc2.weight.value @ hidden + encoder.fc2.bias.value
    np.testing.assert_allclose(f, expected, rtol=1e-12)


def test_encoders_are_deterministic_under_seed():
    a = ImageEncoder((8, 8, 3), 2, 4, np.random.default_rng(5))
    b = ImageEncoder((8, 8, 3), 2, 4, np.random.default_rng(5))
    for name, tensor in a.tensors().items():
        assert tensor.value.tobytes() == b.tensors()[name].value.tobytes()


def test_image_encoder_parameter_gradient(rng):
    encoder = ImageEncoder((8, 8, 3), 2, 3, rng)
    images = rng.uniform(size=(2, 8, 8, 3))
    probe = rng.normal(size=(2, 4, 4, 3))
    weight = encoder.hidden.weight

    def f(value):
        weight.value[...] = value
        encoder.hidden.weight.zero_grad()
        encoder.patch_proj.weight.zero_grad()
        encoder.patch_proj.bias.zero_grad()
        encoder.hidden.bias.zero_grad()
        out, cache = encoder.forward(images)
        encoder_backward(encoder, probe, cache)
        return float((out * probe).sum()), weight.grad.copy()

    assert finite_diff_check(f, weight.value.copy()).passed


def test_text_encoder_input_gradient(rng):
    encoder = TextEncoder(12, 6, 5, rng)
    probe = rng.normal(size=(3, 5))

    def f(bows):
        out, cache = encoder.forward(bows)
        return float((out * probe).sum()), encoder.backward(probe, cache)

    assert finite_diff_check(f, rng.uniform(0, 3, size=(3, 12))).passed


@pytest.mark.parametrize("make,inputs,grad_shape", [
    (lambda rng: ImageEncoder((8, 8, 3), 2, 4, rng), (2, 8, 8, 3), (2, 4, 4, 4)),
    (lambda rng: TextEncoder(12, 6, 5, rng), (2, 12), (2, 5)),
])
def test_backward_twice_doubles_parameter_gradients(rng, make, inputs, grad_shape):
    encoder = make(rng)
    x = rng.uniform(size=inputs)
    g = rng.normal(size=grad_shape)
    _, cache = encoder.forward(x)
    encoder_backward(encoder, g, cache)
    once = {name: t.grad.copy() for name, t in encoder.tensors().items()}
    encoder_backward(encoder, g, cache)
    for name, t in encoder.tensors().items():
        assert np.array_equal(t.grad, 2 * once[name])
