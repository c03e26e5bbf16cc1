import numpy as np
import pytest

from vigait import autodiff as ad
from vigait.autodiff import DimensionError, Tensor
from vigait.backbone import BackboneConfig, SetPoolingBackbone, extract, feature_shape, frames_tensor
from vigait.data import SilhouetteSequence


def make(widths=(8, 16, 32), size=(64, 44), emit_global=True, seed=0):
    return SetPoolingBackbone(BackboneConfig(widths=widths, emit_global=emit_global), size, np.random.default_rng(seed))


def test_default_shape_is_8x5():
    assert feature_shape(BackboneConfig(), 64, 44) == (32, 8, 5)
    maps = make().extract(Tensor(np.zeros((3, 64, 44))))
    assert maps.x_f.shape == (32, 8, 5)
    assert maps.x_g.shape == maps.x_f.shape


@pytest.mark.parametrize("widths,size", [((4,), (10, 7)), ((2, 3), (16, 12)), ((3, 3, 3, 3), (64, 44))])
def test_shape_matches_closed_form(widths, size):
    bb = make(widths, size)
    assert bb.extract(Tensor(np.zeros((2, *size)))).x_f.shape == feature_shape(bb.cfg, *size)


def test_zero_input_zero_bias_gives_zero_map():
    maps = make().extract(Tensor(np.zeros((4, 64, 44))))
    assert not maps.x_f.data.any()
    assert not maps.x_g.data.any()


def test_single_frame_equals_frame_cnn(rng):
    bb = make()
    frame = rng.uniform(size=(1, 64, 44))
    x = Tensor(frame.reshape(1, 1, 64, 44))
    for i in range(3):
        x = bb._block(x, f"backbone.conv{i}")
    np.testing.assert_array_equal(bb.extract(Tensor(frame)).x_f.data, x.data[0])


def test_block_order_equals_conv_act_pool(rng):
    bb = make()
    x = Tensor(rng.normal(size=(2, 1, 64, 44)))
    w, b = bb.params["backbone.conv0.weight"], bb.params["backbone.conv0.bias"]
    b.data = rng.normal(size=b.shape)
    ref = ad.max_pool2d(ad.leaky_relu(ad.bias_add(ad.conv2d(x, w, padding=1), b, axis=1), 0.01), 2)
    assert bb._block(x, "backbone.conv0").data.tobytes() == ref.data.tobytes()


def test_frame_permutation_invariance(rng):
    bb = make()
    frames = rng.uniform(size=(6, 64, 44))
    a = bb.extract(Tensor(frames))
    b = bb.extract(Tensor(frames[rng.permutation(6)]))
    np.testing.assert_array_equal(a.x_f.data, b.x_f.data)
    np.testing.assert_array_equal(a.x_g.data, b.x_g.data)


def test_adding_a_frame_never_lowers_x_f(rng):
    bb = make()
    frames = rng.uniform(size=(5, 64, 44))
    fewer = bb.extract(Tensor(frames[:4])).x_f.data
    more = bb.extract(Tensor(frames)).x_f.data
    assert np.all(more >= fewer)


def test_batch_matches_single(rng):
    bb = make()
    frames = rng.uniform(size=(3, 4, 64, 44))
    batched = bb.extract(Tensor(frames))
    for i in range(3):
        one = bb.extract(Tensor(frames[i]))
        np.testing.assert_allclose(batched.x_f.data[i], one.x_f.data, atol=1e-12)
        np.testing.assert_allclose(batched.x_g.data[i], one.x_g.data, atol=1e-12)


def test_global_path_optional():
    bb = make(emit_global=False)
    assert bb.extract(Tensor(np.zeros((2, 64, 44)))).x_g is None
    assert not any("global" in k for k in bb.parameters())


def test_frame_size_mismatch():
    with pytest.raises(DimensionError):
        make().extract(Tensor(np.zeros((2, 60, 44))))


def test_config_validation():
    with pytest.raises(ValueError):
        BackboneConfig(widths=())
    with pytest.raises(ValueError):
        BackboneConfig(widths=(4, 0))
    with pytest.raises(ValueError):
        SetPoolingBackbone(BackboneConfig(widths=(2, 2, 2, 2, 2)), (64, 44))


def test_extract_sequence_wrapper(rng):
    bb = make()
    frames = (rng.uniform(size=(3, 64, 44)) > 0.5).astype(np.uint8) * 255
    seq = SilhouetteSequence(frames, "001", 0, 0.0)
    direct = bb.extract(frames_tensor(frames))
    np.testing.assert_array_equal(extract(seq, bb).x_f.data, direct.x_f.data)
    assert frames_tensor(frames).data.max() == 1.0


def test_backbone_gradcheck(rng):
    bb = make((2, 3), (16, 12))
    x = Tensor(rng.uniform(size=(2, 3, 16, 12)))
    for p in bb.parameters().values():
        p.data = p.data + 0.1 * rng.normal(size=p.shape)
    w_f = Tensor(rng.normal(size=(2, 3, 4, 3)))

    def loss(_):
        maps = bb.extract(x)
        return ad.tsum(maps.x_f * w_f) + ad.tsum(maps.x_g * maps.x_g)

    for name, p in bb.parameters().items():
        assert ad.finite_diff_check(loss, p, coords=6, rng=rng) < 1e-4, name
