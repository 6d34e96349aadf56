import numpy as np
import pytest

from siamsearch.autograd import Mode, Tensor
from siamsearch.backbone import TinyBackbone
from siamsearch.errors import ShapeError


def test_default_widths_parameter_count():
    bb = TinyBackbone.create()
    # three 3x3 kernels plus BN scale and shift per channel
    assert bb.parameter_count() == 864 + 64 + 18432 + 128 + 73728 + 256
    assert bb.feature_dim == 128


def test_forward_shape_and_determinism():
    x = Tensor(np.random.default_rng(0).normal(size=(4, 3, 16, 16)))
    a = TinyBackbone.create((4, 6, 8), seed=3)
    b = TinyBackbone.create((4, 6, 8), seed=3)
    fa, fb = a.forward(x), b.forward(x)
    assert fa.shape == (4, 8)
    np.testing.assert_array_equal(fa.data, fb.data)


def test_eight_pixel_images_reduce_to_one_cell():
    bb = TinyBackbone.create((2, 2, 2), seed=0)
    assert bb.forward(Tensor(np.ones((2, 3, 8, 8))), Mode.EVAL).shape == (2, 2)


def test_gradients_reach_every_parameter():
    bb = TinyBackbone.create((4, 4, 4), seed=1)
    x = Tensor(np.random.default_rng(1).normal(size=(3, 3, 8, 8)))
    (bb.forward(x) * bb.forward(x)).sum().backward()
    assert all(p.grad is not None and p.grad.shape == p.shape for p in bb.parameters())


def test_rejects_non_image_input():
    bb = TinyBackbone.create((2, 2, 2))
    with pytest.raises(ShapeError):
        bb.forward(Tensor(np.ones((2, 1, 8, 8))))
    with pytest.raises(ShapeError):
        bb.forward(Tensor(np.ones((2, 3, 8, 6))))
