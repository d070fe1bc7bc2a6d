import ast
import inspect

import numpy as np
import pytest

from hdesnet import reference
from hdesnet.errors import InvalidGeometryError, ShapeError
from hdesnet.kernels import BnParams, ConvSpec
from hdesnet.tensor import Tensor, new_filled


def test_identity_kernel(rng):
    x = Tensor(rng.standard_normal((1, 3, 4, 5)))
    w = np.eye(3, dtype=np.float32).reshape(3, 3, 1, 1)
    assert reference.naive_conv2d(x, w, None, ConvSpec(3, 3)).equal(x)


@pytest.mark.parametrize("ty,tx", [(0, 0), (0, 2), (2, 1), (1, 1)])
def test_single_tap_shifts(rng, ty, tx):
    x = rng.standard_normal((1, 1, 5, 6)).astype(np.float32)
    w = np.zeros((1, 1, 3, 3), dtype=np.float32)
    w[0, 0, ty, tx] = 1.0
    out = reference.naive_conv2d(Tensor(x), w, None, ConvSpec(1, 1, 3, 1, 1)).array[0, 0]
    padded = np.pad(x[0, 0], 1)
    assert np.array_equal(out, padded[ty:ty + 5, tx:tx + 6])


def test_conv_validation():
    with pytest.raises(ShapeError):
        reference.naive_conv2d(new_filled(1, 2, 3, 3, 0), np.ones((1, 1, 1, 1)), None, ConvSpec(2, 1))
    with pytest.raises(InvalidGeometryError):
        reference.naive_conv2d(new_filled(1, 1, 2, 2, 0), np.ones((1, 1, 3, 3)), None, ConvSpec(1, 1, 3))


def test_bilinear_identity_and_constant(rng):
    x = Tensor(rng.standard_normal((1, 2, 3, 4)))
    assert reference.naive_bilinear(x, 1).equal(x)
    out = reference.naive_bilinear(new_filled(1, 1, 2, 3, -1.5), 4)
    assert out.shape == (1, 1, 8, 12) and np.all(out.array == -1.5)


def test_scalar_ops():
    x = Tensor(np.array([-2.0, 0.5, 7.0]).reshape(1, 1, 1, 3))
    assert reference.naive_relu(x).data.tolist() == [0.0, 0.5, 7.0]
    assert reference.naive_relu6(x).data.tolist() == [0.0, 0.5, 6.0]
    p = BnParams([2.0], [1.0], [0.0], [1.0], 1e-12)
    assert reference.naive_batchnorm(new_filled(1, 1, 1, 1, 3.0), p).data[0] == pytest.approx(7.0)
    assert reference.naive_global_avg_pool(Tensor(np.arange(4.0).reshape(1, 1, 2, 2))).data[0] == 1.5


def test_oracle_shares_no_code_with_kernels():
    tree = ast.parse(inspect.getsource(reference))
    imported = set()
    for node in ast.walk(tree):
        if isinstance(node, ast.ImportFrom):
            imported.add(node.module or "")
        elif isinstance(node, ast.Import):
            imported.update(a.name for a in node.names)
    assert not any("kernels" in m for m in imported)
