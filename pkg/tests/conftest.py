import pytest

from setfeat import tensor


@pytest.fixture
def f64():
    """Run the test in 64-bit engine mode, restoring the previous mode after."""
    saved = tensor.get_precision()
    tensor.set_precision("f64")
    yield
    tensor.set_precision(saved)


@pytest.fixture
def f32():
    saved = tensor.get_precision()
    tensor.set_precision("f32")
    yield
    tensor.set_precision(saved)
