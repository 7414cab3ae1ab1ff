import pytest

from fastocr.kernels import warmup_kernels


@pytest.fixture(scope="session", autouse=True)
def warm_kernels():
    # JIT compilation must not leak into timed acceptance checks
    warmup_kernels()
