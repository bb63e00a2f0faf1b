import pytest

try:
    from threadpoolctl import threadpool_limits
except ImportError:
    threadpool_limits = None


@pytest.fixture(scope="session", autouse=True)
def single_threaded_blas():
    # the suite's matrix products are small; BLAS worker wake-ups dominate them
    if threadpool_limits is None:
        yield
        return
    with threadpool_limits(limits=1, user_api="blas"):
        yield
