import pytest

from tttserve.backends import BackendType
from tttserve.engine import StreamSpec
from tttserve.harness.oracle import sequential_oracle
from tttserve.harness.trace import TraceSpec, generate_trace


def small_trace(streams=4, decode=24, chunk=8, prompt=16, backend=BackendType.FAST_WEIGHT, **kw):
    return [
        StreamSpec(f"r{i + 1}", prompt_len=prompt, decode_len=decode, chunk=chunk, backend=backend, **kw)
        for i in range(streams)
    ]


@pytest.fixture
def tiny_trace():
    return small_trace()


@pytest.fixture(scope="session")
def uniform_trace():
    return generate_trace(TraceSpec())


@pytest.fixture(scope="session")
def uniform_oracle(uniform_trace):
    return sequential_oracle(uniform_trace, 0)


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    rep = outcome.get_result()
    if rep.when == "call":
        # read back by the acceptance summary for the second backend
        item.call_passed = rep.passed
