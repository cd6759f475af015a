import pytest

from .reference import trained_desk_net


@pytest.fixture(scope="session")
def model_cache(request):
    return request.config.cache.mkdir("fxptune-models")


@pytest.fixture(scope="session")
def desk8(model_cache):
    return trained_desk_net(model_cache, "desk8", seed=0)


def pytest_terminal_summary(terminalreporter):
    from .reference import ACCEPTANCE

    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(ACCEPTANCE):
        terminalreporter.write_line(ACCEPTANCE[number])
