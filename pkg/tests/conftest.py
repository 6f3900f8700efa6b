import pytest


def pytest_addoption(parser):
    parser.addoption(
        "--regen-golden",
        action="store_true",
        default=False,
        help="regenerate golden fixture files from the oracle implementations",
    )


@pytest.fixture
def regen_golden(request):
    return request.config.getoption("--regen-golden")
