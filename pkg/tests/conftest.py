import pytest


def pytest_configure(config):
    config.addinivalue_line(
        "markers", "slow: desk-scale training runs (minutes to an hour on one core)"
    )
