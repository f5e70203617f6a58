"""Shared pytest configuration for the benchkit test files."""


def pytest_configure(config):
    config.addinivalue_line('markers', 'slow: longer statistical and matrix runs (deselect with -m "not slow")')
