import pytest

from dvmap.survey import load_codebook


@pytest.fixture(scope="session")
def codebook():
    return load_codebook()
