from pathlib import Path

import pytest

from xhate.synthetic import synthetic_corpus

DATA = Path(__file__).parent / "data"


@pytest.fixture(autouse=True)
def _isolated_cache(tmp_path, monkeypatch):
    monkeypatch.setenv("XHATE_CACHE_DIR", str(tmp_path / "cache"))


@pytest.fixture(scope="session")
def data_dir():
    return DATA


@pytest.fixture(scope="session")
def syn_en():
    return synthetic_corpus("en", 400, seed=0)


@pytest.fixture(scope="session")
def syn_fr():
    return synthetic_corpus("fr", 100, seed=0)
