"""Test configuration and fixtures."""

from pathlib import Path

import numpy as np
import pytest

from mcf_fusion.api.dto import Geometry, Task
from mcf_fusion.core.config import get_presets, get_settings
from mcf_fusion.core.logging import setup_logging
from mcf_fusion.nn.encoders import EncoderVariant
from mcf_fusion.services.bundle import FeatureBundle, write_bundle
from mcf_fusion.services.model import McfModel
from tests.factories import linear_bundle, toy_config, xor_bundle


@pytest.fixture(autouse=True)
def setup_test_env(monkeypatch):
    """Quiet logging and fresh settings for every test."""
    monkeypatch.setenv("MCF_LOG_LEVEL", "WARNING")
    # capsys swaps stderr per test; cached loggers would keep a closed stream.
    monkeypatch.setenv("MCF_LOG_CACHE", "false")
    get_settings.cache_clear()
    get_presets.cache_clear()
    setup_logging("WARNING")
    yield
    get_settings.cache_clear()
    get_presets.cache_clear()


@pytest.fixture
def rng() -> np.random.Generator:
    return np.random.default_rng(1234)


@pytest.fixture
def toy_geometry() -> Geometry:
    return Geometry.toy()


@pytest.fixture
def toy_model() -> McfModel:
    return McfModel(toy_config(), seed=0)


@pytest.fixture
def toy_single_label_model() -> McfModel:
    return McfModel(toy_config(EncoderVariant.SAG_MHA_ENC, Task.SINGLE_LABEL), seed=0)


@pytest.fixture
def toy_linear_bundle() -> FeatureBundle:
    return linear_bundle()


@pytest.fixture
def toy_xor_bundle() -> FeatureBundle:
    return xor_bundle()


@pytest.fixture
def linear_bundle_path(tmp_path: Path, toy_linear_bundle: FeatureBundle) -> Path:
    path = tmp_path / "linear.mcfb"
    write_bundle(path, toy_linear_bundle)
    return path


@pytest.fixture
def xor_bundle_path(tmp_path: Path, toy_xor_bundle: FeatureBundle) -> Path:
    path = tmp_path / "xor.mcfb"
    write_bundle(path, toy_xor_bundle)
    return path
