"""Shared fixtures for the PBLS test suite"""

import numpy as np
import pytest

from client_outsourcer import LoopbackChannel
from cloud_worker import CloudWorker
from keygen import MaskKeys, ScaleMode
from matrix_core import ScaledPermutation, SignedPermutation, dense_matrix


@pytest.fixture
def rng():
    return np.random.default_rng(20240607)


@pytest.fixture
def tall_matrix(rng):
    """Factory for random matrices with entries uniform on [-1, 1]"""
    def _make(rows, cols):
        return dense_matrix(rng.uniform(-1.0, 1.0, size=(rows, cols)))
    return _make


@pytest.fixture
def make_keys():
    """Factory for hand-written keys"""
    def _make(p_perm, p_signs, q_perm, q_scales, scale_mode=ScaleMode.PAPER):
        return MaskKeys(p=SignedPermutation(p_perm, p_signs), q=ScaledPermutation(q_perm, q_scales),
                        seed=0, scale_mode=scale_mode)
    return _make


@pytest.fixture
def honest_worker():
    return CloudWorker()


@pytest.fixture
def loopback(honest_worker):
    return LoopbackChannel(honest_worker)


@pytest.fixture
def isolated_env(tmp_path, monkeypatch):
    """No config files or PBLS_* variables leak in from the machine running the tests"""
    monkeypatch.chdir(tmp_path)
    monkeypatch.setenv('HOME', str(tmp_path))
    monkeypatch.delenv('PBLS_PORT', raising=False)
    monkeypatch.delenv('PBLS_FAULT_MODE', raising=False)
    return tmp_path
