#!/usr/bin/env python3
"""
Broad Learning System for PBLS
Random feature nodes, tanh/sigmoid enhancement nodes and ridge-trained output
weights, with the pseudoinverse computed locally or by an outsourcing backend.
"""

import json
import logging
import struct
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, List, Optional, Tuple, Union

import numpy as np
from scipy.special import expit

from client_outsourcer import local_pinv, outsourced_pinv
from config import PblsConfig
from data import Dataset
from keygen import generate_keys
from matrix_core import (
    DimensionError,
    InvalidArgumentError,
    MatrixFormatError,
    _operand,
    dense_matrix,
    deserialize_matrix,
    mat_mul,
    serialize_matrix,
)
from metrics import MetricsCollector

logger = logging.getLogger(__name__)

MODEL_MAGIC = b'PBLSMDL1'
MODEL_HEADER = struct.Struct('<I')

ACTIVATIONS = {
    'linear': lambda x: x,
    'sigmoid': expit,
    'tanh': np.tanh,
}
FEATURE_ACTIVATIONS = ('linear', 'sigmoid')
ENHANCEMENT_ACTIVATIONS = ('tanh', 'sigmoid')

PinvBackend = Callable[[np.ndarray, float], np.ndarray]


class StateError(RuntimeError):
    """Raised when an untrained model is used for inference"""
    pass


class ModelFileError(ValueError):
    """Raised when a saved model cannot be read back"""
    pass


@dataclass(frozen=True)
class BlsConfig:
    """Network shape and training hyperparameters"""
    n_feature_groups: int = 2
    nodes_per_feature_group: int = 5
    n_enh_groups: int = 2
    nodes_per_enh_group: int = 10
    lam: float = 1e-8
    enhancement_scale: float = 0.8
    seed: int = 0
    feature_activation: str = 'linear'
    enhancement_activation: str = 'tanh'

    def __post_init__(self):
        counts = (self.n_feature_groups, self.nodes_per_feature_group,
                  self.n_enh_groups, self.nodes_per_enh_group)
        if min(counts) < 1:
            raise InvalidArgumentError(f"all group counts and widths must be >= 1, got {counts}")
        if self.lam <= 0:
            raise InvalidArgumentError(f"lambda must be > 0, got {self.lam}")
        if self.enhancement_scale <= 0:
            raise InvalidArgumentError(f"enhancement_scale must be > 0, got {self.enhancement_scale}")
        if self.feature_activation not in FEATURE_ACTIVATIONS:
            raise InvalidArgumentError(f"feature activation must be one of {FEATURE_ACTIVATIONS}")
        if self.enhancement_activation not in ENHANCEMENT_ACTIVATIONS:
            raise InvalidArgumentError(f"enhancement activation must be one of {ENHANCEMENT_ACTIVATIONS}")

    @property
    def feature_width(self) -> int:
        return self.n_feature_groups * self.nodes_per_feature_group

    @property
    def enhancement_width(self) -> int:
        return self.n_enh_groups * self.nodes_per_enh_group

    @property
    def total_nodes(self) -> int:
        return self.feature_width + self.enhancement_width

    @classmethod
    def from_config(cls, config: PblsConfig, seed: int = 0, lam: Optional[float] = None) -> 'BlsConfig':
        return cls(
            n_feature_groups=config.get('bls.n_feature_groups'),
            nodes_per_feature_group=config.get('bls.nodes_per_feature_group'),
            n_enh_groups=config.get('bls.n_enh_groups'),
            nodes_per_enh_group=config.get('bls.nodes_per_enh_group'),
            lam=lam if lam is not None else config.get('outsourcing.lambda'),
            enhancement_scale=config.get('bls.enhancement_scale'),
            seed=seed,
            feature_activation=config.get('bls.feature_activation'),
            enhancement_activation=config.get('bls.enhancement_activation'),
        )


@dataclass
class BlsModel:
    """Random node weights (re-derivable from the config seed) and the trained output weights"""
    config: BlsConfig
    input_dim: int
    n_classes: int
    feature_groups: List[Tuple[np.ndarray, np.ndarray]] = field(default_factory=list)
    enhancement_groups: List[Tuple[np.ndarray, np.ndarray]] = field(default_factory=list)
    output_weights: Optional[np.ndarray] = None

    @property
    def trained(self) -> bool:
        return self.output_weights is not None


def init_model(config: BlsConfig, input_dim: int, n_classes: int) -> BlsModel:
    """Draw every random weight and bias from the config seed"""
    if input_dim < 1 or n_classes < 1:
        raise InvalidArgumentError(f"input_dim and n_classes must be >= 1, got {input_dim}, {n_classes}")
    rng = np.random.default_rng(config.seed)
    model = BlsModel(config=config, input_dim=input_dim, n_classes=n_classes)

    for _ in range(config.n_feature_groups):
        w = rng.uniform(-1.0, 1.0, size=(input_dim, config.nodes_per_feature_group))
        beta = rng.uniform(-1.0, 1.0, size=config.nodes_per_feature_group)
        model.feature_groups.append((w, beta))

    # keeps Z W_h inside the responsive range of the activation
    shrink = config.enhancement_scale / np.sqrt(config.feature_width)
    for _ in range(config.n_enh_groups):
        w = rng.uniform(-1.0, 1.0, size=(config.feature_width, config.nodes_per_enh_group)) * shrink
        beta = rng.uniform(-1.0, 1.0, size=config.nodes_per_enh_group)
        model.enhancement_groups.append((w, beta))

    return model


def _groups(x: np.ndarray, groups, activation: str) -> np.ndarray:
    phi = ACTIVATIONS[activation]
    return np.hstack([phi(x @ w + beta) for w, beta in groups])


def build_feature_nodes(x, model: BlsModel) -> np.ndarray:
    """Z = [phi(X W_f1 + b_f1), ..., phi(X W_fn + b_fn)]"""
    x = _operand(x)
    if x.shape[1] != model.input_dim:
        raise DimensionError(f"Model expects {model.input_dim} input features, got {x.shape[1]}")
    return dense_matrix(_groups(x, model.feature_groups, model.config.feature_activation))


def build_enhancement_nodes(z, model: BlsModel) -> np.ndarray:
    """H = [xi(Z W_h1 + b_h1), ..., xi(Z W_hm + b_hm)]"""
    z = _operand(z)
    if z.shape[1] != model.config.feature_width:
        raise DimensionError(f"Expected {model.config.feature_width} feature columns, got {z.shape[1]}")
    return dense_matrix(_groups(z, model.enhancement_groups, model.config.enhancement_activation))


def assemble_A(z, h) -> np.ndarray:
    """A = [Z | H]"""
    z = _operand(z)
    h = _operand(h)
    if z.shape[0] != h.shape[0]:
        raise DimensionError(f"Z has {z.shape[0]} rows but H has {h.shape[0]}")
    return dense_matrix(np.hstack([z, h]))


def design_matrix(model: BlsModel, x) -> np.ndarray:
    z = build_feature_nodes(x, model)
    return assemble_A(z, build_enhancement_nodes(z, model))


def train(dataset: Dataset, config: BlsConfig, pinv_backend: PinvBackend = local_pinv) -> BlsModel:
    """
    Fit the output weights W = pinv(A, lam) Y

    pinv_backend is local_pinv or an OutsourcedBackend; errors from it propagate.
    """
    model = init_model(config, dataset.input_dim, dataset.n_classes)
    a = design_matrix(model, dataset.x)
    logger.info(f"Training BLS: A is {a.shape[0]}x{a.shape[1]}, {dataset.n_classes} classes")

    pinv = pinv_backend(a, config.lam)
    model.output_weights = mat_mul(pinv, dataset.y)
    return model


def class_scores(model: BlsModel, x) -> np.ndarray:
    if not model.trained:
        raise StateError("Model has not been trained")
    return mat_mul(design_matrix(model, x), model.output_weights)


def labels_from_scores(scores) -> np.ndarray:
    """Row-wise argmax; ties go to the lowest class index"""
    return np.argmax(np.asarray(scores), axis=1)


def predict(model: BlsModel, x) -> np.ndarray:
    return labels_from_scores(class_scores(model, x))


def evaluate(model: BlsModel, dataset: Dataset) -> float:
    """Fraction of correctly classified rows"""
    return float(np.mean(predict(model, dataset.x) == dataset.labels))


def ridge_residual(a, w, y, lam: float) -> float:
    """||(lam*I + A^T A) W - A^T Y||_F / ||A^T Y||_F"""
    a = np.asarray(a, dtype=np.float64)
    rhs = a.T @ np.asarray(y, dtype=np.float64)
    lhs = lam * w + a.T @ (a @ w)
    scale = np.linalg.norm(rhs)
    return float(np.linalg.norm(lhs - rhs) / scale) if scale > 0 else float(np.linalg.norm(lhs - rhs))


def _setting(config: Optional[PblsConfig], key: str):
    if config is not None:
        value = config.get(key)
        if value is not None:
            return value
    section, name = key.split('.')
    return PblsConfig.DEFAULT_CONFIG[section][name]


class OutsourcedBackend:
    """
    Pseudoinverse backend that outsources to a cloud worker

    Keys are generated per call, sized to A, from `seed` and the call count.
    """

    def __init__(self, channel, config: Optional[PblsConfig] = None, seed: int = 0,
                 metrics: Optional[MetricsCollector] = None):
        self.channel = channel
        self.seed = seed
        self.scale_mode = _setting(config, 'outsourcing.scale_mode')
        self.verify_rounds = _setting(config, 'outsourcing.verify_rounds')
        self.tolerance = _setting(config, 'outsourcing.tolerance')
        self.identity = _setting(config, 'bls.verify_identity')
        self.retries = _setting(config, 'outsourcing.retries')
        self.metrics = metrics or MetricsCollector('client')
        self.calls = 0

    def __call__(self, a: np.ndarray, lam: float) -> np.ndarray:
        rows, cols = a.shape
        with self.metrics.phase_timer('keygen'):
            keys = generate_keys(rows, cols, self.seed + self.calls, self.scale_mode)
        self.metrics.add_ops('keygen', rows + cols)
        self.calls += 1
        return outsourced_pinv(a, lam, keys, self.channel, rounds=self.verify_rounds,
                               tol=self.tolerance, identity=self.identity,
                               retries=self.retries, metrics=self.metrics)


def save_model(model: BlsModel, path: Union[str, Path]) -> None:
    """
    Write magic, a length-prefixed JSON header (config, shapes) and W.

    Random weights are not stored; load_model re-derives them from the seed.
    """
    if not model.trained:
        raise StateError("Only trained models can be saved")
    header = json.dumps({
        'config': asdict(model.config),
        'input_dim': model.input_dim,
        'n_classes': model.n_classes,
    }).encode('utf-8')
    payload = MODEL_MAGIC + MODEL_HEADER.pack(len(header)) + header + serialize_matrix(model.output_weights)
    Path(path).write_bytes(payload)
    logger.info(f"Saved model to {path}")


def load_model(path: Union[str, Path]) -> BlsModel:
    data = Path(path).read_bytes()
    if data[:len(MODEL_MAGIC)] != MODEL_MAGIC:
        raise ModelFileError(f"{path}: not a PBLS model file")
    offset = len(MODEL_MAGIC)
    if len(data) < offset + MODEL_HEADER.size:
        raise ModelFileError(f"{path}: truncated header")
    (header_len,) = MODEL_HEADER.unpack_from(data, offset)
    offset += MODEL_HEADER.size
    try:
        header = json.loads(data[offset:offset + header_len].decode('utf-8'))
        config = BlsConfig(**header['config'])
        weights = deserialize_matrix(data[offset + header_len:])
        model = init_model(config, header['input_dim'], header['n_classes'])
    except (ValueError, KeyError, TypeError, MatrixFormatError) as e:
        raise ModelFileError(f"{path}: {e}")

    if weights.shape != (config.total_nodes, model.n_classes):
        raise ModelFileError(f"{path}: weights {weights.shape} do not fit {config.total_nodes} nodes, "
                             f"{model.n_classes} classes")
    model.output_weights = weights
    return model
