"""Gradient-matching dataset condensation.

Distills a dataset into ``ipc`` synthetic examples per class by driving the
network gradient on the synthetic set toward the network gradient on real
data, class by class, while periodically re-initializing and briefly training
the probe network on the current synthetic set.  The synthetic pixels are
optimized unclamped; clamping to [0, 1] happens only when the result is
exported (PMDS1) or wrapped as a regular dataset.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import nnet
from .data import CondensedDataset, Dataset, MixedDataset, mix
from .errors import NumericError, ValidationError
from .nnet import GradBundle, MlpParams, MlpSpec


def _require(cond: bool, msg: str) -> None:
    if not cond:
        raise ValidationError(msg)


@dataclass(frozen=True)
class CondenseConfig:
    ipc: int = 10
    outer_iterations: int = 1000
    net_reinit_period: int = 100
    inner_net_steps: int = 10
    lr_synthetic: float = 0.1
    lr_net: float = 0.01
    real_batch_per_class: int = 64
    seed: int = 0

    def __post_init__(self):
        _require(self.ipc >= 1, "ipc must be >= 1")
        _require(self.lr_synthetic > 0 and self.lr_net > 0,
                 "learning rates must be positive")
        _require(self.outer_iterations >= 0, "outer_iterations must be >= 0")
        _require(self.net_reinit_period >= 1, "net_reinit_period must be >= 1")
        _require(self.real_batch_per_class >= 1, "real_batch_per_class must be >= 1")


def _layer_vectors(g: GradBundle) -> list[np.ndarray]:
    out = []
    for k, dw in enumerate(g.d_weights):
        if g.d_biases:
            out.append(np.concatenate([np.asarray(dw, np.float64).ravel(),
                                       np.asarray(g.d_biases[k], np.float64).ravel()]))
        else:
            out.append(np.asarray(dw, np.float64).ravel())
    return out


def gradient_distance(g1: GradBundle, g2: GradBundle,
                      mode: str = "layerwise_cosine") -> float:
    """Sum over layers of (1 - cosine similarity) between gradient bundles.

    Weight and bias of a layer count as one vector; a zero-norm layer on
    either side contributes 1.  Invariant to positive per-layer rescaling.
    """
    _require(mode == "layerwise_cosine", f"unsupported mode {mode!r}")
    v1, v2 = _layer_vectors(g1), _layer_vectors(g2)
    _require(len(v1) == len(v2), "bundles have different layer counts")
    total = 0.0
    for a, b in zip(v1, v2):
        _require(a.shape == b.shape, "bundles have different layer shapes")
        na, nb = float(np.linalg.norm(a)), float(np.linalg.norm(b))
        if na == 0.0 or nb == 0.0:
            total += 1.0
        else:
            total += 1.0 - float(a @ b) / (na * nb)
    return total


def _sgd_step(params: MlpParams, feats: np.ndarray, labels: np.ndarray,
              lr: float) -> MlpParams:
    g = nnet.loss_and_grad(params, feats, labels)
    ws = tuple(w - lr * dw for w, dw in zip(params.weights, g.d_weights))
    bs = tuple(b - lr * db for b, db in zip(params.biases, g.d_biases)) \
        if params.spec.use_bias else ()
    return MlpParams(params.spec, ws, bs)


def condense(dataset: Dataset, spec: MlpSpec, config: CondenseConfig) -> CondensedDataset:
    """Distill ``dataset`` into ``config.ipc`` synthetic points per class."""
    _require(dataset.num_classes == spec.num_classes,
             f"dataset has {dataset.num_classes} classes, spec expects "
             f"{spec.num_classes}")
    _require(dataset.dim == spec.input_dim,
             f"dataset dim {dataset.dim} != spec input dim {spec.input_dim}")
    classes = dataset.num_classes
    rng = np.random.default_rng(config.seed)

    syn = 0.5 + 0.1 * rng.standard_normal((classes * config.ipc, dataset.dim))
    syn = syn.astype(np.float32)
    syn_labels = np.repeat(np.arange(classes), config.ipc)
    class_rows = [np.flatnonzero(dataset.labels == c) for c in range(classes)]
    for c, rows in enumerate(class_rows):
        _require(len(rows) >= 1, f"class {c} has no real examples")

    params = None
    for it in range(config.outer_iterations):
        if it % config.net_reinit_period == 0:
            params = nnet.init_params(spec, int(rng.integers(0, 2**63 - 1)))
        for c in range(classes):
            rows = class_rows[c]
            take = min(config.real_batch_per_class, len(rows))
            batch_idx = rng.choice(rows, size=take, replace=False)
            real_grad = nnet.loss_and_grad(params, dataset.features[batch_idx],
                                           dataset.labels[batch_idx])
            sl = slice(c * config.ipc, (c + 1) * config.ipc)
            g = nnet.grad_of_grad_distance(params, syn[sl], syn_labels[sl], real_grad)
            syn[sl] = syn[sl] - config.lr_synthetic * g.astype(np.float32)
        if not np.isfinite(syn).all():
            raise NumericError(f"synthetic features diverged at iteration {it}")
        for _ in range(config.inner_net_steps):
            params = _sgd_step(params, syn, syn_labels, config.lr_net)

    return CondensedDataset(dataset.name, config.ipc, syn, syn_labels)


def build_condensed_mix(cond_a: CondensedDataset, cond_b: CondensedDataset,
                        alpha: float = 0.5) -> MixedDataset:
    """Half/half mixture of two condensed sets, a drop-in for the real mixture."""
    _require(cond_a.num_classes == cond_b.num_classes,
             "condensed sets must share one class count")
    return mix(cond_a.to_dataset(), cond_b.to_dataset(), alpha)
