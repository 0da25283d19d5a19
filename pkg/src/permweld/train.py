"""Deterministic minibatch training, evaluation, and checkpoint persistence.

Training is plain momentum SGD (optionally Adam) with an optional cosine
learning-rate decay.  Every source of randomness flows from the config seed,
so identical (dataset, spec, config) triples give bit-identical checkpoints on
one platform.  Evaluation on a mixture is the alpha-weighted combination of
per-part metrics; training on a mixture materializes a balanced physical
union first so both parts carry equal weight.
"""

from __future__ import annotations

import hashlib
import json
import struct
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import nnet
from .data import Dataset, MixedDataset, balanced_concat
from .errors import DataIOError, FormatError, ValidationError
from .nnet import MlpParams, MlpSpec

PMCK_MAGIC = b"PMCK"
PMCK_VERSION = 1

_OPTIMIZERS = ("sgd_momentum", "adam")


def _require(cond: bool, msg: str) -> None:
    if not cond:
        raise ValidationError(msg)


@dataclass(frozen=True)
class TrainConfig:
    optimizer: str = "sgd_momentum"
    learning_rate: float = 0.01
    momentum: float = 0.9
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_eps: float = 1e-8
    weight_decay: float = 1e-4
    epochs: int = 20
    batch_size: int = 128
    cosine_decay: bool = True
    seed: int = 0

    def __post_init__(self):
        _require(self.optimizer in _OPTIMIZERS,
                 f"unknown optimizer {self.optimizer!r}")
        _require(self.learning_rate > 0, "learning_rate must be positive")
        _require(self.weight_decay >= 0, "weight_decay must be >= 0")
        _require(self.epochs >= 0, "epochs must be >= 0")
        _require(self.batch_size >= 1, "batch_size must be >= 1")


@dataclass(frozen=True)
class EvalResult:
    loss: float
    accuracy: float


@dataclass(frozen=True)
class Checkpoint:
    spec: MlpSpec
    params: MlpParams
    metadata: dict = field(default_factory=dict)


def config_digest(config) -> str:
    """Stable hex digest of a config dataclass (or plain dict)."""
    doc = asdict(config) if not isinstance(config, dict) else config
    blob = json.dumps(doc, sort_keys=True, separators=(",", ":")).encode()
    return hashlib.sha256(blob).hexdigest()


def _eval_part(params: MlpParams, features, labels) -> EvalResult:
    logits = nnet.forward(params, features)
    loss = nnet.cross_entropy(logits, labels)
    acc = float(np.mean(np.argmax(logits, axis=1) == np.asarray(labels)))
    return EvalResult(loss, acc)


def evaluate(params: MlpParams, data: Dataset | MixedDataset) -> EvalResult:
    """Loss and accuracy; mixtures combine per-part metrics with their alpha."""
    if isinstance(data, MixedDataset):
        ra = _eval_part(params, data.part_a.features, data.part_a.labels)
        rb = _eval_part(params, data.part_b.features, data.part_b.labels)
        wa, wb = 1.0 - data.alpha, data.alpha
        return EvalResult(wa * ra.loss + wb * rb.loss,
                          wa * ra.accuracy + wb * rb.accuracy)
    _require(data.num_classes == params.spec.num_classes,
             f"dataset has {data.num_classes} classes, model expects "
             f"{params.spec.num_classes}")
    return _eval_part(params, data.features, data.labels)


def _ensemble_part(params_a, params_b, features, labels) -> float:
    pa = nnet._softmax(nnet.forward(params_a, features))
    pb = nnet._softmax(nnet.forward(params_b, features))
    pred = np.argmax(0.5 * (pa + pb), axis=1)
    return float(np.mean(pred == np.asarray(labels)))


def ensemble_accuracy(params_a: MlpParams, params_b: MlpParams,
                      data: Dataset | MixedDataset) -> float:
    """Accuracy of argmax of the mean of the two softmax outputs."""
    _require(params_a.spec == params_b.spec, "ensemble members must share a spec")
    if isinstance(data, MixedDataset):
        acc_a = _ensemble_part(params_a, params_b, data.part_a.features,
                               data.part_a.labels)
        acc_b = _ensemble_part(params_a, params_b, data.part_b.features,
                               data.part_b.labels)
        return (1.0 - data.alpha) * acc_a + data.alpha * acc_b
    return _ensemble_part(params_a, params_b, data.features, data.labels)


class _Optimizer:
    def __init__(self, config: TrainConfig, params: MlpParams):
        self.config = config
        self.mom_w = [np.zeros_like(w) for w in params.weights]
        self.mom_b = [np.zeros_like(b) for b in params.biases]
        self.vel_w = [np.zeros_like(w) for w in params.weights]
        self.vel_b = [np.zeros_like(b) for b in params.biases]
        self.t = 0

    def step(self, params: MlpParams, grad: nnet.GradBundle, lr: float) -> MlpParams:
        cfg = self.config
        self.t += 1
        lr32 = np.float32(lr)
        wd = np.float32(cfg.weight_decay)
        new_w, new_b = [], []
        if cfg.optimizer == "sgd_momentum":
            mu = np.float32(cfg.momentum)
            for k, w in enumerate(params.weights):
                g = grad.d_weights[k] + wd * w
                self.mom_w[k] = mu * self.mom_w[k] + g
                new_w.append(w - lr32 * self.mom_w[k])
            for k, b in enumerate(params.biases):
                g = grad.d_biases[k] + wd * b
                self.mom_b[k] = mu * self.mom_b[k] + g
                new_b.append(b - lr32 * self.mom_b[k])
        else:  # adam
            b1, b2 = np.float32(cfg.adam_beta1), np.float32(cfg.adam_beta2)
            eps = np.float32(cfg.adam_eps)
            c1 = np.float32(1.0 - cfg.adam_beta1 ** self.t)
            c2 = np.float32(1.0 - cfg.adam_beta2 ** self.t)
            for k, w in enumerate(params.weights):
                g = grad.d_weights[k] + wd * w
                self.mom_w[k] = b1 * self.mom_w[k] + (1 - b1) * g
                self.vel_w[k] = b2 * self.vel_w[k] + (1 - b2) * g * g
                new_w.append(w - lr32 * (self.mom_w[k] / c1)
                             / (np.sqrt(self.vel_w[k] / c2) + eps))
            for k, b in enumerate(params.biases):
                g = grad.d_biases[k] + wd * b
                self.mom_b[k] = b1 * self.mom_b[k] + (1 - b1) * g
                self.vel_b[k] = b2 * self.vel_b[k] + (1 - b2) * g * g
                new_b.append(b - lr32 * (self.mom_b[k] / c1)
                             / (np.sqrt(self.vel_b[k] / c2) + eps))
        return MlpParams(params.spec, tuple(new_w),
                         tuple(new_b) if params.spec.use_bias else ())


def train(data: Dataset | MixedDataset, spec: MlpSpec,
          config: TrainConfig) -> tuple[Checkpoint, list[dict]]:
    """Train from the seeded init; returns the checkpoint and per-epoch history.

    With ``epochs = 0`` the returned parameters equal
    ``init_params(spec, config.seed)`` exactly.
    """
    if isinstance(data, MixedDataset):
        resample_seed = int(np.random.SeedSequence(config.seed).spawn(1)[0]
                            .generate_state(1)[0])
        data = balanced_concat(data, resample_seed)
    _require(data.num_classes == spec.num_classes,
             f"dataset has {data.num_classes} classes, spec expects "
             f"{spec.num_classes}")
    _require(data.dim == spec.input_dim,
             f"dataset dim {data.dim} != spec input dim {spec.input_dim}")

    params = nnet.init_params(spec, config.seed)
    opt = _Optimizer(config, params)
    shuffle_rng = np.random.default_rng(
        np.random.SeedSequence(config.seed).spawn(2)[1])
    n = len(data)
    history: list[dict] = []

    for epoch in range(config.epochs):
        if config.cosine_decay and config.epochs > 1:
            lr = config.learning_rate * 0.5 * (
                1.0 + np.cos(np.pi * epoch / config.epochs))
        else:
            lr = config.learning_rate
        order = shuffle_rng.permutation(n)
        for start in range(0, n, config.batch_size):
            idx = order[start: start + config.batch_size]
            grad = nnet.loss_and_grad(params, data.features[idx], data.labels[idx])
            params = opt.step(params, grad, lr)
        result = _eval_part(params, data.features, data.labels)
        history.append({"epoch": epoch, "lr": lr, "train_loss": result.loss,
                        "train_accuracy": result.accuracy})

    final = history[-1] if history else None
    metadata = {
        "dataset": data.name,
        "config_digest": config_digest(config),
        "epochs": config.epochs,
        "train_loss": final["train_loss"] if final else None,
        "train_accuracy": final["train_accuracy"] if final else None,
    }
    return Checkpoint(spec, params, metadata), history


# ---------------------------------------------------------------------------
# PMCK1 persistence
# ---------------------------------------------------------------------------

def save_checkpoint(ckpt: Checkpoint, path) -> None:
    """Write the PMCK1 binary checkpoint format."""
    path = Path(path)
    spec = ckpt.spec
    meta_blob = json.dumps(ckpt.metadata, sort_keys=True).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(PMCK_MAGIC)
        fh.write(struct.pack("<II", PMCK_VERSION, len(spec.layer_sizes)))
        fh.write(struct.pack(f"<{len(spec.layer_sizes)}I", *spec.layer_sizes))
        fh.write(struct.pack("<B", 1 if spec.use_bias else 0))
        for k in range(spec.num_layers):
            fh.write(ckpt.params.weights[k].astype("<f4").tobytes())
            if spec.use_bias:
                fh.write(ckpt.params.biases[k].astype("<f4").tobytes())
        fh.write(struct.pack("<I", len(meta_blob)))
        fh.write(meta_blob)


def _read_exact(fh, n: int, path) -> bytes:
    buf = fh.read(n)
    if len(buf) != n:
        raise DataIOError(f"{path}: truncated, wanted {n} bytes, got {len(buf)}")
    return buf


def load_checkpoint(path) -> Checkpoint:
    """Read a PMCK1 file back into a checkpoint; round trips are bit-exact."""
    path = Path(path)
    with open(path, "rb") as fh:
        magic = _read_exact(fh, 4, path)
        if magic != PMCK_MAGIC:
            raise FormatError(f"{path}: bad magic {magic!r}")
        version, n_sizes = struct.unpack("<II", _read_exact(fh, 8, path))
        if version != PMCK_VERSION:
            raise FormatError(f"{path}: unsupported version {version}")
        if n_sizes < 2:
            raise FormatError(f"{path}: layer count {n_sizes} too small")
        sizes = struct.unpack(f"<{n_sizes}I", _read_exact(fh, 4 * n_sizes, path))
        (use_bias,) = struct.unpack("<B", _read_exact(fh, 1, path))
        spec = MlpSpec(tuple(int(s) for s in sizes), use_bias=bool(use_bias))
        weights, biases = [], []
        for k in range(spec.num_layers):
            d_in, d_out = spec.layer_sizes[k], spec.layer_sizes[k + 1]
            w = np.frombuffer(_read_exact(fh, 4 * d_out * d_in, path), dtype="<f4")
            weights.append(w.reshape(d_out, d_in))
            if spec.use_bias:
                biases.append(np.frombuffer(_read_exact(fh, 4 * d_out, path),
                                            dtype="<f4"))
        (meta_len,) = struct.unpack("<I", _read_exact(fh, 4, path))
        metadata = json.loads(_read_exact(fh, meta_len, path).decode("utf-8"))
    params = MlpParams(spec, tuple(weights), tuple(biases) if use_bias else ())
    return Checkpoint(spec, params, metadata)
