"""Fully connected ReLU classifier core.

Parameters live in plain numpy arrays (float32 storage), the forward pass and
all gradients are written out analytically, and every operation is
deterministic for identical inputs.  Besides first-order gradients for
training, the module exposes the input-gradient of a gradient-distance
objective (double backprop), which is what gradient-matching condensation
optimizes.  ReLU has zero second derivative almost everywhere, so the double
backprop expressions stay closed-form; the subgradient at exactly 0 is 0.

Weight layout for layer ``k`` (0-based): ``W[k]`` has shape
``(layer_sizes[k+1], layer_sizes[k])`` and acts on row vectors as
``z = x @ W.T + b``.  The canonical flat order is layer 0..L-1, within a
layer ``W`` row-major followed by ``b`` (if biases are enabled).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import NumericError, ValidationError

Array = np.ndarray

_ACTIVATIONS = ("relu",)


def _require(cond: bool, msg: str) -> None:
    if not cond:
        raise ValidationError(msg)


@dataclass(frozen=True)
class MlpSpec:
    """Architecture description: layer sizes, activation, bias switch.

    ``layer_sizes`` runs input dim, hidden dims, class count.  The last entry
    must equal the class count of any dataset the model is evaluated on.
    """

    layer_sizes: tuple[int, ...]
    activation: str = "relu"
    use_bias: bool = True

    def __post_init__(self):
        sizes = tuple(int(s) for s in self.layer_sizes)
        object.__setattr__(self, "layer_sizes", sizes)
        _require(len(sizes) >= 2, "layer_sizes needs at least input and output dims")
        _require(all(s >= 1 for s in sizes), "all layer sizes must be >= 1")
        _require(self.activation in _ACTIVATIONS,
                 f"unsupported activation {self.activation!r}")

    @property
    def num_layers(self) -> int:
        return len(self.layer_sizes) - 1

    @property
    def input_dim(self) -> int:
        return self.layer_sizes[0]

    @property
    def num_classes(self) -> int:
        return self.layer_sizes[-1]

    @property
    def hidden_sizes(self) -> tuple[int, ...]:
        return self.layer_sizes[1:-1]

    @property
    def flat_size(self) -> int:
        """Length of the canonical flat weight vector."""
        total = 0
        for k in range(self.num_layers):
            d_in, d_out = self.layer_sizes[k], self.layer_sizes[k + 1]
            total += d_out * d_in + (d_out if self.use_bias else 0)
        return total


def _freeze(a: Array) -> Array:
    a = np.ascontiguousarray(a)
    if a.flags.writeable:
        a = a.copy()  # never flip writeability on a caller-owned array
        a.flags.writeable = False
    return a


@dataclass(frozen=True)
class MlpParams:
    """Immutable weights of one network; shapes chain exactly per its spec."""

    spec: MlpSpec
    weights: tuple[Array, ...]
    biases: tuple[Array, ...]  # empty when spec.use_bias is False

    def __post_init__(self):
        spec = self.spec
        _require(len(self.weights) == spec.num_layers, "wrong number of weight matrices")
        ws = tuple(_freeze(np.asarray(w, dtype=np.float32)) for w in self.weights)
        for k, w in enumerate(ws):
            want = (spec.layer_sizes[k + 1], spec.layer_sizes[k])
            _require(w.shape == want, f"layer {k}: weight shape {w.shape} != {want}")
            _require(bool(np.isfinite(w).all()), f"layer {k}: non-finite weight entries")
        if spec.use_bias:
            _require(len(self.biases) == spec.num_layers, "wrong number of bias vectors")
            bs = tuple(_freeze(np.asarray(b, dtype=np.float32)) for b in self.biases)
            for k, b in enumerate(bs):
                _require(b.shape == (spec.layer_sizes[k + 1],),
                         f"layer {k}: bias shape {b.shape} != ({spec.layer_sizes[k + 1]},)")
                _require(bool(np.isfinite(b).all()), f"layer {k}: non-finite bias entries")
        else:
            _require(len(self.biases) == 0, "biases given but spec.use_bias is False")
            bs = ()
        object.__setattr__(self, "weights", ws)
        object.__setattr__(self, "biases", bs)

    def bias(self, k: int) -> Array | None:
        return self.biases[k] if self.spec.use_bias else None


@dataclass(frozen=True)
class GradBundle:
    """Per-layer loss gradients (same shapes as the parameters) plus the loss."""

    d_weights: tuple[Array, ...]
    d_biases: tuple[Array, ...]
    loss: float


def init_params(spec: MlpSpec, seed: int) -> MlpParams:
    """Deterministic init: W ~ U(-1/sqrt(fan_in), 1/sqrt(fan_in)), biases zero."""
    rng = np.random.default_rng(seed)
    weights = []
    biases = []
    for k in range(spec.num_layers):
        d_in, d_out = spec.layer_sizes[k], spec.layer_sizes[k + 1]
        bound = 1.0 / np.sqrt(d_in)
        weights.append(rng.uniform(-bound, bound, size=(d_out, d_in)).astype(np.float32))
        if spec.use_bias:
            biases.append(np.zeros(d_out, dtype=np.float32))
    return MlpParams(spec, tuple(weights), tuple(biases))


def _check_batch(params: MlpParams, batch: Array) -> Array:
    batch = np.asarray(batch)
    _require(batch.ndim == 2, f"batch must be 2-D, got shape {batch.shape}")
    _require(batch.shape[1] == params.spec.input_dim,
             f"batch width {batch.shape[1]} != input dim {params.spec.input_dim}")
    _require(bool(np.isfinite(batch).all()), "batch contains non-finite values")
    return batch


def _check_labels(params: MlpParams, batch: Array, labels: Array) -> Array:
    labels = np.asarray(labels)
    _require(labels.ndim == 1 and labels.shape[0] == batch.shape[0],
             "labels must be 1-D and match the batch length")
    c = params.spec.num_classes
    _require(bool((labels >= 0).all() and (labels < c).all()),
             f"labels must lie in [0, {c})")
    return labels.astype(np.int64)


def _forward_cache(params: MlpParams, x: Array, dtype) -> tuple[list[Array], list[Array], Array]:
    """Forward pass keeping activations and ReLU masks for backprop."""
    acts = [x.astype(dtype, copy=False)]
    masks: list[Array] = []
    n_layers = params.spec.num_layers
    z = None
    for k in range(n_layers):
        w = params.weights[k].astype(dtype, copy=False)
        z = acts[k] @ w.T
        if params.spec.use_bias:
            z = z + params.biases[k].astype(dtype, copy=False)
        if k < n_layers - 1:
            mask = z > 0
            masks.append(mask)
            acts.append(np.where(mask, z, 0))
    return acts, masks, z  # z holds the logits


def forward(params: MlpParams, batch: Array, dtype=np.float32) -> Array:
    """Logits of the network on a batch of row vectors."""
    batch = _check_batch(params, batch)
    _, _, logits = _forward_cache(params, batch, dtype)
    return logits


def _softmax(logits: Array) -> Array:
    shifted = logits - logits.max(axis=1, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=1, keepdims=True)


def cross_entropy(logits: Array, labels: Array) -> float:
    """Mean softmax cross-entropy, accumulated in float64."""
    labels = np.asarray(labels)
    m = logits.max(axis=1, keepdims=True)
    shifted = logits - m
    lse = np.log(np.exp(shifted).sum(axis=1))
    per_sample = lse - shifted[np.arange(len(labels)), labels]
    return float(np.mean(per_sample.astype(np.float64)))


def loss_and_grad(params: MlpParams, batch: Array, labels: Array,
                  dtype=np.float32) -> GradBundle:
    """Mean cross-entropy over the batch and its exact analytic gradient.

    ``dtype`` selects the compute precision; tests use the float64 path as a
    shadow for finite-difference checks.
    """
    batch = _check_batch(params, batch)
    labels = _check_labels(params, batch, labels)
    acts, masks, logits = _forward_cache(params, batch, dtype)
    n = batch.shape[0]
    n_layers = params.spec.num_layers

    loss = cross_entropy(logits, labels)
    if not np.isfinite(loss):
        raise NumericError("non-finite loss")

    p = _softmax(logits)
    delta = p.copy()
    delta[np.arange(n), labels] -= 1.0
    delta /= n

    d_weights: list[Array] = [None] * n_layers  # type: ignore[list-item]
    d_biases: list[Array] = [None] * n_layers if params.spec.use_bias else []  # type: ignore[list-item]
    for k in range(n_layers - 1, -1, -1):
        d_weights[k] = delta.T @ acts[k]
        if params.spec.use_bias:
            d_biases[k] = delta.sum(axis=0)
        if k > 0:
            w = params.weights[k].astype(dtype, copy=False)
            delta = (delta @ w) * masks[k - 1]

    return GradBundle(tuple(d_weights), tuple(d_biases), loss)


def _cosine_cograds(syn: list[Array], real: list[Array]) -> list[Array]:
    """d/d(syn) of sum over layers of (1 - cos(syn_layer, real_layer)).

    Each entry is the concatenated per-layer gradient vector.  Zero-norm
    layers contribute a constant 1 to the distance, hence zero gradient.
    """
    out = []
    for u, r in zip(syn, real):
        nu = float(np.linalg.norm(u))
        nr = float(np.linalg.norm(r))
        if nu == 0.0 or nr == 0.0:
            out.append(np.zeros_like(u))
            continue
        dot = float(u @ r)
        out.append(dot * u / (nu ** 3 * nr) - r / (nu * nr))
    return out


def grad_of_grad_distance(params: MlpParams, batch: Array, labels: Array,
                          real_grad: GradBundle, distance: str = "layerwise_cosine",
                          dtype=np.float32) -> Array:
    """Gradient of D(grad_w L(batch), real_grad) w.r.t. the batch features.

    ``D`` is the layerwise cosine distance (weight and bias of a layer taken
    as one vector).  The derivative is exact double backprop with the ReLU
    masks held fixed, so it is valid almost everywhere and uses the
    subgradient 0 on kinks.
    """
    _require(distance == "layerwise_cosine",
             f"unsupported distance {distance!r}")
    batch = _check_batch(params, batch)
    labels = _check_labels(params, batch, labels)
    n = batch.shape[0]
    n_layers = params.spec.num_layers
    use_bias = params.spec.use_bias

    acts, masks, logits = _forward_cache(params, batch, dtype)
    p = _softmax(logits)
    deltas: list[Array] = [None] * n_layers  # type: ignore[list-item]
    d = p.copy()
    d[np.arange(n), labels] -= 1.0
    d /= n
    deltas[n_layers - 1] = d
    for k in range(n_layers - 1, 0, -1):
        w = params.weights[k].astype(dtype, copy=False)
        deltas[k - 1] = (deltas[k] @ w) * masks[k - 1]

    # Layer gradient vectors on the synthetic batch and the real reference.
    syn_vecs = []
    real_vecs = []
    for k in range(n_layers):
        dw = deltas[k].T @ acts[k]
        if use_bias:
            syn_vecs.append(np.concatenate([dw.ravel(), deltas[k].sum(axis=0)]))
            real_vecs.append(np.concatenate([
                real_grad.d_weights[k].ravel(), real_grad.d_biases[k].ravel()
            ]).astype(dtype))
        else:
            syn_vecs.append(dw.ravel())
            real_vecs.append(real_grad.d_weights[k].ravel().astype(dtype))
        _require(real_vecs[-1].shape == syn_vecs[-1].shape,
                 f"layer {k}: real_grad shape mismatch")

    co = _cosine_cograds(syn_vecs, real_vecs)
    vs_w: list[Array] = []
    vs_b: list[Array] = []
    for k in range(n_layers):
        d_out, d_in = params.weights[k].shape
        vs_w.append(co[k][: d_out * d_in].reshape(d_out, d_in))
        vs_b.append(co[k][d_out * d_in:] if use_bias else np.zeros(d_out, dtype=dtype))

    # Adjoints of the backprop deltas (forward sweep over layers).
    dbars: list[Array] = [None] * n_layers  # type: ignore[list-item]
    dbars[0] = acts[0] @ vs_w[0].T + vs_b[0]
    for k in range(1, n_layers):
        w = params.weights[k].astype(dtype, copy=False)
        dbars[k] = acts[k] @ vs_w[k].T + vs_b[k] + (dbars[k - 1] * masks[k - 1]) @ w.T

    # Through the softmax: delta_L = (softmax(z) - onehot) / n.
    pbar = dbars[n_layers - 1] / n
    zbar = p * pbar - (p * pbar).sum(axis=1, keepdims=True) * p

    # Reverse sweep back to the input features.
    for k in range(n_layers - 1, 0, -1):
        w = params.weights[k].astype(dtype, copy=False)
        abar = zbar @ w + deltas[k] @ vs_w[k]
        zbar = abar * masks[k - 1]
    w0 = params.weights[0].astype(dtype, copy=False)
    return zbar @ w0 + deltas[0] @ vs_w[0]


def flatten(params: MlpParams) -> Array:
    """Canonical flat view: layer order, W row-major then b per layer."""
    parts = []
    for k in range(params.spec.num_layers):
        parts.append(params.weights[k].ravel())
        if params.spec.use_bias:
            parts.append(params.biases[k])
    return np.concatenate(parts)


def unflatten(spec: MlpSpec, flat: Array) -> MlpParams:
    """Inverse of :func:`flatten`; validates the total length."""
    flat = np.asarray(flat, dtype=np.float32).ravel()
    _require(flat.shape[0] == spec.flat_size,
             f"flat length {flat.shape[0]} != expected {spec.flat_size}")
    weights = []
    biases = []
    pos = 0
    for k in range(spec.num_layers):
        d_in, d_out = spec.layer_sizes[k], spec.layer_sizes[k + 1]
        weights.append(flat[pos: pos + d_out * d_in].reshape(d_out, d_in).copy())
        pos += d_out * d_in
        if spec.use_bias:
            biases.append(flat[pos: pos + d_out].copy())
            pos += d_out
    return MlpParams(spec, tuple(weights), tuple(biases))


def predict_accuracy(params: MlpParams, dataset) -> float:
    """Argmax accuracy on a dataset; ties break toward the lowest class index."""
    _require(len(dataset.labels) >= 1, "empty dataset")
    _require(dataset.num_classes == params.spec.num_classes,
             f"dataset has {dataset.num_classes} classes, model expects "
             f"{params.spec.num_classes}")
    logits = forward(params, dataset.features)
    pred = np.argmax(logits, axis=1)
    return float(np.mean(pred == np.asarray(dataset.labels)))
