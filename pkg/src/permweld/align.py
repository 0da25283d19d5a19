"""Merge operators built on neuron permutations.

A hidden layer can be reordered without changing the network function when the
next layer's columns are reordered the same way.  This module exploits that
freedom to line two trained networks up before interpolating their weights:

* ``weight_matching`` (WM): coordinate descent over per-layer linear
  assignment problems that minimizes the flat L2 distance between the models.
  Needs nothing but the weights.
* ``flat_weight_matching`` (FWM): WM with an extra linear term built from the
  loss gradient of model B, weighted by ``1 - beta``; ``beta = 1`` reduces
  exactly to WM.
* ``ste_align`` (STE): gradient-trains a relaxed copy of model B, projecting
  onto the nearest permutation of the original weights every step and passing
  the merged-loss gradient straight through the projection.  Needs data.
* ``fisher_merge``: per-parameter weighted average using two diagonal Fisher
  estimates instead of a single global interpolation factor.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np

from . import nnet
from .assignment import Permutation, solve_lap
from .data import MixedDataset
from .errors import NumericError, ValidationError
from .nnet import GradBundle, MlpParams

def _require(cond: bool, msg: str) -> None:
    if not cond:
        raise ValidationError(msg)


@dataclass(frozen=True)
class PermutationSet:
    """One permutation per hidden layer; input and output layers stay fixed."""

    perms: tuple[Permutation, ...]

    @staticmethod
    def identity(spec: nnet.MlpSpec) -> "PermutationSet":
        return PermutationSet(tuple(Permutation.identity(n) for n in spec.hidden_sizes))

    def key(self) -> tuple[tuple[int, ...], ...]:
        """Hashable canonical form, used to deduplicate populations."""
        return tuple(tuple(p.mapping.tolist()) for p in self.perms)

    def is_identity(self) -> bool:
        return all(p.is_identity() for p in self.perms)

    def __len__(self) -> int:
        return len(self.perms)


@dataclass(frozen=True)
class AlignConfig:
    wm_max_sweeps: int = 100
    fwm_beta: float = 0.01
    ste_learning_rate: float = 0.5
    ste_momentum: float = 0.9
    ste_epochs: int = 10
    ste_batch_size: int = 128
    ste_lambda: float = 0.5
    seed: int = 0

    def __post_init__(self):
        _require(self.wm_max_sweeps >= 1, "wm_max_sweeps must be >= 1")
        _require(0.0 <= self.fwm_beta <= 1.0, "fwm_beta must lie in [0, 1]")
        _require(0.0 <= self.ste_lambda <= 1.0, "ste_lambda must lie in [0, 1]")
        _require(self.ste_learning_rate > 0, "ste_learning_rate must be positive")
        _require(self.ste_epochs >= 0, "ste_epochs must be >= 0")
        _require(self.ste_batch_size >= 1, "ste_batch_size must be >= 1")


def _check_same_spec(a: MlpParams, b: MlpParams) -> None:
    _require(a.spec == b.spec, f"specs differ: {a.spec} vs {b.spec}")


def _check_perm_sizes(params: MlpParams, pi: PermutationSet) -> None:
    hidden = params.spec.hidden_sizes
    _require(len(pi.perms) == len(hidden),
             f"permutation set has {len(pi.perms)} layers, spec has {len(hidden)}")
    for h, (p, n) in enumerate(zip(pi.perms, hidden)):
        _require(len(p) == n, f"hidden layer {h}: permutation size {len(p)} != {n}")


def apply_permutation(params_b: MlpParams, pi: PermutationSet) -> MlpParams:
    """Reorder hidden neurons; the network function is exactly preserved.

    For hidden layer h: rows of W[h] and entries of b[h] move to position i
    from position pi[h][i], and the columns of W[h+1] move the same way.
    """
    _check_perm_sizes(params_b, pi)
    spec = params_b.spec
    n_layers = spec.num_layers
    n_hidden = n_layers - 1
    weights = []
    biases = []
    for k in range(n_layers):
        rows = pi.perms[k].mapping if k < n_hidden else None
        cols = pi.perms[k - 1].mapping if 0 < k else None
        w = params_b.weights[k]
        if rows is not None:
            w = w[rows, :]
        if cols is not None:
            w = w[:, cols]
        weights.append(w)
        if spec.use_bias:
            b = params_b.biases[k]
            biases.append(b[rows] if rows is not None else b)
    return MlpParams(spec, tuple(weights), tuple(biases) if spec.use_bias else ())


def merge_interpolate(params_a: MlpParams, params_b: MlpParams,
                      lam: float) -> MlpParams:
    """Elementwise convex combination (1-lam) * A + lam * B."""
    _check_same_spec(params_a, params_b)
    _require(0.0 <= lam <= 1.0, "lambda must lie in [0, 1]")
    lam = np.float32(lam)
    one = np.float32(1.0) - lam
    weights = tuple(one * wa + lam * wb
                    for wa, wb in zip(params_a.weights, params_b.weights))
    biases = tuple(one * ba + lam * bb
                   for ba, bb in zip(params_a.biases, params_b.biases)) \
        if params_a.spec.use_bias else ()
    return MlpParams(params_a.spec, weights, biases)


def _layer_score(weights_a, biases_a, tensors_b, bias_tensors_b, perms, h):
    """LAP score for hidden layer h against B-side tensors (weights or grads),
    holding every other layer's permutation fixed."""
    n_hidden = len(perms)
    prev = perms[h - 1].mapping if h > 0 else None
    nxt = perms[h + 1].mapping if h + 1 < n_hidden else None

    b_cur = tensors_b[h][:, prev] if prev is not None else tensors_b[h]
    score = weights_a[h].astype(np.float64) @ b_cur.astype(np.float64).T
    b_next = tensors_b[h + 1][nxt, :] if nxt is not None else tensors_b[h + 1]
    score += weights_a[h + 1].astype(np.float64).T @ b_next.astype(np.float64)
    if biases_a:
        score += np.outer(biases_a[h].astype(np.float64),
                          bias_tensors_b[h].astype(np.float64))
    return score


def _matching_sweeps(params_a: MlpParams, params_b: MlpParams,
                     rng: np.random.Generator, max_sweeps: int,
                     weight_coeff: float = 1.0,
                     grad_b: GradBundle | None = None,
                     grad_coeff: float = 0.0,
                     init: PermutationSet | None = None,
                     on_update: Callable | None = None) -> PermutationSet:
    """Coordinate descent over hidden layers, each step an exact LAP."""
    spec = params_a.spec
    n_hidden = spec.num_layers - 1
    if n_hidden == 0:
        return PermutationSet(())
    if init is not None:
        _check_perm_sizes(params_b, init)
        perms = list(init.perms)
    else:
        perms = [Permutation.identity(n) for n in spec.hidden_sizes]

    biases_a = params_a.biases if spec.use_bias else ()
    for sweep in range(max_sweeps):
        changed = False
        for h in rng.permutation(n_hidden):
            score = weight_coeff * _layer_score(
                params_a.weights, biases_a, params_b.weights,
                params_b.biases if spec.use_bias else (), perms, h)
            if grad_b is not None and grad_coeff != 0.0:
                score += grad_coeff * _layer_score(
                    params_a.weights, biases_a, grad_b.d_weights,
                    grad_b.d_biases if spec.use_bias else (), perms, h)
            new_perm, _ = solve_lap(score, sense="maximize")
            if not np.array_equal(new_perm.mapping, perms[h].mapping):
                changed = True
            perms[h] = new_perm
            if on_update is not None:
                on_update(sweep, int(h), PermutationSet(tuple(perms)))
        if not changed:
            break
    return PermutationSet(tuple(perms))


def weight_matching(params_a: MlpParams, params_b: MlpParams,
                    config: AlignConfig = AlignConfig(),
                    init: PermutationSet | None = None,
                    on_update: Callable | None = None) -> PermutationSet:
    """Permutations minimizing || vec(A) - vec(pi(B)) ||^2, weights only.

    Each hidden layer is solved exactly as a linear assignment problem with
    the other layers held fixed; sweeps visit layers in a seeded random order
    and stop once a full sweep changes nothing.  The squared distance never
    increases across accepted updates.
    """
    _check_same_spec(params_a, params_b)
    rng = np.random.default_rng(config.seed)
    return _matching_sweeps(params_a, params_b, rng, config.wm_max_sweeps,
                            init=init, on_update=on_update)


def flat_weight_matching(params_a: MlpParams, params_b: MlpParams,
                         grad_b: GradBundle,
                         config: AlignConfig = AlignConfig(),
                         on_update: Callable | None = None) -> PermutationSet:
    """WM objective blended with a flatness term from model B's gradient.

    Minimizes ``beta * ||vec(A) - vec(pi(B))||^2 +
    (1 - beta) * (vec(A) - vec(pi(B))) . pi(grad_B)`` where ``grad_B`` was
    computed once at B and is permuted rather than recomputed.  With beta = 1
    the result is identical to :func:`weight_matching` for the same seed.
    """
    _check_same_spec(params_a, params_b)
    for k, dw in enumerate(grad_b.d_weights):
        _require(dw.shape == params_b.weights[k].shape,
                 f"grad_b layer {k} shape {dw.shape} != {params_b.weights[k].shape}")
    beta = config.fwm_beta
    rng = np.random.default_rng(config.seed)
    # Dropping permutation-invariant constants, the objective is equivalent to
    # maximizing 2*beta*<A, pi(B)> - (1-beta)*<A, pi(grad_B)>.
    return _matching_sweeps(params_a, params_b, rng, config.wm_max_sweeps,
                            weight_coeff=2.0 * beta, grad_b=grad_b,
                            grad_coeff=-(1.0 - beta), on_update=on_update)


def _mixture_batch_grad(merged: MlpParams, mixed: MixedDataset,
                        idx_a: np.ndarray, idx_b: np.ndarray) -> tuple[float, GradBundle]:
    ga = nnet.loss_and_grad(merged, mixed.part_a.features[idx_a],
                            mixed.part_a.labels[idx_a])
    gb = nnet.loss_and_grad(merged, mixed.part_b.features[idx_b],
                            mixed.part_b.labels[idx_b])
    wa, wb = 1.0 - mixed.alpha, mixed.alpha
    loss = wa * ga.loss + wb * gb.loss
    d_w = tuple(np.float32(wa) * a + np.float32(wb) * b
                for a, b in zip(ga.d_weights, gb.d_weights))
    d_b = tuple(np.float32(wa) * a + np.float32(wb) * b
                for a, b in zip(ga.d_biases, gb.d_biases)) if ga.d_biases else ()
    return loss, GradBundle(d_w, d_b, loss)


def ste_align(params_a: MlpParams, params_b: MlpParams, mixed: MixedDataset,
              config: AlignConfig = AlignConfig(),
              on_epoch: Callable | None = None) -> PermutationSet:
    """Learn permutations that directly lower the mixture loss of the merge.

    A relaxed copy of model B starts at the weight-matching alignment.  Every
    step projects the copy onto the nearest permutation of the original B
    (per-layer LAPs against B, warm-started), evaluates the minibatch mixture
    loss at ``(1-lambda) * A + lambda * proj``, and applies that gradient
    straight through the projection to the relaxed copy with momentum SGD.
    Returns the projection of the final copy.
    """
    _check_same_spec(params_a, params_b)
    _require(mixed.num_classes == params_a.spec.num_classes,
             f"mixture has {mixed.num_classes} classes, model expects "
             f"{params_a.spec.num_classes}")

    seeds = np.random.SeedSequence(config.seed).spawn(3)
    wm_rng = np.random.default_rng(seeds[0])
    proj_rng = np.random.default_rng(seeds[1])
    batch_rng = np.random.default_rng(seeds[2])

    proj = _matching_sweeps(params_a, params_b, wm_rng, config.wm_max_sweeps)
    free = apply_permutation(params_b, proj)
    spec = params_a.spec
    use_bias = spec.use_bias

    free_w = [w.copy() for w in free.weights]
    free_b = [b.copy() for b in free.biases] if use_bias else []
    mom_w = [np.zeros_like(w) for w in free_w]
    mom_b = [np.zeros_like(b) for b in free_b]

    n_a, n_b = len(mixed.part_a), len(mixed.part_b)
    steps = max(1, int(np.ceil(max(n_a, n_b) / config.ste_batch_size)))
    lam = config.ste_lambda
    lr = np.float32(config.ste_learning_rate)
    mu = np.float32(config.ste_momentum)

    for epoch in range(config.ste_epochs):
        order_a = batch_rng.permutation(n_a)
        order_b = batch_rng.permutation(n_b)
        epoch_losses = []
        for step in range(steps):
            take = np.arange(step * config.ste_batch_size,
                             (step + 1) * config.ste_batch_size)
            idx_a = order_a[take % n_a]
            idx_b = order_b[take % n_b]

            free_params = MlpParams(spec, tuple(free_w),
                                    tuple(free_b) if use_bias else ())
            proj = _matching_sweeps(free_params, params_b, proj_rng,
                                    config.wm_max_sweeps, init=proj)
            b_proj = apply_permutation(params_b, proj)
            merged = merge_interpolate(params_a, b_proj, lam)
            loss, grad = _mixture_batch_grad(merged, mixed, idx_a, idx_b)
            if not np.isfinite(loss):
                raise NumericError(
                    f"non-finite mixture loss at epoch {epoch} step {step} "
                    f"(lr={config.ste_learning_rate}, lambda={lam})")
            epoch_losses.append(loss)

            scale = np.float32(lam)
            for k in range(spec.num_layers):
                mom_w[k] = mu * mom_w[k] + scale * grad.d_weights[k]
                free_w[k] = free_w[k] - lr * mom_w[k]
                if use_bias:
                    mom_b[k] = mu * mom_b[k] + scale * grad.d_biases[k]
                    free_b[k] = free_b[k] - lr * mom_b[k]
        if on_epoch is not None:
            on_epoch(epoch, float(np.mean(epoch_losses)),
                     PermutationSet(tuple(proj.perms)))

    free_params = MlpParams(spec, tuple(free_w), tuple(free_b) if use_bias else ())
    return _matching_sweeps(free_params, params_b, proj_rng,
                            config.wm_max_sweeps, init=proj)


def fisher_merge(params_a: MlpParams, params_b_permuted: MlpParams,
                 fisher_a, fisher_b, damping: float = 1e-8) -> MlpParams:
    """Per-parameter average weighted by two diagonal Fisher estimates.

    ``w_i = (Fa_i * a_i + Fb_i * b_i) / (Fa_i + Fb_i + damping)``; equal
    Fisher vectors therefore reproduce the plain midpoint up to damping error.
    Entries where both Fisher values and the damping vanish fall back to the
    midpoint.
    """
    _check_same_spec(params_a, params_b_permuted)
    _require(damping >= 0.0, "damping must be >= 0")
    fa = np.asarray(getattr(fisher_a, "values", fisher_a), dtype=np.float64)
    fb = np.asarray(getattr(fisher_b, "values", fisher_b), dtype=np.float64)
    size = params_a.spec.flat_size
    _require(fa.shape == (size,), f"fisher_a length {fa.shape} != flat size {size}")
    _require(fb.shape == (size,), f"fisher_b length {fb.shape} != flat size {size}")
    _require(bool((fa >= 0).all() and (fb >= 0).all()),
             "Fisher diagonals must be nonnegative")
    a = nnet.flatten(params_a).astype(np.float64)
    b = nnet.flatten(params_b_permuted).astype(np.float64)
    denom = fa + fb + damping
    merged = np.where(denom > 0.0, (fa * a + fb * b) / np.where(denom > 0, denom, 1.0),
                      0.5 * (a + b))
    return nnet.unflatten(params_a.spec, merged.astype(np.float32))
