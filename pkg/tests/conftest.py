import numpy as np
import pytest

from permweld.nnet import MlpSpec, init_params


def random_params(spec: MlpSpec, seed: int, scale: float = 1.0):
    """Dense random params (biases too), handy when zero-bias init is too tame."""
    rng = np.random.default_rng(seed)
    weights = tuple(
        (scale * rng.standard_normal((spec.layer_sizes[k + 1], spec.layer_sizes[k])))
        .astype(np.float32)
        for k in range(spec.num_layers)
    )
    biases = tuple(
        (scale * rng.standard_normal(spec.layer_sizes[k + 1])).astype(np.float32)
        for k in range(spec.num_layers)
    ) if spec.use_bias else ()
    from permweld.nnet import MlpParams

    return MlpParams(spec, weights, biases)


def random_batch(spec: MlpSpec, n: int, seed: int):
    rng = np.random.default_rng(seed)
    x = rng.uniform(0.0, 1.0, size=(n, spec.input_dim)).astype(np.float32)
    y = rng.integers(0, spec.num_classes, size=n)
    return x, y


def draw_smooth_case(rng, max_width=8, margin=0.02, batch_max=7):
    """Random (spec, params, batch) whose hidden pre-activations stay away
    from the ReLU kink, so central finite differences are trustworthy."""
    from permweld.nnet import MlpParams

    while True:
        depth = rng.integers(1, 4)
        sizes = tuple(int(s) for s in rng.integers(1, max_width + 1, size=depth + 1))
        spec = MlpSpec(sizes, use_bias=bool(rng.integers(0, 2)))
        params = random_params(spec, int(rng.integers(0, 2**31)))
        x, y = random_batch(spec, int(rng.integers(1, batch_max)),
                            int(rng.integers(0, 2**31)))
        a = x.astype(np.float64)
        ok = True
        for k in range(spec.num_layers - 1):
            z = a @ params.weights[k].astype(np.float64).T
            if spec.use_bias:
                z = z + params.biases[k].astype(np.float64)
            if np.abs(z).min() < margin:
                ok = False
                break
            a = np.maximum(z, 0.0)
        if ok:
            return spec, params, x, y


@pytest.fixture
def small_spec():
    return MlpSpec((4, 3, 2))


@pytest.fixture
def small_params(small_spec):
    return init_params(small_spec, seed=7)
