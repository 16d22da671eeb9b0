"""The finite-difference gradient suite: every primitive plus one full episode loss."""

from __future__ import annotations

from typing import Dict, Iterator, List, Tuple

import numpy as np

from . import tensor as T
from .config import ModelConfig, preset
from .gradcheck import finite_diff_check
from .graph import forward_episode, init_model
from .seeding import CHECK, derive_rng
from .tensor import Tensor


def _param(rng, *shape) -> Tensor:
    return Tensor(rng.normal(size=shape), requires_grad=True)


def primitive_cases(rng: np.random.Generator) -> Iterator[Tuple[str, object, List[Tensor]]]:
    """(name, scalar loss closure, inputs) for each differentiable primitive.

    Each output is contracted with a fixed random tensor so every output
    coordinate contributes to the loss with a distinct weight.
    """

    def proj(t):
        return rng.normal(size=t.shape)

    x, k = _param(rng, 2, 5, 4, 3), _param(rng, 3, 3, 3, 2)
    pc = proj(T.conv2d(x, k, stride=2, pad=1))
    yield "conv2d", lambda: (T.conv2d(x, k, stride=2, pad=1) * pc).sum(), [x, k]

    xl, w, b = _param(rng, 3, 4), _param(rng, 4, 5), _param(rng, 5)
    pl = rng.normal(size=(3, 5))
    yield "linear", lambda: (T.linear(xl, w, b) * pl).sum(), [xl, w, b]

    a, bm = _param(rng, 4, 3), _param(rng, 3, 6)
    pm = rng.normal(size=(4, 6))
    yield "matmul", lambda: (T.matmul(a, bm) * pm).sum(), [a, bm]

    m = _param(rng, 2, 6, 6, 4)
    pg = rng.normal(size=(2, 4))
    yield "global_avg_pool", lambda: (T.global_avg_pool(m) * pg).sum(), [m]

    # keep elementwise inputs away from the relu/abs kink at 0
    z = Tensor(rng.choice([-1.0, 1.0], 6) * rng.uniform(0.1, 2.0, 6), requires_grad=True)
    pz = rng.normal(size=6)
    yield "relu", lambda: (T.relu(z) * pz).sum(), [z]
    yield "sigmoid", lambda: (T.sigmoid(z) * pz).sum(), [z]
    yield "abs", lambda: (T.tabs(z) * pz).sum(), [z]

    u, v = _param(rng, 3, 4), _param(rng, 3, 4)
    pu, pcat = rng.normal(size=(3, 4)), rng.normal(size=(3, 8))
    yield "add", lambda: (T.add(u, v) * pu).sum(), [u, v]
    yield "sub", lambda: (T.sub(u, v) * pu).sum(), [u, v]
    yield "mul", lambda: (T.mul(u, v) * pu).sum(), [u, v]
    yield "div", lambda: (T.div(u, T.add(T.mul(v, v), 1.0)) * pu).sum(), [u, v]
    yield "square", lambda: (T.square(u) * pu).sum(), [u]
    yield "concat", lambda: (T.concat([u, v], axis=-1) * pcat).sum(), [u, v]
    yield "sum", lambda: (T.tsum(u, axis=0) * pu[0]).sum(), [u]
    yield "mean", lambda: (T.mean(u, axis=1) * pu[:, 0]).sum(), [u]
    yield "reshape", lambda: (T.reshape(u, (4, 3)) * pu.T).sum(), [u]
    yield "transpose", lambda: (T.transpose(u) * pu.T).sum(), [u]
    yield "index", lambda: (u[1] * pu[0]).sum(), [u]
    yield "stack", lambda: (T.stack([u, v], axis=0) * pcat.reshape(2, 3, 4)).sum(), [u, v]

    xb, beta = _param(rng, 2, 4, 4, 3), _param(rng, 3)
    gamma = Tensor(rng.uniform(0.5, 1.5, 3), requires_grad=True)
    pb = proj(xb)
    yield "batch_norm_train", lambda: (T.batch_norm(xb, gamma, beta, (0, 1, 2), training=True) * pb).sum(), [xb, gamma, beta]
    rm, rv = rng.normal(size=3), rng.uniform(0.5, 2.0, 3)
    yield ("batch_norm_eval",
           lambda: (T.batch_norm(xb, gamma, beta, (0, 1, 2), rm.copy(), rv.copy(), training=False) * pb).sum(),
           [xb, gamma, beta])

    lg = _param(rng, 5)
    yield "softmax_cross_entropy", lambda: T.softmax_cross_entropy(lg, 3), [lg]


def random_episode(config: ModelConfig, rng: np.random.Generator):
    """A synthetic episode of uniform-noise images sized for ``config``."""
    from .harness import Episode

    g, s = config.graph, config.embedding.input_size
    nk = g.n_way * g.k_shot
    return Episode(
        support_images=rng.random((nk, s, s)),
        support_labels=np.repeat(np.arange(g.n_way), g.k_shot),
        support_angles=rng.integers(0, 2, nk),
        support_indices=np.arange(nk),
        query_image=rng.random((s, s)),
        query_label=int(rng.integers(g.n_way)),
        query_angle=int(rng.integers(0, 2)),
        query_index=nk,
        classes=np.arange(g.n_way),
    )


def model_gradient_error(config: ModelConfig, seed: int = 0, max_coords: int = 4, h: float = 1e-4) -> Tuple[float, int]:
    """Max relative error of the full episode loss over ``max_coords`` sampled
    coordinates of every parameter tensor; returns (error, coordinates checked).

    The base step is 1e-4 rather than 1e-5: the loss passes through a few
    hundred thousand flops, so its roundoff (~1e-14) divided by a 1e-5 step
    is already 1e-9, the same size as the tolerance on gradients that are
    exactly zero (biases feeding batch norm).
    """
    store = init_model(config, seed=seed)
    rng = derive_rng(seed, CHECK, 1)
    episode = random_episode(config, rng)
    res = finite_diff_check(lambda: forward_episode(episode, store, config, training=True).loss,
                            store.params, h=h, max_coords=max_coords, rng=rng)
    return res.max_rel_error, res.checked


def run_gradient_suite(preset_name: str = "desk", seed: int = 0, max_coords: int = 4) -> Dict[str, float]:
    """Relative error per primitive and for the full model (key ``model``)."""
    rng = derive_rng(seed, CHECK, 0)
    out = {}
    for name, f, params in primitive_cases(rng):
        out[name] = finite_diff_check(f, params).max_rel_error
    out["model"], _ = model_gradient_error(preset(preset_name), seed, max_coords)
    return out
