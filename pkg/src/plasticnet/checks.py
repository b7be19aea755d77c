"""Finite-difference gradient-check suite for the engine and every cell variant."""

from __future__ import annotations

from typing import Callable

import numpy as np

from . import autograd as ag
from .autograd import Tensor
from .cells import (CellConfig, init_params, lstm_config, lstm_zero_state,
                    plastic_lstm_step, plastic_rnn_step, zero_state)

TOLERANCE = 1e-5
EPS = 1e-6


def _projection(rng, shape):
    """Random weights with magnitude in [0.5, 1.5] and random sign.

    Bounding the magnitude away from zero keeps every gradient entry well
    above finite-difference round-off.
    """
    return rng.uniform(0.5, 1.5, shape) * rng.choice([-1.0, 1.0], shape)


def _leaf(rng, *shape, scale=1.0, name=None):
    return Tensor(rng.uniform(-scale, scale, size=shape), requires_grad=True, name=name)


def randomize_plastic(params: dict, rng: np.random.Generator) -> None:
    """Move plasticity parameters off their tiny initial values.

    With alpha = eta = 0.01 most plastic gradients sit near round-off level,
    which makes a relative-error check meaningless.
    """
    for name, p in params.items():
        base = name.rsplit(".", 1)[-1]
        if base == "alpha":
            p.data = rng.uniform(-0.8, 0.8, p.shape)
        elif base == "eta":
            p.data = rng.uniform(0.2, 0.6, p.shape)
        elif base in ("b_mod", "mod_fanout"):
            p.data = rng.uniform(0.3, 0.9, p.shape)


def rnn_unroll_check(variant: str, n_hidden: int = 6, steps: int = 5, batch: int = 2, seed: int = 0,
                     alpha: str = "per-connection", eta: str = "global") -> float:
    rng = np.random.default_rng(seed)
    cfg = CellConfig(4, n_hidden, 3, variant, "rnn", alpha, eta)
    params = init_params(cfg, rng)
    randomize_plastic(params, rng)
    inputs = rng.normal(size=(steps, batch, 4))
    weights = _projection(rng, (steps, batch, 2))

    # start mid-episode (nonzero hidden and traces) so the plastic path is active from step one
    h0 = Tensor(rng.uniform(-0.5, 0.5, (batch, n_hidden)))
    start = zero_state(cfg, batch)
    start = type(start)(*(None if t is None else Tensor(rng.uniform(-0.5, 0.5, t.shape)) for t in start))

    def f():
        h, state = h0, start
        total = 0.0
        for t in range(steps):
            out, state = plastic_rnn_step(h, inputs[t], params, state, variant, n_actions=2)
            h = out.hidden
            total = total + (ag.log_softmax(out.logits) * weights[t]).sum() + out.value.sum()
            if out.modulator is not None:
                total = total + out.modulator.sum()
        return total

    return ag.grad_check(f, list(params.values()), EPS)


def lstm_unroll_check(variant: str, n_hidden: int = 5, steps: int = 5, batch: int = 2, seed: int = 0,
                      alpha: str = "per-connection", eta: str = "per-connection",
                      fanout: str = "per-connection") -> float:
    rng = np.random.default_rng(seed)
    cfg = lstm_config(3, n_hidden, variant, alpha, eta, fanout)
    params = init_params(cfg, rng, init_scale=0.5)
    randomize_plastic(params, rng)
    inputs = rng.normal(size=(steps, batch, 3)) * 0.5
    weights = _projection(rng, (steps, batch, n_hidden))
    readout = _projection(rng, (batch, n_hidden, n_hidden))
    # start mid-episode so that every plastic path carries signal from the first step
    start = lstm_zero_state(cfg, batch)
    start = start._replace(**{k: Tensor(rng.uniform(-0.5, 0.5, getattr(start, k).shape))
                              for k in start._fields if getattr(start, k) is not None})

    def f():
        state = start
        total = 0.0
        for t in range(steps):
            state = plastic_lstm_step(inputs[t], state, params, variant)
            total = total + (state.h * weights[t]).sum() + (state.c * state.c).sum() * 0.1
        # direct readout of the final trace keeps per-connection gradients well above round-off
        for trace in (state.hebb, state.elig):
            if trace is not None:
                total = total + (trace * readout).sum()
        return total

    return ag.grad_check(f, list(params.values()), EPS)


def _op_checks(rng: np.random.Generator) -> dict[str, Callable[[], float]]:
    def check(build, *shapes, **kw):
        leaves = [_leaf(rng, *s, **kw) for s in shapes]
        w = None

        def f():
            nonlocal w
            out = build(*leaves)
            if w is None:
                w = _projection(rng, out.shape)
            return (out * w).sum()

        return lambda: ag.grad_check(f, leaves, EPS)

    def positive(build):
        def wrapped(a):
            return build(ag.exp(a))
        return wrapped

    return {
        "matmul": check(ag.matmul, (4, 3), (3, 2)),
        "tanh": check(ag.tanh, (3, 4)),
        "sigmoid": check(ag.sigmoid, (3, 4), scale=3.0),
        "exp": check(ag.exp, (5,)),
        "log": check(positive(ag.log), (5,)),
        "hard_clip": check(lambda a: ag.hard_clip(a), (6,), scale=0.9),
        "softmax": check(ag.softmax, (2, 5), scale=2.0),
        "log_softmax": check(ag.log_softmax, (2, 5), scale=2.0),
        "vecmat": check(ag.vecmat, (2, 3), (2, 3, 4)),
        "outer": check(ag.outer, (2, 3), (2, 4)),
        "plastic_vecmat": check(ag.plastic_vecmat, (2, 3), (3, 4), (2, 3, 4)),
        "plastic_vecmat_per_neuron": check(ag.plastic_vecmat, (2, 3), (4,), (2, 3, 4)),
        "hebbian_update_row_rate": check(lambda h, r, x, y: ag.hebbian_update(h * 0.3, r, x, y),
                                         (2, 3, 4), (2, 1, 1), (2, 3), (2, 4), scale=0.5),
        "hebbian_update_matrix_rate": check(lambda h, r, x, y: ag.hebbian_update(h * 0.3, r, x, y),
                                            (2, 3, 4), (3, 4), (2, 3), (2, 4), scale=0.5),
        "div": check(lambda a, b: a / (ag.exp(b) + 1.0), (3,), (3,)),
        "concat_getitem_pick": check(lambda a, b: ag.pick(ag.concat([a, b], axis=0)[1:], [0, 2, 1]),
                                     (2, 3), (2, 3)),
    }


def cell_checks() -> dict[str, Callable[[], float]]:
    checks = {}
    for v in ("none", "plain", "simple-mod", "retro-mod"):
        checks[f"rnn/{v}"] = lambda v=v: rnn_unroll_check(v)
        checks[f"lstm/{v}"] = lambda v=v: lstm_unroll_check(v)
    checks["rnn/plain/per-neuron-alpha/per-connection-eta"] = lambda: rnn_unroll_check(
        "plain", alpha="per-neuron", eta="per-connection")
    checks["lstm/simple-mod/per-neuron-fanout"] = lambda: lstm_unroll_check(
        "simple-mod", alpha="per-neuron", fanout="per-neuron")
    checks["lstm/retro-mod/global-eta/scalar-fanout"] = lambda: lstm_unroll_check(
        "retro-mod", eta="global", fanout="scalar")
    return checks


def run_suite(seed: int = 0) -> list[tuple[str, float, bool]]:
    """``(name, max_relative_error, passed)`` for every check."""
    rng = np.random.default_rng(seed)
    checks = {f"op/{k}": v for k, v in _op_checks(rng).items()}
    checks.update(cell_checks())
    results = []
    for name, fn in checks.items():
        err = fn()
        results.append((name, err, bool(err <= TOLERANCE)))
    return results
