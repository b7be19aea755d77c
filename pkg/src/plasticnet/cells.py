"""Plastic and neuromodulated recurrent cells (RNN and LSTM).

Connections are stored as ``[pre, post]`` matrices so a batch of activity
rows ``x[b, pre]`` maps through ``x @ w``.  Hebbian and eligibility traces
carry a leading batch axis: ``hebb[b, pre, post]``.

Variants:

``none``
    ordinary recurrent cell, no trace.
``plain``
    ``hebb <- clip(hebb + eta * pre*post)``.
``simple-mod``
    ``eta`` replaced by the network's own modulator output ``m(t)``.
``retro-mod``
    ``hebb <- clip(hebb + m(t) * elig)`` and
    ``elig <- (1 - eta) * elig + eta * pre*post``.
"""

from __future__ import annotations

from dataclasses import dataclass, replace
from typing import NamedTuple

import numpy as np

from . import autograd as ag
from .autograd import ContractError, Tensor

VARIANTS = ("none", "plain", "simple-mod", "retro-mod")
_ALIASES = {"nonplastic": "none", "non-plastic": "none", "plastic": "plain"}

ALPHA_GRANULARITY = ("per-connection", "per-neuron")
ETA_GRANULARITY = ("global", "per-connection")
FANOUT_GRANULARITY = ("scalar", "per-neuron", "per-connection")


def canonical_variant(name: str) -> str:
    v = _ALIASES.get(name, name)
    if v not in VARIANTS:
        raise ValueError(f"unknown variant {name!r}; expected one of "
                         f"{VARIANTS + tuple(_ALIASES)}")
    return v


def is_plastic(variant: str) -> bool:
    return canonical_variant(variant) != "none"


def is_modulated(variant: str) -> bool:
    return canonical_variant(variant) in ("simple-mod", "retro-mod")


def uses_eta(variant: str) -> bool:
    return canonical_variant(variant) in ("plain", "retro-mod")


@dataclass(frozen=True)
class CellConfig:
    """Sizes and plasticity options for one recurrent model.

    ``n_out`` counts the task outputs read from the hidden layer (for the RL
    agents: actions plus the value output).  The modulator head, when the
    variant has one, is counted separately.  ``fanout`` selects how the
    scalar modulator reaches the connections: used as is, through one weight
    per post-synaptic neuron, or through one weight per connection.
    """

    n_in: int
    n_hidden: int
    n_out: int
    variant: str = "none"
    cell: str = "rnn"
    alpha: str = "per-connection"
    eta: str = "global"
    fanout: str = "scalar"

    def __post_init__(self):
        object.__setattr__(self, "variant", canonical_variant(self.variant))
        if self.cell not in ("rnn", "lstm"):
            raise ValueError(f"cell must be 'rnn' or 'lstm', got {self.cell!r}")
        for value, allowed, label in ((self.alpha, ALPHA_GRANULARITY, "alpha"),
                                      (self.eta, ETA_GRANULARITY, "eta"),
                                      (self.fanout, FANOUT_GRANULARITY, "fanout")):
            if value not in allowed:
                raise ValueError(f"{label} granularity {value!r} not in {allowed}")
        if min(self.n_in, self.n_hidden) < 1 or self.n_out < 0:
            raise ValueError("sizes must be positive")


# -- parameter layout ---------------------------------------------------------------

def _plastic_shapes(cfg: CellConfig) -> dict[str, tuple]:
    n = cfg.n_hidden
    shapes: dict[str, tuple] = {}
    if cfg.variant == "none":
        return shapes
    shapes["alpha"] = (n, n) if cfg.alpha == "per-connection" else (n,)
    if uses_eta(cfg.variant):
        shapes["eta"] = (n, n) if cfg.eta == "per-connection" else (1,)
    if is_modulated(cfg.variant):
        shapes["w_mod"] = (n, 1)
        shapes["b_mod"] = (1,)
        if cfg.fanout == "per-neuron":
            shapes["mod_fanout"] = (n,)
        elif cfg.fanout == "per-connection":
            shapes["mod_fanout"] = (n, n)
    return shapes


def param_shapes(cfg: CellConfig) -> dict[str, tuple]:
    """Name -> shape for every trainable tensor of a cell with output layer."""
    n, k = cfg.n_hidden, cfg.n_in
    if cfg.cell == "rnn":
        shapes = {"w": (n, n), "w_in": (k, n), "b": (n,)}
    else:
        shapes = {"w_x": (k, 4 * n), "w_h": (n, 4 * n), "b": (4 * n,)}
    shapes.update(_plastic_shapes(cfg))
    if cfg.n_out:
        shapes["w_out"] = (n, cfg.n_out)
        shapes["b_out"] = (cfg.n_out,)
    return shapes


def param_count(cfg: CellConfig) -> int:
    return int(sum(np.prod(s) for s in param_shapes(cfg).values()))


def init_params(cfg: CellConfig, rng: np.random.Generator,
                init_scale: float | None = None) -> dict[str, Tensor]:
    """Uniform(-k, k) weights with k = 1/sqrt(fan-in) (or ``init_scale``).

    Biases start at zero, plasticity coefficients and eta at 0.01, and
    modulator fan-out weights at 1.
    """
    params = {}
    fan_in = {"w": cfg.n_hidden, "w_in": cfg.n_in, "w_x": cfg.n_in, "w_h": cfg.n_hidden,
              "w_out": cfg.n_hidden, "w_mod": cfg.n_hidden}
    for name, shape in param_shapes(cfg).items():
        if name in fan_in:
            k = init_scale if init_scale is not None else 1.0 / np.sqrt(fan_in[name])
            data = rng.uniform(-k, k, size=shape)
        elif name in ("alpha", "eta"):
            data = np.full(shape, 0.01)
        elif name == "mod_fanout":
            data = np.ones(shape)
        else:
            data = np.zeros(shape)
        params[name] = Tensor(data, requires_grad=True, name=name)
    return params


# -- states ------------------------------------------------------------------------

class CellOutput(NamedTuple):
    hidden: Tensor
    logits: Tensor | None
    value: Tensor | None
    modulator: Tensor | None


class PlasticState(NamedTuple):
    hebb: Tensor | None
    elig: Tensor | None


def zero_state(cfg: CellConfig, batch: int = 1) -> PlasticState:
    n = cfg.n_hidden
    if cfg.variant == "none":
        return PlasticState(None, None)
    hebb = Tensor(np.zeros((batch, n, n)))
    elig = Tensor(np.zeros((batch, n, n))) if cfg.variant == "retro-mod" else None
    return PlasticState(hebb, elig)


def reset_episode(state: PlasticState) -> PlasticState:
    """All-zero traces of the same shapes, cut off from any earlier tape."""
    return PlasticState(*(None if t is None else Tensor(np.zeros(t.shape)) for t in state))


def detach_state(state):
    return type(state)(*(None if t is None else t.detach() for t in state))


# -- shared pieces -----------------------------------------------------------------

def compute_modulator(hidden, w_mod, b_mod) -> Tensor:
    """Neuromodulatory signal ``tanh(hidden . w_mod + b_mod)``, shape ``[batch, 1]``."""
    return ag.tanh(ag.matmul(hidden, w_mod) + b_mod)


def _plastic_drive(pre: Tensor, params: dict, hebb: Tensor) -> Tensor:
    return ag.plastic_vecmat(pre, params["alpha"], hebb)


def _rate(mod: Tensor, params: dict) -> Tensor:
    """Per-connection update rate derived from the modulator output."""
    m = ag.reshape(mod, (mod.shape[0], 1, 1))
    fan = params.get("mod_fanout")
    return m if fan is None else m * fan


def update_traces(variant: str, params: dict, state: PlasticState, pre: Tensor,
                  post: Tensor, mod: Tensor | None) -> PlasticState:
    """Advance Hebbian (and eligibility) traces by one step."""
    hebb, elig = state
    if variant == "none":
        return state
    if variant == "plain":
        return PlasticState(ag.hebbian_update(hebb, params["eta"], pre, post), None)
    if mod is None:
        raise ContractError(f"variant {variant!r} needs a modulator output")
    if variant == "simple-mod":
        return PlasticState(ag.hebbian_update(hebb, _rate(mod, params), pre, post), None)
    if elig is None:
        raise ContractError("retro-mod needs an eligibility trace")
    decay = ag.hard_clip(params["eta"])
    new_hebb = ag.hard_clip(hebb + _rate(mod, params) * elig)
    new_elig = (1.0 - decay) * elig + decay * ag.outer(pre, post)
    return PlasticState(new_hebb, new_elig)


# -- RNN ----------------------------------------------------------------------------

def plastic_rnn_step(x_prev, inp, params: dict, state: PlasticState, variant: str,
                     n_actions: int | None = None):
    """One step of a (possibly plastic) tanh RNN with readout heads.

    Returns ``(CellOutput, new_state)``.  The forward pass uses the traces as
    they are at entry; the update produces the traces for the next step.
    With ``n_actions`` given, ``w_out`` columns are split into action logits
    followed by a linear value output.
    """
    variant = canonical_variant(variant)
    if variant == "retro-mod" and state.elig is None:
        raise ContractError("retro-mod step requires an eligibility state")
    if variant != "none" and state.hebb is None:
        raise ContractError(f"variant {variant!r} requires a Hebbian state")
    x_prev, inp = ag.as_tensor(x_prev), ag.as_tensor(inp)
    drive = ag.matmul(x_prev, params["w"]) + ag.matmul(inp, params["w_in"]) + params["b"]
    if variant != "none":
        drive = drive + _plastic_drive(x_prev, params, state.hebb)
    hidden = ag.tanh(drive)

    logits = value = None
    if "w_out" in params:
        out = ag.matmul(hidden, params["w_out"]) + params["b_out"]
        if n_actions is None:
            logits = out
        else:
            logits = out[:, :n_actions]
            value = out[:, n_actions]
    mod = None
    if is_modulated(variant):
        mod = compute_modulator(hidden, params["w_mod"], params["b_mod"])
    new_state = update_traces(variant, params, state, x_prev, hidden, mod)
    return CellOutput(hidden, logits, value, mod), new_state


class PlasticRNN:
    """Recurrent agent network: plastic tanh layer plus action/value/modulator heads."""

    def __init__(self, n_in: int, n_hidden: int, n_actions: int, variant: str = "none",
                 alpha: str = "per-connection", eta: str = "global",
                 rng: np.random.Generator | None = None):
        self.n_actions = n_actions
        self.config = CellConfig(n_in, n_hidden, n_actions + 1, variant, "rnn", alpha, eta)
        rng = rng if rng is not None else np.random.default_rng(0)
        self.params = init_params(self.config, rng)

    @property
    def variant(self) -> str:
        return self.config.variant

    def parameters(self) -> list[Tensor]:
        return list(self.params.values())

    def num_params(self) -> int:
        return sum(p.size for p in self.params.values())

    def initial_state(self, batch: int = 1):
        return Tensor(np.zeros((batch, self.config.n_hidden))), zero_state(self.config, batch)

    def step(self, hidden, state: PlasticState, inp):
        return plastic_rnn_step(hidden, inp, self.params, state, self.variant, self.n_actions)


# -- LSTM ---------------------------------------------------------------------------

class LSTMState(NamedTuple):
    h: Tensor
    c: Tensor
    hebb: Tensor | None
    elig: Tensor | None


def lstm_zero_state(cfg: CellConfig, batch: int = 1) -> LSTMState:
    n = cfg.n_hidden
    traces = zero_state(cfg, batch)
    return LSTMState(Tensor(np.zeros((batch, n))), Tensor(np.zeros((batch, n))), *traces)


def plastic_lstm_step(x_t, state: LSTMState, params: dict, variant: str) -> LSTMState:
    """One LSTM step with plasticity on the data path ``i_t``.

    Gate naming: ``i = tanh(...)`` carries data, ``j, f, o`` are sigmoid
    gates, ``c = f*c_prev + i*j`` and ``h = tanh(c)*o``.  The plastic term
    acts on ``h_prev -> i``; pre-synaptic activity is ``h_prev`` and
    post-synaptic activity is ``i``.  The layer's modulator reads ``h_prev``.
    """
    variant = canonical_variant(variant)
    h_prev, c_prev = state.h, state.c
    n = h_prev.shape[-1]
    gates = ag.matmul(ag.as_tensor(x_t), params["w_x"]) + ag.matmul(h_prev, params["w_h"]) + params["b"]
    i_drive = gates[:, :n]
    if variant != "none":
        if state.hebb is None:
            raise ContractError(f"variant {variant!r} requires a Hebbian state")
        i_drive = i_drive + _plastic_drive(h_prev, params, state.hebb)
    i = ag.tanh(i_drive)
    j = ag.sigmoid(gates[:, n:2 * n])
    f = ag.sigmoid(gates[:, 2 * n:3 * n])
    o = ag.sigmoid(gates[:, 3 * n:])
    c = f * c_prev + i * j
    h = ag.tanh(c) * o
    mod = None
    if is_modulated(variant):
        mod = compute_modulator(h_prev, params["w_mod"], params["b_mod"])
    traces = update_traces(variant, params, PlasticState(state.hebb, state.elig), h_prev, i, mod)
    return LSTMState(h, c, traces.hebb, traces.elig)


def lstm_config(n_in: int, n_hidden: int, variant: str, alpha: str = "per-connection",
                eta: str = "per-connection", fanout: str = "per-connection") -> CellConfig:
    """Layer config (no output head) with the language-model defaults."""
    return CellConfig(n_in, n_hidden, 0, variant, "lstm", alpha, eta, fanout)


def with_variant(cfg: CellConfig, variant: str) -> CellConfig:
    return replace(cfg, variant=variant)
