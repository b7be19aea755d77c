"""Advantage actor-critic meta-training for the plastic recurrent agents.

One outer-loop update = roll out a batch of full episodes (plastic traces
reset at the start of each), backpropagate the A2C loss through the whole
unroll, clip the gradient norm and take an optimizer step.
"""

from __future__ import annotations

import csv
import logging
import os
from dataclasses import dataclass, field

import numpy as np

from . import autograd as ag
from .autograd import Tape, Tensor
from .cells import PlasticRNN, is_modulated
from .checkpoint import load_params, save_params
from .envs import EPISODE_LENGTH, PHASE_RESPONSE, make_env
from .optim import Adam, clip_grad_norm

log = logging.getLogger(__name__)

CURVE_FIELDS = ("episode", "median_reward", "iqr_low", "iqr_high", "loss", "grad_norm")


class TrainingDiverged(RuntimeError):
    pass


@dataclass
class TrainConfig:
    gamma: float = 0.9
    lr: float = 1e-4
    value_coef: float = 0.1
    entropy_coef: float = 0.03
    entropy_final: float = 0.0
    grad_clip: float = 7.0
    episodes: int = 10000
    batch_size: int = 1
    seed: int = 0
    log_interval: int = 10

    def __post_init__(self):
        if not 0.0 < self.gamma <= 1.0:
            raise ValueError(f"gamma must lie in (0, 1], got {self.gamma}")
        if self.grad_clip <= 0:
            raise ValueError(f"grad_clip must be positive, got {self.grad_clip}")
        if self.batch_size < 1 or self.log_interval < 1 or self.episodes < 0:
            raise ValueError("batch_size and log_interval must be >= 1, episodes >= 0")

    def entropy_at(self, episode: int) -> float:
        if self.episodes <= 0:
            return self.entropy_coef
        frac = min(1.0, episode / self.episodes)
        return self.entropy_coef + (self.entropy_final - self.entropy_coef) * frac


@dataclass
class EpisodeTrajectory:
    """Per-step records of a batched rollout; tensors have shape ``[batch]``."""

    logp: list = field(default_factory=list)
    value: list = field(default_factory=list)
    entropy: list = field(default_factory=list)
    modulator: list = field(default_factory=list)
    reward: list = field(default_factory=list)
    action: list = field(default_factory=list)

    def __len__(self):
        return len(self.reward)

    def rewards(self) -> np.ndarray:
        """``[batch, T]`` reward array."""
        return np.stack(self.reward, axis=1)


def discounted_returns(rewards, gamma: float) -> np.ndarray:
    """``R_t = sum_k gamma^(k-t) r_k`` along the last axis, by reverse accumulation."""
    if not 0.0 < gamma <= 1.0:
        raise ValueError(f"gamma must lie in (0, 1], got {gamma}")
    r = np.asarray(rewards, dtype=np.float64)
    out = np.empty_like(r)
    acc = np.zeros(r.shape[:-1])
    for t in range(r.shape[-1] - 1, -1, -1):
        acc = r[..., t] + gamma * acc
        out[..., t] = acc
    return out


def a2c_loss(traj: EpisodeTrajectory, returns: np.ndarray, value_coef: float,
             entropy_coef: float) -> Tensor:
    """Batch-averaged A2C loss.

    ``-sum_t logpi(a_t) * (R_t - V_t)`` with the advantage treated as a
    constant, plus ``value_coef * sum_t (R_t - V_t)^2`` minus
    ``entropy_coef * sum_t H_t``.  ``returns`` is ``[batch, T]``.
    """
    batch = returns.shape[0]
    logp = ag.concat(traj.logp, axis=0)
    value = ag.concat(traj.value, axis=0)
    target = np.ascontiguousarray(returns.T).reshape(-1)
    advantage = target - value.data
    policy_term = -(logp * advantage).sum()
    err = target - value
    value_term = (err * err).sum()
    loss = policy_term + value_coef * value_term
    if entropy_coef:
        loss = loss - entropy_coef * ag.concat(traj.entropy, axis=0).sum()
    return loss * (1.0 / batch)


def sample_actions(probs: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    u = rng.random(probs.shape[0])
    actions = (np.cumsum(probs, axis=1) < u[:, None]).sum(axis=1)
    return np.minimum(actions, probs.shape[1] - 1)


def rollout(model: PlasticRNN, envs, seeds, rng: np.random.Generator,
            on_step=None) -> EpisodeTrajectory:
    """Run one full episode per environment, recording on the active tape (if any)."""
    obs = np.stack([env.reset(s) for env, s in zip(envs, seeds)])
    hidden, state = model.initial_state(len(envs))
    traj = EpisodeTrajectory()
    for t in range(EPISODE_LENGTH):
        out, state = model.step(hidden, state, obs)
        hidden = out.hidden
        logp = ag.log_softmax(out.logits)
        probs = np.exp(logp.data)
        actions = sample_actions(probs, rng)
        traj.logp.append(ag.pick(logp, actions))
        traj.value.append(out.value)
        traj.entropy.append(-(ag.exp(logp) * logp).sum(axis=1))
        traj.modulator.append(None if out.modulator is None else out.modulator.data[:, 0].copy())
        traj.action.append(actions)
        if on_step is not None:
            on_step(t, envs, obs, actions, out)
        results = [env.step(a) for env, a in zip(envs, actions)]
        obs = np.stack([r[0] for r in results])
        traj.reward.append(np.array([r[1] for r in results]))
    return traj


# -- model construction and checkpoints ---------------------------------------------

def build_model(task: str, variant: str, hidden_size: int, seed: int,
                alpha: str = "per-connection", eta: str = "global") -> PlasticRNN:
    env = make_env(task)
    rng = np.random.default_rng(np.random.SeedSequence([seed, 0]))
    return PlasticRNN(env.n_inputs, hidden_size, env.n_actions, variant, alpha, eta, rng=rng)


def save_model(path, model: PlasticRNN, task: str, extra: dict | None = None) -> None:
    cfg = model.config
    meta = {"kind": "plastic-rnn", "task": task, "variant": cfg.variant,
            "n_in": cfg.n_in, "n_hidden": cfg.n_hidden, "n_actions": model.n_actions,
            "alpha": cfg.alpha, "eta": cfg.eta}
    meta.update(extra or {})
    save_params(path, model.params, meta)


def load_model(path) -> tuple[PlasticRNN, dict]:
    arrays, meta = load_params(path)
    if meta.get("kind") != "plastic-rnn":
        raise ValueError(f"{path}: checkpoint holds a {meta.get('kind')!r}, not a plastic-rnn")
    model = PlasticRNN(meta["n_in"], meta["n_hidden"], meta["n_actions"], meta["variant"],
                       meta["alpha"], meta["eta"])
    for name, p in model.params.items():
        if arrays[name].shape != p.shape:
            raise ValueError(f"{path}: parameter {name} has shape {arrays[name].shape}, "
                             f"expected {p.shape}")
        p.data = arrays[name]
    return model, meta


# -- training -----------------------------------------------------------------------

@dataclass
class TrainResult:
    model: PlasticRNN
    curve: list
    episode_rewards: list
    correct_fraction: list


def _correct_fraction(rewards: np.ndarray) -> np.ndarray:
    pos = (rewards > 0).sum(axis=1)
    nonzero = (rewards != 0).sum(axis=1)
    return np.where(nonzero > 0, pos / np.maximum(nonzero, 1), np.nan)


def write_curve(path, rows) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(CURVE_FIELDS)
        for row in rows:
            w.writerow([row[0]] + [repr(float(v)) for v in row[1:]])


def train_run(task: str, variant: str, hidden_size: int, cfg: TrainConfig,
              out_dir: str | None = None, alpha: str = "per-connection",
              eta: str = "global", tag: str | None = None) -> TrainResult:
    """Meta-train one agent; returns the learning curve and the final model.

    Curve rows (every ``log_interval`` episodes) hold the median and
    quartiles of total episode reward over the interval, plus the mean loss
    and pre-clip gradient norm of the updates in it.  With ``out_dir`` set
    the curve CSV and a final checkpoint are written there; if the loss turns
    non-finite, the last good parameters are checkpointed before raising.
    """
    tag = tag or f"seed{cfg.seed}"
    model = build_model(task, variant, hidden_size, cfg.seed, alpha, eta)
    params = model.parameters()
    opt = Adam(params, lr=cfg.lr)
    env_rng = np.random.default_rng(np.random.SeedSequence([cfg.seed, 1]))
    act_rng = np.random.default_rng(np.random.SeedSequence([cfg.seed, 2]))
    envs = [make_env(task) for _ in range(cfg.batch_size)]

    curve, ep_rewards, correct = [], [], []
    window_rewards, window_loss, window_norm = [], [], []
    done = 0
    while done < cfg.episodes:
        batch = min(cfg.batch_size, cfg.episodes - done)
        seeds = env_rng.integers(0, 2**63 - 1, size=batch)
        with Tape():
            traj = rollout(model, envs[:batch], seeds, act_rng)
            rewards = traj.rewards()
            returns = discounted_returns(rewards, cfg.gamma)
            loss = a2c_loss(traj, returns, cfg.value_coef, cfg.entropy_at(done))
            if not np.isfinite(loss.item()):
                if out_dir:
                    save_model(os.path.join(out_dir, f"checkpoint_{tag}_lastgood.npz"), model, task)
                raise TrainingDiverged(f"non-finite loss at episode {done}")
            grads_map = ag.backward(loss, params)
        grads = [grads_map[p] for p in params]
        for p in params:
            p.grad = None
        grads, norm = clip_grad_norm(grads, cfg.grad_clip)
        opt.step(grads)

        totals = rewards.sum(axis=1)
        ep_rewards.extend(totals.tolist())
        if task.startswith("cue-reward"):
            correct.extend(_correct_fraction(rewards).tolist())
        window_loss.append(loss.item())
        window_norm.append(norm)
        for k in range(batch):
            window_rewards.append(totals[k])
            done += 1
            if done % cfg.log_interval == 0:
                q25, q50, q75 = np.percentile(window_rewards, [25, 50, 75])
                curve.append((done, q50, q25, q75, float(np.mean(window_loss or [loss.item()])),
                              float(np.mean(window_norm or [norm]))))
                window_rewards, window_loss, window_norm = [], [], []
        if done % (cfg.log_interval * 100) == 0 or done == cfg.episodes:
            log.info("%s %s %s: episode %d, median reward %.2f", task, variant, tag, done,
                     curve[-1][1] if curve else float("nan"))

    if out_dir:
        os.makedirs(out_dir, exist_ok=True)
        write_curve(os.path.join(out_dir, f"curve_{tag}.csv"), curve)
        save_model(os.path.join(out_dir, f"checkpoint_{tag}.npz"), model, task)
    return TrainResult(model, curve, ep_rewards, correct)


# -- evaluation ---------------------------------------------------------------------

def reward_stats(totals) -> dict:
    totals = np.asarray(totals, dtype=float)
    q25, q50, q75 = np.percentile(totals, [25, 50, 75])
    return {"median": float(q50), "iqr_low": float(q25), "iqr_high": float(q75),
            "mean": float(totals.mean()), "episode_rewards": totals.tolist()}


def evaluate(model: PlasticRNN, task: str, n_episodes: int, seed: int,
             batch_size: int = 10) -> dict:
    """Reward statistics of ``model`` without any parameter update.

    Within-episode plasticity still runs.  Same ``(model, seed)`` always
    gives the same numbers.
    """
    if n_episodes < 1:
        raise ValueError("n_episodes must be >= 1")
    env_rng = np.random.default_rng(np.random.SeedSequence([seed, 11]))
    act_rng = np.random.default_rng(np.random.SeedSequence([seed, 12]))
    totals, correct = [], []
    remaining = n_episodes
    with ag.no_grad():
        while remaining > 0:
            batch = min(batch_size, remaining)
            envs = [make_env(task) for _ in range(batch)]
            seeds = env_rng.integers(0, 2**63 - 1, size=batch)
            rewards = rollout(model, envs, seeds, act_rng).rewards()
            totals.extend(rewards.sum(axis=1).tolist())
            correct.extend(_correct_fraction(rewards).tolist())
            remaining -= batch
    stats = reward_stats(totals)
    if task.startswith("cue-reward"):
        stats["correct_fraction"] = float(np.nanmean(correct))
    return stats


def evaluate_policy(policy, task: str, n_episodes: int, seed: int) -> dict:
    """Reward statistics of a hand-coded ``policy(env, rng) -> action``."""
    rng = np.random.default_rng(np.random.SeedSequence([seed, 21]))
    totals, trials = [], 0
    for k in range(n_episodes):
        env = make_env(task)
        env.reset(int(rng.integers(0, 2**63 - 1)))
        total, done = 0.0, False
        while not done:
            _, r, done = env.step(policy(env, rng))
            total += r
            trials += r != 0
        totals.append(total)
    stats = reward_stats(totals)
    stats["trials"] = int(trials)
    return stats


def random_policy(env, rng) -> int:
    return int(rng.integers(env.n_actions))


# -- modulator traces ---------------------------------------------------------------

TRACE_FIELDS = ("t", "cue", "prev_reward", "modulator")


def emit_modulator_trace(model: PlasticRNN, task: str, seed: int, trial: int | None = None):
    """Per-step ``(t, cue, prev_reward, modulator)`` rows for one trial.

    ``cue`` is the index of the cue on screen, ``R`` on the response step and
    empty otherwise.  The trial is drawn at random from the complete trials
    of the episode unless given.
    """
    if not is_modulated(model.variant):
        raise ValueError(f"variant {model.variant!r} has no neuromodulator output")
    if not task.startswith("cue-reward"):
        raise ValueError("modulator traces are defined for the cue-reward task")
    env = make_env(task)
    rows = []

    def on_step(t, envs, obs, actions, out):
        s = envs[0].state
        shown = s.shown[t]
        cue = str(shown) if shown >= 0 else ("R" if s.phases[t] == PHASE_RESPONSE else "")
        rows.append((t, cue, float(obs[0, -1]), float(out.modulator.data[0, 0]), s.trial_of_step[t]))

    rng = np.random.default_rng(np.random.SeedSequence([seed, 31]))
    with ag.no_grad():
        rollout(model, [env], [int(rng.integers(0, 2**63 - 1))], rng, on_step=on_step)
    state = env.state
    complete = sorted({k for k in state.trial_of_step if k >= 0})
    # the last scheduled trial may be cut off by the episode end
    last = state.trial_of_step[-1]
    if last >= 0 and state.trial_of_step.count(last) < 5:
        complete.remove(last)
    if trial is None:
        trial = int(rng.choice(complete))
    elif trial not in complete:
        raise ValueError(f"trial {trial} is not a complete trial of this episode")
    return [r[:4] for r in rows if r[4] == trial]


def write_trace(path, rows) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(TRACE_FIELDS)
        for t, cue, prev_reward, mod in rows:
            w.writerow([t, cue, f"{prev_reward:g}", repr(mod)])
