"""Meta-learning tasks: cue-reward association and the 9x9 maze.

Both environments are seedable single-owner state machines with a
``reset(seed) -> obs`` / ``step(action) -> (obs, reward, done)`` interface
and fixed 200-step episodes.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import TextIO

import numpy as np

from .autograd import ContractError

EPISODE_LENGTH = 200

# -- cue-reward association -----------------------------------------------------------

CUE_BITS = 20
N_CUES = 4
CUE_OBS_SIZE = CUE_BITS + 1 + 2 + 1  # cue field, elapsed time, previous response, previous reward
GAP_RANGE = (1, 18)  # zero-input steps after each response cue; ~15 trials per episode

PHASE_CUE_A = "cue-a"
PHASE_CUE_B = "cue-b"
PHASE_RESPONSE = "response"
PHASE_GAP = "gap"

FIXED_4BIT_CUES = np.eye(4)
RESPONSE_CUE = np.ones(CUE_BITS)


@dataclass
class CueRewardState:
    cues: np.ndarray            # [4, bits]
    target: int
    phases: list                # per-step phase name
    shown: list                 # per-step cue index shown (-1 when none)
    pairs: list                 # per trial (cue_a, cue_b)
    trial_of_step: list         # per-step trial index (-1 after the last trial)
    t: int = 0
    prev_action: int = -1
    prev_reward: float = 0.0
    done: bool = False
    rewards: list = field(default_factory=list)


def _draw_cues(rng: np.random.Generator, variant: str) -> np.ndarray:
    if variant == "fixed-4bit":
        return FIXED_4BIT_CUES.copy()
    if variant != "random-20bit":
        raise ValueError(f"unknown cue variant {variant!r}")
    cues = rng.integers(0, 2, size=(N_CUES, CUE_BITS)).astype(float)
    while len({c.tobytes() for c in cues}) < N_CUES or any(np.array_equal(c, RESPONSE_CUE) for c in cues):
        cues = rng.integers(0, 2, size=(N_CUES, CUE_BITS)).astype(float)
    return cues


def _build_schedule(rng: np.random.Generator):
    phases, shown, trial_of_step, pairs = [], [], [], []
    lo, hi = GAP_RANGE
    while len(phases) + 4 <= EPISODE_LENGTH:
        k = len(pairs)
        a, b = rng.choice(N_CUES, size=2, replace=False)
        pairs.append((int(a), int(b)))
        gap = int(rng.integers(lo, hi + 1))
        phases += [PHASE_CUE_A, PHASE_GAP, PHASE_CUE_B, PHASE_RESPONSE] + [PHASE_GAP] * gap
        shown += [int(a), -1, int(b), -1] + [-1] * gap
        trial_of_step += [k] * (4 + gap)
    del phases[EPISODE_LENGTH:], shown[EPISODE_LENGTH:], trial_of_step[EPISODE_LENGTH:]
    while len(phases) < EPISODE_LENGTH:
        phases.append(PHASE_GAP)
        shown.append(-1)
        trial_of_step.append(-1)
    return phases, shown, trial_of_step, pairs


def cue_reward_reset(seed, variant: str = "random-20bit"):
    """Fresh cue-reward episode: ``(state, first observation)``."""
    rng = np.random.default_rng(seed)
    cues = _draw_cues(rng, variant)
    target = int(rng.integers(N_CUES))
    phases, shown, trial_of_step, pairs = _build_schedule(rng)
    state = CueRewardState(cues, target, phases, shown, pairs, trial_of_step)
    return state, encode_cue_observation(state)


def encode_cue_observation(state: CueRewardState) -> np.ndarray:
    obs = np.zeros(CUE_OBS_SIZE)
    t = state.t
    if not state.done and t < EPISODE_LENGTH:
        phase = state.phases[t]
        if phase in (PHASE_CUE_A, PHASE_CUE_B):
            cue = state.cues[state.shown[t]]
            obs[:cue.size] = cue
        elif phase == PHASE_RESPONSE:
            obs[:CUE_BITS] = RESPONSE_CUE
    obs[CUE_BITS] = t / EPISODE_LENGTH
    if state.prev_action >= 0:
        obs[CUE_BITS + 1 + state.prev_action] = 1.0
    obs[CUE_BITS + 3] = state.prev_reward
    return obs


def target_in_pair(state: CueRewardState, trial: int) -> bool:
    return state.target in state.pairs[trial]


def cue_reward_step(state: CueRewardState, action: int):
    """Advance one step.  Only the action on a response step is scored."""
    if state.done:
        raise ContractError("step() called on a finished cue-reward episode")
    if action not in (0, 1):
        raise ContractError(f"cue-reward action must be 0 or 1, got {action!r}")
    t = state.t
    reward = 0.0
    if state.phases[t] == PHASE_RESPONSE:
        correct = 1 if target_in_pair(state, state.trial_of_step[t]) else 0
        reward = 1.0 if action == correct else -1.0
    state.rewards.append(reward)
    state.prev_action = int(action)
    state.prev_reward = reward
    state.t = t + 1
    state.done = state.t >= EPISODE_LENGTH
    return encode_cue_observation(state), reward, state.done


def omniscient_cue_action(state: CueRewardState) -> int:
    """The correct response for the current step (0 outside response steps)."""
    t = state.t
    if state.phases[t] != PHASE_RESPONSE:
        return 0
    return 1 if target_in_pair(state, state.trial_of_step[t]) else 0


class CueRewardEnv:
    n_inputs = CUE_OBS_SIZE
    n_actions = 2

    def __init__(self, variant: str = "random-20bit"):
        self.variant = variant
        self.state: CueRewardState | None = None

    def reset(self, seed) -> np.ndarray:
        self.state, obs = cue_reward_reset(seed, self.variant)
        return obs

    def step(self, action: int):
        if self.state is None:
            raise ContractError("reset() must be called before step()")
        return cue_reward_step(self.state, int(action))

    def describe(self) -> str:
        s = self.state
        if s is None or s.done:
            return "done"
        phase = s.phases[s.t]
        if phase in (PHASE_CUE_A, PHASE_CUE_B):
            return f"cue{s.shown[s.t]}"
        return phase


# -- maze -------------------------------------------------------------------------------

MAZE_SIZE = 9
MAZE_OBS_SIZE = 9 + 4 + 1
ACTIONS = ("left", "right", "up", "down")
_MOVES = ((0, -1), (0, 1), (-1, 0), (1, 0))


def _wall_map() -> np.ndarray:
    walls = np.zeros((MAZE_SIZE, MAZE_SIZE), dtype=bool)
    walls[1::2, 1::2] = True
    return walls


WALLS = _wall_map()
WALLS.setflags(write=False)
OPEN_CELLS = [tuple(map(int, rc)) for rc in np.argwhere(~WALLS)]


def is_wall(r: int, c: int) -> bool:
    """Cells outside the grid count as wall (the surrounding border)."""
    if not (0 <= r < MAZE_SIZE and 0 <= c < MAZE_SIZE):
        return True
    return bool(WALLS[r, c])


@dataclass
class MazeState:
    agent: tuple
    reward_pos: tuple
    rng: np.random.Generator
    t: int = 0
    prev_action: int = -1
    prev_reward: float = 0.0
    done: bool = False


def _random_cell(rng: np.random.Generator, exclude=None) -> tuple:
    cells = [c for c in OPEN_CELLS if c != exclude]
    return cells[int(rng.integers(len(cells)))]


def maze_reset(seed):
    rng = np.random.default_rng(seed)
    reward_pos = _random_cell(rng)
    agent = _random_cell(rng, exclude=reward_pos)
    state = MazeState(agent, reward_pos, rng)
    return state, encode_maze_observation(state)


def encode_maze_observation(state: MazeState) -> np.ndarray:
    obs = np.zeros(MAZE_OBS_SIZE)
    r, c = state.agent
    k = 0
    for dr in (-1, 0, 1):
        for dc in (-1, 0, 1):
            obs[k] = 1.0 if is_wall(r + dr, c + dc) else 0.0
            k += 1
    if state.prev_action >= 0:
        obs[9 + state.prev_action] = 1.0
    obs[13] = state.prev_reward
    return obs


def maze_step(state: MazeState, action: int):
    if state.done:
        raise ContractError("step() called on a finished maze episode")
    if action not in (0, 1, 2, 3):
        raise ContractError(f"maze action must be in 0..3, got {action!r}")
    dr, dc = _MOVES[action]
    r, c = state.agent[0] + dr, state.agent[1] + dc
    if not is_wall(r, c):
        state.agent = (r, c)
    reward = 0.0
    if state.agent == state.reward_pos:
        reward = 1.0
        state.agent = _random_cell(state.rng, exclude=state.reward_pos)
    state.prev_action = int(action)
    state.prev_reward = reward
    state.t += 1
    state.done = state.t >= EPISODE_LENGTH
    return encode_maze_observation(state), reward, state.done


class MazeEnv:
    n_inputs = MAZE_OBS_SIZE
    n_actions = 4

    def __init__(self):
        self.state: MazeState | None = None

    def reset(self, seed) -> np.ndarray:
        self.state, obs = maze_reset(seed)
        return obs

    def step(self, action: int):
        if self.state is None:
            raise ContractError("reset() must be called before step()")
        return maze_step(self.state, int(action))

    def describe(self) -> str:
        return "done" if self.state is None else "{},{}".format(*self.state.agent)


def make_env(task: str):
    if task == "cue-reward":
        return CueRewardEnv("random-20bit")
    if task == "cue-reward-fixed4":
        return CueRewardEnv("fixed-4bit")
    if task == "maze":
        return MazeEnv()
    raise ValueError(f"unknown RL task {task!r}")


def write_episode_trace(fh: TextIO, rows) -> None:
    """Line-per-step text records: ``t phase action reward modulator``."""
    fh.write("# t phase action reward modulator\n")
    for t, phase, action, reward, mod in rows:
        m = "nan" if mod is None else repr(float(mod))
        fh.write(f"{t} {phase} {action} {reward:g} {m}\n")
