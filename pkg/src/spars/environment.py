"""Window-moving MDP over a 3-d volume and the comparative two-agent reward."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .classifier import predict_scores
from .errors import InvariantError, ParameterError

# index -> unit direction; the action moves the window by ``d`` along it
ACTION_DIRECTIONS = np.array([
    (1, 0, 0), (-1, 0, 0),
    (0, 1, 0), (0, -1, 0),
    (0, 0, 1), (0, 0, -1),
], dtype=np.int64)
N_ACTIONS = len(ACTION_DIRECTIONS)
DEFAULT_STEP = 4


@dataclass(frozen=True)
class WindowSpec:
    corner: tuple
    extents: tuple

    def slices(self):
        return tuple(slice(c, c + e) for c, e in zip(self.corner, self.extents))

    def fits(self, dims):
        return all(0 <= c <= n - e for c, e, n in zip(self.corner, self.extents, dims))


@dataclass(frozen=True)
class EnvState:
    case_id: str
    window: WindowSpec
    t: int = 0


@dataclass(frozen=True)
class RewardPair:
    r_m: int
    r_n: int


def _dims_of(case):
    vol = getattr(case, "volume", case)
    return tuple(np.shape(vol))


def _id_of(case):
    return getattr(case, "id", "")


def action_delta(action, d=DEFAULT_STEP):
    if not 0 <= int(action) < N_ACTIONS:
        raise ParameterError(f"action index must be in 0..{N_ACTIONS - 1}, got {action}")
    return tuple(int(v) for v in ACTION_DIRECTIONS[int(action)] * d)


def initial_state(case, extents, mode="centre", seed=None, grid=1) -> EnvState:
    """Starting window: centred (floor) or uniform over valid corners.

    With ``grid > 1`` random corners are restricted to multiples of ``grid``.
    """
    dims = _dims_of(case)
    extents = tuple(int(e) for e in extents)
    if len(extents) != 3 or any(e < 1 or e > n for e, n in zip(extents, dims)):
        raise ParameterError(f"window extents {extents} do not fit in volume {dims}")
    if mode == "centre":
        corner = tuple((n - e) // 2 for n, e in zip(dims, extents))
    elif mode == "random":
        rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
        corner = tuple(int(rng.integers(0, (n - e) // grid + 1)) * grid for n, e in zip(dims, extents))
    else:
        raise ParameterError(f"unknown start mode {mode!r}")
    return EnvState(_id_of(case), WindowSpec(corner, extents), 0)


def clamp_corner(corner, extents, dims):
    return tuple(int(min(max(c, 0), n - e)) for c, e, n in zip(corner, extents, dims))


def apply_action(state: EnvState, action, dims, d=DEFAULT_STEP) -> EnvState:
    """Deterministic successor: shift the corner, clamp into the volume, advance t."""
    delta = action_delta(action, d)
    w = state.window
    moved = tuple(c + dc for c, dc in zip(w.corner, delta))
    corner = clamp_corner(moved, w.extents, dims)
    return EnvState(state.case_id, WindowSpec(corner, w.extents), state.t + 1)


def crop_window(case, window: WindowSpec) -> np.ndarray:
    vol = getattr(case, "volume", case)
    if not window.fits(vol.shape):
        raise InvariantError(f"window {window} lies outside volume {vol.shape}")
    return vol[window.slices()]


def reward_from_scores(score_m, score_n) -> RewardPair:
    """+1 to agent m when its window scores at least as high as n's; n gets the negation."""
    r_m = 1 if score_m >= score_n else -1
    return RewardPair(r_m, -r_m)


class WindowScorer:
    """Classifier scores for windows of one case, memoised by window.

    The classifier runs in eval mode, so a window's score never changes.
    """

    def __init__(self, net, case, batch_size=32):
        self.net = net
        self.case = case
        self.case_id = _id_of(case)
        self.batch_size = batch_size
        self.cache = {}

    def scores(self, windows):
        todo = [w for w in dict.fromkeys(windows) if w not in self.cache]
        if todo:
            crops = [crop_window(self.case, w) for w in todo]
            for w, s in zip(todo, predict_scores(self.net, crops, self.batch_size)):
                self.cache[w] = float(s)
        return np.array([self.cache[w] for w in windows])

    def score(self, window):
        return float(self.scores([window])[0])

    def __call__(self, state: EnvState):
        return self.score(state.window)


def compute_reward_pair(scorer: WindowScorer, s_m: EnvState, s_n: EnvState) -> RewardPair:
    if s_m.case_id != s_n.case_id or (scorer.case_id and s_m.case_id != scorer.case_id):
        raise ParameterError(f"states refer to different cases: {s_m.case_id!r} vs {s_n.case_id!r}")
    f_m, f_n = scorer.scores([s_m.window, s_n.window])
    return reward_from_scores(f_m, f_n)
