"""Inference rollout, voxel-level score accumulation, thresholding and overlap metrics."""
from __future__ import annotations

import json
import logging
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import formats
from .environment import DEFAULT_STEP, WindowScorer, WindowSpec, apply_action, initial_state
from .errors import ParameterError
from .selfplay import observe, sample_from

logger = logging.getLogger(__name__)

NORMALIZATIONS = ("none", "max", "visit_count", "steps")
TERMINATIONS = ("single", "accumulated")


@dataclass
class InferenceConfig:
    rho: float = 0.3
    e_max: int = 256
    map_threshold: float = 0.5
    normalization: str = "steps"
    termination: str = "single"
    greedy: bool = False
    extents: tuple = (32, 32, 16)
    step: int = DEFAULT_STEP
    seed: int = 0

    def __post_init__(self):
        self.extents = tuple(self.extents)
        if not 0.0 < self.rho < 1.0:
            raise ParameterError(f"rho must lie in (0, 1), got {self.rho}")
        if self.e_max < 1:
            raise ParameterError("e_max must be at least 1")
        if self.normalization not in NORMALIZATIONS:
            raise ParameterError(f"normalization must be one of {NORMALIZATIONS}")
        if self.termination not in TERMINATIONS:
            raise ParameterError(f"termination must be one of {TERMINATIONS}")


@dataclass
class ProbabilityMap:
    """Accumulated window scores plus per-voxel visit counts."""
    values: np.ndarray
    visits: np.ndarray
    n_steps: int = 0

    @classmethod
    def zeros(cls, dims):
        return cls(np.zeros(dims, dtype=np.float64), np.zeros(dims, dtype=np.int32), 0)

    def add_window(self, window: WindowSpec, score):
        sl = window.slices()
        self.values[sl] += score
        self.visits[sl] += 1
        self.n_steps += 1

    @property
    def shape(self):
        return self.values.shape


def run_segmentation(policy, scorer: WindowScorer, cfg: InferenceConfig, rng=None, prob_cache=None):
    """Roll the policy out from the centre window, accumulating scores.

    Every visited window adds its classifier score to all of its voxels.
    The rollout stops at the first window scoring above ``rho`` (or, with
    ``termination="accumulated"``, once the step-averaged map peaks above
    ``rho``) or after ``e_max`` windows.  Returns ``(map, log)`` where
    ``log`` holds one ``{t, corner, score}`` record per visited window.
    ``prob_cache`` (a dict) memoises action probabilities per window, which
    is safe because the policy runs in eval mode.
    """
    if rng is None:
        rng = np.random.default_rng(cfg.seed)
    case = scorer.case
    dims = case.volume.shape
    state = initial_state(case, cfg.extents, "centre")
    pmap = ProbabilityMap.zeros(dims)
    log = []
    for t in range(cfg.e_max):
        f = scorer.score(state.window)
        pmap.add_window(state.window, f)
        log.append({"t": t, "corner": list(state.window.corner), "score": f})
        if _should_stop(pmap, f, cfg):
            break
        if t == cfg.e_max - 1:
            break
        if policy is None:
            action = int(rng.integers(0, 6))
        else:
            probs = _action_probs(policy, case, state.window, prob_cache)
            action = int(np.argmax(probs)) if cfg.greedy else int(sample_from(probs, rng)[0])
        state = apply_action(state, action, dims, cfg.step)
    return pmap, log


def _action_probs(policy, case, window, cache):
    key = (case.id, window)
    if cache is not None and key in cache:
        return cache[key]
    probs = policy.distribution(observe(policy, case, [window]))[0]
    if cache is not None:
        cache[key] = probs
    return probs


def _should_stop(pmap, score, cfg):
    if cfg.termination == "single":
        return score > cfg.rho
    return pmap.values.max() / pmap.n_steps > cfg.rho


def replay_log(dims, extents, log):
    """Rebuild the accumulation map voxel by voxel from a trajectory log."""
    values = np.zeros(dims, dtype=np.float64)
    nx, ny, nz = dims
    for x in range(nx):
        for y in range(ny):
            for z in range(nz):
                acc = 0.0
                for rec in log:
                    a, b, c = rec["corner"]
                    if a <= x < a + extents[0] and b <= y < b + extents[1] and c <= z < c + extents[2]:
                        acc += rec["score"]
                values[x, y, z] = acc
    return values


def normalized_values(pmap: ProbabilityMap, normalization):
    """Return ``(values, warning)``; ``warning`` flags an all-zero map under max-normalisation."""
    v = pmap.values
    if normalization == "none":
        return v, False
    if normalization == "max":
        peak = v.max()
        if peak <= 0:
            return np.zeros_like(v), True
        return v / peak, False
    if normalization == "visit_count":
        out = np.zeros_like(v)
        seen = pmap.visits > 0
        out[seen] = v[seen] / pmap.visits[seen]
        return out, False
    if normalization == "steps":
        return (v / pmap.n_steps if pmap.n_steps else np.zeros_like(v)), False
    raise ParameterError(f"unknown normalization {normalization!r}")


def threshold_map(pmap: ProbabilityMap, cfg: InferenceConfig, threshold=None):
    """Binarise ``pmap`` (voxel >= threshold -> 1). Returns ``(mask, warning)``."""
    if not np.all(np.isfinite(pmap.values)):
        raise ParameterError("probability map contains non-finite values")
    thr = cfg.map_threshold if threshold is None else threshold
    values, warning = normalized_values(pmap, cfg.normalization)
    if warning:
        return np.zeros(values.shape, dtype=np.uint8), True
    return (values >= thr).astype(np.uint8), False


def _binary_pair(pred, truth):
    pred = np.asarray(pred).astype(bool)
    truth = np.asarray(truth).astype(bool)
    if pred.shape != truth.shape:
        raise ParameterError(f"prediction {pred.shape} and truth {truth.shape} differ in shape")
    return pred, truth


def dice(pred, truth):
    """2|P & T| / (|P| + |T|); 1.0 when both are empty."""
    pred, truth = _binary_pair(pred, truth)
    denom = pred.sum() + truth.sum()
    if denom == 0:
        return 1.0
    return float(2.0 * np.logical_and(pred, truth).sum() / denom)


def _iou(pred, truth):
    union = np.logical_or(pred, truth).sum()
    if union == 0:
        return 1.0
    return float(np.logical_and(pred, truth).sum() / union)


def miou(pred, truth):
    """Mean IoU over the tumour and non-tumour classes."""
    pred, truth = _binary_pair(pred, truth)
    return 0.5 * (_iou(pred, truth) + _iou(~pred, ~truth))


def roi_truth(mask):
    return np.asarray(mask) == 2


# -- exports ------------------------------------------------------------

def write_trajectory_log(path, log):
    with open(path, "w") as fh:
        for rec in log:
            fh.write(json.dumps({"t": rec["t"], "corner": rec["corner"], "score": rec["score"]}) + "\n")


def read_trajectory_log(path):
    with open(path) as fh:
        return [json.loads(line) for line in fh if line.strip()]


def export_segmentation(directory, case_id, pmap: ProbabilityMap, mask, log, pgm=False):
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    formats.write_probability_map(directory / f"{case_id}.spp", pmap.values.astype(np.float32))
    formats.write_mask(directory / f"{case_id}_seg.spm", mask.astype(np.uint8))
    write_trajectory_log(directory / f"{case_id}_trajectory.jsonl", log)
    if pgm:
        write_pgm_slices(directory / f"{case_id}_map", pmap.values)
        write_pgm_slices(directory / f"{case_id}_seg", mask)


def write_pgm_slices(prefix, array):
    """One plain-text (P2) PGM per z-slice, scaled to 0..255 by the array maximum."""
    arr = np.asarray(array, dtype=np.float64)
    peak = arr.max()
    scaled = np.zeros(arr.shape, dtype=int) if peak <= 0 else np.rint(255 * arr / peak).astype(int)
    nx, ny, nz = arr.shape
    paths = []
    for z in range(nz):
        p = Path(f"{prefix}_z{z:03d}.pgm")
        rows = [" ".join(str(v) for v in scaled[:, y, z]) for y in range(ny)]
        p.write_text(f"P2\n{nx} {ny}\n255\n" + "\n".join(rows) + "\n")
        paths.append(p)
    return paths
