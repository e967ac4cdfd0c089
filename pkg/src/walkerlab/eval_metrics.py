"""Evaluation metrics and trajectory feature export.

Policies are evaluated deterministically (mean actions, randomization off,
commands drawn from a reduced range) so two runs with the same seed agree
bit for bit; the stochastic path exists only for collecting feature-export
trajectories that should look like the training distribution.

Planar note: the world has no lateral axis, so the measured v_y is
identically zero and the yaw-rate slot reports the pitch rate.  Both keep
their columns so reports stay schema-compatible with spatial setups.
"""
from __future__ import annotations

import csv
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .policy_net import (PolicyParams, estimate_base_velocity, forward_actor)
from .randomization import DRConfig
from .unified_space import MASK_PRESETS, N_SLOTS, apply_mask
from .walker_sim import (FRAME_DIM, FRAME_SLICES, BatchedWalkerEnv,
                         CommandConfig, RewardConfig, SimConfig)
from .robot_model import RobotModel

_STREAM_EVAL = 9000

# State-only feature columns: the frame minus command and previous action.
_drop = np.zeros(FRAME_DIM, bool)
_drop[FRAME_SLICES["command"]] = True
_drop[FRAME_SLICES["prev_action"]] = True
STATE_FEATURE_IDX = np.nonzero(~_drop)[0]
del _drop
FEATURE_WINDOW = 5
FEATURE_DIM = FEATURE_WINDOW * len(STATE_FEATURE_IDX)


class TooShort(ValueError):
    """Trajectory has too few steps for the warmup-excluding metrics."""


def normalized_episode_length(executed_steps: int, episode_limit: int) -> float:
    """Executed control steps over the episode limit, in [0, 1]."""
    if episode_limit <= 0:
        raise ValueError(f"episode_limit must be positive, got {episode_limit}")
    if not 0 <= executed_steps <= episode_limit:
        raise ValueError(
            f"executed_steps {executed_steps} outside [0, {episode_limit}]")
    return executed_steps / episode_limit


WARMUP_STEPS = 50


def tracking_errors(actual: np.ndarray, commands: np.ndarray
                    ) -> tuple[float, float, float]:
    """Mean absolute command-tracking errors, excluding the first 50 steps.

    actual, commands: (T, 3) velocity triples (vx, vy, psi_rate) in SI.
    Returns (E_vx, E_vy, E_psi) in cm/s, cm/s, deg/s.
    """
    actual = np.asarray(actual, dtype=np.float64)
    commands = np.broadcast_to(np.asarray(commands, dtype=np.float64),
                               actual.shape)
    if actual.ndim != 2 or actual.shape[1] != 3:
        raise ValueError(f"expected (T, 3) velocities, got {actual.shape}")
    if actual.shape[0] <= WARMUP_STEPS:
        raise TooShort(
            f"need more than {WARMUP_STEPS} steps, got {actual.shape[0]}")
    err = np.abs(actual[WARMUP_STEPS:] - commands[WARMUP_STEPS:]).mean(axis=0)
    return (float(err[0] * 100.0), float(err[1] * 100.0),
            float(err[2] * 180.0 / math.pi))


@dataclass
class EpisodeRecord:
    embodiment: str
    dr_mult: int
    steps: int
    ep_return: float
    reason: str
    actual: np.ndarray           # (T, 3) measured (vx, 0, pitch_rate)
    commands: np.ndarray         # (T, 3) command held at each step
    frames: np.ndarray | None    # (T, FRAME_DIM) pre-step frames, if kept

    @property
    def successful(self) -> bool:
        return self.reason == "timeout"


def rollout_episodes(params: PolicyParams, model: RobotModel, name: str, *,
                     episodes: int = 4, n_envs: int = 16, seed: int = 0,
                     command_scale: float = 1.0,
                     dr: DRConfig | None = None,
                     sim: SimConfig = SimConfig(),
                     reward: RewardConfig | None = None,
                     cmd: CommandConfig = CommandConfig(),
                     mask: str = "legs12", action_scale: float = 0.5,
                     stochastic: bool = False, emb_id: int = 0,
                     keep_frames: bool = False) -> list[EpisodeRecord]:
    """Run `episodes` complete episodes in each of `n_envs` envs.

    Observation flow mirrors training collection exactly (5-frame history,
    estimator velocity fed back into the next frame) so evaluation sees the
    policy's training-time input distribution.
    """
    if dr is None:
        dr = DRConfig(enabled=False)
    dr_mult = int(dr.multiplier) if dr.enabled else 0
    env = BatchedWalkerEnv(model, n_envs, seed=seed, sim_cfg=sim, dr_cfg=dr,
                           reward_cfg=reward, cmd_cfg=cmd, mask=mask,
                           action_scale=action_scale)
    env.set_curriculum(command_scale)
    env.reset_indices(np.arange(n_envs))
    mask_arr = MASK_PRESETS[mask]
    rng = np.random.Generator(
        np.random.Philox(key=[abs(int(seed)), _STREAM_EVAL]))

    history = np.zeros((n_envs, 5, FRAME_DIM), np.float32)
    history[:] = env.frames(np.zeros((n_envs, 2)))[:, None, :]
    observable = params.cfg.critic_mode == "observable"

    done_quota = np.zeros(n_envs, dtype=np.int64)
    bufs = [{"actual": [], "cmd": [], "frames": []} for _ in range(n_envs)]
    records: list[EpisodeRecord] = []

    while (done_quota < episodes).any():
        stack = history.reshape(n_envs, -1)
        mean, sigma = forward_actor(params, stack, emb_id,
                                    env.ze if observable else None)
        est = estimate_base_velocity(params, stack)
        if stochastic:
            eps = rng.standard_normal((n_envs, N_SLOTS))
            act = apply_mask(mean + sigma * eps, mask_arr)
        else:
            act = apply_mask(mean, mask_arr)

        cmd_now = env.command.copy()
        live = done_quota < episodes
        if keep_frames:
            cur_frames = history[:, -1].copy()
        out = env.step(act, est)

        for i in np.nonzero(live)[0]:
            b = bufs[i]
            b["actual"].append((out["gt_v"][i, 0], 0.0, out["gt_pr"][i]))
            b["cmd"].append(cmd_now[i])
            if keep_frames:
                b["frames"].append(cur_frames[i])
        for (i, ret, steps, reason) in out["completions"]:
            if not live[i]:
                continue
            b = bufs[i]
            records.append(EpisodeRecord(
                embodiment=name, dr_mult=dr_mult, steps=steps,
                ep_return=ret, reason=reason,
                actual=np.array(b["actual"]),
                commands=np.array(b["cmd"]),
                frames=np.array(b["frames"], np.float64) if keep_frames else None))
            bufs[i] = {"actual": [], "cmd": [], "frames": []}
            done_quota[i] += 1

        nf = out["frame"]
        history[:, :-1] = history[:, 1:]
        history[:, -1] = nf
        if out["done"].any():
            history[out["done"]] = nf[out["done"], None, :]
    return records


def _mean_std(xs) -> dict:
    if len(xs) == 0:
        return {"mean": None, "std": None}
    a = np.asarray(xs, dtype=np.float64)
    return {"mean": float(a.mean()), "std": float(a.std())}


def evaluate(params: PolicyParams, model: RobotModel, name: str, *,
             episodes: int = 4, n_envs: int = 16, seed: int = 0,
             command_scale: float = 0.6,
             sim: SimConfig = SimConfig(),
             reward: RewardConfig | None = None,
             cmd: CommandConfig = CommandConfig(),
             mask: str = "legs12", action_scale: float = 0.5) -> dict:
    """Deterministic evaluation: randomization off, reduced command range.

    Returns a summary dict; tracking errors average only episodes that
    survive the warmup window.
    """
    records = rollout_episodes(
        params, model, name, episodes=episodes, n_envs=n_envs, seed=seed,
        command_scale=command_scale, dr=DRConfig(enabled=False), sim=sim,
        reward=reward, cmd=cmd, mask=mask, action_scale=action_scale,
        stochastic=False)
    lens = [normalized_episode_length(r.steps, sim.episode_limit)
            for r in records]
    rets = [r.ep_return for r in records]
    evx, evy, epsi = [], [], []
    for r in records:
        if r.steps > WARMUP_STEPS:
            ex, ey, ep = tracking_errors(r.actual, r.commands)
            evx.append(ex)
            evy.append(ey)
            epsi.append(ep)
    return {
        "robot": name,
        "episodes": len(records),
        "ep_len_norm": _mean_std(lens),
        "return": _mean_std(rets),
        "Evx": _mean_std(evx),
        "Evy": _mean_std(evy),
        "Epsi": _mean_std(epsi),
    }


def export_rollout_features(records: list[EpisodeRecord], out: str | Path,
                            stride: int = FEATURE_WINDOW) -> int:
    """Write 5-step state windows of successful episodes as CSV rows.

    Each row: embodiment, dr_mult, then the window's state features
    flattened time-major.  stride defaults to the window length
    (non-overlapping); stride 1 gives every window.  Returns rows written.
    """
    if stride < 1:
        raise ValueError(f"stride must be >= 1, got {stride}")
    out = Path(out)
    n_rows = 0
    with open(out, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["embodiment", "dr_mult"]
                        + [f"f{i}" for i in range(FEATURE_DIM)])
        for r in records:
            if not r.successful or r.frames is None:
                continue
            feats = r.frames[:, STATE_FEATURE_IDX]
            for t in range(0, len(feats) - FEATURE_WINDOW + 1, stride):
                row = feats[t:t + FEATURE_WINDOW].reshape(-1)
                writer.writerow([r.embodiment, r.dr_mult]
                                + [f"{v:.9g}" for v in row])
                n_rows += 1
    return n_rows
