"""Checkpoint adaptation and finetuning on new embodiments.

A pretrained multi-embodiment checkpoint carries everything a new walker
needs except an embodiment-specific exploration scale: actor, critic and
velocity-estimator weights transfer verbatim because every embodiment
speaks the same 32-slot action vocabulary and the same stacked frame
layout.  Adapting to a new robot therefore means re-shaping the per-
embodiment bookkeeping (log-std row, return EMAs) while leaving the
networks and the observation/descriptor statistics untouched.

Two training regimes share the machinery:

  S  train from scratch on the single target embodiment
  P  adapt a pretrained checkpoint, then finetune on the target

`compare_regimes` runs both arms over matched seeds and tabulates
deterministic evaluation results into one CSV.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np

from . import checkpoint as ckpt_io
from .eval_metrics import TooShort, rollout_episodes, tracking_errors
from .policy_net import LOG_STD_MAX, LOG_STD_MIN, N_SLOTS, PolicyConfig, PolicyParams
from .randomization import DRConfig
from .robot_model import RobotModel
from .trainer import (METRICS_HEADER, _STREAM_MINIBATCH, Adam, EnvGroup,
                      RunSetup, TrainerConfig, TrainState, load_policy,
                      pretrain, save_policy)
from .walker_sim import CommandConfig, RewardConfig, SimConfig

FINETUNE_LR = 1e-4
FINETUNE_SIGMA = 0.2


def adapt_checkpoint(path: str | Path, *, sigma_init: float = FINETUNE_SIGMA
                     ) -> tuple[PolicyParams, dict]:
    """Load a checkpoint and re-target it at a single new embodiment.

    Network weights and the observation/descriptor statistics are copied
    verbatim; the per-embodiment log-std block is replaced by one fresh
    row at ln(sigma_init).  Returns the adapted parameters plus the
    source checkpoint's config dict.  The file on disk is not touched.
    """
    config, tensors, _ = ckpt_io.load_checkpoint(path)
    p = config["policy"]
    pcfg = PolicyConfig(critic_mode=p["critic_mode"],
                        actor_hidden=tuple(p["actor_hidden"]),
                        estimator_hidden=tuple(p["estimator_hidden"]),
                        sigma_init=sigma_init,
                        descriptor_dim=p["descriptor_dim"],
                        dtype=p["dtype"])
    params = PolicyParams(1, pcfg, None)
    # load_tensors would reject the source's (n_emb, 32) log-std block,
    # so wire each piece individually and build the fresh row here
    params.actor.load_named("actor", tensors)
    params.critic.load_named("critic", tensors)
    params.estimator.load_named("estimator", tensors)
    params.obs_norm.mean = np.asarray(tensors["obs_norm.mean"], np.float64)
    params.obs_norm.m2 = np.asarray(tensors["obs_norm.m2"], np.float64)
    params.obs_norm.count = float(tensors["obs_norm.count"][0])
    params.ze_mean = np.asarray(tensors["ze.mean"], np.float64)
    params.ze_std = np.asarray(tensors["ze.std"], np.float64)
    init = float(np.clip(math.log(sigma_init), LOG_STD_MIN, LOG_STD_MAX))
    params.log_std = np.full((1, N_SLOTS), init)
    return params, config


def _single_setup(model: RobotModel, name: str, trainer: TrainerConfig,
                  dr: DRConfig, reward: RewardConfig, sim: SimConfig,
                  command: CommandConfig, snapshot: dict) -> RunSetup:
    return RunSetup(models=[(name, model)], trainer=trainer, dr=dr,
                    reward=reward, sim=sim, command=command,
                    snapshot=snapshot)


def finetune(pretrained: str | Path, model: RobotModel, name: str,
             seed: int, out_dir: str | Path, *, epochs: int,
             sigma_init: float = FINETUNE_SIGMA,
             trainer: TrainerConfig | None = None,
             dr: DRConfig | None = None,
             reward: RewardConfig | None = None,
             sim: SimConfig | None = None,
             command: CommandConfig | None = None,
             threads: int = 1, log_every: int = 0) -> Path:
    """Adapt a pretrained checkpoint to one embodiment and train on it.

    epochs=0 skips training entirely and just writes the adapted
    checkpoint (plus an empty metrics file), which is how zero-shot
    evaluation artifacts are produced.  Returns the checkpoint path.
    """
    if epochs < 0:
        raise ValueError(f"epochs must be >= 0, got {epochs}")
    if trainer is None:
        trainer = TrainerConfig(lr=FINETUNE_LR)
    trainer = replace(trainer, epochs=epochs, sigma_init=sigma_init)
    dr = dr if dr is not None else DRConfig()
    reward = reward if reward is not None else RewardConfig()
    sim = sim if sim is not None else SimConfig()
    command = command if command is not None else CommandConfig()

    params, src_cfg = adapt_checkpoint(pretrained, sigma_init=sigma_init)
    snapshot = {"regime": "P", "source_epoch": src_cfg["epoch"],
                "source_embodiments": src_cfg["embodiments"],
                "finetune_epochs": epochs}
    setup = _single_setup(model, name, trainer, dr, reward, sim, command,
                          snapshot)
    state = TrainState(
        params=params, adam=Adam(), lr=trainer.lr,
        rng=np.random.Generator(
            np.random.Philox(key=[abs(int(seed)), _STREAM_MINIBATCH])),
        R=np.zeros(1), ep_len=np.zeros(1), w=np.ones(1))

    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    if epochs == 0:
        with open(out / "metrics.csv", "w", newline="") as fh:
            csv.writer(fh).writerow(METRICS_HEADER)
        final = out / "policy.ckpt"
        save_policy(final, setup, state, seed)
        return final
    groups = [EnvGroup(0, name, model, trainer.n_envs, seed, 0, setup)]
    return pretrain(setup, seed, out, threads=threads, log_every=log_every,
                    state=state, groups=groups)


def scratch_run(model: RobotModel, name: str, seed: int,
                out_dir: str | Path, *, epochs: int,
                trainer: TrainerConfig | None = None,
                dr: DRConfig | None = None,
                reward: RewardConfig | None = None,
                sim: SimConfig | None = None,
                command: CommandConfig | None = None,
                threads: int = 1, log_every: int = 0) -> Path:
    """Train a fresh policy on a single embodiment (the S regime)."""
    if trainer is None:
        trainer = TrainerConfig()
    trainer = replace(trainer, epochs=epochs)
    setup = _single_setup(
        model, name, trainer,
        dr if dr is not None else DRConfig(),
        reward if reward is not None else RewardConfig(),
        sim if sim is not None else SimConfig(),
        command if command is not None else CommandConfig(),
        {"regime": "S", "epochs": epochs})
    return pretrain(setup, seed, out_dir, threads=threads,
                    log_every=log_every)


@dataclass
class CompareConfig:
    """Settings for the scratch-vs-finetune comparison table."""
    seeds: tuple[int, ...] = (0, 1, 2)
    scratch_epochs: int = 1000
    finetune_epochs: tuple[int, ...] = (0, 250, 500)
    sigma_init: float = FINETUNE_SIGMA
    eval_episodes: int = 4
    eval_envs: int = 16
    command_scale: float = 0.6


COMPARE_HEADER = ["robot", "regime", "epochs", "return_mean", "return_std",
                  "Evx", "Evy", "Epsi"]


def _eval_records(ckpt: Path, model: RobotModel, name: str, seed: int,
                  cfg: CompareConfig, sim: SimConfig, reward: RewardConfig,
                  command: CommandConfig) -> list:
    params, config = load_policy(ckpt)
    return rollout_episodes(
        params, model, name, episodes=cfg.eval_episodes,
        n_envs=cfg.eval_envs, seed=seed, command_scale=cfg.command_scale,
        dr=None, sim=sim, reward=reward, cmd=command,
        mask=config["mask"], action_scale=config["action_scale"],
        stochastic=False, emb_id=0)


def compare_regimes(pretrained: str | Path, model: RobotModel, name: str,
                    out_dir: str | Path, cfg: CompareConfig = CompareConfig(),
                    *, trainer: TrainerConfig | None = None,
                    dr: DRConfig | None = None,
                    reward: RewardConfig | None = None,
                    sim: SimConfig | None = None,
                    command: CommandConfig | None = None,
                    threads: int = 1, log_every: int = 0) -> Path:
    """Run matched scratch and finetune arms, tabulate evaluations.

    Every arm is trained and evaluated once per seed in cfg.seeds; the S
    and P arms of a seed share it, so their environment streams pair up.
    Writes compare.csv under out_dir and returns its path.
    """
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    sim_ = sim if sim is not None else SimConfig()
    reward_ = reward if reward is not None else RewardConfig()
    command_ = command if command is not None else CommandConfig()

    pooled: dict[tuple[str, int], list] = {}
    for seed in cfg.seeds:
        ck = scratch_run(model, name, seed, out / f"S_{seed}",
                         epochs=cfg.scratch_epochs, trainer=trainer, dr=dr,
                         reward=reward, sim=sim, command=command,
                         threads=threads, log_every=log_every)
        pooled.setdefault(("S", cfg.scratch_epochs), []).extend(
            _eval_records(ck, model, name, seed, cfg, sim_, reward_, command_))
        for ep in cfg.finetune_epochs:
            ck = finetune(pretrained, model, name, seed, out / f"P_{ep}_{seed}",
                          epochs=ep, sigma_init=cfg.sigma_init,
                          trainer=trainer, dr=dr, reward=reward, sim=sim,
                          command=command, threads=threads,
                          log_every=log_every)
            pooled.setdefault(("P", ep), []).extend(
                _eval_records(ck, model, name, seed, cfg, sim_, reward_,
                              command_))

    path = out / "compare.csv"
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(COMPARE_HEADER)
        for (regime, epochs), records in sorted(pooled.items()):
            rets = np.array([r.ep_return for r in records])
            errs = []
            for r in records:
                try:
                    errs.append(tracking_errors(r.actual, r.commands))
                except TooShort:
                    pass
            evx, evy, epsi = (np.mean(errs, axis=0) if errs
                              else (math.nan,) * 3)
            writer.writerow([name, regime, epochs,
                             f"{rets.mean():.6f}", f"{rets.std():.6f}",
                             f"{evx:.6f}", f"{evy:.6f}", f"{epsi:.6f}"])
    return path
