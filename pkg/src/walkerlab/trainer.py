"""Multi-embodiment PPO with return-based loss reweighting.

Each embodiment owns a vectorized env and a learned exploration log-std;
transitions pool into one clipped-surrogate update where embodiment i's
mean loss is scaled by w_i = 1 - (R_i - R_min)/(R_max - R_min + eps) over
running returns, so laggards get gradient emphasis.  The learning rate
adapts to the measured per-minibatch KL.  Everything runs on numpy; the
backward passes live in policy_net.
"""
from __future__ import annotations

import csv
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import checkpoint as ckpt_io
from .descriptors import DESCRIPTOR_DIM, compute_descriptor, fit_standardizer
from .policy_net import (HISTORY, LOG_STD_MAX, LOG_STD_MIN, STACK_DIM,
                         PolicyConfig, PolicyParams, forward_critic,
                         sample_action)
from .randomization import DRConfig, materialize, sample_variant
from .robot_model import RobotModel
from .unified_space import MASK_PRESETS, N_SLOTS, build_mapping
from .walker_sim import (FRAME_DIM, BatchedWalkerEnv, CommandConfig,
                         RewardConfig, SimConfig)

# Philox stream ids; env streams use small uid offsets so these stay clear.
_STREAM_MINIBATCH = 1 << 20
_STREAM_ACTION = 1 << 21
_STREAM_STANDARDIZER = 1 << 22
_STREAM_INIT = 1 << 23


class NonFiniteLoss(Exception):
    pass


class TrainingFault(Exception):
    """Raised after repeated non-finite updates; maps to exit code 3."""


@dataclass
class TrainerConfig:
    n_envs: int = 256
    epochs: int = 2000
    horizon: int = 24
    gamma: float = 0.99
    lam: float = 0.95
    clip: float = 0.2
    lr: float = 3e-4
    lr_min: float = 1e-5
    lr_max: float = 1e-2
    kl_target: float = 0.01
    update_epochs: int = 4
    minibatches: int = 4
    value_coef: float = 0.5
    entropy_coef: float = 0.005
    estimator_coef: float = 1.0
    max_grad_norm: float = 0.5
    ema_decay: float = 0.99
    weight_floor: float = 0.0
    curriculum_ramp_frac: float = 0.3
    checkpoint_every: int = 500
    sigma_init: float = 0.8
    critic_mode: str = "privileged"
    mask: str = "legs12"
    action_scale: float = 0.5
    standardizer_samples: int = 64
    max_consecutive_faults: int = 5


@dataclass
class RunSetup:
    """Everything a training run needs, already materialized."""
    models: list[tuple[str, RobotModel]]
    trainer: TrainerConfig = field(default_factory=TrainerConfig)
    dr: DRConfig = field(default_factory=DRConfig)
    reward: RewardConfig = field(default_factory=RewardConfig)
    sim: SimConfig = field(default_factory=SimConfig)
    command: CommandConfig = field(default_factory=CommandConfig)
    snapshot: dict = field(default_factory=dict)


class EnvGroup:
    """One embodiment's envs plus its rollout bookkeeping."""

    def __init__(self, emb_id: int, name: str, model: RobotModel,
                 n_envs: int, seed: int, uid_offset: int, setup: RunSetup):
        t = setup.trainer
        self.emb_id = emb_id
        self.name = name
        self.model = model
        self.env = BatchedWalkerEnv(
            model, n_envs, seed=seed, sim_cfg=setup.sim, dr_cfg=setup.dr,
            reward_cfg=setup.reward, cmd_cfg=setup.command, mask=t.mask,
            action_scale=t.action_scale, env_uid_offset=uid_offset)
        self.rng = np.random.Generator(
            np.random.Philox(key=[abs(int(seed)), _STREAM_ACTION + emb_id]))
        self.history = np.zeros((n_envs, HISTORY, FRAME_DIM), np.float32)
        self.cur_gt = np.zeros((n_envs, 2))
        f = self.env.frames(np.zeros((n_envs, 2)))
        self.history[:] = f[:, None, :]

    def stack(self) -> np.ndarray:
        return self.history.reshape(self.env.B, STACK_DIM)


@dataclass
class GroupRollout:
    emb_id: int
    obs: np.ndarray        # (T, B, STACK_DIM) float32, pre-normalization
    ze: np.ndarray         # (T, B, DESCRIPTOR_DIM) float32, raw
    action: np.ndarray     # (T, B, N_SLOTS)
    logp: np.ndarray       # (T, B)
    reward: np.ndarray     # (T, B)
    done: np.ndarray       # (T, B) bool
    gt_v: np.ndarray       # (T, B, 2)
    est_v: np.ndarray      # (T, B, 2) estimator output at collection params
    final_obs: np.ndarray  # (B, STACK_DIM)
    final_ze: np.ndarray   # (B, DESCRIPTOR_DIM)
    completions: list      # (emb_id, episode_return, steps, reason)


@dataclass
class RolloutBatch:
    groups: list[GroupRollout]

    @property
    def n_transitions(self) -> int:
        return sum(g.obs.shape[0] * g.obs.shape[1] for g in self.groups)


class Adam:
    def __init__(self, beta1: float = 0.9, beta2: float = 0.999,
                 eps: float = 1e-8):
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.m: dict[str, np.ndarray] = {}
        self.v: dict[str, np.ndarray] = {}
        self.t = 0
        # per-tensor scratch; not optimizer state, so snapshot/restore skip it
        self._s1: dict[str, np.ndarray] = {}
        self._s2: dict[str, np.ndarray] = {}

    def step(self, named_params: list[tuple[str, np.ndarray]],
             grads: dict[str, np.ndarray], lr: float):
        self.t += 1
        c1 = 1.0 - self.beta1 ** self.t
        c2 = 1.0 - self.beta2 ** self.t
        for name, p in named_params:
            g = grads[name]
            m = self.m.get(name)
            if m is None:
                m = self.m[name] = np.zeros_like(p)
                self.v[name] = np.zeros_like(p)
            v = self.v[name]
            s1 = self._s1.get(name)
            if s1 is None:
                s1 = self._s1[name] = np.empty_like(p)
                self._s2[name] = np.empty_like(p)
            s2 = self._s2[name]
            np.subtract(g, m, out=s1, casting="unsafe")
            s1 *= 1.0 - self.beta1
            m += s1
            np.multiply(g, g, out=s1, casting="unsafe")
            s1 -= v
            s1 *= 1.0 - self.beta2
            v += s1
            np.divide(v, c2, out=s2)
            np.sqrt(s2, out=s2)
            s2 += self.eps
            np.divide(m, c1, out=s1)
            s1 *= lr
            s1 /= s2
            p -= s1

    def snapshot(self):
        return ({k: a.copy() for k, a in self.m.items()},
                {k: a.copy() for k, a in self.v.items()}, self.t)

    def restore(self, snap):
        m, v, t = snap
        self.m = {k: a.copy() for k, a in m.items()}
        self.v = {k: a.copy() for k, a in v.items()}
        self.t = t


@dataclass
class TrainState:
    params: PolicyParams
    adam: Adam
    rng: np.random.Generator
    epoch: int = 0
    curriculum: float = 0.5
    lr: float = 3e-4
    R: np.ndarray = field(default_factory=lambda: np.zeros(1))
    ep_len: np.ndarray = field(default_factory=lambda: np.zeros(1))
    w: np.ndarray = field(default_factory=lambda: np.ones(1))


def compute_embodiment_weights(R, eps: float = 1e-8,
                               floor: float = 0.0) -> np.ndarray:
    R = np.asarray(R, np.float64)
    w = 1.0 - (R - R.min()) / (R.max() - R.min() + eps)
    return np.maximum(w, floor)


def advance_curriculum(epoch: int, cfg: TrainerConfig) -> float:
    ramp = max(1, int(round(cfg.epochs * cfg.curriculum_ramp_frac)))
    return min(1.0, 0.5 + 0.5 * epoch / ramp)


def collect_rollouts(state: TrainState, groups: list[EnvGroup],
                     horizon: int, mask: np.ndarray,
                     threads: int = 1) -> RolloutBatch:
    """Lockstep collection across embodiment groups.

    Each control step runs one pooled actor/estimator forward over every
    group's observations, then advances each group's physics (in worker
    threads when asked).  Sampling stays on per-group streams and the
    pooled forward is identical for any thread count, so the result does
    not depend on `threads`.
    """
    params = state.params
    observable = params.cfg.critic_mode == "observable"
    n = len(groups)
    bnd = np.cumsum([0] + [g.env.B for g in groups])
    rows = [slice(int(bnd[i]), int(bnd[i + 1])) for i in range(n)]

    obs = [np.empty((horizon, g.env.B, STACK_DIM), np.float32) for g in groups]
    ze = [np.empty((horizon, g.env.B, DESCRIPTOR_DIM), np.float32) for g in groups]
    action = [np.empty((horizon, g.env.B, N_SLOTS)) for g in groups]
    logp = [np.empty((horizon, g.env.B)) for g in groups]
    reward = [np.empty((horizon, g.env.B)) for g in groups]
    done = [np.zeros((horizon, g.env.B), bool) for g in groups]
    gt_v = [np.empty((horizon, g.env.B, 2)) for g in groups]
    est_v = [np.empty((horizon, g.env.B, 2)) for g in groups]
    completions: list[list] = [[] for _ in groups]

    pool = (ThreadPoolExecutor(max_workers=min(threads, n))
            if threads > 1 and n > 1 else None)
    try:
        for t in range(horizon):
            stacks = np.concatenate([g.stack() for g in groups])
            if not np.isfinite(stacks).all():
                raise ValueError("non-finite observation")
            sn = params.normalize_stack(stacks)
            if observable:
                zn = params.standardize_ze_f32(
                    np.concatenate([g.env.ze for g in groups]))
                a_in = np.concatenate([sn, zn], axis=1)
            else:
                a_in = sn
            mean_all = params.actor(a_in)
            est_all = params.estimator(sn)

            steps = []
            for i, g in enumerate(groups):
                r = rows[i]
                obs[i][t] = stacks[r]
                ze[i][t] = g.env.ze
                gt_v[i][t] = g.cur_gt
                est_v[i][t] = est_all[r]
                sigma = np.exp(params.log_std[g.emb_id])
                a, lp = sample_action(mean_all[r], sigma, mask, g.rng)
                action[i][t] = a
                logp[i][t] = lp
                steps.append((g, a, est_all[r]))
            if pool is not None:
                outs = list(pool.map(lambda s: s[0].env.step(s[1], s[2]), steps))
            else:
                outs = [g.env.step(a, e) for (g, a, e) in steps]
            for i, (g, out) in enumerate(zip(groups, outs)):
                reward[i][t] = out["reward"]
                done[i][t] = out["done"]
                completions[i] += [(g.emb_id, ret, nstep, reason)
                                   for (_, ret, nstep, reason) in out["completions"]]
                # ground-truth pairs with the *next* stack; reset velocities are zero
                g.cur_gt = np.where(out["done"][:, None], 0.0, out["gt_v"])
                nf = out["frame"]
                g.history[:, :-1] = g.history[:, 1:]
                g.history[:, -1] = nf
                if out["done"].any():
                    g.history[out["done"]] = nf[out["done"], None, :]
    finally:
        if pool is not None:
            pool.shutdown()
    return RolloutBatch([
        GroupRollout(g.emb_id, obs[i], ze[i], action[i], logp[i], reward[i],
                     done[i], gt_v[i], est_v[i], g.stack().copy(),
                     g.env.ze.copy(), completions[i])
        for i, g in enumerate(groups)])


def compute_gae(batch: RolloutBatch, params: PolicyParams,
                gamma: float = 0.99, lam: float = 0.95
                ) -> tuple[list[np.ndarray], list[np.ndarray], list[np.ndarray]]:
    """Per-group normalized advantages, value targets, and values.

    Bootstrapping truncates at dones; advantages are normalized to zero
    mean / unit std within each embodiment group.
    """
    needs_ze = params.cfg.critic_mode != "none"
    obs_all = np.concatenate(
        [np.concatenate([g.obs.reshape(-1, g.obs.shape[-1]), g.final_obs])
         for g in batch.groups])
    ze_all = None
    if needs_ze:
        ze_all = np.concatenate(
            [np.concatenate([g.ze.reshape(-1, g.ze.shape[-1]), g.final_ze])
             for g in batch.groups])
    v_all = forward_critic(params, obs_all, ze_all).astype(np.float64)

    advs, targets, values = [], [], []
    off = 0
    for g in batch.groups:
        T, B = g.reward.shape
        v = v_all[off:off + (T + 1) * B].reshape(T + 1, B)
        off += (T + 1) * B
        adv = np.zeros((T, B))
        last = np.zeros(B)
        for t in reversed(range(T)):
            nonterm = 1.0 - g.done[t]
            delta = g.reward[t] + gamma * v[t + 1] * nonterm - v[t]
            last = delta + gamma * lam * nonterm * last
            adv[t] = last
        targets.append(adv + v[:T])
        values.append(v[:T])
        advs.append((adv - adv.mean()) / (adv.std() + 1e-8))
    return advs, targets, values


def _net_grads(prefix: str, per_layer, out: dict):
    for i, (dw, db) in enumerate(per_layer):
        out[f"{prefix}.w{i}"] = dw
        out[f"{prefix}.b{i}"] = db


def _clip_grads(grads: dict, max_norm: float) -> float:
    """Global-norm clip.  Returns the pre-clip norm; NaN or inf in any
    gradient surfaces here as a non-finite norm, so callers get the
    blow-up check for free instead of re-scanning every array."""
    sq = 0.0
    for g in grads.values():
        r = g.ravel()
        sq += float(np.dot(r, r))
    norm = math.sqrt(sq) if sq >= 0.0 else float("nan")
    if math.isfinite(norm) and norm > max_norm:
        scale = max_norm / (norm + 1e-12)
        for g in grads.values():
            g *= scale
    return norm


def _per_sample_loss(cfg: TrainerConfig, logp_new, logp_old, adv, value,
                     vtarget, est, gt, log_std_rows, mask) -> np.ndarray:
    ratio = np.exp(logp_new - logp_old)
    u = ratio * adv
    c = np.clip(ratio, 1.0 - cfg.clip, 1.0 + cfg.clip) * adv
    surr = -np.minimum(u, c)
    vloss = cfg.value_coef * (value - vtarget) ** 2
    eloss = cfg.estimator_coef * ((est - gt) ** 2).sum(axis=-1)
    ent = (np.where(mask, 0.5 * (1.0 + math.log(2 * math.pi)) + log_std_rows,
                    0.0)).sum(axis=-1)
    return surr + vloss + eloss - cfg.entropy_coef * ent


def update(state: TrainState, batch: RolloutBatch, advs, targets, values,
           mask: np.ndarray, cfg: TrainerConfig,
           emb_names: list[str] | None = None) -> dict:
    params = state.params
    dt = params.actor.dtype
    needs_ze = params.cfg.critic_mode != "none"
    observable = params.cfg.critic_mode == "observable"

    obs_n, ze_s, act, logp_old = [], [], [], []
    adv, vt, val0, gt, est0, emb = [], [], [], [], [], []
    for g, a, v, vv in zip(batch.groups, advs, targets, values):
        T, B = g.reward.shape
        obs_n.append(params.normalize_stack(g.obs.reshape(T * B, -1)))
        if needs_ze:
            zrows = (params.standardize_ze_f32(g.ze.reshape(T * B, -1))
                     if dt == np.float32 else
                     params.standardize_ze(g.ze.reshape(T * B, -1)).astype(dt))
            ze_s.append(zrows)
        act.append(g.action.reshape(T * B, -1))
        logp_old.append(g.logp.reshape(T * B))
        adv.append(a.reshape(T * B))
        vt.append(v.reshape(T * B))
        val0.append(vv.reshape(T * B))
        gt.append(g.gt_v.reshape(T * B, -1))
        est0.append(g.est_v.reshape(T * B, -1))
        emb.append(np.full(T * B, g.emb_id, np.int64))
    obs_n = np.concatenate(obs_n).astype(dt, copy=False)
    ze_s = np.concatenate(ze_s) if needs_ze else None
    act = np.concatenate(act)
    logp_old = np.concatenate(logp_old)
    adv = np.concatenate(adv)
    vt = np.concatenate(vt)
    val0 = np.concatenate(val0)
    gt = np.concatenate(gt)
    est0 = np.concatenate(est0)
    emb = np.concatenate(emb)
    n_total = obs_n.shape[0]
    n_emb = params.n_embodiments
    n_per = np.bincount(emb, minlength=n_emb).astype(np.float64)
    coef_emb = state.w / np.maximum(n_per, 1.0)

    actor_in = np.concatenate([obs_n, ze_s], axis=1) if observable else obs_n
    critic_in = np.concatenate([obs_n, ze_s], axis=1) if needs_ze else obs_n

    # pre-update loss report at the collection policy: the ratio is exactly
    # 1 there, so no extra forward pass is needed
    ls_rows = params.log_std[emb]
    l_each = _per_sample_loss(cfg, logp_old, logp_old, adv, val0, vt, est0,
                              gt, ls_rows, mask)
    L_emb = np.array([l_each[emb == i].mean() if n_per[i] else 0.0
                      for i in range(n_emb)])
    L_total = float((state.w * L_emb).sum())

    snap = (params.copy(), state.adam.snapshot())
    kl_last = 0.0
    kl_final_pass: list[float] = []
    # the elementwise chain runs on the active columns only; masked-out
    # slots have zero action, zero log-prob share, and zero gradient
    cols = np.flatnonzero(mask)
    act_m = np.ascontiguousarray(act[:, cols])
    half_lc = 0.5 * math.log(2.0 * math.pi)
    trainables = params.trainable()

    for pass_i in range(cfg.update_epochs):
        perm = state.rng.permutation(n_total)
        for mb in np.array_split(perm, cfg.minibatches):
            m = mb.size
            embm = emb[mb]
            x = obs_n[mb]
            mean, acache = params.actor.forward(
                actor_in[mb] if observable else x)
            val, ccache = params.critic.forward(critic_in[mb])
            est, ecache = params.estimator.forward(x)
            mean_m = mean[:, cols].astype(np.float64)
            val64 = val[:, 0].astype(np.float64)
            est64 = est.astype(np.float64)
            ls_m = params.log_std[:, cols][embm]
            sig2 = np.exp(2.0 * ls_m)
            diff = act_m[mb] - mean_m
            zsig = diff / np.exp(ls_m)
            lp_new = (-0.5 * zsig * zsig - ls_m - half_lc).sum(axis=-1)
            ratio = np.exp(lp_new - logp_old[mb])
            u = ratio * adv[mb]
            cl = np.clip(ratio, 1.0 - cfg.clip, 1.0 + cfg.clip) * adv[mb]
            active = (u <= cl).astype(np.float64)
            coef = (n_total / m) * coef_emb[embm]

            # d(loss)/d(logp_new), then chain into mean and log_std
            cd = coef * (-adv[mb] * ratio * active)
            zn = diff / sig2
            dout_a = np.zeros((m, mean.shape[1]), dt)
            dout_a[:, cols] = cd[:, None] * zn
            dls = cd[:, None] * (diff * zn - 1.0) \
                - (coef * cfg.entropy_coef)[:, None]
            g_ls = np.zeros_like(params.log_std)
            for i in range(n_emb):
                sel = embm == i
                if sel.any():
                    g_ls[i, cols] = dls[sel].sum(axis=0)

            dout_c = (coef * 2.0 * cfg.value_coef * (val64 - vt[mb]))[:, None]
            dout_e = (coef[:, None] * 2.0 * cfg.estimator_coef
                      * (est64 - gt[mb]))

            grads: dict[str, np.ndarray] = {"log_std": g_ls}
            ga, _ = params.actor.backward(acache, dout_a)
            gc, _ = params.critic.backward(ccache, dout_c.astype(dt))
            ge, _ = params.estimator.backward(ecache, dout_e.astype(dt))
            _net_grads("actor", ga, grads)
            _net_grads("critic", gc, grads)
            _net_grads("estimator", ge, grads)

            norm = _clip_grads(grads, cfg.max_grad_norm)
            if not (math.isfinite(norm) and np.isfinite(lp_new).all()):
                params2, adsnap = snap
                state.params = params2
                state.adam.restore(adsnap)
                return {"L_total": L_total, "L_emb": L_emb, "w": state.w.copy(),
                        "kl": kl_last, "lr": state.lr, "nonfinite": True,
                        "sigma_mean": _sigma_means(params2, mask)}

            state.adam.step(trainables, grads, state.lr)
            params.clamp_log_std()

            if pass_i == cfg.update_epochs - 1:
                kl_final_pass.append(float(np.mean(logp_old[mb] - lp_new)))

    # one lr adjustment per update, from the divergence reached on the last
    # pass: halving/doubling per minibatch punishes KL that merely
    # accumulated over earlier minibatches and pins the rate to the floor
    kl_last = float(np.mean(kl_final_pass)) if kl_final_pass else 0.0
    if kl_last > 2.0 * cfg.kl_target:
        state.lr = max(state.lr / 2.0, cfg.lr_min)
    elif kl_last < 0.5 * cfg.kl_target:
        state.lr = min(state.lr * 2.0, cfg.lr_max)

    return {"L_total": L_total, "L_emb": L_emb, "w": state.w.copy(),
            "kl": kl_last, "lr": state.lr, "nonfinite": False,
            "sigma_mean": _sigma_means(params, mask)}


def _sigma_means(params: PolicyParams, mask: np.ndarray) -> np.ndarray:
    sig = np.exp(params.log_std[:, mask])
    return sig.mean(axis=1)


def fit_descriptor_standardizer(models: list[RobotModel], dr: DRConfig,
                                seed: int, samples: int = 64
                                ) -> tuple[np.ndarray, np.ndarray]:
    """Pool descriptor draws from every embodiment's DR distribution."""
    flats = []
    for k, m in enumerate(models):
        mapping = build_mapping([j.unified_role for j in m.joints],
                                [j.sign for j in m.joints],
                                [j.offset for j in m.joints])
        rng = np.random.Generator(
            np.random.Philox(key=[abs(int(seed)), _STREAM_STANDARDIZER + k]))
        for _ in range(samples):
            v = sample_variant(m, dr, rng)
            flats.append(compute_descriptor(materialize(m, v), mapping).flat)
    return fit_standardizer(np.array(flats))


def init_run(setup: RunSetup, seed: int) -> tuple[TrainState, list[EnvGroup]]:
    cfg = setup.trainer
    n_emb = len(setup.models)
    if n_emb < 1:
        raise ValueError("training set is empty")
    base, rem = divmod(cfg.n_envs, n_emb)
    sizes = [base + (1 if i < rem else 0) for i in range(n_emb)]
    groups = []
    offset = 0
    for i, (name, model) in enumerate(setup.models):
        groups.append(EnvGroup(i, name, model, sizes[i], seed, offset, setup))
        offset += sizes[i]

    pcfg = PolicyConfig(critic_mode=cfg.critic_mode, sigma_init=cfg.sigma_init,
                        descriptor_dim=DESCRIPTOR_DIM)
    init_rng = np.random.Generator(
        np.random.Philox(key=[abs(int(seed)), _STREAM_INIT]))
    params = PolicyParams(n_emb, pcfg, init_rng)
    params.ze_mean, params.ze_std = fit_descriptor_standardizer(
        [m for _, m in setup.models], setup.dr, seed, cfg.standardizer_samples)
    state = TrainState(
        params=params, adam=Adam(), lr=cfg.lr,
        rng=np.random.Generator(
            np.random.Philox(key=[abs(int(seed)), _STREAM_MINIBATCH])),
        R=np.zeros(n_emb), ep_len=np.zeros(n_emb), w=np.ones(n_emb))
    return state, groups


METRICS_HEADER = ["epoch", "embodiment", "mean_return", "mean_ep_len_norm",
                  "w", "sigma_mean", "curriculum_scale", "lr", "kl"]


def checkpoint_config(setup: RunSetup, state: TrainState, seed: int) -> dict:
    p = state.params.cfg
    return {
        "policy": {"critic_mode": p.critic_mode,
                   "actor_hidden": list(p.actor_hidden),
                   "estimator_hidden": list(p.estimator_hidden),
                   "sigma_init": p.sigma_init,
                   "descriptor_dim": p.descriptor_dim,
                   "dtype": p.dtype},
        "embodiments": [n for n, _ in setup.models],
        "mask": setup.trainer.mask,
        "action_scale": setup.trainer.action_scale,
        "epoch": state.epoch,
        "seed": seed,
        "R": [float(x) for x in state.R],
        "ep_len": [float(x) for x in state.ep_len],
        "run": setup.snapshot,
    }


def save_policy(path: str | Path, setup: RunSetup, state: TrainState,
                seed: int):
    ckpt_io.save_checkpoint(path, checkpoint_config(setup, state, seed),
                            state.params.named_tensors())


def load_policy(path: str | Path) -> tuple[PolicyParams, dict]:
    """Rebuild PolicyParams from a checkpoint; returns (params, config)."""
    config, tensors, _ = ckpt_io.load_checkpoint(path)
    p = config["policy"]
    pcfg = PolicyConfig(critic_mode=p["critic_mode"],
                        actor_hidden=tuple(p["actor_hidden"]),
                        estimator_hidden=tuple(p["estimator_hidden"]),
                        sigma_init=p["sigma_init"],
                        descriptor_dim=p["descriptor_dim"],
                        dtype=p["dtype"])
    params = PolicyParams(len(config["embodiments"]), pcfg, None)
    params.load_tensors(tensors)
    return params, config


def pretrain(setup: RunSetup, seed: int, out_dir: str | Path,
             threads: int = 1, log_every: int = 0,
             state: TrainState | None = None,
             groups: list[EnvGroup] | None = None) -> Path:
    """Full training loop; returns the final checkpoint path.

    Pass a prepared (state, groups) pair to continue from adapted weights;
    otherwise a fresh run is initialized from the setup.
    """
    cfg = setup.trainer
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    if state is None or groups is None:
        state, groups = init_run(setup, seed)
    mask = MASK_PRESETS[cfg.mask]
    names = [n for n, _ in setup.models]
    limit = setup.sim.episode_limit
    faults = 0

    # construction-time episodes drew commands at full scale; redraw at the
    # starting curriculum so the very first rollout honors it
    for g in groups:
        g.env.curriculum = advance_curriculum(0, cfg)
        g.env.reset_indices(np.arange(g.env.B))
        f = g.env.frames(np.zeros((g.env.B, 2)))
        g.history[:] = f[:, None, :]
        g.cur_gt[:] = 0.0

    with open(out / "metrics.csv", "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(METRICS_HEADER)
        for epoch in range(cfg.epochs):
            state.curriculum = advance_curriculum(epoch, cfg)
            for g in groups:
                g.env.curriculum = state.curriculum
            batch = collect_rollouts(state, groups, cfg.horizon, mask, threads)

            d = cfg.ema_decay
            for grp in batch.groups:
                for (i, ret, steps, _reason) in grp.completions:
                    state.R[i] = d * state.R[i] + (1 - d) * ret
                    state.ep_len[i] = d * state.ep_len[i] + (1 - d) * (steps / limit)
            state.w = compute_embodiment_weights(state.R, floor=cfg.weight_floor)

            advs, targets, values = compute_gae(batch, state.params,
                                                cfg.gamma, cfg.lam)
            report = update(state, batch, advs, targets, values, mask, cfg,
                            names)
            if report["nonfinite"]:
                faults += 1
                if faults >= cfg.max_consecutive_faults:
                    raise TrainingFault(
                        f"{faults} consecutive non-finite updates")
            else:
                faults = 0

            for grp in batch.groups:
                state.params.obs_norm.update(
                    grp.obs[:, :, -FRAME_DIM:].reshape(-1, FRAME_DIM))
            state.epoch = epoch + 1

            for i, name in enumerate(names):
                writer.writerow([
                    epoch, name, f"{state.R[i]:.6f}", f"{state.ep_len[i]:.6f}",
                    f"{state.w[i]:.6f}", f"{report['sigma_mean'][i]:.6f}",
                    f"{state.curriculum:.6f}", f"{state.lr:.6e}",
                    f"{report['kl']:.6e}"])
            if log_every and (epoch + 1) % log_every == 0:
                fh.flush()
                print(f"epoch {epoch + 1}/{cfg.epochs}  "
                      + "  ".join(f"{n}: R={state.R[i]:.1f} len={state.ep_len[i]:.2f}"
                                  for i, n in enumerate(names)),
                      flush=True)
            if cfg.checkpoint_every and (epoch + 1) % cfg.checkpoint_every == 0 \
                    and epoch + 1 < cfg.epochs:
                save_policy(out / f"ckpt_{epoch + 1:06d}.ckpt", setup, state, seed)

    final = out / "policy.ckpt"
    save_policy(final, setup, state, seed)
    return final
