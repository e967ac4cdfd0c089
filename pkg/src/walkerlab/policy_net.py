"""Actor-critic networks in plain numpy with hand-written reverse mode.

Three MLPs share one observation pipeline: an actor mapping a five-frame
observation stack to 32 pre-mask action means, a critic that optionally sees
the standardized embodiment descriptor, and a small estimator head that
predicts planar base velocity from the same stack.  Exploration noise is a
diagonal Gaussian with one learned log-std vector per training embodiment.

Training runs in float32 for speed; gradient tests build float64 nets, where
the analytic backward pass matches central finite differences to ~1e-9.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .unified_space import N_SLOTS
from .walker_sim import FRAME_DIM

HISTORY = 5
STACK_DIM = HISTORY * FRAME_DIM

LOG_STD_MIN = math.log(0.05)
LOG_STD_MAX = 0.0
_LOG2PI = math.log(2.0 * math.pi)

CRITIC_MODES = ("privileged", "observable", "none")


class DimensionMismatch(ValueError):
    pass


def elu(x: np.ndarray) -> np.ndarray:
    return np.where(x > 0, x, np.expm1(np.minimum(x, 0.0)))


def elu_grad(pre: np.ndarray) -> np.ndarray:
    return np.where(pre > 0, 1.0, np.exp(np.minimum(pre, 0.0)))


def orthogonal(rng: np.random.Generator, n_in: int, n_out: int,
               gain: float, dtype) -> np.ndarray:
    """Orthogonal weight draw: QR of a Gaussian, sign-fixed so Q is unique."""
    a = rng.standard_normal((max(n_in, n_out), min(n_in, n_out)))
    q, r = np.linalg.qr(a)
    q = q * np.sign(np.diag(r))
    if n_in < n_out:
        q = q.T
    return (gain * q).astype(dtype)


class MLP:
    """Fully connected stack, ELU hidden units, linear output."""

    def __init__(self, sizes: list[int], rng: np.random.Generator | None,
                 dtype=np.float32, out_gain: float = 1.0):
        self.sizes = list(sizes)
        self.dtype = np.dtype(dtype)
        self.W: list[np.ndarray] = []
        self.b: list[np.ndarray] = []
        last = len(sizes) - 2
        for i in range(len(sizes) - 1):
            gain = out_gain if i == last else math.sqrt(2.0)
            if rng is None:
                w = np.zeros((sizes[i], sizes[i + 1]), self.dtype)
            else:
                w = orthogonal(rng, sizes[i], sizes[i + 1], gain, self.dtype)
            self.W.append(w)
            self.b.append(np.zeros(sizes[i + 1], self.dtype))

    def forward(self, x: np.ndarray) -> tuple[np.ndarray, tuple]:
        x = np.asarray(x, self.dtype)
        if x.shape[-1] != self.sizes[0]:
            raise DimensionMismatch(
                f"input dim {x.shape[-1]}, net expects {self.sizes[0]}")
        acts = [x]
        # exp(min(z,0)) per hidden layer; doubles as the ELU derivative
        exps = []
        h = x
        n = len(self.W)
        for i in range(n):
            z = h @ self.W[i]
            z += self.b[i]
            if i == n - 1:
                h = z
            else:
                # elu(z) = max(z,0) + exp(min(z,0)) - 1, branch-free
                e = np.minimum(z, 0.0)
                np.exp(e, out=e)
                exps.append(e)
                np.maximum(z, 0.0, out=z)
                z += e
                z -= 1.0
                h = z
            acts.append(h)
        return h, (acts, exps)

    def __call__(self, x: np.ndarray) -> np.ndarray:
        return self.forward(x)[0]

    def backward(self, cache: tuple, dout: np.ndarray, need_input_grad: bool = False):
        """Gradients of a scalar loss given d(loss)/d(output).

        Returns ([(dW, db), ...] per layer, d(loss)/d(input)).  The input
        gradient is skipped unless asked for: the first-layer g @ W.T is the
        single largest matmul in the whole backward pass and no caller needs
        it during training.
        """
        acts, exps = cache
        g = np.asarray(dout, self.dtype)
        grads: list[tuple[np.ndarray, np.ndarray]] = [None] * len(self.W)
        for i in reversed(range(len(self.W))):
            grads[i] = (acts[i].T @ g, g.sum(axis=0))
            if i == 0 and not need_input_grad:
                return grads, None
            g = g @ self.W[i].T
            if i > 0:
                # exp(min(z,0)) equals ELU'(z): 1 for z>0, exp(z) below
                g *= exps[i - 1]
        return grads, g

    def named(self, prefix: str):
        for i in range(len(self.W)):
            yield f"{prefix}.w{i}", self.W[i]
            yield f"{prefix}.b{i}", self.b[i]

    def load_named(self, prefix: str, tensors: dict[str, np.ndarray]):
        for i in range(len(self.W)):
            w = tensors[f"{prefix}.w{i}"]
            b = tensors[f"{prefix}.b{i}"]
            if w.shape != self.W[i].shape or b.shape != self.b[i].shape:
                raise DimensionMismatch(f"{prefix} layer {i} shape mismatch")
            self.W[i] = w.astype(self.dtype)
            self.b[i] = b.astype(self.dtype)

    def copy(self) -> MLP:
        other = MLP(self.sizes, None, self.dtype)
        other.W = [w.copy() for w in self.W]
        other.b = [b.copy() for b in self.b]
        return other


class RunningNorm:
    """Per-dimension running mean/std (Welford, batch-merged).

    The trainer updates it once per epoch after the gradient step so the
    normalization seen by a rollout is constant across that rollout; eval
    and fine-tune never update it.
    """

    def __init__(self, dim: int, clip: float = 10.0):
        self.mean = np.zeros(dim)
        self.m2 = np.zeros(dim)
        self.count = 0.0
        self.clip = clip

    def update(self, x: np.ndarray):
        x = np.asarray(x, np.float64).reshape(-1, self.mean.shape[0])
        nb = x.shape[0]
        if nb == 0:
            return
        mb = x.mean(axis=0)
        m2b = ((x - mb) ** 2).sum(axis=0)
        tot = self.count + nb
        delta = mb - self.mean
        self.mean = self.mean + delta * (nb / tot)
        self.m2 = self.m2 + m2b + delta ** 2 * (self.count * nb / tot)
        self.count = tot

    def std(self) -> np.ndarray:
        if self.count < 2:
            return np.ones_like(self.mean)
        return np.sqrt(np.maximum(self.m2 / self.count, 1e-8))

    def apply(self, x: np.ndarray) -> np.ndarray:
        y = (np.asarray(x, np.float64) - self.mean) / self.std()
        return np.clip(y, -self.clip, self.clip).astype(np.asarray(x).dtype)


@dataclass
class PolicyConfig:
    critic_mode: str = "privileged"
    actor_hidden: tuple[int, ...] = (256, 128)
    estimator_hidden: tuple[int, ...] = (128, 64)
    sigma_init: float = 0.8
    descriptor_dim: int = 323
    dtype: str = "float32"

    def __post_init__(self):
        if self.critic_mode not in CRITIC_MODES:
            raise ValueError(f"critic_mode must be one of {CRITIC_MODES}")


class PolicyParams:
    """All learnable state plus the frozen normalization statistics."""

    def __init__(self, n_embodiments: int, cfg: PolicyConfig,
                 rng: np.random.Generator):
        self.cfg = cfg
        self.n_embodiments = n_embodiments
        dt = np.dtype(cfg.dtype)
        zed = cfg.descriptor_dim
        actor_in = STACK_DIM + (zed if cfg.critic_mode == "observable" else 0)
        critic_in = STACK_DIM + (zed if cfg.critic_mode != "none" else 0)
        self.actor = MLP([actor_in, *cfg.actor_hidden, N_SLOTS], rng, dt,
                         out_gain=0.01)
        self.critic = MLP([critic_in, *cfg.actor_hidden, 1], rng, dt)
        self.estimator = MLP([STACK_DIM, *cfg.estimator_hidden, 2], rng, dt)
        init = float(np.clip(math.log(cfg.sigma_init), LOG_STD_MIN, LOG_STD_MAX))
        self.log_std = np.full((n_embodiments, N_SLOTS), init)
        self.obs_norm = RunningNorm(FRAME_DIM)
        self.ze_mean = np.zeros(zed)
        self.ze_std = np.ones(zed)

    # -- tensor plumbing -------------------------------------------------

    def trainable(self) -> list[tuple[str, np.ndarray]]:
        out = list(self.actor.named("actor"))
        out += list(self.critic.named("critic"))
        out += list(self.estimator.named("estimator"))
        out.append(("log_std", self.log_std))
        return out

    def named_tensors(self) -> list[tuple[str, np.ndarray]]:
        out = self.trainable()
        out += [("obs_norm.mean", self.obs_norm.mean),
                ("obs_norm.m2", self.obs_norm.m2),
                ("obs_norm.count", np.array([self.obs_norm.count])),
                ("ze.mean", self.ze_mean),
                ("ze.std", self.ze_std)]
        return out

    def load_tensors(self, tensors: dict[str, np.ndarray]):
        self.actor.load_named("actor", tensors)
        self.critic.load_named("critic", tensors)
        self.estimator.load_named("estimator", tensors)
        ls = np.asarray(tensors["log_std"], np.float64)
        if ls.shape != self.log_std.shape:
            raise DimensionMismatch("log_std shape mismatch")
        self.log_std = ls
        self.obs_norm.mean = np.asarray(tensors["obs_norm.mean"], np.float64)
        self.obs_norm.m2 = np.asarray(tensors["obs_norm.m2"], np.float64)
        self.obs_norm.count = float(tensors["obs_norm.count"][0])
        self.ze_mean = np.asarray(tensors["ze.mean"], np.float64)
        self.ze_std = np.asarray(tensors["ze.std"], np.float64)

    def copy(self) -> PolicyParams:
        other = PolicyParams.__new__(PolicyParams)
        other.cfg = self.cfg
        other.n_embodiments = self.n_embodiments
        other.actor = self.actor.copy()
        other.critic = self.critic.copy()
        other.estimator = self.estimator.copy()
        other.log_std = self.log_std.copy()
        other.obs_norm = RunningNorm(FRAME_DIM)
        other.obs_norm.mean = self.obs_norm.mean.copy()
        other.obs_norm.m2 = self.obs_norm.m2.copy()
        other.obs_norm.count = self.obs_norm.count
        other.ze_mean = self.ze_mean.copy()
        other.ze_std = self.ze_std.copy()
        return other

    def clamp_log_std(self):
        np.clip(self.log_std, LOG_STD_MIN, LOG_STD_MAX, out=self.log_std)

    # -- observation pipeline --------------------------------------------

    def normalize_stack(self, stacked: np.ndarray) -> np.ndarray:
        """Apply per-frame normalization to a (..., 5*FRAME_DIM) stack.

        Runs in float32 off cached statistics; the cache keys on the
        running count, which only moves in the once-per-epoch update.
        """
        cache = getattr(self, "_norm_cache", None)
        if cache is None or cache[0] != self.obs_norm.count:
            mean32 = self.obs_norm.mean.astype(np.float32)
            istd32 = (1.0 / self.obs_norm.std()).astype(np.float32)
            cache = self._norm_cache = (self.obs_norm.count, mean32, istd32)
        _, mean32, istd32 = cache
        shp = stacked.shape
        flat = stacked.reshape(-1, FRAME_DIM)
        y = (flat.astype(np.float32, copy=False) - mean32)
        y *= istd32
        np.clip(y, -self.obs_norm.clip, self.obs_norm.clip, out=y)
        return y.reshape(shp)

    def standardize_ze(self, ze: np.ndarray) -> np.ndarray:
        return (np.asarray(ze, np.float64) - self.ze_mean) / self.ze_std

    def standardize_ze_f32(self, ze: np.ndarray) -> np.ndarray:
        """float32 variant of standardize_ze for the training hot path."""
        cache = getattr(self, "_ze_cache", None)
        key = (id(self.ze_mean), id(self.ze_std))
        if cache is None or cache[0] != key:
            m32 = self.ze_mean.astype(np.float32)
            i32 = (1.0 / self.ze_std).astype(np.float32)
            cache = self._ze_cache = (key, m32, i32)
        _, m32, i32 = cache
        y = np.asarray(ze, np.float32) - m32
        y *= i32
        return y

    def actor_input(self, stacked: np.ndarray, ze: np.ndarray | None) -> np.ndarray:
        x = self.normalize_stack(stacked)
        if self.cfg.critic_mode == "observable":
            if ze is None:
                raise DimensionMismatch("observable mode needs descriptors")
            x = np.concatenate([x, self.standardize_ze_f32(ze)], axis=-1)
        return x

    def critic_input(self, stacked: np.ndarray, ze: np.ndarray | None) -> np.ndarray:
        x = self.normalize_stack(stacked)
        if self.cfg.critic_mode != "none":
            if ze is None:
                raise DimensionMismatch("critic needs descriptors in this mode")
            x = np.concatenate([x, self.standardize_ze_f32(ze)], axis=-1)
        return x


def forward_actor(params: PolicyParams, stacked: np.ndarray,
                  embodiment_id: int, ze: np.ndarray | None = None
                  ) -> tuple[np.ndarray, np.ndarray]:
    """Mean action (pre-mask) and the embodiment's current sigma vector."""
    if not np.isfinite(stacked).all():
        raise ValueError("non-finite observation")
    mean = params.actor(params.actor_input(stacked, ze))
    sigma = np.exp(params.log_std[embodiment_id])
    return mean, sigma


def forward_critic(params: PolicyParams, stacked: np.ndarray,
                   ze: np.ndarray | None = None) -> np.ndarray:
    return params.critic(params.critic_input(stacked, ze))[..., 0]


def estimate_base_velocity(params: PolicyParams, stacked: np.ndarray) -> np.ndarray:
    return params.estimator(params.normalize_stack(stacked))


def sample_action(mean: np.ndarray, sigma: np.ndarray, mask: np.ndarray,
                  rng: np.random.Generator) -> tuple[np.ndarray, np.ndarray]:
    """Diagonal-Gaussian draw over masked dims; others are exactly zero.

    log_prob counts only masked dims, so masked-out slots carry no density.
    """
    mean = np.asarray(mean, np.float64)
    eps = rng.standard_normal(mean.shape)
    action = np.where(mask, mean + sigma * eps, 0.0)
    logp = gaussian_log_prob(action, mean, np.log(sigma), mask)
    return action, logp


def gaussian_log_prob(action: np.ndarray, mean: np.ndarray,
                      log_std: np.ndarray, mask: np.ndarray) -> np.ndarray:
    a = np.asarray(action, np.float64)
    mu = np.asarray(mean, np.float64)
    ls = np.broadcast_to(np.asarray(log_std, np.float64), mu.shape)
    z = (a - mu) / np.exp(ls)
    per = -0.5 * z * z - ls - 0.5 * _LOG2PI
    return np.where(mask, per, 0.0).sum(axis=-1)


def gaussian_entropy(log_std: np.ndarray, mask: np.ndarray) -> float:
    """Entropy of the masked diagonal Gaussian (nats)."""
    per = 0.5 * (1.0 + _LOG2PI) + np.asarray(log_std, np.float64)
    return float(np.where(mask, per, 0.0).sum(axis=-1).mean())
