"""Proximal-policy-optimization trainer over batched recurrent rollouts.

Collection runs N environments in lockstep and stores time-major arrays;
updates re-unroll contiguous BPTT segments from stored segment-start hidden
states and apply the clipped surrogate with value and entropy terms.  Episode
rewards are terminal-only, so advantage estimation leans on the value head.
"""

import csv
import math
import os
import time
from dataclasses import dataclass, asdict, field

import numpy as np

from .env import BatchedEnv
from .nn import (
    VariantSpec,
    assemble_input,
    backward_sequence,
    config_hash,
    forward_sequence,
    gaussian_entropy,
    gaussian_log_prob,
    init_params,
    policy_forward,
    save_checkpoint,
)
from .rng import UniformSupply, seed_root

METRICS_COLUMNS = ("step", "mean_reward", "capture_frac", "sigma_mean", "entropy",
                   "loss_pi", "loss_v", "kl", "clip_frac", "wallclock_s")


@dataclass
class TrainConfig:
    """PPO hyperparameters; defaults are desk-scale."""

    gamma: float = 0.999
    gae_lambda: float = 0.95
    clip_ratio: float = 0.2
    learning_rate: float = 3e-4
    lr_decay: bool = True              # linear to 0 over the budget
    epochs: int = 4
    minibatches: int = 8
    entropy_coef: float = 1e-3
    entropy_decay: bool = True         # linear to 0 over the budget
    value_coef: float = 0.5
    max_grad_norm: float = 0.5
    n_envs: int = 512
    t_steps: int = 512
    bptt_len: int = 64
    total_steps: int = 50_000_000
    checkpoint_every: int = 25         # updates between checkpoints
    watchdog: bool = True              # divergence detection
    mu_head_gain: float = 0.01         # init scale of the action-mean head
    hidden: int = 32
    mlp_widths: tuple = (64, 64)
    post_width: int = 32

    def __post_init__(self):
        self.mlp_widths = tuple(int(w) for w in self.mlp_widths)
        self.validate()

    def validate(self):
        if not (0.0 < self.gamma <= 1.0):
            raise ValueError("gamma must be in (0, 1]")
        if not (0.0 <= self.gae_lambda <= 1.0):
            raise ValueError("gae_lambda must be in [0, 1]")
        if self.clip_ratio <= 0.0:
            raise ValueError("clip_ratio must be positive")
        if self.t_steps % self.bptt_len != 0:
            raise ValueError("t_steps must be a multiple of bptt_len")
        rows = self.n_envs * (self.t_steps // self.bptt_len)
        if rows % self.minibatches != 0:
            raise ValueError("minibatches must divide n_envs * (t_steps/bptt_len)")

    def make_spec(self, kind, n_sensors):
        return VariantSpec(kind, n_sensors=n_sensors, hidden=self.hidden,
                           mlp_widths=self.mlp_widths, post_width=self.post_width)


class TrainingDiverged(RuntimeError):
    """Raised when the run is clearly failing; carries diagnostics."""

    def __init__(self, message, diagnostics=None):
        super().__init__(message)
        self.diagnostics = diagnostics or {}


@dataclass
class RolloutBatch:
    """Time-major rollout storage, [t_steps, n_envs] leading axes."""

    inputs: np.ndarray        # (T, N, D) raw policy inputs
    actions: np.ndarray       # (T, N)
    log_probs: np.ndarray     # (T, N)
    values: np.ndarray        # (T, N)
    rewards: np.ndarray       # (T, N) nonzero only at terminal steps
    dones: np.ndarray         # (T, N) float 0/1
    h_starts: np.ndarray      # (T // L, N, H) hidden entering each segment
    bootstrap: np.ndarray     # (N,) value of the post-batch observation
    sigma_mean: float = 0.0
    episode_rewards: np.ndarray = field(default_factory=lambda: np.empty(0))
    episode_captures: np.ndarray = field(default_factory=lambda: np.empty(0))


class Collector:
    """Owns the environments, per-env action-noise streams, and carried hidden
    state between batches."""

    def __init__(self, params, spec, env_cfg, train_cfg, seed):
        self.spec = spec
        self.cfg = train_cfg
        root = seed_root(seed)
        env_ss, action_ss = root.spawn(2)
        self.env = BatchedEnv(env_cfg, train_cfg.n_envs, env_ss)
        self.actions_rng = UniformSupply(action_ss.spawn(train_cfg.n_envs))
        self._all = np.arange(train_cfg.n_envs)
        self.h = np.zeros((train_cfg.n_envs, spec.hidden))
        self.env.reset_all()

    def collect(self, params):
        """Gather one batch of t_steps transitions per environment."""
        cfg, spec, env = self.cfg, self.spec, self.env
        t_steps, n, seg = cfg.t_steps, cfg.n_envs, cfg.bptt_len
        inputs = np.empty((t_steps, n, spec.input_dim))
        actions = np.empty((t_steps, n))
        log_probs = np.empty((t_steps, n))
        values = np.empty((t_steps, n))
        rewards = np.zeros((t_steps, n))
        dones = np.zeros((t_steps, n))
        h_starts = np.empty((t_steps // seg, n, spec.hidden))
        ep_rewards, ep_caps = [], []
        sigma_acc = 0.0
        for t in range(t_steps):
            if t % seg == 0:
                h_starts[t // seg] = self.h
            obs = env.obs
            x = assemble_input(spec, obs.m, obs.m_mean, obs.prev_action)
            if not np.isfinite(x).all():
                bad = np.flatnonzero(~np.isfinite(x).all(axis=1))
                raise TrainingDiverged(
                    f"non-finite observation in envs {bad[:8].tolist()} at step {t}",
                    {"step": t, "envs": bad.tolist()})
            mu, sigma, value, h_next = policy_forward(params, spec, x, self.h)
            xi = self.actions_rng.standard_normal(self._all)
            act = mu + sigma * xi
            _, reward, done_now, _ = env.step(act)
            inputs[t] = x
            actions[t] = act
            log_probs[t] = gaussian_log_prob(mu, sigma, act)
            values[t] = value
            rewards[t] = reward
            dones[t] = done_now
            sigma_acc += sigma.mean()
            self.h = h_next
            if done_now.any():
                ep_rewards.extend(reward[done_now])
                ep_caps.extend(env.captured[done_now])
                self.h[done_now] = 0.0  # fresh episode starts with empty memory
                env.reset_done()
        obs = env.obs
        x = assemble_input(spec, obs.m, obs.m_mean, obs.prev_action)
        _, _, bootstrap, _ = policy_forward(params, spec, x, self.h)
        return RolloutBatch(inputs, actions, log_probs, values, rewards, dones,
                            h_starts, bootstrap, sigma_acc / t_steps,
                            np.asarray(ep_rewards), np.asarray(ep_caps, dtype=float))


def compute_gae(batch, gamma, lam):
    """Generalized advantage estimation; returns (advantages, returns)."""
    rewards, values, dones = batch.rewards, batch.values, batch.dones
    t_steps, n = rewards.shape
    adv = np.zeros((t_steps, n))
    last = np.zeros(n)
    next_value = batch.bootstrap
    for t in reversed(range(t_steps)):
        not_done = 1.0 - dones[t]
        delta = rewards[t] + gamma * next_value * not_done - values[t]
        last = delta + gamma * lam * not_done * last
        adv[t] = last
        next_value = values[t]
    return adv, adv + values


def clip_surrogate(ratio, advantage, eps_clip):
    """Clipped-surrogate pieces: (d loss/d ratio per sample, loss, clip frac).

    loss = -mean(min(ratio * A, clip(ratio, 1 +- eps) * A)); the gradient
    through ratio vanishes exactly where the clipped branch is active.
    """
    unclipped = ratio * advantage
    clipped = np.clip(ratio, 1.0 - eps_clip, 1.0 + eps_clip) * advantage
    take_unclipped = unclipped <= clipped
    inside = (ratio > 1.0 - eps_clip) & (ratio < 1.0 + eps_clip)
    g_ratio = np.where(take_unclipped | inside, -advantage, 0.0)
    loss = -np.minimum(unclipped, clipped).mean()
    clip_frac = float((np.abs(ratio - 1.0) > eps_clip).mean())
    return g_ratio, float(loss), clip_frac


def _segment_rows(arr, seg):
    """(T, N, ...) -> (S*N, L, ...) rows ordered segment-major then env."""
    t_steps, n = arr.shape[:2]
    s = t_steps // seg
    out = arr.reshape(s, seg, n, *arr.shape[2:])
    out = np.moveaxis(out, 2, 1)
    return out.reshape(s * n, seg, *arr.shape[2:])


def global_grad_norm(grads):
    return math.sqrt(sum(float((g * g).sum()) for g in grads.values()))


class Adam:
    def __init__(self, params, beta1=0.9, beta2=0.999, eps=1e-8):
        self.m = params.zeros_like()
        self.v = params.zeros_like()
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.t = 0

    def step(self, params, grads, lr):
        self.t += 1
        c1 = 1.0 - self.beta1 ** self.t
        c2 = 1.0 - self.beta2 ** self.t
        for n in params.names:
            g = grads[n]
            self.m[n] = self.beta1 * self.m[n] + (1.0 - self.beta1) * g
            self.v[n] = self.beta2 * self.v[n] + (1.0 - self.beta2) * g * g
            params[n] = params[n] - lr * (self.m[n] / c1) / (np.sqrt(self.v[n] / c2) + self.eps)


def ppo_update(params, spec, batch, cfg, adam, lr, entropy_coef, shuffle_rng):
    """One PPO update (epochs x minibatches) in place; returns metrics.

    Aborts and restores the incoming parameters if any loss goes non-finite.
    """
    snapshot = params.copy()
    adv_raw, returns = compute_gae(batch, cfg.gamma, cfg.gae_lambda)
    adv = (adv_raw - adv_raw.mean()) / (adv_raw.std() + 1e-8)

    seg = cfg.bptt_len
    rows_x = _segment_rows(batch.inputs, seg)
    rows_act = _segment_rows(batch.actions, seg)
    rows_lp = _segment_rows(batch.log_probs, seg)
    rows_adv = _segment_rows(adv, seg)
    rows_ret = _segment_rows(returns, seg)
    prev_done = np.vstack([np.zeros((1, batch.dones.shape[1])), batch.dones[:-1]])
    rows_reset = _segment_rows(prev_done, seg)
    n_segs, n_envs = batch.h_starts.shape[:2]
    rows_h0 = batch.h_starts.reshape(n_segs * n_envs, spec.hidden)

    n_rows = rows_x.shape[0]
    per_mb = n_rows // cfg.minibatches
    n_samples = per_mb * seg
    eps_clip = cfg.clip_ratio

    metrics = {"loss_pi": 0.0, "loss_v": 0.0, "kl": 0.0, "clip_frac": 0.0,
               "entropy": 0.0, "aborted": False}
    count = 0
    for _ in range(cfg.epochs):
        order = shuffle_rng.permutation(n_rows)
        for mb in range(cfg.minibatches):
            rows = order[mb * per_mb:(mb + 1) * per_mb]
            x = rows_x[rows]
            reset = rows_reset[rows]
            mu, sigma, value, _, caches = forward_sequence(
                params, spec, x, rows_h0[rows], reset, want_cache=True)
            act = rows_act[rows]
            lp_old = rows_lp[rows]
            a_hat = rows_adv[rows]
            ret = rows_ret[rows]

            lp_new = gaussian_log_prob(mu, sigma, act)
            ratio = np.exp(lp_new - lp_old)
            g_ratio, loss_pi, clip_frac = clip_surrogate(ratio, a_hat, eps_clip)
            d_lp = (g_ratio / n_samples) * ratio
            z = (act - mu) / sigma
            d_mu = d_lp * z / sigma
            d_sigma = d_lp * (z * z - 1.0) / sigma
            v_err = value - ret
            d_val = 2.0 * cfg.value_coef * v_err / n_samples
            d_sigma = d_sigma - entropy_coef / sigma / n_samples

            loss_v = cfg.value_coef * (v_err ** 2).mean()
            entropy = gaussian_entropy(sigma).mean()
            if not (np.isfinite(loss_pi) and np.isfinite(loss_v) and np.isfinite(entropy)):
                for name in params.names:
                    params[name] = snapshot[name]
                metrics["aborted"] = True
                return metrics

            grads, _ = backward_sequence(params, spec, caches, d_mu, d_sigma,
                                         d_val, reset_before=reset)
            norm = global_grad_norm(grads)
            if not np.isfinite(norm):
                for name in params.names:
                    params[name] = snapshot[name]
                metrics["aborted"] = True
                return metrics
            if norm > cfg.max_grad_norm:
                scale = cfg.max_grad_norm / norm
                for g in grads.values():
                    g *= scale
            adam.step(params, grads, lr)

            metrics["loss_pi"] += loss_pi
            metrics["loss_v"] += loss_v
            metrics["kl"] += float((lp_old - lp_new).mean())
            metrics["clip_frac"] += clip_frac
            metrics["entropy"] += entropy
            count += 1
    for key in ("loss_pi", "loss_v", "kl", "clip_frac", "entropy"):
        metrics[key] /= count
    return metrics


@dataclass
class TrainResult:
    checkpoints: list
    final_checkpoint: str
    metrics_path: str
    metrics: list
    env_steps: int


def train(variant, env_cfg, train_cfg, seed, out_dir, log_every=1, quiet=True):
    """Full training run: periodic checkpoints plus a metrics CSV.

    Raises TrainingDiverged when the recent mean episode reward is still below
    -0.9 after 30% of the step budget (and on non-finite observations).
    """
    os.makedirs(out_dir, exist_ok=True)
    spec = train_cfg.make_spec(variant, env_cfg.n_sensors)
    root = seed_root(seed)
    init_ss, collect_ss, shuffle_ss = root.spawn(3)
    params = init_params(spec, init_ss, mu_gain=train_cfg.mu_head_gain)
    collector = Collector(params, spec, env_cfg, train_cfg, collect_ss)
    shuffle_rng = np.random.default_rng(shuffle_ss)
    adam = Adam(params)

    cfg_hash = config_hash(asdict(env_cfg), asdict(train_cfg), variant)
    steps_per_batch = train_cfg.n_envs * train_cfg.t_steps
    n_updates = max(1, train_cfg.total_steps // steps_per_batch)
    metrics_path = os.path.join(out_dir, "metrics.csv")
    checkpoints = []
    recent_rewards = []
    metrics_rows = []
    t0 = time.perf_counter()

    def write_metrics():
        with open(metrics_path, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(METRICS_COLUMNS)
            writer.writerows(metrics_rows)

    seed_meta = seed if isinstance(seed, int) else str(seed)

    def checkpoint(tag, update_idx, step):
        meta = {"variant": variant, "seed": seed_meta, "step": step,
                "config_hash": cfg_hash, "tag": tag}
        name = f"ckpt_{tag}.ckpt" if tag else f"ckpt_{update_idx:05d}.ckpt"
        path = os.path.join(out_dir, name)
        save_checkpoint(path, params, meta)
        return path

    env_steps = 0
    for update in range(n_updates):
        frac = update / n_updates
        lr = train_cfg.learning_rate * (1.0 - frac if train_cfg.lr_decay else 1.0)
        ent = train_cfg.entropy_coef * (1.0 - frac if train_cfg.entropy_decay else 1.0)
        batch = collector.collect(params)
        env_steps += steps_per_batch
        stats = ppo_update(params, spec, batch, train_cfg, adam, lr, ent, shuffle_rng)
        recent_rewards.extend(batch.episode_rewards.tolist())
        # window spans several episode generations so t_max-aligned timeout
        # waves cannot dominate a single reading
        recent_rewards = recent_rewards[-max(1000, 2 * train_cfg.n_envs):]
        mean_rew = float(np.mean(recent_rewards)) if recent_rewards else float("nan")
        cap = float(batch.episode_captures.mean()) if batch.episode_captures.size else float("nan")
        row = [env_steps, mean_rew, cap, batch.sigma_mean, stats["entropy"],
               stats["loss_pi"], stats["loss_v"], stats["kl"], stats["clip_frac"],
               time.perf_counter() - t0]
        metrics_rows.append(row)
        if (update + 1) % log_every == 0:
            write_metrics()
        if not quiet:
            print(f"update {update + 1}/{n_updates} steps {env_steps} "
                  f"reward {mean_rew:.3f} capture {cap:.3f} sigma {batch.sigma_mean:.3f}",
                  flush=True)
        if (update + 1) % train_cfg.checkpoint_every == 0:
            checkpoints.append(checkpoint("", update + 1, env_steps))
        if (train_cfg.watchdog and env_steps >= 0.3 * train_cfg.total_steps
                and recent_rewards and mean_rew < -0.9):
            write_metrics()
            checkpoint("diverged", update + 1, env_steps)
            raise TrainingDiverged(
                f"mean episode reward {mean_rew:.3f} after {env_steps} steps",
                {"env_steps": env_steps, "mean_reward": mean_rew,
                 "metrics_path": metrics_path})
    final = checkpoint("final", n_updates, env_steps)
    write_metrics()
    return TrainResult(checkpoints, final, metrics_path, metrics_rows, env_steps)
