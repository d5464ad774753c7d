"""Stochastic chemotactic-cell simulation.

A circular cell of radius R carries K ring sensors that count chemoattractant
particles (Poisson shot noise), moves at constant speed, and steers its heading
through an Euler-Maruyama update with rotational diffusion.  Episodes end on
capture (center within delta_capture of the source) or on timeout, with a
terminal reward in [-1, 1].

Per-step ordering: heading noise and the action are applied first, then the
position moves along the *new* heading, then fresh sensor counts are drawn at
the new pose.
"""

import csv
import json
import math
from dataclasses import dataclass, field, asdict, replace

import numpy as np
from scipy.special import k0 as _bessel_k0

from .rng import UniformSupply, poisson_counts, seed_root

FIELD_KINDS = ("exponential", "bessel")


@dataclass
class EnvConfig:
    """Physical parameters of the cell, field, and episode lifecycle.

    Units: lengths in micrometers, times in seconds, densities in um^-2.
    """

    lambda_decay: float = 0.01       # inverse decay length of the exponential field
    c_quantum: float = 16.0          # reference amplitude; sets the shot-noise scale
    c0_min_factor: float = 1.0       # amplitude sampled log-uniformly in
    c0_max_factor: float = 10.0      # [min, max] * base amplitude per episode
    radius: float = 2.0              # cell radius R
    n_sensors: int = 5               # K sensors uniformly spaced on the rim
    speed: float = 5.0               # swimming speed v
    rot_diffusion: float = 0.025     # rotational diffusion coefficient D_R
    dt: float = 0.1                  # integration step
    delta_capture: float = 10.0      # capture distance to the source
    t_max: float = 600.0             # episode horizon
    d0_min: float = 100.0            # initial distance bounds
    d0_max: float = 400.0
    field_kind: str = "exponential"
    diffusion: float = 100.0         # bessel field: particle diffusion D
    decay: float = 0.01              # bessel field: particle decay kappa
    release: float = 1000.0          # bessel field: release rate rho

    def __post_init__(self):
        self.validate()

    def validate(self):
        if self.radius <= 0:
            raise ValueError("radius must be positive")
        if self.n_sensors < 2:
            raise ValueError("need at least 2 sensors")
        if self.dt <= 0:
            raise ValueError("dt must be positive")
        if not (self.delta_capture < self.d0_min <= self.d0_max):
            raise ValueError("require delta_capture < d0_min <= d0_max")
        if self.c0_min_factor <= 0 or self.c0_max_factor < self.c0_min_factor:
            raise ValueError("amplitude factors must satisfy 0 < min <= max")
        if self.t_max <= 0:
            raise ValueError("t_max must be positive")
        if self.field_kind not in FIELD_KINDS:
            raise ValueError(f"field_kind must be one of {FIELD_KINDS}")
        if self.field_kind == "bessel" and min(self.diffusion, self.decay, self.release) <= 0:
            raise ValueError("bessel field needs positive diffusion, decay, release")
        if self.sensor_radius <= 0:
            raise ValueError("sensor radius came out non-positive")

    @property
    def sensor_radius(self):
        """Detection radius r_s = R sin(pi/K); K such patches tile the rim."""
        return self.radius * math.sin(math.pi / self.n_sensors)

    @property
    def sensor_angles(self):
        """Body-frame sensor angles, sensor 0 forward, counterclockwise."""
        return 2.0 * math.pi * np.arange(self.n_sensors) / self.n_sensors

    @property
    def base_amplitude(self):
        """Unsampled field amplitude: c_quantum, or the source-strength
        prefactor release/(2 pi D) for the bessel profile."""
        if self.field_kind == "bessel":
            return self.release / (2.0 * math.pi * self.diffusion)
        return self.c_quantum

    @property
    def n_max_steps(self):
        return max(1, int(round(self.t_max / self.dt)))

    def to_json(self, path=None):
        doc = json.dumps(asdict(self), indent=2)
        if path is not None:
            with open(path, "w") as fh:
                fh.write(doc + "\n")
        return doc

    @classmethod
    def from_json(cls, source):
        if isinstance(source, (str, bytes)) and str(source).lstrip().startswith("{"):
            data = json.loads(source)
        else:
            with open(source) as fh:
                data = json.load(fh)
        return cls(**data)


def concentration(x, cfg, c0=None):
    """Particle density at position(s) x; x has shape (..., 2).

    Exponential: c0 * exp(-lambda |x|).  Bessel: c0 * K0(|x| sqrt(kappa/D)),
    where c0 defaults to the steady-state source prefactor rho/(2 pi D).  The
    bessel profile is singular at the origin, so the evaluation radius is
    clamped to r_s/10 (far below the capture distance; never reached in play).
    """
    x = np.asarray(x, dtype=float)
    r = np.sqrt(np.sum(x * x, axis=-1))
    return concentration_radial(r, cfg, c0)


def concentration_radial(r, cfg, c0=None):
    """Radial profile of the concentration field."""
    r = np.asarray(r, dtype=float)
    if c0 is None:
        c0 = cfg.base_amplitude
    if cfg.field_kind == "exponential":
        return c0 * np.exp(-cfg.lambda_decay * r)
    r_clamped = np.maximum(r, cfg.sensor_radius / 10.0)
    return c0 * _bessel_k0(r_clamped * math.sqrt(cfg.decay / cfg.diffusion))


def sensor_offsets(theta, cfg):
    """World-frame offsets of the K sensors for heading(s) theta: (..., K, 2)."""
    theta = np.asarray(theta, dtype=float)
    ang = theta[..., None] + cfg.sensor_angles
    return cfg.radius * np.stack([np.cos(ang), np.sin(ang)], axis=-1)


def sensor_positions(position, theta, cfg):
    """World-frame sensor centers for cell pose(s) (position, theta)."""
    position = np.asarray(position, dtype=float)
    return position[..., None, :] + sensor_offsets(theta, cfg)


def expected_counts(position, theta, cfg, c0=None):
    """Mean particle count per sensor: C(d_i) * pi * r_s^2, d_i sensor-to-source."""
    pos = sensor_positions(position, theta, cfg)
    d = np.sqrt(np.sum(pos * pos, axis=-1))
    area = math.pi * cfg.sensor_radius ** 2
    return concentration_radial(d, cfg, c0) * area


def weber_fechner(counts):
    """Logarithmic receptor response m = log(M + 1); nonnegative, monotone."""
    return np.log1p(np.asarray(counts, dtype=float))


def terminal_reward_values(captured, tau, final_distance, d0, cfg):
    """Vectorized terminal reward.

    Captured episodes earn (t_max - tau)/t_max; the rest earn the bounded
    progress term max(-1, (delta - d)/(d0 - delta)).  Exactly one term is
    nonzero per episode and the result lies in [-1, 1].
    """
    captured = np.asarray(captured, dtype=bool)
    tau = np.asarray(tau, dtype=float)
    final_distance = np.asarray(final_distance, dtype=float)
    d0 = np.asarray(d0, dtype=float)
    time_term = (cfg.t_max - tau) / cfg.t_max
    progress = (cfg.delta_capture - final_distance) / (d0 - cfg.delta_capture)
    return np.where(captured, time_term, np.maximum(-1.0, progress))


@dataclass
class EnvState:
    """Scalar snapshot of one episode."""

    position: np.ndarray
    heading: float
    c0: float
    t: float
    done: bool
    tau: float | None
    d0: float
    streams: object = None  # per-env stream bundle handle


@dataclass
class Observation:
    """Sensor readout: K log-counts, their mean, and the previous action."""

    m: np.ndarray
    m_mean: float
    prev_action: float
    counts: np.ndarray = None


@dataclass
class BatchObs:
    """Column-stacked observations for a batch of environments."""

    m: np.ndarray            # (N, K) log-counts
    m_mean: np.ndarray       # (N,)
    prev_action: np.ndarray  # (N,)
    counts: np.ndarray       # (N, K) raw counts

    def row(self, i):
        return Observation(self.m[i].copy(), float(self.m_mean[i]),
                           float(self.prev_action[i]), self.counts[i].copy())


class BatchedEnv:
    """N independent environments advanced in lockstep.

    Each environment draws from its own streams (reset parameters, heading
    noise, sensor counts) split from the master seed by index, so environment
    i's trajectory is identical for any batch size or worker sharding; see
    rng.UniformSupply.
    """

    def __init__(self, cfg, n_envs, seed, frame_rotation=0.0, buf_size=None):
        cfg.validate()
        self.cfg = cfg
        self.n = int(n_envs)
        self.frame_rotation = float(frame_rotation)  # rotates sampled initial pose; symmetry checks
        if buf_size is None:
            buf_size = int(min(8192, max(256, 2 ** 25 // max(1, self.n))))
        env_seeds = seed_root(seed).spawn(self.n)
        reset_ss, heading_ss, count_ss = [], [], []
        for ss in env_seeds:
            a, b, c = ss.spawn(3)
            reset_ss.append(a)
            heading_ss.append(b)
            count_ss.append(c)
        self._reset_gens = [np.random.Generator(np.random.Philox(ss)) for ss in reset_ss]
        self._heading = UniformSupply(heading_ss, buf_size)
        self._counts = UniformSupply(count_ss, buf_size)
        self._all = np.arange(self.n, dtype=np.int64)

        self.pos = np.zeros((self.n, 2))
        self.theta = np.zeros(self.n)
        self.c0 = np.zeros(self.n)
        self.step_k = np.zeros(self.n, dtype=np.int64)
        self.done = np.ones(self.n, dtype=bool)
        self.captured = np.zeros(self.n, dtype=bool)
        self.tau = np.full(self.n, np.nan)
        self.d0 = np.zeros(self.n)
        self.prev_action = np.zeros(self.n)
        k = cfg.n_sensors
        self._obs = BatchObs(np.zeros((self.n, k)), np.zeros(self.n),
                             np.zeros(self.n), np.zeros((self.n, k), dtype=np.int64))
        self._area = math.pi * cfg.sensor_radius ** 2
        self._sangles = cfg.sensor_angles

    @property
    def obs(self):
        return self._obs

    @property
    def t(self):
        return self.step_k * self.cfg.dt

    def _measure(self, idx):
        """Draw fresh Poisson counts at the current pose of envs idx."""
        cfg = self.cfg
        ang = self.theta[idx, None] + self._sangles
        sx = self.pos[idx, 0, None] + cfg.radius * np.cos(ang)
        sy = self.pos[idx, 1, None] + cfg.radius * np.sin(ang)
        d = np.sqrt(sx * sx + sy * sy)
        mean = concentration_radial(d, cfg, self.c0[idx, None]) * self._area
        counts = poisson_counts(mean, self._counts, idx)
        m = np.log1p(counts.astype(float))
        self._obs.counts[idx] = counts
        self._obs.m[idx] = m
        self._obs.m_mean[idx] = m.mean(axis=1)
        self._obs.prev_action[idx] = self.prev_action[idx]

    def _reset_indices(self, idx):
        cfg = self.cfg
        lo, hi = math.log(cfg.c0_min_factor), math.log(cfg.c0_max_factor)
        base = cfg.base_amplitude
        for i in idx:
            g = self._reset_gens[i]
            self.d0[i] = g.uniform(cfg.d0_min, cfg.d0_max)
            place = g.uniform(0.0, 2.0 * math.pi) + self.frame_rotation
            self.theta[i] = g.uniform(0.0, 2.0 * math.pi) + self.frame_rotation
            self.c0[i] = base * math.exp(g.uniform(lo, hi))
            self.pos[i, 0] = self.d0[i] * math.cos(place)
            self.pos[i, 1] = self.d0[i] * math.sin(place)
        self.step_k[idx] = 0
        self.done[idx] = False
        self.captured[idx] = False
        self.tau[idx] = np.nan
        self.prev_action[idx] = 0.0
        self._measure(np.asarray(idx, dtype=np.int64))

    def reset_all(self):
        self._reset_indices(self._all)
        return self._obs

    def reset_done(self):
        """Start fresh episodes in every terminated slot."""
        idx = np.flatnonzero(self.done)
        if idx.size:
            self._reset_indices(idx)
        return self._obs

    def step(self, actions):
        """Advance every environment one step; all must be live.

        Returns (obs, reward, done_now, final_distance); reward is nonzero only
        where done_now is set.
        """
        if self.done.any():
            raise RuntimeError("step() on terminated episodes; call reset_done() first")
        cfg = self.cfg
        actions = np.asarray(actions, dtype=float)
        if actions.shape != (self.n,):
            raise ValueError(f"actions must have shape ({self.n},)")
        if not np.isfinite(actions).all():
            raise ValueError("non-finite action")

        xi = self._heading.standard_normal(self._all)
        self.theta = self.theta + actions * cfg.dt + math.sqrt(2.0 * cfg.rot_diffusion * cfg.dt) * xi
        self.pos[:, 0] += cfg.speed * cfg.dt * np.cos(self.theta)
        self.pos[:, 1] += cfg.speed * cfg.dt * np.sin(self.theta)
        self.step_k += 1
        self.prev_action = actions.copy()

        dist = np.sqrt(np.sum(self.pos * self.pos, axis=1))
        captured = dist <= cfg.delta_capture
        timeout = self.step_k >= cfg.n_max_steps
        done_now = captured | timeout
        t_now = self.step_k * cfg.dt
        self.tau = np.where(captured, t_now, self.tau)
        self.captured |= captured
        self.done |= done_now

        reward = np.zeros(self.n)
        if done_now.any():
            j = np.flatnonzero(done_now)
            reward[j] = terminal_reward_values(captured[j], t_now[j], dist[j], self.d0[j], cfg)

        self._measure(self._all)
        return self._obs, reward, done_now, dist


class SingleEnv:
    """One environment with the scalar-state API used by tests and demos."""

    def __init__(self, cfg, seed, frame_rotation=0.0):
        self._batch = BatchedEnv(cfg, 1, seed, frame_rotation=frame_rotation)
        self.cfg = cfg

    @property
    def state(self):
        b = self._batch
        tau = float(b.tau[0]) if np.isfinite(b.tau[0]) else None
        return EnvState(b.pos[0].copy(), float(b.theta[0]), float(b.c0[0]),
                        float(b.t[0]), bool(b.done[0]), tau, float(b.d0[0]),
                        streams=b)

    def reset(self):
        obs = self._batch.reset_all()
        return self.state, obs.row(0)

    def step(self, action):
        obs, reward, done_now, _ = self._batch.step(np.array([action], dtype=float))
        return self.state, obs.row(0), bool(done_now[0])

    def terminal_reward(self):
        b = self._batch
        if not b.done[0]:
            raise RuntimeError("terminal_reward on a live episode")
        dist = float(np.hypot(b.pos[0, 0], b.pos[0, 1]))
        tau = b.tau[0] if np.isfinite(b.tau[0]) else b.t[0]
        return float(terminal_reward_values(bool(b.captured[0]), tau, dist,
                                            float(b.d0[0]), self.cfg))


TRAJECTORY_COLUMNS = ("t", "x", "y", "theta", "m", "action", "c0", "done")


def rollout_episode(cfg, action_fn, seed, max_steps=None):
    """Run one episode under action_fn(Observation) -> rad/s; returns row dicts.

    Row i holds the pose and measurement at time t_i together with the action
    chosen there (applied during the following step).
    """
    env = SingleEnv(cfg, seed)
    state, obs = env.reset()
    rows = []
    n_cap = max_steps if max_steps is not None else cfg.n_max_steps
    done = False
    while True:
        action = 0.0 if done else float(action_fn(obs))
        rows.append({
            "t": state.t, "x": float(state.position[0]), "y": float(state.position[1]),
            "theta": state.heading, "m": [float(v) for v in obs.m],
            "action": action, "c0": state.c0, "done": done,
        })
        if done or len(rows) > n_cap:
            break
        state, obs, done = env.step(action)
    return rows


def write_trajectory_jsonl(rows, path):
    with open(path, "w") as fh:
        for row in rows:
            fh.write(json.dumps(row) + "\n")


def read_trajectory_jsonl(path):
    with open(path) as fh:
        return [json.loads(line) for line in fh if line.strip()]


def write_trajectory_csv(rows, path):
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(TRAJECTORY_COLUMNS)
        for row in rows:
            out = dict(row)
            out["m"] = " ".join(repr(v) for v in row["m"])
            out["done"] = int(row["done"])
            writer.writerow([out[c] for c in TRAJECTORY_COLUMNS])


def read_trajectory_csv(path):
    rows = []
    with open(path, newline="") as fh:
        for rec in csv.DictReader(fh):
            rows.append({
                "t": float(rec["t"]), "x": float(rec["x"]), "y": float(rec["y"]),
                "theta": float(rec["theta"]),
                "m": [float(v) for v in rec["m"].split()],
                "action": float(rec["action"]), "c0": float(rec["c0"]),
                "done": bool(int(rec["done"])),
            })
    return rows
