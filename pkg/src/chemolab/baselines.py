"""Interpretable explicit chemotaxis policies.

Naive spatial steering points the cell toward the receptor-weighted direction;
optional memory kernels average past sensor vectors after correcting them for
the cell's own commanded rotation, so stored readings stay aligned with the
current body frame (residual error comes only from rotational diffusion).
A switching policy latches from a temporal to a spatial network at a particle
threshold, and an adaptive variant scales the memory window with the mean
log-signal.
"""

import math
from dataclasses import dataclass

import numpy as np

from .nn import assemble_input, policy_forward


@dataclass
class KernelSpec:
    """Memory-kernel shape: uniform or exponential with timescale T, or an
    adaptive window T = gain * <m> + offset (clamped to one step)."""

    kind: str = "uniform"            # uniform | exponential
    timescale: float = 10.0          # T, seconds
    adaptive_gain: float = None      # A, seconds per unit log-count
    adaptive_offset: float = None    # B, seconds

    def __post_init__(self):
        if self.kind not in ("uniform", "exponential"):
            raise ValueError("kernel kind must be uniform or exponential")
        if not self.adaptive and self.timescale <= 0:
            raise ValueError("timescale must be positive")

    @property
    def adaptive(self):
        return self.adaptive_gain is not None

    def support(self, dt, m_cap=12.0):
        """Longest lookback worth storing, in steps."""
        if self.adaptive:
            t_cap = max(self.adaptive_gain * m_cap + self.adaptive_offset, dt)
        else:
            t_cap = self.timescale
        if self.kind == "exponential":
            t_cap *= 5.0  # truncated tail carries < 1% weight before renormalizing
        return max(1, int(math.ceil(t_cap / dt)))


def naive_angle(weights, angles):
    """Reorientation toward the weight-averaged receptor direction.

    phi = atan2(sum sin(a) w, sum cos(a) w) in (-pi, pi].  A resultant at
    float-residue scale (all weights equal on a symmetric ring, or all zero)
    carries no direction and maps to 0.
    """
    weights = np.asarray(weights, dtype=float)
    angles = np.asarray(angles, dtype=float)
    s = (np.sin(angles) * weights).sum(axis=-1)
    c = (np.cos(angles) * weights).sum(axis=-1)
    phi = np.arctan2(s, c)
    degenerate = np.hypot(s, c) <= 1e-12 * np.abs(weights).sum(axis=-1)
    if phi.ndim:
        return np.where(degenerate, 0.0, phi)
    return 0.0 if degenerate else float(phi)


def clip_steer(phi, epsilon, dt):
    """Bounded reorientation per step, expressed as a rate: clamp(phi)/dt."""
    if epsilon <= 0:
        raise ValueError("epsilon must be positive")
    return np.clip(phi, -epsilon, epsilon) / dt


def adaptive_timescale(m_mean, gain, offset, dt):
    """Linear memory window T = gain * <m> + offset, never below one step."""
    return np.maximum(dt, gain * np.asarray(m_mean, dtype=float) + offset)


def rotate_sensor_vectors(m, rotation, n_sensors):
    """Re-express sensor vectors in a body frame rotated by `rotation`.

    m: (..., K); rotation: (...) radians of accumulated commanded turning since
    the measurement.  The current sensor i points where the old frame had
    angle alpha_i + rotation, so values are circularly shifted with angular
    linear interpolation between the two nearest old sensors.
    """
    m = np.asarray(m, dtype=float)
    rotation = np.asarray(rotation, dtype=float)
    step = 2.0 * math.pi / n_sensors
    f = rotation / step
    base = np.floor(f).astype(np.int64)
    frac = (f - base)[..., None]
    idx = (np.arange(n_sensors) + base[..., None]) % n_sensors
    lo = np.take_along_axis(m, idx, axis=-1)
    hi = np.take_along_axis(m, (idx + 1) % n_sensors, axis=-1)
    return (1.0 - frac) * lo + frac * hi


class MeasurementHistory:
    """Ring buffer of past sensor vectors with their commanded-rotation tags.

    Shapes are batched: capacity L slots for each of N environments.
    """

    def __init__(self, n_envs, n_sensors, capacity):
        self.n = n_envs
        self.k = n_sensors
        self.cap = int(capacity)
        self.buf = np.zeros((self.n, self.cap, self.k))
        self.rot = np.zeros((self.n, self.cap))
        self.head = 0
        self.filled = np.zeros(self.n, dtype=np.int64)

    def clear(self, idx):
        self.filled[idx] = 0

    def append(self, m):
        self.buf[:, self.head] = m
        self.rot[:, self.head] = 0.0
        self.filled = np.minimum(self.filled + 1, self.cap)
        self.head = (self.head + 1) % self.cap

    def apply_rotation(self, delta):
        """Record that the body turned by delta (per env) after the newest entry."""
        self.rot += np.asarray(delta, dtype=float)[:, None]

    def ordered(self):
        """(entries, rotations, valid) newest-first: (N, L, K), (N, L), (N, L)."""
        ages = np.arange(self.cap)
        slots = (self.head - 1 - ages) % self.cap
        valid = ages[None, :] < self.filled[:, None]
        return self.buf[:, slots], self.rot[:, slots], valid

    def corrected(self):
        """History re-expressed in the current body frame, newest-first."""
        entries, rot, valid = self.ordered()
        return rotate_sensor_vectors(entries, rot, self.k), valid


def kernel_weights(spec, ages, valid, timescale=None):
    """Discretized kernel weights renormalized over the available samples."""
    t = spec.timescale if timescale is None else timescale
    t = np.broadcast_to(np.asarray(t, dtype=float)[..., None], ages.shape) \
        if np.ndim(t) else np.full(ages.shape, float(t))
    if spec.kind == "uniform":
        w = np.where(ages <= t, 1.0, 0.0)
    else:
        w = np.exp(-ages / t)
    w = np.where(valid, w, 0.0)
    total = w.sum(axis=-1, keepdims=True)
    # the newest sample always has weight, so total can only vanish when the
    # history is empty
    return np.divide(w, total, out=np.zeros_like(w), where=total > 0)


def kernel_average(history, spec, dt, timescale=None):
    """Convex combination of rotation-corrected history under the kernel."""
    corrected, valid = history.corrected()
    ages = np.arange(history.cap) * dt
    w = kernel_weights(spec, np.broadcast_to(ages, valid.shape), valid, timescale)
    return (w[..., None] * corrected).sum(axis=1)


class KernelPolicy:
    """Naive steering on kernel-averaged, rotation-corrected measurements.

    `corrected=False` reproduces the broken ablation that averages raw sensor
    frames without undoing the cell's own turning.
    """

    def __init__(self, cfg, kernel, epsilon, corrected=True):
        self.cfg = cfg
        self.kernel = kernel
        self.epsilon = float(epsilon)
        self.corrected = corrected
        self.angles = cfg.sensor_angles

    def start(self, n_envs):
        cap = self.kernel.support(self.cfg.dt)
        return MeasurementHistory(n_envs, self.cfg.n_sensors, cap)

    def on_env_reset(self, state, idx):
        state.clear(idx)
        return state

    def act(self, obs, state):
        state.append(obs.m)
        if self.corrected:
            omega = kernel_average(
                state, self.kernel, self.cfg.dt,
                timescale=(adaptive_timescale(obs.m_mean, self.kernel.adaptive_gain,
                                              self.kernel.adaptive_offset, self.cfg.dt)
                           if self.kernel.adaptive else None))
        else:
            entries, _, valid = state.ordered()
            ages = np.arange(state.cap) * self.cfg.dt
            w = kernel_weights(self.kernel, np.broadcast_to(ages, valid.shape), valid)
            omega = (w[..., None] * entries).sum(axis=1)
        phi = naive_angle(omega, self.angles)
        actions = clip_steer(phi, self.epsilon, self.cfg.dt)
        state.apply_rotation(actions * self.cfg.dt)
        return actions, state


class NaiveSpatialPolicy(KernelPolicy):
    """Instantaneous naive steering (zero-memory limit of the kernel policy)."""

    def __init__(self, cfg, epsilon):
        super().__init__(cfg, KernelSpec("uniform", timescale=cfg.dt), epsilon)


class NetworkPolicy:
    """Deterministic (action = mu) wrapper over a trained network."""

    def __init__(self, params, spec):
        self.params = params
        self.spec = spec

    def start(self, n_envs):
        return np.zeros((n_envs, self.spec.hidden))

    def on_env_reset(self, state, idx):
        state[idx] = 0.0
        return state

    def act(self, obs, state):
        x = assemble_input(self.spec, obs.m, obs.m_mean, obs.prev_action)
        mu, _, _, h = policy_forward(self.params, self.spec, x, state)
        return mu, h


class BlindPolicy:
    """Zero-action reference agent."""

    def start(self, n_envs):
        return None

    def on_env_reset(self, state, idx):
        return state

    def act(self, obs, state):
        return np.zeros(obs.m.shape[0]), state


class SwitchingPolicy:
    """Temporal network until the mean raw count reaches a threshold, then the
    spatial network; the switch latches for the rest of the episode."""

    def __init__(self, temporal, spatial, threshold):
        self.temporal = temporal
        self.spatial = spatial
        self.threshold = float(threshold)

    def start(self, n_envs):
        return {"temporal": self.temporal.start(n_envs),
                "spatial": self.spatial.start(n_envs),
                "switched": np.zeros(n_envs, dtype=bool)}

    def on_env_reset(self, state, idx):
        state["temporal"] = self.temporal.on_env_reset(state["temporal"], idx)
        state["spatial"] = self.spatial.on_env_reset(state["spatial"], idx)
        state["switched"][idx] = False
        return state

    def act(self, obs, state):
        mean_counts = obs.counts.mean(axis=1)
        state["switched"] |= mean_counts >= self.threshold
        a_t, state["temporal"] = self.temporal.act(obs, state["temporal"])
        a_s, state["spatial"] = self.spatial.act(obs, state["spatial"])
        return np.where(state["switched"], a_s, a_t), state


class KernelInputPipeline:
    """Observation filter feeding kernel-averaged corrected measurements to a
    downstream policy in place of the instantaneous readings.

    This is the input stage of the hybrid agent: the consumer (a spatial-layout
    network, trained with the usual machinery) sees omega instead of m.
    """

    def __init__(self, cfg, kernel):
        self.cfg = cfg
        self.kernel = kernel
        self.history = None

    def reset(self, n_envs):
        self.history = MeasurementHistory(n_envs, self.cfg.n_sensors,
                                          self.kernel.support(self.cfg.dt))

    def on_env_reset(self, idx):
        self.history.clear(idx)

    def transform(self, obs):
        """Returns (m, m_mean, prev_action) with m replaced by the kernel view."""
        self.history.append(obs.m)
        omega = kernel_average(self.history, self.kernel, self.cfg.dt)
        return omega, omega.mean(axis=1), obs.prev_action

    def notify_actions(self, actions):
        self.history.apply_rotation(np.asarray(actions) * self.cfg.dt)
