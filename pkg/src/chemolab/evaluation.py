"""Policy evaluation: chemotactic efficiency, arrival-time statistics, radius
sweeps, and explicit-policy benchmarks.

Episodes are assigned round-robin to a fixed-width batch of environments, so a
given (seed, n_envs) pair reproduces results bit-for-bit regardless of how the
work is scheduled.  Efficiency per episode is (d0 - delta)/(v * tau); episodes
that never capture within the evaluation horizon are kept with tau = horizon
(a lower bound on their efficiency) and reported as censored.
"""

import csv
import json
import math
import os
from dataclasses import dataclass, asdict, field

import numpy as np

from .baselines import (
    BlindPolicy,
    KernelPolicy,
    KernelSpec,
    NetworkPolicy,
    SwitchingPolicy,
)
from .env import BatchedEnv, EnvConfig
from .nn import load_checkpoint
from .rng import UniformSupply, seed_root

DEFAULT_HORIZON = 7200.0  # seconds; calibrated so the blind reference sits near 0.02


@dataclass
class EvalConfig:
    n_episodes: int = 2 ** 14
    horizon: float = DEFAULT_HORIZON
    n_envs: int = 1024
    bootstrap_samples: int = 10_000
    seed: int = 1000
    histogram_bins: int = 40

    def validate(self):
        if self.n_episodes <= 0:
            raise ValueError("n_episodes must be positive")
        if self.horizon <= 0:
            raise ValueError("horizon must be positive")


@dataclass
class EpisodeRecords:
    """Per-episode outcomes of one evaluation."""

    d0: np.ndarray
    tau: np.ndarray        # inf where censored
    c0: np.ndarray
    horizon: float
    speed: float
    delta: float

    @property
    def captured(self):
        return np.isfinite(self.tau)

    @property
    def censored_fraction(self):
        return float(1.0 - self.captured.mean())

    def efficiencies(self):
        tau = np.where(self.captured, self.tau, self.horizon)
        return (self.d0 - self.delta) / (self.speed * tau)


def run_episodes(cfg, policy, eval_cfg, snapshot_hook=None):
    """Evaluate a policy over eval_cfg.n_episodes; returns EpisodeRecords.

    Environment slot i runs episodes i, i + n_envs, ...; policy state is
    cleared whenever a slot starts a new episode.  snapshot_hook(env, obs,
    live_mask) is called once per step for analysis collectors.
    """
    eval_cfg.validate()
    run_cfg = EnvConfig(**{**asdict(cfg), "t_max": eval_cfg.horizon})
    n = min(eval_cfg.n_envs, eval_cfg.n_episodes)
    env = BatchedEnv(run_cfg, n, seed=eval_cfg.seed)
    env.reset_all()
    state = policy.start(n)
    quota = np.full(n, eval_cfg.n_episodes // n)
    quota[: eval_cfg.n_episodes % n] += 1
    finished = np.zeros(n, dtype=np.int64)
    d0 = np.empty(eval_cfg.n_episodes)
    tau = np.empty(eval_cfg.n_episodes)
    c0 = np.empty(eval_cfg.n_episodes)
    d0_live = env.d0.copy()
    c0_live = env.c0.copy()
    while True:
        obs = env.obs
        actions, state = policy.act(obs, state)
        _, _, done_now, _ = env.step(actions)
        if snapshot_hook is not None:
            snapshot_hook(env, obs, ~env.done)
        if done_now.any():
            for i in np.flatnonzero(done_now):
                # slot i owns episodes i, i + n, i + 2n, ...
                if finished[i] < quota[i]:
                    ep = i + n * finished[i]
                    d0[ep] = d0_live[i]
                    c0[ep] = c0_live[i]
                    tau[ep] = env.tau[i] if np.isfinite(env.tau[i]) else np.inf
                finished[i] += 1
            if (finished >= quota).all():
                break
            env.reset_done()
            d0_live[done_now] = env.d0[done_now]
            c0_live[done_now] = env.c0[done_now]
            state = policy.on_env_reset(state, np.flatnonzero(done_now))
    return EpisodeRecords(d0, tau, c0, eval_cfg.horizon, run_cfg.speed,
                          run_cfg.delta_capture)


def run_blind_fast(cfg, eval_cfg):
    """Blind-agent episodes without sensing, bit-identical to run_episodes with
    BlindPolicy.

    The zero-action trajectory touches only the reset and heading streams, and
    those are split per purpose, so skipping the Poisson draws changes nothing.
    Heading noise is consumed in chunks and handed back beyond each episode's
    end to keep stream positions aligned with the stepwise engine.
    """
    eval_cfg.validate()
    n = min(eval_cfg.n_envs, eval_cfg.n_episodes)
    n_eps = eval_cfg.n_episodes
    horizon_steps = max(1, int(round(eval_cfg.horizon / cfg.dt)))
    env_seeds = seed_root(eval_cfg.seed).spawn(n)
    reset_gens = []
    heading_ss = []
    for ss in env_seeds:
        a, b, _count_unused = ss.spawn(3)
        reset_gens.append(np.random.Generator(np.random.Philox(a)))
        heading_ss.append(b)
    chunk = 256
    heading = UniformSupply(heading_ss, buf_size=4 * chunk)
    lo, hi = math.log(cfg.c0_min_factor), math.log(cfg.c0_max_factor)
    base = cfg.base_amplitude

    pos = np.zeros((n, 2))
    theta = np.zeros(n)
    steps = np.zeros(n, dtype=np.int64)
    d0_live = np.zeros(n)
    c0_live = np.zeros(n)

    def reset_slot(i):
        g = reset_gens[i]
        d0_live[i] = g.uniform(cfg.d0_min, cfg.d0_max)
        place = g.uniform(0.0, 2.0 * math.pi)
        theta[i] = g.uniform(0.0, 2.0 * math.pi)
        c0_live[i] = base * math.exp(g.uniform(lo, hi))
        pos[i] = d0_live[i] * np.array([math.cos(place), math.sin(place)])
        steps[i] = 0

    for i in range(n):
        reset_slot(i)

    quota = np.full(n, n_eps // n)
    quota[: n_eps % n] += 1
    finished = np.zeros(n, dtype=np.int64)
    d0 = np.empty(n_eps)
    tau = np.empty(n_eps)
    c0 = np.empty(n_eps)
    all_idx = np.arange(n)
    amp = math.sqrt(2.0 * cfg.rot_diffusion * cfg.dt)

    while True:
        u = heading.take(all_idx, 2 * chunk).reshape(n, chunk, 2)
        xi = np.sqrt(-2.0 * np.log1p(-u[..., 0])) * np.cos(2.0 * np.pi * u[..., 1])
        th = theta[:, None] + amp * np.cumsum(xi, axis=1)
        x = pos[:, 0, None] + cfg.speed * cfg.dt * np.cumsum(np.cos(th), axis=1)
        y = pos[:, 1, None] + cfg.speed * cfg.dt * np.cumsum(np.sin(th), axis=1)
        dist = np.hypot(x, y)
        captured = dist <= cfg.delta_capture
        k_grid = steps[:, None] + 1 + np.arange(chunk)
        over = captured | (k_grid >= horizon_steps)
        ends = over.any(axis=1)
        stop = np.where(ends, over.argmax(axis=1), chunk - 1)
        for i in np.flatnonzero(ends):
            j = stop[i]
            heading.put_back(i, 2 * (chunk - 1 - j))
            if finished[i] < quota[i]:
                ep = i + n * finished[i]
                d0[ep] = d0_live[i]
                c0[ep] = c0_live[i]
                tau[ep] = (steps[i] + 1 + j) * cfg.dt if captured[i, j] else np.inf
            finished[i] += 1
            reset_slot(i)
        if (finished >= quota).all():
            break
        cont = ~ends
        pos[cont, 0] = x[cont, -1]
        pos[cont, 1] = y[cont, -1]
        theta[cont] = th[cont, -1]
        steps[cont] += chunk
    return EpisodeRecords(d0, tau, c0, eval_cfg.horizon, cfg.speed,
                          cfg.delta_capture)


# ---------------------------------------------------------------- statistics

def bootstrap_ci(values, n_samples, seed, level=0.95, chunk=200):
    """Percentile bootstrap interval for the mean."""
    rng = np.random.default_rng(seed)
    values = np.asarray(values, dtype=float)
    n = values.size
    means = np.empty(n_samples)
    done = 0
    while done < n_samples:
        m = min(chunk, n_samples - done)
        idx = rng.integers(0, n, size=(m, n))
        means[done:done + m] = values[idx].mean(axis=1)
        done += m
    alpha = 0.5 * (1.0 - level)
    return float(np.quantile(means, alpha)), float(np.quantile(means, 1.0 - alpha))


def efficiency(records, bootstrap_samples=10_000, seed=0):
    """Mean chemotactic efficiency with a bootstrap 95% interval."""
    etas = records.efficiencies()
    if etas.size == 0:
        raise ValueError("no episodes to evaluate")
    lo, hi = bootstrap_ci(etas, bootstrap_samples, seed)
    return float(etas.mean()), lo, hi


def sample_skewness(x):
    x = np.asarray(x, dtype=float)
    mu = x.mean()
    s = x.std()
    return float(((x - mu) ** 3).mean() / s ** 3) if s > 0 else 0.0


def arrival_histogram(records, bins=40, bin_range=None):
    """Normalized arrival-time histogram over captured episodes."""
    taus = records.tau[records.captured]
    if bin_range is None:
        bin_range = (0.0, records.horizon)
    counts, edges = np.histogram(taus, bins=bins, range=bin_range, density=True)
    skew = sample_skewness(taus) if taus.size > 2 else 0.0
    return {"edges": edges, "density": counts, "skewness": skew,
            "n_captured": int(taus.size),
            "censored_fraction": records.censored_fraction}


@dataclass
class EvalReport:
    policy_id: str
    config_hash: str
    n_episodes: int
    eta: float
    ci_low: float
    ci_high: float
    capture_fraction: float
    censored_fraction: float
    skewness: float
    histogram_edges: list
    histogram_density: list
    episodes: dict = field(default_factory=dict)

    def to_json(self, path=None):
        doc = json.dumps(asdict(self), indent=2)
        if path is not None:
            with open(path, "w") as fh:
                fh.write(doc + "\n")
        return doc


def evaluate_policy(cfg, policy, eval_cfg, policy_id="policy", config_hash="",
                    fast_blind=False, keep_episodes=True):
    """Full evaluation: efficiency, CI, histogram, per-episode records."""
    if fast_blind:
        records = run_blind_fast(cfg, eval_cfg)
    else:
        records = run_episodes(cfg, policy, eval_cfg)
    eta, lo, hi = efficiency(records, eval_cfg.bootstrap_samples, eval_cfg.seed)
    hist = arrival_histogram(records, bins=eval_cfg.histogram_bins)
    episodes = {}
    if keep_episodes:
        episodes = {"d0": records.d0.tolist(),
                    "tau": [None if not np.isfinite(t) else t for t in records.tau],
                    "c0": records.c0.tolist(),
                    "seed": eval_cfg.seed}
    report = EvalReport(policy_id, config_hash, eval_cfg.n_episodes, eta, lo, hi,
                        float(records.captured.mean()), records.censored_fraction,
                        hist["skewness"], hist["edges"].tolist(),
                        hist["density"].tolist(), episodes)
    return report, records


# ---------------------------------------------------------------- sweeps

def load_policy(checkpoint_path, expect_variant=None):
    params, spec, meta = load_checkpoint(checkpoint_path, expect_variant)
    return NetworkPolicy(params, spec), spec, meta


def radius_sweep(checkpoint_map, base_cfg, eval_cfg, out_csv=None):
    """Efficiency table over (variant, radius) pairs.

    checkpoint_map: {(variant, radius): checkpoint path}; missing checkpoints
    are reported with empty cells rather than aborting the sweep.
    """
    rows = []
    for (variant, radius), path in sorted(checkpoint_map.items()):
        cfg = EnvConfig(**{**asdict(base_cfg), "radius": float(radius)})
        if path is None or not os.path.exists(str(path)):
            rows.append({"variant": variant, "radius": radius, "eta": "",
                         "ci_low": "", "ci_high": "", "capture_fraction": "",
                         "censored_fraction": "", "n_episodes": 0,
                         "checkpoint": str(path), "status": "missing"})
            continue
        policy, spec, _ = load_policy(path, expect_variant=variant)
        report, _ = evaluate_policy(cfg, policy, eval_cfg, policy_id=variant,
                                    keep_episodes=False)
        rows.append({"variant": variant, "radius": radius, "eta": report.eta,
                     "ci_low": report.ci_low, "ci_high": report.ci_high,
                     "capture_fraction": report.capture_fraction,
                     "censored_fraction": report.censored_fraction,
                     "n_episodes": eval_cfg.n_episodes, "checkpoint": str(path),
                     "status": "ok"})
    if out_csv:
        write_table(rows, out_csv)
    return rows


BASELINE_COLUMNS = ("policy", "T", "epsilon", "A", "B", "threshold", "eta",
                    "ci_low", "ci_high", "n_episodes")


def baseline_sweep(cfg, eval_cfg, kernel_timescales=(), epsilons=(),
                   kernel_kinds=("uniform", "exponential"),
                   thresholds=(), adaptive_gains=(), adaptive_offsets=(),
                   temporal_checkpoint=None, spatial_checkpoint=None,
                   include_uncorrected=False, out_csv=None, progress=None):
    """Explicit-policy benchmark grid; returns best-epsilon rows per config."""
    rows = []

    def note(msg):
        if progress:
            progress(msg)

    def eval_policy(policy, label, **cols):
        report, _ = evaluate_policy(cfg, policy, eval_cfg, policy_id=label,
                                    keep_episodes=False)
        row = {c: "" for c in BASELINE_COLUMNS}
        row.update({"policy": label, "eta": report.eta, "ci_low": report.ci_low,
                    "ci_high": report.ci_high, "n_episodes": eval_cfg.n_episodes})
        row.update(cols)
        return row

    for kind in kernel_kinds:
        for t_scale in kernel_timescales:
            best = None
            for eps in epsilons:
                policy = KernelPolicy(cfg, KernelSpec(kind, t_scale), eps)
                row = eval_policy(policy, f"kernel_{kind}", T=t_scale, epsilon=eps)
                note(f"kernel {kind} T={t_scale} eps={eps} eta={row['eta']:.4f}")
                if best is None or row["eta"] > best["eta"]:
                    best = row
            rows.append(best)
            if include_uncorrected:
                eps = best["epsilon"]
                policy = KernelPolicy(cfg, KernelSpec(kind, t_scale), eps,
                                      corrected=False)
                row = eval_policy(policy, f"kernel_{kind}_uncorrected",
                                  T=t_scale, epsilon=eps)
                note(f"uncorrected {kind} T={t_scale} eta={row['eta']:.4f}")
                rows.append(row)

    if thresholds and temporal_checkpoint and spatial_checkpoint:
        temporal, _, _ = load_policy(temporal_checkpoint, "temporal")
        spatial, _, _ = load_policy(spatial_checkpoint, "spatial")
        for thr in thresholds:
            policy = SwitchingPolicy(temporal, spatial, thr)
            row = eval_policy(policy, "switching", threshold=thr)
            note(f"switching thr={thr} eta={row['eta']:.4f}")
            rows.append(row)

    for gain in adaptive_gains:
        best = None
        for offset in adaptive_offsets:
            for eps in epsilons:
                spec = KernelSpec("uniform", timescale=1.0, adaptive_gain=gain,
                                  adaptive_offset=offset)
                policy = KernelPolicy(cfg, spec, eps)
                row = eval_policy(policy, "adaptive_kernel", A=gain, B=offset,
                                  epsilon=eps)
                note(f"adaptive A={gain} B={offset} eps={eps} eta={row['eta']:.4f}")
                if best is None or row["eta"] > best["eta"]:
                    best = row
        if best is not None:
            rows.append(best)

    if out_csv:
        write_table(rows, out_csv, columns=BASELINE_COLUMNS)
    return rows


def write_table(rows, path, columns=None):
    if not rows:
        raise ValueError("no rows to write")
    if columns is None:
        columns = list(rows[0].keys())
    with open(path, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=columns, extrasaction="ignore")
        writer.writeheader()
        writer.writerows(rows)


def read_table(path):
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


# ---------------------------------------------------------------- figures

def plot_radius_sweep(rows, path):
    import matplotlib
    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    fig, ax = plt.subplots(figsize=(5, 3.4))
    for variant, color in (("spatial", "tab:orange"), ("temporal", "tab:blue"),
                           ("combined", "tab:green")):
        pts = [(float(r["radius"]), float(r["eta"]), float(r["ci_low"]),
                float(r["ci_high"])) for r in rows
               if r["variant"] == variant and r.get("status", "ok") == "ok"
               and r["eta"] != ""]
        if not pts:
            continue
        pts.sort()
        radius, eta, lo, hi = map(np.array, zip(*pts))
        ax.errorbar(radius, eta, yerr=[eta - lo, hi - eta], marker="o",
                    label=variant, color=color, capsize=3)
    ax.set_xscale("log")
    ax.set_xlabel("cell radius (um)")
    ax.set_ylabel("efficiency")
    ax.legend(frameon=False)
    fig.tight_layout()
    fig.savefig(path)
    plt.close(fig)


def plot_arrival_histograms(reports, path):
    import matplotlib
    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    fig, ax = plt.subplots(figsize=(5, 3.4))
    for report in reports:
        edges = np.asarray(report.histogram_edges)
        centers = 0.5 * (edges[1:] + edges[:-1])
        ax.plot(centers, report.histogram_density, label=report.policy_id)
    ax.set_xlabel("arrival time (s)")
    ax.set_ylabel("density")
    ax.legend(frameon=False)
    fig.tight_layout()
    fig.savefig(path)
    plt.close(fig)


def plot_baseline_comparison(rows, reference_etas, path):
    import matplotlib
    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    fig, ax = plt.subplots(figsize=(5.5, 3.4))
    by_policy = {}
    for r in rows:
        by_policy.setdefault(r["policy"], []).append(r)
    for label, rws in by_policy.items():
        if rws[0].get("T", "") != "":
            x = [float(r["T"]) for r in rws]
            xlabel = "memory timescale T (s)"
        elif rws[0].get("threshold", "") != "":
            x = [float(r["threshold"]) for r in rws]
            xlabel = "switch threshold (counts)"
        else:
            x = [float(r["A"]) for r in rws]
            xlabel = "adaptive gain A (s)"
        eta = [float(r["eta"]) for r in rws]
        order = np.argsort(x)
        ax.plot(np.asarray(x)[order], np.asarray(eta)[order], marker="o", label=label)
    for name, value in reference_etas.items():
        ax.axhline(value, linestyle="--", linewidth=1, alpha=0.7)
        ax.annotate(name, (ax.get_xlim()[0], value), fontsize=8,
                    va="bottom", ha="left")
    ax.set_xscale("log")
    ax.set_xlabel(xlabel if by_policy else "parameter")
    ax.set_ylabel("efficiency")
    ax.legend(frameon=False, fontsize=8)
    fig.tight_layout()
    fig.savefig(path)
    plt.close(fig)
