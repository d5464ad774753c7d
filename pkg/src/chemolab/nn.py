"""Minimal float64 neural-network core with hand-written exact gradients.

Three policy variants map sensor readouts to a steering distribution and a
value estimate:

* spatial   -- feedforward MLP over the K individual log-counts
* temporal  -- GRU over [mean log-count, previous action]
* combined  -- GRU over [K log-counts, previous action]

All variants share a trunk feeding three heads: action mean (rad/s), raw
standard deviation (softplus + floor), and value.  Gradients are computed in
closed form so they can be verified against finite differences exactly.
"""

import hashlib
import json
import math
from dataclasses import dataclass, field

import numpy as np

VARIANTS = ("spatial", "temporal", "combined")

# fixed affine normalization of log-counts before the network
OBS_SHIFT = 1.5
OBS_SCALE = 1.5

SIGMA_FLOOR = 1e-3

CHECKPOINT_FORMAT = "chemolab-policy"
CHECKPOINT_VERSION = 1


@dataclass
class VariantSpec:
    """Architecture of one policy variant."""

    kind: str
    n_sensors: int = 5
    hidden: int = 32               # GRU width; 0 for the feedforward variant
    mlp_widths: tuple = (64, 64)   # spatial trunk
    post_width: int = 32           # dense layer after the GRU

    def __post_init__(self):
        if self.kind not in VARIANTS:
            raise ValueError(f"unknown variant {self.kind!r}")
        self.mlp_widths = tuple(int(w) for w in self.mlp_widths)
        if self.kind == "spatial":
            self.hidden = 0
        elif self.hidden <= 0:
            raise ValueError("recurrent variants need hidden > 0")

    @property
    def input_dim(self):
        if self.kind == "spatial":
            return self.n_sensors
        if self.kind == "temporal":
            return 2
        return self.n_sensors + 1

    @property
    def trunk_width(self):
        return self.mlp_widths[-1] if self.kind == "spatial" else self.post_width

    def feature_names(self):
        if self.kind == "spatial":
            return [f"m{i}" for i in range(self.n_sensors)]
        if self.kind == "temporal":
            return ["m_mean", "prev_action"]
        return [f"m{i}" for i in range(self.n_sensors)] + ["prev_action"]


def assemble_input(spec, m, m_mean, prev_action):
    """Stack raw observation features in the variant's input layout."""
    if spec.kind == "spatial":
        return np.asarray(m, dtype=float)
    if spec.kind == "temporal":
        return np.stack([np.asarray(m_mean, dtype=float),
                         np.asarray(prev_action, dtype=float)], axis=-1)
    return np.concatenate([np.asarray(m, dtype=float),
                           np.asarray(prev_action, dtype=float)[..., None]], axis=-1)


def n_measurement_features(spec):
    """Leading input slots holding log-count features (the rest is motor)."""
    return spec.input_dim if spec.kind == "spatial" else spec.input_dim - 1


# ------------------------------------------------------------------ params

def orthogonal(rng, rows, cols, gain=1.0):
    a = rng.standard_normal((max(rows, cols), min(rows, cols)))
    q, r = np.linalg.qr(a)
    q = q * np.sign(np.diag(r))
    if rows < cols:
        q = q.T
    return gain * q[:rows, :cols]


def param_layout(spec):
    """Ordered (name, shape) pairs defining the flat checkpoint layout."""
    d, h, w = spec.input_dim, spec.hidden, spec.trunk_width
    layout = []
    if spec.kind == "spatial":
        prev = d
        for i, width in enumerate(spec.mlp_widths):
            layout += [(f"fc{i}_w", (prev, width)), (f"fc{i}_b", (width,))]
            prev = width
    else:
        for gate in ("z", "r", "h"):
            layout += [(f"gru_w{gate}", (d + h, h)), (f"gru_b{gate}", (h,))]
        layout += [("post_w", (h, w)), ("post_b", (w,))]
    for head in ("mu", "sig", "val"):
        layout += [(f"{head}_w", (w, 1)), (f"{head}_b", (1,))]
    return layout


class ParamStore:
    """Named float64 parameter arrays with a fixed flattening order."""

    def __init__(self, spec, arrays):
        self.spec = spec
        self.names = [name for name, _ in param_layout(spec)]
        self.arrays = {}
        for name, shape in param_layout(spec):
            arr = np.asarray(arrays[name], dtype=float)
            if arr.shape != shape:
                raise ValueError(f"parameter {name}: shape {arr.shape} != {shape}")
            if not np.isfinite(arr).all():
                raise ValueError(f"parameter {name} has non-finite entries")
            self.arrays[name] = arr

    def __getitem__(self, name):
        return self.arrays[name]

    def __setitem__(self, name, value):
        self.arrays[name][...] = value

    @property
    def count(self):
        return sum(a.size for a in self.arrays.values())

    def flat(self):
        return np.concatenate([self.arrays[n].ravel() for n in self.names])

    def set_flat(self, vec):
        off = 0
        for n in self.names:
            a = self.arrays[n]
            a[...] = vec[off:off + a.size].reshape(a.shape)
            off += a.size

    def copy(self):
        return ParamStore(self.spec, {n: a.copy() for n, a in self.arrays.items()})

    def zeros_like(self):
        return {n: np.zeros_like(a) for n, a in self.arrays.items()}


def init_params(spec, seed, mu_gain=0.01):
    """Orthogonal weights (gain 1.0; small gain on the action-mean head so the
    initial policy steers gently), zero biases."""
    rng = np.random.default_rng(seed)
    arrays = {}
    for name, shape in param_layout(spec):
        if len(shape) == 1:  # bias
            arrays[name] = np.zeros(shape)
        else:
            gain = mu_gain if name == "mu_w" else 1.0
            arrays[name] = orthogonal(rng, *shape, gain=gain)
    return ParamStore(spec, arrays)


# ------------------------------------------------------------------ primitives

def sigmoid(x):
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def softplus(x):
    return np.maximum(x, 0.0) + np.log1p(np.exp(-np.abs(x)))


def dense_forward(x, w, b):
    x = np.asarray(x, dtype=float)
    if x.shape[-1] != w.shape[0]:
        raise ValueError(f"dense: input width {x.shape[-1]} != {w.shape[0]}")
    return x @ w + b


def dense_backward(x, w, grad_out):
    """Adjoints of y = x @ w + b."""
    grad_x = grad_out @ w.T
    grad_w = x.T @ grad_out
    grad_b = grad_out.sum(axis=0)
    return grad_x, grad_w, grad_b


def gru_step(x, h, p):
    """One GRU update; returns (h_new, cache).

    z = sig(Wz [x,h]), r = sig(Wr [x,h]), cand = tanh(Wh [x, r*h]),
    h' = (1 - z) * h + z * cand.  Components of h' stay in (-1, 1).
    """
    xh = np.concatenate([x, h], axis=-1)
    z = sigmoid(dense_forward(xh, p["gru_wz"], p["gru_bz"]))
    r = sigmoid(dense_forward(xh, p["gru_wr"], p["gru_br"]))
    xrh = np.concatenate([x, r * h], axis=-1)
    cand = np.tanh(dense_forward(xrh, p["gru_wh"], p["gru_bh"]))
    h_new = (1.0 - z) * h + z * cand
    return h_new, (x, h, xh, z, r, xrh, cand)


def gru_backward(cache, p, grad_h_new, grads):
    """Adjoints of one GRU step; accumulates into grads, returns (dx, dh)."""
    x, h, xh, z, r, xrh, cand = cache
    d = x.shape[-1]
    dz = grad_h_new * (cand - h)
    dcand = grad_h_new * z
    dh = grad_h_new * (1.0 - z)

    da_h = dcand * (1.0 - cand * cand)
    dxrh, dwh, dbh = dense_backward(xrh, p["gru_wh"], da_h)
    grads["gru_wh"] += dwh
    grads["gru_bh"] += dbh
    dx = dxrh[:, :d].copy()
    drh = dxrh[:, d:]
    dr = drh * h
    dh += drh * r

    da_r = dr * r * (1.0 - r)
    dxh_r, dwr, dbr = dense_backward(xh, p["gru_wr"], da_r)
    grads["gru_wr"] += dwr
    grads["gru_br"] += dbr

    da_z = dz * z * (1.0 - z)
    dxh_z, dwz, dbz = dense_backward(xh, p["gru_wz"], da_z)
    grads["gru_wz"] += dwz
    grads["gru_bz"] += dbz

    dxh = dxh_r + dxh_z
    dx += dxh[:, :d]
    dh += dxh[:, d:]
    return dx, dh


# ------------------------------------------------------------------ policy

def _standardize(spec, x):
    n_m = n_measurement_features(spec)
    out = x.astype(float, copy=True)
    out[..., :n_m] = (out[..., :n_m] - OBS_SHIFT) / OBS_SCALE
    return out


def _trunk_forward(params, spec, x, h):
    """Trunk up to (but excluding) the heads; returns (trunk, h_new, cache)."""
    xs = _standardize(spec, x)
    if spec.kind == "spatial":
        acts = [xs]
        cur = xs
        for i in range(len(spec.mlp_widths)):
            cur = np.tanh(dense_forward(cur, params[f"fc{i}_w"], params[f"fc{i}_b"]))
            acts.append(cur)
        return cur, h, ("mlp", acts)
    h_new, gru_cache = gru_step(xs, h, params)
    post = np.tanh(dense_forward(h_new, params["post_w"], params["post_b"]))
    return post, h_new, ("gru", gru_cache, h_new, post)


def _trunk_backward(params, spec, cache, d_trunk, d_h_new, grads):
    """Adjoints through the trunk; returns (d_x_raw, d_h_prev)."""
    if cache[0] == "mlp":
        acts = cache[1]
        cur = d_trunk
        for i in reversed(range(len(spec.mlp_widths))):
            da = cur * (1.0 - acts[i + 1] ** 2)
            cur, dw, db = dense_backward(acts[i], params[f"fc{i}_w"], da)
            grads[f"fc{i}_w"] += dw
            grads[f"fc{i}_b"] += db
        d_x = cur
        d_h = np.zeros((d_trunk.shape[0], 0))
    else:
        _, gru_cache, h_new, post = cache
        da = d_trunk * (1.0 - post * post)
        d_hn, dw, db = dense_backward(h_new, params["post_w"], da)
        grads["post_w"] += dw
        grads["post_b"] += db
        d_hn = d_hn + d_h_new
        d_x, d_h = gru_backward(gru_cache, params, d_hn, grads)
    n_m = n_measurement_features(spec)
    d_x = d_x.copy()
    d_x[..., :n_m] /= OBS_SCALE
    return d_x, d_h


def policy_forward(params, spec, x, h=None, want_cache=False):
    """Evaluate the policy on raw inputs x (B, D) with hidden state h (B, H).

    Returns (mu, sigma, value, h_new[, cache]); the spatial variant ignores h
    and returns an empty hidden state.
    """
    x = np.atleast_2d(np.asarray(x, dtype=float))
    if x.shape[-1] != spec.input_dim:
        raise ValueError(f"{spec.kind} expects {spec.input_dim} inputs, got {x.shape[-1]}")
    if h is None or spec.kind == "spatial":
        h = np.zeros((x.shape[0], spec.hidden))
    h = np.atleast_2d(np.asarray(h, dtype=float))
    if h.shape != (x.shape[0], spec.hidden):
        raise ValueError(f"hidden state must have shape ({x.shape[0]}, {spec.hidden})")
    trunk, h_new, cache = _trunk_forward(params, spec, x, h)
    mu = dense_forward(trunk, params["mu_w"], params["mu_b"])[:, 0]
    raw = dense_forward(trunk, params["sig_w"], params["sig_b"])[:, 0]
    sigma = softplus(raw) + SIGMA_FLOOR
    value = dense_forward(trunk, params["val_w"], params["val_b"])[:, 0]
    if want_cache:
        return mu, sigma, value, h_new, (cache, trunk, raw)
    return mu, sigma, value, h_new


def policy_backward(params, spec, cache, d_mu=None, d_sigma=None, d_value=None,
                    d_h_new=None, grads=None):
    """Adjoints of policy_forward; returns (grads, d_x, d_h_prev).

    Seed gradients default to zero; d_sigma is taken w.r.t. sigma itself (the
    softplus chain is applied here).
    """
    trunk_cache, trunk, raw = cache
    b = trunk.shape[0]
    if grads is None:
        grads = {n: np.zeros_like(params[n]) for n in params.names}
    d_trunk = np.zeros_like(trunk)
    for name, seed in (("mu", d_mu), ("sig", d_sigma), ("val", d_value)):
        if seed is None:
            continue
        seed = np.asarray(seed, dtype=float).reshape(b, 1)
        if name == "sig":
            seed = seed * sigmoid(raw)[:, None]
        dt, dw, db = dense_backward(trunk, params[f"{name}_w"], seed)
        grads[f"{name}_w"] += dw
        grads[f"{name}_b"] += db
        d_trunk += dt
    if d_h_new is None:
        d_h_new = np.zeros((b, spec.hidden))
    d_x, d_h = _trunk_backward(params, spec, trunk_cache, d_trunk, d_h_new, grads)
    return grads, d_x, d_h


def forward_sequence(params, spec, xs, h0, reset_before=None, want_cache=False):
    """Unroll a (B, L, D) segment; reset_before[:, l] zeroes h entering step l.

    Returns (mu, sigma, value, h_last[, caches]) with (B, L) outputs.
    """
    b, length, _ = xs.shape
    h = np.zeros((b, spec.hidden)) if h0 is None else h0.astype(float, copy=True)
    mus = np.empty((b, length))
    sigmas = np.empty((b, length))
    values = np.empty((b, length))
    caches = []
    for l in range(length):
        if reset_before is not None and l > 0:
            h = h * (1.0 - reset_before[:, l])[:, None]
        out = policy_forward(params, spec, xs[:, l], h, want_cache=want_cache)
        mu, sg, val, h = out[:4]
        mus[:, l], sigmas[:, l], values[:, l] = mu, sg, val
        if want_cache:
            caches.append(out[4])
    if want_cache:
        return mus, sigmas, values, h, caches
    return mus, sigmas, values, h


def backward_sequence(params, spec, caches, d_mu, d_sigma, d_value,
                      reset_before=None, d_h_last=None, want_input_grads=False):
    """BPTT through a segment unrolled by forward_sequence.

    Seeds are (B, L) arrays aligned with the forward outputs.  Returns
    (grads, d_h0) or (grads, d_h0, d_xs) when input gradients are requested.
    """
    length = len(caches)
    b = d_mu.shape[0]
    grads = {n: np.zeros_like(params[n]) for n in params.names}
    d_h = (np.zeros((b, spec.hidden)) if d_h_last is None
           else d_h_last.astype(float, copy=True))
    d_xs = np.empty((b, length, spec.input_dim)) if want_input_grads else None
    for l in reversed(range(length)):
        grads, d_x, d_h = policy_backward(
            params, spec, caches[l], d_mu=d_mu[:, l], d_sigma=d_sigma[:, l],
            d_value=d_value[:, l], d_h_new=d_h, grads=grads)
        if want_input_grads:
            d_xs[:, l] = d_x
        if reset_before is not None and l > 0:
            d_h = d_h * (1.0 - reset_before[:, l])[:, None]
    if want_input_grads:
        return grads, d_h, d_xs
    return grads, d_h


# ------------------------------------------------------------------ gaussian head

def gaussian_sample(mu, sigma, normals):
    """Draw actions mu + sigma * xi from caller-supplied standard normals."""
    return mu + sigma * normals


def gaussian_log_prob(mu, sigma, action):
    z = (action - mu) / sigma
    return -0.5 * z * z - np.log(sigma) - 0.5 * math.log(2.0 * math.pi)


def gaussian_entropy(sigma):
    return 0.5 * math.log(2.0 * math.pi * math.e) + np.log(sigma)


# ------------------------------------------------------------------ checkpoints

def config_hash(*configs):
    """Stable hash of the JSON-serializable configs a run depends on."""
    blob = json.dumps([c for c in configs], sort_keys=True, default=str)
    return hashlib.sha256(blob.encode()).hexdigest()[:16]


def save_checkpoint(path, params, meta=None):
    """Write a JSON header line followed by the flat little-endian float64 blob."""
    spec = params.spec
    payload = params.flat().astype("<f8").tobytes()
    header = {
        "format": CHECKPOINT_FORMAT,
        "version": CHECKPOINT_VERSION,
        "variant": spec.kind,
        "n_sensors": spec.n_sensors,
        "hidden": spec.hidden,
        "mlp_widths": list(spec.mlp_widths),
        "post_width": spec.post_width,
        "params": [[n, list(s)] for n, s in param_layout(spec)],
        "sha256": hashlib.sha256(payload).hexdigest(),
        "meta": dict(meta or {}),
    }
    with open(path, "wb") as fh:
        fh.write(json.dumps(header).encode() + b"\n")
        fh.write(payload)


class CheckpointError(RuntimeError):
    pass


def load_checkpoint(path, expect_variant=None):
    """Read a checkpoint; returns (params, spec, meta).

    Rejects unknown formats, variant mismatches, payload corruption, and
    shape disagreements, naming the offending field.
    """
    with open(path, "rb") as fh:
        header_line = fh.readline()
        payload = fh.read()
    try:
        header = json.loads(header_line.decode())
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CheckpointError(f"{path}: unreadable checkpoint header ({exc})")
    if header.get("format") != CHECKPOINT_FORMAT:
        raise CheckpointError(f"{path}: not a {CHECKPOINT_FORMAT} file")
    if header.get("version") != CHECKPOINT_VERSION:
        raise CheckpointError(f"{path}: unsupported version {header.get('version')}")
    if expect_variant is not None and header["variant"] != expect_variant:
        raise CheckpointError(
            f"{path}: holds a {header['variant']} policy, expected {expect_variant}")
    if hashlib.sha256(payload).hexdigest() != header["sha256"]:
        raise CheckpointError(f"{path}: payload checksum mismatch")
    spec = VariantSpec(header["variant"], n_sensors=header["n_sensors"],
                       hidden=max(header["hidden"], 1) if header["variant"] != "spatial" else 0,
                       mlp_widths=tuple(header["mlp_widths"]),
                       post_width=header["post_width"])
    expected = [[n, list(s)] for n, s in param_layout(spec)]
    if header["params"] != expected:
        raise CheckpointError(f"{path}: parameter layout mismatch")
    vec = np.frombuffer(payload, dtype="<f8").astype(float)
    if vec.size != sum(np.prod(s) for _, s in param_layout(spec)):
        raise CheckpointError(f"{path}: payload size mismatch")
    arrays = {}
    off = 0
    for name, shape in param_layout(spec):
        size = int(np.prod(shape))
        arrays[name] = vec[off:off + size].reshape(shape)
        off += size
    return ParamStore(spec, arrays), spec, header.get("meta", {})
