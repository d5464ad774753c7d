"""Independent numerical oracles shared by the unit and acceptance suites."""

import numpy as np

from chemolab.nn import (
    backward_sequence,
    forward_sequence,
    policy_backward,
    policy_forward,
)


def fd_gradient(loss_fn, params, eps=1e-6):
    """Central-difference gradient of a scalar loss over flat parameters."""
    vec = params.flat()
    grad = np.zeros_like(vec)
    for i in range(vec.size):
        step = eps * max(1.0, abs(vec[i]))
        up, dn = vec.copy(), vec.copy()
        up[i] += step
        dn[i] -= step
        params.set_flat(up)
        f_up = loss_fn()
        params.set_flat(dn)
        f_dn = loss_fn()
        grad[i] = (f_up - f_dn) / (2.0 * step)
    params.set_flat(vec)
    return grad


def flatten_grads(params, grads):
    return np.concatenate([grads[n].ravel() for n in params.names])


def policy_fd_check(params, spec, x, h, rng):
    """Max mismatch |analytic - fd| / (1 + |fd|) for a random linear loss."""
    b = x.shape[0]
    w_mu = rng.standard_normal(b)
    w_sig = rng.standard_normal(b)
    w_val = rng.standard_normal(b)
    w_h = rng.standard_normal((b, spec.hidden))

    def loss():
        mu, sg, val, hn = policy_forward(params, spec, x, h)
        return float((w_mu * mu).sum() + (w_sig * sg).sum()
                     + (w_val * val).sum() + (w_h * hn).sum())

    mu, sg, val, hn, cache = policy_forward(params, spec, x, h, want_cache=True)
    grads, _, _ = policy_backward(params, spec, cache, d_mu=w_mu, d_sigma=w_sig,
                                  d_value=w_val, d_h_new=w_h)
    analytic = flatten_grads(params, grads)
    numeric = fd_gradient(loss, params)
    return np.max(np.abs(analytic - numeric) / (1.0 + np.abs(numeric)))


def bptt_fd_check(params, spec, xs, h0, reset_before, rng):
    """Finite-difference check of backward_sequence over a full segment."""
    b, length, _ = xs.shape
    w_mu = rng.standard_normal((b, length))
    w_sig = rng.standard_normal((b, length))
    w_val = rng.standard_normal((b, length))
    w_h = rng.standard_normal((b, spec.hidden))

    def loss():
        mu, sg, val, h_last = forward_sequence(params, spec, xs, h0, reset_before)
        return float((w_mu * mu).sum() + (w_sig * sg).sum()
                     + (w_val * val).sum() + (w_h * h_last).sum())

    out = forward_sequence(params, spec, xs, h0, reset_before, want_cache=True)
    caches = out[4]
    grads, _ = backward_sequence(params, spec, caches, w_mu, w_sig, w_val,
                                 reset_before=reset_before, d_h_last=w_h)
    analytic = flatten_grads(params, grads)
    numeric = fd_gradient(loss, params)
    return np.max(np.abs(analytic - numeric) / (1.0 + np.abs(numeric)))


def gae_reference(rewards, values, dones, bootstrap, gamma, lam):
    """Direct double-loop advantage recursion, for exactness checks."""
    t_steps, n_envs = rewards.shape
    adv = np.zeros_like(rewards)
    for env in range(n_envs):
        for t in range(t_steps):
            acc = 0.0
            discount = 1.0
            for k in range(t, t_steps):
                v_next = bootstrap[env] if k == t_steps - 1 else values[k + 1, env]
                delta = (rewards[k, env]
                         + gamma * v_next * (1.0 - dones[k, env])
                         - values[k, env])
                acc += discount * delta
                if dones[k, env]:
                    break
                discount *= gamma * lam
            adv[t, env] = acc
    return adv
