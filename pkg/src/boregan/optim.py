"""RMSProp with running squared-gradient scaling, plus hard weight clipping."""

from __future__ import annotations

import numpy as np

RMSPROP_RHO = 0.9
RMSPROP_EPS = 1e-8


def init_opt_state(params: dict) -> dict:
    """Zeroed running second-moment accumulator per parameter."""
    return {name: np.zeros_like(arr) for name, arr in params.items()}


def _check_keys(params: dict, other: dict, what: str) -> None:
    pk, ok = set(params), set(other)
    if pk != ok:
        missing = sorted(pk - ok)
        extra = sorted(ok - pk)
        raise KeyError(f"{what} keys do not match params (missing {missing}, extra {extra})")


def rmsprop_step(
    params: dict,
    grads: dict,
    state: dict,
    lr: float,
    rho: float = RMSPROP_RHO,
    eps: float = RMSPROP_EPS,
) -> dict:
    """One in-place RMSProp update: s <- rho*s + (1-rho)*g^2; p -= lr*g/(sqrt(s)+eps)."""
    _check_keys(params, grads, "grads")
    _check_keys(params, state, "state")
    for name, p in params.items():
        g = grads[name]
        if g.shape != p.shape:
            raise ValueError(f"grad shape {g.shape} != param shape {p.shape} for {name!r}")
        s = state[name]
        s *= rho
        s += (1.0 - rho) * g * g
        p -= lr * g / (np.sqrt(s) + eps)
    return params


def clip_weights(params: dict, clip: float) -> dict:
    """Clamp every parameter into [-clip, clip] in place."""
    if not clip > 0.0:
        raise ValueError(f"clip threshold must be positive, got {clip}")
    for arr in params.values():
        np.clip(arr, -clip, clip, out=arr)
    return params
