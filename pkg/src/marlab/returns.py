"""Bootstrapped target construction: 1-step TD, TD(lambda), Peng's Q(lambda).

All functions take (B, T) float64 arrays and return (B, T) targets with
masked (padding) steps zeroed. The lambda returns share one backward
recursion,

    G_t = r_t + gamma * (1 - terminated_t) * ((1 - lam) * boot_t + lam * G_{t+1}),

where the bootstrap column is max-Q from the target network for Peng's
Q(lambda) and a state value for TD(lambda). Past the last valid step
G_{t+1} falls back to boot_t, so the final valid step of a truncated
episode reduces to the 1-step bootstrap; termination (gamma cut) and
truncation (padding) are distinct.

Pure functions; trainers pass target-network outputs in explicitly.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import kernels

TARGET_KINDS = ("one-step", "td-lambda", "peng-q-lambda")


@dataclass(frozen=True)
class TargetSpec:
    """Which target rule to use and its lambda/gamma."""

    kind: str
    lam: float = 0.6
    gamma: float = 0.99

    def __post_init__(self):
        if self.kind not in TARGET_KINDS:
            raise ValueError(f"unknown target kind {self.kind!r}")
        if not 0.0 <= self.lam <= 1.0:
            raise ValueError(f"lambda must be in [0, 1], got {self.lam}")
        if not 0.0 <= self.gamma < 1.0:
            raise ValueError(f"gamma must be in [0, 1), got {self.gamma}")


def _validate(r, boot, terminated, mask):
    r = np.asarray(r, dtype=np.float64)
    boot = np.asarray(boot, dtype=np.float64)
    terminated = np.asarray(terminated, dtype=np.float64)
    mask = np.asarray(mask, dtype=np.float64)
    if not (r.shape == boot.shape == terminated.shape == mask.shape):
        raise ValueError(
            "shape mismatch: "
            f"r{r.shape} bootstrap{boot.shape} terminated{terminated.shape} mask{mask.shape}"
        )
    if r.ndim != 2:
        raise ValueError(f"expected (B, T) arrays, got ndim={r.ndim}")
    return r, boot, terminated, mask


def one_step_targets(r, bootstrap, terminated, mask, gamma):
    """y_t = r_t + gamma * (1 - terminated_t) * bootstrap_t, zero where masked."""
    r, bootstrap, terminated, mask = _validate(r, bootstrap, terminated, mask)
    return mask * (r + gamma * (1.0 - terminated) * bootstrap)


def _lambda_targets(r, boot, terminated, mask, lam, gamma):
    if not 0.0 <= lam <= 1.0:
        raise ValueError(f"lambda must be in [0, 1], got {lam}")
    r, boot, terminated, mask = _validate(r, boot, terminated, mask)
    return kernels.lambda_scan(
        np.ascontiguousarray(r),
        np.ascontiguousarray(boot),
        np.ascontiguousarray(terminated),
        np.ascontiguousarray(mask),
        float(lam),
        float(gamma),
    )


def peng_q_lambda_targets(r, max_q_next, terminated, mask, lam, gamma):
    """Peng's Q(lambda): lambda return bootstrapping with next-step max Q."""
    return _lambda_targets(r, max_q_next, terminated, mask, lam, gamma)


def td_lambda_targets(r, v_next, terminated, mask, lam, gamma):
    """TD(lambda): same recursion with a state-value bootstrap."""
    return _lambda_targets(r, v_next, terminated, mask, lam, gamma)


def targets(spec: TargetSpec, r, bootstrap, terminated, mask):
    """Dispatch on a TargetSpec; bootstrap is max-Q or V per spec.kind."""
    if spec.kind == "one-step":
        return one_step_targets(r, bootstrap, terminated, mask, spec.gamma)
    if spec.kind == "peng-q-lambda":
        return peng_q_lambda_targets(r, bootstrap, terminated, mask, spec.lam, spec.gamma)
    return td_lambda_targets(r, bootstrap, terminated, mask, spec.lam, spec.gamma)
