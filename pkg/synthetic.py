"""
synthetic.py: Generators for the distributions selective SSMs produce, and
the toy sequence-classification task used to train desk-scale models.
"""

import logging
from dataclasses import dataclass

import numpy as np

from errors import SyntheticError
from tensor_core import make_rng

logger = logging.getLogger(__name__)

PROFILES = ("grow", "periodic", "rise-fall")
TASK_KINDS = ("marker", "sign")

_OPEN_UNIT_MAX = np.nextafter(np.float32(1.0), np.float32(0.0))
_OPEN_UNIT_MIN = np.finfo(np.float32).tiny


def _abar_from_logits(g):
    a = np.exp(-np.logaddexp(0.0, g))
    return np.clip(a, _OPEN_UNIT_MIN, _OPEN_UNIT_MAX).astype(np.float32)


def gen_longtailed_abar(target_median, shape, seed, spread=0.5, tolerance=0.02, max_steps=60):
    """
    Decay factors dense near 1 with a sparse tail toward 0.
    The default spread keeps nearly all mass above 0.8 for a median of
    0.95; wider spreads fill the tail.
    abar = exp(-softplus(g)) with g ~ N(mu, spread^2); mu starts at the value
    whose population median hits the target and is refined by bisection on
    the empirical median if needed.
    Args:
        target_median (float): Desired median in (0, 1).
        shape (tuple | int): Output shape.
        seed (int): RNG seed.
    Returns:
        np.ndarray: float32 values in (0, 1).
    """
    if not 0.0 < target_median < 1.0:
        raise SyntheticError(f"target median {target_median} outside (0, 1)")
    noise = spread * make_rng(seed).standard_normal(shape)

    def sample(mu):
        return _abar_from_logits(mu + noise)

    # median(abar) = exp(-softplus(mu))  =>  mu = log(expm1(-log(target)))
    mu = float(np.log(np.expm1(-np.log(target_median))))
    out = sample(mu)
    if abs(float(np.median(out)) - target_median) <= tolerance:
        return out
    lo, hi = mu - 10.0 * spread, mu + 10.0 * spread
    for _ in range(max_steps):
        mid = 0.5 * (lo + hi)
        out = sample(mid)
        m = float(np.median(out))
        if abs(m - target_median) <= tolerance:
            return out
        # abar decreases as mu grows
        if m > target_median:
            lo = mid
        else:
            hi = mid
    raise SyntheticError(f"unreachable median {target_median} for shape {shape}")


def _envelope(profile, L, ramp, period):
    t = np.arange(L, dtype=np.float64)
    if profile == "grow":
        return 1.0 + (ramp - 1.0) * t / (L - 1)
    if profile == "periodic":
        period = period or max(2.0, L / 4.0)
        return 1.0 + (ramp - 1.0) * 0.5 * (1.0 - np.cos(2.0 * np.pi * t / period))
    if profile == "rise-fall":
        return 1.0 + (ramp - 1.0) * (1.0 - np.abs(2.0 * t / (L - 1) - 1.0))
    raise SyntheticError(f"unknown profile {profile!r}; expected one of {PROFILES}")


def gen_dynamic_hidden(profile, L, shape, seed, ramp=5.0, period=None):
    """
    Hidden-state sequences whose per-step magnitude follows an envelope.
    Args:
        profile (str): "grow" (linear ramp), "periodic" (raised cosine) or
            "rise-fall" (triangle).
        L (int): Sequence length, >= 2.
        shape (tuple): Per-step shape, e.g. (D, N).
        seed (int): RNG seed.
        ramp (float): Peak-to-base envelope ratio; 1 gives a constant profile.
    Returns:
        np.ndarray: float32 array of shape (L, *shape).
    """
    if L < 2:
        raise SyntheticError("sequence length must be >= 2")
    shape = (shape,) if np.isscalar(shape) else tuple(shape)
    env = _envelope(profile, L, ramp, period)
    noise = make_rng(seed).standard_normal((L, *shape))
    return (env.reshape((L,) + (1,) * len(shape)) * noise).astype(np.float32)


def gen_dense_with_outliers(n, seed, dense_std=5.0, outlier_fraction=0.001, outlier_magnitude=50.0):
    """
    Gaussian bulk plus rare large-magnitude outliers of random sign.
    Returns:
        (np.ndarray, np.ndarray): float32 samples and a boolean dense mask.
    """
    rng = make_rng(seed)
    x = rng.normal(0.0, dense_std, n)
    n_out = int(round(outlier_fraction * n))
    dense = np.ones(n, dtype=bool)
    if n_out:
        idx = rng.choice(n, size=n_out, replace=False)
        signs = rng.choice([-1.0, 1.0], size=n_out)
        x[idx] = signs * outlier_magnitude * (1.0 + 0.1 * np.abs(rng.standard_normal(n_out)))
        dense[idx] = False
    return x.astype(np.float32), dense


@dataclass
class ToyTask:
    """
    Balanced two-class sequence task.
    "marker": a fixed marker vector is added over `marker_width` consecutive
    steps; class 1 places the window in the first quarter, class 0 in the
    second half, so a mean-pooled readout has to integrate the marker over
    time. "sign": label is the sign of the sequence mean.
    """
    kind: str = "marker"
    seq_len: int = 32
    d_input: int = 4
    n_train: int = 512
    n_val: int = 256
    marker_amplitude: float = 3.0
    noise: float = 0.5
    marker_width: int = 4

    def __post_init__(self):
        if self.marker_width < 1:
            raise SyntheticError("marker_width must be >= 1")
        if self.kind not in TASK_KINDS:
            raise SyntheticError(f"unknown task kind {self.kind!r}; expected one of {TASK_KINDS}")
        if self.seq_len < 4:
            raise SyntheticError("toy task needs seq_len >= 4")

    @property
    def marker(self):
        signs = np.where(np.arange(self.d_input) % 2 == 0, 1.0, -1.0)
        return self.marker_amplitude * signs

    def sample(self, n, rng):
        """
        Args:
            n (int): Number of sequences.
            rng (np.random.Generator): Source of randomness.
        Returns:
            (np.ndarray, np.ndarray): float32 (n, L, d_input) inputs and int64 labels.
        """
        L = self.seq_len
        labels = rng.permutation(np.arange(n) % 2).astype(np.int64)
        x = rng.normal(0.0, self.noise, (n, L, self.d_input))
        if self.kind == "marker":
            w = min(self.marker_width, L // 4)
            early = rng.integers(0, L // 4 - w + 1, n)
            late = rng.integers(L // 2, L - w + 1, n)
            steps = np.where(labels == 1, early, late)[:, None] + np.arange(w)
            x[np.arange(n)[:, None], steps] += self.marker
        else:
            x += 0.2
            positive = x.mean(axis=(1, 2)) > 0
            flip = positive != (labels == 1)
            x[flip] *= -1.0
        return x.astype(np.float32), labels

    def splits(self, seed):
        rng = make_rng(seed)
        return self.sample(self.n_train, rng), self.sample(self.n_val, rng)

    def to_dict(self):
        return dict(self.__dict__)
