"""Independent reference implementations used by the tests."""

import math
import random


def settle_oracle(times, volts, window, band_pct):
    """Brute-force settling scan: try every start index, check every sample."""
    level = math.fsum(volts[-window:]) / window
    if abs(level) < 1e-6:
        lo, hi = level - 1e-3, level + 1e-3
    else:
        lo, hi = level - abs(level) * band_pct / 100, level + abs(level) * band_pct / 100
    for i in range(len(volts) - window + 1):
        if all(lo <= volts[j] <= hi for j in range(i, i + window)):
            return times[i] - times[0]
    return None


def random_trace(rng: random.Random):
    """Step-like traces with noise, spikes and occasional overshoot."""
    n = rng.randint(1, 200)
    dt = rng.choice([1e-4, 2e-4, 5.6e-4])
    v0 = rng.uniform(0.4, 1.2)
    v1 = rng.choice([v0, rng.uniform(0.4, 1.2), 0.0])
    ramp = rng.randint(0, n)
    noise = rng.choice([0.0, 0.001, 0.005, 0.02])
    volts = []
    for i in range(n):
        frac = min(i / ramp, 1.0) if ramp else 1.0
        v = v0 + (v1 - v0) * frac + rng.gauss(0, noise)
        if rng.random() < 0.02:
            v += rng.uniform(-0.1, 0.1)
        volts.append(v)
    times = [i * dt for i in range(n)]
    return times, volts


def corpus(count=1000, seed=1234):
    rng = random.Random(seed)
    out = []
    while len(out) < count:
        times, volts = random_trace(rng)
        window = rng.randint(1, 10)
        if window <= len(volts):
            out.append((times, volts, window, rng.choice([0.5, 1.0, 2.0, 5.0])))
    return out

