"""Synthetic proprioception logs.

The generator imitates a 7-joint arm following smooth joint trajectories.
Contacts add an external torque signature on the joints up to the touched
link: intentional contacts are slow, sustained pushes; collisions ring at a
higher frequency. `ambiguity` blends the two signatures per record so that
intentional and collision records overlap while contact vs no contact stays
easy, which is the confusion structure the surrogate experiments need.
"""
from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np

from cdml.data import LABELS5, N_FEATURES, N_JOINTS, SAMPLE_PERIOD, WINDOW, Record

INTENTIONAL_HZ = 1.5
COLLISION_HZ = 18.0


@dataclass(frozen=True)
class SyntheticConfig:
    records_per_label: int = 10
    length: int = 200
    contact_amp: float = 3.0
    noise: float = 0.3
    ambiguity: float = 0.0
    seed: int = 0


def _motion(rng, length, t):
    freq = rng.uniform(0.3, 0.8, N_JOINTS)
    phase = rng.uniform(0, 2 * np.pi, N_JOINTS)
    amp = rng.uniform(0.5, 1.5, N_JOINTS)
    q = amp * np.sin(2 * np.pi * freq * t[:, None] + phase)
    gravity = 5.0 * np.cos(q) * np.linspace(1.0, 0.2, N_JOINTS)
    return q, gravity


def make_record(label5: int, rng, cfg: SyntheticConfig, record_id: str, t0: float = 0.0) -> Record:
    n = cfg.length
    t = t0 + np.arange(n) * SAMPLE_PERIOD
    tl = t - t0
    q, tau_j = _motion(rng, n, tl)
    tau_ext = rng.normal(0, cfg.noise, (n, N_JOINTS))
    e = rng.normal(0, 0.05 * cfg.noise, (n, N_JOINTS))
    e_dot = rng.normal(0, 0.2 * cfg.noise, (n, N_JOINTS))
    if label5 != 0:
        link = 5 if label5 in (1, 3) else 6
        collision = label5 >= 3
        own, other = (COLLISION_HZ, INTENTIONAL_HZ) if collision else (INTENTIONAL_HZ, COLLISION_HZ)
        mix = rng.uniform(0, cfg.ambiguity)
        freq = own * (1 - mix) + other * mix
        amp = cfg.contact_amp * rng.uniform(0.8, 1.2)
        phase = rng.uniform(0, 2 * np.pi)
        wave = np.sin(2 * np.pi * freq * tl + phase)
        # sustained push for intentional contacts, rapid ringing for collisions
        offset = amp * (1.0 - 1.6 * (freq - INTENTIONAL_HZ) / (COLLISION_HZ - INTENTIONAL_HZ))
        signal = offset + 0.5 * amp * wave
        gain = np.zeros(N_JOINTS)
        gain[:link] = np.linspace(0.4, 1.0, link)
        if link == 6:
            gain[5] *= 1.3
        tau_ext += signal[:, None] * gain
        tau_j += 0.8 * signal[:, None] * gain
        e += 0.02 * signal[:, None] * gain
        e_dot += 0.1 * np.gradient(signal, SAMPLE_PERIOD)[:, None] * gain / (2 * np.pi * max(freq, 1.0))
    feats = np.concatenate([tau_j, tau_ext, e, e_dot], axis=1)
    return Record(record_id, label5, t, feats)


def make_records(cfg: SyntheticConfig) -> list[Record]:
    rng = np.random.default_rng(cfg.seed)
    out = []
    for i in range(cfg.records_per_label):
        for lab in range(len(LABELS5)):
            out.append(make_record(lab, rng, cfg, f"r{i:04d}_{LABELS5[lab]}"))
    return out


def make_session(labels5, cfg: SyntheticConfig, prefix: str = "s") -> list[Record]:
    """Back-to-back records forming one continuous log (contiguous timestamps)."""
    rng = np.random.default_rng(cfg.seed)
    out, t0 = [], 0.0
    for i, lab in enumerate(labels5):
        r = make_record(int(lab), rng, cfg, f"{prefix}{i:04d}", t0)
        out.append(r)
        t0 = r.t[-1] + SAMPLE_PERIOD
    return out


def alternating_session(n_contacts: int, cfg: SyntheticConfig, prefix: str = "s") -> list[Record]:
    """Non-contact records interleaved with contacts cycling through the four contact labels."""
    labels = []
    for i in range(n_contacts):
        labels += [0, 1 + i % 4]
    labels.append(0)
    return make_session(labels, cfg, prefix)


@dataclass(frozen=True)
class Perturbation:
    """Distribution shift used to mimic a second robot of the same type."""

    torque_offset: float = 0.0
    noise_scale: float = 0.0
    time_warp: float = 1.0
    seed: int = 0


def perturb_records(records, p: Perturbation) -> list[Record]:
    """Offset joint torques, add sensor noise and time-warp every record."""
    rng = np.random.default_rng(p.seed)
    out = []
    for r in records:
        f = r.features.copy()
        n = len(r.t)
        if p.time_warp != 1.0:
            src = np.arange(n) * p.time_warp
            src = np.clip(src, 0, n - 1)
            f = np.stack([np.interp(src, np.arange(n), f[:, j]) for j in range(f.shape[1])], axis=1)
        f[:, :N_JOINTS] += p.torque_offset * rng.uniform(0.5, 1.0, N_JOINTS)
        if p.noise_scale:
            scale = f.std(axis=0) + 1e-3
            f += rng.normal(0, 1, f.shape) * p.noise_scale * scale
        out.append(replace(r, features=f))
    return out


def pattern_windows(n_per_class: int = 120, nuisance: float = 3.0, signal: float = 1.0,
                    noise: float = 0.1, seed: int = 0):
    """Directly generated 28x28 windows whose class is a temporal frequency.

    Every window carries large random per-feature offsets that are identical
    in distribution across classes, so raw distances say little about the
    class; the class only shows in how the signal oscillates along time.
    Returns ``(X, y)`` with classes interleaved.
    """
    rng = np.random.default_rng(seed)
    t = np.arange(WINDOW) / WINDOW
    cycles = (1.0, 3.0, 6.0)
    X, y = [], []
    for _ in range(n_per_class):
        for c, f in enumerate(cycles):
            phase = rng.uniform(0, 2 * np.pi)
            amp = signal * rng.uniform(0.8, 1.2, N_FEATURES)
            wave = amp * np.sin(2 * np.pi * f * t[:, None] + phase)
            offset = rng.normal(0, nuisance, N_FEATURES)
            X.append(offset + wave + rng.normal(0, noise, (WINDOW, N_FEATURES)))
            y.append(c)
    return np.array(X), np.array(y)


# surrogate for the public contact dataset: overlapping C2/C3 signatures
SURROGATE = SyntheticConfig(records_per_label=20, ambiguity=0.58, seed=0)


def windowed_split(records, split_seed: int = 0, stride: int = 14):
    """Record-level split, stride windows and train-fitted normalisation.

    Returns ``(SplitArrays, NormStats)``.
    """
    from cdml.data import normalize_apply, normalize_fit, split_dataset, stack
    from cdml.train import SplitArrays

    wtr, wte = split_dataset(records, split_seed).windows(stride)
    Xtr, ytr, _ = stack(wtr)
    Xte, yte, _ = stack(wte)
    norm = normalize_fit(Xtr)
    return SplitArrays(normalize_apply(norm, Xtr), ytr, normalize_apply(norm, Xte), yte), norm
