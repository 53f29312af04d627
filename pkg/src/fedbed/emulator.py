"""Device emulation: compute throughput, link delays, and a synthetic power signal.

Every client process is bound to a DeviceProfile that says how fast the
emulated hardware trains, how fast its links move bytes, and what it draws
at idle versus while training. Emulated durations are enforced on the wall
clock through ``throttle``; a global time_scale compresses them so desk
runs stay fast. All recorded timestamps are in emulated seconds.

Shipped profile numbers are synthetic defaults ordered roughly by the
relative capability of well-known single-board computers; only the
XavierNX idle draw (2.9 W) and its training delta (2.1 W) are grounded in
published measurements.
"""

from __future__ import annotations

import math
import time
from dataclasses import dataclass, asdict, replace
from pathlib import Path

import numpy as np
import yaml

STAGES = ("idle", "fit", "eval")


class UnknownDeviceError(KeyError):
    pass


@dataclass(frozen=True)
class DeviceProfile:
    name: str
    samples_per_second: float
    idle_power_w: float
    active_power_delta_w: float
    uplink_bps: float
    downlink_bps: float
    power_noise_sigma_w: float = 0.0
    time_scale: float = 1.0

    def __post_init__(self):
        for attr in ("samples_per_second", "uplink_bps", "downlink_bps", "time_scale"):
            v = getattr(self, attr)
            if not (v > 0 and math.isfinite(v)):
                raise ValueError(f"{self.name}: {attr} must be positive and finite, got {v}")
        if self.idle_power_w < 0 or self.active_power_delta_w < 0:
            raise ValueError(f"{self.name}: power values must be non-negative")
        if self.power_noise_sigma_w < 0:
            raise ValueError(f"{self.name}: power_noise_sigma_w must be >= 0")


def _profile(name, sps, idle_w, delta_w, up, down, sigma=0.1):
    return DeviceProfile(name, sps, idle_w, delta_w, up, down, sigma)


# Synthetic defaults; relative ordering follows typical SBC capability.
BUILTIN_PROFILES: dict[str, DeviceProfile] = {
    p.name: p
    for p in [
        _profile("AGXOrin", 8000.0, 5.0, 12.0, 800e6, 800e6),
        _profile("OrinNano", 4000.0, 2.5, 5.5, 400e6, 400e6),
        _profile("XavierNX", 2500.0, 2.9, 2.1, 400e6, 400e6),
        _profile("OrangePi5B", 2000.0, 1.8, 3.5, 300e6, 300e6),
        _profile("LattePandaDelta3", 1500.0, 2.0, 4.0, 300e6, 300e6),
        _profile("JetsonNano", 500.0, 1.5, 2.5, 100e6, 100e6),
    ]
}

# Accept the longer vendor-style spellings too.
PROFILE_ALIASES = {
    "JetsonOrinNano": "OrinNano",
    "JetsonAGXOrin": "AGXOrin",
    "JetsonXavierNX": "XavierNX",
}


def get_profile(name: str, extra: dict[str, DeviceProfile] | None = None) -> DeviceProfile:
    """Resolve a dev_type name against extra profiles, builtins, and aliases."""
    pool = dict(BUILTIN_PROFILES)
    if extra:
        pool.update(extra)
    if name in pool:
        return pool[name]
    alias = PROFILE_ALIASES.get(name)
    if alias and alias in pool:
        return replace(pool[alias], name=name)
    raise UnknownDeviceError(f"unknown dev_type {name!r}")


def load_profiles(path: str | Path) -> dict[str, DeviceProfile]:
    """Load a YAML mapping of dev_type -> profile fields."""
    raw = yaml.safe_load(Path(path).read_text())
    if not isinstance(raw, dict) or not isinstance(raw.get("profiles"), dict):
        raise ValueError(f"{path}: expected a top-level 'profiles' mapping")
    allowed = set(DeviceProfile.__dataclass_fields__) - {"name"}
    out = {}
    for name, fields in raw["profiles"].items():
        if not isinstance(fields, dict):
            raise ValueError(f"{path}: profile {name!r} must be a mapping")
        unknown = set(fields) - allowed
        if unknown:
            raise ValueError(f"{path}: profile {name!r} has unknown keys {sorted(unknown)}")
        out[str(name)] = DeviceProfile(name=str(name), **{k: float(v) for k, v in fields.items()})
    return out


def profile_to_dict(profile: DeviceProfile) -> dict:
    return asdict(profile)


def profile_from_dict(d: dict) -> DeviceProfile:
    return DeviceProfile(**d)


def emulated_fit_duration(profile: DeviceProfile, num_samples: int, epochs: int) -> float:
    """Seconds the emulated device needs to train: epochs * samples / throughput."""
    if num_samples < 1 or epochs < 1:
        raise ValueError("num_samples and epochs must be positive")
    return epochs * num_samples / profile.samples_per_second


def emulated_tx_duration(profile: DeviceProfile, payload_bytes: int, direction: str) -> float:
    """Seconds to move ``payload_bytes`` over the profile's up- or downlink."""
    if payload_bytes < 1:
        raise ValueError("payload_bytes must be positive")
    if direction == "up":
        bps = profile.uplink_bps
    elif direction == "down":
        bps = profile.downlink_bps
    else:
        raise ValueError(f"direction must be 'up' or 'down', got {direction!r}")
    return 8.0 * payload_bytes / bps


def throttle(real_elapsed_s: float, emulated_s: float, time_scale: float) -> float:
    """Sleep until the stage has lasted at least emulated_s / time_scale.

    Returns the sleep actually performed (zero when real work already took
    longer than the emulated duration).
    """
    pause = max(0.0, emulated_s / time_scale - real_elapsed_s)
    if pause > 0:
        time.sleep(pause)
    return pause


def power_sample(profile: DeviceProfile, current_stage: str, rng: np.random.Generator) -> float:
    """Instantaneous draw in watts for the given stage, with seeded Gaussian noise."""
    if current_stage not in STAGES:
        raise ValueError(f"unknown stage {current_stage!r}")
    watts = profile.idle_power_w
    if current_stage in ("fit", "eval"):
        watts += profile.active_power_delta_w
    if profile.power_noise_sigma_w > 0:
        watts += rng.normal(0.0, profile.power_noise_sigma_w)
    return max(0.0, watts)


class EmulatedClock:
    """Emulated-seconds clock shared by every process of a job.

    All processes anchor to the same wall-clock origin (the job start
    epoch) and pair it with a local monotonic reading, so timestamps are
    comparable across processes on one host and immune to wall-clock
    steps after startup. ``time_scale`` multiplies elapsed real time:
    one wall second counts as ``time_scale`` emulated seconds.
    """

    def __init__(self, origin_epoch: float | None = None, time_scale: float = 1.0):
        if time_scale <= 0:
            raise ValueError("time_scale must be positive")
        self.time_scale = time_scale
        wall = time.time()
        self._offset = wall - (wall if origin_epoch is None else origin_epoch)
        self._mono0 = time.monotonic()

    def now(self) -> float:
        """Emulated seconds since the job origin."""
        return (self._offset + (time.monotonic() - self._mono0)) * self.time_scale

    def sleep_emulated(self, emulated_s: float) -> None:
        """Block for the wall-clock equivalent of ``emulated_s``."""
        if emulated_s > 0:
            time.sleep(emulated_s / self.time_scale)
