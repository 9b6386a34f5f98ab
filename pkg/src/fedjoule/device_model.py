"""Power-mode profiles for simulated edge accelerators.

Each device type exposes, per workload, a table of firmware power modes.
A mode pins core counts and clock frequencies and is characterized here by
its measured round time and average power draw; energy per round is their
product. The fastest mode (lowest round time) plays the role of the
default "performance" setting and is used for worst-case energy estimates,
while the Pareto front over (round_time, energy) is what the power-mode
optimizer searches.
"""

from __future__ import annotations

import csv
import hashlib
import math
from dataclasses import dataclass
from typing import Dict, Iterable, List, Mapping, NamedTuple, Sequence, Tuple

import numpy as np

PROFILE_COLUMNS: Tuple[str, ...] = (
    "device_type",
    "workload",
    "mode_id",
    "cpu_cores",
    "cpu_mhz",
    "gpu_mhz",
    "mem_mhz",
    "round_time_s",
    "avg_power_w",
)

ProfileKey = Tuple[str, str]  # (device_type, workload)


class ProfileParseError(ValueError):
    """Malformed profile CSV content; the message names the offending line."""


class DuplicateModeError(ValueError):
    """A (device_type, workload, mode_id) triple appeared more than once."""


@dataclass(frozen=True)
class PowerModeProfile:
    """One firmware power mode with its measured round cost."""

    mode_id: str
    cpu_cores: int
    cpu_mhz: float
    gpu_mhz: float
    mem_mhz: float
    round_time_s: float
    avg_power_w: float

    def __post_init__(self) -> None:
        if not self.mode_id:
            raise ValueError("mode_id must be a non-empty string")
        if self.cpu_cores < 1:
            raise ValueError(f"mode {self.mode_id!r}: cpu_cores must be >= 1")
        for name in ("cpu_mhz", "gpu_mhz", "mem_mhz"):
            value = getattr(self, name)
            if not math.isfinite(value) or value < 0:
                raise ValueError(f"mode {self.mode_id!r}: {name} must be finite and >= 0")
        if not math.isfinite(self.round_time_s) or self.round_time_s <= 0:
            raise ValueError(f"mode {self.mode_id!r}: round_time_s must be finite and > 0")
        if not math.isfinite(self.avg_power_w) or self.avg_power_w <= 0:
            raise ValueError(f"mode {self.mode_id!r}: avg_power_w must be finite and > 0")

    @property
    def energy_j(self) -> float:
        """Energy of one training round in this mode, in joules."""
        return self.round_time_s * self.avg_power_w

    def sort_key(self) -> Tuple[float, float, str]:
        # Deterministic ordering used for MAXN choice and dominance ties:
        # faster first, then cheaper, then lexicographic mode id.
        return (self.round_time_s, self.energy_j, self.mode_id)


@dataclass(frozen=True)
class DeviceWorkloadProfile:
    """All power modes of one device type under one workload."""

    device_type: str
    workload: str
    modes: Mapping[str, PowerModeProfile]

    def __post_init__(self) -> None:
        if not self.device_type:
            raise ValueError("device_type must be non-empty")
        if not self.workload:
            raise ValueError("workload must be non-empty")
        if not self.modes:
            raise ValueError(
                f"profile ({self.device_type!r}, {self.workload!r}) has an empty mode set"
            )
        for key, mode in self.modes.items():
            if key != mode.mode_id:
                raise ValueError(f"mode table key {key!r} != mode_id {mode.mode_id!r}")

    @property
    def maxn_mode_id(self) -> str:
        """Id of the fastest mode; ties broken by lower energy, then mode id."""
        return min(self.modes.values(), key=PowerModeProfile.sort_key).mode_id

    @property
    def maxn(self) -> PowerModeProfile:
        return self.modes[self.maxn_mode_id]

    def mode(self, mode_id: str) -> PowerModeProfile:
        try:
            return self.modes[mode_id]
        except KeyError:
            raise KeyError(
                f"unknown mode_id {mode_id!r} for ({self.device_type!r}, {self.workload!r})"
            ) from None


def energy_of(profile: DeviceWorkloadProfile, mode_id: str) -> float:
    """Energy in joules of one round on `profile` in mode `mode_id`."""
    return profile.mode(mode_id).energy_j


class ParetoPoint(NamedTuple):
    mode_id: str
    round_time_s: float
    energy_j: float


@dataclass(frozen=True)
class ParetoFront:
    """Non-dominated (round_time, energy) modes, fastest first.

    Invariant: round times strictly increase along the front while energies
    strictly decrease, so the first point is the MAXN mode and the last is
    the lowest-energy mode.
    """

    points: Tuple[ParetoPoint, ...]

    def __post_init__(self) -> None:
        if not self.points:
            raise ValueError("a Pareto front must contain at least one point")
        for prev, cur in zip(self.points, self.points[1:]):
            if not (cur.round_time_s > prev.round_time_s and cur.energy_j < prev.energy_j):
                raise ValueError(
                    "front must be sorted by strictly increasing time and "
                    f"strictly decreasing energy; got {prev} then {cur}"
                )

    def __len__(self) -> int:
        return len(self.points)

    def __iter__(self):
        return iter(self.points)

    @property
    def maxn(self) -> ParetoPoint:
        return self.points[0]

    @property
    def min_energy(self) -> ParetoPoint:
        return self.points[-1]

    def cheapest_within(self, time_limit_s: float) -> ParetoPoint:
        """Lowest-energy point with round_time_s <= time_limit_s.

        Energies strictly decrease along the front, so this is the last
        feasible point. Raises ValueError when even the fastest mode misses
        the limit.
        """
        feasible = None
        for point in self.points:
            if point.round_time_s <= time_limit_s:
                feasible = point
            else:
                break
        if feasible is None:
            raise ValueError(
                f"no mode meets time limit {time_limit_s}; fastest is {self.points[0]}"
            )
        return feasible

    def scaled(self, factor: float) -> "ParetoFront":
        """Front with times and energies multiplied by a positive factor."""
        if not (factor > 0):
            raise ValueError("scale factor must be > 0")
        return ParetoFront(
            tuple(
                ParetoPoint(p.mode_id, p.round_time_s * factor, p.energy_j * factor)
                for p in self.points
            )
        )


def extract_pareto(profile: DeviceWorkloadProfile) -> ParetoFront:
    """Non-dominated modes of `profile` under (min round_time, min energy).

    Weakly dominated modes are dropped. When two modes coincide in both
    time and energy the lexicographically smallest mode_id is kept, which
    makes the front deterministic.
    """
    ordered = sorted(profile.modes.values(), key=PowerModeProfile.sort_key)
    points: List[ParetoPoint] = []
    best_energy = math.inf
    for mode in ordered:
        if mode.energy_j < best_energy:
            points.append(ParetoPoint(mode.mode_id, mode.round_time_s, mode.energy_j))
            best_energy = mode.energy_j
    return ParetoFront(tuple(points))


def load_profiles(path: str) -> Dict[ProfileKey, DeviceWorkloadProfile]:
    """Parse a profile CSV into DeviceWorkloadProfile objects keyed by
    (device_type, workload).

    The header must match PROFILE_COLUMNS exactly; extra or reordered
    columns are rejected. Malformed rows raise ProfileParseError naming the
    line, duplicated (device_type, workload, mode_id) triples raise
    DuplicateModeError.
    """
    grouped: Dict[ProfileKey, Dict[str, PowerModeProfile]] = {}
    with open(path, newline="") as handle:
        reader = csv.reader(handle)
        try:
            header = next(reader)
        except StopIteration:
            raise ProfileParseError(f"{path}: empty file, expected header row") from None
        if tuple(header) != PROFILE_COLUMNS:
            raise ProfileParseError(
                f"{path}: header must be exactly {','.join(PROFILE_COLUMNS)}; "
                f"got {','.join(header)}"
            )
        for lineno, row in enumerate(reader, start=2):
            if not row:
                continue
            if len(row) != len(PROFILE_COLUMNS):
                raise ProfileParseError(
                    f"{path}: line {lineno}: expected {len(PROFILE_COLUMNS)} fields, "
                    f"got {len(row)}"
                )
            try:
                mode = PowerModeProfile(
                    mode_id=row[2],
                    cpu_cores=int(row[3]),
                    cpu_mhz=float(row[4]),
                    gpu_mhz=float(row[5]),
                    mem_mhz=float(row[6]),
                    round_time_s=float(row[7]),
                    avg_power_w=float(row[8]),
                )
            except ValueError as exc:
                raise ProfileParseError(f"{path}: line {lineno}: {exc}") from None
            device_type, workload = row[0], row[1]
            if not device_type or not workload:
                raise ProfileParseError(
                    f"{path}: line {lineno}: device_type and workload must be non-empty"
                )
            table = grouped.setdefault((device_type, workload), {})
            if mode.mode_id in table:
                raise DuplicateModeError(
                    f"{path}: line {lineno}: duplicate mode "
                    f"({device_type}, {workload}, {mode.mode_id})"
                )
            table[mode.mode_id] = mode
    return {
        key: DeviceWorkloadProfile(key[0], key[1], modes)
        for key, modes in sorted(grouped.items())
    }


def save_profiles(profiles: Mapping[ProfileKey, DeviceWorkloadProfile], path: str) -> None:
    """Write profiles as CSV in the load_profiles schema.

    Rows are sorted by (device_type, workload, mode_id) so that a
    save/load/save cycle is byte-stable.
    """
    with open(path, "w", newline="") as handle:
        writer = csv.writer(handle)
        writer.writerow(PROFILE_COLUMNS)
        for key in sorted(profiles):
            profile = profiles[key]
            for mode_id in sorted(profile.modes):
                mode = profile.modes[mode_id]
                writer.writerow(
                    [
                        profile.device_type,
                        profile.workload,
                        mode.mode_id,
                        mode.cpu_cores,
                        repr(mode.cpu_mhz),
                        repr(mode.gpu_mhz),
                        repr(mode.mem_mhz),
                        repr(mode.round_time_s),
                        repr(mode.avg_power_w),
                    ]
                )


@dataclass(frozen=True)
class DeviceClassSpec:
    """Generator recipe for one synthetic device class.

    time_range spans the fastest to the slowest mode's round time in
    seconds and power_range the lowest to the highest average draw in
    watts; mode times and powers are anti-correlated so that faster modes
    burn more power, which yields non-trivial Pareto fronts.
    """

    name: str
    time_range: Tuple[float, float]
    power_range: Tuple[float, float]
    mode_count: int

    def __post_init__(self) -> None:
        if not self.name:
            raise ValueError("device class name must be non-empty")
        if not (0 < self.time_range[0] <= self.time_range[1]):
            raise ValueError(f"class {self.name!r}: bad time_range {self.time_range}")
        if not (0 < self.power_range[0] <= self.power_range[1]):
            raise ValueError(f"class {self.name!r}: bad power_range {self.power_range}")
        if self.mode_count < 1:
            raise ValueError(f"class {self.name!r}: mode_count must be >= 1")


# Four synthetic classes spanning roughly 25x in round time and 10x in
# power, mimicking a small heterogeneous edge cluster.
DEFAULT_DEVICE_CLASSES: Tuple[DeviceClassSpec, ...] = (
    DeviceClassSpec("edge_xl", (4.0, 16.0), (18.0, 50.0), 12),
    DeviceClassSpec("edge_l", (8.0, 30.0), (12.0, 32.0), 10),
    DeviceClassSpec("edge_m", (20.0, 60.0), (8.0, 20.0), 8),
    DeviceClassSpec("edge_s", (40.0, 100.0), (5.0, 12.0), 6),
)

# Relative 1-sigma noise magnitudes mirroring the measurement error of the
# profile predictor being emulated.
DEFAULT_TIME_NOISE = 0.09
DEFAULT_POWER_NOISE = 0.07


def _class_seed(seed: int, name: str, workload: str) -> np.random.SeedSequence:
    digest = hashlib.sha256(f"{name}|{workload}".encode()).digest()
    return np.random.SeedSequence([seed, int.from_bytes(digest[:8], "big")])


def synthesize_profiles(
    classes: Sequence[DeviceClassSpec],
    workload: str,
    seed: int,
    time_noise: float = 0.0,
    power_noise: float = 0.0,
) -> Dict[ProfileKey, DeviceWorkloadProfile]:
    """Generate deterministic synthetic profiles for the given classes.

    The base draw depends only on (seed, class name, workload); noise is
    layered from an independent stream, so disabling it reproduces the base
    profile exactly. Noise factors are clipped to [0.5, 1.5] to keep times
    and powers positive.
    """
    if time_noise < 0 or power_noise < 0:
        raise ValueError("noise magnitudes must be >= 0")
    by_name = [cls.name for cls in classes]
    if len(set(by_name)) != len(by_name):
        raise ValueError("device class names must be unique")
    profiles: Dict[ProfileKey, DeviceWorkloadProfile] = {}
    for cls in sorted(classes, key=lambda c: c.name):
        base_rng, noise_rng = [
            np.random.default_rng(s) for s in _class_seed(seed, cls.name, workload).spawn(2)
        ]
        n = cls.mode_count
        speed = base_rng.uniform(0.0, 1.0, size=n)
        t_lo, t_hi = cls.time_range
        p_lo, p_hi = cls.power_range
        times = t_lo + speed * (t_hi - t_lo)
        # faster mode -> higher power, plus jitter so fronts are not a line
        powers = p_hi - speed * (p_hi - p_lo)
        powers = powers + base_rng.uniform(-0.1, 0.1, size=n) * (p_hi - p_lo)
        powers = np.clip(powers, p_lo * 0.5, p_hi * 1.5)
        cores = base_rng.choice([4, 6, 8, 12], size=n)
        cpu_clock = np.round(base_rng.uniform(600, 2200, size=n))
        gpu_clock = np.round(base_rng.uniform(300, 1300, size=n))
        mem_clock = np.round(base_rng.uniform(800, 3200, size=n))
        if time_noise > 0:
            times = times * np.clip(1.0 + time_noise * noise_rng.standard_normal(n), 0.5, 1.5)
        if power_noise > 0:
            powers = powers * np.clip(1.0 + power_noise * noise_rng.standard_normal(n), 0.5, 1.5)
        width = max(2, len(str(n - 1)))
        modes = {}
        for i in range(n):
            mode = PowerModeProfile(
                mode_id=f"m{i:0{width}d}",
                cpu_cores=int(cores[i]),
                cpu_mhz=float(cpu_clock[i]),
                gpu_mhz=float(gpu_clock[i]),
                mem_mhz=float(mem_clock[i]),
                round_time_s=float(times[i]),
                avg_power_w=float(powers[i]),
            )
            modes[mode.mode_id] = mode
        profiles[(cls.name, workload)] = DeviceWorkloadProfile(cls.name, workload, modes)
    return profiles
