"""Length-adaptive threshold profile and its JSON persistence."""

from __future__ import annotations

import json
import warnings
from dataclasses import dataclass, field
from pathlib import Path

PROFILE_VERSION = 1
DEFAULT_GAMMA = 0.65
DEFAULT_TARGET_SKIP = 0.60
DEFAULT_EXCLUDED_LAYERS = (0, 1)

_REQUIRED = ("gamma", "target_skip", "length_normalizer", "coefficients", "clamp",
             "excluded_layers", "calibration_points")
_KNOWN = set(_REQUIRED) | {"version"}


class ProfileError(ValueError):
    def __init__(self, field: str, message: str):
        super().__init__(f"profile field {field!r}: {message}")
        self.field = field


@dataclass(frozen=True)
class CalibrationPoint:
    length: int
    tau: float
    skip: float


@dataclass
class ThresholdProfile:
    coefficients: tuple[float, float, float, float]
    length_normalizer: float
    clamp: tuple[float, float] = (0.0, 1.0)
    target_skip: float = DEFAULT_TARGET_SKIP
    gamma: float = DEFAULT_GAMMA
    excluded_layers: tuple[int, ...] = DEFAULT_EXCLUDED_LAYERS
    calibration_points: list[CalibrationPoint] = field(default_factory=list)

    def __post_init__(self):
        self.coefficients = tuple(float(c) for c in self.coefficients)
        self.clamp = tuple(float(c) for c in self.clamp)
        self.excluded_layers = tuple(sorted({int(i) for i in self.excluded_layers}))
        if len(self.coefficients) != 4:
            raise ProfileError("coefficients", f"need 4 values (a, b, c, d), got {len(self.coefficients)}")
        if not self.length_normalizer > 0:
            raise ProfileError("length_normalizer", f"must be positive, got {self.length_normalizer}")
        if len(self.clamp) != 2 or self.clamp[0] > self.clamp[1]:
            raise ProfileError("clamp", f"need [lo, hi] with lo <= hi, got {self.clamp}")
        if not 0 < self.target_skip < 1:
            raise ProfileError("target_skip", f"must be in (0, 1), got {self.target_skip}")
        if not 0 < self.gamma < 1:
            raise ProfileError("gamma", f"must be in (0, 1), got {self.gamma}")
        if any(i < 0 for i in self.excluded_layers):
            raise ProfileError("excluded_layers", "layer indices must be non-negative")
        lengths = [p.length for p in self.calibration_points]
        if len(set(lengths)) != len(lengths):
            raise ProfileError("calibration_points", f"duplicate lengths in {lengths}")

    @classmethod
    def constant(cls, tau: float, length_normalizer: float = 1.0, clamp=(-2.0, 2.0), **kw):
        """Profile whose threshold ignores length; the clamp admits taus outside [-1, 1]."""
        return cls((0.0, 0.0, 0.0, tau), length_normalizer, clamp=clamp, **kw)

    def to_dict(self) -> dict:
        return {
            "version": PROFILE_VERSION,
            "gamma": self.gamma,
            "target_skip": self.target_skip,
            "length_normalizer": self.length_normalizer,
            "coefficients": list(self.coefficients),
            "clamp": list(self.clamp),
            "excluded_layers": list(self.excluded_layers),
            "calibration_points": [
                {"length": p.length, "tau": p.tau, "skip": p.skip} for p in self.calibration_points
            ],
        }

    @classmethod
    def from_dict(cls, data: dict) -> "ThresholdProfile":
        if not isinstance(data, dict):
            raise ProfileError("<root>", "expected a JSON object")
        version = data.get("version", PROFILE_VERSION)
        if version != PROFILE_VERSION:
            raise ProfileError("version", f"unsupported version {version!r}")
        for key in _REQUIRED:
            if key not in data:
                raise ProfileError(key, "missing")
        unknown = sorted(set(data) - _KNOWN)
        if unknown:
            warnings.warn(f"ignoring unknown profile keys: {', '.join(unknown)}", stacklevel=3)
        try:
            points = [CalibrationPoint(int(p["length"]), float(p["tau"]), float(p["skip"]))
                      for p in data["calibration_points"]]
        except (KeyError, TypeError, ValueError) as exc:
            raise ProfileError("calibration_points", f"malformed entry ({exc})") from None
        for key in ("gamma", "target_skip", "length_normalizer"):
            if isinstance(data[key], bool) or not isinstance(data[key], (int, float)):
                raise ProfileError(key, f"expected a number, got {data[key]!r}")
        for key, n in (("coefficients", 4), ("clamp", 2)):
            value = data[key]
            if not isinstance(value, list) or len(value) != n or not all(isinstance(x, (int, float)) for x in value):
                raise ProfileError(key, f"expected a list of {n} numbers, got {value!r}")
        if not isinstance(data["excluded_layers"], list):
            raise ProfileError("excluded_layers", f"expected a list, got {data['excluded_layers']!r}")
        return cls(
            coefficients=tuple(data["coefficients"]),
            length_normalizer=float(data["length_normalizer"]),
            clamp=tuple(data["clamp"]),
            target_skip=float(data["target_skip"]),
            gamma=float(data["gamma"]),
            excluded_layers=tuple(data["excluded_layers"]),
            calibration_points=points,
        )


def threshold_for_length(length: int, profile: ThresholdProfile) -> float:
    """tau(L) = clamp(a x^3 + b x^2 + c x + d) with x = L / length_normalizer."""
    if length < 1:
        raise ValueError(f"context length must be >= 1, got {length}")
    a, b, c, d = profile.coefficients
    x = length / profile.length_normalizer
    tau = ((a * x + b) * x + c) * x + d
    lo, hi = profile.clamp
    return min(max(tau, lo), hi)


def save_profile(path, profile: ThresholdProfile) -> None:
    # json writes floats via repr, which round-trips exactly
    Path(path).write_text(json.dumps(profile.to_dict(), indent=2) + "\n")


def load_profile(path) -> ThresholdProfile:
    text = Path(path).read_text()
    try:
        data = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ProfileError("<root>", f"invalid JSON in {path}: {exc}") from None
    return ThresholdProfile.from_dict(data)
