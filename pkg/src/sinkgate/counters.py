from __future__ import annotations

from dataclasses import dataclass, field

PHASES = ("routing", "attention", "merge")


@dataclass
class LoadCounters:
    """KV traffic and per-phase wall time for one worker or one merged step.

    Float counts are element counts (f32), so bytes are ``4 * floats``.
    """

    kv_floats_loaded: int = 0
    anchor_floats_loaded: int = 0
    groups_active: int = 0
    groups_skipped: int = 0
    wall_time: dict = field(default_factory=lambda: {p: 0.0 for p in PHASES})

    def merge(self, other: "LoadCounters") -> "LoadCounters":
        self.kv_floats_loaded += other.kv_floats_loaded
        self.anchor_floats_loaded += other.anchor_floats_loaded
        self.groups_active += other.groups_active
        self.groups_skipped += other.groups_skipped
        for phase, t in other.wall_time.items():
            self.wall_time[phase] = self.wall_time.get(phase, 0.0) + t
        return self

    def __iadd__(self, other: "LoadCounters") -> "LoadCounters":
        return self.merge(other)

    @property
    def kv_bytes_loaded(self) -> int:
        return 4 * self.kv_floats_loaded

    def traffic(self) -> tuple[int, int, int, int]:
        """Timing-free view of the counters, for determinism checks."""
        return (self.kv_floats_loaded, self.anchor_floats_loaded, self.groups_active, self.groups_skipped)
