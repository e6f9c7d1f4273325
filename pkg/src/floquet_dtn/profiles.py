"""Periodic substrate profiles q(x2) with period 2*pi."""

from __future__ import annotations

from dataclasses import dataclass
from enum import Enum

import numpy as np

from .errors import ValidationError

TWO_PI = 2.0 * np.pi


class ProfileKind(str, Enum):
    CONSTANT = "constant"
    COSINE = "cosine"
    PIECEWISE = "piecewise"
    TABULATED = "tabulated"


@dataclass(frozen=True)
class RefractiveProfile:
    """Real, 2*pi-periodic refractive index of the substrate.

    ``values`` holds the kind-specific parameters:

    * constant: ``(value,)``
    * cosine: ``(mean, amplitude)`` for ``mean + amplitude*cos(x)``
    * piecewise: one value per piece; ``breakpoints`` are the interior
      switch points in (0, 2*pi), so piece j covers [t_j, t_{j+1})
    * tabulated: samples at ``x_j = 2*pi*j/len(values)``, linearly interpolated
    """

    kind: ProfileKind
    values: tuple[float, ...]
    breakpoints: tuple[float, ...] = ()

    @classmethod
    def constant(cls, value: float) -> RefractiveProfile:
        return cls._checked(ProfileKind.CONSTANT, (float(value),))

    @classmethod
    def cosine(cls, mean: float, amplitude: float) -> RefractiveProfile:
        return cls._checked(ProfileKind.COSINE, (float(mean), float(amplitude)))

    @classmethod
    def piecewise(cls, breakpoints, values) -> RefractiveProfile:
        return cls._checked(
            ProfileKind.PIECEWISE,
            tuple(float(v) for v in values),
            tuple(float(t) for t in breakpoints),
        )

    @classmethod
    def tabulated(cls, samples) -> RefractiveProfile:
        return cls._checked(ProfileKind.TABULATED, tuple(float(v) for v in samples))

    @classmethod
    def _checked(cls, kind, values, breakpoints=()) -> RefractiveProfile:
        prof = cls(kind, values, breakpoints)
        prof.validate()
        return prof

    def validate(self) -> None:
        """Check structural consistency and strict positivity."""
        vals = np.asarray(self.values, dtype=float)
        if not np.all(np.isfinite(vals)):
            raise ValidationError("substrate", "profile parameters must be finite")
        if self.kind is ProfileKind.CONSTANT and len(vals) != 1:
            raise ValidationError("substrate", "constant profile takes one value")
        if self.kind is ProfileKind.COSINE and len(vals) != 2:
            raise ValidationError("substrate", "cosine profile takes mean and amplitude")
        if self.kind is ProfileKind.PIECEWISE:
            bps = np.asarray(self.breakpoints, dtype=float)
            if len(vals) != len(bps) + 1:
                raise ValidationError(
                    "substrate", "piecewise profile needs one more value than breakpoints"
                )
            if len(bps) and (
                np.any(np.diff(bps) <= 0) or bps[0] <= 0.0 or bps[-1] >= TWO_PI
            ):
                raise ValidationError(
                    "substrate", "breakpoints must increase strictly inside (0, 2*pi)"
                )
        if self.kind is ProfileKind.TABULATED and len(vals) < 2:
            raise ValidationError("substrate", "tabulated profile needs at least 2 samples")
        if self.q_min <= 0.0:
            raise ValidationError(
                "substrate", f"substrate index must be positive (q_min = {self.q_min:g})"
            )

    def shifted(self, delta: float) -> RefractiveProfile:
        """Return q + delta without the positivity check (used for weights)."""
        if self.kind is ProfileKind.COSINE:
            return RefractiveProfile(self.kind, (self.values[0] + delta, self.values[1]))
        vals = tuple(v + delta for v in self.values)
        return RefractiveProfile(self.kind, vals, self.breakpoints)

    @property
    def q_min(self) -> float:
        if self.kind is ProfileKind.COSINE:
            return self.values[0] - abs(self.values[1])
        return float(min(self.values))

    @property
    def q_max(self) -> float:
        if self.kind is ProfileKind.COSINE:
            return self.values[0] + abs(self.values[1])
        return float(max(self.values))

    @property
    def is_piecewise_constant(self) -> bool:
        return self.kind in (ProfileKind.CONSTANT, ProfileKind.PIECEWISE)

    def kinks(self) -> np.ndarray:
        """Points in [0, 2*pi) where q or q' may jump."""
        if self.kind is ProfileKind.PIECEWISE:
            return np.asarray(self.breakpoints, dtype=float)
        if self.kind is ProfileKind.TABULATED:
            m = len(self.values)
            return TWO_PI * np.arange(1, m) / m
        return np.empty(0)

    def pieces(self) -> list[tuple[float, float, float]]:
        """(start, end, value) triples covering [0, 2*pi) for piecewise-constant kinds."""
        if self.kind is ProfileKind.CONSTANT:
            return [(0.0, TWO_PI, self.values[0])]
        if self.kind is ProfileKind.PIECEWISE:
            edges = [0.0, *self.breakpoints, TWO_PI]
            return [(edges[j], edges[j + 1], self.values[j]) for j in range(len(self.values))]
        raise TypeError(f"{self.kind.value} profile is not piecewise constant")

    def __call__(self, x):
        x = np.asarray(x, dtype=float)
        if self.kind is ProfileKind.CONSTANT:
            return np.full(x.shape, self.values[0])
        if self.kind is ProfileKind.COSINE:
            return self.values[0] + self.values[1] * np.cos(x)
        xr = np.mod(x, TWO_PI)
        if self.kind is ProfileKind.PIECEWISE:
            idx = np.searchsorted(np.asarray(self.breakpoints), xr, side="right")
            return np.asarray(self.values)[idx]
        samples = np.asarray(self.values)
        m = len(samples)
        t = xr * (m / TWO_PI)
        j = np.minimum(np.floor(t).astype(int), m - 1)
        frac = t - j
        return (1.0 - frac) * samples[j] + frac * samples[(j + 1) % m]

    def derivative(self, x):
        x = np.asarray(x, dtype=float)
        if self.kind is ProfileKind.COSINE:
            return -self.values[1] * np.sin(x)
        if self.kind is ProfileKind.TABULATED:
            samples = np.asarray(self.values)
            m = len(samples)
            t = np.mod(x, TWO_PI) * (m / TWO_PI)
            j = np.minimum(np.floor(t).astype(int), m - 1)
            return (samples[(j + 1) % m] - samples[j]) * (m / TWO_PI)
        return np.zeros(x.shape)

    def mean(self) -> float:
        if self.kind is ProfileKind.CONSTANT:
            return self.values[0]
        if self.kind is ProfileKind.COSINE:
            return self.values[0]
        if self.kind is ProfileKind.PIECEWISE:
            return sum((b - a) * v for a, b, v in self.pieces()) / TWO_PI
        return float(np.mean(self.values))

    def to_dict(self) -> dict:
        out = {"kind": self.kind.value}
        if self.kind is ProfileKind.CONSTANT:
            out["value"] = self.values[0]
        elif self.kind is ProfileKind.COSINE:
            out["mean"], out["amplitude"] = self.values
        elif self.kind is ProfileKind.PIECEWISE:
            out["breakpoints"] = list(self.breakpoints)
            out["values"] = list(self.values)
        else:
            out["samples"] = list(self.values)
        return out

    @classmethod
    def from_dict(cls, data: dict) -> RefractiveProfile:
        kind = ProfileKind(data["kind"])
        if kind is ProfileKind.CONSTANT:
            return cls.constant(data["value"])
        if kind is ProfileKind.COSINE:
            return cls.cosine(data["mean"], data["amplitude"])
        if kind is ProfileKind.PIECEWISE:
            return cls.piecewise(data["breakpoints"], data["values"])
        return cls.tabulated(data["samples"])


def mathieu_profile(amplitude: float = 0.3, mean: float = 1.0) -> RefractiveProfile:
    """Cosine profile ``mean + amplitude*cos(x)``."""
    return RefractiveProfile.cosine(mean, amplitude)
