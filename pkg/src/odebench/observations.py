"""Noisy observation container shared by the inference engines."""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass, field
from typing import Any

import numpy as np

__all__ = ["ObservationSet"]


@dataclass(frozen=True)
class ObservationSet:
    """Observations at N times for a D-component system.

    ``mask[c]`` is True when component c is observed at all; masked-out
    columns carry NaN everywhere.  Observed columns may still contain NaN
    at individual times (pointwise missingness).
    """

    times: np.ndarray
    values: np.ndarray
    mask: tuple[bool, ...]
    noise_spec: dict[str, Any] = field(default_factory=dict)
    seed: int | None = None

    def __post_init__(self):
        times = np.asarray(self.times, dtype=float)
        values = np.asarray(self.values, dtype=float)
        object.__setattr__(self, "times", times)
        object.__setattr__(self, "values", values)
        if times.ndim != 1 or np.any(np.diff(times) <= 0):
            raise ValueError("observation times must be strictly increasing")
        if values.shape != (times.size, len(self.mask)):
            raise ValueError("values must be N x D with D = len(mask)")
        for c, observed in enumerate(self.mask):
            if not observed and not np.all(np.isnan(values[:, c])):
                raise ValueError(f"masked-out component {c} must carry no values")

    @property
    def n_components(self) -> int:
        return len(self.mask)

    def observed_components(self) -> list[int]:
        return [c for c, flag in enumerate(self.mask) if flag]

    def component_values(self, c: int) -> tuple[np.ndarray, np.ndarray]:
        """(times, values) for one observed component, NaN entries dropped."""
        if not self.mask[c]:
            raise ValueError(f"component {c} is not observed")
        keep = ~np.isnan(self.values[:, c])
        return self.times[keep], self.values[keep, c]

    def to_csv(self, path, component_names, sidecar: dict | None = None) -> None:
        """Dataset CSV: t plus one column per observed component."""
        observed = self.observed_components()
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["t"] + [component_names[c] for c in observed])
            for i, t in enumerate(self.times):
                row = [f"{t:.17g}"]
                for c in observed:
                    v = self.values[i, c]
                    row.append("" if np.isnan(v) else f"{v:.17g}")
                writer.writerow(row)
        if sidecar is not None:
            meta = dict(sidecar)
            meta.setdefault("noise_spec", self.noise_spec)
            meta.setdefault("seed", self.seed)
            meta["mask"] = list(self.mask)
            with open(str(path) + ".json", "w") as fh:
                json.dump(meta, fh, indent=2, sort_keys=True)
