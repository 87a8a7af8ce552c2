from __future__ import annotations

from dataclasses import dataclass

import numpy as np


@dataclass(frozen=True)
class Band:
    """Income band ``(lo, hi]`` in %FPL; ``include_lo`` closes the lower end."""

    name: str
    lo: float
    hi: float
    include_lo: bool = False

    def contains(self, fpl):
        fpl = np.asarray(fpl, dtype=float)
        lower = fpl >= self.lo if self.include_lo else fpl > self.lo
        return lower & (fpl <= self.hi)

    @classmethod
    def parse(cls, spec) -> Band:
        """From ``{"name", "lo", "hi", "include_lo"}`` or a ``"lo-hi"`` string."""
        if isinstance(spec, Band):
            return spec
        if isinstance(spec, str):
            lo, hi = (float(x) for x in spec.split("-"))
            return cls(spec, lo, hi, include_lo=True)
        return cls(str(spec["name"]), float(spec["lo"]), float(spec["hi"]), bool(spec.get("include_lo", False)))


# income groups used for demand responses; 151-200 etc. start just above the previous top
EFFECT_BANDS = (
    Band("138-400", 138, 400, include_lo=True),
    Band("138-150", 138, 150, include_lo=True),
    Band("151-200", 150, 200),
    Band("201-250", 200, 250),
    Band("251-300", 250, 300),
    Band("301-400", 300, 400),
)

LOSS_BANDS = (
    Band("138-200", 138, 200, include_lo=True),
    Band("201-300", 200, 300),
    Band("301-400", 300, 400),
)
