"""Sample-based filtering posterior shared by every inference engine."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np


@dataclass
class PosteriorDraws:
    """``S`` equally weighted draws of ``(theta_t, eta)`` for each ``t``.

    ``theta`` has shape ``(T, S, d)`` and ``eta`` ``(T, S, d_eta)``; row ``t``
    of both is a draw from the filtering posterior given ``x_{1:t}``.
    """

    theta: np.ndarray
    eta: np.ndarray
    theta_names: tuple[str, ...]
    eta_names: tuple[str, ...]
    engine: str = ""
    warnings: list[str] = field(default_factory=list)
    ess: np.ndarray | None = None

    def __post_init__(self):
        if self.theta.ndim != 3 or self.eta.ndim != 3:
            raise ValueError("theta and eta draws must be (T, S, dim) arrays")
        if self.theta.shape[:2] != self.eta.shape[:2]:
            raise ValueError("theta and eta draws disagree on (T, S)")

    @property
    def T(self) -> int:
        return self.theta.shape[0]

    @property
    def S(self) -> int:
        return self.theta.shape[1]

    @property
    def names(self) -> tuple[str, ...]:
        return tuple(self.theta_names) + tuple(self.eta_names)

    def joint(self) -> np.ndarray:
        """All parameters side by side, shape ``(T, S, d + d_eta)``."""
        return np.concatenate([self.theta, self.eta], axis=-1)

    def mean(self) -> np.ndarray:
        return self.joint().mean(axis=1)

    def sd(self) -> np.ndarray:
        return self.joint().std(axis=1, ddof=1) if self.S > 1 else np.zeros((self.T, len(self.names)))

    def quantile(self, q) -> np.ndarray:
        return np.quantile(self.joint(), q, axis=1)

    def prefix(self, t: int) -> "PosteriorDraws":
        return PosteriorDraws(
            self.theta[:t],
            self.eta[:t],
            self.theta_names,
            self.eta_names,
            self.engine,
            list(self.warnings),
            None if self.ess is None else self.ess[:t],
        )
