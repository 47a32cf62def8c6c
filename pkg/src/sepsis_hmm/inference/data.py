"""Padded array layout of a cohort for vectorised latent updates."""
from __future__ import annotations

import hashlib
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from ..model import LatentState, Outcome, PatientEpisode

NO_TERMINAL = -1


@dataclass
class CohortArrays:
    """Episodes sorted by decreasing length so that the rows still active at
    interval ``t`` are always the prefix ``[:n_active[t]]``.

    ``perm[r]`` is the original episode index of row ``r``.
    """

    cov: np.ndarray        # (N, 3)
    x: np.ndarray          # (N, Tmax, 5), zero padded
    lengths: np.ndarray    # (N,)
    terminal: np.ndarray   # (N,) 0 (G), 4 (D) or NO_TERMINAL
    perm: np.ndarray       # (N,)
    n_active: np.ndarray   # (Tmax,)
    mask: np.ndarray       # (N, Tmax) bool

    @property
    def n(self) -> int:
        return len(self.lengths)

    @property
    def t_max(self) -> int:
        return self.x.shape[1]

    @property
    def x_flat(self) -> np.ndarray:
        return self.x[self.mask]

    @classmethod
    def build(cls, episodes: Sequence[PatientEpisode], use_outcomes: bool) -> "CohortArrays":
        if len(episodes) == 0:
            raise ValueError("cohort is empty")
        lengths = np.array([e.n_intervals for e in episodes])
        perm = np.argsort(-lengths, kind="stable")
        lengths = lengths[perm]
        n, t_max = len(episodes), int(lengths[0])
        x = np.zeros((n, t_max, 5))
        cov = np.empty((n, 3))
        terminal = np.full(n, NO_TERMINAL)
        for r, i in enumerate(perm):
            e = episodes[i]
            x[r, : e.n_intervals] = e.vitals
            cov[r] = e.covariates.as_array()
            if use_outcomes:
                if e.outcome == Outcome.DISCHARGED:
                    terminal[r] = LatentState.G
                elif e.outcome == Outcome.DIED:
                    terminal[r] = LatentState.D
        mask = np.arange(t_max)[None, :] < lengths[:, None]
        n_active = mask.sum(0)
        return cls(cov, x, lengths, terminal, perm, n_active, mask)

    def unpermute(self, rows: np.ndarray) -> list:
        """Per-episode arrays in original order from a row-indexed (N, Tmax, ...) array."""
        out = [None] * self.n
        for r, i in enumerate(self.perm):
            out[i] = rows[r, : self.lengths[r]]
        return out

    def fingerprint(self) -> str:
        h = hashlib.sha256()
        for a in (self.cov, self.x, self.lengths, self.terminal, self.perm):
            h.update(np.ascontiguousarray(a).tobytes())
        return h.hexdigest()
