"""Gaussian-mixture tasks on the unit square and their grid discretisation.

Components are axis-aligned Gaussians truncated to ``[0,1]^2``; one
component per class.  Cell masses are exact products of normal CDF
differences, so the discretised prior needs no sampling.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.special import ndtr

from .nn import LabeledDataset
from .task import FiniteTask, TaskError


class GridTooCoarse(TaskError):
    pass


@dataclass(frozen=True)
class MixtureSpec:
    """One axis-aligned Gaussian per class, truncated to the unit square."""

    means: tuple
    stds: tuple
    weights: tuple
    grid: int = 32

    def __post_init__(self):
        means = np.asarray(self.means, dtype=float)
        stds = np.asarray(self.stds, dtype=float)
        w = np.asarray(self.weights, dtype=float)
        if means.shape != stds.shape or means.ndim != 2 or means.shape[0] != w.size:
            raise TaskError("means, stds and weights disagree")
        if np.any(stds <= 0) or np.any(w <= 0):
            raise TaskError("stds and weights must be positive")
        if self.grid < 1:
            raise TaskError("grid must be positive")
        object.__setattr__(self, "means", tuple(map(tuple, means)))
        object.__setattr__(self, "stds", tuple(map(tuple, stds)))
        object.__setattr__(self, "weights", tuple(w / w.sum()))

    @property
    def n_labels(self) -> int:
        return len(self.weights)

    @property
    def dim(self) -> int:
        return len(self.means[0])

    @classmethod
    def from_dict(cls, doc: dict) -> MixtureSpec:
        return cls(tuple(map(tuple, doc["means"])), tuple(map(tuple, doc["stds"])),
                   tuple(doc["weights"]), int(doc.get("grid", 32)))

    def to_dict(self) -> dict:
        return {"means": [list(m) for m in self.means], "stds": [list(s) for s in self.stds],
                "weights": list(self.weights), "grid": self.grid}

    # -- sampling -----------------------------------------------------------

    def sample(self, n: int, seed) -> LabeledDataset:
        """``n`` labelled points; draws outside the unit square are redrawn."""
        rng = np.random.default_rng(seed)
        means = np.asarray(self.means)
        stds = np.asarray(self.stds)
        labels = rng.choice(self.n_labels, size=n, p=np.asarray(self.weights))
        x = np.empty((n, self.dim))
        todo = np.arange(n)
        while todo.size:
            draw = rng.normal(means[labels[todo]], stds[labels[todo]])
            ok = np.all((draw >= 0) & (draw <= 1), axis=1)
            x[todo[ok]] = draw[ok]
            todo = todo[~ok]
        return LabeledDataset(x, labels, self.n_labels)

    # -- discretisation -----------------------------------------------------

    def edges(self) -> np.ndarray:
        return np.linspace(0.0, 1.0, self.grid + 1)

    def cell_centers(self) -> np.ndarray:
        """Centres in row-major order: cell ``(i, j)`` has index ``i * grid + j``."""
        c = (np.arange(self.grid) + 0.5) / self.grid
        gx, gy = np.meshgrid(c, c, indexing="ij")
        return np.column_stack([gx.ravel(), gy.ravel()])

    def cell_index(self, points) -> np.ndarray:
        p = np.atleast_2d(np.asarray(points, dtype=float))
        ij = np.clip(np.floor(p * self.grid).astype(int), 0, self.grid - 1)
        return ij[:, 0] * self.grid + ij[:, 1]

    def class_cell_mass(self) -> np.ndarray:
        """``(L, cells)`` array: weight times the truncated component mass of each cell."""
        if self.dim != 2:
            raise TaskError("discretisation is implemented for 2-D inputs")
        e = self.edges()
        out = []
        for w, m, s in zip(self.weights, self.means, self.stds):
            px = np.diff(ndtr((e - m[0]) / s[0]))
            py = np.diff(ndtr((e - m[1]) / s[1]))
            cube = px.sum() * py.sum()
            if cube <= 0:
                # no representable mass inside the square; discretize() rejects it
                out.append(np.zeros(self.grid * self.grid))
                continue
            out.append(w * np.outer(px, py).ravel() / cube)
        return np.array(out)

    def discretize(self) -> FiniteTask:
        """Grid task whose prior is the mixture mass per cell and whose conditional is the class posterior."""
        mass = self.class_cell_mass()
        for k, row in enumerate(mass):
            if row.sum() <= 1e-300:
                raise GridTooCoarse(f"class {k} has no mass on the grid")
        prior = mass.sum(axis=0)
        total = prior.sum()
        cond = np.where(prior > 0, mass / np.where(prior > 0, prior, 1.0), 1.0 / self.n_labels).T
        return FiniteTask(self.cell_centers(), prior / total, cond)


def band_mixture(grid: int = 32) -> MixtureSpec:
    """Two thin horizontal bands separated by a sparsely populated strip.

    Class 1 sits just below ``y = 0.5`` and class 0 just above.  The strip
    holds only the tails of both bands, so almost every class-1 point is
    within ``0.1`` of a region the benign model has seen little data in.
    """
    return MixtureSpec(
        means=((0.5, 0.58), (0.5, 0.42)),
        stds=((0.15, 0.025), (0.15, 0.025)),
        weights=(0.5, 0.5),
        grid=grid,
    )


def generate_task(spec: MixtureSpec, n: int, seed):
    """Sampled dataset plus the discretised task, both deterministic per seed."""
    return spec.sample(n, seed), spec.discretize()
