"""Randomized saturation designs.

First stage: groups are assigned a saturation from a finite set, either a
fixed number of groups per saturation (completely at random) or i.i.d. from
the design weights.  Second stage: individuals receive Bernoulli(saturation)
treatment offers.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ValidationError
from .model import BasisSpec

_WEIGHT_TOL = 1e-12


@dataclass(frozen=True)
class SaturationDesign:
    """Saturations with assignment weights; offers are per-individual Bernoulli(s).

    Exactly one of ``counts`` (fixed number of groups per saturation) or
    pure probability ``weights`` drives the first stage.  ``weights`` always
    holds the implied probabilities and sums to one.
    """

    saturations: tuple[float, ...]
    weights: tuple[float, ...]
    counts: tuple[int, ...] | None = None

    def __post_init__(self):
        if not self.saturations:
            raise ValidationError("design needs at least one saturation")
        if len(set(self.saturations)) != len(self.saturations):
            raise ValidationError("saturations must be pairwise distinct")
        for s in self.saturations:
            if not 0.0 <= s <= 1.0:
                raise ValidationError(f"saturation {s} outside [0, 1]")
        if len(self.weights) != len(self.saturations):
            raise ValidationError("weights and saturations must align")
        if any(w < 0 for w in self.weights):
            raise ValidationError("weights must be nonnegative")
        if abs(sum(self.weights) - 1.0) > _WEIGHT_TOL:
            raise ValidationError("weights must sum to 1 within 1e-12")
        if self.counts is not None and len(self.counts) != len(self.saturations):
            raise ValidationError("counts and saturations must align")

    @classmethod
    def from_probs(cls, saturations, probs) -> "SaturationDesign":
        return cls(tuple(float(s) for s in saturations), tuple(float(p) for p in probs))

    @classmethod
    def from_counts(cls, saturations, counts) -> "SaturationDesign":
        counts = tuple(int(c) for c in counts)
        if any(c < 0 for c in counts):
            raise ValidationError("counts must be nonnegative")
        total = sum(counts)
        if total <= 0:
            raise ValidationError("counts must sum to a positive number of groups")
        weights = tuple(c / total for c in counts)
        return cls(tuple(float(s) for s in saturations), weights, counts)

    def moment(self, k: int = 1, m: int = 0) -> float:
        """E[S^k (1-S)^m] over the design distribution."""
        return float(
            sum(w * s**k * (1.0 - s) ** m for s, w in zip(self.saturations, self.weights))
        )

    @property
    def has_pure_control(self) -> bool:
        return any(s == 0.0 and w > 0 for s, w in zip(self.saturations, self.weights))

    @property
    def interior_saturations(self) -> tuple[float, ...]:
        return tuple(s for s, w in zip(self.saturations, self.weights) if 0.0 < s < 1.0 and w > 0)

    def positive_part(self) -> "SaturationDesign":
        """The design conditional on S > 0, weights renormalized."""
        kept = [(s, w) for s, w in zip(self.saturations, self.weights) if s > 0.0 and w > 0]
        if not kept:
            raise ValidationError("design has no positive-saturation support")
        total = sum(w for _, w in kept)
        return SaturationDesign(
            tuple(s for s, _ in kept), tuple(w / total for _, w in kept)
        )


@dataclass(frozen=True)
class DesignDiagnostics:
    """Identification diagnostics for a (design, basis) pair over a (cbar, n) grid."""

    per_saturation_counts: tuple[int, ...] | None
    interior_count: int
    min_det_q0: float
    min_det_q1: float
    min_relative_det: float
    min_eigenvalue: float
    singular: bool
    weakly_identified: bool
    threshold: float


def sample_saturations(design: SaturationDesign, G: int, rng: np.random.Generator) -> np.ndarray:
    """Assign a saturation to each of G groups.

    With counts, exactly ``counts[j]`` groups get saturation j (a completely
    random permutation); with probabilities, groups draw i.i.d.
    """
    if G <= 0:
        raise ValidationError("G must be positive")
    if design.counts is not None:
        if sum(design.counts) != G:
            raise ValidationError(
                f"design counts sum to {sum(design.counts)}, not G={G}"
            )
        pool = np.repeat(np.asarray(design.saturations), np.asarray(design.counts))
        return rng.permutation(pool)
    return rng.choice(np.asarray(design.saturations), size=G, p=np.asarray(design.weights))


def assign_offers(n: int, s: float, rng: np.random.Generator) -> np.ndarray:
    """Draw the length-n offer vector: i.i.d. Bernoulli(s) entries."""
    if n < 2:
        raise ValidationError("each group must have at least two members")
    if not 0.0 <= s <= 1.0:
        raise ValidationError("saturation outside [0, 1]")
    if s == 0.0:
        return np.zeros(n, dtype=np.int8)
    if s == 1.0:
        return np.ones(n, dtype=np.int8)
    return (rng.random(n) < s).astype(np.int8)


def validate_design(
    design: SaturationDesign,
    basis: BasisSpec,
    n_grid=(11, 101, 1001),
    cbar_grid=(0.1, 0.3, 0.5),
    det_threshold: float = 1e-10,
) -> DesignDiagnostics:
    """Scan Q0/Q1 over a (cbar, n) grid and flag identification problems.

    The scan includes the large-n limit matrices, so a design whose
    determinants merely vanish as n grows (e.g. a single saturation) is
    flagged as weakly identified at the default threshold.  The cluster
    randomized case (only corner saturations) is flagged as singular:
    minimum eigenvalue at or below 1e-12 at every grid point.
    """
    from . import moments  # deferred: moments consumes this module's types

    dets0, dets1, rel_dets, min_eigs = [], [], [], []

    def _record(q0: np.ndarray, q1: np.ndarray) -> None:
        for q in (q0, q1):
            det = float(np.linalg.det(q))
            (dets0 if q is q0 else dets1).append(det)
            diag_prod = float(np.prod(np.diag(q)))
            rel_dets.append(det / diag_prod if diag_prod > 0 else 0.0)
            min_eigs.append(float(np.linalg.eigvalsh(q)[0]))

    for cbar in cbar_grid:
        for n in n_grid:
            q0 = moments.q_extended(basis, cbar, n, design, z=0)
            q1 = moments.q_extended(basis, cbar, n, design, z=1)
            _record(q0, q1)
        _record(
            moments.q_limit(basis, cbar, design, z=0),
            moments.q_limit(basis, cbar, design, z=1),
        )

    singular = bool(all(e <= 1e-12 for e in min_eigs))
    weak = bool(min(rel_dets) < det_threshold)
    return DesignDiagnostics(
        per_saturation_counts=design.counts,
        interior_count=len(design.interior_saturations),
        min_det_q0=float(min(dets0)),
        min_det_q1=float(min(dets1)),
        min_relative_det=float(min(rel_dets)),
        min_eigenvalue=float(min(min_eigs)),
        singular=singular,
        weakly_identified=singular or weak,
        threshold=det_threshold,
    )
