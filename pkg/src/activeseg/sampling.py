"""Query strategies, annotation bookkeeping and the simulated annotator.

Reference labels live inside :class:`PoolState` and only leave it as
:class:`~activeseg.learner.PartialLabels` restricted to what has been
annotated. The one exception is :meth:`PoolState.slice_has_liver`, which the
random-slice strategy needs for its stopping rule.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, fields
from typing import Mapping, Union

import numpy as np

from .errors import ExhaustedPoolError, InvalidArgumentError
from .learner import PartialLabels
from .uncertainty import SliceUncertaintyProfile
from .volume import LabelVolume

FULL = "full"


@dataclass(frozen=True)
class Ledger:
    slices: int = 0
    liver_slices: int = 0
    volumes: int = 0
    full_liver_slices: int = 0  # liver slices inside fully annotated volumes
    isolated_liver_slices: int = 0  # liver slices annotated as separate slices

    def __add__(self, other: "Ledger") -> "Ledger":
        return Ledger(*(getattr(self, f.name) + getattr(other, f.name) for f in fields(self)))

    def __sub__(self, other: "Ledger") -> "Ledger":
        return Ledger(*(getattr(self, f.name) - getattr(other, f.name) for f in fields(self)))

    def to_dict(self) -> dict:
        return {f.name: getattr(self, f.name) for f in fields(self)}


@dataclass(frozen=True)
class VolumeSelection:
    ids: tuple[str, ...]


@dataclass(frozen=True)
class SliceSelection:
    pairs: tuple[tuple[str, int], ...]
    exhausted: bool = False


Selection = Union[VolumeSelection, SliceSelection]


@dataclass(frozen=True)
class BudgetRule:
    volumes_per_iteration: int = 5
    slice_budget: int | None = None  # None: derive from volume-strategy liver slices
    liver_divisor: float = 3.0
    granularity: int = 1

    def validate(self):
        if self.volumes_per_iteration < 1 or self.liver_divisor <= 0 or self.granularity < 1:
            raise InvalidArgumentError("budget values must be positive")
        if self.slice_budget is not None and self.slice_budget < 1:
            raise InvalidArgumentError("slice budget must be positive")


class PoolState:
    """Annotation status of every pool volume plus the running effort ledger.

    Instances are treated as immutable; :func:`annotate` returns a new one.
    """

    def __init__(self, references: Mapping[str, LabelVolume], status=None, ledger: Ledger | None = None):
        self._refs = dict(references)
        self._liver = {vid: ref.data.any(axis=(0, 1)) for vid, ref in self._refs.items()}
        self._status = {vid: frozenset() for vid in self._refs}
        if status:
            unknown = set(status) - set(self._refs)
            if unknown:
                raise InvalidArgumentError(f"status for unknown volumes: {sorted(unknown)}")
            self._status.update(status)
        self.ledger = ledger if ledger is not None else self.audit()

    @classmethod
    def _derived(cls, parent: "PoolState", status: dict, ledger: Ledger) -> "PoolState":
        new = cls.__new__(cls)
        new._refs = parent._refs
        new._liver = parent._liver
        new._status = status
        new.ledger = ledger
        return new

    # -- queries ---------------------------------------------------------

    @property
    def ids(self) -> list[str]:
        return sorted(self._refs)

    def nz(self, vid: str) -> int:
        return self._refs[vid].dims[2]

    def is_full(self, vid: str) -> bool:
        return self._status[vid] == FULL

    def annotated_slices(self, vid: str) -> frozenset[int]:
        st = self._status[vid]
        return frozenset(range(self.nz(vid))) if st == FULL else st

    def is_annotated(self, vid: str) -> bool:
        return self.is_full(vid) or bool(self._status[vid])

    def eligible_ids(self) -> list[str]:
        """Volumes that are not fully annotated."""
        return [vid for vid in self.ids if not self.is_full(vid)]

    def annotated_ids(self) -> list[str]:
        return [vid for vid in self.ids if self.is_annotated(vid)]

    def slice_has_liver(self, vid: str, z: int) -> bool:
        # simulation privilege: the random-slice stopping rule peeks at the reference
        return bool(self._liver[vid][z])

    def partial_labels(self, vid: str) -> PartialLabels | None:
        if not self.is_annotated(vid):
            return None
        ref = self._refs[vid]
        if self.is_full(vid):
            return PartialLabels.full(ref)
        return PartialLabels.from_slices(ref, self._status[vid])

    def status_dict(self) -> dict:
        return {vid: (FULL if st == FULL else sorted(st)) for vid, st in sorted(self._status.items())}

    # -- ledger ----------------------------------------------------------

    def _contribution(self, vid: str, st) -> Ledger:
        liver = self._liver[vid]
        if st == FULL:
            n_liver = int(liver.sum())
            return Ledger(len(liver), n_liver, 1, n_liver, 0)
        if not st:
            return Ledger()
        n_liver = int(sum(bool(liver[z]) for z in st))
        return Ledger(len(st), n_liver, 1, 0, n_liver)

    def audit(self) -> Ledger:
        """Ledger recomputed from per-volume status."""
        total = Ledger()
        for vid in self.ids:
            total = total + self._contribution(vid, self._status[vid])
        return total

    # -- persistence -----------------------------------------------------

    def to_json(self) -> dict:
        return {"volumes": self.status_dict(), "ledger": self.ledger.to_dict()}

    @classmethod
    def from_json(cls, doc: dict, references: Mapping[str, LabelVolume]) -> "PoolState":
        status = {}
        for vid, st in doc["volumes"].items():
            status[vid] = FULL if st == FULL else frozenset(int(z) for z in st)
        pool = cls(references, status)
        if "ledger" in doc and Ledger(**doc["ledger"]) != pool.ledger:
            raise InvalidArgumentError("stored ledger does not match the annotation status")
        return pool


# ---------------------------------------------------------------------------
# strategies


def select_uvs(pool: PoolState, volume_uncertainties: Mapping[str, float], k: int) -> VolumeSelection:
    """Top-``k`` eligible volumes by uncertainty (ties: lower id first)."""
    eligible = pool.eligible_ids()
    if not eligible:
        raise ExhaustedPoolError("no volumes left to annotate")
    missing = [vid for vid in eligible if vid not in volume_uncertainties]
    if missing:
        raise InvalidArgumentError(f"no uncertainty for eligible volumes {missing[:5]}")
    ranked = sorted(eligible, key=lambda vid: (-volume_uncertainties[vid], vid))
    return VolumeSelection(tuple(ranked[: max(0, k)]))


def select_rvs(pool: PoolState, rng: np.random.Generator, k: int) -> VolumeSelection:
    eligible = pool.eligible_ids()
    if not eligible:
        raise ExhaustedPoolError("no volumes left to annotate")
    k = min(max(0, k), len(eligible))
    picks = rng.choice(len(eligible), size=k, replace=False)
    return VolumeSelection(tuple(eligible[i] for i in picks))


def select_uss(pool: PoolState, profiles: Mapping[str, SliceUncertaintyProfile], n_slices: int) -> SliceSelection:
    """Globally most uncertain slice candidates across eligible volumes.

    Candidates are the precomputed profile peaks minus already annotated
    slices, ordered by (uncertainty desc, volume id, z).
    """
    cands = []
    for vid in pool.eligible_ids():
        if vid not in profiles:
            raise InvalidArgumentError(f"no slice profile for eligible volume {vid}")
        prof = profiles[vid]
        done = pool.annotated_slices(vid)
        for z in prof.peaks:
            if z not in done:
                cands.append((-float(prof.values[z]), vid, int(z)))
    cands.sort()
    picked = tuple((vid, z) for _, vid, z in cands[: max(0, n_slices)])
    return SliceSelection(picked, exhausted=len(picked) < n_slices)


def select_rss(pool: PoolState, rng: np.random.Generator, n_liver_slices: int) -> SliceSelection:
    """Random unannotated slices until ``n_liver_slices`` of them contain liver.

    All drawn slices are returned, with and without liver.
    """
    free = [(vid, z) for vid in pool.eligible_ids() for z in range(pool.nz(vid))
            if z not in pool.annotated_slices(vid)]
    drawn = []
    n_liver = 0
    if n_liver_slices > 0:
        for i in rng.permutation(len(free)):
            vid, z = free[i]
            drawn.append((vid, z))
            n_liver += pool.slice_has_liver(vid, z)
            if n_liver >= n_liver_slices:
                break
    return SliceSelection(tuple(drawn), exhausted=n_liver < n_liver_slices)


# ---------------------------------------------------------------------------
# annotation


def annotate(pool: PoolState, sel: Selection) -> tuple[PoolState, dict[str, PartialLabels]]:
    """Apply a selection with the reference labels.

    Returns the new pool and the updated :class:`PartialLabels` of every
    touched volume.
    """
    status = dict(pool._status)
    touched = []
    if isinstance(sel, VolumeSelection):
        for vid in sel.ids:
            if vid not in status:
                raise InvalidArgumentError(f"unknown volume {vid!r}")
            if status[vid] == FULL or vid in touched:
                raise InvalidArgumentError(f"volume {vid!r} is already fully annotated")
            status[vid] = FULL
            touched.append(vid)
    elif isinstance(sel, SliceSelection):
        for vid, z in sel.pairs:
            if vid not in status:
                raise InvalidArgumentError(f"unknown volume {vid!r} at z={z}")
            if not 0 <= z < pool.nz(vid):
                raise InvalidArgumentError(f"slice ({vid!r}, {z}) is out of range")
            st = status[vid]
            if st == FULL or z in st:
                raise InvalidArgumentError(f"slice ({vid!r}, {z}) is already annotated")
            status[vid] = st | {int(z)}
            if vid not in touched:
                touched.append(vid)
    else:
        raise InvalidArgumentError(f"not a selection: {sel!r}")

    ledger = pool.ledger
    for vid in touched:
        ledger = ledger + pool._contribution(vid, status[vid]) - pool._contribution(vid, pool._status[vid])
    new = PoolState._derived(pool, status, ledger)
    return new, {vid: new.partial_labels(vid) for vid in touched}


# ---------------------------------------------------------------------------
# budget


def compute_slice_budget(liver_slices_per_iteration, divisor: float = 3.0, granularity: int = 1) -> int:
    """Slices per slice-strategy iteration matching a volume-strategy iteration.

    ``mean / divisor`` is rounded half up to a multiple of ``granularity``,
    with a floor of 1.
    """
    values = list(liver_slices_per_iteration)
    if not values:
        raise InvalidArgumentError("need liver-slice counts from at least one iteration")
    if divisor <= 0 or granularity < 1:
        raise InvalidArgumentError("divisor and granularity must be positive")
    target = sum(values) / len(values) / divisor
    return max(1, int(granularity * math.floor(target / granularity + 0.5)))


def effort_units(delta: Ledger) -> float:
    """Annotation effort: 1 per liver slice in a whole volume, 3 per isolated liver slice."""
    return delta.full_liver_slices + 3 * delta.isolated_liver_slices
