"""Binary masks, sparsity budgets, and gradient-guided topology evolution.

A group of weight matrices is evolved jointly under one sparsity budget:
the active-connection count is fixed at init and preserved by every
evolution step, which drops the smallest-magnitude active weights and grows
the same number of empty positions with the largest dense-gradient
magnitude. Masks are dense {0,1} bitmaps; at desk scale clarity beats any
compressed storage format.
"""
from __future__ import annotations

import io
from dataclasses import dataclass, field

import numpy as np

from .numerics import GradStore, Param


@dataclass
class SparseSlot:
    """A weight matrix paired with a same-shape binary mask."""

    weights: Param
    mask: np.ndarray
    slot_id: str

    def __post_init__(self):
        self.mask = np.asarray(self.mask, dtype=np.float64)
        if self.mask.shape != self.weights.value.shape:
            raise ValueError(
                f"mask shape {self.mask.shape} != weights {self.weights.value.shape}"
            )
        if not np.all((self.mask == 0.0) | (self.mask == 1.0)):
            raise ValueError("mask entries must be 0 or 1")

    @property
    def size(self) -> int:
        return self.weights.value.size

    def ones(self) -> int:
        return int(self.mask.sum())


def apply_mask(slot: SparseSlot) -> None:
    """Zero the weights at every mask-zero position, exactly."""
    slot.weights.value *= slot.mask


@dataclass
class EvolutionSchedule:
    """Cosine-annealed update fraction, frozen after t_end.

    zeta(t) = (zeta0/2) * (1 + cos(pi * t / t_end)) for t < t_end, else 0.
    delta_m is the interval between mask updates, counted in completed
    episodes (the training loop updates once per episode).
    """

    zeta0: float = 0.5
    delta_m: int = 200
    t_end: int = 1

    def __post_init__(self):
        if not (0.0 < self.zeta0 <= 1.0):
            raise ValueError(f"zeta0 must be in (0, 1], got {self.zeta0}")
        if self.delta_m < 1:
            raise ValueError(f"delta_m must be >= 1, got {self.delta_m}")


def zeta_at(schedule: EvolutionSchedule, t: int) -> float:
    if t < 0:
        raise ValueError(f"step must be >= 0, got {t}")
    if t >= schedule.t_end:
        return 0.0
    return 0.5 * schedule.zeta0 * (1.0 + np.cos(np.pi * t / schedule.t_end))


@dataclass
class EvolutionGroup:
    """SparseSlots evolved jointly under one sparsity budget.

    The slots' matrices are treated as a single concatenated parameter pool
    (row-major within each slot, slots in list order), so the per-slot
    sparsity allocation is discovered rather than prescribed.
    """

    slots: list
    sparsity: float
    name: str = "group"
    total_params: int = field(init=False)
    active_target: int = field(init=False)

    def __post_init__(self):
        if not (0.0 <= self.sparsity < 1.0):
            raise ValueError(f"sparsity must be in [0, 1), got {self.sparsity}")
        self.total_params = sum(s.size for s in self.slots)
        self.active_target = int(round((1.0 - self.sparsity) * self.total_params))

    def ones(self) -> int:
        return sum(s.ones() for s in self.slots)

    def _concat(self, arrays) -> np.ndarray:
        return np.concatenate([a.reshape(-1) for a in arrays])

    def flat_weights(self) -> np.ndarray:
        return self._concat([s.weights.value for s in self.slots])

    def flat_mask(self) -> np.ndarray:
        return self._concat([s.mask for s in self.slots])

    def scatter_mask(self, flat: np.ndarray) -> None:
        ofs = 0
        for s in self.slots:
            n = s.size
            s.mask[...] = flat[ofs:ofs + n].reshape(s.mask.shape)
            ofs += n


@dataclass
class EvolutionReport:
    """What one evolution step did, in group-flat indices."""

    step: int
    zeta: float
    k: int
    dropped: np.ndarray
    grown: np.ndarray
    shortfall: int = 0


def random_init_mask(group: EvolutionGroup, rng: np.random.Generator) -> None:
    """Place exactly active_target ones uniformly over the concatenated pool."""
    flat = np.zeros(group.total_params)
    chosen = rng.choice(group.total_params, size=group.active_target, replace=False)
    flat[chosen] = 1.0
    group.scatter_mask(flat)
    for s in group.slots:
        apply_mask(s)


def _ascending_by(values: np.ndarray, candidates: np.ndarray, k: int) -> np.ndarray:
    """First k candidate indices ordered by (values, flat index)."""
    order = np.lexsort((candidates, values[candidates]))
    return candidates[order[:k]]


def evolve(group: EvolutionGroup, grads: GradStore, t: int,
           schedule: EvolutionSchedule) -> EvolutionReport:
    """One drop/grow step over the group's concatenated pool.

    Drops the k active connections of smallest |weight| and grows the k
    empty positions (empty before the update, so a just-dropped connection
    cannot come straight back) of largest dense |gradient|. Grown weights
    start at exactly zero. Ties break by flat index ascending.
    """
    zeta = zeta_at(schedule, t)
    # 1e-9 guard keeps floor() from undershooting on representation error
    k = int(np.floor(zeta * (1.0 - group.sparsity) * group.total_params + 1e-9))
    mask = group.flat_mask()
    if k == 0:
        return EvolutionReport(t, zeta, 0, np.empty(0, int), np.empty(0, int))

    weights = group.flat_weights()
    grad_flat = group._concat([grads.of(s.weights) for s in group.slots])

    active = np.flatnonzero(mask == 1.0)
    empty = np.flatnonzero(mask == 0.0)
    shortfall = max(0, k - empty.size)
    k_eff = min(k, empty.size)

    dropped = _ascending_by(np.abs(weights), active, k_eff)
    grown = _ascending_by(-np.abs(grad_flat), empty, k_eff)

    mask[dropped] = 0.0
    mask[grown] = 1.0
    group.scatter_mask(mask)
    ofs = 0
    for s in group.slots:
        n = s.size
        in_slot = grown[(grown >= ofs) & (grown < ofs + n)] - ofs
        s.weights.value.reshape(-1)[in_slot] = 0.0
        apply_mask(s)
        ofs += n
    return EvolutionReport(t, zeta, k_eff, dropped, grown, shortfall)


@dataclass
class MaskStats:
    """Nonzero-connection counts per input and output dimension of one slot."""

    slot_id: str
    step: int
    input_counts: np.ndarray
    output_counts: np.ndarray

    @property
    def input_counts_sorted(self) -> np.ndarray:
        return np.sort(self.input_counts)[::-1]

    @property
    def output_counts_sorted(self) -> np.ndarray:
        return np.sort(self.output_counts)[::-1]

    def to_csv_rows(self):
        for kind, counts in (("input", self.input_counts), ("output", self.output_counts)):
            for dim, c in enumerate(counts):
                yield self.step, self.slot_id, kind, dim, int(c)


def mask_stats(slot: SparseSlot, step: int) -> MaskStats:
    """Row/column nonzero counts of a slot's mask (rows are output dims)."""
    m = slot.mask != 0.0
    return MaskStats(
        slot_id=slot.slot_id,
        step=step,
        input_counts=m.sum(axis=0).astype(np.int64),
        output_counts=m.sum(axis=1).astype(np.int64),
    )


MASK_STATS_HEADER = "step,slot_id,dim_kind,dim_index,nonzero_count"


def mask_stats_csv(stats: list) -> str:
    buf = io.StringIO()
    buf.write(MASK_STATS_HEADER + "\n")
    for st in stats:
        for row in st.to_csv_rows():
            buf.write(",".join(str(v) for v in row) + "\n")
    return buf.getvalue()


def mask_bitmap(slot: SparseSlot) -> str:
    """Textual bitmap of the mask, one row per output dimension."""
    lines = ["".join("1" if v else "0" for v in row) for row in (slot.mask != 0.0)]
    return "\n".join(lines) + "\n"
