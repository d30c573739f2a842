"""ROI to subnetwork partitions.

The default layout mimics the shape of an AAL-116 / 7-network assignment:
the first 90 (cerebral) ROIs are split into 7 contiguous subnetworks and the
remaining 26 (cerebellar and vermis) ROIs are left unassigned. It is a
synthetic stand-in; real assignments load from a partition CSV.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path

import numpy as np


class PartitionError(ValueError):
    pass


@dataclass(frozen=True)
class AtlasPartition:
    """``subnet_of[i]`` is the 1-based subnetwork of ROI i, or None if unassigned."""

    roi_names: tuple[str, ...]
    subnet_of: tuple[int | None, ...]
    subnet_count: int

    def __post_init__(self):
        if len(self.roi_names) != len(self.subnet_of):
            raise PartitionError("roi_names and subnet_of differ in length")
        if self.subnet_count < 1:
            raise PartitionError("need at least one subnetwork")
        for i, k in enumerate(self.subnet_of):
            if k is not None and not 1 <= k <= self.subnet_count:
                raise PartitionError(f"ROI {i} assigned to subnetwork {k} outside 1..{self.subnet_count}")
        for k in range(1, self.subnet_count + 1):
            if k not in self.subnet_of:
                raise PartitionError(f"subnetwork {k} has no member ROIs")

    @property
    def roi_count(self) -> int:
        return len(self.roi_names)

    def members(self, k: int) -> list[int]:
        return [i for i, s in enumerate(self.subnet_of) if s == k]

    def unassigned(self) -> list[int]:
        return [i for i, s in enumerate(self.subnet_of) if s is None]

    def pooling_matrix(self) -> np.ndarray:
        """N x D matrix whose row k averages the ROIs of subnetwork k+1."""
        m = np.zeros((self.subnet_count, self.roi_count))
        for k in range(1, self.subnet_count + 1):
            idx = self.members(k)
            m[k - 1, idx] = 1.0 / len(idx)
        return m

    def permuted(self, perm) -> "AtlasPartition":
        """Partition seen after reordering ROIs so new ROI j is old ROI perm[j]."""
        return AtlasPartition(
            tuple(self.roi_names[p] for p in perm),
            tuple(self.subnet_of[p] for p in perm),
            self.subnet_count,
        )


def default_partition(roi_count: int = 116, subnet_count: int = 7, assigned: int | None = None) -> AtlasPartition:
    if assigned is None:
        assigned = 90 if roi_count == 116 else roi_count
    if assigned < subnet_count:
        raise PartitionError(f"cannot spread {assigned} ROIs over {subnet_count} subnetworks")
    sizes = [assigned // subnet_count + (1 if k < assigned % subnet_count else 0) for k in range(subnet_count)]
    subnet_of: list[int | None] = []
    for k, n in enumerate(sizes, start=1):
        subnet_of.extend([k] * n)
    subnet_of.extend([None] * (roi_count - assigned))
    names = tuple(f"roi_{i:03d}" for i in range(roi_count))
    return AtlasPartition(names, tuple(subnet_of), subnet_count)


def scattered_partition(roi_count: int = 116, subnet_count: int = 7, assigned: int | None = None,
                        seed: int = 0) -> AtlasPartition:
    """Same group sizes as ``default_partition`` but with membership shuffled over ROI positions,
    so no subnetwork sits at the start or end of the token sequence."""
    base = default_partition(roi_count, subnet_count, assigned)
    rng = np.random.default_rng(np.random.SeedSequence([seed, 0xA71]))
    labels = [base.subnet_of[i] for i in rng.permutation(roi_count)]
    return AtlasPartition(base.roi_names, tuple(labels), subnet_count)


def load_partition(path: str | Path) -> AtlasPartition:
    """Read a CSV with columns ``roi,name,subnet``; an empty subnet cell means unassigned."""
    with open(path, newline="") as fh:
        rows = list(csv.DictReader(fh))
    if not rows:
        raise PartitionError(f"{path}: no ROI rows")
    rows.sort(key=lambda r: int(r["roi"]))
    names = tuple(r["name"] for r in rows)
    subnet_of = tuple(int(r["subnet"]) if r["subnet"].strip() else None for r in rows)
    assigned = [s for s in subnet_of if s is not None]
    if not assigned:
        raise PartitionError(f"{path}: no ROI is assigned to a subnetwork")
    return AtlasPartition(names, subnet_of, max(assigned))


def write_partition(partition: AtlasPartition, path: str | Path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["roi", "name", "subnet"])
        for i, (n, s) in enumerate(zip(partition.roi_names, partition.subnet_of)):
            w.writerow([i, n, "" if s is None else s])
