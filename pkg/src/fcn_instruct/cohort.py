"""Synthetic cohorts with planted, subnetwork-localized attribute effects.

Each subject's BOLD series is drawn from a Gaussian whose covariance is a
shared base structure plus, for every attribute with an effect, a shift of
``delta * z`` on the off-diagonal block linking two subnetworks, where ``z``
is the subject's standardized attribute value.
"""

from __future__ import annotations

import json
import logging
import os
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

import numpy as np

from .atlas import AtlasPartition, default_partition, load_partition
from .fcn import BoldSeries, write_bold_csv

try:
    import tomllib
except ModuleNotFoundError:  # python < 3.11
    import tomli as tomllib

log = logging.getLogger(__name__)

AGE_BINS = (0.0, 10.0, 19.0, 40.0, 65.0, 100.0)
AGE_BIN_NAMES = ("early childhood", "adolescence", "early adulthood", "middle adulthood", "late adulthood")


class GenerationError(RuntimeError):
    pass


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class Effect:
    """Covariance shift of ``delta`` per standardized unit on subnetwork pair ``pair``."""

    pair: tuple[int, int]
    delta: float
    label: str | None = None  # positive class for categorical contrasts


@dataclass(frozen=True)
class AttributeDef:
    name: str
    kind: str  # "categorical" | "continuous"
    labels: tuple[str, ...] = ()
    min: float = 0.0
    max: float = 1.0
    effect: Effect | None = None
    weights: tuple[float, ...] | None = None
    bins: tuple[float, ...] | None = None
    coverage: float = 1.0

    def __post_init__(self):
        if self.kind not in ("categorical", "continuous"):
            raise ConfigError(f"{self.name}: unknown kind {self.kind!r}")
        if self.kind == "categorical":
            if not self.labels:
                raise ConfigError(f"{self.name}: categorical attribute needs labels")
            if len(set(self.labels)) != len(self.labels):
                raise ConfigError(f"{self.name}: duplicate labels {self.labels}")
            if self.weights is not None and len(self.weights) != len(self.labels):
                raise ConfigError(f"{self.name}: {len(self.weights)} weights for {len(self.labels)} labels")
            if self.effect and self.effect.label is not None and self.effect.label not in self.labels:
                raise ConfigError(f"{self.name}: effect label {self.effect.label!r} not among labels")
        else:
            if not self.min < self.max:
                raise ConfigError(f"{self.name}: need min < max, got [{self.min}, {self.max}]")
            if self.bins is not None:
                if self.weights is None or len(self.weights) != len(self.bins) - 1:
                    raise ConfigError(f"{self.name}: bins need one weight per interval")
        if not 0.0 < self.coverage <= 1.0:
            raise ConfigError(f"{self.name}: coverage must lie in (0, 1]")

    @property
    def is_categorical(self) -> bool:
        return self.kind == "categorical"

    def standardize(self, value) -> float:
        if self.is_categorical:
            positive = self.effect.label if self.effect and self.effect.label else self.labels[-1]
            return 1.0 if value == positive else -1.0
        mid = (self.min + self.max) / 2.0
        return (float(value) - mid) / ((self.max - self.min) / 2.0)

    def sample(self, rng: np.random.Generator):
        if self.coverage < 1.0 and rng.random() >= self.coverage:
            return None
        if self.is_categorical:
            p = _probs(self.weights, len(self.labels))
            return self.labels[int(rng.choice(len(self.labels), p=p))]
        if self.bins is not None:
            p = _probs(self.weights, len(self.bins) - 1)
            k = int(rng.choice(len(p), p=p))
            lo, hi = self.bins[k], self.bins[k + 1]
            return float(lo + (hi - lo) * rng.random())
        return float(self.min + (self.max - self.min) * rng.random())


def _probs(weights, n):
    w = np.ones(n) if weights is None else np.asarray(weights, dtype=float)
    return w / w.sum()


@dataclass(frozen=True)
class CohortSpec:
    n_subjects: int
    T: int
    partition: AtlasPartition
    attributes: tuple[AttributeDef, ...]
    base_noise: float = 0.05
    within_subnet: float = 0.45
    test_fraction: float = 0.2
    seed: int = 0

    def __post_init__(self):
        if self.n_subjects < 2:
            raise ConfigError("n_subjects must be >= 2")
        if self.T < 2:
            raise ConfigError("T must be >= 2")
        names = [a.name for a in self.attributes]
        if len(set(names)) != len(names):
            raise ConfigError(f"duplicate attribute names in {names}")
        for a in self.attributes:
            if a.effect:
                for k in a.effect.pair:
                    if not 1 <= k <= self.partition.subnet_count:
                        raise ConfigError(f"{a.name}: effect subnetwork {k} outside 1..{self.partition.subnet_count}")

    def attribute(self, name: str) -> AttributeDef:
        for a in self.attributes:
            if a.name == name:
                return a
        raise KeyError(name)


@dataclass(frozen=True)
class SubjectRecord:
    subject_id: str
    values: dict[str, Any] = field(default_factory=dict)
    seed: int = 0
    split: str = "train"


def default_attributes() -> tuple[AttributeDef, ...]:
    """The 19 attributes: demographics, diagnosis, three IQ scores, twelve phenotypes."""
    cont = lambda n, lo, hi: AttributeDef(n, "continuous", min=lo, max=hi)  # noqa: E731
    attrs = [
        AttributeDef("gender", "categorical", labels=("male", "female")),
        AttributeDef("age", "continuous", min=0.0, max=100.0, bins=AGE_BINS, weights=(1200, 1994, 3686, 761, 112)),
        AttributeDef("handedness", "categorical", labels=("right", "left", "mixed")),
        AttributeDef("diagnosis", "categorical", labels=("hc", "asd", "adhd", "mdd", "sz", "other")),
        cont("fiq", 40.0, 160.0),
        cont("viq", 40.0, 160.0),
        cont("piq", 40.0, 160.0),
    ]
    for name in (
        "vsplot", "readeng", "percstress", "angaggr", "strength", "endurance",
        "picvocab", "listsort", "anghostil", "loneliness", "meanpurp", "dexterity",
    ):
        attrs.append(cont(name, 0.0, 100.0))
    return tuple(attrs)


# --- covariance and sampling -------------------------------------------------


def base_covariance(spec: CohortSpec) -> np.ndarray:
    part = spec.partition
    D = part.roi_count
    cov = np.eye(D)
    for k in range(1, part.subnet_count + 1):
        idx = np.array(part.members(k))
        cov[np.ix_(idx, idx)] += spec.within_subnet
        cov[idx, idx] -= spec.within_subnet
    if spec.base_noise > 0:
        rng = np.random.default_rng(np.random.SeedSequence([spec.seed, 0xBA5E]))
        g = rng.standard_normal((D, D)) / np.sqrt(D)
        cov += spec.base_noise * (g @ g.T)
    return cov


def latent_covariance(spec: CohortSpec, record: SubjectRecord, base: np.ndarray | None = None) -> np.ndarray:
    cov = base_covariance(spec) if base is None else base.copy()
    part = spec.partition
    for a in spec.attributes:
        if a.effect is None or a.effect.delta == 0.0:
            continue
        value = record.values.get(a.name)
        if value is None:
            continue
        shift = a.effect.delta * a.standardize(value)
        ia = np.array(part.members(a.effect.pair[0]))
        ib = np.array(part.members(a.effect.pair[1]))
        block = np.zeros_like(cov)
        block[np.ix_(ia, ib)] = 1.0
        block = np.maximum(block, block.T)
        np.fill_diagonal(block, 0.0)
        cov += shift * block
    return _clip_pd(cov, record.subject_id)


def _clip_pd(cov: np.ndarray, subject_id: str, floor: float = 1e-3) -> np.ndarray:
    w, v = np.linalg.eigh(cov)
    if w.min() < floor:
        cov = (v * np.maximum(w, floor)) @ v.T
        cov = (cov + cov.T) / 2.0
    try:
        np.linalg.cholesky(cov)
    except np.linalg.LinAlgError as exc:
        raise GenerationError(
            f"covariance for {subject_id} not positive definite after clipping "
            f"(min eigenvalue {np.linalg.eigvalsh(cov).min():.3g})"
        ) from exc
    return cov


def generate_subject(spec: CohortSpec, attrs: SubjectRecord, seed, base: np.ndarray | None = None) -> BoldSeries:
    for a in spec.attributes:
        v = attrs.values.get(a.name)
        if v is None:
            continue
        if a.is_categorical and v not in a.labels:
            raise ConfigError(f"{attrs.subject_id}: {a.name}={v!r} not in {a.labels}")
        if not a.is_categorical and not a.min <= v <= a.max:
            raise ConfigError(f"{attrs.subject_id}: {a.name}={v} outside [{a.min}, {a.max}]")
    cov = latent_covariance(spec, attrs, base)
    chol = np.linalg.cholesky(cov)
    rng = np.random.default_rng(seed)
    z = rng.standard_normal((spec.T, spec.partition.roi_count))
    return BoldSeries(attrs.subject_id, z @ chol.T)


def subject_seed(spec: CohortSpec, index: int) -> int:
    return int(np.random.SeedSequence([spec.seed, index]).generate_state(1)[0])


def draw_records(spec: CohortSpec) -> list[SubjectRecord]:
    """Attribute values i.i.d. from the configured marginals plus subject-level splits."""
    rng = np.random.default_rng(np.random.SeedSequence([spec.seed, 0xA77]))
    n_test = int(round(spec.test_fraction * spec.n_subjects))
    test_idx = set(rng.permutation(spec.n_subjects)[:n_test].tolist())
    records = []
    for i in range(spec.n_subjects):
        values = {a.name: a.sample(rng) for a in spec.attributes}
        records.append(
            SubjectRecord(
                subject_id=f"sub-{i:04d}",
                values={k: v for k, v in values.items() if v is not None},
                seed=subject_seed(spec, i),
                split="test" if i in test_idx else "train",
            )
        )
    return records


def simulate(spec: CohortSpec) -> list[tuple[SubjectRecord, BoldSeries]]:
    """In-memory cohort: records paired with their series."""
    base = base_covariance(spec)
    return [(r, generate_subject(spec, r, r.seed, base)) for r in draw_records(spec)]


def generate_cohort(spec: CohortSpec, out_dir: str | Path) -> Path:
    """Write one BOLD CSV per subject and a line-delimited manifest; returns the manifest path."""
    out_dir = Path(out_dir)
    bold_dir = out_dir / "bold"
    bold_dir.mkdir(parents=True, exist_ok=True)
    base = base_covariance(spec)
    lines = []
    for rec in draw_records(spec):
        series = generate_subject(spec, rec, rec.seed, base)
        rel = Path("bold") / f"{rec.subject_id}.csv"
        try:
            write_bold_csv(series, out_dir / rel, list(spec.partition.roi_names))
        except OSError as exc:
            raise OSError(f"failed writing {out_dir / rel}: {exc}") from exc
        lines.append(
            json.dumps(
                {"subject_id": rec.subject_id, "attributes": rec.values, "path": str(rel),
                 "split": rec.split, "seed": rec.seed},
                sort_keys=True,
            )
        )
    manifest = out_dir / "cohort.jsonl"
    _atomic_write(manifest, "\n".join(lines) + "\n")
    log.info("wrote %d subjects to %s", len(lines), manifest)
    return manifest


def read_manifest(path: str | Path) -> list[dict]:
    with open(path) as fh:
        return [json.loads(line) for line in fh if line.strip()]


def _atomic_write(path: Path, text: str) -> None:
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_text(text)
    os.replace(tmp, path)


# --- config ------------------------------------------------------------------


def _attribute_from_dict(d: dict) -> AttributeDef:
    eff = d.get("effect")
    effect = None
    if eff:
        effect = Effect(pair=tuple(eff["pair"]), delta=float(eff["delta"]), label=eff.get("label"))
    return AttributeDef(
        name=d["name"],
        kind=d["kind"],
        labels=tuple(d.get("labels", ())),
        min=float(d.get("min", 0.0)),
        max=float(d.get("max", 1.0)),
        effect=effect,
        weights=tuple(d["weights"]) if "weights" in d else None,
        bins=tuple(d["bins"]) if "bins" in d else None,
        coverage=float(d.get("coverage", 1.0)),
    )


def cohort_spec_from_dict(d: dict, partition: AtlasPartition | None = None, base_dir: Path | None = None) -> CohortSpec:
    if partition is None:
        if d.get("partition_file"):
            p = Path(d["partition_file"])
            partition = load_partition(p if p.is_absolute() or base_dir is None else base_dir / p)
        else:
            partition = default_partition(int(d.get("roi_count", 116)), int(d.get("subnet_count", 7)))
    attrs = tuple(_attribute_from_dict(a) for a in d["attributes"]) if "attributes" in d else default_attributes()
    return CohortSpec(
        n_subjects=int(d.get("n_subjects", 100)),
        T=int(d.get("T", 180)),
        partition=partition,
        attributes=attrs,
        base_noise=float(d.get("base_noise", 0.05)),
        within_subnet=float(d.get("within_subnet", 0.45)),
        test_fraction=float(d.get("test_fraction", 0.2)),
        seed=int(d.get("seed", 0)),
    )


def load_cohort_spec(path: str | Path) -> CohortSpec:
    path = Path(path)
    with open(path, "rb") as fh:
        data = tomllib.load(fh)
    return cohort_spec_from_dict(data.get("cohort", data), base_dir=path.parent)
