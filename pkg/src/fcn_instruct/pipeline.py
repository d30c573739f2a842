"""In-memory end-to-end pipeline shared by the CLI and the acceptance suite."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field, replace

import numpy as np

from .atlas import AtlasPartition
from .cohort import AttributeDef, CohortSpec, SubjectRecord, simulate
from .encoder import init_encoder
from .evalkit import MetricReport, evaluate_run
from .fcn import BoldSeries, FcnMatrix, pearson_fcn, sliding_windows
from .synth import PromptTemplateSet, Subject, synth_dataset, truth_text, vocabulary
from .toylm import Tokenizer, init_lm
from .training import FcnStore, TrainConfig, pretrain_lm, train_stage1, train_stage2

log = logging.getLogger(__name__)


def fcn_rows(record: SubjectRecord, series: BoldSeries, L: int, P: int):
    """FCN manifest rows plus matrices for one subject: the original and every window."""
    rows, mats = [], {}
    ref = f"fcn/{record.subject_id}.fcn"
    mats[ref] = pearson_fcn(series)
    base = {"subject_id": record.subject_id, "attributes": record.values, "split": record.split}
    rows.append({**base, "fcn_id": ref, "kind": "original", "window_start": None})
    if series.n_timepoints >= L:
        for k, w in enumerate(sliding_windows(series, L, P)):
            wref = f"fcn/{record.subject_id}_w{k:03d}.fcn"
            mats[wref] = pearson_fcn(w)
            rows.append({**base, "fcn_id": wref, "kind": "window", "window_start": w.window_origin[1]})
    return rows, mats


@dataclass
class ModelDims:
    d_model: int = 64
    n_layers: int = 2
    n_heads: int = 4
    gcn_hidden: int = 256
    proj_hidden: int = 256
    max_len: int = 320


@dataclass
class ExperimentConfig:
    cohort: CohortSpec
    attributes: tuple[str, ...] | None = None  # restrict synthesis to these attributes
    window: int = 100
    step: int = 20
    tau: float = 0.5
    dims: ModelDims = field(default_factory=ModelDims)
    stage1_counts: dict = field(default_factory=lambda: {"predictive": 2000, "judgment": 2000, "comparative": 1700})
    stage2_counts: dict = field(default_factory=lambda: {"predictive": 500, "judgment": 500, "comparative": 1000})
    test_counts: dict = field(default_factory=lambda: {"predictive": 200, "judgment": 200, "comparative": 200})
    pretrain: TrainConfig = field(default_factory=lambda: TrainConfig(stage="pretrain", learning_rate=1e-3, epochs=3))
    profile_rate: float = 0.8  # share of pretraining pairs whose spans show a textual attribute profile
    stage1: TrainConfig = field(default_factory=lambda: TrainConfig(stage="one", learning_rate=1e-3))
    stage2: TrainConfig = field(default_factory=lambda: TrainConfig(stage="two", learning_rate=1e-5))
    seed: int = 0


@dataclass
class Experiment:
    config: ExperimentConfig
    partition: AtlasPartition
    attributes: list[AttributeDef]
    subjects: list[Subject]
    store: FcnStore
    templates: PromptTemplateSet
    tok: Tokenizer
    enc: dict | None = None
    lm: dict | None = None
    pairs: dict = field(default_factory=dict)
    losses: dict = field(default_factory=dict)

    @property
    def n_fcn_tokens(self) -> int:
        return self.partition.roi_count + self.partition.subnet_count + 1


def prepare(config: ExperimentConfig) -> Experiment:
    """Simulate the cohort, build FCNs and windows, and synthesize every instruction file."""
    spec = config.cohort
    store = FcnStore(tau=config.tau)
    rows = []
    for rec, series in simulate(spec):
        r, mats = fcn_rows(rec, series, config.window, config.step)
        rows.extend(r)
        for ref, m in mats.items():
            store.add(ref, m)
    from .synth import subjects_from_fcn_manifest

    subjects = subjects_from_fcn_manifest(rows)
    names = config.attributes or tuple(a.name for a in spec.attributes)
    attrs = [spec.attribute(n) for n in names]
    templates = PromptTemplateSet.default(attrs)
    tok = Tokenizer(vocabulary(attrs, templates))
    exp = Experiment(config, spec.partition, attrs, subjects, store, templates, tok)
    s = config.seed
    exp.pairs["stage1"] = synth_dataset(subjects, attrs, "one", config.stage1_counts, s, templates, "train")
    exp.pairs["stage2"] = synth_dataset(subjects, attrs, "two", config.stage2_counts, s + 1, templates, "train")
    exp.pairs["test"] = synth_dataset(subjects, attrs, "two", config.test_counts, s + 2, templates, "test")
    return exp


def init_models(exp: Experiment) -> None:
    d = exp.config.dims
    D = exp.partition.roi_count
    exp.enc = init_encoder(D, d.d_model, d.gcn_hidden, d.proj_hidden, seed=exp.config.seed)
    exp.lm = init_lm(len(exp.tok), d.d_model, d.n_layers, d.n_heads, max_len=d.max_len, seed=exp.config.seed)


def subject_profiles(subjects: list[Subject], attributes: list[AttributeDef]) -> dict:
    """Subject id -> (attribute word, value word) pairs for every observed attribute, sorted by name."""
    out = {}
    for s in subjects:
        out[s.subject_id] = [(a.name, truth_text(a, s.values[a.name]))
                             for a in sorted(attributes, key=lambda a: a.name) if s.values.get(a.name) is not None]
    return out


def run_pretrain(exp: Experiment) -> None:
    text_pairs = exp.pairs["stage1"] + exp.pairs["stage2"]
    profiles = subject_profiles([s for s in exp.subjects if s.split == "train"], exp.attributes)
    exp.losses["pretrain"] = pretrain_lm(text_pairs, exp.lm, exp.tok, exp.n_fcn_tokens, exp.config.pretrain,
                                         profiles=profiles, profile_rate=exp.config.profile_rate)


def run_stage1(exp: Experiment) -> None:
    exp.losses["stage1"] = train_stage1(exp.pairs["stage1"], exp.enc, exp.lm, exp.partition, exp.store, exp.tok,
                                        exp.config.stage1)


def run_stage2(exp: Experiment) -> None:
    exp.losses["stage2"] = train_stage2(exp.pairs["stage2"], exp.enc, exp.lm, exp.partition, exp.store, exp.tok,
                                        exp.config.stage2)


def evaluate(exp: Experiment, pairs=None, k: int = 1, seed: int = 0) -> list[MetricReport]:
    pairs = exp.pairs["test"] if pairs is None else pairs
    return evaluate_run((exp.enc, exp.lm, exp.tok), pairs, exp.partition, exp.store, exp.attributes, k=k, seed=seed)


def report_metric(reports: list[MetricReport], task: str, key: str = "acc") -> float:
    for r in reports:
        if r.task == task:
            return r.metrics[key]
    raise KeyError(task)
