"""Instruction-pair synthesis over subject attributes.

Three paradigms are produced:

* predictive  - answer the attribute directly (label or 0..100 integer)
* judgment    - confirm or reject a candidate label / interval (yes / no)
* comparative - compare two subjects (yes / no for categorical, first / second for continuous)

Stage One draws FCN references from sliding-window FCNs, Stage Two from the
original FCNs only. Splits are inherited from subjects, so windows of a test
subject never reach a training file.
"""

from __future__ import annotations

import json
import math
import os
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .cohort import AGE_BIN_NAMES, AGE_BINS, AttributeDef, ConfigError
from .toylm import FCN

PARADIGMS = ("predictive", "judgment", "comparative")
COMPARE_MARGIN = 10


class ShortfallError(RuntimeError):
    def __init__(self, report: dict):
        self.report = report
        parts = ", ".join(f"{k}: {v['emitted']}/{v['requested']}" for k, v in report.items())
        super().__init__(f"requested counts unattainable ({parts})")


@dataclass(frozen=True)
class InstructionPair:
    id: str
    paradigm: str
    attribute: str
    fcn_refs: tuple[str, ...]
    prompt: str
    answer: str
    stage: str
    split: str
    subjects: tuple[str, ...] = ()

    def __post_init__(self):
        want = 2 if self.paradigm == "comparative" else 1
        if len(self.fcn_refs) != want:
            raise ValueError(f"{self.paradigm} pair needs {want} FCN refs, got {len(self.fcn_refs)}")
        if not self.answer:
            raise ValueError("empty answer")

    def to_json(self) -> str:
        d = asdict(self)
        d["fcn_refs"] = list(self.fcn_refs)
        d["subjects"] = list(self.subjects)
        return json.dumps(d, sort_keys=True)

    @classmethod
    def from_json(cls, line: str) -> "InstructionPair":
        d = json.loads(line)
        d["fcn_refs"] = tuple(d["fcn_refs"])
        d["subjects"] = tuple(d.get("subjects", ()))
        return cls(**d)


def normalize_value(x: float, lo: float, hi: float) -> int:
    """Min-max rescale to an integer in [0, 100], halves rounded up."""
    if not lo < hi:
        raise ConfigError(f"normalization range needs min < max, got [{lo}, {hi}]")
    x = min(max(float(x), lo), hi)
    return int(math.floor(100.0 * (x - lo) / (hi - lo) + 0.5))


# --- buckets ------------------------------------------------------------------


@dataclass(frozen=True)
class Bucket:
    lo: float
    hi: float
    name: str
    closed_right: bool = False

    def contains(self, v: float) -> bool:
        return self.lo <= v < self.hi or (self.closed_right and v == self.hi)

    def text(self) -> str:
        return f"between {_num(self.lo)} and {_num(self.hi)}"


def _num(v: float) -> str:
    return str(int(v)) if float(v).is_integer() else repr(v)


@dataclass(frozen=True)
class BucketScheme:
    """Disjoint intervals per attribute; ``raw`` schemes act on raw values, others on 0..100 scores."""

    buckets: tuple[Bucket, ...]
    raw: bool = False

    def locate(self, v: float) -> int:
        for i, b in enumerate(self.buckets):
            if b.contains(v):
                return i
        raise ValueError(f"value {v} outside every bucket")


def bucket_scheme(attr: AttributeDef) -> BucketScheme:
    if attr.name == "age":
        edges = AGE_BINS
        bs = [Bucket(edges[i], edges[i + 1], AGE_BIN_NAMES[i], i == len(edges) - 2) for i in range(len(edges) - 1)]
        return BucketScheme(tuple(bs), raw=True)
    bs = [Bucket(10.0 * i, 10.0 * (i + 1), f"segment_{i}", i == 9) for i in range(10)]
    return BucketScheme(tuple(bs), raw=False)


# --- templates ----------------------------------------------------------------

DEFAULT_TEMPLATES = {
    ("categorical", "predictive"): [
        "{FCN} what is the {attr} of this subject ?",
        "based on the brain network {FCN} predict the {attr} of the subject .",
        "{FCN} given this functional connectivity network what {attr} does the subject have ?",
        "here is a brain network {FCN} . tell me the {attr} of this subject .",
    ],
    ("continuous", "predictive"): [
        "{FCN} what is the {attr} score of this subject from 0 to 100 ?",
        "based on the brain network {FCN} estimate the {attr} score of the subject on a 0 to 100 scale .",
        "{FCN} given this functional connectivity network predict the {attr} score from 0 to 100 .",
        "here is a brain network {FCN} . rate the {attr} of this subject from 0 to 100 .",
    ],
    ("categorical", "judgment"): [
        "{FCN} is the {attr} of this subject {candidate} ?",
        "based on the brain network {FCN} is the {attr} of the subject {candidate} ? answer yes or no .",
        "{FCN} does this functional connectivity network come from a subject whose {attr} is {candidate} ?",
        "here is a brain network {FCN} . is the {attr} {candidate} ? answer yes or no .",
    ],
    ("continuous", "judgment"): [
        "{FCN} is the {attr} of this subject {interval} ?",
        "based on the brain network {FCN} is the {attr} of the subject {interval} ? answer yes or no .",
        "{FCN} does this functional connectivity network come from a subject whose {attr} is {interval} ?",
        "here is a brain network {FCN} . is the {attr} {interval} ? answer yes or no .",
    ],
    ("categorical", "comparative"): [
        "first network {FCN_A} second network {FCN_B} do these two subjects have the same {attr} ?",
        "{FCN_A} {FCN_B} do the two subjects share the same {attr} ? answer yes or no .",
        "compare the brain networks {FCN_A} and {FCN_B} . is their {attr} the same ?",
    ],
    ("continuous", "comparative"): [
        "first network {FCN_A} second network {FCN_B} which subject has the higher {attr} ?",
        "{FCN_A} {FCN_B} which of the two subjects has a higher {attr} ? answer first or second .",
        "compare the brain networks {FCN_A} and {FCN_B} . which {attr} is higher ?",
    ],
}

SLOTS = {
    "predictive": {"FCN"},
    "judgment": {"FCN"},
    "comparative": {"FCN_A", "FCN_B"},
}


def _slots(template: str) -> set[str]:
    import string

    return {f for _, f, _, _ in string.Formatter().parse(template) if f}


def check_template(template: str, paradigm: str, kind: str) -> None:
    fields = _slots(template) - {"attr"}
    need = set(SLOTS[paradigm])
    if paradigm == "judgment":
        need.add("candidate" if kind == "categorical" else "interval")
    if fields != need:
        raise ConfigError(f"template {template!r} has slots {sorted(fields)}, {paradigm}/{kind} needs {sorted(need)}")


@dataclass
class PromptTemplateSet:
    """Templates keyed by (attribute, paradigm)."""

    templates: dict[tuple[str, str], list[str]] = field(default_factory=dict)

    def get(self, attribute: str, paradigm: str) -> list[str]:
        return self.templates[(attribute, paradigm)]

    def words(self) -> set[str]:
        out = set()
        for ts in self.templates.values():
            for t in ts:
                for slot in ("FCN", "FCN_A", "FCN_B", "candidate", "interval"):
                    t = t.replace("{" + slot + "}", " ")
                out.update(t.split())
        return out

    @classmethod
    def default(cls, attributes) -> "PromptTemplateSet":
        out = {}
        for a in attributes:
            for p in PARADIGMS:
                ts = [t.replace("{attr}", a.name) for t in DEFAULT_TEMPLATES[(a.kind, p)]]
                for t in ts:
                    check_template(t, p, a.kind)
                out[(a.name, p)] = ts
        return cls(out)

    def write_dir(self, root: str | Path) -> None:
        root = Path(root)
        for (attr, paradigm), ts in sorted(self.templates.items()):
            d = root / attr
            d.mkdir(parents=True, exist_ok=True)
            (d / f"{paradigm}.txt").write_text("\n".join(ts) + "\n")

    @classmethod
    def load_dir(cls, root: str | Path, attributes) -> "PromptTemplateSet":
        root = Path(root)
        out = {}
        for a in attributes:
            for p in PARADIGMS:
                f = root / a.name / f"{p}.txt"
                ts = [line.strip() for line in f.read_text().splitlines() if line.strip()]
                if not ts:
                    raise ConfigError(f"{f}: no templates")
                for t in ts:
                    check_template(t, p, a.kind)
                out[(a.name, p)] = ts
        return cls(out)


def render(template: str, **slots) -> str:
    fill = {"FCN": FCN, "FCN_A": FCN, "FCN_B": FCN}
    fill.update(slots)
    return " ".join(template.format(**{k: fill.get(k, "") for k in _slots(template)}).split())


# --- subjects and paradigms ---------------------------------------------------


@dataclass(frozen=True)
class Subject:
    """A subject as seen by the synthesizer: attribute values plus usable FCN refs."""

    subject_id: str
    values: dict
    split: str
    original: str | None
    windows: tuple[str, ...] = ()

    def refs(self, stage: str) -> tuple[str, ...]:
        if stage == "one":
            return self.windows
        return (self.original,) if self.original else ()


def canonical_label(value) -> str:
    return str(value).lower().replace(" ", "_")


def truth_text(attr: AttributeDef, value) -> str:
    if attr.is_categorical:
        return canonical_label(value)
    return str(normalize_value(value, attr.min, attr.max))


def _bucket_value(attr: AttributeDef, scheme: BucketScheme, value) -> float:
    return float(value) if scheme.raw else float(normalize_value(value, attr.min, attr.max))


def make_predictive(subject: Subject, attr: AttributeDef, templates: PromptTemplateSet, rng, stage="two",
                    pair_id="") -> InstructionPair | None:
    value = subject.values.get(attr.name)
    refs = subject.refs(stage)
    if value is None or not refs:
        return None
    ts = templates.get(attr.name, "predictive")
    t = ts[int(rng.integers(len(ts)))]
    ref = refs[int(rng.integers(len(refs)))]
    return InstructionPair(pair_id, "predictive", attr.name, (ref,), render(t), truth_text(attr, value),
                           stage, subject.split, (subject.subject_id,))


def make_judgment(subject: Subject, attr: AttributeDef, buckets: BucketScheme | None, templates: PromptTemplateSet,
                  rng, want_positive: bool, stage="two", pair_id="") -> InstructionPair | None:
    value = subject.values.get(attr.name)
    refs = subject.refs(stage)
    if value is None or not refs:
        return None
    ts = templates.get(attr.name, "judgment")
    t = ts[int(rng.integers(len(ts)))]
    if attr.is_categorical:
        truth = value
        if want_positive:
            cand = truth
        else:
            others = [lab for lab in attr.labels if lab != truth]
            if not others:
                return None
            cand = others[int(rng.integers(len(others)))]
        prompt = render(t, candidate=canonical_label(cand))
    else:
        scheme = buckets or bucket_scheme(attr)
        k = scheme.locate(_bucket_value(attr, scheme, value))
        if want_positive:
            j = k
        else:
            others = [i for i in range(len(scheme.buckets)) if i != k]
            if not others:
                return None
            j = others[int(rng.integers(len(others)))]
        prompt = render(t, interval=scheme.buckets[j].text())
    ref = refs[int(rng.integers(len(refs)))]
    return InstructionPair(pair_id, "judgment", attr.name, (ref,), prompt, "yes" if want_positive else "no",
                           stage, subject.split, (subject.subject_id,))


def make_comparative(subj_a: Subject, subj_b: Subject, attr: AttributeDef, templates: PromptTemplateSet, rng,
                     stage="two", pair_id="", margin: int = COMPARE_MARGIN) -> InstructionPair | None:
    va, vb = subj_a.values.get(attr.name), subj_b.values.get(attr.name)
    ra, rb = subj_a.refs(stage), subj_b.refs(stage)
    if va is None or vb is None or not ra or not rb or subj_a.subject_id == subj_b.subject_id:
        return None
    if attr.is_categorical:
        answer = "yes" if va == vb else "no"
    else:
        na, nb = normalize_value(va, attr.min, attr.max), normalize_value(vb, attr.min, attr.max)
        if abs(na - nb) < margin:
            return None
        answer = "first" if na > nb else "second"
    ts = templates.get(attr.name, "comparative")
    t = ts[int(rng.integers(len(ts)))]
    refs = (ra[int(rng.integers(len(ra)))], rb[int(rng.integers(len(rb)))])
    return InstructionPair(pair_id, "comparative", attr.name, refs, render(t), answer, stage, subj_a.split,
                           (subj_a.subject_id, subj_b.subject_id))


# --- dataset assembly ---------------------------------------------------------


def subjects_from_fcn_manifest(records: list[dict]) -> list[Subject]:
    """Group FCN manifest rows (one per original or window FCN) by subject."""
    by_sub: dict[str, dict] = {}
    for r in records:
        s = by_sub.setdefault(r["subject_id"], {"values": r["attributes"], "split": r["split"],
                                                 "original": None, "windows": []})
        if r["kind"] == "original":
            s["original"] = r["fcn_id"]
        else:
            s["windows"].append(r["fcn_id"])
    return [Subject(sid, d["values"], d["split"], d["original"], tuple(sorted(d["windows"])))
            for sid, d in sorted(by_sub.items())]


def _task_rng(seed: int, paradigm: str, index: int, attempt: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence([seed, PARADIGMS.index(paradigm), index, attempt]))


def synth_dataset(subjects: list[Subject], attributes, stage: str, counts: dict[str, int], seed: int,
                  templates: PromptTemplateSet | None = None, split: str = "train",
                  max_attempts: int = 200) -> list[InstructionPair]:
    """Emit exactly ``counts[paradigm]`` pairs per paradigm or raise ShortfallError.

    Attributes are visited round-robin. Judgment and comparative answers
    alternate per attribute, with the starting answer staggered across
    attributes, so every attribute and each answer family is balanced to
    within one pair and the answer cannot be read off the attribute.
    """
    stage = stage.lower()
    if stage not in ("one", "two"):
        raise ConfigError(f"stage must be 'one' or 'two', got {stage!r}")
    attributes = list(attributes)
    templates = templates or PromptTemplateSet.default(attributes)
    pool = [s for s in subjects if s.split == split and s.refs(stage)]
    schemes = {a.name: bucket_scheme(a) for a in attributes if not a.is_categorical}
    out: list[InstructionPair] = []
    shortfall = {}
    for paradigm in PARADIGMS:
        want = int(counts.get(paradigm, 0))
        emitted = 0
        # answers emitted per attribute; attribute k starts on the opposite phase when k is odd
        done = {a.name: k % 2 for k, a in enumerate(attributes)}
        for i in range(want):
            pair = None
            for attempt in range(max_attempts):
                rng = _task_rng(seed, paradigm, i, attempt)
                attr = attributes[(i + attempt) % len(attributes)]
                pid = f"{stage}-{split}-{paradigm[:4]}-{i:07d}"
                if not pool:
                    break
                subj = pool[int(rng.integers(len(pool)))]
                if paradigm == "predictive":
                    pair = make_predictive(subj, attr, templates, rng, stage, pid)
                elif paradigm == "judgment":
                    want_pos = done[attr.name] % 2 == 0
                    pair = make_judgment(subj, attr, schemes.get(attr.name), templates, rng, want_pos, stage, pid)
                else:
                    pair = _comparative_with_target(subj, pool, attr, templates, rng, stage, pid, done[attr.name])
                if pair is not None:
                    break
            if pair is None:
                continue
            done[pair.attribute] += 1
            out.append(pair)
            emitted += 1
        if emitted < want:
            shortfall[paradigm] = {"requested": want, "emitted": emitted}
    if shortfall:
        raise ShortfallError(shortfall)
    return out


def _comparative_with_target(subj, pool, attr, templates, rng, stage, pid, flip):
    """Find a partner so the answer matches the alternating target."""
    value = subj.values.get(attr.name)
    if value is None:
        return None
    if attr.is_categorical:
        target = "yes" if flip % 2 == 0 else "no"
    else:
        target = "first" if flip % 2 == 0 else "second"
    order = rng.permutation(len(pool))
    for j in order[:64]:
        cand = pool[int(j)]
        pair = make_comparative(subj, cand, attr, templates, rng, stage, pid)
        if pair is not None and pair.answer == target:
            return pair
    return None


def write_pairs(pairs: list[InstructionPair], path: str | Path) -> None:
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_text("".join(p.to_json() + "\n" for p in pairs))
    os.replace(tmp, path)


def read_pairs(path: str | Path) -> list[InstructionPair]:
    with open(path) as fh:
        return [InstructionPair.from_json(line) for line in fh if line.strip()]


def vocabulary(attributes, templates: PromptTemplateSet) -> set[str]:
    """Every word a prompt or answer can contain."""
    words = set(templates.words()) | {"yes", "no", "first", "second"}
    for a in attributes:
        words.add(a.name)
        if a.is_categorical:
            words.update(canonical_label(lab) for lab in a.labels)
        else:
            for b in bucket_scheme(a).buckets:
                words.update(b.text().split())
    words.update({"options", ":", "or", ",", "choose", "from"})
    return words
