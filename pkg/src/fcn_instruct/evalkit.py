"""Answer parsing, self-consistency aggregation and evaluation metrics."""

from __future__ import annotations

import json
import re
from collections import Counter
from dataclasses import asdict, dataclass, field

import numpy as np

from .fcn import InvalidInputError


@dataclass(frozen=True)
class Prediction:
    kind: str  # "label" | "value" | "unparseable"
    label: str | None = None
    value: int | None = None

    def __post_init__(self):
        if self.kind == "value" and not (self.value is not None and 0 <= self.value <= 100):
            raise ValueError(f"value prediction out of range: {self.value}")

    @property
    def parsed(self) -> bool:
        return self.kind != "unparseable"


UNPARSEABLE = Prediction("unparseable")
_INT = re.compile(r"(?<![\w.])(\d+)(?![\w.]|\.\d)")


def Label(text: str) -> Prediction:  # noqa: N802
    return Prediction("label", label=text)


def Value(v: int) -> Prediction:  # noqa: N802
    return Prediction("value", value=int(v))


def parse_response(text: str, kind: str, labels=()) -> Prediction:
    """Keyword extraction for categorical answers, first standalone 0..100 integer for continuous."""
    if not isinstance(text, str):
        return UNPARSEABLE
    if kind == "categorical":
        lowered = text.lower()
        best = None
        for lab in labels:
            m = re.search(r"(?<![\w-])" + re.escape(lab.lower()) + r"(?![\w-])", lowered)
            if m and (best is None or m.start() < best[0]):
                best = (m.start(), lab)
        return Label(best[1]) if best else UNPARSEABLE
    for m in _INT.finditer(text):
        v = int(m.group(1))
        if 0 <= v <= 100:
            return Value(v)
    return UNPARSEABLE


def self_consistency(predictions: list[Prediction]) -> Prediction:
    """Majority vote over labels (earliest sample breaks ties), lower median over values."""
    if not predictions:
        raise InvalidInputError("need at least one prediction")
    parsed = [p for p in predictions if p.parsed]
    if not parsed:
        return UNPARSEABLE
    labels = [p for p in parsed if p.kind == "label"]
    if labels:
        counts = Counter(p.label for p in labels)
        top = max(counts.values())
        for p in labels:
            if counts[p.label] == top:
                return p
    values = sorted(p.value for p in parsed if p.kind == "value")
    return Value(values[(len(values) - 1) // 2])


# --- metrics -------------------------------------------------------------------

UNPARSEABLE_CLASS = "<unparseable>"


def _as_label(p) -> str:
    if isinstance(p, Prediction):
        return p.label if p.kind == "label" else UNPARSEABLE_CLASS
    return UNPARSEABLE_CLASS if p is None else str(p)


def confusion_matrix(preds, truths, labels):
    classes = list(labels)
    pred_labels = [_as_label(p) for p in preds]
    for lab in pred_labels + list(truths):
        if lab not in classes:
            classes.append(lab)
    idx = {c: i for i, c in enumerate(classes)}
    C = np.zeros((len(classes), len(classes)))
    for p, t in zip(pred_labels, truths):
        C[idx[t], idx[p]] += 1
    return C, classes


def mcc_from_confusion(C: np.ndarray) -> float:
    """Multiclass Matthews correlation in its covariance form (rows = truth)."""
    t = C.sum(axis=1)
    p = C.sum(axis=0)
    c = np.trace(C)
    s = C.sum()
    num = c * s - t @ p
    den = np.sqrt(s * s - p @ p) * np.sqrt(s * s - t @ t)
    return float(num / den) if den > 0 else 0.0


def classification_metrics(preds, truths, labels) -> dict:
    """Accuracy, MCC and macro-F1; unparseable predictions form their own always-wrong class.

    Macro-F1 averages over the classes present in ``truths``.
    """
    if len(preds) != len(truths):
        raise InvalidInputError(f"{len(preds)} predictions for {len(truths)} truths")
    if not truths:
        raise InvalidInputError("no items to score")
    C, classes = confusion_matrix(preds, truths, labels)
    acc = float(np.trace(C) / C.sum())
    f1s = []
    for i, c in enumerate(classes):
        if C[i].sum() == 0:
            continue
        tp = C[i, i]
        fp = C[:, i].sum() - tp
        fn = C[i].sum() - tp
        f1s.append(0.0 if tp == 0 else 2 * tp / (2 * tp + fp + fn))
    return {"acc": acc, "mcc": mcc_from_confusion(C), "macro_f1": float(np.mean(f1s))}


def regression_metrics(values, truths) -> dict:
    """MAE and Pearson r on the [0, 1] scale.

    ``values`` entries may be None for unparseable outputs; those score an
    absolute error of 1.0 and are left out of the correlation.
    """
    if len(values) != len(truths):
        raise InvalidInputError(f"{len(values)} predictions for {len(truths)} truths")
    if len(truths) < 2:
        raise InvalidInputError("need at least 2 items")
    errs = [1.0 if v is None else abs(float(v) - float(t)) for v, t in zip(values, truths)]
    pairs = np.array([(float(v), float(t)) for v, t in zip(values, truths) if v is not None])
    pcc = 0.0
    if len(pairs) >= 2:
        a, b = pairs[:, 0] - pairs[:, 0].mean(), pairs[:, 1] - pairs[:, 1].mean()
        den = np.sqrt((a * a).sum() * (b * b).sum())
        pcc = float((a * b).sum() / den) if den > 0 else 0.0
    return {"mae": float(np.mean(errs)), "pcc": pcc}


@dataclass
class MetricReport:
    task: str
    n: int
    n_unparseable: int
    metrics: dict = field(default_factory=dict)

    @property
    def unparseable_rate(self) -> float:
        return self.n_unparseable / self.n if self.n else 0.0

    def to_json(self) -> str:
        return json.dumps(asdict(self), sort_keys=True)


def format_reports(reports: list[MetricReport]) -> str:
    lines = [f"{'task':40s} {'n':>6s} {'unparsed':>8s}  metrics"]
    for r in reports:
        ms = "  ".join(f"{k}={v:.4f}" for k, v in sorted(r.metrics.items()))
        lines.append(f"{r.task:40s} {r.n:6d} {r.n_unparseable:8d}  {ms}")
    return "\n".join(lines)


def macro_mean(reports: list[MetricReport], keys) -> dict:
    """Average each metric across reports (e.g. over the attributes of a task family)."""
    return {k: float(np.mean([r.metrics[k] for r in reports if k in r.metrics])) for k in keys}


# --- model evaluation -----------------------------------------------------------


def _truth_and_labels(pair, attr):
    if pair.paradigm == "judgment":
        return "categorical", ("yes", "no")
    if pair.paradigm == "comparative":
        return "categorical", (("yes", "no") if attr.is_categorical else ("first", "second"))
    if attr.is_categorical:
        from .synth import canonical_label

        return "categorical", tuple(canonical_label(lab) for lab in attr.labels)
    return "continuous", ()


def restrict_prompt(prompt: str, options) -> str:
    """Append a candidate-label restriction to a prompt; the truth is never touched."""
    return f"{prompt} choose from {' , '.join(options)}"


def encode_refs(refs, enc, partition, store, batch_size=64) -> dict:
    from .encoder import encoder_forward

    pool = partition.pooling_matrix()
    out = {}
    refs = list(dict.fromkeys(refs))
    for s in range(0, len(refs), batch_size):
        chunk = refs[s : s + batch_size]
        mats = [store.get(r) for r in chunk]
        toks, _ = encoder_forward(np.stack([m[0] for m in mats]), np.stack([m[1] for m in mats]), pool, enc)
        out.update(zip(chunk, toks))
    return out


def generate_answers(pairs, enc, lm, tok, partition, store, k=1, temperature=0.7, seed=0,
                     prompt_overrides=None, batch_size=32, max_len=4) -> list[list[str]]:
    """k decoded answers per pair: greedy for k == 1, seeded sampling otherwise."""
    from .toylm import assemble_input, decode_batch

    overrides = prompt_overrides or {}
    tokens = encode_refs([r for p in pairs for r in p.fcn_refs], enc, partition, store)
    asms = []
    for p in pairs:
        prompt = p.prompt
        opts = overrides.get(p.attribute)
        if opts and p.paradigm == "predictive":
            prompt = restrict_prompt(prompt, opts)
        asms.append(assemble_input(tok.tokenize(prompt), [tokens[r] for r in p.fcn_refs], [], lm, tok))
    answers = [[] for _ in pairs]
    for j in range(k):
        mode = "greedy" if k == 1 else "sample"
        for s in range(0, len(asms), batch_size):
            chunk = asms[s : s + batch_size]
            seeds = [int(np.random.SeedSequence([seed, s + i, j]).generate_state(1)[0]) for i in range(len(chunk))]
            outs = decode_batch(chunk, lm, tok, mode, temperature, seeds, max_len)
            for i, o in enumerate(outs):
                answers[s + i].append(o)
    return answers


def score_answers(pairs, answers, attributes) -> list[MetricReport]:
    by_name = {a.name: a for a in attributes}
    groups: dict[str, list] = {}
    for pair, outs in zip(pairs, answers):
        attr = by_name[pair.attribute]
        kind, labels = _truth_and_labels(pair, attr)
        preds = [parse_response(o, kind, labels) for o in outs]
        final = self_consistency(preds)
        truth = parse_response(pair.answer, kind, labels)
        groups.setdefault(f"{pair.paradigm}/{pair.attribute}", []).append((kind, labels, final, truth))
    reports = []
    for task in sorted(groups):
        items = groups[task]
        kind, labels = items[0][0], items[0][1]
        n_bad = sum(1 for it in items if not it[2].parsed)
        if kind == "categorical":
            m = classification_metrics([it[2] for it in items], [it[3].label for it in items], labels)
        elif len(items) >= 2:
            m = regression_metrics([None if not it[2].parsed else it[2].value / 100.0 for it in items],
                                   [it[3].value / 100.0 for it in items])
        else:
            m = {}
        reports.append(MetricReport(task, len(items), n_bad, m))
    return reports


def evaluate_run(model, pairs, partition, store, attributes, k=1, temperature=0.7, seed=0,
                 prompt_overrides=None) -> list[MetricReport]:
    """Per-task reports for a trained model on a test file.

    ``model`` is a checkpoint directory or an ``(encoder, lm, tokenizer)`` triple.
    """
    if isinstance(model, (str, bytes)) or hasattr(model, "__fspath__"):
        from .training import load_checkpoint

        enc, lm, tok, _ = load_checkpoint(model)
    else:
        enc, lm, tok = model
    answers = generate_answers(pairs, enc, lm, tok, partition, store, k, temperature, seed, prompt_overrides)
    return score_answers(pairs, answers, attributes)
