"""Command-line driver: config-driven subcommands over a shared output directory.

Layout under ``--out``::

    cohort/cohort.jsonl, cohort/bold/*.csv
    fcn/*.fcn, fcn_manifest.jsonl
    synth/{stage1,stage2,test}.jsonl
    ckpt/{pretrain,stage1,stage2}/
    eval/metrics.jsonl, eval/answers.jsonl
    biomarker/*.csv
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import shutil
import sys
from dataclasses import dataclass, field, fields, replace
from pathlib import Path

import numpy as np

from .atlas import AtlasPartition
from .cohort import CohortSpec, ConfigError, cohort_spec_from_dict, generate_cohort, read_manifest
from .fcn import pearson_fcn, read_bold_csv, sliding_windows, write_fcn_binary
from .synth import PARADIGMS, PromptTemplateSet, ShortfallError, read_pairs, subjects_from_fcn_manifest, \
    synth_dataset, vocabulary, write_pairs
from .training import TrainConfig

try:
    import tomllib
except ModuleNotFoundError:  # Python < 3.11
    import tomli as tomllib

log = logging.getLogger("fcn_instruct")

EXIT_OK, EXIT_ERROR, EXIT_CONFIG, EXIT_UNPARSEABLE = 0, 1, 2, 3


# --- configuration ---------------------------------------------------------------


@dataclass
class RunConfig:
    cohort: CohortSpec
    window: int = 100
    step: int = 20
    tau: float = 0.5
    attributes: tuple[str, ...] | None = None
    stage1_counts: dict = field(default_factory=lambda: {"predictive": 2000, "judgment": 2000, "comparative": 1000})
    stage2_counts: dict = field(default_factory=lambda: {"predictive": 500, "judgment": 500, "comparative": 500})
    test_counts: dict = field(default_factory=lambda: {"predictive": 200, "judgment": 200, "comparative": 200})
    templates_dir: Path | None = None
    d_model: int = 64
    n_layers: int = 2
    n_heads: int = 4
    gcn_hidden: int = 256
    proj_hidden: int = 256
    max_len: int = 320
    pretrain: TrainConfig = field(default_factory=lambda: TrainConfig(stage="pretrain", learning_rate=1e-3, epochs=3))
    profile_rate: float = 0.8
    stage1: TrainConfig = field(default_factory=lambda: TrainConfig(stage="one", learning_rate=1e-3))
    stage2: TrainConfig = field(default_factory=lambda: TrainConfig(stage="two", learning_rate=1e-5))
    eval_k: int = 1
    eval_temperature: float = 0.7
    max_unparseable: float = 0.5
    biomarker_filter: dict | None = None  # {"attribute": name, "value": label}
    seed: int = 0
    out: Path = Path("run")

    @property
    def partition(self) -> AtlasPartition:
        return self.cohort.partition

    @property
    def n_fcn_tokens(self) -> int:
        return self.partition.roi_count + self.partition.subnet_count + 1

    def attribute_defs(self):
        names = self.attributes or tuple(a.name for a in self.cohort.attributes)
        return [self.cohort.attribute(n) for n in names]


_TRAIN_FIELDS = {f.name for f in fields(TrainConfig)} - {"stage"}


def _train_config(d: dict, base: TrainConfig, where: str, errors: list[str]) -> TrainConfig:
    unknown = set(d) - _TRAIN_FIELDS
    for k in sorted(unknown):
        errors.append(f"{where}.{k}: unknown field")
    try:
        return replace(base, **{k: v for k, v in d.items() if k in _TRAIN_FIELDS})
    except (TypeError, ValueError) as exc:
        errors.append(f"{where}: {exc}")
        return base


def _counts(d, where, default, errors):
    if d is None:
        return default
    out = {}
    for k, v in d.items():
        if k not in PARADIGMS:
            errors.append(f"{where}.{k}: unknown paradigm (expected one of {', '.join(PARADIGMS)})")
        elif not isinstance(v, int) or v < 0:
            errors.append(f"{where}.{k}: must be a non-negative integer")
        else:
            out[k] = v
    return out


def run_config_from_dict(data: dict, base_dir: Path = Path(".")) -> RunConfig:
    """Validate a parsed config; every problem is reported as ``section.field: message``."""
    errors: list[str] = []
    known = {"cohort", "fcn", "synth", "model", "pretrain", "stage1", "stage2", "eval", "biomarker", "paths", "seed"}
    for k in sorted(set(data) - known):
        errors.append(f"{k}: unknown section")
    try:
        cohort = cohort_spec_from_dict(data.get("cohort", {}), base_dir=base_dir)
    except FileNotFoundError as exc:
        raise ConfigError(f"cohort.partition_file: {exc}") from exc
    except (KeyError, TypeError, ValueError) as exc:
        raise ConfigError(f"cohort: {exc}") from exc
    cfg = RunConfig(cohort)
    fc = data.get("fcn", {})
    for key in ("window", "step"):
        if key in fc:
            if not isinstance(fc[key], int) or fc[key] < 1:
                errors.append(f"fcn.{key}: must be a positive integer")
            else:
                setattr(cfg, key, fc[key])
    if "tau" in fc:
        if not isinstance(fc["tau"], (int, float)) or not 0 <= fc["tau"] <= 1:
            errors.append("fcn.tau: must lie in [0, 1]")
        else:
            cfg.tau = float(fc["tau"])
    sy = data.get("synth", {})
    if "attributes" in sy:
        names = {a.name for a in cohort.attributes}
        for n in sy["attributes"]:
            if n not in names:
                errors.append(f"synth.attributes: {n!r} is not a cohort attribute")
        cfg.attributes = tuple(sy["attributes"])
    cfg.stage1_counts = _counts(sy.get("stage1"), "synth.stage1", cfg.stage1_counts, errors)
    cfg.stage2_counts = _counts(sy.get("stage2"), "synth.stage2", cfg.stage2_counts, errors)
    cfg.test_counts = _counts(sy.get("test"), "synth.test", cfg.test_counts, errors)
    if "templates_dir" in sy:
        p = Path(sy["templates_dir"])
        p = p if p.is_absolute() else base_dir / p
        if not p.is_dir():
            errors.append(f"synth.templates_dir: {p} does not exist")
        cfg.templates_dir = p
    md = data.get("model", {})
    for key in ("d_model", "n_layers", "n_heads", "gcn_hidden", "proj_hidden", "max_len"):
        if key in md:
            if not isinstance(md[key], int) or md[key] < 1:
                errors.append(f"model.{key}: must be a positive integer")
            else:
                setattr(cfg, key, md[key])
    if cfg.d_model % cfg.n_heads:
        errors.append("model.n_heads: must divide model.d_model")
    pre = dict(data.get("pretrain", {}))
    if "profile_rate" in pre:
        rate = pre.pop("profile_rate")
        if not isinstance(rate, (int, float)) or not 0 <= rate <= 1:
            errors.append("pretrain.profile_rate: must lie in [0, 1]")
        else:
            cfg.profile_rate = float(rate)
    cfg.pretrain = _train_config(pre, cfg.pretrain, "pretrain", errors)
    cfg.stage1 = _train_config(data.get("stage1", {}), cfg.stage1, "stage1", errors)
    cfg.stage2 = _train_config(data.get("stage2", {}), cfg.stage2, "stage2", errors)
    ev = data.get("eval", {})
    cfg.eval_k = int(ev.get("k", cfg.eval_k))
    if cfg.eval_k < 1:
        errors.append("eval.k: must be >= 1")
    cfg.eval_temperature = float(ev.get("temperature", cfg.eval_temperature))
    cfg.max_unparseable = float(ev.get("max_unparseable", cfg.max_unparseable))
    bm = data.get("biomarker", {})
    if "filter" in bm:
        flt = bm["filter"]
        if not isinstance(flt, dict) or "attribute" not in flt or "value" not in flt:
            errors.append("biomarker.filter: needs 'attribute' and 'value'")
        else:
            cfg.biomarker_filter = dict(flt)
    if "seed" in data:
        cfg.seed = int(data["seed"])
    paths = data.get("paths", {})
    if "out" in paths:
        p = Path(paths["out"])
        cfg.out = p if p.is_absolute() else base_dir / p
    if errors:
        raise ConfigError("\n".join(errors))
    return cfg


def load_run_config(path: str | Path | None) -> RunConfig:
    if path is None:
        return run_config_from_dict({})
    path = Path(path)
    if not path.exists():
        raise ConfigError(f"--config: {path} does not exist")
    try:
        with open(path, "rb") as fh:
            data = tomllib.load(fh)
    except tomllib.TOMLDecodeError as exc:
        raise ConfigError(f"{path}: {exc}") from exc
    return run_config_from_dict(data, path.parent)


def apply_seed(cfg: RunConfig, seed: int) -> RunConfig:
    """Route one seed into the cohort, synthesis and every training stage."""
    return replace(
        cfg,
        seed=seed,
        cohort=replace(cfg.cohort, seed=seed),
        pretrain=replace(cfg.pretrain, seed=seed),
        stage1=replace(cfg.stage1, seed=seed),
        stage2=replace(cfg.stage2, seed=seed),
    )


# --- atomic promotion ------------------------------------------------------------------


def _tmp_dir(final: Path) -> Path:
    tmp = final.with_name(final.name + ".tmp")
    if tmp.exists():
        shutil.rmtree(tmp)
    tmp.mkdir(parents=True)
    return tmp


def _promote(tmp: Path, final: Path) -> None:
    if final.exists():
        old = final.with_name(final.name + ".old")
        if old.exists():
            shutil.rmtree(old)
        os.replace(final, old)
        os.replace(tmp, final)
        shutil.rmtree(old)
    else:
        os.replace(tmp, final)


def _write_text(path: Path, text: str) -> None:
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_text(text)
    os.replace(tmp, path)


# --- subcommands -------------------------------------------------------------------------


def cmd_cohort(cfg: RunConfig, args) -> int:
    final = cfg.out / "cohort"
    tmp = _tmp_dir(final)
    generate_cohort(cfg.cohort, tmp)
    _promote(tmp, final)
    print(f"cohort: {cfg.cohort.n_subjects} subjects -> {final}")
    return EXIT_OK


def cmd_fcn(cfg: RunConfig, args) -> int:
    cohort_dir = cfg.out / "cohort"
    manifest = cohort_dir / "cohort.jsonl"
    if not manifest.exists():
        raise FileNotFoundError(f"{manifest} missing; run `cohort` first")
    final = cfg.out / "fcn"
    tmp = _tmp_dir(final)
    lines = []
    for rec in read_manifest(manifest):
        series = read_bold_csv(cohort_dir / rec["path"], rec["subject_id"])
        base = {"subject_id": rec["subject_id"], "attributes": rec["attributes"], "split": rec["split"]}
        write_fcn_binary(pearson_fcn(series), tmp / f"{rec['subject_id']}.fcn")
        lines.append({**base, "fcn_id": f"fcn/{rec['subject_id']}.fcn", "kind": "original", "window_start": None})
        if series.n_timepoints >= cfg.window:
            for k, w in enumerate(sliding_windows(series, cfg.window, cfg.step)):
                name = f"{rec['subject_id']}_w{k:03d}.fcn"
                write_fcn_binary(pearson_fcn(w), tmp / name)
                lines.append({**base, "fcn_id": f"fcn/{name}", "kind": "window", "window_start": w.window_origin[1]})
    _promote(tmp, final)
    _write_text(cfg.out / "fcn_manifest.jsonl", "".join(json.dumps(r, sort_keys=True) + "\n" for r in lines))
    print(f"fcn: {len(lines)} matrices -> {final}")
    return EXIT_OK


def _subjects(cfg: RunConfig):
    manifest = cfg.out / "fcn_manifest.jsonl"
    if not manifest.exists():
        raise FileNotFoundError(f"{manifest} missing; run `fcn` first")
    return subjects_from_fcn_manifest(read_manifest(manifest))


def _templates(cfg: RunConfig, attrs) -> PromptTemplateSet:
    if cfg.templates_dir is not None:
        return PromptTemplateSet.load_dir(cfg.templates_dir, attrs)
    return PromptTemplateSet.default(attrs)


def cmd_synth(cfg: RunConfig, args) -> int:
    subjects = _subjects(cfg)
    attrs = cfg.attribute_defs()
    templates = _templates(cfg, attrs)
    final = cfg.out / "synth"
    tmp = _tmp_dir(final)
    jobs = [("stage1", "one", cfg.stage1_counts, "train"), ("stage2", "two", cfg.stage2_counts, "train"),
            ("test", "two", cfg.test_counts, "test")]
    for j, (name, stage, counts, split) in enumerate(jobs):
        try:
            pairs = synth_dataset(subjects, attrs, stage, counts, cfg.seed + j, templates, split)
        except ShortfallError as exc:
            shutil.rmtree(tmp)
            print(f"synth: {name} shortfall {exc.report}", file=sys.stderr)
            return EXIT_ERROR
        write_pairs(pairs, tmp / f"{name}.jsonl")
        print(f"synth: {len(pairs)} {name} pairs")
    _promote(tmp, final)
    return EXIT_OK


def _tokenizer(cfg: RunConfig):
    from .toylm import Tokenizer

    attrs = cfg.attribute_defs()
    return Tokenizer(vocabulary(attrs, _templates(cfg, attrs)))


def _pairs(cfg: RunConfig, name: str):
    path = cfg.out / "synth" / f"{name}.jsonl"
    if not path.exists():
        raise FileNotFoundError(f"{path} missing; run `synth` first")
    return read_pairs(path)


def _save_ckpt(cfg: RunConfig, name: str, enc, lm, tok, meta: dict) -> Path:
    from .training import save_checkpoint

    final = cfg.out / "ckpt" / name
    final.parent.mkdir(parents=True, exist_ok=True)
    tmp = _tmp_dir(final)
    save_checkpoint(tmp, enc, lm, tok, meta)
    _promote(tmp, final)
    return final


def _load_ckpt(cfg: RunConfig, name: str):
    from .training import load_checkpoint

    path = cfg.out / "ckpt" / name
    if not (path / "lm.nts").exists():
        raise FileNotFoundError(f"checkpoint {path} missing")
    return load_checkpoint(path)


def cmd_pretrain(cfg: RunConfig, args) -> int:
    from .pipeline import subject_profiles
    from .toylm import init_lm
    from .training import pretrain_lm

    tok = _tokenizer(cfg)
    pairs = _pairs(cfg, "stage1") + _pairs(cfg, "stage2")
    lm = init_lm(len(tok), cfg.d_model, cfg.n_layers, cfg.n_heads, max_len=cfg.max_len, seed=cfg.seed)
    subjects = [s for s in _subjects(cfg) if s.split == "train"]
    profiles = subject_profiles(subjects, cfg.attribute_defs())
    log_path = cfg.out / "ckpt" / "pretrain.log.jsonl"
    log_path.parent.mkdir(parents=True, exist_ok=True)
    log_path.unlink(missing_ok=True)
    losses = pretrain_lm(pairs, lm, tok, cfg.n_fcn_tokens, cfg.pretrain, profiles, cfg.profile_rate, log_path)
    path = _save_ckpt(cfg, "pretrain", None, lm, tok, {"stage": "pretrain", "config": cfg.pretrain.digest(),
                                                       "steps": len(losses), "final_loss": repr(losses[-1])})
    print(f"pretrain-lm: {len(losses)} steps, final loss {losses[-1]:.4f} -> {path}")
    return EXIT_OK


def _store(cfg: RunConfig):
    from .training import FcnStore

    return FcnStore(cfg.out, cfg.tau)


def cmd_train(cfg: RunConfig, args) -> int:
    from .encoder import init_encoder
    from .training import train_stage1, train_stage2

    stage = args.stage
    log_path = cfg.out / "ckpt" / f"stage{stage}.log.jsonl"
    if stage == "1":
        _, lm, tok, _ = _load_ckpt(cfg, "pretrain")
        enc = init_encoder(cfg.partition.roi_count, cfg.d_model, cfg.gcn_hidden, cfg.proj_hidden, seed=cfg.seed)
        pairs = _pairs(cfg, "stage1")
        log_path.parent.mkdir(parents=True, exist_ok=True)
        log_path.unlink(missing_ok=True)
        losses = train_stage1(pairs, enc, lm, cfg.partition, _store(cfg), tok, cfg.stage1, log_path)
        conf = cfg.stage1
    else:
        enc, lm, tok, _ = _load_ckpt(cfg, "stage1")
        pairs = _pairs(cfg, "stage2")
        log_path.unlink(missing_ok=True)
        losses = train_stage2(pairs, enc, lm, cfg.partition, _store(cfg), tok, cfg.stage2, log_path)
        conf = cfg.stage2
    path = _save_ckpt(cfg, f"stage{stage}", enc, lm, tok, {"stage": conf.stage, "config": conf.digest(),
                                                          "steps": len(losses), "final_loss": repr(losses[-1])})
    print(f"train stage {stage}: {len(losses)} steps, final loss {losses[-1]:.4f} -> {path}")
    return EXIT_OK


def cmd_eval(cfg: RunConfig, args) -> int:
    from .evalkit import format_reports, generate_answers, score_answers

    enc, lm, tok, _ = _load_ckpt(cfg, args.checkpoint)
    if enc is None:
        raise FileNotFoundError(f"checkpoint {args.checkpoint} has no encoder")
    pairs = _pairs(cfg, "test")
    answers = generate_answers(pairs, enc, lm, tok, cfg.partition, _store(cfg), cfg.eval_k, cfg.eval_temperature,
                               cfg.seed)
    reports = score_answers(pairs, answers, cfg.attribute_defs())
    out = cfg.out / "eval"
    out.mkdir(parents=True, exist_ok=True)
    _write_text(out / "answers.jsonl",
                "".join(json.dumps({"id": p.id, "answers": a, "truth": p.answer}) + "\n" for p, a in zip(pairs, answers)))
    _write_text(out / "metrics.jsonl", "".join(r.to_json() + "\n" for r in reports))
    print(format_reports(reports))
    bad = [r.task for r in reports if r.unparseable_rate > cfg.max_unparseable]
    if bad:
        print(f"eval: more than {cfg.max_unparseable:.0%} unparseable outputs in {', '.join(bad)}", file=sys.stderr)
        return EXIT_UNPARSEABLE
    return EXIT_OK


def cmd_biomarker(cfg: RunConfig, args) -> int:
    from .biomarker import analyze, emit_plot_data, group_labels
    from .synth import canonical_label

    enc, lm, tok, _ = _load_ckpt(cfg, args.checkpoint)
    pairs = [p for p in _pairs(cfg, "test") if p.paradigm == "predictive"]
    keep = None
    flt = cfg.biomarker_filter
    if flt:
        want = canonical_label(flt["value"])
        keep = [s.subject_id for s in _subjects(cfg)
                if s.values.get(flt["attribute"]) is not None and canonical_label(s.values[flt["attribute"]]) == want]
    rep = analyze(pairs, enc, lm, tok, cfg.partition, _store(cfg), keep)
    part = cfg.partition
    tok_labels = list(part.roi_names) + [f"subnet_{k}" for k in range(1, part.subnet_count + 1)] + ["global"]
    final = cfg.out / "biomarker"
    tmp = _tmp_dir(final)
    emit_plot_data(rep.saliency[None, :], ["saliency"], tmp / "saliency.csv", col_labels=tok_labels)
    emit_plot_data(rep.token_map, tok_labels, tmp / "token_map.csv")
    emit_plot_data(rep.subnet_map, group_labels(part), tmp / "subnet_map.csv")
    _promote(tmp, final)
    print(f"biomarker: {rep.n_examples} prompts aggregated -> {final}")
    return EXIT_OK


def cmd_gradcheck(cfg: RunConfig, args) -> int:
    from .gradcheck import run_suite

    checks = run_suite(seed=cfg.seed)
    worst = max(c.rel_error for c in checks)
    for c in checks:
        print(f"{c.name:28s} rel_error={c.rel_error:.3e} probes={c.n_probed}")
    print(f"gradcheck: max relative error {worst:.3e} over {len(checks)} tensors")
    return EXIT_OK if worst < 1e-5 else EXIT_ERROR


COMMANDS = {
    "cohort": cmd_cohort,
    "fcn": cmd_fcn,
    "synth": cmd_synth,
    "pretrain-lm": cmd_pretrain,
    "train": cmd_train,
    "eval": cmd_eval,
    "biomarker": cmd_biomarker,
    "gradcheck": cmd_gradcheck,
}


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="TOML run configuration")
    common.add_argument("--seed", type=int, help="override every seed in the config")
    common.add_argument("--threads", type=int, help="cap BLAS threads (env FCN_INSTRUCT_THREADS)")
    common.add_argument("--deterministic", action="store_true", help="single-threaded, fixed-order numerics")
    common.add_argument("--out", help="output directory (env FCN_INSTRUCT_OUT)")
    common.add_argument("-v", "--verbose", action="store_true")
    parser = argparse.ArgumentParser(prog="fcn-instruct", description="FCN instruction-tuning toolkit")
    sub = parser.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        p = sub.add_parser(name, parents=[common])
        if name == "train":
            p.add_argument("--stage", choices=("1", "2"), required=True)
        if name in ("eval", "biomarker"):
            p.add_argument("--checkpoint", default="stage2", help="checkpoint name under ckpt/")
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        cfg = load_run_config(args.config)
        if args.seed is not None:
            cfg = apply_seed(cfg, args.seed)
        out = args.out or os.environ.get("FCN_INSTRUCT_OUT")
        if out:
            cfg.out = Path(out)
        if args.deterministic:
            cfg = replace(cfg, pretrain=replace(cfg.pretrain, deterministic=True),
                          stage1=replace(cfg.stage1, deterministic=True), stage2=replace(cfg.stage2, deterministic=True))
    except ConfigError as exc:
        for line in str(exc).splitlines():
            print(f"config error: {line}", file=sys.stderr)
        return EXIT_CONFIG
    threads = args.threads or os.environ.get("FCN_INSTRUCT_THREADS")
    threads = 1 if args.deterministic else (int(threads) if threads else None)
    cfg.out.mkdir(parents=True, exist_ok=True)
    from threadpoolctl import threadpool_limits

    with threadpool_limits(limits=threads):
        try:
            return COMMANDS[args.command](cfg, args)
        except (FileNotFoundError, OSError, ValueError, RuntimeError) as exc:
            print(f"{args.command}: {exc}", file=sys.stderr)
            return EXIT_ERROR


if __name__ == "__main__":
    sys.exit(main())
