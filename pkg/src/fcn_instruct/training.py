"""Manual backpropagation through encoder + toy LM, Adam with warmup/cosine,
text-only LM pretraining and the two alignment stages.
"""

from __future__ import annotations

import hashlib
import json
import logging
import math
import os
from dataclasses import asdict, dataclass, replace
from pathlib import Path

import numpy as np

from .atlas import AtlasPartition
from .encoder import ENCODER_KEYS, encoder_backward, encoder_forward
from .fcn import FcnMatrix, InvalidInputError, normalize_adjacency, read_fcn_binary, threshold_adjacency
from .synth import InstructionPair
from .tensors import Tensors, load_tensors, save_tensors
from .toylm import Tokenizer, backward_hidden, embed_batch, forward_hidden, layout, lm_trainable_keys, log_softmax

log = logging.getLogger(__name__)


class TrainingError(RuntimeError):
    pass


class DatasetError(RuntimeError):
    pass


@dataclass(frozen=True)
class TrainConfig:
    stage: str = "one"  # "pretrain" | "one" | "two"
    learning_rate: float = 1e-3
    batch_size: int = 32
    epochs: int = 1
    warmup_ratio: float = 0.03
    weight_decay: float = 0.0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    seed: int = 0
    deterministic: bool = True

    def __post_init__(self):
        if self.learning_rate <= 0:
            raise ValueError("learning_rate must be > 0")
        if not 0.0 <= self.warmup_ratio < 1.0:
            raise ValueError("warmup_ratio must lie in [0, 1)")
        if self.batch_size < 1 or self.epochs < 1:
            raise ValueError("batch_size and epochs must be >= 1")

    def digest(self) -> str:
        return hashlib.sha256(json.dumps(asdict(self), sort_keys=True).encode()).hexdigest()[:16]


STAGE_ONE = TrainConfig(stage="one", learning_rate=1e-3)
STAGE_TWO = TrainConfig(stage="two", learning_rate=1e-5)


def frozen_groups(stage: str) -> set[str]:
    """Which parameter groups stay fixed in a stage."""
    return {"one": {"lm"}, "two": set(), "pretrain": {"encoder"}}[stage]


# --- data plumbing ------------------------------------------------------------


class FcnStore:
    """FCN matrices and their normalized adjacencies keyed by reference string.

    In-memory entries can be added directly; unknown refs are read as FCN1
    binaries relative to ``root``.
    """

    def __init__(self, root: str | Path | None = None, tau: float = 0.5):
        self.root = Path(root) if root is not None else None
        self.tau = tau
        self._cache: dict[str, tuple[np.ndarray, np.ndarray]] = {}

    def add(self, ref: str, fcn: FcnMatrix) -> None:
        a = normalize_adjacency(threshold_adjacency(fcn, self.tau)).values
        self._cache[ref] = (fcn.values, a)

    def __contains__(self, ref: str) -> bool:
        return ref in self._cache

    def get(self, ref: str) -> tuple[np.ndarray, np.ndarray]:
        if ref not in self._cache:
            if self.root is None:
                raise DatasetError(f"FCN {ref!r} not loaded and no store root configured")
            path = self.root / ref
            if not path.exists():
                raise DatasetError(f"FCN file missing: {path}")
            self.add(ref, read_fcn_binary(path))
        return self._cache[ref]

    def matrix(self, ref: str) -> FcnMatrix:
        return FcnMatrix(self.get(ref)[0])


@dataclass(frozen=True)
class Example:
    ids: np.ndarray
    fcn_spans: tuple[tuple[int, int], ...]
    answer_span: tuple[int, int]
    fcn_refs: tuple[str, ...]
    # text-only mode: per span, (name_id, value_id) pairs cycled over the slots, or None for the null vector
    profiles: tuple | None = None


def pair_to_example(pair: InstructionPair, tok: Tokenizer, n_fcn_tokens: int, with_answer: bool = True,
                    profiles=None) -> Example:
    prompt = tok.tokenize(pair.prompt)
    answer = tok.tokenize(pair.answer) + [tok.eos] if with_answer else []
    asm = layout(prompt, n_fcn_tokens, answer, tok, expected_fcns=len(pair.fcn_refs))
    return Example(asm.ids, tuple(asm.fcn_spans), asm.answer_span, tuple(pair.fcn_refs), profiles)


@dataclass
class Batch:
    ids: np.ndarray  # (B, S)
    span: np.ndarray  # (B, S) bool, FCN slots
    fcn_slot: np.ndarray  # (B, S) row of the flattened encoder output, or -1
    prof_name: np.ndarray  # (B, S) profile name token, or -1
    prof_value: np.ndarray  # (B, S) profile value token, or -1
    targets: np.ndarray  # (B, S)
    mask: np.ndarray  # (B, S) bool, positions whose next token is an answer token
    F: np.ndarray | None  # (U, D, D) unique FCNs in the batch
    A: np.ndarray | None
    refs: list[str]


def make_batch(examples: list[Example], store: FcnStore | None, n_fcn_tokens: int, pad_id: int) -> Batch:
    """Right-pad to the batch maximum. Without a store the FCN slots stay text-only."""
    B = len(examples)
    if B == 0:
        raise InvalidInputError("empty batch")
    S = max(len(e.ids) for e in examples)
    ids = np.full((B, S), pad_id, dtype=np.int64)
    span = np.zeros((B, S), dtype=bool)
    slot = np.full((B, S), -1, dtype=np.int64)
    prof_name = np.full((B, S), -1, dtype=np.int64)
    prof_value = np.full((B, S), -1, dtype=np.int64)
    targets = np.full((B, S), pad_id, dtype=np.int64)
    mask = np.zeros((B, S), dtype=bool)
    refs: list[str] = []
    ref_index: dict[str, int] = {}
    for b, e in enumerate(examples):
        n = len(e.ids)
        ids[b, :n] = e.ids
        targets[b, : n - 1] = e.ids[1:]
        a0, a1 = e.answer_span
        if a1 > a0:
            mask[b, max(a0 - 1, 0) : a1 - 1] = True
        for j, ((s0, s1), ref) in enumerate(zip(e.fcn_spans, e.fcn_refs)):
            span[b, s0:s1] = True
            if store is not None:
                if ref not in ref_index:
                    ref_index[ref] = len(refs)
                    refs.append(ref)
                slot[b, s0:s1] = ref_index[ref] * n_fcn_tokens + np.arange(s1 - s0)
            elif e.profiles is not None and e.profiles[j]:
                words = np.array(e.profiles[j], dtype=np.int64)
                cyc = words[np.arange(s1 - s0) % len(words)]
                prof_name[b, s0:s1] = cyc[:, 0]
                prof_value[b, s0:s1] = cyc[:, 1]
    F = A = None
    if store is not None and refs:
        pairs = [store.get(r) for r in refs]
        F = np.stack([p[0] for p in pairs])
        A = np.stack([p[1] for p in pairs])
    return Batch(ids, span, slot, prof_name, prof_value, targets, mask, F, A, refs)


def length_buckets(examples: list[Example], batch_size: int, rng: np.random.Generator) -> list[list[int]]:
    """Shuffled batches of similar-length examples, in shuffled order."""
    order = rng.permutation(len(examples))
    by_len: dict[int, list[int]] = {}
    for i in order:
        by_len.setdefault(len(examples[i].ids), []).append(int(i))
    flat = [i for n in sorted(by_len) for i in by_len[n]]
    batches = [flat[s : s + batch_size] for s in range(0, len(flat), batch_size)]
    return [batches[j] for j in rng.permutation(len(batches))]


# --- loss and gradients -------------------------------------------------------


def loss_and_grads(batch: Batch, enc: Tensors | None, lm: Tensors, pool: np.ndarray | None,
                   frozen: set[str] = frozenset(), need_grads: bool = True):
    """Mean masked next-token cross-entropy over the batch and gradients of every non-frozen tensor.

    With ``enc`` None the FCN slots are filled with the LM's null embedding
    (text-only mode).
    """
    if not batch.mask.any():
        raise InvalidInputError("batch has no answer positions")
    use_fcn = enc is not None and batch.F is not None
    if use_fcn:
        tokens, ecache = encoder_forward(batch.F, batch.A, pool, enc)
        flat = tokens.reshape(-1, tokens.shape[-1])
    else:
        flat = None
    x = embed_batch(batch.ids, batch.span, lm, batch.fcn_slot, flat, batch.prof_name, batch.prof_value)
    hf, _, cache = forward_hidden(x, lm, keep_cache=need_grads)
    hsel = hf[batch.mask]
    logits = hsel @ lm["head"]
    lp = log_softmax(logits)
    t = batch.targets[batch.mask]
    M = len(t)
    loss = float(-lp[np.arange(M), t].mean())
    if not np.isfinite(loss):
        raise TrainingError(f"non-finite loss {loss} on batch with refs {batch.refs[:4]}... and {M} answer tokens")
    if not need_grads:
        return loss, {}
    grads: Tensors = {}
    dlogits = np.exp(lp)
    dlogits[np.arange(M), t] -= 1.0
    dlogits /= M
    lm_grads: Tensors = {"head": hsel.T @ dlogits}
    dhf = np.zeros_like(hf)
    dhf[batch.mask] = dlogits @ lm["head"].T
    dx = backward_hidden(dhf, lm, cache, lm_grads)
    if "lm" not in frozen:
        S = x.shape[1]
        g_pos = np.zeros_like(lm["pos_emb"])
        g_pos[:S] = dx.sum(axis=0)
        lm_grads["pos_emb"] = g_pos
        g_tok = np.zeros_like(lm["tok_emb"])
        words = ~batch.span
        np.add.at(g_tok, batch.ids[words], dx[words])
        if use_fcn:
            null = np.zeros_like(batch.span)
        else:
            prof = batch.span & (batch.prof_name >= 0)
            np.add.at(g_tok, batch.prof_name[prof], dx[prof])
            np.add.at(g_tok, batch.prof_value[prof], dx[prof])
            null = batch.span & ~prof
        lm_grads["tok_emb"] = g_tok
        lm_grads["fcn_null"] = dx[null].sum(axis=0)
        grads.update({f"lm.{k}": v for k, v in lm_grads.items()})
    if use_fcn and "encoder" not in frozen:
        on = batch.fcn_slot >= 0
        dflat = np.zeros_like(flat)
        np.add.at(dflat, batch.fcn_slot[on], dx[on])
        egrads = encoder_backward(dflat.reshape(tokens.shape), ecache, enc)
        grads.update({f"encoder.{k}": v for k, v in egrads.items()})
    return loss, grads


def backward(examples: list[Example], enc: Tensors | None, lm: Tensors, pool: np.ndarray | None,
             store: FcnStore | None, n_fcn_tokens: int, pad_id: int, stage: str = "two") -> Tensors:
    """Gradients of the batch-mean masked loss for every tensor the stage trains."""
    batch = make_batch(examples, store if enc is not None else None, n_fcn_tokens, pad_id)
    _, grads = loss_and_grads(batch, enc, lm, pool, frozen_groups(stage))
    return grads


# --- optimizer ----------------------------------------------------------------


def lr_factor(step: int, total_steps: int, warmup_ratio: float) -> float:
    """Linear warmup over ceil(warmup_ratio * total) steps, then cosine decay reaching 0 at ``total_steps``."""
    warm = math.ceil(warmup_ratio * total_steps)
    if step < warm:
        return step / warm
    span = max(total_steps - warm, 1)
    progress = min(max((step - warm) / span, 0.0), 1.0)
    return 0.5 * (1.0 + math.cos(math.pi * progress))


@dataclass
class OptimizerState:
    m: Tensors
    v: Tensors
    step: int = 0

    @classmethod
    def zeros_like(cls, params: Tensors) -> "OptimizerState":
        return cls({k: np.zeros_like(p) for k, p in params.items()}, {k: np.zeros_like(p) for k, p in params.items()})


def adam_step(params: Tensors, grads: Tensors, state: OptimizerState, config: TrainConfig, step_index: int,
              total_steps: int) -> float:
    """In-place bias-corrected Adam update; returns the learning rate used."""
    lr = config.learning_rate * lr_factor(step_index, total_steps, config.warmup_ratio)
    t = step_index + 1
    c1 = 1.0 - config.beta1**t
    c2 = 1.0 - config.beta2**t
    for k, g in grads.items():
        m = state.m[k]
        v = state.v[k]
        m *= config.beta1
        m += (1.0 - config.beta1) * g
        v *= config.beta2
        v += (1.0 - config.beta2) * g * g
        if lr == 0.0:
            continue
        update = (m / c1) / (np.sqrt(v / c2) + config.eps)
        if config.weight_decay:
            update = update + config.weight_decay * params[k]
        params[k] -= lr * update
    state.step = t
    return lr


# --- stage regimens -----------------------------------------------------------


def flat_params(enc: Tensors | None, lm: Tensors) -> Tensors:
    out = {f"lm.{k}": lm[k] for k in lm_trainable_keys(lm)}
    if enc is not None:
        out.update({f"encoder.{k}": enc[k] for k in ENCODER_KEYS})
    return out


def run_training(examples: list[Example], enc: Tensors | None, lm: Tensors, partition: AtlasPartition | None,
                 store: FcnStore | None, config: TrainConfig, pad_id: int, n_fcn_tokens: int,
                 log_path: str | Path | None = None) -> list[float]:
    """Shared loop: shuffles per epoch, updates non-frozen tensors in place, returns per-step losses."""
    if not examples:
        raise DatasetError("no training examples")
    frozen = frozen_groups(config.stage)
    pool = partition.pooling_matrix() if partition is not None else None
    params = {k: v for k, v in flat_params(enc, lm).items() if k.split(".", 1)[0] not in frozen}
    state = OptimizerState.zeros_like(params)
    rng = np.random.default_rng(np.random.SeedSequence([config.seed, 0x7A1]))
    total = len(length_buckets(examples, config.batch_size, np.random.default_rng(0))) * config.epochs
    losses = []
    log_fh = open(log_path, "a") if log_path else None
    try:
        step = 0
        for epoch in range(config.epochs):
            for idx in length_buckets(examples, config.batch_size, rng):
                chunk = [examples[i] for i in idx]
                batch = make_batch(chunk, store if enc is not None else None, n_fcn_tokens, pad_id)
                loss, grads = loss_and_grads(batch, enc, lm, pool, frozen)
                lr = adam_step(params, grads, state, config, step, total)
                losses.append(loss)
                if log_fh:
                    log_fh.write(json.dumps({"stage": config.stage, "epoch": epoch, "step": step, "lr": lr,
                                             "loss": loss}) + "\n")
                if step % 50 == 0:
                    log.info("stage %s step %d/%d loss %.4f lr %.3g", config.stage, step, total, loss, lr)
                step += 1
    finally:
        if log_fh:
            log_fh.close()
    return losses


def evaluate_loss(examples: list[Example], enc, lm, partition, store, pad_id, n_fcn_tokens, batch_size=64) -> float:
    pool = partition.pooling_matrix() if partition is not None else None
    total, count = 0.0, 0
    for s in range(0, len(examples), batch_size):
        batch = make_batch(examples[s : s + batch_size], store if enc is not None else None, n_fcn_tokens, pad_id)
        loss, _ = loss_and_grads(batch, enc, lm, pool, need_grads=False)
        m = int(batch.mask.sum())
        total += loss * m
        count += m
    return total / count


def pretrain_lm(pairs: list[InstructionPair], lm: Tensors, tok: Tokenizer, n_fcn_tokens: int,
                config: TrainConfig | None = None, profiles: dict | None = None, profile_rate: float = 0.8,
                log_path=None) -> list[float]:
    """Text-only pretraining of the LM.

    FCN spans carry the learned null embedding, except that a ``profile_rate``
    share of pairs whose subjects appear in ``profiles`` (subject id -> list
    of (attribute word, value word)) show that textual profile instead.
    """
    config = config or TrainConfig(stage="pretrain", learning_rate=1e-3, epochs=3)
    config = replace(config, stage="pretrain")
    rng = np.random.default_rng(np.random.SeedSequence([config.seed, 0x9E0]))
    examples = []
    for p in pairs:
        prof = None
        if profiles and rng.random() < profile_rate and all(s in profiles for s in p.subjects):
            prof = tuple(tuple((tok.id(n), tok.id(v)) for n, v in profiles[s]) for s in p.subjects)
        examples.append(pair_to_example(p, tok, n_fcn_tokens, profiles=prof))
    return run_training(examples, None, lm, None, None, config, tok.pad, n_fcn_tokens, log_path)


def _check_refs(pairs, store: FcnStore):
    missing = set()
    for p in pairs:
        for r in p.fcn_refs:
            try:
                store.get(r)
            except DatasetError:
                missing.add(r)
    if missing:
        raise DatasetError(f"{len(missing)} referenced FCNs missing, e.g. {sorted(missing)[:3]}")


def train_stage1(pairs: list[InstructionPair], enc: Tensors, lm: Tensors, partition: AtlasPartition,
                 store: FcnStore, tok: Tokenizer, config: TrainConfig = STAGE_ONE, log_path=None) -> list[float]:
    """Encoder-only alignment over window FCNs; the LM tensors are left untouched."""
    config = replace(config, stage="one")
    _check_refs(pairs, store)
    n_tok = partition.roi_count + partition.subnet_count + 1
    examples = [pair_to_example(p, tok, n_tok) for p in pairs]
    return run_training(examples, enc, lm, partition, store, config, tok.pad, n_tok, log_path)


def train_stage2(pairs: list[InstructionPair], enc: Tensors, lm: Tensors, partition: AtlasPartition,
                 store: FcnStore, tok: Tokenizer, config: TrainConfig = STAGE_TWO, log_path=None) -> list[float]:
    """Joint encoder + LM fine-tuning over original FCNs."""
    config = replace(config, stage="two")
    _check_refs(pairs, store)
    n_tok = partition.roi_count + partition.subnet_count + 1
    examples = [pair_to_example(p, tok, n_tok) for p in pairs]
    return run_training(examples, enc, lm, partition, store, config, tok.pad, n_tok, log_path)


# --- checkpoints --------------------------------------------------------------


def save_checkpoint(out_dir: str | Path, enc: Tensors | None, lm: Tensors, tok: Tokenizer, meta: dict) -> Path:
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    if enc is not None:
        save_tensors(enc, out_dir / "encoder.nts")
    save_tensors(lm, out_dir / "lm.nts")
    tok.save(out_dir / "vocab.txt")
    text = "".join(f"{k}={meta[k]}\n" for k in sorted(meta))
    tmp = out_dir / "meta.txt.tmp"
    tmp.write_text(text)
    os.replace(tmp, out_dir / "meta.txt")
    return out_dir


def load_checkpoint(ckpt_dir: str | Path) -> tuple[Tensors | None, Tensors, Tokenizer, dict]:
    ckpt_dir = Path(ckpt_dir)
    enc = load_tensors(ckpt_dir / "encoder.nts") if (ckpt_dir / "encoder.nts").exists() else None
    lm = load_tensors(ckpt_dir / "lm.nts")
    tok = Tokenizer.load(ckpt_dir / "vocab.txt")
    meta = {}
    for line in (ckpt_dir / "meta.txt").read_text().splitlines():
        if "=" in line:
            k, v = line.split("=", 1)
            meta[k] = v
    return enc, lm, tok, meta
