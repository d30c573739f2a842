"""Central finite-difference checks of the analytic gradients."""

from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np

from .atlas import default_partition
from .encoder import init_encoder
from .fcn import BoldSeries, pearson_fcn
from .tensors import Tensors
from .toylm import FCN, Tokenizer, init_lm
from .training import Example, FcnStore, frozen_groups, layout, loss_and_grads, make_batch


@dataclass
class TensorCheck:
    name: str
    rel_error: float
    n_probed: int


def relative_error(a: np.ndarray, b: np.ndarray) -> float:
    num = np.linalg.norm(a - b)
    den = max(np.linalg.norm(a) + np.linalg.norm(b), 1e-300)
    return float(num / den)


def toy_problem(d_model=16, n_layers=2, n_heads=2, D=6, N=2, seed=0):
    """A tiny encoder + LM instance and a batch mixing one- and two-FCN prompts."""
    rng = np.random.default_rng(seed)
    part = default_partition(D, N, assigned=D - 1)
    words = ["what", "is", "it", "?", "same", "yes", "no", "male", "female"]
    tok = Tokenizer(words)
    enc = init_encoder(D, d_model, hidden=8, proj_hidden=8, seed=seed)
    lm = init_lm(len(tok), d_model, n_layers, n_heads, max_len=64, seed=seed)
    # perturb so layer norms, biases and embeddings are not at symmetric points
    for k, v in list(enc.items()) + [(k, v) for k, v in lm.items() if not k.startswith("_")]:
        v += rng.normal(0.0, 0.05, v.shape)
    store = FcnStore(tau=0.3)
    for i in range(3):
        store.add(f"f{i}", pearson_fcn(BoldSeries(f"s{i}", rng.standard_normal((12, D)))))
    n_tok = D + N + 1
    ph = tok.placeholder
    prompts = [
        ([tok.id("what"), ph, tok.id("is"), tok.id("it"), tok.id("?")], [tok.id("male"), tok.eos], ["f0"]),
        ([ph, tok.id("is"), tok.id("it"), tok.id("female"), tok.id("?")], [tok.id("no"), tok.eos], ["f1"]),
        ([ph, ph, tok.id("same"), tok.id("?")], [tok.id("yes"), tok.eos], ["f2", "f0"]),
    ]
    examples = []
    for prompt, answer, refs in prompts:
        asm = layout(prompt, n_tok, answer, tok, expected_fcns=len(refs))
        examples.append(Example(asm.ids, tuple(asm.fcn_spans), asm.answer_span, tuple(refs)))
    return enc, lm, part, store, tok, examples


def check_gradients(enc: Tensors, lm: Tensors, part, store, tok, examples, stage="two", h=1e-6,
                    max_probes=12, seed=0, text_only=False) -> list[TensorCheck]:
    """Compare analytic gradients with central differences on a random subset of entries per tensor."""
    n_tok = part.roi_count + part.subnet_count + 1
    pool = part.pooling_matrix()
    use_enc = None if text_only else enc
    batch = make_batch(examples, None if text_only else store, n_tok, tok.pad)
    frozen = frozen_groups(stage)
    _, grads = loss_and_grads(batch, use_enc, lm, pool, frozen)
    rng = np.random.default_rng(seed)
    out = []
    for name in sorted(grads):
        group, key = name.split(".", 1)
        tensor = (enc if group == "encoder" else lm)[key]
        g = grads[name]
        flat_idx = np.arange(tensor.size)
        # probe the largest-gradient entries plus a random sample
        nz = np.argsort(-np.abs(g).ravel())[: max_probes // 2]
        rnd = rng.choice(flat_idx, size=min(max_probes - len(nz), tensor.size), replace=False)
        probe = np.unique(np.concatenate([nz, rnd]))
        fd = np.zeros(len(probe))
        for j, idx in enumerate(probe):
            pos = np.unravel_index(idx, tensor.shape)
            old = tensor[pos]
            tensor[pos] = old + h
            lp, _ = loss_and_grads(batch, use_enc, lm, pool, need_grads=False)
            tensor[pos] = old - h
            lm_, _ = loss_and_grads(batch, use_enc, lm, pool, need_grads=False)
            tensor[pos] = old
            fd[j] = (lp - lm_) / (2 * h)
        out.append(TensorCheck(name, relative_error(g.ravel()[probe], fd), len(probe)))
    return out


def run_suite(d_model=16, n_layers=2, n_heads=2, seed=0) -> list[TensorCheck]:
    """Full suite: joint (stage two) plus text-only gradients, covering every tensor."""
    enc, lm, part, store, tok, examples = toy_problem(d_model, n_layers, n_heads, seed=seed)
    checks = check_gradients(enc, lm, part, store, tok, examples, stage="two", seed=seed)
    # fcn_null only receives gradient in text-only mode
    text = check_gradients(enc, lm, part, store, tok, examples, stage="pretrain", seed=seed, text_only=True)
    checks.extend(c for c in text if c.name == "lm.fcn_null")
    # textual profiles route span gradients into the token embeddings
    prof = [(tok.id("male"), tok.id("yes")), (tok.id("female"), tok.id("no"))]
    mixed = [replace(e, profiles=tuple(prof[: j + 1] for j in range(len(e.fcn_refs)))) if i != 1 else e
             for i, e in enumerate(examples)]
    text = check_gradients(enc, lm, part, store, tok, mixed, stage="pretrain", seed=seed, text_only=True)
    checks.extend(TensorCheck(c.name + "[profile]", c.rel_error, c.n_probed) for c in text
                  if c.name in ("lm.tok_emb", "lm.fcn_null"))
    return checks


__all__ = ["TensorCheck", "check_gradients", "relative_error", "run_suite", "toy_problem", "FCN"]
