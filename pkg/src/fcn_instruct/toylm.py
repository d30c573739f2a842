"""A small pre-norm decoder-only transformer in numpy with hand-written gradients.

Sequences are ``prompt tokens (placeholders expanded) + answer tokens + EOS``.
Each FCN placeholder in the prompt expands to a span of projected FCN tokens;
without an FCN (text-only pretraining) the span is filled with the learned
``fcn_null`` vector, or with an attribute profile (name plus value word
embedding per slot). Learned absolute positions are added to every slot.

Parameter keys::

    tok_emb (V, d)  pos_emb (S_max, d)  fcn_null (d,)
    b{l}.ln1_g/ln1_b (d,)  b{l}.wq/wk/wv/wo (d, d)
    b{l}.ln2_g/ln2_b (d,)  b{l}.ff_w1 (d, F) b{l}.ff_b1 (F,) b{l}.ff_w2 (F, d) b{l}.ff_b2 (d,)
    lnf_g/lnf_b (d,)  head (d, V)
"""

from __future__ import annotations

import csv
import io
import os
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .fcn import InvalidInputError
from .tensors import Tensors, glorot

BOS, EOS, SEP, PAD, UNK, FCN = "<bos>", "<eos>", "<sep>", "<pad>", "<unk>", "<fcn>"
SPECIALS = (PAD, UNK, BOS, EOS, SEP, FCN)
LN_EPS = 1e-5


class Tokenizer:
    """Closed word-level vocabulary; integers 0..100 are atomic tokens."""

    def __init__(self, words):
        vocab = list(SPECIALS)
        seen = set(vocab)
        for w in [str(i) for i in range(101)] + sorted(set(words)):
            if w not in seen and w.strip() and not any(c.isspace() for c in w):
                vocab.append(w)
                seen.add(w)
        self.vocab = vocab
        self.index = {w: i for i, w in enumerate(vocab)}

    def __len__(self) -> int:
        return len(self.vocab)

    def id(self, word: str) -> int:
        return self.index.get(word, self.index[UNK])

    def tokenize(self, text: str) -> list[int]:
        return [self.id(w) for w in text.split()]

    def detokenize(self, ids) -> str:
        return " ".join(self.vocab[int(i)] for i in ids)

    @property
    def eos(self) -> int:
        return self.index[EOS]

    @property
    def pad(self) -> int:
        return self.index[PAD]

    @property
    def placeholder(self) -> int:
        return self.index[FCN]

    def save(self, path: str | Path) -> None:
        Path(path).write_text("\n".join(self.vocab) + "\n")

    @classmethod
    def load(cls, path: str | Path) -> "Tokenizer":
        words = [w for w in Path(path).read_text().split("\n") if w]
        tok = cls([])
        tok.vocab = words
        tok.index = {w: i for i, w in enumerate(words)}
        return tok


@dataclass
class Assembly:
    """Token layout of one example. ``ids`` holds the placeholder id on FCN slots."""

    ids: np.ndarray
    fcn_spans: list[tuple[int, int]]
    answer_span: tuple[int, int]
    embedded: np.ndarray | None = None
    fcn_index: list[int] = field(default_factory=list)  # which FCN feeds each span

    def __len__(self) -> int:
        return len(self.ids)

    @property
    def fcn_positions(self) -> np.ndarray:
        return np.concatenate([np.arange(a, b) for a, b in self.fcn_spans]) if self.fcn_spans else np.array([], int)

    @property
    def answer_positions(self) -> np.ndarray:
        return np.arange(*self.answer_span)


def layout(prompt_ids, n_fcn_tokens: int, answer_ids, tok: Tokenizer, expected_fcns: int | None = None) -> Assembly:
    ph = tok.placeholder
    prompt_ids = list(prompt_ids)
    n_ph = sum(1 for i in prompt_ids if i == ph)
    if expected_fcns is not None and n_ph != expected_fcns:
        raise InvalidInputError(f"prompt has {n_ph} FCN placeholders but {expected_fcns} FCN sequences were given")
    ids: list[int] = []
    spans = []
    for t in prompt_ids:
        if t == ph:
            spans.append((len(ids), len(ids) + n_fcn_tokens))
            ids.extend([ph] * n_fcn_tokens)
        else:
            ids.append(t)
    start = len(ids)
    ids.extend(answer_ids)
    return Assembly(np.array(ids, dtype=np.int64), spans, (start, len(ids)), fcn_index=list(range(len(spans))))


def assemble_input(prompt_ids, fcn_tokens, answer_ids, params: Tensors, tok: Tokenizer) -> Assembly:
    """Splice projected FCN sequences into the prompt and embed the result.

    ``fcn_tokens`` is a list of (S_f, d) arrays (or FcnTokenSequence), one per
    placeholder; ``answer_ids`` may be empty.
    """
    seqs = [getattr(f, "tokens", f) for f in fcn_tokens]
    n_tok = seqs[0].shape[0] if seqs else 0
    if any(s.shape[0] != n_tok for s in seqs):
        raise InvalidInputError("FCN sequences differ in length")
    asm = layout(prompt_ids, n_tok, answer_ids, tok, expected_fcns=len(seqs))
    x = params["tok_emb"][asm.ids].copy()
    for (a, b), s in zip(asm.fcn_spans, seqs):
        x[a:b] = s
    if len(asm) > params["pos_emb"].shape[0]:
        raise InvalidInputError(f"sequence length {len(asm)} exceeds position table {params['pos_emb'].shape[0]}")
    asm.embedded = x + params["pos_emb"][: len(asm)]
    return asm


def init_lm(vocab_size: int, d_model: int = 64, n_layers: int = 2, n_heads: int = 4, ff_mult: int = 4,
            max_len: int = 320, seed: int = 0) -> Tensors:
    if d_model % n_heads:
        raise InvalidInputError(f"{n_heads} heads do not divide d_model={d_model}")
    rng = np.random.default_rng(np.random.SeedSequence([seed, 0x1A7]))
    ff = ff_mult * d_model
    p: Tensors = {
        "tok_emb": rng.normal(0.0, 0.1, (vocab_size, d_model)),
        "pos_emb": rng.normal(0.0, 0.02, (max_len, d_model)),
        "fcn_null": rng.normal(0.0, 0.1, d_model),
        "lnf_g": np.ones(d_model),
        "lnf_b": np.zeros(d_model),
        "head": glorot(rng, d_model, vocab_size),
    }
    for l in range(n_layers):
        p[f"b{l}.ln1_g"] = np.ones(d_model)
        p[f"b{l}.ln1_b"] = np.zeros(d_model)
        for w in ("wq", "wk", "wv", "wo"):
            p[f"b{l}.{w}"] = glorot(rng, d_model, d_model)
        p[f"b{l}.ln2_g"] = np.ones(d_model)
        p[f"b{l}.ln2_b"] = np.zeros(d_model)
        p[f"b{l}.ff_w1"] = glorot(rng, d_model, ff)
        p[f"b{l}.ff_b1"] = np.zeros(ff)
        p[f"b{l}.ff_w2"] = glorot(rng, ff, d_model)
        p[f"b{l}.ff_b2"] = np.zeros(d_model)
    p["_n_heads"] = np.array(float(n_heads))
    return p


def n_layers(p: Tensors) -> int:
    return sum(1 for k in p if k.endswith(".wq"))


def n_heads(p: Tensors) -> int:
    return int(p["_n_heads"])


def lm_trainable_keys(p: Tensors) -> list[str]:
    return [k for k in p if not k.startswith("_")]


# --- building blocks ----------------------------------------------------------


def _ln(x, g, b):
    mu = x.mean(axis=-1, keepdims=True)
    xc = x - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    rstd = 1.0 / np.sqrt(var + LN_EPS)
    xhat = xc * rstd
    return xhat * g + b, (xhat, rstd)


def _ln_back(dy, g, cache):
    xhat, rstd = cache
    dg = (dy * xhat).reshape(-1, dy.shape[-1]).sum(axis=0)
    db = dy.reshape(-1, dy.shape[-1]).sum(axis=0)
    dxhat = dy * g
    dx = rstd * (dxhat - dxhat.mean(axis=-1, keepdims=True) - xhat * (dxhat * xhat).mean(axis=-1, keepdims=True))
    return dx, dg, db


def _causal_bias(S):
    bias = np.zeros((S, S))
    bias[np.triu_indices(S, 1)] = -np.inf
    return bias


def _wgrad(x, dy):
    """Sum over leading axes of outer products x^T dy, as one BLAS call."""
    return x.reshape(-1, x.shape[-1]).T @ dy.reshape(-1, dy.shape[-1])


def _block_forward(x, p, l, H, bias):
    B, S, d = x.shape
    dh = d // H
    a_in, ln1 = _ln(x, p[f"b{l}.ln1_g"], p[f"b{l}.ln1_b"])
    q = (a_in @ p[f"b{l}.wq"]).reshape(B, S, H, dh).transpose(0, 2, 1, 3)
    k = (a_in @ p[f"b{l}.wk"]).reshape(B, S, H, dh).transpose(0, 2, 1, 3)
    v = (a_in @ p[f"b{l}.wv"]).reshape(B, S, H, dh).transpose(0, 2, 1, 3)
    att = q @ k.transpose(0, 1, 3, 2)
    att *= 1.0 / np.sqrt(dh)
    att += bias
    att -= att.max(axis=-1, keepdims=True)
    np.exp(att, out=att)
    att /= att.sum(axis=-1, keepdims=True)
    ctx = (att @ v).transpose(0, 2, 1, 3).reshape(B, S, d)
    x1 = x + ctx @ p[f"b{l}.wo"]
    f_in, ln2 = _ln(x1, p[f"b{l}.ln2_g"], p[f"b{l}.ln2_b"])
    u = f_in @ p[f"b{l}.ff_w1"] + p[f"b{l}.ff_b1"]
    r = np.maximum(u, 0.0)
    x2 = x1 + r @ p[f"b{l}.ff_w2"] + p[f"b{l}.ff_b2"]
    cache = (a_in, ln1, q, k, v, att, ctx, f_in, ln2, u, r)
    return x2, att, cache


def _block_backward(dx2, p, l, H, cache, grads):
    a_in, ln1, q, k, v, att, ctx, f_in, ln2, u, r = cache
    B, S, d = dx2.shape
    dh = d // H
    # feed-forward residual branch
    grads[f"b{l}.ff_w2"] = _wgrad(r, dx2)
    grads[f"b{l}.ff_b2"] = dx2.sum(axis=(0, 1))
    du = dx2 @ p[f"b{l}.ff_w2"].T
    du *= u > 0
    grads[f"b{l}.ff_w1"] = _wgrad(f_in, du)
    grads[f"b{l}.ff_b1"] = du.sum(axis=(0, 1))
    df_in = du @ p[f"b{l}.ff_w1"].T
    dx1_ln, grads[f"b{l}.ln2_g"], grads[f"b{l}.ln2_b"] = _ln_back(df_in, p[f"b{l}.ln2_g"], ln2)
    dx1 = dx2 + dx1_ln
    # attention residual branch
    grads[f"b{l}.wo"] = _wgrad(ctx, dx1)
    dctx = (dx1 @ p[f"b{l}.wo"].T).reshape(B, S, H, dh).transpose(0, 2, 1, 3)
    dv = att.transpose(0, 1, 3, 2) @ dctx
    ds = dctx @ v.transpose(0, 1, 3, 2)
    ds -= (ds * att).sum(axis=-1, keepdims=True)
    ds *= att
    ds *= 1.0 / np.sqrt(dh)
    dq = ds @ k
    dk = ds.transpose(0, 1, 3, 2) @ q
    merge = lambda t: t.transpose(0, 2, 1, 3).reshape(B, S, d)  # noqa: E731
    dq, dk, dv = merge(dq), merge(dk), merge(dv)
    grads[f"b{l}.wq"] = _wgrad(a_in, dq)
    grads[f"b{l}.wk"] = _wgrad(a_in, dk)
    grads[f"b{l}.wv"] = _wgrad(a_in, dv)
    da_in = dq @ p[f"b{l}.wq"].T + dk @ p[f"b{l}.wk"].T + dv @ p[f"b{l}.wv"].T
    dx_ln, grads[f"b{l}.ln1_g"], grads[f"b{l}.ln1_b"] = _ln_back(da_in, p[f"b{l}.ln1_g"], ln1)
    return dx1 + dx_ln


def embed_batch(ids: np.ndarray, span: np.ndarray, p: Tensors, fcn_slot: np.ndarray | None = None,
                fcn_flat: np.ndarray | None = None, prof_name: np.ndarray | None = None,
                prof_value: np.ndarray | None = None) -> np.ndarray:
    """Embed a padded batch (B, S).

    ``span`` marks FCN slots. A slot takes the encoder output row
    ``fcn_flat[fcn_slot]`` when ``fcn_slot >= 0``; otherwise, in text-only
    mode, either a textual profile (name + value word embeddings) where
    ``prof_name >= 0`` or the learned ``fcn_null`` vector.
    """
    S = ids.shape[1]
    x = p["tok_emb"][ids]
    if span.any():
        if fcn_slot is not None and fcn_flat is not None:
            on = fcn_slot >= 0
            x[on] = fcn_flat[fcn_slot[on]]
        else:
            on = np.zeros_like(span)
        prof = (prof_name >= 0) & span & ~on if prof_name is not None else np.zeros_like(span)
        if prof.any():
            x[prof] = p["tok_emb"][prof_name[prof]] + p["tok_emb"][prof_value[prof]]
        x[span & ~on & ~prof] = p["fcn_null"]
    return x + p["pos_emb"][:S]


def forward_hidden(x: np.ndarray, p: Tensors, keep_cache: bool = False):
    """Run the transformer stack on embedded inputs (B, S, d).

    Returns final-normalized hidden states, per-layer attention (B, L, H, S, S)
    and, if requested, the cache needed by ``backward_hidden``.
    """
    H = n_heads(p)
    S = x.shape[1]
    bias = _causal_bias(S)
    atts, caches = [], []
    h = x
    for l in range(n_layers(p)):
        h, att, c = _block_forward(h, p, l, H, bias)
        atts.append(att)
        if keep_cache:
            caches.append(c)
    hf, lnf = _ln(h, p["lnf_g"], p["lnf_b"])
    att = np.stack(atts, axis=1)
    return hf, att, ((caches, lnf) if keep_cache else None)


def backward_hidden(dhf: np.ndarray, p: Tensors, cache, grads: Tensors) -> np.ndarray:
    caches, lnf = cache
    H = n_heads(p)
    dh, grads["lnf_g"], grads["lnf_b"] = _ln_back(dhf, p["lnf_g"], lnf)
    for l in reversed(range(len(caches))):
        dh = _block_backward(dh, p, l, H, caches[l], grads)
    return dh


def forward(embedded: np.ndarray, params: Tensors):
    """Logits for every position plus the attention tensor (layers, heads, S, S).

    Accepts one embedded sequence (S, d) or a batch (B, S, d).
    """
    single = embedded.ndim == 2
    x = embedded[None] if single else embedded
    hf, att, _ = forward_hidden(x, params)
    logits = hf @ params["head"]
    if single:
        return logits[0], att[0]
    return logits, att


# --- loss ---------------------------------------------------------------------


def log_softmax(logits: np.ndarray) -> np.ndarray:
    m = logits.max(axis=-1, keepdims=True)
    z = logits - m
    return z - np.log(np.exp(z).sum(axis=-1, keepdims=True))


def masked_loss(logits: np.ndarray, targets: np.ndarray, mask: np.ndarray) -> float:
    """Mean cross-entropy of ``targets`` under ``logits`` over positions where ``mask`` is set.

    ``logits[..., t, :]`` is scored against ``targets[..., t]``; callers align
    next-token targets before calling.
    """
    mask = np.asarray(mask, dtype=bool)
    if not mask.any():
        raise InvalidInputError("loss mask selects no positions")
    lp = log_softmax(logits[mask])
    t = np.asarray(targets)[mask]
    return float(-lp[np.arange(len(t)), t].mean())


def next_token_targets(asm: Assembly, pad_id: int) -> tuple[np.ndarray, np.ndarray]:
    """Targets shifted by one and the mask marking predictions of answer tokens."""
    S = len(asm)
    targets = np.full(S, pad_id, dtype=np.int64)
    targets[:-1] = asm.ids[1:]
    mask = np.zeros(S, dtype=bool)
    a, b = asm.answer_span
    if b > a:
        mask[max(a - 1, 0) : b - 1] = True
    return targets, mask


# --- decoding -----------------------------------------------------------------


def decode(asm: Assembly, params: Tensors, tok: Tokenizer, mode: str = "greedy", temperature: float = 1.0,
           seed: int | None = None, max_len: int = 4) -> str:
    """Generate an answer after the prompt held in ``asm`` (its answer span is ignored)."""
    return decode_batch([asm], params, tok, mode, temperature, [seed], max_len)[0]


def decode_batch(asms: list[Assembly], params: Tensors, tok: Tokenizer, mode: str = "greedy",
                 temperature: float = 1.0, seeds=None, max_len: int = 4) -> list[str]:
    """Batched autoregressive generation; every sequence sees only its own prefix."""
    if mode not in ("greedy", "sample"):
        raise InvalidInputError(f"unknown decode mode {mode!r}")
    seeds = seeds or [None] * len(asms)
    rngs = [np.random.default_rng(s) for s in seeds]
    prefixes = []
    for a in asms:
        if a.embedded is None:
            raise InvalidInputError("assembly must be embedded before decoding")
        stop = a.answer_span[0]
        prefixes.append(a.embedded[:stop] - params["pos_emb"][:stop])
    outputs: list[list[int]] = [[] for _ in asms]
    done = [False] * len(asms)
    for _ in range(max_len):
        live = [i for i, d in enumerate(done) if not d]
        if not live:
            break
        lens = [len(prefixes[i]) for i in live]
        S = max(lens)
        d = params["tok_emb"].shape[1]
        x = np.zeros((len(live), S, d))
        for j, i in enumerate(live):
            x[j, : lens[j]] = prefixes[i]
        x = x + params["pos_emb"][:S]
        hf, _, _ = forward_hidden(x, params)
        last = hf[np.arange(len(live)), np.array(lens) - 1]
        logits = last @ params["head"]
        for j, i in enumerate(live):
            row = logits[j]
            if mode == "greedy" or temperature <= 0.0:
                nxt = int(np.argmax(row))
            else:
                pr = np.exp(log_softmax(row / temperature))
                nxt = int(rngs[i].choice(len(pr), p=pr / pr.sum()))
            if nxt == tok.eos:
                done[i] = True
                continue
            outputs[i].append(nxt)
            prefixes[i] = np.vstack([prefixes[i], params["tok_emb"][nxt]])
    return [tok.detokenize(o) for o in outputs]


def export_attention(att: np.ndarray, out_dir: str | Path, labels=None) -> list[Path]:
    """One headered CSV per (layer, head) of a (layers, heads, S, S) attention tensor."""
    att = np.asarray(att)
    if att.ndim != 4:
        raise InvalidInputError(f"expected (layers, heads, S, S) attention, got shape {att.shape}")
    S = att.shape[-1]
    labels = list(labels) if labels is not None else [str(i) for i in range(S)]
    if len(labels) != S:
        raise InvalidInputError(f"{len(labels)} labels for sequence length {S}")
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    paths = []
    for l in range(att.shape[0]):
        for h in range(att.shape[1]):
            buf = io.StringIO()
            w = csv.writer(buf, lineterminator="\n")
            w.writerow(["query"] + labels)
            for lab, row in zip(labels, att[l, h]):
                w.writerow([lab] + [repr(float(v)) for v in row])
            path = out_dir / f"attn_l{l}_h{h}.csv"
            tmp = path.with_name(path.name + ".tmp")
            tmp.write_text(buf.getvalue())
            os.replace(tmp, path)
            paths.append(path)
    return paths
