"""Attention aggregation over FCN tokens: answer saliency, token interaction
maps, subnetwork grouping and heatmap CSVs."""

from __future__ import annotations

import csv
import io
import os
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .atlas import AtlasPartition
from .fcn import InvalidInputError


@dataclass(frozen=True)
class SaliencyVector:
    scores: np.ndarray  # one weight per FCN token, sums to 1


@dataclass(frozen=True)
class InteractionMap:
    token_map: np.ndarray
    subnet_map: np.ndarray | None = None


def _check_attn(attn) -> np.ndarray:
    a = np.asarray(attn, dtype=float)
    if a.ndim != 4 or a.shape[2] != a.shape[3]:
        raise InvalidInputError(f"attention must be (layers, heads, S, S), got {a.shape}")
    return a


def _positions(pos, S: int, what: str) -> np.ndarray:
    p = np.asarray(list(pos), dtype=np.int64)
    if p.size == 0:
        raise InvalidInputError(f"empty {what} position set")
    if p.min() < 0 or p.max() >= S:
        raise InvalidInputError(f"{what} positions outside sequence of length {S}")
    if len(np.unique(p)) != len(p):
        raise InvalidInputError(f"duplicate {what} positions")
    return p


def aggregate_saliency(attn, fcn_positions, answer_positions) -> SaliencyVector:
    """Attention from answer queries onto FCN keys: layer mean, summed over heads and answers, normalized."""
    a = _check_attn(attn)
    S = a.shape[-1]
    f = _positions(fcn_positions, S, "FCN")
    q = _positions(answer_positions, S, "answer")
    if np.intersect1d(f, q).size:
        raise InvalidInputError("FCN and answer positions overlap")
    sel = a[:, :, q][:, :, :, f]  # (layers, heads, answers, fcn)
    s = sel.mean(axis=0).sum(axis=(0, 1))
    total = s.sum()
    if total <= 0:
        raise InvalidInputError("answer positions place no attention on FCN tokens")
    return SaliencyVector(s / total)


def token_interaction_map(attn, fcn_positions) -> np.ndarray:
    """FCN-to-FCN attention, layer mean and head sum, symmetrized and normalized to total mass 1."""
    a = _check_attn(attn)
    f = _positions(fcn_positions, a.shape[-1], "FCN")
    m = a[:, :, f][:, :, :, f].mean(axis=0).sum(axis=0)
    m = 0.5 * (m + m.T)
    total = m.sum()
    if total <= 0:
        raise InvalidInputError("no attention among FCN tokens")
    return m / total


def group_labels(partition: AtlasPartition) -> list[str]:
    return [f"subnet_{k}" for k in range(1, partition.subnet_count + 1)] + ["unassigned", "global"]


def token_groups(partition: AtlasPartition) -> list[np.ndarray]:
    """Token indices of each group in encoder order (ROI, subnet, global).

    Groups are the ROI tokens of subnets 1..N, the unassigned ROI tokens and
    the global token. Subnet summary tokens belong to no group.
    """
    groups = [np.asarray(partition.members(k), dtype=np.int64) for k in range(1, partition.subnet_count + 1)]
    groups.append(np.asarray(partition.unassigned(), dtype=np.int64))
    groups.append(np.array([partition.roi_count + partition.subnet_count]))
    return groups


def group_by_subnetwork(token_map, partition: AtlasPartition) -> np.ndarray:
    """(N+2)x(N+2) block means of a token map; blocks touching an empty group are NaN."""
    m = np.asarray(token_map, dtype=float)
    n_tok = partition.roi_count + partition.subnet_count + 1
    if m.shape != (n_tok, n_tok):
        raise InvalidInputError(f"token map {m.shape} does not match the {n_tok}-token layout")
    groups = token_groups(partition)
    G = len(groups)
    out = np.full((G, G), np.nan)
    for i, gi in enumerate(groups):
        for j, gj in enumerate(groups):
            if len(gi) and len(gj):
                out[i, j] = m[np.ix_(gi, gj)].mean()
    return out


def interaction_map(attn, fcn_positions, partition: AtlasPartition) -> InteractionMap:
    tm = token_interaction_map(attn, fcn_positions)
    return InteractionMap(tm, group_by_subnetwork(tm, partition))


def max_off_diagonal(subnet_map) -> tuple[int, int]:
    """1-based (i, j), i < j, of the largest off-diagonal entry among the subnet groups."""
    m = np.asarray(subnet_map, dtype=float)
    n = m.shape[0] - 2
    block = m[:n, :n].copy()
    block[np.tril_indices(n)] = -np.inf
    block[np.isnan(block)] = -np.inf
    i, j = np.unravel_index(int(np.argmax(block)), block.shape)
    return int(i) + 1, int(j) + 1


# --- model-level aggregation ---------------------------------------------------


@dataclass
class BiomarkerReport:
    saliency: np.ndarray
    token_map: np.ndarray
    subnet_map: np.ndarray
    n_examples: int


def analyze(pairs, enc, lm, tok, partition: AtlasPartition, store, subjects=None, batch_size=16) -> BiomarkerReport:
    """Mean saliency and interaction maps over single-FCN prompts, answers teacher-forced.

    ``subjects`` restricts the run to pairs about those subject ids. Answer
    positions are the ones whose outputs are answer tokens.
    """
    from .evalkit import encode_refs
    from .toylm import assemble_input, forward_hidden

    keep = set(subjects) if subjects is not None else None
    chosen = [p for p in pairs if len(p.fcn_refs) == 1 and (keep is None or set(p.subjects) <= keep)]
    if not chosen:
        raise InvalidInputError("no single-FCN pairs left after filtering")
    tokens = encode_refs([p.fcn_refs[0] for p in chosen], enc, partition, store)
    n_tok = partition.roi_count + partition.subnet_count + 1
    sal = np.zeros(n_tok)
    tmap = np.zeros((n_tok, n_tok))
    for s in range(0, len(chosen), batch_size):
        chunk = chosen[s : s + batch_size]
        asms = [assemble_input(tok.tokenize(p.prompt), [tokens[p.fcn_refs[0]]], tok.tokenize(p.answer) + [tok.eos],
                               lm, tok) for p in chunk]
        S = max(len(a.ids) for a in asms)
        x = np.zeros((len(asms), S, lm["tok_emb"].shape[1]))
        for b, a in enumerate(asms):
            x[b, : len(a.ids)] = a.embedded
        # right padding never affects earlier positions under causal attention
        _, att, _ = forward_hidden(x, lm)
        for b, a in enumerate(asms):
            fpos = a.fcn_positions
            a0, a1 = a.answer_span
            qpos = np.arange(a0 - 1, a1 - 1)
            sal += aggregate_saliency(att[b], fpos, qpos).scores
            tmap += token_interaction_map(att[b], fpos)
    n = len(chosen)
    sal /= n
    tmap /= n
    return BiomarkerReport(sal, tmap, group_by_subnetwork(tmap, partition), n)


# --- plot data ------------------------------------------------------------------


def _fmt(v: float) -> str:
    return repr(float(v))


def emit_plot_data(matrix, labels, path: str | Path, col_labels=None) -> Path:
    """Headered CSV with row and column labels; floats written with round-trip precision."""
    m = np.atleast_2d(np.asarray(matrix, dtype=float))
    rows = list(labels)
    cols = list(col_labels) if col_labels is not None else rows
    if m.shape != (len(rows), len(cols)):
        raise InvalidInputError(f"matrix {m.shape} does not match {len(rows)}x{len(cols)} labels")
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow([""] + cols)
    for lab, row in zip(rows, m):
        w.writerow([lab] + [_fmt(v) for v in row])
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_text(buf.getvalue())
    os.replace(tmp, path)
    return path


def read_plot_data(path: str | Path) -> tuple[np.ndarray, list[str], list[str]]:
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    if not rows:
        raise InvalidInputError(f"{path}: empty heatmap file")
    cols = rows[0][1:]
    labels = [r[0] for r in rows[1:]]
    m = np.array([[float(v) for v in r[1:]] for r in rows[1:]]).reshape(len(labels), len(cols))
    return m, labels, cols
