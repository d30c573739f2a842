"""Multi-scale FCN encoder: ROI rows, subnetwork means, a two-layer GCN with
mean pooling, and a shared two-layer projector into the LM embedding space.

Parameters live in a plain dict with keys::

    gcn_w1 (D, H1)  gcn_b1 (H1,)  gcn_w2 (H1, D)  gcn_b2 (D,)
    proj_w1 (D, Hp) proj_b1 (Hp,) proj_w2 (Hp, d_model) proj_b2 (d_model,)

The batched ``encoder_forward`` / ``encoder_backward`` pair is what training
uses; the single-matrix functions mirror the individual pipeline steps.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .atlas import AtlasPartition
from .fcn import FcnMatrix, InvalidInputError, NormalizedAdjacency, normalize_adjacency, threshold_adjacency
from .tensors import Tensors, glorot

ENCODER_KEYS = ("gcn_w1", "gcn_b1", "gcn_w2", "gcn_b2", "proj_w1", "proj_b1", "proj_w2", "proj_b2")


@dataclass(frozen=True)
class RawTokens:
    roi: np.ndarray  # (D, D)
    subnet: np.ndarray  # (N, D)
    global_: np.ndarray  # (D,)

    def stacked(self) -> np.ndarray:
        return np.concatenate([self.roi, self.subnet, self.global_[None, :]], axis=0)


@dataclass(frozen=True)
class FcnTokenSequence:
    """Projected tokens in layout order ROI 1..D, subnet 1..N, global."""

    tokens: np.ndarray  # (D + N + 1, d_model)
    n_roi: int
    n_subnet: int

    def __len__(self) -> int:
        return self.tokens.shape[0]

    @property
    def layout(self) -> list[str]:
        return (["roi"] * self.n_roi) + (["subnet"] * self.n_subnet) + ["global"]


def init_encoder(D: int, d_model: int, hidden: int = 256, proj_hidden: int = 256, seed: int = 0) -> Tensors:
    rng = np.random.default_rng(np.random.SeedSequence([seed, 0xE1C]))
    return {
        "gcn_w1": glorot(rng, D, hidden),
        "gcn_b1": np.zeros(hidden),
        "gcn_w2": glorot(rng, hidden, D),
        "gcn_b2": np.zeros(D),
        "proj_w1": glorot(rng, D, proj_hidden),
        "proj_b1": np.zeros(proj_hidden),
        "proj_w2": glorot(rng, proj_hidden, d_model),
        "proj_b2": np.zeros(d_model),
    }


def extract_roi_tokens(fcn: FcnMatrix) -> np.ndarray:
    return fcn.values.copy()


def pool_subnetworks(roi_tokens: np.ndarray, partition: AtlasPartition) -> np.ndarray:
    if roi_tokens.shape[0] != partition.roi_count:
        raise InvalidInputError(f"{roi_tokens.shape[0]} ROI tokens for a {partition.roi_count}-ROI partition")
    return partition.pooling_matrix() @ roi_tokens


def gcn_forward(fcn: FcnMatrix, norm_adj: NormalizedAdjacency, params: Tensors) -> np.ndarray:
    h0 = fcn.values
    a = norm_adj.values
    D = h0.shape[0]
    if a.shape != (D, D) or params["gcn_w1"].shape[0] != D or params["gcn_w2"].shape[1] != D:
        raise InvalidInputError(
            f"shape mismatch: FCN {h0.shape}, adjacency {a.shape}, "
            f"w1 {params['gcn_w1'].shape}, w2 {params['gcn_w2'].shape}"
        )
    h1 = np.maximum(a @ h0 @ params["gcn_w1"] + params["gcn_b1"], 0.0)
    return a @ h1 @ params["gcn_w2"] + params["gcn_b2"]


def global_pool(node_matrix: np.ndarray) -> np.ndarray:
    return node_matrix.mean(axis=0)


def project_tokens(raw: RawTokens, params: Tensors) -> FcnTokenSequence:
    x = raw.stacked()
    if x.shape[1] != params["proj_w1"].shape[0]:
        raise InvalidInputError(f"token dim {x.shape[1]} does not match projector input {params['proj_w1'].shape[0]}")
    hidden = np.maximum(x @ params["proj_w1"] + params["proj_b1"], 0.0)
    out = hidden @ params["proj_w2"] + params["proj_b2"]
    return FcnTokenSequence(out, raw.roi.shape[0], raw.subnet.shape[0])


def raw_tokens(fcn: FcnMatrix, partition: AtlasPartition, params: Tensors, tau: float = 0.5) -> RawTokens:
    roi = extract_roi_tokens(fcn)
    sub = pool_subnetworks(roi, partition)
    a_norm = normalize_adjacency(threshold_adjacency(fcn, tau))
    g = global_pool(gcn_forward(fcn, a_norm, params))
    return RawTokens(roi, sub, g)


def encode(fcn: FcnMatrix, partition: AtlasPartition, params: Tensors, tau: float = 0.5) -> FcnTokenSequence:
    return project_tokens(raw_tokens(fcn, partition, params, tau), params)


# --- batched path with manual gradients -------------------------------------


def graph_inputs(fcns: list[FcnMatrix], tau: float = 0.5) -> tuple[np.ndarray, np.ndarray]:
    """Stack FCN values and their normalized adjacencies as (B, D, D) arrays."""
    F = np.stack([f.values for f in fcns])
    A = np.stack([normalize_adjacency(threshold_adjacency(f, tau)).values for f in fcns])
    return F, A


def encoder_forward(F: np.ndarray, A: np.ndarray, pool: np.ndarray, p: Tensors):
    """F, A: (B, D, D); pool: (N, D). Returns tokens (B, D+N+1, d_model) and a cache."""
    AF = A @ F
    u1 = AF @ p["gcn_w1"] + p["gcn_b1"]
    h1 = np.maximum(u1, 0.0)
    ah1 = A @ h1
    h2 = ah1 @ p["gcn_w2"] + p["gcn_b2"]
    g = h2.mean(axis=1)
    sub = pool @ F
    raw = np.concatenate([F, sub, g[:, None, :]], axis=1)
    z = raw @ p["proj_w1"] + p["proj_b1"]
    r = np.maximum(z, 0.0)
    out = r @ p["proj_w2"] + p["proj_b2"]
    cache = (A, AF, u1, ah1, raw, z, r)
    return out, cache


def encoder_backward(dout: np.ndarray, cache, p: Tensors) -> Tensors:
    A, AF, u1, ah1, raw, z, r = cache
    g: Tensors = {}
    g["proj_w2"] = np.einsum("bsh,bsd->hd", r, dout)
    g["proj_b2"] = dout.sum(axis=(0, 1))
    dz = (dout @ p["proj_w2"].T) * (z > 0)
    g["proj_w1"] = np.einsum("bsi,bsh->ih", raw, dz)
    g["proj_b1"] = dz.sum(axis=(0, 1))
    # only the global token depends on GCN weights
    dglob = dz[:, -1, :] @ p["proj_w1"].T  # (B, D)
    D = ah1.shape[1]
    dh2_row = dglob / D  # identical for every node row
    g["gcn_w2"] = np.einsum("bh,bd->hd", ah1.sum(axis=1), dh2_row)
    g["gcn_b2"] = dglob.sum(axis=0)
    dah1_row = dh2_row @ p["gcn_w2"].T  # (B, H1)
    dh1 = A.sum(axis=1)[:, :, None] * dah1_row[:, None, :]  # A^T applied to a row-constant matrix
    du1 = dh1 * (u1 > 0)
    g["gcn_w1"] = np.einsum("bni,bnh->ih", AF, du1)
    g["gcn_b1"] = du1.sum(axis=(0, 1))
    return g
