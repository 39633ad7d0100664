"""Reference numerics: exact attention oracles and online-softmax algebra.

This module is the functional ground truth.  Everything runs in float64
regardless of the configured storage width; ``dtype_bytes`` affects timing
and traffic only.  The softmax scaling 1/sqrt(d) is folded into Q by every
scheduler, and the reference applies the same convention internally.

Masked scores use a -inf sentinel: a fully masked row has row_max = -inf and
contributes nothing to the denominator or the accumulator.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, replace
from enum import Enum

import numpy as np

Matrix = np.ndarray  # dense row-major, float64 working precision


class Variant(str, Enum):
    MHA_PREFILL = "MHA_prefill"
    MHA_DECODE = "MHA_decode"
    MHA_SPEC_DECODE = "MHA_spec_decode"
    GQA_DECODE = "GQA_decode"
    MLA_DECODE_ABSORBED = "MLA_decode_absorbed"


@dataclass(frozen=True, slots=True)
class AttentionWorkload:
    """Attention variant plus shape parameters.

    ``D`` is the per-head dimension of queries/keys for the MHA/GQA variants
    and the up-projected head dimension for MLA; ``d_v`` defaults to ``D``.
    For MLA the score contraction runs over ``d_c + d_rope`` latent features.
    """

    variant: Variant
    B: int = 1
    H: int = 1
    S_q: int = 1
    S_kv: int = 1
    D: int = 64
    G: int = 1
    d_c: int = 0
    spec_len: int = 1
    causal: bool = False
    dtype_bytes: int = 2
    d_rope: int = 0
    d_v: int = 0
    q_rank: int = 0

    def __post_init__(self) -> None:
        if min(self.B, self.H, self.S_q, self.S_kv, self.D, self.G, self.spec_len) < 1:
            raise ValueError("shape parameters must be >= 1")
        if self.variant is Variant.GQA_DECODE and self.H % self.G != 0:
            raise ValueError("H must be divisible by G for GQA")
        if self.variant is Variant.MHA_DECODE and self.S_q != 1:
            raise ValueError("S_q must be 1 for MHA decode")
        if self.variant is Variant.MHA_SPEC_DECODE and self.S_q != self.spec_len:
            raise ValueError("S_q must equal spec_len for speculative decode")
        if self.variant is Variant.MLA_DECODE_ABSORBED and self.d_c <= 0:
            raise ValueError("d_c must be > 0 for MLA")

    @property
    def dv(self) -> int:
        return self.d_v if self.d_v else self.D

    @property
    def score_scale(self) -> float:
        return 1.0 / math.sqrt(self.D + self.d_rope)

    @property
    def s_q_eff(self) -> int:
        """Rows of one effective score problem (queries sharing one KV set)."""
        if self.variant is Variant.GQA_DECODE:
            return self.G * self.S_q
        if self.variant is Variant.MLA_DECODE_ABSORBED:
            return self.H * self.S_q
        return self.S_q

    @property
    def n_instances(self) -> int:
        """Independent score problems in the workload."""
        if self.variant is Variant.GQA_DECODE:
            return self.B * (self.H // self.G)
        if self.variant is Variant.MLA_DECODE_ABSORBED:
            return self.B
        return self.B * self.H

    def causal_bound(self, token: int) -> int:
        """Highest key index visible to the given query token (inclusive)."""
        return self.S_kv - self.S_q + token

    def row_token(self, row: int) -> int:
        """Query-token index of a row of the effective score problem.

        Decode variants stack heads row-major: row = head_local * S_q + token.
        """
        if self.variant in (Variant.GQA_DECODE, Variant.MLA_DECODE_ABSORBED):
            return row % self.S_q
        return row


@dataclass(frozen=True, slots=True)
class SoftmaxState:
    """Running (m, l, A) triple of the online softmax."""

    row_max: np.ndarray
    row_denom: np.ndarray
    accum: Matrix


def empty_state(rows: int, d_v: int) -> SoftmaxState:
    return SoftmaxState(
        row_max=np.full(rows, -np.inf),
        row_denom=np.zeros(rows),
        accum=np.zeros((rows, d_v)),
    )


def safe_exp_shift(values: np.ndarray, shift: np.ndarray) -> np.ndarray:
    """exp(values - shift) with exact zeros where shift is -inf (all-masked)."""
    masked = np.isneginf(shift)
    out = np.exp(values - np.where(masked, 0.0, shift))
    return np.where(masked, 0.0, out)


def online_softmax_update(
    state: SoftmaxState, score_block: Matrix, v_block: Matrix
) -> SoftmaxState:
    """One rescale-and-accumulate step of the streaming softmax."""
    if score_block.shape[0] != state.row_max.shape[0]:
        raise ValueError("score_block rows must match state rows")
    if score_block.shape[1] != v_block.shape[0]:
        raise ValueError("score_block cols must match v_block rows")
    m_new = np.maximum(state.row_max, score_block.max(axis=1))
    carry = safe_exp_shift(state.row_max, m_new)
    p = safe_exp_shift(score_block, m_new[:, None])
    return SoftmaxState(
        row_max=m_new,
        row_denom=carry * state.row_denom + p.sum(axis=1),
        accum=carry[:, None] * state.accum + p @ v_block,
    )


def distributed_softmax_merge(partials: list[SoftmaxState]) -> SoftmaxState:
    """Merge per-tile (m, l, A) triples; algebraically an online update."""
    if not partials:
        raise ValueError("cannot merge an empty list of partials")
    merged = partials[0]
    for part in partials[1:]:
        if part.row_max.shape != merged.row_max.shape:
            raise ValueError("partials must have equal row counts")
        m_new = np.maximum(merged.row_max, part.row_max)
        c0 = safe_exp_shift(merged.row_max, m_new)
        c1 = safe_exp_shift(part.row_max, m_new)
        merged = SoftmaxState(
            row_max=m_new,
            row_denom=c0 * merged.row_denom + c1 * part.row_denom,
            accum=c0[:, None] * merged.accum + c1[:, None] * part.accum,
        )
    return merged


def finalize(state: SoftmaxState) -> Matrix:
    denom = np.where(state.row_denom == 0.0, 1.0, state.row_denom)
    return state.accum / denom[:, None]


def reference_gemm(a: Matrix, b: Matrix) -> Matrix:
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ValueError(f"shape mismatch: {a.shape} @ {b.shape}")
    return a @ b


def absorb_mla_weights(w_uq: Matrix, w_uk: Matrix) -> Matrix:
    """Fold the key up-projection into the query projection: W_uq @ W_uk^T.

    Both operands map their input rank onto the shared head dimension, so
    (c_q @ W_uqk) @ c_kv^T equals (c_q @ W_uq) @ (c_kv @ W_uk)^T.
    """
    if w_uq.ndim != 2 or w_uk.ndim != 2 or w_uq.shape[1] != w_uk.shape[1]:
        raise ValueError(f"head dims disagree: {w_uq.shape} vs {w_uk.shape}")
    return w_uq @ w_uk.T


def masked_softmax_matmul(scores: Matrix, v: Matrix) -> Matrix:
    """Monolithic softmax(scores) @ v with -inf-aware normalization."""
    m = scores.max(axis=1)
    p = safe_exp_shift(scores, m[:, None])
    denom = p.sum(axis=1)
    denom = np.where(denom == 0.0, 1.0, denom)
    return (p / denom[:, None]) @ v


def causal_mask(workload: AttentionWorkload, rows: int) -> np.ndarray | None:
    """Boolean (rows x S_kv) visibility mask, or None when nothing is masked."""
    if not workload.causal:
        return None
    cols = np.arange(workload.S_kv)
    bounds = np.array(
        [workload.causal_bound(workload.row_token(r)) for r in range(rows)]
    )
    return cols[None, :] <= bounds[:, None]


def reference_attention(workload: AttentionWorkload, tensors: dict[str, Matrix]) -> np.ndarray:
    """Exact monolithic attention for every variant; output (B, H, S_q, d_v).

    Expected tensors:
      MHA variants: Q (B,H,S_q,D), K (B,H,S_kv,D), V (B,H,S_kv,d_v)
      GQA:          Q (B,H,S_q,D), K/V (B,H//G,S_kv,...)
      MLA (unabsorbed inputs): c_q (B,S_q,q_rank), c_kv (B,S_kv,d_c),
          k_rope (B,S_kv,d_rope), W_uq/W_uk (H,*,D), W_uv (H,d_c,d_v),
          W_qr (H,q_rank,d_rope)
    No output projection is applied; heads are returned stacked.
    """
    wl = workload
    scale = wl.score_scale
    out = np.zeros((wl.B, wl.H, wl.S_q, wl.dv))
    mask = causal_mask(wl, wl.S_q) if wl.causal else None

    if wl.variant is Variant.MLA_DECODE_ABSORBED:
        c_q, c_kv = tensors["c_q"], tensors["c_kv"]
        k_rope = tensors.get("k_rope")
        for b in range(wl.B):
            for h in range(wl.H):
                q = c_q[b] @ tensors["W_uq"][h]
                k = c_kv[b] @ tensors["W_uk"][h]
                scores = q @ k.T
                if wl.d_rope:
                    scores = scores + (c_q[b] @ tensors["W_qr"][h]) @ k_rope[b].T
                scores = scores * scale
                if mask is not None:
                    scores = np.where(mask, scores, -np.inf)
                v = c_kv[b] @ tensors["W_uv"][h]
                out[b, h] = masked_softmax_matmul(scores, v)
        return out

    q_all, k_all, v_all = tensors["Q"], tensors["K"], tensors["V"]
    kv_group = wl.G if wl.variant is Variant.GQA_DECODE else 1
    for b in range(wl.B):
        for h in range(wl.H):
            k = k_all[b, h // kv_group]
            v = v_all[b, h // kv_group]
            scores = (q_all[b, h] @ k.T) * scale
            if mask is not None:
                scores = np.where(mask, scores, -np.inf)
            out[b, h] = masked_softmax_matmul(scores, v)
    return out


def rope(x: Matrix, positions: np.ndarray, base: float = 10000.0) -> Matrix:
    """Standard rotary embedding on even/odd feature pairs."""
    if x.shape[0] != positions.shape[0]:
        raise ValueError("one position per row required")
    d = x.shape[1]
    if d % 2 != 0:
        raise ValueError("feature dim must be even for rope")
    inv = base ** (-np.arange(0, d, 2) / d)
    ang = positions[:, None] * inv[None, :]
    cos, sin = np.cos(ang), np.sin(ang)
    out = np.empty_like(x)
    out[:, 0::2] = x[:, 0::2] * cos - x[:, 1::2] * sin
    out[:, 1::2] = x[:, 0::2] * sin + x[:, 1::2] * cos
    return out


def rmsnorm(x: Matrix, weight: np.ndarray, eps: float = 1e-6) -> Matrix:
    scale = 1.0 / np.sqrt((x * x).mean(axis=-1, keepdims=True) + eps)
    return x * scale * weight


def with_defaults(workload: AttentionWorkload, **kwargs) -> AttentionWorkload:
    """Convenience for tests: derive a modified workload."""
    return replace(workload, **kwargs)
