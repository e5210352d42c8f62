"""CTC loss, greedy decoding, and character error rate.

The loss is the standard forward dynamic program over the blank-extended
label sequence [B, y1, B, y2, ..., yL, B], run entirely in log space. It is
expressed through autodiff ops (gathers and shifts become constant selector
matrices, the DP recursion becomes logaddexp chains), so the gradient w.r.t.
the log-probability grid falls out of the generic backward pass — there is no
hand-written backward to get wrong.

Reserved token ids: BLANK=0, CLS=1, SEP=2. Real symbols start at NUM_RESERVED.
"""

from __future__ import annotations

import numpy as np

from . import autodiff as ad
from .autodiff import NEG_INF

BLANK = 0
CLS = 1
SEP = 2
NUM_RESERVED = 3


def repeats(target: list[int]) -> int:
    return sum(1 for i in range(1, len(target)) if target[i] == target[i - 1])


def min_frames(target: list[int]) -> int:
    """Smallest T_a that admits any path collapsing to `target`."""
    return len(target) + repeats(target)


def _validate_target(target: list[int], vocab_total: int) -> None:
    for pos, t in enumerate(target):
        if not 0 <= t < vocab_total:
            raise ValueError(
                f"ctc_loss: target id {t} at position {pos} outside vocabulary "
                f"of size {vocab_total}"
            )
        if t == BLANK:
            raise ValueError(f"ctc_loss: target contains BLANK at position {pos}")


def ctc_loss(log_probs: ad.Node, target: list[int]) -> ad.Node:
    """-log P(target | log_probs) marginalized over all collapsing paths.

    log_probs: T_a x V grid node (rows are per-frame log distributions).
    Raises when the target cannot fit in T_a frames.
    """
    t_a, vocab = log_probs.value.shape
    target = [int(t) for t in target]
    _validate_target(target, vocab)
    need = min_frames(target)
    if t_a < need:
        raise ValueError(
            f"ctc_loss: target needs at least {need} frames but grid has T_a={t_a}"
        )

    # Extended labels with blanks interleaved: S = 2L+1 states.
    ext = [BLANK]
    for t in target:
        ext.extend((t, BLANK))
    s = len(ext)

    # Gather per-frame log-probs of the extended labels via a 0/1 selector:
    # (1 x V) @ (V x S) picks column ext[k] into state k.
    sel = np.zeros((vocab, s))
    for k, label in enumerate(ext):
        sel[label, k] = 1.0
    sel_n = ad.constant(sel, name="ctc-gather")

    # State-shift selectors. In log space a matmul by these moves entries
    # right by 1 or 2 states; vacated states are re-masked to NEG_INF since
    # the matmul fills them with 0.
    shift1 = np.zeros((s, s))
    for k in range(s - 1):
        shift1[k, k + 1] = 1.0
    edge1 = np.full((1, s), 0.0)
    edge1[0, 0] = NEG_INF

    # The skip transition (s-2 -> s) is only legal into a non-blank state
    # whose label differs from the one two states back.
    shift2 = np.zeros((s, s))
    for k in range(s - 2):
        shift2[k, k + 2] = 1.0
    edge2 = np.full((1, s), NEG_INF)
    for k in range(2, s):
        if ext[k] != BLANK and ext[k] != ext[k - 2]:
            edge2[0, k] = 0.0

    shift1_n = ad.constant(shift1, name="ctc-shift1")
    edge1_n = ad.constant(edge1)
    shift2_n = ad.constant(shift2, name="ctc-shift2")
    edge2_n = ad.constant(edge2)

    # Paths may start in state 0 (blank) or state 1 (first label).
    init = np.full((1, s), NEG_INF)
    init[0, 0] = 0.0
    if s > 1:
        init[0, 1] = 0.0

    emit0 = ad.matmul(ad.row_slice(log_probs, 0, 1), sel_n)
    alpha = ad.add(emit0, ad.constant(init))
    for frame in range(1, t_a):
        stay = alpha
        step1 = ad.add(ad.matmul(alpha, shift1_n), edge1_n)
        moved = ad.logaddexp(stay, step1)
        if s > 2:
            step2 = ad.add(ad.matmul(alpha, shift2_n), edge2_n)
            moved = ad.logaddexp(moved, step2)
        emit = ad.matmul(ad.row_slice(log_probs, frame, frame + 1), sel_n)
        alpha = ad.add(emit, moved)

    # Total likelihood ends in the last blank or the last label state.
    alpha_col = ad.transpose(alpha)  # S x 1
    if s == 1:
        ll = ad.row_slice(alpha_col, 0, 1)
    else:
        last_blank = ad.row_slice(alpha_col, s - 1, s)
        last_label = ad.row_slice(alpha_col, s - 2, s - 1)
        ll = ad.logaddexp(last_blank, last_label)
    return ad.scale(ll, -1.0)


def greedy_decode(log_probs: np.ndarray) -> list[int]:
    """Per-frame argmax, collapse consecutive repeats, drop blanks."""
    frames = np.asarray(log_probs).argmax(axis=1)
    out: list[int] = []
    prev = -1
    for f in frames:
        f = int(f)
        if f != prev and f != BLANK:
            out.append(f)
        prev = f
    return out


def edit_distance(hyp: list[int], ref: list[int]) -> int:
    """Levenshtein distance with unit insert/delete/substitute costs."""
    # Two-row DP.
    prev = list(range(len(ref) + 1))
    for i, h in enumerate(hyp, start=1):
        cur = [i] + [0] * len(ref)
        for j, r in enumerate(ref, start=1):
            sub = prev[j - 1] + (0 if h == r else 1)
            cur[j] = min(prev[j] + 1, cur[j - 1] + 1, sub)
        prev = cur
    return prev[-1]


def cer(hyp: list[int], ref: list[int]) -> float:
    """Edit distance divided by reference length."""
    if len(ref) == 0:
        raise ValueError("cer: reference is empty")
    return edit_distance(hyp, ref) / len(ref)
