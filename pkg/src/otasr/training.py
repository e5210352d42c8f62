"""Composite objective, optimizer, training loop, checkpoint averaging.

Four training modes mirror the ablation grid:

  baseline      CTC only, predictions from the plain encoder output
  adapter_only  CTC only, predictions from the adapter-fused features
  no_adapter    CTC (plain head) + alignment/transport losses
  transfer      CTC (fused head) + alignment/transport losses

In the two OT-free modes the trade-off weight acts as 1, so the logged total
equals the CTC term exactly. In the OT modes the total is

    total = lambda * ctc + (1 - lambda) * w * (align + eot)

with the per-utterance CTC term normalized by target length so the trade-off
is length-independent. The transport coupling is solved outside the graph and
enters as a constant; gradients reach the encoder through the cost matrix and
the projected features only.
"""

from __future__ import annotations

import os
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from . import arrayio, ot
from .ctc import ctc_loss, edit_distance, greedy_decode, min_frames
from .encoders import EncoderConfig, Model, checkpoint_arrays, model_from_arrays, subsampled_length

MODES = ("baseline", "adapter_only", "no_adapter", "transfer")

GRAD_CLIP = 5.0  # global-norm cap

ADAM_BETA1 = 0.9
ADAM_BETA2 = 0.999
ADAM_EPS = 1e-8


def uses_adapter(mode: str) -> bool:
    return mode in ("adapter_only", "transfer")


def uses_ot(mode: str) -> bool:
    return mode in ("no_adapter", "transfer")


@dataclass
class HyperParams:
    alpha: float = 0.2
    lam: float = 0.3
    w: float = 1.0
    s: float = 1.0
    base_lr: float = 1e-3
    warmup_steps: int = 200
    epochs: int = 40
    average_last: int = 5
    batch_size: int = 4
    sinkhorn_tol: float = 1e-6
    sinkhorn_max_iter: int = 1000
    seed: int = 0

    def __post_init__(self):
        if not self.alpha > 0:
            raise ValueError("alpha must be positive")
        if not 0.0 <= self.lam <= 1.0:
            raise ValueError("lambda must be in [0, 1]")
        if self.warmup_steps < 1:
            raise ValueError("warmup_steps must be >= 1")
        if self.epochs < 0:
            raise ValueError("epochs must be >= 0")
        if self.average_last < 1:
            raise ValueError("average_last must be >= 1")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")


@dataclass
class LossBreakdown:
    ctc: float
    align: float
    eot: float
    total: float


@dataclass
class EpochRecord:
    epoch: int
    mode: str
    loss: LossBreakdown
    dev_cer: float
    lr: float
    skipped: int = 0


def effective_lambda(mode: str, hp: HyperParams) -> float:
    return hp.lam if uses_ot(mode) else 1.0


def combine_terms(ctc_v: float, align_v: float, eot_v: float, mode: str,
                  hp: HyperParams) -> LossBreakdown:
    lam = effective_lambda(mode, hp)
    total = lam * ctc_v + (1.0 - lam) * hp.w * (align_v + eot_v)
    return LossBreakdown(ctc=ctc_v, align=align_v, eot=eot_v, total=total)


def total_loss(batch, model: Model, hp: HyperParams, mode: str, nodes=None,
               coupling_overrides=None):
    """Mean loss over a batch of utterances.

    Returns (LossBreakdown, root_node, skipped, couplings). `root_node` is
    None when every utterance was infeasible. Infeasible utterances (target
    cannot fit in the subsampled frame count) are skipped and counted, never
    truncated. `coupling_overrides` maps utterance id -> Coupling and
    bypasses the solver; it exists so a finite-difference harness can hold
    the coupling fixed while probing parameters.
    """
    if mode not in MODES:
        raise ValueError(f"unknown mode {mode!r}; valid modes: {', '.join(MODES)}")
    if not batch:
        raise ValueError("total_loss: empty batch")
    if nodes is None:
        nodes = model._nodes(None)

    lam = effective_lambda(mode, hp)
    per_utt = []
    sums = {"ctc": 0.0, "align": 0.0, "eot": 0.0}
    skipped = 0
    couplings = {}

    for utt in batch:
        t_a = subsampled_length(utt.features.shape[0])
        if t_a < min_frames(utt.tokens):
            skipped += 1
            continue

        h_tilde, h_teacher = model.encode_acoustic(utt.features, nodes)
        feats = (model.adapter_fuse(h_tilde, h_teacher, hp.s, nodes)
                 if uses_adapter(mode) else h_tilde)
        log_probs = model.predict(feats, nodes)
        ctc_node = ctc_loss(log_probs, utt.tokens)
        sums["ctc"] += float(ctc_node.value[0, 0])

        if uses_ot(mode):
            z = ad.constant(model.encode_text(utt.tokens), name="teacher-out")
            cost = ot.cosine_cost(z, h_teacher)
            if coupling_overrides is not None and utt.utt_id in coupling_overrides:
                coupling = coupling_overrides[utt.utt_id]
            else:
                coupling = ot.sinkhorn(
                    cost.value, hp.alpha,
                    max_iter=hp.sinkhorn_max_iter, tol=hp.sinkhorn_tol,
                ).coupling
            couplings[utt.utt_id] = coupling
            gamma_const = ad.constant(coupling.gamma, name="coupling")
            ent = ot.entropy(coupling.gamma)
            eot_node = ad.offset(ad.reduce_sum(ad.mul(gamma_const, cost)),
                                 -hp.alpha * ent)
            align_node = ot.alignment_loss(z, ot.project(coupling, h_teacher))
            sums["align"] += float(align_node.value[0, 0])
            sums["eot"] += float(eot_node.value[0, 0])
            utt_total = ad.add(
                ad.scale(ctc_node, lam),
                ad.scale(ad.add(align_node, eot_node), (1.0 - lam) * hp.w),
            )
        else:
            utt_total = ctc_node
        per_utt.append(utt_total)

    n = len(per_utt)
    if n == 0:
        return combine_terms(0.0, 0.0, 0.0, mode, hp), None, skipped, couplings
    root = per_utt[0]
    for node in per_utt[1:]:
        root = ad.add(root, node)
    root = ad.scale(root, 1.0 / n)
    breakdown = combine_terms(sums["ctc"] / n, sums["align"] / n,
                              sums["eot"] / n, mode, hp)
    return breakdown, root, skipped, couplings


def lr_schedule(step: int, hp: HyperParams) -> float:
    """Linear warm-up to base_lr, then inverse-square-root decay."""
    if step < 1:
        raise ValueError("lr_schedule: step counts from 1")
    return hp.base_lr * min(step / hp.warmup_steps,
                            np.sqrt(hp.warmup_steps / step))


def adam_init(params) -> dict:
    return {
        "t": 0,
        "m": {k: np.zeros_like(v) for k, v in params.items()},
        "v": {k: np.zeros_like(v) for k, v in params.items()},
    }


def adam_step(params, grads, state, lr: float):
    """One Adam update; returns (new_params, state). Rebinds, never mutates."""
    state["t"] += 1
    t = state["t"]
    bc1 = 1.0 - ADAM_BETA1 ** t
    bc2 = 1.0 - ADAM_BETA2 ** t
    new_params = params.__class__()
    for name, p in params.items():
        g = grads[name]
        if g.shape != p.shape:
            raise ValueError(f"adam_step: gradient shape {g.shape} does not "
                             f"match parameter {name} {p.shape}")
        if not np.isfinite(g).all():
            raise ValueError(f"adam_step: non-finite gradient for {name}")
        m = ADAM_BETA1 * state["m"][name] + (1.0 - ADAM_BETA1) * g
        v = ADAM_BETA2 * state["v"][name] + (1.0 - ADAM_BETA2) * (g * g)
        state["m"][name] = m
        state["v"][name] = v
        new_params[name] = p - lr * (m / bc1) / (np.sqrt(v / bc2) + ADAM_EPS)
    return new_params, state


def clip_gradients(grads, cap: float = GRAD_CLIP):
    """Scale all gradients so the global L2 norm is at most `cap`."""
    norm = float(np.sqrt(sum(float((g * g).sum()) for g in grads.values())))
    if norm > cap:
        factor = cap / norm
        grads = {k: g * factor for k, g in grads.items()}
    return grads, norm


def average_arrays(dicts):
    """Per-key arithmetic mean, centered on the first dict for exactness.

    mean = x0 + sum(xi - x0)/k, which returns x0 bit-for-bit when all inputs
    are identical (the frozen-teacher and meta entries rely on this).
    """
    if not dicts:
        raise ValueError("average_arrays: need at least one set of arrays")
    first = dicts[0]
    keys = list(first.keys())
    for i, d in enumerate(dicts[1:], start=1):
        if set(d.keys()) != set(keys):
            raise ValueError(f"checkpoint {i} has different array names")
    out = first.__class__()
    k = len(dicts)
    for key in keys:
        base = first[key]
        for i, d in enumerate(dicts[1:], start=1):
            if d[key].shape != base.shape:
                raise ValueError(
                    f"array {key!r} has shape {d[key].shape} in checkpoint {i}, "
                    f"expected {base.shape}"
                )
        delta = np.zeros_like(base)
        for d in dicts[1:]:
            delta += d[key] - base
        out[key] = base + delta / k
    return out


def average_checkpoints(paths):
    """Load checkpoint files and return the averaged model."""
    if not paths:
        raise ValueError("average_checkpoints: empty path list")
    averaged = average_arrays([arrayio.load_arrays(p) for p in paths])
    model, _ = model_from_arrays(averaged)
    return model


def evaluate(model: Model, utts, use_adapter: bool) -> float:
    """Corpus-level CER under greedy decoding (pure inference path)."""
    edits = 0
    ref_len = 0
    for utt in utts:
        nodes = model._nodes(None)
        h_tilde, h_teacher = model.encode_acoustic(utt.features, nodes)
        feats = (model.adapter_fuse(h_tilde, h_teacher, nodes=nodes)
                 if use_adapter else h_tilde)
        log_probs = model.predict(feats, nodes).value
        hyp = greedy_decode(log_probs)
        edits += edit_distance(hyp, utt.tokens)
        ref_len += len(utt.tokens)
    return edits / ref_len if ref_len else 0.0


def _batches(utts, batch_size: int):
    ordered = sorted(utts, key=lambda u: (u.features.shape[0], u.utt_id))
    return [ordered[i:i + batch_size] for i in range(0, len(ordered), batch_size)]


def train(splits, encoder_cfg: EncoderConfig, hp: HyperParams, mode: str,
          checkpoint_dir=None):
    """Run the full loop; returns (final averaged model, history).

    Deterministic given the seed. Per-epoch checkpoints are written under
    `checkpoint_dir` when given, otherwise kept in memory; either way the
    returned model averages the last `average_last` epoch snapshots.
    """
    if mode not in MODES:
        raise ValueError(f"unknown mode {mode!r}; valid modes: {', '.join(MODES)}")
    model = Model(encoder_cfg, seed=hp.seed)
    if hp.epochs == 0:
        return model, []

    shuffle_rng = np.random.default_rng(np.random.SeedSequence([hp.seed, 17]))
    batches = _batches(splits["train"], hp.batch_size)
    state = adam_init(model.params)
    history: list[EpochRecord] = []
    snapshots = []  # (path or arrays) for the last average_last epochs
    step = 0
    lr = 0.0

    for epoch in range(1, hp.epochs + 1):
        order = shuffle_rng.permutation(len(batches))
        sums = {"ctc": 0.0, "align": 0.0, "eot": 0.0}
        seen = 0
        skipped = 0
        for bi in order:
            batch = batches[bi]
            nodes = model.parameter_nodes()
            breakdown, root, batch_skipped, _ = total_loss(
                batch, model, hp, mode, nodes=nodes)
            skipped += batch_skipped
            n_used = len(batch) - batch_skipped
            if root is None:
                continue
            gmap = ad.backward(root)
            grads = {name: gmap.of(node) for name, node in nodes.items()}
            grads, _ = clip_gradients(grads)
            step += 1
            lr = lr_schedule(step, hp)
            model.params, state = adam_step(model.params, grads, state, lr)
            sums["ctc"] += breakdown.ctc * n_used
            sums["align"] += breakdown.align * n_used
            sums["eot"] += breakdown.eot * n_used
            seen += n_used

        denom = max(1, seen)
        epoch_loss = combine_terms(sums["ctc"] / denom, sums["align"] / denom,
                                   sums["eot"] / denom, mode, hp)
        dev_cer = evaluate(model, splits["dev"], uses_adapter(mode))
        history.append(EpochRecord(epoch=epoch, mode=mode, loss=epoch_loss,
                                   dev_cer=dev_cer, lr=lr, skipped=skipped))

        arrays = checkpoint_arrays(model, uses_adapter(mode), hp.s)
        if checkpoint_dir is not None:
            path = os.path.join(checkpoint_dir, f"ckpt-epoch-{epoch:03d}.arr")
            arrayio.save_arrays(path, arrays)
            snapshots.append(path)
        else:
            snapshots.append(arrays)
        if len(snapshots) > hp.average_last:
            snapshots.pop(0)

    if checkpoint_dir is not None:
        final_model = average_checkpoints(snapshots)
    else:
        final_model, _ = model_from_arrays(average_arrays(snapshots))
    return final_model, history
