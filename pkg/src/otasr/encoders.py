"""Student acoustic encoder, frozen text teacher, adapter fusion, and heads.

The student is a miniature conformer: two stride-2 kernel-3 1-D convolutions
for 4x subsampling, sinusoidal positional encoding, then `num_blocks` macaron
blocks (half-step FFN, single-head self-attention, depthwise convolution,
half-step FFN, trailing layer-norm — each module pre-normalized). Two linear
heads hang off it: FC1 to vocabulary logits (shared by the fused and unfused
prediction paths) and FC2 into teacher feature space. The adapter (FC3 plus
two layer-norms) folds the teacher-space features back into the acoustic
representation with a residual scaled by `s`.

The teacher is a randomly initialized, permanently frozen token embedding
plus `teacher_layers` post-norm transformer layers. It runs in plain numpy,
outside the autodiff graph, so its parameters can never receive gradients;
every call bumps an instrumentation counter so inference paths can prove they
never consulted it.

Convolutions are expressed as constant selector matrices times the sequence,
which keeps every trainable op inside the small core op set.
"""

from __future__ import annotations

from collections import OrderedDict
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from . import arrayio
from .ctc import BLANK, CLS, SEP, NUM_RESERVED

MIN_FRAMES = 8  # two stride-2 kernel-3 convolutions need this much extent


@dataclass
class EncoderConfig:
    num_blocks: int = 2
    model_dim: int = 16
    ffn_dim: int = 32
    conv_kernel: int = 3
    teacher_dim: int = 24
    teacher_layers: int = 2
    vocab: int = 30  # real symbols, excluding the reserved ids
    adapter_scale: float = 1.0
    input_dim: int = 16

    def __post_init__(self):
        if self.conv_kernel % 2 != 1 or self.conv_kernel < 1:
            raise ValueError(f"conv_kernel must be odd, got {self.conv_kernel}")
        for field in ("num_blocks", "model_dim", "ffn_dim", "teacher_dim",
                      "teacher_layers", "vocab", "input_dim"):
            if getattr(self, field) <= 0:
                raise ValueError(f"{field} must be positive")
        if self.adapter_scale < 0:
            raise ValueError("adapter_scale must be >= 0")

    @property
    def vocab_total(self) -> int:
        return self.vocab + NUM_RESERVED


def subsampled_length(T: int) -> int:
    """Output length of the two stride-2 kernel-3 convolutions."""
    t1 = (T - 3) // 2 + 1
    return (t1 - 3) // 2 + 1


def sinusoidal_pe(T: int, d: int) -> np.ndarray:
    pe = np.zeros((T, d))
    pos = np.arange(T, dtype=np.float64)[:, None]
    idx = np.arange(0, d, 2, dtype=np.float64)
    args = pos * np.exp(-np.log(10000.0) * idx / d)[None, :]
    pe[:, 0::2] = np.sin(args)
    pe[:, 1::2] = np.cos(args)[:, : d // 2]
    return pe


def _glorot(rng, fan_in: int, fan_out: int) -> np.ndarray:
    limit = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=(fan_in, fan_out))


def _strided_selector(t_out: int, t_in: int, offset: int) -> np.ndarray:
    """(t_out x t_in) 0/1 matrix picking input row 2*t + offset for output t."""
    sel = np.zeros((t_out, t_in))
    for t in range(t_out):
        sel[t, 2 * t + offset] = 1.0
    return sel


def _shift_selector(t: int, offset: int) -> np.ndarray:
    """(t x t) 0/1 matrix sending row index r to r + offset (zero padded)."""
    sel = np.zeros((t, t))
    for r in range(t):
        src = r + offset
        if 0 <= src < t:
            sel[r, src] = 1.0
    return sel


def _np_softmax_rows(x: np.ndarray) -> np.ndarray:
    e = np.exp(x - x.max(axis=1, keepdims=True))
    return e / e.sum(axis=1, keepdims=True)


def _np_layer_norm(x: np.ndarray, g: np.ndarray, b: np.ndarray) -> np.ndarray:
    mu = x.mean(axis=1, keepdims=True)
    var = ((x - mu) ** 2).mean(axis=1, keepdims=True)
    return (x - mu) / np.sqrt(var + 1e-5) * g + b


class Model:
    """Trainable student parameters plus the frozen teacher.

    `params` maps name -> array for every trainable tensor. Forward methods
    take a `nodes` dict (name -> graph node); passing None wraps the current
    parameters as constants, which is the inference path.
    """

    def __init__(self, config: EncoderConfig, seed: int = 0):
        self.config = config
        student_ss, teacher_ss = np.random.SeedSequence(seed).spawn(2)
        self.params = self._init_student(np.random.default_rng(student_ss))
        self.teacher = self._init_teacher(np.random.default_rng(teacher_ss))
        self.teacher_calls = 0
        self._teacher_cache: dict[tuple, np.ndarray] = {}

    # ------------------------------------------------------------------
    # initialization
    # ------------------------------------------------------------------

    def _init_student(self, rng) -> "OrderedDict[str, np.ndarray]":
        cfg = self.config
        d, da, ff, vt, dt = (cfg.input_dim, cfg.model_dim, cfg.ffn_dim,
                             cfg.vocab_total, cfg.teacher_dim)
        p: "OrderedDict[str, np.ndarray]" = OrderedDict()

        for tap in range(3):
            p[f"sub.conv1.w{tap}"] = _glorot(rng, d, da) / np.sqrt(3.0)
            p[f"sub.conv2.w{tap}"] = _glorot(rng, da, da) / np.sqrt(3.0)
        p["sub.conv1.b"] = np.zeros((1, da))
        p["sub.conv2.b"] = np.zeros((1, da))
        p["sub.lin.w"] = _glorot(rng, da, da)
        p["sub.lin.b"] = np.zeros((1, da))

        def ln(name):
            p[f"{name}.g"] = np.ones((1, da))
            p[f"{name}.b"] = np.zeros((1, da))

        for l in range(cfg.num_blocks):
            pre = f"block{l}"
            for ffn in ("ffn1", "ffn2"):
                ln(f"{pre}.{ffn}.ln")
                p[f"{pre}.{ffn}.w1"] = _glorot(rng, da, ff)
                p[f"{pre}.{ffn}.b1"] = np.zeros((1, ff))
                p[f"{pre}.{ffn}.w2"] = _glorot(rng, ff, da)
                p[f"{pre}.{ffn}.b2"] = np.zeros((1, da))
            ln(f"{pre}.attn.ln")
            for mat in ("wq", "wk", "wv", "wo"):
                p[f"{pre}.attn.{mat}"] = _glorot(rng, da, da)
            for bias in ("bq", "bk", "bv", "bo"):
                p[f"{pre}.attn.{bias}"] = np.zeros((1, da))
            ln(f"{pre}.conv.ln")
            for tap in range(cfg.conv_kernel):
                p[f"{pre}.conv.dw{tap}"] = rng.normal(
                    0.0, 1.0 / np.sqrt(cfg.conv_kernel), size=(1, da)
                )
            p[f"{pre}.conv.dwb"] = np.zeros((1, da))
            p[f"{pre}.conv.pw.w"] = _glorot(rng, da, da)
            p[f"{pre}.conv.pw.b"] = np.zeros((1, da))
            ln(f"{pre}.out_ln")

        p["fc1.w"] = _glorot(rng, da, vt)
        p["fc1.b"] = np.zeros((1, vt))
        p["fc2.w"] = _glorot(rng, da, dt)
        p["fc2.b"] = np.zeros((1, dt))
        p["fc3.w"] = _glorot(rng, dt, da)
        p["fc3.b"] = np.zeros((1, da))
        p["adapter.ln_in.g"] = np.ones((1, dt))
        p["adapter.ln_in.b"] = np.zeros((1, dt))
        # Zero gain on the adapter's output norm: the fused features start
        # exactly equal to the encoder output, and the cross-modal branch
        # only contributes once training grows this gain (residual branches
        # that open gradually train more stably than ones injecting noise
        # from step one).
        p["adapter.ln_out.g"] = np.zeros((1, da))
        p["adapter.ln_out.b"] = np.zeros((1, da))
        return p

    def _init_teacher(self, rng) -> "OrderedDict[str, np.ndarray]":
        cfg = self.config
        dt, ff = cfg.teacher_dim, 2 * cfg.teacher_dim
        t: "OrderedDict[str, np.ndarray]" = OrderedDict()
        t["embed"] = rng.normal(0.0, 1.0, size=(cfg.vocab_total, dt))
        for i in range(cfg.teacher_layers):
            pre = f"layer{i}"
            for mat in ("wq", "wk", "wv", "wo"):
                t[f"{pre}.attn.{mat}"] = _glorot(rng, dt, dt)
            for bias in ("bq", "bk", "bv", "bo"):
                t[f"{pre}.attn.{bias}"] = np.zeros((1, dt))
            for ln in ("ln1", "ln2"):
                t[f"{pre}.{ln}.g"] = np.ones((1, dt))
                t[f"{pre}.{ln}.b"] = np.zeros((1, dt))
            t[f"{pre}.ffn.w1"] = _glorot(rng, dt, ff)
            t[f"{pre}.ffn.b1"] = np.zeros((1, ff))
            t[f"{pre}.ffn.w2"] = _glorot(rng, ff, dt)
            t[f"{pre}.ffn.b2"] = np.zeros((1, dt))
        return t

    # ------------------------------------------------------------------
    # graph plumbing
    # ------------------------------------------------------------------

    def parameter_nodes(self) -> dict[str, ad.Node]:
        """Fresh trainable leaf nodes over the current parameter arrays."""
        return {k: ad.parameter(v, name=k) for k, v in self.params.items()}

    def _nodes(self, nodes):
        if nodes is not None:
            return nodes
        return {k: ad.constant(v, name=k) for k, v in self.params.items()}

    # ------------------------------------------------------------------
    # student forward
    # ------------------------------------------------------------------

    def subsample(self, X: np.ndarray, nodes=None) -> ad.Node:
        """Two stride-2 convolutions + linear + positional encoding."""
        nodes = self._nodes(nodes)
        X = np.asarray(X, dtype=np.float64)
        T = X.shape[0]
        if T < MIN_FRAMES:
            raise ValueError(
                f"subsample: input has {T} frames, below the minimum {MIN_FRAMES}"
            )
        t1 = (T - 3) // 2 + 1
        t2 = (t1 - 3) // 2 + 1

        # First conv: the input is data, so strided windows are plain slices.
        acc = None
        for tap in range(3):
            win = ad.constant(np.ascontiguousarray(X[tap : tap + 2 * t1 : 2]))
            term = ad.matmul(win, nodes[f"sub.conv1.w{tap}"])
            acc = term if acc is None else ad.add(acc, term)
        h = ad.relu(ad.add_rowvec(acc, nodes["sub.conv1.b"]))

        # Second conv operates on a graph node; windows become selectors.
        acc = None
        for tap in range(3):
            sel = ad.constant(_strided_selector(t2, t1, tap))
            term = ad.matmul(ad.matmul(sel, h), nodes[f"sub.conv2.w{tap}"])
            acc = term if acc is None else ad.add(acc, term)
        h = ad.relu(ad.add_rowvec(acc, nodes["sub.conv2.b"]))

        h = ad.add_rowvec(ad.matmul(h, nodes["sub.lin.w"]), nodes["sub.lin.b"])
        return ad.add(h, ad.constant(sinusoidal_pe(t2, self.config.model_dim)))

    def _ffn(self, x, prefix, nodes):
        h = ad.layer_norm(x, nodes[f"{prefix}.ln.g"], nodes[f"{prefix}.ln.b"])
        h = ad.add_rowvec(ad.matmul(h, nodes[f"{prefix}.w1"]), nodes[f"{prefix}.b1"])
        h = ad.swish(h)
        return ad.add_rowvec(ad.matmul(h, nodes[f"{prefix}.w2"]), nodes[f"{prefix}.b2"])

    def _attention(self, x, prefix, nodes):
        h = ad.layer_norm(x, nodes[f"{prefix}.ln.g"], nodes[f"{prefix}.ln.b"])
        q = ad.add_rowvec(ad.matmul(h, nodes[f"{prefix}.wq"]), nodes[f"{prefix}.bq"])
        k = ad.add_rowvec(ad.matmul(h, nodes[f"{prefix}.wk"]), nodes[f"{prefix}.bk"])
        v = ad.add_rowvec(ad.matmul(h, nodes[f"{prefix}.wv"]), nodes[f"{prefix}.bv"])
        scores = ad.scale(ad.matmul(q, ad.transpose(k)),
                          1.0 / np.sqrt(self.config.model_dim))
        ctx = ad.matmul(ad.row_softmax(scores), v)
        return ad.add_rowvec(ad.matmul(ctx, nodes[f"{prefix}.wo"]),
                             nodes[f"{prefix}.bo"])

    def _conv_module(self, x, prefix, nodes):
        h = ad.layer_norm(x, nodes[f"{prefix}.ln.g"], nodes[f"{prefix}.ln.b"])
        t = x.value.shape[0]
        half = self.config.conv_kernel // 2
        acc = None
        for tap in range(self.config.conv_kernel):
            shifted = ad.matmul(ad.constant(_shift_selector(t, tap - half)), h)
            term = ad.mul_rowvec(shifted, nodes[f"{prefix}.dw{tap}"])
            acc = term if acc is None else ad.add(acc, term)
        h = ad.swish(ad.add_rowvec(acc, nodes[f"{prefix}.dwb"]))
        return ad.add_rowvec(ad.matmul(h, nodes[f"{prefix}.pw.w"]),
                             nodes[f"{prefix}.pw.b"])

    def conformer_block(self, h_in: ad.Node, block: int, nodes=None) -> ad.Node:
        """Macaron cascade: ½FFN, attention, conv, ½FFN residuals + final LN."""
        nodes = self._nodes(nodes)
        pre = f"block{block}"
        x = ad.add(h_in, ad.scale(self._ffn(h_in, f"{pre}.ffn1", nodes), 0.5))
        x = ad.add(x, self._attention(x, f"{pre}.attn", nodes))
        x = ad.add(x, self._conv_module(x, f"{pre}.conv", nodes))
        x = ad.add(x, ad.scale(self._ffn(x, f"{pre}.ffn2", nodes), 0.5))
        return ad.layer_norm(x, nodes[f"{pre}.out_ln.g"], nodes[f"{pre}.out_ln.b"])

    def encode_acoustic(self, X: np.ndarray, nodes=None) -> tuple[ad.Node, ad.Node]:
        """Full student pass: (H_tilde in model space, H in teacher space)."""
        nodes = self._nodes(nodes)
        h = self.subsample(X, nodes)
        for l in range(self.config.num_blocks):
            h = self.conformer_block(h, l, nodes)
        h_teacher = ad.add_rowvec(ad.matmul(h, nodes["fc2.w"]), nodes["fc2.b"])
        return h, h_teacher

    def adapter_fuse(self, h_tilde: ad.Node, h: ad.Node, s: float | None = None,
                     nodes=None) -> ad.Node:
        """Residual fusion: h_tilde + s * LN(FC3(LN(h)))."""
        nodes = self._nodes(nodes)
        if s is None:
            s = self.config.adapter_scale
        inner = ad.layer_norm(h, nodes["adapter.ln_in.g"], nodes["adapter.ln_in.b"])
        hhat = ad.add_rowvec(ad.matmul(inner, nodes["fc3.w"]), nodes["fc3.b"])
        outer = ad.layer_norm(hhat, nodes["adapter.ln_out.g"],
                              nodes["adapter.ln_out.b"])
        return ad.add(h_tilde, ad.scale(outer, float(s)))

    def predict(self, features: ad.Node, nodes=None) -> ad.Node:
        """Log-probability grid over the full vocabulary (reserved included)."""
        nodes = self._nodes(nodes)
        logits = ad.add_rowvec(ad.matmul(features, nodes["fc1.w"]), nodes["fc1.b"])
        return ad.log_softmax(logits)

    # ------------------------------------------------------------------
    # frozen teacher
    # ------------------------------------------------------------------

    def encode_text(self, tokens: list[int]) -> np.ndarray:
        """Frozen teacher embedding of [CLS, tokens, SEP]; (len+2) x d_t."""
        self.teacher_calls += 1
        tokens = [int(t) for t in tokens]
        for pos, t in enumerate(tokens):
            if t in (BLANK, CLS, SEP):
                raise ValueError(
                    f"encode_text: reserved id {t} at position {pos} not allowed"
                )
            if not 0 <= t < self.config.vocab_total:
                raise ValueError(
                    f"encode_text: id {t} at position {pos} outside vocabulary"
                )
        key = tuple(tokens)
        hit = self._teacher_cache.get(key)
        if hit is not None:
            return hit

        t = self.teacher
        ids = [CLS] + tokens + [SEP]
        x = t["embed"][ids] + sinusoidal_pe(len(ids), self.config.teacher_dim)
        scale = 1.0 / np.sqrt(self.config.teacher_dim)
        for i in range(self.config.teacher_layers):
            pre = f"layer{i}"
            q = x @ t[f"{pre}.attn.wq"] + t[f"{pre}.attn.bq"]
            k = x @ t[f"{pre}.attn.wk"] + t[f"{pre}.attn.bk"]
            v = x @ t[f"{pre}.attn.wv"] + t[f"{pre}.attn.bv"]
            attn = _np_softmax_rows(q @ k.T * scale) @ v
            x = _np_layer_norm(x + (attn @ t[f"{pre}.attn.wo"] + t[f"{pre}.attn.bo"]),
                               t[f"{pre}.ln1.g"], t[f"{pre}.ln1.b"])
            f = np.maximum(x @ t[f"{pre}.ffn.w1"] + t[f"{pre}.ffn.b1"], 0.0)
            f = f @ t[f"{pre}.ffn.w2"] + t[f"{pre}.ffn.b2"]
            x = _np_layer_norm(x + f, t[f"{pre}.ln2.g"], t[f"{pre}.ln2.b"])
        self._teacher_cache[key] = x
        return x


# ----------------------------------------------------------------------
# checkpoints
# ----------------------------------------------------------------------

_META_FIELDS = ("num_blocks", "model_dim", "ffn_dim", "conv_kernel",
                "teacher_dim", "teacher_layers", "vocab", "input_dim")


def checkpoint_arrays(model: Model, use_adapter: bool,
                      adapter_scale: float | None = None) -> "OrderedDict[str, np.ndarray]":
    """Flatten a model into the named-array container layout."""
    out: "OrderedDict[str, np.ndarray]" = OrderedDict()
    cfg = model.config
    for field in _META_FIELDS:
        out[f"meta.{field}"] = np.array([[float(getattr(cfg, field))]])
    if adapter_scale is None:
        adapter_scale = cfg.adapter_scale
    out["meta.adapter_scale"] = np.array([[float(adapter_scale)]])
    out["meta.use_adapter"] = np.array([[1.0 if use_adapter else 0.0]])
    for name, arr in model.params.items():
        out[f"student.{name}"] = arr
    for name, arr in model.teacher.items():
        out[f"teacher.{name}"] = arr
    return out


def save_checkpoint(path, model: Model, use_adapter: bool,
                    adapter_scale: float | None = None) -> None:
    arrayio.save_arrays(path, checkpoint_arrays(model, use_adapter, adapter_scale))


def model_from_arrays(arrays) -> tuple[Model, dict]:
    meta = {k[len("meta."):]: float(v[0, 0])
            for k, v in arrays.items() if k.startswith("meta.")}
    missing = [f for f in _META_FIELDS + ("adapter_scale", "use_adapter")
               if f not in meta]
    if missing:
        raise ValueError(f"checkpoint missing meta fields: {', '.join(missing)}")
    cfg = EncoderConfig(
        num_blocks=int(meta["num_blocks"]),
        model_dim=int(meta["model_dim"]),
        ffn_dim=int(meta["ffn_dim"]),
        conv_kernel=int(meta["conv_kernel"]),
        teacher_dim=int(meta["teacher_dim"]),
        teacher_layers=int(meta["teacher_layers"]),
        vocab=int(meta["vocab"]),
        adapter_scale=meta["adapter_scale"],
        input_dim=int(meta["input_dim"]),
    )
    model = Model(cfg, seed=0)
    for group, target in (("student", model.params), ("teacher", model.teacher)):
        prefix = group + "."
        stored = {k[len(prefix):]: v for k, v in arrays.items()
                  if k.startswith(prefix)}
        if set(stored) != set(target):
            raise ValueError(f"checkpoint {group} parameter names do not match model")
        for name, arr in stored.items():
            if arr.shape != target[name].shape:
                raise ValueError(
                    f"checkpoint array {group}.{name} has shape {arr.shape}, "
                    f"expected {target[name].shape}"
                )
            target[name] = arr.copy()
    model._teacher_cache.clear()
    return model, meta


def load_checkpoint(path) -> tuple[Model, dict]:
    return model_from_arrays(arrayio.load_arrays(path))
