"""Flat key=value run configuration.

One text file drives data generation, training, and ablation. Format:

    # comment
    key = value

Every knob is a scalar; unknown keys are rejected so typos fail loudly.
`seed` is the only required key. Defaults come straight from the dataclasses
they populate (CorpusConfig / EncoderConfig / HyperParams), so there is a
single source of truth for them.
"""

from __future__ import annotations

from dataclasses import dataclass

from .encoders import EncoderConfig
from .synthdata import CorpusConfig
from .training import HyperParams


class ConfigError(ValueError):
    """Bad, missing, or unknown configuration input (exit code 1 material)."""


# key -> (section, field, converter); "seed" fans out to every section that
# takes one.
_SCHEMA = {
    "seed": ("special", "seed", int),
    "corpus_dir": ("run", "corpus_dir", str),
    "ablate_num_seeds": ("run", "ablate_num_seeds", int),
    # corpus
    "vocab_chars": ("corpus", "vocab_chars", int),
    "num_train": ("corpus", "num_train", int),
    "num_dev": ("corpus", "num_dev", int),
    "num_test": ("corpus", "num_test", int),
    "min_len": ("corpus", "min_len", int),
    "max_len": ("corpus", "max_len", int),
    "frames_min": ("corpus", "frames_min", int),
    "frames_max": ("corpus", "frames_max", int),
    "noise_std": ("corpus", "noise_std", float),
    "feat_dim": ("corpus", "feat_dim", int),
    "text_branching": ("corpus", "text_branching", int),
    "confusable_pairs": ("corpus", "confusable_pairs", int),
    "confusable_gap": ("corpus", "confusable_gap", float),
    # encoder
    "num_blocks": ("encoder", "num_blocks", int),
    "model_dim": ("encoder", "model_dim", int),
    "ffn_dim": ("encoder", "ffn_dim", int),
    "conv_kernel": ("encoder", "conv_kernel", int),
    "teacher_dim": ("encoder", "teacher_dim", int),
    "teacher_layers": ("encoder", "teacher_layers", int),
    # training
    "alpha": ("hp", "alpha", float),
    "lambda": ("hp", "lam", float),
    "w": ("hp", "w", float),
    "s": ("hp", "s", float),
    "base_lr": ("hp", "base_lr", float),
    "warmup_steps": ("hp", "warmup_steps", int),
    "epochs": ("hp", "epochs", int),
    "average_last": ("hp", "average_last", int),
    "batch_size": ("hp", "batch_size", int),
    "sinkhorn_tol": ("hp", "sinkhorn_tol", float),
    "sinkhorn_max_iter": ("hp", "sinkhorn_max_iter", int),
}

_REQUIRED = ("seed",)


@dataclass
class RunConfig:
    corpus: CorpusConfig
    encoder: EncoderConfig
    hp: HyperParams
    corpus_dir: str = "corpus"
    ablate_num_seeds: int = 3


def parse_config_text(text: str, source: str = "<config>") -> dict:
    """Raw key -> string value, with duplicate/malformed-line checks."""
    raw: dict[str, str] = {}
    for lineno, line in enumerate(text.splitlines(), start=1):
        stripped = line.split("#", 1)[0].strip()
        if not stripped:
            continue
        if "=" not in stripped:
            raise ConfigError(
                f"{source}:{lineno}: expected 'key = value', got {line.strip()!r}"
            )
        key, value = (part.strip() for part in stripped.split("=", 1))
        if key in raw:
            raise ConfigError(f"{source}:{lineno}: duplicate key {key!r}")
        raw[key] = value
    return raw


def build_run_config(raw: dict, overrides: dict | None = None) -> RunConfig:
    """Validate raw strings against the schema and assemble a RunConfig."""
    unknown = sorted(k for k in raw if k not in _SCHEMA)
    if unknown:
        raise ConfigError(f"unknown config keys: {', '.join(unknown)}")
    missing = sorted(k for k in _REQUIRED if k not in raw)
    if missing:
        raise ConfigError(f"missing required config keys: {', '.join(missing)}")

    values: dict[str, object] = {}
    for key, text in raw.items():
        _, _, conv = _SCHEMA[key]
        try:
            values[key] = conv(text)
        except ValueError:
            raise ConfigError(
                f"config key {key}: cannot parse {text!r} as {conv.__name__}"
            ) from None
    if overrides:
        for key, val in overrides.items():
            if val is None:
                continue
            if key not in _SCHEMA:
                raise ConfigError(f"unknown override {key!r}")
            values[key] = _SCHEMA[key][2](val)

    sections: dict[str, dict] = {"corpus": {}, "encoder": {}, "hp": {}, "run": {}}
    for key, val in values.items():
        section, field_name, _ = _SCHEMA[key]
        if section == "special":
            sections["corpus"]["seed"] = val
            sections["hp"]["seed"] = val
        else:
            sections[section][field_name] = val

    try:
        corpus = CorpusConfig(**sections["corpus"])
        hp = HyperParams(**sections["hp"])
        encoder = EncoderConfig(
            input_dim=corpus.feat_dim,
            vocab=corpus.vocab_chars,
            adapter_scale=hp.s,
            **sections["encoder"],
        )
    except ValueError as exc:
        raise ConfigError(str(exc)) from None
    return RunConfig(corpus=corpus, encoder=encoder, hp=hp, **sections["run"])


def load_config(path, overrides: dict | None = None) -> RunConfig:
    try:
        with open(path) as f:
            text = f.read()
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from None
    return build_run_config(parse_config_text(text, source=str(path)), overrides)
