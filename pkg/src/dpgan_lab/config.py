"""Run configuration: one flat dataclass, serialised as INI sections of ``key = value``."""
from __future__ import annotations

import configparser
import dataclasses
from dataclasses import dataclass, field, fields
from pathlib import Path
from typing import Any

from .errors import ConfigError
from .generators import Variant
from .layers import ModelDims


def _f(section: str, default: Any = None, **kw):
    return field(default=default, metadata={"section": section}, **kw)


@dataclass
class RunConfig:
    # [run]
    variant: str = _f("run", "lstm")
    seed: int = _f("run", 0)
    output_dir: str = _f("run", "runs/default")
    nan_guard: bool = _f("run", False)
    # [model]
    d_model: int = _f("model", 32)
    n_layers: int = _f("model", 2)
    n_heads: int = _f("model", 4)
    d_head: int = _f("model", 64)
    d_ff: int = _f("model", 0)  # 0 means 4 * d_model
    max_len: int = _f("model", 20)
    vocab_size: int = _f("model", 5000)
    dropout: float = _f("model", 0.1)
    n_reference_sources: int = _f("model", 4)
    # [data]
    source: str = _f("data", "oracle")
    corpus_path: str = _f("data", "")
    embedding_path: str = _f("data", "")
    data_seed: int = _f("data", 0)
    n_train: int = _f("data", 2000)
    n_heldout: int = _f("data", 500)
    max_sentences: int = _f("data", 10000)
    n_bleu_refs: int = _f("data", 5000)
    # [pretrain]
    pretrain_iters: int = _f("pretrain", 120)
    batches_per_iter: int = _f("pretrain", 8)
    batch_size: int = _f("pretrain", 64)
    lr_mle: float = _f("pretrain", 0.0)
    warmup_steps: int = _f("pretrain", 0)
    eval_every: int = _f("pretrain", 10)
    checkpoint_every: int = _f("pretrain", 30)
    n_eval_samples: int = _f("pretrain", 128)
    # [adversarial]
    adv_iters: int = _f("adversarial", 120)
    g_steps: int = _f("adversarial", 1)
    d_steps: int = _f("adversarial", 3)
    lr_adv_g: float = _f("adversarial", 1e-4)
    lr_d: float = _f("adversarial", 1e-3)
    reward_word: float = _f("adversarial", 0.5)
    reward_sentence: float = _f("adversarial", 0.5)
    reward_floor: float = _f("adversarial", -10.0)
    reward_normalize: bool = _f("adversarial", False)
    baseline_decay: float = _f("adversarial", 0.95)
    d_pretrain_steps: int = _f("adversarial", 0)

    def __post_init__(self):
        self.validate()

    @property
    def variant_tag(self) -> Variant:
        return Variant(self.variant)

    @property
    def mle_lr(self) -> float:
        """Configured MLE rate, or 1e-2 for the LSTM and 1e-3 for Transformer variants."""
        if self.lr_mle > 0:
            return self.lr_mle
        return 1e-2 if self.variant_tag is Variant.LSTM else 1e-3

    @property
    def reward_mix(self) -> tuple[float, float]:
        return (self.reward_word, self.reward_sentence)

    def dims(self, vocab_size: int | None = None) -> ModelDims:
        return ModelDims(self.d_model, self.n_layers, self.n_heads, self.d_head, self.d_ff or None,
                         self.max_len, vocab_size or self.vocab_size)

    def validate(self) -> None:
        try:
            Variant(self.variant)
        except ValueError:
            raise ConfigError(f"unknown variant '{self.variant}'; expected one of "
                              f"{[v.value for v in Variant]}") from None
        if self.source not in ("oracle", "corpus"):
            raise ConfigError(f"data source must be 'oracle' or 'corpus', got '{self.source}'")
        if self.source == "corpus" and not self.corpus_path:
            raise ConfigError("corpus source needs corpus_path")
        for name in ("d_ff", "pretrain_iters", "adv_iters", "g_steps", "d_steps", "d_pretrain_steps", "warmup_steps"):
            if getattr(self, name) < 0:
                raise ConfigError(f"{name} must be >= 0")
        for name in ("batch_size", "batches_per_iter", "eval_every", "checkpoint_every", "n_eval_samples",
                     "n_train", "n_heldout", "n_bleu_refs", "n_reference_sources"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be >= 1")
        if self.reward_word < 0 or self.reward_sentence < 0 or \
                abs(self.reward_word + self.reward_sentence - 1.0) > 1e-9:
            raise ConfigError("reward_word and reward_sentence must be >= 0 and sum to 1")
        if not 0.0 <= self.dropout < 1.0:
            raise ConfigError("dropout must lie in [0, 1)")
        try:
            self.dims()
        except ValueError as exc:
            raise ConfigError(str(exc)) from None

    # --- serialisation ------------------------------------------------------
    def to_dict(self) -> dict[str, Any]:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, values: dict[str, Any]) -> "RunConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(values) - known
        if unknown:
            raise ConfigError(f"unknown config keys: {sorted(unknown)}")
        return cls(**values)

    def to_ini(self) -> str:
        sections: dict[str, list[str]] = {}
        for f in fields(self):
            value = getattr(self, f.name)
            text = str(value).lower() if isinstance(value, bool) else repr(value) if isinstance(value, float) else str(value)
            sections.setdefault(f.metadata["section"], []).append(f"{f.name} = {text}")
        return "\n".join(f"[{s}]\n" + "\n".join(lines) + "\n" for s, lines in sections.items())

    def save(self, path: str | Path) -> None:
        Path(path).write_text(self.to_ini(), encoding="utf-8")

    @classmethod
    def from_ini(cls, text: str) -> "RunConfig":
        parser = configparser.ConfigParser(interpolation=None)
        try:
            parser.read_string(text)
        except configparser.Error as exc:
            raise ConfigError(f"unreadable config: {exc}") from None
        by_name = {f.name: f for f in fields(cls)}
        values: dict[str, Any] = {}
        for section in parser.sections():
            for key, raw in parser.items(section):
                f = by_name.get(key)
                if f is None:
                    raise ConfigError(f"unknown key '{key}' in section [{section}]")
                if f.metadata["section"] != section:
                    raise ConfigError(f"key '{key}' belongs in section [{f.metadata['section']}], not [{section}]")
                values[key] = _convert(key, raw, type(f.default))
        return cls(**values)

    @classmethod
    def load(cls, path: str | Path) -> "RunConfig":
        try:
            text = Path(path).read_text(encoding="utf-8")
        except OSError as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from None
        return cls.from_ini(text)


def _convert(key: str, raw: str, kind: type) -> Any:
    raw = raw.strip()
    try:
        if kind is bool:
            lowered = raw.lower()
            if lowered in ("1", "true", "yes", "on"):
                return True
            if lowered in ("0", "false", "no", "off"):
                return False
            raise ValueError(raw)
        if kind is int:
            return int(raw)
        if kind is float:
            return float(raw)
        return raw
    except ValueError:
        raise ConfigError(f"bad value for '{key}': {raw!r} (expected {kind.__name__})") from None
