"""Run configuration: one flat dataclass, read from sectioned key=value files."""
from __future__ import annotations

import configparser
import dataclasses
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

from .errors import ConfigError

SHA_VARIANTS = ("sequential", "parallel")
SHA_ABLATIONS = ("full", "utterance_only", "result_only", "result_attention_only", "off")
CONSISTENCY_TARGETS = ("tagger", "generator")


def _opt(section: str, default, doc: str, **kw):
    return field(default=default, metadata={"section": section, "doc": doc}, **kw)


@dataclass
class RunConfig:
    # [model]
    d_model: int = _opt("model", 768, "hidden and embedding width (d_model == d_e)")
    heads: int = _opt("model", 8, "attention heads in every attention block")
    d_ff: int = _opt("model", 0, "feed-forward inner width; 0 means 4 * d_model")
    dropout: float = _opt("model", 0.3, "dropout rate after every sub-layer")
    dtype: str = _opt("model", "float64", "float64 or float32")
    layer_norm_eps: float = _opt("model", 1e-5, "layer normalisation epsilon")
    # [sha]
    sha_layers: int = _opt("sha", 3, "number of stacked history-attention layers (N)")
    sha_variant: str = _opt("sha", "sequential", "sequential (SHA) or parallel (SHA-P)")
    sha_ablation: str = _opt("sha", "full", "full | utterance_only | result_only | result_attention_only | off")
    cat_all: bool = _opt("sha", False, "concatenate all earlier utterances before the current one (SHA must be off)")
    # [encoder]
    encoder_layers: int = _opt("encoder", 6, "Transformer encoder layers (M)")
    rel_pos_clip: int = _opt("encoder", 16, "farthest relative position l")
    lrm_enabled: bool = _opt("encoder", True, "apply the layer-refined mechanism")
    lrm_positions: tuple = _opt("encoder", (2,), "comma list of k: refine between layer k and k+1")
    lrm_shared_heads: bool = _opt("encoder", True, "refinement reuses the final classifier heads")
    lrm_intermediate_loss: bool = _opt("encoder", False, "also train the preliminary predictions")
    standard_residual: bool = _opt("encoder", False, "add the usual residual around encoder self-attention")
    # [slg]
    slg_enabled: bool = _opt("slg", True, "train with the slot label generation decoder")
    decoder_layers: int = _opt("slg", 6, "decoder layers")
    slg_alpha: float = _opt("slg", 0.35, "consistency weight alpha in [0, 0.5]")
    slg_lambda: float = _opt("slg", 0.75, "weight lambda of the generation loss in [0, 1]")
    consistency_target: str = _opt("slg", "tagger", "which distribution is the soft target: tagger or generator")
    consistency_detach: bool = _opt("slg", True, "block gradients through the soft target")
    # [train]
    seed: int = _opt("train", 0, "seed of the single generator used for init, dropout and shuffling")
    epochs: int = _opt("train", 100, "training epochs")
    batch_size: int = _opt("train", 32, "turns per batch")
    optimizer: str = _opt("train", "adamw", "adamw or adam")
    learning_rate: float = _opt("train", 5e-5, "learning rate")
    weight_decay: float = _opt("train", 0.01, "decoupled weight decay (adamw only)")
    beta1: float = _opt("train", 0.9, "Adam beta1")
    beta2: float = _opt("train", 0.999, "Adam beta2")
    adam_eps: float = _opt("train", 1e-8, "Adam epsilon")
    max_grad_norm: float = _opt("train", 0.0, "global gradient clipping norm; 0 disables")
    history_source: str = _opt("train", "gold", "history results while training: gold or predicted")
    # [data]
    format: str = _opt("data", "multi_turn", "multi_turn or single_turn")
    train_path: str = _opt("data", "", "training corpus (JSON lines)")
    dev_path: str = _opt("data", "", "validation corpus used for checkpoint selection")
    test_path: str = _opt("data", "", "test corpus evaluated at the end of training")
    output_dir: str = _opt("data", "", "run directory; empty means $SHALRT_OUTPUT_DIR or ./runs")

    def __post_init__(self):
        if isinstance(self.lrm_positions, (list, str, int)):
            self.lrm_positions = _parse_positions(self.lrm_positions)

    @property
    def ff_width(self) -> int:
        return self.d_ff or 4 * self.d_model

    @property
    def sha_on(self) -> bool:
        return self.sha_ablation != "off"

    def validate(self) -> "RunConfig":
        def need(cond, msg):
            if not cond:
                raise ConfigError(msg)

        need(self.d_model > 0 and self.heads > 0, "d_model and heads must be positive")
        need(self.d_model % self.heads == 0, f"d_model={self.d_model} is not divisible by heads={self.heads}")
        need(0.0 <= self.dropout < 1.0, "dropout must lie in [0, 1)")
        need(self.dtype in ("float64", "float32"), f"dtype must be float64 or float32, got {self.dtype!r}")
        need(self.sha_variant in SHA_VARIANTS, f"sha_variant must be one of {SHA_VARIANTS}")
        need(self.sha_ablation in SHA_ABLATIONS, f"sha_ablation must be one of {SHA_ABLATIONS}")
        need(not self.sha_on or self.sha_layers >= 1, "sha_layers must be at least 1")
        need(not (self.cat_all and self.sha_on), "cat_all requires sha_ablation = off")
        need(self.encoder_layers >= 1, "encoder_layers must be at least 1")
        need(self.rel_pos_clip >= 0, "rel_pos_clip must be non-negative")
        if self.lrm_enabled:
            need(len(self.lrm_positions) > 0, "lrm_positions is empty")
            for k in self.lrm_positions:
                need(1 <= k < self.encoder_layers, f"lrm position {k} outside [1, {self.encoder_layers - 1}]")
        need(self.decoder_layers >= 1, "decoder_layers must be at least 1")
        need(0.0 <= self.slg_alpha <= 0.5, "slg_alpha must lie in [0, 0.5]")
        need(0.0 <= self.slg_lambda <= 1.0, "slg_lambda must lie in [0, 1]")
        need(self.consistency_target in CONSISTENCY_TARGETS, f"consistency_target must be one of {CONSISTENCY_TARGETS}")
        need(self.epochs >= 0 and self.batch_size >= 1, "epochs must be >= 0 and batch_size >= 1")
        need(self.optimizer in ("adam", "adamw"), "optimizer must be adam or adamw")
        need(self.learning_rate > 0, "learning_rate must be positive")
        need(self.history_source in ("gold", "predicted"), "history_source must be gold or predicted")
        need(self.format in ("multi_turn", "single_turn"), "format must be multi_turn or single_turn")
        return self

    # ---------------------------------------------------------------- I/O

    def to_dict(self) -> dict[str, Any]:
        d = dataclasses.asdict(self)
        d["lrm_positions"] = list(self.lrm_positions)
        return d

    @classmethod
    def from_dict(cls, values: dict[str, Any]) -> "RunConfig":
        return replace(cls(), **values)

    def to_ini(self) -> str:
        lines = []
        for section in _sections():
            lines.append(f"[{section}]")
            for f in dataclasses.fields(self):
                if f.metadata["section"] == section:
                    lines.append(f"{f.name} = {_format(getattr(self, f.name))}")
            lines.append("")
        return "\n".join(lines)


def _sections() -> list[str]:
    seen: list[str] = []
    for f in dataclasses.fields(RunConfig):
        if f.metadata["section"] not in seen:
            seen.append(f.metadata["section"])
    return seen


FIELDS = {f.name: f for f in dataclasses.fields(RunConfig)}


def _parse_positions(value) -> tuple[int, ...]:
    if isinstance(value, int):
        return (value,)
    if isinstance(value, str):
        parts = [p for p in value.replace(" ", "").split(",") if p]
        try:
            return tuple(int(p) for p in parts)
        except ValueError:
            raise ConfigError(f"lrm_positions must be a comma list of integers, got {value!r}") from None
    return tuple(int(v) for v in value)


def _format(value) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, tuple):
        return ",".join(str(v) for v in value)
    return str(value)


def _coerce(name: str, raw):
    f = FIELDS[name]
    kind = type(f.default)
    if name == "lrm_positions":
        return _parse_positions(raw)
    if not isinstance(raw, str):
        if kind is float and isinstance(raw, int) and not isinstance(raw, bool):
            return float(raw)
        if isinstance(raw, kind):
            return raw
        raise ConfigError(f"{name}: expected {kind.__name__}, got {raw!r}")
    raw = raw.strip()
    try:
        if kind is bool:
            low = raw.lower()
            if low in ("1", "true", "yes", "on"):
                return True
            if low in ("0", "false", "no", "off"):
                return False
            raise ValueError
        if kind is int:
            return int(raw)
        if kind is float:
            return float(raw)
    except ValueError:
        raise ConfigError(f"{name}: cannot read {raw!r} as {kind.__name__}") from None
    return raw


def replace(cfg: RunConfig, **overrides) -> RunConfig:
    """Copy with overrides; unknown keys raise :class:`ConfigError`."""
    values = {}
    for key, raw in overrides.items():
        if key not in FIELDS:
            raise ConfigError(f"unknown config key {key!r}")
        values[key] = _coerce(key, raw)
    return dataclasses.replace(cfg, **values)


def parse_overrides(items) -> dict[str, str]:
    out = {}
    for item in items or ():
        if "=" not in item:
            raise ConfigError(f"override {item!r} is not key=value")
        key, value = item.split("=", 1)
        out[key.strip()] = value
    return out


def multi_turn_defaults() -> RunConfig:
    return RunConfig()


def single_turn_defaults() -> RunConfig:
    return replace(RunConfig(), d_model=128, learning_rate=1e-3, optimizer="adam", sha_ablation="off",
                   format="single_turn")


def preset(fmt: str) -> RunConfig:
    if fmt == "single_turn":
        return single_turn_defaults()
    if fmt == "multi_turn":
        return multi_turn_defaults()
    raise ConfigError(f"unknown format {fmt!r}")


def load_config(path=None, overrides: dict | None = None, base: RunConfig | None = None) -> RunConfig:
    """Read a sectioned key=value file on top of ``base`` (or the preset named by its ``format`` key)."""
    values: dict[str, str] = {}
    if path is not None:
        parser = configparser.ConfigParser(interpolation=None, inline_comment_prefixes=("#", ";"))
        parser.optionxform = str
        try:
            text = Path(path).read_text(encoding="utf-8")
        except OSError as exc:
            raise ConfigError(f"cannot read config {path}: {exc.strerror}") from None
        try:
            parser.read_string(text, source=str(path))
        except configparser.Error as exc:
            raise ConfigError(f"{path}: {exc}") from None
        sections = set(_sections())
        for section in parser.sections():
            if section not in sections:
                raise ConfigError(f"unknown config section [{section}]")
            for key, raw in parser.items(section):
                if key not in FIELDS:
                    raise ConfigError(f"unknown config key {key!r} in [{section}]")
                if FIELDS[key].metadata["section"] != section:
                    raise ConfigError(f"key {key!r} belongs in [{FIELDS[key].metadata['section']}], not [{section}]")
                values[key] = raw
    values.update(overrides or {})
    if base is None:
        fmt = values.get("format", "multi_turn")
        base = preset(fmt.strip() if isinstance(fmt, str) else fmt)
    return replace(base, **values).validate()


def help_text() -> str:
    lines = ["Configuration keys (file sections in brackets; defaults are the multi-turn preset):", ""]
    for section in _sections():
        lines.append(f"[{section}]")
        for f in dataclasses.fields(RunConfig):
            if f.metadata["section"] == section:
                lines.append(f"  {f.name} = {_format(f.default)}")
                lines.append(f"      {f.metadata['doc']}")
        lines.append("")
    lines.append("The single-turn preset (format = single_turn) changes: d_model = 128, learning_rate = 0.001,")
    lines.append("optimizer = adam, sha_ablation = off.")
    return "\n".join(lines)
