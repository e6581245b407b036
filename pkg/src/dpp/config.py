"""Flat key=value run configuration.

One file drives every command: head architecture, routing supervision,
scene synthesis, training, and oracle knobs. The format is plain
``key=value`` lines (``#`` comments and blank lines allowed); unknown keys
are rejected so typos fail loudly, and serialize/parse round-trips to an
equal config.
"""

from __future__ import annotations

from dataclasses import dataclass, fields

from .errors import ConfigError
from .head import HeadConfig


def _parse_bool(text: str) -> bool:
    t = text.strip().lower()
    if t in ("true", "1", "yes"):
        return True
    if t in ("false", "0", "no"):
        return False
    raise ValueError(f"not a boolean: {text!r}")


def _parse_stages(text: str) -> tuple:
    t = text.strip()
    if not t:
        return ()
    return tuple(int(p) for p in t.split(","))


def _format_stages(value) -> str:
    return ",".join(str(v) for v in value)


def _format_float(value) -> str:
    return repr(float(value))


@dataclass
class RunConfig:
    seed: int = 0
    out_dir: str = "out"
    # head architecture
    num_stages: int = 6
    selector_stages: tuple = (2, 4, 6)
    num_proposals: int = 24
    embed_dim: int = 32
    dyconv_dim: int = 16
    ffn_dim: int = 64
    selector_dim: int = 12
    num_classes: int = 8
    temperature: float = 1.0
    # routing supervision
    selection_lambda: float = 10.0
    alpha: float = 2.0
    tmin_last: float = 1.0
    use_iou_loss: bool = True
    use_c_loss: bool = True
    train_selection: str = "hard"  # "hard" (straight-through) or "soft"
    iou_target_mode: str = "max"
    eos_weight: float = 0.1
    # scene synthesis
    max_instances: int = 6
    min_box_size: float = 0.1
    max_box_size: float = 0.4
    jitter_sigma: float = 0.05
    fraction_random: float = 0.6
    class_noise: float = 0.25
    train_scenes: int = 2000
    val_scenes: int = 500
    # training
    batch_size: int = 8
    phase1_epochs: int = 3
    phase2_epochs: int = 3
    phase1_lr: float = 1e-3
    phase2_lr_body: float = 1e-4
    phase2_lr_selector: float = 1e-3
    weight_decay: float = 1e-4
    log_every: int = 25
    # oracle
    oracle_max_assignments: int = 59049
    oracle_budget_points: int = 8


# key in the file -> (attribute, parser, formatter); "lambda" is a keyword,
# hence the one renamed attribute
_SPECIAL = {
    "lambda": ("selection_lambda", float, _format_float),
    "selector_stages": ("selector_stages", _parse_stages, _format_stages),
}


def _key_table():
    table = {}
    for f in fields(RunConfig):
        if f.name == "selection_lambda":
            continue
        if f.name == "selector_stages":
            table["selector_stages"] = _SPECIAL["selector_stages"]
        elif f.type == "bool" or isinstance(f.default, bool):
            table[f.name] = (f.name, _parse_bool, lambda v: "true" if v else "false")
        elif isinstance(f.default, int):
            table[f.name] = (f.name, int, str)
        elif isinstance(f.default, float):
            table[f.name] = (f.name, float, _format_float)
        else:
            table[f.name] = (f.name, str, str)
    table["lambda"] = _SPECIAL["lambda"]
    return table


_KEY_TABLE = _key_table()
# canonical serialization order: dataclass field order with lambda in place
_KEY_ORDER = [("lambda" if f.name == "selection_lambda" else f.name)
              for f in fields(RunConfig)]


def parse_config_text(text: str, base: RunConfig | None = None) -> RunConfig:
    cfg = base if base is not None else RunConfig()
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        key, eq, value = line.partition("=")
        key = key.strip()
        if not eq:
            raise ConfigError(f"line {lineno}: expected key=value, got {raw!r}")
        if key not in _KEY_TABLE:
            raise ConfigError(f"line {lineno}: unknown config key {key!r}")
        attr, parser, _ = _KEY_TABLE[key]
        try:
            setattr(cfg, attr, parser(value.strip()))
        except ValueError as err:
            raise ConfigError(f"line {lineno}: bad value for {key}: {err}") from err
    return cfg


def load_config(path, base: RunConfig | None = None) -> RunConfig:
    try:
        with open(path, "r", encoding="utf-8") as fh:
            text = fh.read()
    except OSError as err:
        raise ConfigError(f"cannot read config {path}: {err}") from err
    return parse_config_text(text, base)


def config_items(cfg: RunConfig) -> dict:
    """Ordered {key: formatted value} for serialization and echoing."""
    out = {}
    for key in _KEY_ORDER:
        attr, _, formatter = _KEY_TABLE[key]
        out[key] = formatter(getattr(cfg, attr))
    return out


def serialize_config(cfg: RunConfig) -> str:
    return "".join(f"{k}={v}\n" for k, v in config_items(cfg).items())


def validate_config(cfg: RunConfig) -> None:
    try:
        head_config(cfg).validate()
    except ValueError as err:
        raise ConfigError(str(err)) from err
    if not (0.0 <= cfg.fraction_random <= 1.0):
        raise ConfigError("fraction_random must lie in [0, 1]")
    if not (0.0 < cfg.min_box_size <= cfg.max_box_size <= 0.9):
        raise ConfigError("need 0 < min_box_size <= max_box_size <= 0.9")
    if cfg.max_instances < 1:
        raise ConfigError("max_instances must be at least 1")
    if cfg.jitter_sigma < 0 or cfg.class_noise < 0:
        raise ConfigError("noise levels must be non-negative")
    if cfg.train_scenes < 0 or cfg.val_scenes < 0:
        raise ConfigError("scene counts must be non-negative")
    if cfg.batch_size < 1 or cfg.phase1_epochs < 0 or cfg.phase2_epochs < 0:
        raise ConfigError("batch_size must be >= 1 and epochs >= 0")
    if cfg.train_selection not in ("hard", "soft"):
        raise ConfigError("train_selection must be 'hard' or 'soft'")
    if cfg.num_classes < 1:
        raise ConfigError("need at least one class")
    if cfg.log_every < 1:
        raise ConfigError("log_every must be >= 1")
    if cfg.oracle_max_assignments < 1 or cfg.oracle_budget_points < 1:
        raise ConfigError("oracle caps must be positive")


def head_config(cfg: RunConfig) -> HeadConfig:
    return HeadConfig(
        num_stages=cfg.num_stages,
        selector_stages=tuple(cfg.selector_stages),
        num_proposals=cfg.num_proposals,
        embed_dim=cfg.embed_dim,
        dyconv_dim=cfg.dyconv_dim,
        ffn_dim=cfg.ffn_dim,
        selector_dim=cfg.selector_dim,
        num_classes=cfg.num_classes,
        selection_lambda=cfg.selection_lambda,
        alpha=cfg.alpha,
        tmin_last=cfg.tmin_last,
        temperature=cfg.temperature,
        eos_weight=cfg.eos_weight,
        iou_target_mode=cfg.iou_target_mode,
    )
