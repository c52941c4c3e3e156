"""Model/training configuration, recipes and the key=value config format."""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field, fields
from pathlib import Path

from hlsf.errors import ConfigError


@dataclass(frozen=True)
class ModelConfig:
    M: int = 10
    D: int = 16
    F: int = 80
    H: int = 4
    T: int = 12
    tau: float = 5.0
    k_rounds: int = 1
    history_embed: int = 16
    history_hidden: int = 16
    lane_embed: int = 64
    lane_hidden: int = 64
    attn_hidden: int = 64
    message: int = 16
    node_hidden: int = 16
    mode_embed: int = 64
    head_hidden: int = 64
    decoder_embed: int = 16
    decoder_hidden: int = 128
    disc_embed: int = 16
    disc_hidden: int = 16
    decoder_output: str = "absolute"
    position_scale: float = 10.0
    pdp: bool = True
    vli: bool = True
    v2i: bool = True
    gan: bool = True
    hierarchical: bool = True
    mask_fake: bool = False
    seed: int = 0

    def __post_init__(self):
        for f in fields(self):
            v = getattr(self, f.name)
            if f.type == "int" and f.name != "seed" and v <= 0:
                raise ConfigError(f"{f.name} must be positive, got {v}")
        if self.tau <= 0:
            raise ConfigError("tau must be positive")
        if self.decoder_output not in ("absolute", "residual"):
            raise ConfigError(f"decoder_output must be absolute or residual, got {self.decoder_output!r}")
        if not self.position_scale > 0:
            raise ConfigError("position_scale must be positive")
        if self.v2i and self.node_hidden != self.history_hidden:
            raise ConfigError("node_hidden must equal history_hidden (node state starts "
                              "from the history encoding)")
        if not self.hierarchical and (self.v2i or self.gan):
            raise ConfigError("the single-latent baseline has no V2I context or discriminator")

    @property
    def row_width(self) -> int:
        """Width of history/future rows."""
        return 4 if self.pdp else 2

    @property
    def context_width(self) -> int:
        if not self.hierarchical:
            return self.history_hidden + self.lane_hidden
        width = self.history_hidden + (2 * self.lane_hidden if self.vli else self.lane_hidden)
        if self.v2i:
            width += self.node_hidden
        return width

    @property
    def num_modes(self) -> int:
        return self.M if self.hierarchical else 1


@dataclass(frozen=True)
class TrainConfig:
    lr: float = 1e-4
    batch_size: int = 8
    epochs: int = 30
    val_every: int = 3
    val_fraction: float = 0.1
    val_k: int = 15
    alpha: float = 1.0
    kappa: float = 0.01
    beta_max: float = 0.5
    cycles: int = 4
    ramp_fraction: float = 0.5
    clip_norm: float = 10.0
    bce: str = "elementwise"
    bom_samples: int = 1
    seed: int = 0

    def __post_init__(self):
        if self.lr <= 0 or self.batch_size < 1 or self.epochs < 1 or self.val_every < 1:
            raise ConfigError("lr, batch_size, epochs and val_every must be positive")
        if not 0 < self.ramp_fraction <= 1 or self.cycles < 1:
            raise ConfigError("need cycles >= 1 and 0 < ramp_fraction <= 1")
        if self.bce not in ("elementwise", "categorical"):
            raise ConfigError(f"bce must be elementwise or categorical, got {self.bce!r}")
        if self.bom_samples < 1:
            raise ConfigError("bom_samples must be >= 1")
        if not 0 <= self.val_fraction < 1:
            raise ConfigError("val_fraction must be in [0, 1)")


RECIPES = {
    "M1": {"pdp": False, "vli": False, "v2i": False, "gan": False, "hierarchical": True},
    "M2": {"pdp": True, "vli": False, "v2i": False, "gan": False, "hierarchical": True},
    "M3": {"pdp": True, "vli": True, "v2i": False, "gan": False, "hierarchical": True},
    "M4": {"pdp": True, "vli": True, "v2i": True, "gan": False, "hierarchical": True},
    "M5": {"pdp": True, "vli": True, "v2i": True, "gan": True, "hierarchical": True},
    "Baseline": {"pdp": True, "vli": False, "v2i": False, "gan": False, "hierarchical": False},
    "Baseline+BOM": {"pdp": True, "vli": False, "v2i": False, "gan": False,
                     "hierarchical": False},
}

_RECIPE_TRAIN = {"Baseline": {"bom_samples": 1}, "Baseline+BOM": {"bom_samples": 5}}


@dataclass
class RunConfig:
    """Everything a run needs: model, training, recipe and CLI-level extras."""

    model: ModelConfig = field(default_factory=ModelConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    recipe: str = "M5"


def apply_recipe(recipe: str, model_overrides: dict | None = None,
                 train_overrides: dict | None = None) -> tuple[ModelConfig, TrainConfig]:
    """Build configs for ``recipe``; explicit overrides contradicting it are errors."""
    if recipe not in RECIPES:
        raise ConfigError(f"unknown recipe {recipe!r}; choose from {sorted(RECIPES)}")
    model_overrides = dict(model_overrides or {})
    train_overrides = dict(train_overrides or {})
    for key, want in RECIPES[recipe].items():
        if key in model_overrides and model_overrides[key] != want:
            raise ConfigError(f"recipe {recipe} requires {key}={want}, config sets "
                              f"{model_overrides[key]}")
    for key, want in _RECIPE_TRAIN.get(recipe, {}).items():
        if key in train_overrides and train_overrides[key] != want:
            raise ConfigError(f"recipe {recipe} requires {key}={want}, config sets "
                              f"{train_overrides[key]}")
    if not RECIPES[recipe]["hierarchical"] and float(train_overrides.get("alpha", 0.0)) != 0.0:
        raise ConfigError(f"recipe {recipe} has no mode selection; alpha (mode loss) must be 0")
    if not RECIPES[recipe]["gan"] and float(train_overrides.get("kappa", 0.0)) != 0.0:
        raise ConfigError(f"recipe {recipe} has no discriminator; kappa must be 0")
    model = ModelConfig(**{**model_overrides, **RECIPES[recipe]})
    train_defaults = dict(_RECIPE_TRAIN.get(recipe, {}))
    if not model.hierarchical:
        train_defaults["alpha"] = 0.0
    if not model.gan:
        train_defaults["kappa"] = 0.0
    train = TrainConfig(**{**train_defaults, **train_overrides})
    return model, train


# ---------------------------------------------------------------------------
# key=value files
# ---------------------------------------------------------------------------

_MODEL_KEYS = {f.name: f.type for f in fields(ModelConfig)}
_TRAIN_KEYS = {f.name: f.type for f in fields(TrainConfig)}


def _coerce(key: str, kind: str, raw: str):
    raw = raw.strip()
    try:
        if kind == "bool":
            low = raw.lower()
            if low in ("1", "true", "yes", "on"):
                return True
            if low in ("0", "false", "no", "off"):
                return False
            raise ValueError(raw)
        if kind == "int":
            return int(raw)
        if kind == "float":
            return float(raw)
        return raw
    except ValueError as exc:
        raise ConfigError(f"bad value for {key}: {raw!r}") from exc


def parse_config_text(text: str) -> tuple[str | None, dict, dict, dict]:
    """Split key=value text into (recipe, model, train, other) dicts.

    ``model.seed`` and ``train.seed`` are addressed through plain ``seed``,
    which sets both.  Keys outside the known sets go to ``other`` only if
    listed in ``EXTRA_KEYS``; anything else is an error.
    """
    recipe = None
    model, train, other = {}, {}, {}
    for lineno, line in enumerate(text.splitlines(), start=1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"config line {lineno}: expected key=value")
        key, raw = (s.strip() for s in line.split("=", 1))
        set_config_key(key, raw, model, train, other, lineno)
        if key == "recipe":
            recipe = other.pop("recipe")
    return recipe, model, train, other


EXTRA_KEYS = {"recipe": "str", "data": "str", "out": "str", "threads": "int"}


def set_config_key(key, raw, model, train, other, lineno=None):
    where = f"config line {lineno}: " if lineno else ""
    if key == "seed":
        model["seed"] = train["seed"] = _coerce(key, "int", str(raw))
    elif key in _MODEL_KEYS:
        model[key] = _coerce(key, _MODEL_KEYS[key], str(raw))
    elif key in _TRAIN_KEYS:
        train[key] = _coerce(key, _TRAIN_KEYS[key], str(raw))
    elif key in EXTRA_KEYS:
        other[key] = _coerce(key, EXTRA_KEYS[key], str(raw))
    else:
        raise ConfigError(f"{where}unknown key {key!r}")


def load_config_file(path) -> tuple[str | None, dict, dict, dict]:
    return parse_config_text(Path(path).read_text(encoding="utf-8"))


def dump_config(model: ModelConfig, train: TrainConfig, recipe: str) -> str:
    """Serialize to key=value text that ``parse_config_text`` reads back."""
    lines = [f"recipe={recipe}"]
    for name, value in dataclasses.asdict(model).items():
        if name == "seed":
            continue
        lines.append(f"{name}={value}")
    for name, value in dataclasses.asdict(train).items():
        lines.append(f"{name}={value}")
    return "\n".join(lines) + "\n"
