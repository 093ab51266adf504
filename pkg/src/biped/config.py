"""Model configuration and the ``key = value`` config file format."""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, fields

from .errors import ConfigError

EGO_MODES = ("ground_truth", "predicted", "none")


@dataclass
class BiPedConfig:
    """Architecture sizes and ablation toggles.

    Defaults reproduce the full model: 15 observed frames, 30 predicted
    frames, 256 hidden units, a 60 px grid over a 1920x1080 image and
    216x384 category rasters.
    """

    obs_len: int = 15
    pred_len: int = 30
    hidden_size: int = 256
    mje_embed_size: int = 64
    mjp_embed_size: int = 128
    cim_hidden: int = 128
    iau_dim: int = 128
    image_width: int = 1920
    image_height: int = 1080
    grid_cell: int = 60
    map_height: int = 216
    map_width: int = 384
    use_mie: bool = True
    use_mje: bool = True
    use_mip: bool = True
    use_mjp: bool = True
    use_cim: bool = True
    use_iau: bool = True
    cim_categorical: bool = True
    use_grid_task: bool = True
    ego_future_mode: str = "ground_truth"

    def __post_init__(self):
        for f in fields(self):
            v = getattr(self, f.name)
            if f.type == "int" and (isinstance(v, bool) or not isinstance(v, int) or v < 1):
                raise ConfigError(f"{f.name} must be a positive integer, got {v!r}")
            if f.type == "bool" and not isinstance(v, bool):
                raise ConfigError(f"{f.name} must be a boolean, got {v!r}")
        if self.ego_future_mode not in EGO_MODES:
            raise ConfigError(f"ego_future_mode must be one of {EGO_MODES}, got {self.ego_future_mode!r}")
        if not (self.use_mie or self.use_mje or self.use_cim):
            raise ConfigError("at least one encoder (use_mie, use_mje, use_cim) must be enabled")
        if not (self.use_mip or self.use_mjp):
            raise ConfigError("at least one decoder (use_mip, use_mjp) must be enabled")
        if self.image_width % self.grid_cell or self.image_height % self.grid_cell:
            raise ConfigError(
                f"grid_cell {self.grid_cell} does not tile a {self.image_width}x{self.image_height} image"
            )

    @property
    def grid_rows(self):
        return self.image_height // self.grid_cell

    @property
    def grid_cols(self):
        return self.image_width // self.grid_cell

    @property
    def num_grid_classes(self):
        return self.grid_rows * self.grid_cols

    def replace(self, **changes):
        return dataclasses.replace(self, **changes)

    def to_dict(self):
        return dataclasses.asdict(self)

    def to_text(self):
        return "".join(f"{k} = {_format(v)}\n" for k, v in self.to_dict().items())


def _format(v):
    if isinstance(v, bool):
        return "true" if v else "false"
    return str(v)


_TRUE = {"true", "1", "yes", "on"}
_FALSE = {"false", "0", "no", "off"}


def coerce(ftype, key, raw):
    raw = raw.strip()
    if ftype in ("bool", bool):
        low = raw.lower()
        if low in _TRUE:
            return True
        if low in _FALSE:
            return False
        raise ConfigError(f"{key}: expected a boolean, got {raw!r}")
    if ftype in ("int", int):
        try:
            return int(raw)
        except ValueError:
            raise ConfigError(f"{key}: expected an integer, got {raw!r}") from None
    if ftype in ("float", float):
        try:
            return float(raw)
        except ValueError:
            raise ConfigError(f"{key}: expected a number, got {raw!r}") from None
    return raw


def parse_kv_text(text, source="<config>"):
    """Parse ``key = value`` lines; ``#`` starts a comment."""
    out = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{source}:{lineno}: expected 'key = value', got {line!r}")
        key, value = (s.strip() for s in line.split("=", 1))
        if not key:
            raise ConfigError(f"{source}:{lineno}: empty key")
        if key in out:
            raise ConfigError(f"{source}:{lineno}: duplicate key {key!r}")
        out[key] = value
    return out


def build_dataclass(cls, raw, source="<config>"):
    known = {f.name: f.type for f in fields(cls)}
    unknown = sorted(set(raw) - set(known))
    if unknown:
        raise ConfigError(f"{source}: unknown keys {unknown}; valid keys are {sorted(known)}")
    kwargs = {k: coerce(known[k], k, v) for k, v in raw.items()}
    return cls(**kwargs)


def parse_config(text, source="<config>"):
    return build_dataclass(BiPedConfig, parse_kv_text(text, source), source)


def load_config(path):
    with open(path, encoding="utf-8") as fh:
        return parse_config(fh.read(), str(path))


def save_config(config, path):
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(config.to_text())


def micro_config(**overrides):
    """Desk-scale variant used by the overfit and ablation experiments."""
    base = dict(
        hidden_size=32,
        mje_embed_size=16,
        mjp_embed_size=32,
        cim_hidden=16,
        iau_dim=32,
        map_height=27,
        map_width=48,
    )
    base.update(overrides)
    return BiPedConfig(**base)


def tiny_config(**overrides):
    """Hidden-size-4 model used for whole-model gradient checks."""
    base = dict(
        obs_len=4,
        pred_len=3,
        hidden_size=4,
        mje_embed_size=3,
        mjp_embed_size=4,
        cim_hidden=3,
        iau_dim=4,
        grid_cell=120,
        map_height=27,
        map_width=48,
        ego_future_mode="predicted",
    )
    base.update(overrides)
    return BiPedConfig(**base)
