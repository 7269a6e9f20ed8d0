"""Training configuration and its key=value text format."""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, fields
from pathlib import Path

from .dds import SCAN_KINDS
from .ssm import SCALES

MSD_CHOICES = ("gumbel", "random", "similarity", "off")
AGGREGATION_CHOICES = ("scfa", "sum", "concat", "off")
SCAN_CHOICES = SCAN_KINDS + ("off",)
POLICIES = ("train+test", "train")


class ConfigError(ValueError):
    pass


@dataclass
class TrainConfig:
    lr_init: float = 1e-4
    lr_final: float = 1e-5
    weight_decay: float = 1e-4
    epochs: int = 40
    warmup_epochs: int = 5
    batch_size: int = 16  # per source domain
    eval_batch_size: int = 64
    seed: int = 0
    scale: str = "tiny"
    width: int = 0  # 0 -> scale default
    num_stages: int = 0  # 0 -> scale default
    blocks_per_stage: int = 1
    state_size: int = 16
    num_points: int = 1024
    groups: int = 32
    neighbors: int = 16
    serialization: str = "zorder"
    msd: str = "gumbel"
    aggregation: str = "scfa"
    global_prompt: bool = True
    scan: str = "dds"
    dds_composed: bool = False
    msd_position: int = 1
    scfa_position: int = 1
    conv_kernel: int = 1
    pool: str = "f1"
    tau_start: float = 5.0
    tau_end: float = 0.5
    mask_l1: float = 0.0
    jitter_sigma: float = 0.01
    jitter_clip: float = 0.05
    pointmix_prob: float = 0.5
    source_policy: str = "train+test"
    eval_every: int = 1

    @classmethod
    def baseline(cls, **kw) -> "TrainConfig":
        """Plain backbone, no plug-in modules."""
        kw = {"msd": "off", "aggregation": "off", "scan": "off", **kw}
        return cls(**kw)

    def replace(self, **kw) -> "TrainConfig":
        return dataclasses.replace(self, **kw)

    def stage_dims(self) -> tuple[int, int]:
        stages, width = SCALES[self.scale]
        return (self.num_stages or stages, self.width or width)

    def validate(self) -> "TrainConfig":
        def need(cond, msg):
            if not cond:
                raise ConfigError(msg)

        need(self.scale in SCALES, f"scale must be one of {sorted(SCALES)}")
        need(self.epochs >= 1, "epochs must be >= 1")
        need(0 <= self.warmup_epochs < self.epochs, "warmup_epochs must be < epochs")
        need(0 < self.lr_final < self.lr_init, "need 0 < lr_final < lr_init")
        need(self.weight_decay >= 0, "weight_decay must be >= 0")
        need(self.batch_size >= 1, "batch_size must be >= 1")
        need(self.msd in MSD_CHOICES, f"msd must be one of {MSD_CHOICES}")
        need(self.aggregation in AGGREGATION_CHOICES, f"aggregation must be one of {AGGREGATION_CHOICES}")
        need(self.scan in SCAN_CHOICES, f"scan must be one of {SCAN_CHOICES}")
        need(
            self.scan == "off" or self.aggregation != "off",
            "scanning over assembled blocks (DDS) requires cross-domain aggregation",
        )
        stages, width = self.stage_dims()
        need(stages >= 2, "at least two stages are required")
        need(width % 2 == 0 and width >= 2, "width must be even")
        for name in ("msd_position", "scfa_position"):
            pos = getattr(self, name)
            need(1 <= pos <= stages, f"{name}={pos} outside [1, {stages}]")
        if self.msd != "off" and self.aggregation != "off":
            need(self.msd_position <= self.scfa_position, "msd_position must not exceed scfa_position")
        need(self.conv_kernel % 2 == 1, "conv_kernel must be odd")
        need(self.pool in ("f1", "all"), "pool must be 'f1' or 'all'")
        need(self.serialization in ("zorder", "axis-lex"), "serialization must be zorder or axis-lex")
        need(self.tau_start > 0 and self.tau_end > 0, "temperatures must be positive")
        need(0.0 <= self.pointmix_prob <= 1.0, "pointmix_prob must lie in [0, 1]")
        need(self.jitter_sigma >= 0, "jitter_sigma must be >= 0")
        need(self.source_policy in POLICIES, f"source_policy must be one of {POLICIES}")
        need(self.neighbors >= 1 and self.groups >= 1, "groups/neighbors must be positive")
        need(self.groups <= self.num_points and self.neighbors <= self.num_points, "groups/neighbors exceed num_points")
        return self

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)


def _coerce(name: str, raw: str):
    types = {f.name: f.type for f in fields(TrainConfig)}
    if name not in types:
        raise ConfigError(f"unknown config key {name!r}")
    kind = types[name]
    raw = raw.strip()
    try:
        if kind == "bool":
            low = raw.lower()
            if low not in ("true", "false", "1", "0", "yes", "no", "on", "off"):
                raise ValueError(raw)
            return low in ("true", "1", "yes", "on")
        if kind == "int":
            return int(raw)
        if kind == "float":
            return float(raw)
    except ValueError:
        raise ConfigError(f"bad value for {name}: {raw!r}") from None
    return raw


def parse_overrides(pairs) -> dict:
    """``key=value`` strings -> typed dict."""
    out = {}
    for pair in pairs:
        if "=" not in pair:
            raise ConfigError(f"expected key=value, got {pair!r}")
        k, v = pair.split("=", 1)
        out[k.strip()] = _coerce(k.strip(), v)
    return out


def load_config_file(path: str | Path) -> dict:
    """Read ``key = value`` lines; ``#`` starts a comment."""
    lines = Path(path).read_text().splitlines()
    pairs = []
    for line in lines:
        line = line.split("#", 1)[0].strip()
        if line:
            pairs.append(line)
    return parse_overrides(pairs)


def resolve_config(file: str | Path | None = None, overrides: dict | None = None) -> TrainConfig:
    """Precedence: overrides > file > defaults."""
    values = {}
    if file:
        values.update(load_config_file(file))
    values.update({k: v for k, v in (overrides or {}).items() if v is not None})
    return TrainConfig(**values).validate()


def dump_config(cfg: TrainConfig) -> str:
    return "".join(f"{k} = {v}\n" for k, v in cfg.to_dict().items())
