"""Run configuration as flat dotted key/value text.

A run is fully specified by one RunConfig: model, training, augmentation,
data selection, eval schedule, and output naming. The on-disk format is one
`key = value` pair per line with dotted section prefixes (model.*, train.*,
aug.*, data.*, eval.*, run.*), diff-friendly and parseable anywhere.
Precedence when loading: built-in defaults, then file values, then flag
overrides. Bare keys (no dot) resolve against the unique field with that
trailing name; unknown or ambiguous keys are rejected by name.
"""

from __future__ import annotations

import dataclasses
import hashlib
from dataclasses import dataclass, field

from .augment import AugmentationConfig
from .errors import ConfigError
from .trainer import TrainConfig
from .vit import ModelConfig

DATA_SOURCES = ("synthetic", "cifar")

# named training regimes: a short run tuned for small data, and a longer,
# cooler one that on small datasets demonstrably underperforms the short run
TRAIN_PRESETS = {
    "low-compute": {
        "train.total_steps": "5000",
        "train.batch_size": "128",
        "train.lr_peak": "0.001",
        "train.warmup_steps": "500",
        "train.tau_t_warmup_steps": "500",
    },
    "high-compute": {
        "train.total_steps": "25000",
        "train.batch_size": "256",
        "train.lr_peak": "0.0005",
        "train.warmup_steps": "2500",
        "train.tau_t_warmup_steps": "2500",
    },
}

# named model sizes for grid sweeps
MODEL_PRESETS = {
    "desk": {},
    "mini": {
        "model.embed_dim": "64",
        "model.depth": "2",
        "model.head_hidden_dim": "256",
        "model.head_bottleneck_dim": "32",
        "model.num_prototypes": "512",
    },
}

_PRESET_KEYS = {"train.preset": TRAIN_PRESETS, "model.preset": MODEL_PRESETS}


@dataclass(frozen=True)
class DataConfig:
    source: str = "synthetic"
    n_samples: int = 20_000
    val_samples: int = 1000
    probe_train_samples: int = 2000
    image_size: int = 40
    noise_std: float = 0.02
    path: str = ""
    seed: int = 0

    def validate(self) -> None:
        if self.source not in DATA_SOURCES:
            raise ConfigError(f"unknown data source {self.source!r}; expected {DATA_SOURCES}")
        if self.n_samples < 1 or self.val_samples < 1:
            raise ConfigError("n_samples and val_samples must be >= 1")
        if self.probe_train_samples < 1:
            raise ConfigError("probe_train_samples must be >= 1")
        if self.source == "cifar" and not self.path:
            raise ConfigError("cifar source requires data.path")


@dataclass(frozen=True)
class EvalConfig:
    n_points: int = 5
    knn_k: int = 20
    invariance_images: int = 100
    invariance_views: int = 16
    seed: int = 0

    def validate(self) -> None:
        if self.n_points < 1:
            raise ConfigError("eval.n_points must be >= 1")
        if self.knn_k < 1 or self.invariance_views < 2 or self.invariance_images < 2:
            raise ConfigError("bad eval sizes")


@dataclass(frozen=True)
class RunConfig:
    run: "RunMeta" = field(default_factory=lambda: RunMeta())
    model: ModelConfig = field(default_factory=ModelConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    aug: AugmentationConfig = field(default_factory=AugmentationConfig)
    data: DataConfig = field(default_factory=DataConfig)
    eval: EvalConfig = field(default_factory=EvalConfig)

    def validate(self) -> None:
        self.model.validate()
        self.train.validate()
        self.aug.validate()
        self.data.validate()
        self.eval.validate()
        if self.aug.global_size != self.model.image_size:
            raise ConfigError(
                f"aug.global_size {self.aug.global_size} must equal "
                f"model.image_size {self.model.image_size}"
            )

    def content_hash(self) -> str:
        """Identity of the experiment itself; run id and output dir excluded."""
        items = [(k, v) for k, v in to_flat(self).items() if not k.startswith("run.")]
        return hashlib.sha256(repr(items).encode()).hexdigest()[:12]

    def run_id(self) -> str:
        return self.run.id or f"run-{self.content_hash()}"

    def replace_keys(self, overrides: dict[str, str]) -> "RunConfig":
        flat = to_flat(self)
        flat.update(_resolve_keys(overrides, flat))
        return from_flat(flat)


@dataclass(frozen=True)
class RunMeta:
    id: str = ""
    out: str = ""  # output root; empty -> $DESKSSL_OUT or ./runs


# ---------------------------------------------------------------------------
# flatten / unflatten
# ---------------------------------------------------------------------------


def _value_to_str(v) -> str:
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, tuple):
        return ",".join(_value_to_str(x) for x in v)
    return repr(v) if isinstance(v, float) else str(v)


def _str_to_value(s: str, template, key: str):
    s = s.strip()
    try:
        if isinstance(template, bool):
            low = s.lower()
            if low not in ("true", "false"):
                raise ValueError(s)
            return low == "true"
        if isinstance(template, int):
            return int(s)
        if isinstance(template, float):
            return float(s)
        if isinstance(template, tuple):
            parts = [p for p in s.split(",") if p.strip() != ""]
            elem = template[0]
            return tuple(_str_to_value(p, elem, key) for p in parts)
        return s
    except ValueError:
        raise ConfigError(
            f"type mismatch for key {key}: cannot parse {s!r} as {type(template).__name__}"
        ) from None


def _flatten(prefix: str, obj, out: dict[str, str]) -> None:
    for f in dataclasses.fields(obj):
        v = getattr(obj, f.name)
        key = f"{prefix}.{f.name}" if prefix else f.name
        if dataclasses.is_dataclass(v):
            _flatten(key, v, out)
        else:
            out[key] = _value_to_str(v)


def to_flat(cfg: RunConfig) -> dict[str, str]:
    """Every field as a string, in declaration order."""
    out: dict[str, str] = {}
    _flatten("", cfg, out)
    return out


def _rebuild(prefix: str, cls, flat: dict[str, str]):
    kwargs = {}
    for f in dataclasses.fields(cls):
        key = f"{prefix}.{f.name}" if prefix else f.name
        default = _field_default(f)
        if dataclasses.is_dataclass(default):
            kwargs[f.name] = _rebuild(key, type(default), flat)
        else:
            kwargs[f.name] = _str_to_value(flat[key], default, key)
    return cls(**kwargs)


def _field_default(f: dataclasses.Field):
    if f.default is not dataclasses.MISSING:
        return f.default
    return f.default_factory()


def from_flat(flat: dict[str, str]) -> RunConfig:
    base = to_flat(RunConfig())
    unknown = set(flat) - set(base)
    if unknown:
        raise ConfigError(f"unknown key: {sorted(unknown)[0]}")
    base.update(flat)
    return _rebuild("", RunConfig, base)


def _resolve_keys(kv: dict[str, str], known: dict[str, str]) -> dict[str, str]:
    """Expand presets and resolve bare keys to their unique dotted form."""
    out: dict[str, str] = {}
    for key, value in kv.items():
        if key in _PRESET_KEYS:
            table = _PRESET_KEYS[key]
            if value not in table:
                raise ConfigError(
                    f"unknown preset {value!r} for {key}; expected one of {sorted(table)}"
                )
            out.update(table[value])
            continue
        if key in known:
            out[key] = value
            continue
        matches = [k for k in known if k.rsplit(".", 1)[-1] == key]
        if len(matches) == 1:
            out[matches[0]] = value
        elif len(matches) > 1:
            raise ConfigError(f"ambiguous key: {key} (matches {matches})")
        else:
            raise ConfigError(f"unknown key: {key}")
    return out


# ---------------------------------------------------------------------------
# text round trip
# ---------------------------------------------------------------------------


def parse_kv_text(text: str) -> dict[str, str]:
    """`key = value` lines; '#' comments and blank lines ignored."""
    out: dict[str, str] = {}
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected 'key = value', got {raw!r}")
        key, value = line.split("=", 1)
        out[key.strip()] = value.strip()
    return out


def serialize_config(cfg: RunConfig) -> str:
    lines = [f"{k} = {v}" for k, v in to_flat(cfg).items()]
    return "\n".join(lines) + "\n"


def load_config(path=None, overrides: dict[str, str] | None = None) -> RunConfig:
    """defaults <- file <- overrides, later layers winning key by key."""
    known = to_flat(RunConfig())
    merged = dict(known)
    if path is not None:
        with open(path, "r", encoding="utf-8") as f:
            merged.update(_resolve_keys(parse_kv_text(f.read()), known))
    if overrides:
        merged.update(_resolve_keys(overrides, known))
    cfg = from_flat(merged)
    cfg.validate()
    return cfg


def parse_cli_overrides(pairs: list[str]) -> dict[str, str]:
    """['--aug.mode=shared', ...] -> {'aug.mode': 'shared', ...}"""
    out: dict[str, str] = {}
    for item in pairs:
        body = item[2:] if item.startswith("--") else item
        if "=" not in body:
            raise ConfigError(f"override {item!r} is not of the form --key=value")
        key, value = body.split("=", 1)
        out[key.strip()] = value.strip()
    return out


# ---------------------------------------------------------------------------
# grids
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class GridSpec:
    """Cartesian sweep over mode, dataset size, step budget, and model size."""

    base: RunConfig
    modes: tuple[str, ...]
    n_samples: tuple[int, ...]
    total_steps: tuple[int, ...]
    model_presets: tuple[str, ...]

    def validate(self) -> None:
        # the base may be mid-sweep-invalid (e.g. long warmup vs short cells);
        # each derived cell is validated when it runs
        for m in self.modes:
            if m not in ("original", "shared", "crop_resize", "crop"):
                raise ConfigError(f"unknown mode {m!r} in grid")
        for p in self.model_presets:
            if p not in MODEL_PRESETS:
                raise ConfigError(f"unknown model preset {p!r} in grid")
        if min(len(self.modes), len(self.n_samples), len(self.total_steps), len(self.model_presets)) < 1:
            raise ConfigError("every grid axis needs at least one value")

    def cells(self) -> list[RunConfig]:
        """One RunConfig per grid cell, each with a unique derived run id.

        Warmup lengths are clamped to 10% of the cell's step budget so short
        cells stay valid under a base config tuned for longer runs.
        """
        self.validate()
        tag = self.base.run.id or "grid"
        out = []
        for mode in self.modes:
            for ns in self.n_samples:
                for steps in self.total_steps:
                    for preset in self.model_presets:
                        warmup = min(self.base.train.warmup_steps, max(steps // 10, 1))
                        overrides = dict(MODEL_PRESETS[preset])
                        overrides.update(
                            {
                                "aug.mode": mode,
                                "data.n_samples": str(ns),
                                "train.total_steps": str(steps),
                                "train.warmup_steps": str(warmup),
                                "train.tau_t_warmup_steps": str(
                                    min(self.base.train.tau_t_warmup_steps, max(steps // 10, 1))
                                ),
                                "run.id": f"{tag}-{mode}-n{ns}-t{steps}-{preset}",
                            }
                        )
                        out.append(self.base.replace_keys(overrides))
        return out


def load_grid(path) -> GridSpec:
    """Grid file: sweep.* keys hold comma lists; all other keys set the base."""
    with open(path, "r", encoding="utf-8") as f:
        kv = parse_kv_text(f.read())
    sweep = {k: v for k, v in kv.items() if k.startswith("sweep.")}
    base_kv = {k: v for k, v in kv.items() if not k.startswith("sweep.")}
    known = to_flat(RunConfig())
    merged = dict(known)
    merged.update(_resolve_keys(base_kv, known))
    base = from_flat(merged)

    def split_list(key: str, fallback) -> tuple:
        if key not in sweep:
            return (fallback,)
        return tuple(p.strip() for p in sweep.pop(key).split(",") if p.strip())

    modes = split_list("sweep.mode", base.aug.mode)
    n_samples = tuple(int(x) for x in split_list("sweep.n_samples", base.data.n_samples))
    steps = tuple(int(x) for x in split_list("sweep.total_steps", base.train.total_steps))
    models = split_list("sweep.model", "desk")
    if sweep:
        raise ConfigError(f"unknown key: {sorted(sweep)[0]}")
    spec = GridSpec(
        base=base,
        modes=modes,
        n_samples=n_samples,
        total_steps=steps,
        model_presets=models,
    )
    spec.validate()
    return spec
