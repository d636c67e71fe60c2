"""Flat ``key = value`` run configuration.

Every key has a type, a default and a one-line description; the table is
the single source for parsing, CLI overrides and the README reference.
"""
from __future__ import annotations

from dataclasses import dataclass, fields, field, replace
from pathlib import Path


class ConfigError(ValueError):
    pass


def _floats(text: str) -> tuple[float, ...]:
    text = text.strip()
    return tuple(float(t) for t in text.split(",") if t.strip()) if text else ()


def _ints(text: str) -> tuple[int, ...]:
    text = text.strip()
    return tuple(int(t) for t in text.split(",") if t.strip()) if text else ()


def _bool(text: str) -> bool:
    t = text.strip().lower()
    if t in ("1", "true", "yes", "on"):
        return True
    if t in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {text!r}")


def _key(name, default, doc, parse=None):
    return field(default=default, metadata={"key": name, "doc": doc, "parse": parse})


@dataclass(frozen=True)
class RunConfig:
    seed: int = _key("seed", 0, "master seed; every random stream derives from it")

    n_train: int = _key("data.n_train", 4000, "fine-tuning training samples")
    n_test: int = _key("data.n_test", 1000, "held-out evaluation samples")
    n_features: int = _key("data.n_features", 16, "input dimension")
    n_classes: int = _key("data.n_classes", 4, "number of blob classes")
    noise: float = _key("data.noise", 1.0, "per-feature std of every blob")
    shift: float = _key("data.shift", 1.0, "strength of the input shift between pre-training and fine-tuning data")
    task: str = _key("data.task", "shift", "shift (inputs move, labels kept) | teacher (inputs kept, labels from a perturbed copy of the pre-trained net)")
    teacher_strength: float = _key("data.teacher_strength", 1.0, "weight noise of the teacher's top layer, relative to mean |w|; lower layers get proportionally less")
    probe_size: int = _key("data.probe_size", 256, "fixed probe batch for activation checkpoints")

    layers: int = _key("model.layers", 8, "number of freezable dense layers")
    width: int = _key("model.width", 32, "width of every dense layer")
    activation: str = _key("model.activation", "relu", "identity | relu | tanh")

    pretrain_epochs: int = _key("pretrain.epochs", 4, "epochs of full training on the pre-training distribution")
    pretrain_lr: float = _key("pretrain.lr", 0.05, "learning rate for pre-training")

    epochs: int = _key("train.epochs", 4, "fine-tuning epochs")
    batch_size: int = _key("train.batch_size", 32, "mini-batch size")
    lr: float = _key("train.lr", 0.05, "base learning rate")
    lr_schedule: str = _key("train.lr_schedule", "stepped", "constant | stepped")
    decay_points: tuple = _key("train.decay_points", (0.3, 0.6), "stepped schedule decay points (fractions of all iterations)", _floats)
    decay_factor: float = _key("train.decay_factor", 0.1, "multiplier applied at each decay point")

    freezing: str = _key("freeze.mode", "auto", "auto | static | off | schedule | observe (test runs but nothing freezes)")
    static_prefix: int = _key("freeze.static_prefix", 0, "frozen prefix for static mode")
    schedule: tuple = _key("freeze.schedule", (), "boundary after each interval for schedule mode", _ints)
    intervals_per_epoch: int = _key("freeze.intervals_per_epoch", 5, "gradient-norm test intervals per epoch")
    percentile: float = _key("freeze.percentile", 50.0, "percentile N of the freezing test")
    percentile_method: str = _key("freeze.percentile_method", "linear", "linear | nearest")
    include_bias: bool = _key("freeze.include_bias", True, "include bias gradients in the accumulated norm", _bool)

    cache_enabled: bool = _key("cache.enabled", False, "cache frozen-prefix activations", _bool)
    cache_memory_mb: float = _key("cache.memory_mb", 64.0, "memory tier capacity (MiB)")
    cache_disk_mb: float = _key("cache.disk_mb", 0.0, "disk tier capacity (MiB)")
    cache_dir: str = _key("cache.dir", "", "disk tier directory (default: <out>/cache)")
    cache_pipeline: str = _key("cache.pipeline", "inline", "inline | threaded")
    cache_read_mbps: float = _key("cache.read_mbps", 50.0, "simulated cache read bandwidth (MB/s)")
    cache_write_mbps: float = _key("cache.write_mbps", 50.0, "simulated cache write bandwidth (MB/s)")

    seconds_per_flop: float = _key("sim.seconds_per_flop", 1e-9, "simulated seconds per FLOP")
    copy_overhead: float = _key("sim.copy_overhead", 0.07, "trainer overhead while writing to the cache")

    svcca_threshold: float = _key("svcca.threshold", 0.9, "score at which a layer counts as converged")
    svcca_variance: float = _key("svcca.variance_keep", 0.99, "variance kept by the SVD step")

    scenario: str = _key("distsim.scenario", "", "optional distributed scenario to cost alongside the run")

    def __post_init__(self):
        counts = ("n_train", "n_test", "n_features", "n_classes", "probe_size", "layers", "width",
                  "epochs", "batch_size", "intervals_per_epoch")
        for name in counts:
            if getattr(self, name) < 1:
                raise ConfigError(f"{key_of(name)} must be positive")
        if self.layers < 2:
            raise ConfigError("model.layers must be at least 2")
        if self.pretrain_epochs < 0:
            raise ConfigError("pretrain.epochs must be non-negative")
        if self.activation not in ("identity", "relu", "tanh"):
            raise ConfigError(f"unknown model.activation {self.activation!r}")
        if self.lr <= 0:
            raise ConfigError("train.lr must be positive")
        if self.lr_schedule not in ("constant", "stepped"):
            raise ConfigError(f"unknown train.lr_schedule {self.lr_schedule!r}")
        pts = list(self.decay_points)
        if any(not 0 < p < 1 for p in pts) or pts != sorted(pts) or len(set(pts)) != len(pts):
            raise ConfigError("train.decay_points must be ascending values in (0, 1)")
        if self.freezing not in ("auto", "static", "off", "schedule", "observe"):
            raise ConfigError(f"unknown freeze.mode {self.freezing!r}")
        if self.freezing == "static" and not 0 <= self.static_prefix < self.layers:
            raise ConfigError("freeze.static_prefix must lie in [0, model.layers)")
        if self.freezing == "schedule":
            s = list(self.schedule)
            if len(s) != self.epochs * self.intervals_per_epoch:
                raise ConfigError("freeze.schedule needs one boundary per interval")
            if s != sorted(s) or min(s) < 0 or max(s) >= self.layers:
                raise ConfigError("freeze.schedule must be non-decreasing within [0, model.layers)")
        if not 0 < self.percentile < 100:
            raise ConfigError("freeze.percentile must lie in (0, 100)")
        if self.percentile_method not in ("linear", "nearest"):
            raise ConfigError(f"unknown freeze.percentile_method {self.percentile_method!r}")
        if self.cache_pipeline not in ("inline", "threaded"):
            raise ConfigError(f"unknown cache.pipeline {self.cache_pipeline!r}")
        if self.task not in ("shift", "teacher"):
            raise ConfigError(f"unknown data.task {self.task!r}")
        if self.teacher_strength < 0:
            raise ConfigError("data.teacher_strength must be non-negative")

    def with_overrides(self, pairs) -> "RunConfig":
        values = {}
        for text in pairs:
            key, value = _split(text, "--set")
            values.update(_convert({key: value}))
        return replace(self, **values)

    def to_text(self) -> str:
        lines = []
        for f in fields(self):
            v = getattr(self, f.name)
            if isinstance(v, tuple):
                v = ",".join(str(x) for x in v)
            elif isinstance(v, bool):
                v = str(v).lower()
            lines.append(f"{f.metadata['key']} = {v}")
        return "\n".join(lines) + "\n"


_BY_KEY = {f.metadata["key"]: f for f in fields(RunConfig)}


def key_of(field_name: str) -> str:
    return {f.name: f.metadata["key"] for f in fields(RunConfig)}[field_name]


def _split(text: str, where: str) -> tuple[str, str]:
    if "=" not in text:
        raise ConfigError(f"{where}: expected key = value, got {text!r}")
    key, value = text.split("=", 1)
    return key.strip(), value.strip()


def _convert(raw: dict[str, str], lines: dict[str, int] | None = None) -> dict:
    out = {}
    for key, text in raw.items():
        where = f"line {lines[key]}: " if lines else ""
        f = _BY_KEY.get(key)
        if f is None:
            raise ConfigError(f"{where}unknown key {key!r}")
        parse = f.metadata["parse"] or type(f.default)
        try:
            out[f.name] = parse(text)
        except ValueError as exc:
            raise ConfigError(f"{where}bad value for {key}: {exc}") from None
    return out


def parse_config(text: str) -> RunConfig:
    raw, lines = {}, {}
    for n, line in enumerate(text.splitlines(), start=1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        key, value = _split(line, f"line {n}")
        raw[key] = value
        lines[key] = n
    return RunConfig(**_convert(raw, lines))


def load_config(path: str | Path | None, overrides=(), seed: int | None = None) -> RunConfig:
    cfg = parse_config(Path(path).read_text()) if path else RunConfig()
    cfg = cfg.with_overrides(overrides)
    if seed is not None:
        cfg = replace(cfg, seed=seed)
    return cfg


def reference_table() -> str:
    rows = ["| key | default | meaning |", "|---|---|---|"]
    for f in fields(RunConfig):
        d = f.default
        if isinstance(d, tuple):
            d = ",".join(str(x) for x in d)
        rows.append(f"| `{f.metadata['key']}` | `{d}` | {f.metadata['doc']} |")
    return "\n".join(rows)
