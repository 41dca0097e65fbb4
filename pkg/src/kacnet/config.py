"""Run configuration: defaults, flat ``key=value`` files, and flag overrides.

Precedence is flags > file > defaults.  Config files start with
``# kacnet-config v1``; blank lines and ``#`` comments are ignored.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass, fields
from pathlib import Path

from kacnet.errors import ConfigError

HEADER = "# kacnet-config v1"


@dataclass
class RunConfig:
    # paths
    images: str = ""
    queries: str = ""
    val_images: str = ""
    val_queries: str = ""
    embeddings: str = ""
    class_names: str = ""
    lexicon: str = ""
    checkpoint: str = "kac.ckpt"
    metrics_log: str = ""
    out_dir: str = "synth"
    report: str = ""
    per_query_csv: str = ""
    tags: str = ""
    # objective and architecture
    lam: float = 10.0
    mu: float = 0.005
    m: int = 128
    d_q: int = 512
    d_r: int = 512
    embed_dim: int = 300
    gate: str = "soft"
    threshold: float = 0.3
    branches: str = "kac"
    # optimization
    batch_size: int = 40
    lr: float = 1e-3
    epochs: int = 20
    clip: float = 10.0
    seed: int = 0
    n_cap: int = 100
    # synthetic benchmark
    syn_classes: int = 10
    syn_proposals: int = 8
    syn_feature_dim: int = 32
    syn_images: int = 500
    syn_test_images: int = 100
    syn_noise: float = 0.5
    syn_overlap: float = 0.3
    syn_corrupt: float = 0.1

    def validate(self) -> "RunConfig":
        if self.lam < 0 or self.mu < 0:
            raise ConfigError("lam and mu must be non-negative")
        if self.batch_size < 1:
            raise ConfigError("batch_size must be at least 1")
        if self.gate not in ("hard", "soft", "none"):
            raise ConfigError(f"gate must be hard, soft, or none; got {self.gate!r}")
        if self.branches not in ("lc", "vc", "kac"):
            raise ConfigError(f"branches must be lc, vc, or kac; got {self.branches!r}")
        if not 0.0 <= self.threshold <= 1.0:
            raise ConfigError("threshold must lie in [0, 1]")
        if self.epochs < 0 or self.lr < 0:
            raise ConfigError("epochs and lr must be non-negative")
        for key in ("m", "d_q", "d_r", "embed_dim", "n_cap"):
            if getattr(self, key) < 1:
                raise ConfigError(f"{key} must be positive")
        return self

    def to_dict(self) -> dict:
        return asdict(self)

    def updated(self, values: dict) -> "RunConfig":
        data = self.to_dict()
        types = {f.name: f.type for f in fields(self)}
        for key, raw in values.items():
            if key not in types:
                raise ConfigError(f"unknown config key {key!r}")
            data[key] = _coerce(key, raw, types[key])
        return RunConfig(**data)


def _coerce(key: str, raw, typ: str):
    if raw is None:
        return None
    try:
        if typ == "int":
            return int(raw)
        if typ == "float":
            return float(raw)
    except (TypeError, ValueError):
        raise ConfigError(f"config key {key!r} expects {typ}, got {raw!r}") from None
    return str(raw)


def read_config_file(path) -> dict[str, str]:
    try:
        lines = Path(path).read_text().splitlines()
    except OSError as exc:
        raise ConfigError(f"{path}: cannot read config ({exc.strerror})") from None
    if lines and lines[0].startswith("# kacnet-config") and lines[0] != HEADER:
        raise ConfigError(f"{path}:1: unsupported config header {lines[0]!r}")
    values: dict[str, str] = {}
    for lineno, line in enumerate(lines, start=1):
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        key, sep, value = line.partition("=")
        if not sep:
            raise ConfigError(f"{path}:{lineno}: expected key=value")
        values[key.strip()] = value.strip()
    return values


def write_config_file(path, cfg: RunConfig) -> None:
    body = "".join(f"{k}={v}\n" for k, v in cfg.to_dict().items())
    Path(path).write_text(HEADER + "\n" + body)


def resolve(config_path: str | None, overrides: dict, base: dict | None = None) -> RunConfig:
    """Layer ``base`` (e.g. a checkpoint's stored config), the file, then flags over the defaults."""
    cfg = RunConfig()
    if base:
        cfg = cfg.updated({k: v for k, v in base.items() if k in cfg.to_dict()})
    if config_path:
        cfg = cfg.updated(read_config_file(config_path))
    cfg = cfg.updated({k: v for k, v in overrides.items() if v is not None})
    return cfg.validate()
