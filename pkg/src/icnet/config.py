"""INI-style run configuration with typed sections and line-numbered errors.

``configparser`` is not used because it does not report the line of a bad
value and silently merges some duplicates; the grammar here is tiny.
"""

import dataclasses
from dataclasses import dataclass, field, fields

from icnet.errors import ConfigError
from icnet.model import IcnetConfig
from icnet.train import TrainConfig


def tokenize(text):
    """Yield ``(section, key, value, lineno)`` from INI text.

    Blank lines and ``#`` comments (full-line or trailing) are skipped. A key
    repeated within one section header raises :class:`ConfigError`.
    """
    section = None
    seen = {}
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if line.startswith("["):
            if not line.endswith("]") or len(line) < 3:
                raise ConfigError(f"line {lineno}: malformed section header {raw.strip()!r}")
            section = " ".join(line[1:-1].split())
            seen.setdefault(section, {})
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected 'key = value', got {raw.strip()!r}")
        if section is None:
            raise ConfigError(f"line {lineno}: key outside any [section]")
        key, value = (s.strip() for s in line.split("=", 1))
        if not key:
            raise ConfigError(f"line {lineno}: empty key")
        if key in seen[section]:
            raise ConfigError(f"line {lineno}: duplicate key {key!r} in [{section}] (first set on line {seen[section][key]})")
        seen[section][key] = lineno
        yield section, key, value, lineno


@dataclass
class DataConfig:
    """Synthetic benchmark. The class count comes from ``[model] num_classes``."""

    root: str = ""  # empty: generate in memory
    train_count: int = 1000
    test_count: int = 200
    height: int = 96
    width: int = 96
    rects: int = 2
    disks: int = 3
    poles: int = 3
    blobs: int = 4
    color_jitter: int = 40
    noise: int = 10
    seed: int = 0

    def validate(self):
        if self.train_count < 1 or self.test_count < 1:
            raise ConfigError("train_count and test_count must be >= 1")
        if self.height % 32 or self.width % 32 or self.height < 32 or self.width < 32:
            raise ConfigError("data height and width must be positive multiples of 32")
        return self


@dataclass
class EvalConfig:
    branches: str = "124"
    hist_bins: int = 30
    hist_interval: int = 3000
    region_source: str = "gt"  # gt | pred
    connectivity: int = 4
    batch: int = 25

    def validate(self):
        if self.branches not in ("4", "24", "124"):
            raise ConfigError("eval.branches must be 4, 24 or 124")
        if self.region_source not in ("gt", "pred"):
            raise ConfigError("eval.region_source must be gt or pred")
        if self.connectivity not in (4, 8):
            raise ConfigError("eval.connectivity must be 4 or 8")
        if self.hist_bins < 1 or self.hist_interval < 1 or self.batch < 1:
            raise ConfigError("hist_bins, hist_interval and batch must be >= 1")
        return self


SECTIONS = {"model": IcnetConfig, "train": TrainConfig, "data": DataConfig, "eval": EvalConfig}
ALIASES = {("model", "lambda"): "lambdas"}


@dataclass
class RunConfig:
    model: IcnetConfig = field(default_factory=IcnetConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    data: DataConfig = field(default_factory=DataConfig)
    eval: EvalConfig = field(default_factory=EvalConfig)

    def validate(self):
        for name in SECTIONS:
            getattr(self, name).validate()
        return self

    def scene_spec(self, seed=None):
        from icnet.data import SceneSpec

        d = self.data
        return SceneSpec(
            height=d.height,
            width=d.width,
            num_classes=self.model.num_classes,
            rects=d.rects,
            disks=d.disks,
            poles=d.poles,
            blobs=d.blobs,
            color_jitter=d.color_jitter,
            noise=d.noise,
            seed=d.seed if seed is None else seed,
        )

    def to_text(self):
        """Fully resolved config; parses back to an equal :class:`RunConfig`."""
        out = []
        for name in SECTIONS:
            out.append(f"[{name}]")
            obj = getattr(self, name)
            for f in fields(obj):
                out.append(f"{f.name} = {format_value(getattr(obj, f.name))}")
            out.append("")
        return "\n".join(out)

    def set(self, section, key, value, where="override"):
        """Assign one string ``value``; ``where`` prefixes error messages."""
        if section not in SECTIONS:
            raise ConfigError(f"{where}: unknown section [{section}]")
        key = ALIASES.get((section, key), key)
        obj = getattr(self, section)
        ftypes = {f.name: f for f in fields(obj)}
        if key not in ftypes:
            raise ConfigError(f"{where}: unknown key {key!r} in [{section}]")
        default = ftypes[key].default
        if default is dataclasses.MISSING:
            default = ftypes[key].default_factory()
        setattr(obj, key, coerce(value, default, f"{where}: {section}.{key}"))


def config_keys():
    """Every ``section.key`` accepted, in declaration order."""
    return [f"{name}.{f.name}" for name, cls in SECTIONS.items() for f in fields(cls)]


def format_value(v):
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, (tuple, list)):
        return ",".join(format_value(x) for x in v)
    return str(v)


def _scalar(text, like, where):
    try:
        if isinstance(like, bool):
            low = text.lower()
            if low in ("true", "yes", "on", "1"):
                return True
            if low in ("false", "no", "off", "0"):
                return False
            raise ValueError
        if isinstance(like, int):
            return int(text)
        if isinstance(like, float):
            return float(text)
    except ValueError:
        raise ConfigError(f"{where}: expected {type(like).__name__}, got {text!r}") from None
    return text


def coerce(text, default, where):
    """Convert ``text`` to the type of ``default`` (tuples: comma separated)."""
    if isinstance(default, tuple):
        parts = [p.strip() for p in text.split(",") if p.strip()]
        if not parts:
            raise ConfigError(f"{where}: expected a comma-separated list, got {text!r}")
        like = default[0] if default else 0
        return tuple(_scalar(p, like, where) for p in parts)
    return _scalar(text, default, where)


def parse_config(text):
    """Parse INI text into a validated :class:`RunConfig` with defaults filled."""
    cfg = RunConfig()
    for section, key, value, lineno in tokenize(text):
        cfg.set(section, key, value, where=f"line {lineno}")
    return cfg.validate()


def load_config(path):
    try:
        with open(path) as f:
            text = f.read()
    except OSError as e:
        raise ConfigError(f"cannot read config {path}: {e}") from e
    return parse_config(text)
