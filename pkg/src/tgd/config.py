"""Run configuration as flat ``section.key=value`` text.

Sections: ``data``, ``pi``, ``teacher1``, ``teacher2``, ``student``,
``distill`` and ``run``.  Values are ``none``, ``true``/``false``, numbers,
comma-separated tuples or bare strings; floats are written with ``repr`` so
a resolved file reproduces the run exactly.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field
from pathlib import Path

from .distill import DistillConfig
from .errors import ConfigError
from .nets import NetSpec
from .tda import PiParams
from .tensor import atomic_write


@dataclass
class DataConfig:
    source: str = "bars"  # cifar | bars | blobs
    path: str = ""  # CIFAR-10 directory when source=cifar
    subset_size: int | None = None  # balanced CIFAR training prefix
    test_subset_size: int | None = None
    n_train: int = 5000
    n_test: int = 2000
    num_classes: int = 4
    size: int = 32
    noise: float = 0.08
    label_noise: float = 0.0  # fraction of training labels flipped
    seed: int = 0

    def __post_init__(self):
        if self.source not in ("cifar", "bars", "blobs"):
            raise ConfigError(f"data.source must be cifar, bars or blobs, got {self.source!r}")
        if self.source == "cifar":
            self.num_classes = 10
            self.size = 32
        if not 0.0 <= self.label_noise < 1.0:
            raise ConfigError("data.label_noise must lie in [0, 1)")


@dataclass
class RunSection:
    out: str = "runs"
    seed: int = 0
    pi_cache: str = ""  # default <out>/pi_cache.bin
    teacher1_ckpt: str = ""  # default <out>/teacher1.ckpt
    teacher2_ckpt: str = ""  # default <out>/teacher2.ckpt
    init_ckpt: str = ""  # anneal source, default <out>/student_scratch.ckpt
    workers: int = 1

    def path(self, key: str, default_name: str) -> Path:
        value = getattr(self, key)
        return (Path(value) if value else Path(self.out) / default_name).absolute()


# parameter count grows with width squared: width 4 vs 8 is a 4x capacity gap
DEFAULT_TEACHER1 = dict(base_width=8, stem_stride=2)
DEFAULT_TEACHER2 = dict(base_width=8, stem_stride=2, convs_per_block=1)
DEFAULT_STUDENT = dict(base_width=4, stem_stride=2)


@dataclass
class RunConfig:
    data: DataConfig = field(default_factory=DataConfig)
    pi: PiParams = field(default_factory=PiParams)
    teacher1: NetSpec = field(default_factory=lambda: NetSpec(**DEFAULT_TEACHER1))
    teacher2: NetSpec = field(default_factory=lambda: NetSpec(**DEFAULT_TEACHER2))
    student: NetSpec = field(default_factory=lambda: NetSpec(**DEFAULT_STUDENT))
    distill: DistillConfig = field(default_factory=DistillConfig)
    run: RunSection = field(default_factory=RunSection)

    def resolved(self) -> RunConfig:
        """Fill in derived fields: network input shapes, class counts, the shared seed and file paths."""
        raw_shape = (self.data.size, self.data.size, 3)
        pi_shape = (self.pi.grid_size, self.pi.grid_size, self.pi.channels)
        k = self.data.num_classes
        return dataclasses.replace(
            self,
            teacher1=dataclasses.replace(self.teacher1, input_shape=raw_shape, num_classes=k),
            student=dataclasses.replace(self.student, input_shape=raw_shape, num_classes=k),
            teacher2=dataclasses.replace(self.teacher2, input_shape=pi_shape, num_classes=k),
            distill=dataclasses.replace(self.distill, seed=self.run.seed),
            run=dataclasses.replace(
                self.run,
                pi_cache=str(self.run.path("pi_cache", "pi_cache.bin")),
                teacher1_ckpt=str(self.run.path("teacher1_ckpt", "teacher1.ckpt")),
                teacher2_ckpt=str(self.run.path("teacher2_ckpt", "teacher2.ckpt")),
                init_ckpt=str(self.run.path("init_ckpt", "student_scratch.ckpt")),
            ),
        )


SECTIONS = tuple(f.name for f in dataclasses.fields(RunConfig))
# the seed lives in run.seed only
_SKIP = {("distill", "seed")}


def format_value(v) -> str:
    if v is None:
        return "none"
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, float):
        return repr(v)
    if isinstance(v, (tuple, list)):
        return ",".join(format_value(x) for x in v) + ("," if len(v) == 1 else "")
    return str(v)


def parse_value(text: str):
    text = text.strip()
    low = text.lower()
    if low == "none":
        return None
    if low in ("true", "false"):
        return low == "true"
    if "," in text:
        return tuple(parse_value(p) for p in text.split(",") if p.strip())
    for cast in (int, float):
        try:
            return cast(text)
        except ValueError:
            pass
    return text


def _coerce(default, value, key):
    if value is None or default is None:
        return value
    try:
        if isinstance(default, bool):
            if not isinstance(value, bool):
                raise ValueError
            return value
        if isinstance(default, int):
            if isinstance(value, float) and not value.is_integer():
                raise ValueError
            return int(value)
        if isinstance(default, float):
            return float(value)
        if isinstance(default, tuple):
            if value == "":
                return ()
            value = value if isinstance(value, tuple) else (value,)
            kinds = {type(x) for x in default}
            return tuple(float(x) if float in kinds else x for x in value)
        if isinstance(default, str):
            return str(value)
    except (TypeError, ValueError):
        raise ConfigError(f"bad value {value!r} for {key}") from None
    return value


def parse_lines(text: str, origin: str = "<config>") -> dict[str, str]:
    """``key=value`` lines to a dict; ``#`` starts a comment."""
    out = {}
    for n, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{origin}:{n}: expected key=value, got {line!r}")
        key, value = (s.strip() for s in line.split("=", 1))
        out[key] = value
    return out


def build_config(values: dict[str, str]) -> RunConfig:
    """Assemble a :class:`RunConfig` from dotted keys, validating names and types."""
    base = RunConfig()
    grouped: dict[str, dict] = {s: {} for s in SECTIONS}
    for key, text in values.items():
        section, _, name = key.partition(".")
        if section not in grouped or not name:
            raise ConfigError(f"unknown config key {key!r}; keys look like section.name with section in {SECTIONS}")
        grouped[section][name] = text
    kwargs = {}
    for section in SECTIONS:
        current = getattr(base, section)
        names = {f.name for f in dataclasses.fields(current)}
        updates = {}
        for name, text in grouped[section].items():
            if name not in names or (section, name) in _SKIP:
                raise ConfigError(f"unknown config key {section}.{name}")
            updates[name] = _coerce(getattr(current, name), parse_value(text), f"{section}.{name}")
        if section == "distill" and "mode" in updates:
            # mode-dependent defaults resolve again unless given explicitly
            for auto in ("alpha", "anneal"):
                updates.setdefault(auto, None)
        try:
            kwargs[section] = dataclasses.replace(current, **updates)
        except (TypeError, ValueError) as exc:
            if isinstance(exc, ConfigError):
                raise
            raise ConfigError(f"invalid {section} settings: {exc}") from None
    return RunConfig(**kwargs)


def load_config(path=None, overrides: dict[str, str] | None = None) -> RunConfig:
    values = {}
    if path is not None:
        try:
            text = Path(path).read_text()
        except OSError as exc:
            raise ConfigError(f"cannot read config {path}: {exc.strerror}") from None
        values.update(parse_lines(text, str(path)))
    values.update(overrides or {})
    return build_config(values)


def dump_config(cfg: RunConfig) -> str:
    lines = []
    for section in SECTIONS:
        obj = getattr(cfg, section)
        for f in dataclasses.fields(obj):
            if (section, f.name) in _SKIP:
                continue
            lines.append(f"{section}.{f.name}={format_value(getattr(obj, f.name))}")
    return "\n".join(lines) + "\n"


def write_config(path, cfg: RunConfig):
    atomic_write(path, dump_config(cfg))
