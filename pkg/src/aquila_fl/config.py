"""Run configuration: a flat key = value text format that round-trips.

Example config::

    # problem
    problem = quadratic
    dim = 8
    cond = 4.0
    devices = 10
    rounds = 200
    alpha = 0.1
    beta = 0.25
    level_policy = aquila
    partition = iid
    seed = 0

Unknown keys are rejected. Optional keys left empty ("gamma =") stay unset.
"""

from __future__ import annotations

from dataclasses import dataclass, fields
from pathlib import Path

from .errors import ConfigError

PROBLEM_KINDS = ("quadratic", "logistic", "mlp")

# attribute name -> config key (only where they differ)
_KEY_ALIASES = {"p_factor": "p"}


@dataclass
class RunConfig:
    problem: str = "quadratic"
    dim: int = 8                 # quadratic dimension, or feature count
    cond: float = 4.0            # quadratic condition number
    classes: int = 10
    samples: int = 2000
    hidden: int = 16
    reg: float = 1e-3
    devices: int = 10
    rounds: int = 200
    alpha: float = 0.1
    beta: float = 0.25
    level_policy: str = "aquila"
    partition: str = "iid"       # "iid" or "noniid:<classes_per_device>"
    hetero_ratios: str = ""      # "" = homogeneous, else e.g. "1.0,0.5"
    seed: int = 0
    header_bits: int = 40
    gamma: float | None = None   # override for the per-round checks
    p_factor: float = 0.1        # Young parameter of the full-participation gate
    tol: float | None = None     # optimality-gap target for rounds_to_tol
    out_dir: str = ""

    def validate(self) -> None:
        if self.problem not in PROBLEM_KINDS:
            raise ConfigError(f"problem must be one of {PROBLEM_KINDS}, got {self.problem!r}")
        if self.dim < 1 or self.devices < 1 or self.rounds < 0:
            raise ConfigError("dim and devices must be >= 1, rounds >= 0")
        if self.classes < 2 and self.problem != "quadratic":
            raise ConfigError("classification problems need classes >= 2")
        if not self.alpha > 0.0:
            raise ConfigError(f"alpha must be > 0, got {self.alpha}")
        if self.beta < 0.0:
            raise ConfigError(f"beta must be >= 0, got {self.beta}")
        if self.cond < 1.0:
            raise ConfigError(f"cond must be >= 1, got {self.cond}")
        if self.header_bits < 0:
            raise ConfigError(f"header_bits must be >= 0, got {self.header_bits}")
        if self.gamma is not None and self.gamma < 1.0:
            raise ConfigError(f"gamma override must be >= 1, got {self.gamma}")
        if not self.p_factor > 0.0:
            raise ConfigError(f"p must be > 0, got {self.p_factor}")
        if self.reg < 0.0:
            raise ConfigError(f"reg must be >= 0, got {self.reg}")
        parse_partition(self.partition)
        parse_hetero_ratios(self.hetero_ratios)
        # delayed import keeps this module free of heavier dependencies
        from .policy import parse_level_policy
        parse_level_policy(self.level_policy)


def parse_partition(text: str) -> tuple[str, int]:
    """Return (mode, classes_per_device); classes_per_device is 0 for iid."""
    token = text.strip()
    if token == "iid":
        return "iid", 0
    if token.startswith("noniid:"):
        try:
            cpd = int(token.split(":", 1)[1])
        except ValueError:
            raise ConfigError(f"bad partition {text!r}") from None
        if cpd < 1:
            raise ConfigError(f"classes_per_device must be >= 1, got {cpd}")
        return "noniid", cpd
    raise ConfigError(f"partition must be 'iid' or 'noniid:<k>', got {text!r}")


def parse_hetero_ratios(text: str) -> tuple[float, ...]:
    token = text.strip()
    if not token:
        return ()
    try:
        ratios = tuple(float(x) for x in token.split(","))
    except ValueError:
        raise ConfigError(f"bad hetero_ratios {text!r}") from None
    for r in ratios:
        if not 0.0 < r <= 1.0:
            raise ConfigError(f"hetero ratio must be in (0, 1], got {r}")
    return ratios


def _config_key(attr: str) -> str:
    return _KEY_ALIASES.get(attr, attr)


def _attr_for_key(key: str) -> str:
    for attr, alias in _KEY_ALIASES.items():
        if alias == key:
            return attr
    return key


def parse_config_text(text: str) -> RunConfig:
    cfg = RunConfig()
    known = {f.name: f for f in fields(RunConfig)}
    seen = set()
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected 'key = value', got {raw!r}")
        key, value = (part.strip() for part in line.split("=", 1))
        attr = _attr_for_key(key)
        if attr not in known:
            raise ConfigError(f"line {lineno}: unknown key {key!r}")
        if attr in seen:
            raise ConfigError(f"line {lineno}: duplicate key {key!r}")
        seen.add(attr)
        setattr(cfg, attr, _coerce(attr, known[attr].type, value))
    cfg.validate()
    return cfg


def _coerce(attr: str, ftype: str, value: str):
    if ftype == "int":
        try:
            return int(value)
        except ValueError:
            raise ConfigError(f"{attr} must be an integer, got {value!r}") from None
    if ftype == "float":
        try:
            return float(value)
        except ValueError:
            raise ConfigError(f"{attr} must be a number, got {value!r}") from None
    if ftype == "float | None":
        if value == "":
            return None
        try:
            return float(value)
        except ValueError:
            raise ConfigError(f"{attr} must be a number or empty, got {value!r}") from None
    return value


def render_config(cfg: RunConfig) -> str:
    lines = []
    for f in fields(RunConfig):
        value = getattr(cfg, f.name)
        if value is None:
            text = ""
        elif isinstance(value, float):
            text = repr(value)
        else:
            text = str(value)
        lines.append(f"{_config_key(f.name)} = {text}")
    return "\n".join(lines) + "\n"


def config_dict(cfg: RunConfig) -> dict:
    """JSON-friendly snapshot, keyed by config-file key names."""
    return {_config_key(f.name): getattr(cfg, f.name) for f in fields(RunConfig)}


def load_config(path: str | Path) -> RunConfig:
    p = Path(path)
    if not p.is_file():
        raise ConfigError(f"config file not found: {p}")
    return parse_config_text(p.read_text())
