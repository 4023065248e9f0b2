"""Flat ``key = value`` experiment configs.

One assignment per line, ``#`` starts a comment, and comma-separated values
become lists. Values are parsed as int, float, bool or left as strings.
"""

from dataclasses import dataclass, field


class ConfigError(ValueError):
    """Malformed or incomplete configuration."""


def _scalar(text):
    low = text.lower()
    if low in ("true", "yes", "on"):
        return True
    if low in ("false", "no", "off"):
        return False
    for cast in (int, float):
        try:
            return cast(text)
        except ValueError:
            pass
    return text


def parse_value(text):
    text = text.strip()
    if "," in text:
        return [_scalar(part.strip()) for part in text.split(",") if part.strip()]
    return _scalar(text)


def parse_config(text):
    """Parse config text into a dict, rejecting malformed or duplicate keys."""
    out = {}
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected key = value, got {raw.strip()!r}")
        key, value = (s.strip() for s in line.split("=", 1))
        if not key or not key.replace("_", "").replace("-", "").isalnum():
            raise ConfigError(f"line {lineno}: bad key {key!r}")
        if key in out:
            raise ConfigError(f"line {lineno}: duplicate key {key!r}")
        if not value:
            raise ConfigError(f"line {lineno}: empty value for {key!r}")
        out[key.replace("-", "_")] = parse_value(value)
    return out


def load_config(path):
    try:
        with open(path, encoding="utf-8") as fh:
            return parse_config(fh.read())
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc


def format_config(values):
    lines = []
    for key in sorted(values):
        v = values[key]
        if isinstance(v, (list, tuple)):
            v = ", ".join(str(x) for x in v)
        lines.append(f"{key} = {v}")
    return "\n".join(lines) + "\n"


@dataclass
class ExperimentConfig:
    """Command-specific settings with defaults merged under user values."""

    command: str
    values: dict = field(default_factory=dict)

    def get(self, key, default=None):
        return self.values.get(key, default)

    def require(self, key):
        if key not in self.values:
            raise ConfigError(f"{self.command}: missing required key {key!r}")
        return self.values[key]

    def as_list(self, key, default=None, kind=None):
        v = self.values.get(key, default)
        if v is None:
            return None
        items = list(v) if isinstance(v, (list, tuple)) else [v]
        if kind is not None:
            try:
                items = [kind(x) for x in items]
            except (TypeError, ValueError) as exc:
                raise ConfigError(f"{self.command}: bad value in {key!r}: {exc}") from exc
        return items

    def number(self, key, default=None, kind=float, positive=False):
        v = self.values.get(key, default)
        if v is None:
            raise ConfigError(f"{self.command}: missing required key {key!r}")
        if isinstance(v, bool) or not isinstance(v, (int, float)):
            raise ConfigError(f"{self.command}: {key!r} must be numeric, got {v!r}")
        v = kind(v)
        if positive and v <= 0:
            raise ConfigError(f"{self.command}: {key!r} must be positive, got {v}")
        return v

    def positive_ints(self, key, default=None):
        items = self.as_list(key, default)
        if not items:
            raise ConfigError(f"{self.command}: {key!r} must be a non-empty list")
        out = []
        for x in items:
            if isinstance(x, bool) or not isinstance(x, (int, float)) or int(x) != x or x <= 0:
                raise ConfigError(f"{self.command}: {key!r} entries must be positive integers, got {x!r}")
            out.append(int(x))
        return out
