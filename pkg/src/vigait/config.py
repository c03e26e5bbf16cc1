"""Plain-text run configuration: ``key = value`` lines with ``#`` comments.

Values from the file fill in anything not given on the command line; a key
that no command understands is rejected so typos fail loudly.
"""

from __future__ import annotations

import configparser
from pathlib import Path

_SECTION = "run"


class ConfigError(ValueError):
    pass


def normalize_key(key: str) -> str:
    return key.strip().lower().replace("-", "_")


def parse_config(text: str, source: str = "<config>") -> dict[str, str]:
    parser = configparser.ConfigParser(
        delimiters=("=",), comment_prefixes=("#",), inline_comment_prefixes=("#",), interpolation=None
    )
    parser.optionxform = normalize_key
    try:
        parser.read_string(f"[{_SECTION}]\n{text}", source=source)
    except configparser.DuplicateOptionError as exc:
        # line numbers are shifted by the synthetic section header
        raise ConfigError(f"{source}:{exc.lineno - 1}: duplicate key {exc.option!r}") from exc
    except configparser.ParsingError as exc:
        lineno, line = exc.errors[0]
        raise ConfigError(f"{source}:{lineno - 1}: expected 'key = value', got {line}") from exc
    except configparser.Error as exc:
        raise ConfigError(f"{source}: {exc}") from exc
    extra = [s for s in parser.sections() if s != _SECTION]
    if extra:
        raise ConfigError(f"{source}: sections are not supported ({', '.join(extra)})")
    return dict(parser[_SECTION])


def load_config(path) -> dict[str, str]:
    path = Path(path)
    return parse_config(path.read_text(encoding="utf-8"), str(path))


def parse_bool(text: str) -> bool:
    t = str(text).strip().lower()
    if t in ("1", "true", "yes", "on"):
        return True
    if t in ("0", "false", "no", "off"):
        return False
    raise ConfigError(f"not a boolean: {text!r}")


def parse_list(text: str, item=str) -> list:
    return [item(p.strip()) for p in str(text).split(",") if p.strip()]


def merge(known: dict[str, callable], file_values: dict[str, str], flags: dict[str, object]) -> dict[str, object]:
    """Flags (non-None) override file values; file values are converted with ``known[key]``."""
    unknown = sorted(set(file_values) - set(known))
    if unknown:
        raise ConfigError(f"unknown config key(s): {', '.join(unknown)}")
    out = dict(flags)
    for key, raw in file_values.items():
        if out.get(key) is None:
            try:
                out[key] = known[key](raw)
            except (ValueError, ConfigError) as exc:
                raise ConfigError(f"bad value for {key!r}: {raw!r} ({exc})") from exc
    return out
