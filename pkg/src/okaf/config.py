"""Plain-text ``key = value`` config files.

Blank lines and ``#`` comments are ignored.  Section headers of the form
``[name]`` split a file into named blocks (used for per-stage recipes).
"""

from __future__ import annotations

from pathlib import Path

from .errors import ValidationError


def parse_kv(text: str) -> dict[str, dict[str, str]]:
    sections: dict[str, dict[str, str]] = {"": {}}
    current = ""
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if line.startswith("[") and line.endswith("]"):
            current = line[1:-1].strip()
            sections.setdefault(current, {})
            continue
        if "=" not in line:
            raise ValidationError(f"config line {lineno}: expected 'key = value', got {raw!r}")
        key, value = (s.strip() for s in line.split("=", 1))
        sections[current][key] = value
    return sections


def read_kv(path) -> dict[str, dict[str, str]]:
    return parse_kv(Path(path).read_text())


def format_kv(values: dict, section: str | None = None) -> str:
    lines = [f"[{section}]"] if section else []
    lines += [f"{k} = {_fmt(v)}" for k, v in values.items()]
    return "\n".join(lines) + "\n"


def _fmt(v) -> str:
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, float):
        return repr(v)
    if isinstance(v, dict):
        return ",".join(f"{k}:{_fmt(x)}" for k, x in v.items())
    return str(v)


def to_bool(s: str) -> bool:
    low = s.strip().lower()
    if low in ("1", "true", "yes", "on"):
        return True
    if low in ("0", "false", "no", "off"):
        return False
    raise ValidationError(f"not a boolean: {s!r}")


def to_map(s: str) -> dict[str, float]:
    """``"text:5,t2i:25"`` -> ``{"text": 5.0, "t2i": 25.0}``."""
    out = {}
    for item in filter(None, (p.strip() for p in s.split(","))):
        if ":" not in item:
            raise ValidationError(f"expected 'name:value' in {s!r}")
        k, v = item.split(":", 1)
        out[k.strip()] = float(v)
    return out


def coerce(template, raw: str):
    """Convert ``raw`` to the type of ``template`` (the field's default)."""
    try:
        if isinstance(template, bool):
            return to_bool(raw)
        if isinstance(template, int):
            return int(raw)
        if isinstance(template, float):
            return float(raw)
        if isinstance(template, dict):
            return to_map(raw)
    except ValueError as exc:
        raise ValidationError(f"bad config value {raw!r}: {exc}") from None
    return raw
