"""Canonical sectioned ``key = value`` text used by config and checkpoint files."""

from __future__ import annotations

import configparser


class TextConfigError(ValueError):
    pass


def _fmt(value) -> str:
    if isinstance(value, (list, tuple)):
        return ",".join(str(v) for v in value)
    if value is None:
        return "none"
    if isinstance(value, float):
        return repr(value)
    return str(value)


def canonical_text(sections: dict[str, dict]) -> str:
    """Deterministic rendering: sections in given order, keys sorted."""
    out = []
    for name, values in sections.items():
        out.append(f"[{name}]")
        out.extend(f"{k} = {_fmt(values[k])}" for k in sorted(values))
        out.append("")
    return "\n".join(out)


def parse_text(text: str) -> dict[str, dict[str, str]]:
    cp = configparser.ConfigParser(interpolation=None, delimiters=("=",))
    cp.optionxform = str
    try:
        cp.read_string(text)
    except configparser.Error as exc:
        raise TextConfigError(f"config parse error: {exc}".replace("\n", " ")) from None
    return {s: dict(cp[s]) for s in cp.sections()}
