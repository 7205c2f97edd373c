"""Flat key=value configuration.

Settings use dotted keys (`counter.write_latency_ms = 20`). Files may be
written either TOML-style with `[section]` headers or as plain dotted
`key = value` lines; values can be bare or quoted. Secrets (counter key,
volume master key) arrive only through this trusted channel, standing in
for attested secret delivery.
"""

from __future__ import annotations

from pathlib import Path
from typing import Any

from .errors import ConfigError


def _parse_value(raw: str) -> Any:
    raw = raw.strip()
    if len(raw) >= 2 and raw[0] == raw[-1] and raw[0] in "\"'":
        return raw[1:-1]
    low = raw.lower()
    if low in ("true", "false"):
        return low == "true"
    try:
        return int(raw, 0)
    except ValueError:
        pass
    try:
        return float(raw)
    except ValueError:
        pass
    return raw


def parse_config(text: str) -> dict[str, Any]:
    out: dict[str, Any] = {}
    section = ""
    for lineno, line in enumerate(text.splitlines(), start=1):
        stripped = line.strip()
        if not stripped or stripped.startswith(("#", ";")):
            continue
        if stripped.startswith("[") and stripped.endswith("]"):
            section = stripped[1:-1].strip()
            if not section:
                raise ConfigError(f"line {lineno}: empty section header")
            continue
        if "=" not in stripped:
            raise ConfigError(f"line {lineno}: expected key = value")
        key, _, raw = stripped.partition("=")
        key = key.strip()
        if not key:
            raise ConfigError(f"line {lineno}: empty key")
        full = f"{section}.{key}" if section else key
        out[full] = _parse_value(raw)
    return out


def load_config(path: str | Path) -> dict[str, Any]:
    try:
        text = Path(path).read_text()
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    return parse_config(text)


def get_bytes_hex(cfg: dict[str, Any], key: str, length: int | None = None) -> bytes:
    raw = cfg.get(key)
    if raw is None:
        raise ConfigError(f"missing config key: {key}")
    try:
        value = bytes.fromhex(str(raw))
    except ValueError as exc:
        raise ConfigError(f"{key}: not valid hex") from exc
    if length is not None and len(value) != length:
        raise ConfigError(f"{key}: expected {length} bytes, got {len(value)}")
    return value
