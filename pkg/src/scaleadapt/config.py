"""Layered run configuration.

Values resolve as defaults <- config file <- environment <- flags, and the
fully resolved mapping is snapshotted into every run directory so a run can
be replayed from its own record.  Files are TOML with one optional section
per subcommand; keys outside any section are shared (task, seed, out,
workers).  Environment overrides use the SCALEADAPT_ prefix with the key
upper-cased, e.g. SCALEADAPT_PER_SCALE=40.
"""

from __future__ import annotations

import os

import tomli

ENV_PREFIX = "SCALEADAPT_"

COMMON = {"task": "tsp", "seed": 0, "out": "", "workers": 0}


class OptionError(ValueError):
    """A configuration value is missing, unknown, or of the wrong type."""


def _coerce_text(key: str, text: str, template):
    try:
        if isinstance(template, bool):
            low = text.strip().lower()
            if low in ("1", "true", "yes", "on"):
                return True
            if low in ("0", "false", "no", "off"):
                return False
            raise ValueError(text)
        if isinstance(template, int):
            return int(text)
        if isinstance(template, float):
            return float(text)
        if isinstance(template, list):
            return [int(x) for x in text.replace("[", "").replace("]", "").split(",") if x.strip()]
        return text
    except ValueError as exc:
        raise OptionError(f"cannot parse {key}={text!r}: {exc}") from exc


def _check(key: str, value, template):
    if isinstance(template, bool):
        if isinstance(value, bool):
            return value
    elif isinstance(template, int):
        if isinstance(value, int) and not isinstance(value, bool):
            return value
    elif isinstance(template, float):
        if isinstance(value, (int, float)) and not isinstance(value, bool):
            return float(value)
    elif isinstance(template, list):
        if isinstance(value, list) and all(
            isinstance(x, int) and not isinstance(x, bool) for x in value
        ):
            return [int(x) for x in value]
    elif isinstance(template, str):
        if isinstance(value, str):
            return value
    raise OptionError(
        f"{key} must be {type(template).__name__}, got {value!r}"
    )


def load_file(path) -> dict:
    try:
        with open(path, "rb") as fh:
            return tomli.load(fh)
    except FileNotFoundError as exc:
        raise OptionError(f"config file not found: {path}") from exc
    except tomli.TOMLDecodeError as exc:
        raise OptionError(f"config file {path} is not valid TOML: {exc}") from exc


def resolve(
    command: str,
    schema: dict,
    file_data: dict | None = None,
    environ=None,
    flags: dict | None = None,
) -> dict:
    """Merge one subcommand's options from every layer, strictly typed.

    `schema` maps this subcommand's own keys to their defaults (COMMON keys
    are implied).  Unknown keys addressed at this subcommand are errors;
    sections for other subcommands in a shared file are ignored.
    """
    templates = dict(COMMON)
    templates.update(schema)
    out = dict(templates)
    if file_data:
        for key, value in file_data.items():
            if isinstance(value, dict):
                if key != command:
                    continue
                for k, v in value.items():
                    if k not in schema:
                        raise OptionError(f"unknown key {command}.{k} in config file")
                    out[k] = _check(f"{command}.{k}", v, templates[k])
            elif key in COMMON:
                out[key] = _check(key, value, templates[key])
            elif key == "command":
                if not isinstance(value, str):
                    raise OptionError(f"command must be a string, got {value!r}")
            else:
                raise OptionError(f"unknown top-level key {key!r} in config file")
    if environ is None:
        environ = os.environ
    for key, template in templates.items():
        name = ENV_PREFIX + key.upper()
        if name in environ:
            out[key] = _coerce_text(key, environ[name], template)
    if flags:
        for key, value in flags.items():
            if value is None or key not in templates:
                continue
            if isinstance(value, str) and not isinstance(templates[key], str):
                out[key] = _coerce_text(key, value, templates[key])
            else:
                out[key] = _check(key, value, templates[key])
    return out


def _format_value(value) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, int):
        return str(value)
    if isinstance(value, float):
        text = repr(value)
        return text if ("." in text or "e" in text or "n" in text) else text + ".0"
    if isinstance(value, list):
        return "[" + ", ".join(str(int(x)) for x in value) + "]"
    escaped = str(value).replace("\\", "\\\\").replace('"', '\\"')
    return f'"{escaped}"'


def snapshot_text(command: str, schema: dict, values: dict) -> str:
    lines = [f'command = "{command}"']
    for key in sorted(COMMON):
        lines.append(f"{key} = {_format_value(values[key])}")
    if schema:
        lines.append("")
        lines.append(f"[{command}]")
        for key in sorted(schema):
            lines.append(f"{key} = {_format_value(values[key])}")
    return "\n".join(lines) + "\n"


def write_snapshot(path, command: str, schema: dict, values: dict) -> None:
    with open(path, "w", encoding="utf-8", newline="") as fh:
        fh.write(snapshot_text(command, schema, values))
