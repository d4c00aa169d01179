# Copyright (c) 2026, OccluPose contributors.  All rights reserved.
# SPDX-License-Identifier: GPL-2.0-or-later
"""
Declarative configuration properties.

Every tunable in the package is a dataclass field built with one of the
helpers below. Each field carries a display name, a description, its default
and its bounds so that validation, ``--help`` output and the config echo all
read from the same declaration.
"""

from dataclasses import MISSING, field, fields, is_dataclass

from .errors import ValidationError


def _prop(kind, name, description, default, **extra):
    metadata = {"kind": kind, "name": name, "description": description}
    metadata.update(extra)
    return field(default=default, metadata=metadata)


def FloatProperty(name="", description="", default=0.0, min=None, max=None):
    return _prop("float", name, description, float(default), min=min, max=max)


def IntProperty(name="", description="", default=0, min=None, max=None):
    return _prop("int", name, description, int(default), min=min, max=max)


def BoolProperty(name="", description="", default=False):
    return _prop("bool", name, description, bool(default))


def StringProperty(name="", description="", default=""):
    return _prop("string", name, description, str(default))


def EnumProperty(name="", description="", items=(), default=None):
    keys = tuple(item[0] for item in items)
    if default is None:
        default = keys[0]
    return _prop("enum", name, description, default, items=tuple(items), keys=keys)


# =============================================================================
# VALIDATION
# =============================================================================

def _check_bounds(key, value, meta):
    lo, hi = meta.get("min"), meta.get("max")
    if lo is not None and value < lo:
        raise ValidationError(f"{key}: {value} is below the minimum {lo}", key=key)
    if hi is not None and value > hi:
        raise ValidationError(f"{key}: {value} is above the maximum {hi}", key=key)


def coerce_value(key, value, meta):
    """Convert a raw JSON or command-line value into the property's type."""
    kind = meta.get("kind")
    try:
        if kind == "float":
            if isinstance(value, bool):
                raise TypeError
            value = float(value)
        elif kind == "int":
            if isinstance(value, bool) or (isinstance(value, float) and not value.is_integer()):
                raise TypeError
            value = int(value)
        elif kind == "bool":
            if isinstance(value, str):
                lowered = value.strip().lower()
                if lowered not in ("true", "false", "1", "0", "yes", "no"):
                    raise TypeError
                value = lowered in ("true", "1", "yes")
            elif not isinstance(value, bool):
                raise TypeError
        elif kind in ("string", "enum"):
            value = str(value)
    except (TypeError, ValueError):
        raise ValidationError(f"{key}: cannot interpret {value!r} as {kind}", key=key)
    return value


def validate_props(section, prefix=""):
    """Check every declared field of a config dataclass against its metadata."""
    for f in fields(section):
        key = f"{prefix}{f.name}"
        value = getattr(section, f.name)
        if is_dataclass(value):
            validate_props(value, prefix=f"{key}.")
            continue
        meta = f.metadata
        if not meta:
            continue
        kind = meta["kind"]
        if kind in ("float", "int"):
            _check_bounds(key, value, meta)
        elif kind == "enum":
            if value not in meta["keys"]:
                raise ValidationError(f"{key}: {value!r} is not one of {', '.join(meta['keys'])}", key=key)


def apply_overrides(section, values, prefix=""):
    """Set fields from a nested mapping, rejecting keys the section does not declare."""
    known = {f.name: f for f in fields(section)}
    for name, raw in values.items():
        key = f"{prefix}{name}"
        if name not in known:
            raise ValidationError(f"unknown configuration key '{key}'", key=key)
        current = getattr(section, name)
        if is_dataclass(current):
            if not isinstance(raw, dict):
                raise ValidationError(f"{key}: expected a section object", key=key)
            apply_overrides(current, raw, prefix=f"{key}.")
        else:
            setattr(section, name, coerce_value(key, raw, known[name].metadata))


def describe_props(section, prefix=""):
    """Yield (dotted key, name, description, default) for every declared field."""
    for f in fields(section):
        key = f"{prefix}{f.name}"
        value = getattr(section, f.name)
        if is_dataclass(value):
            yield from describe_props(value, prefix=f"{key}.")
        elif f.metadata:
            default = f.default if f.default is not MISSING else value
            yield key, f.metadata.get("name", f.name), f.metadata.get("description", ""), default
