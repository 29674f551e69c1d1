"""Walk the array leaves of nested parameter dataclasses."""
from __future__ import annotations

import dataclasses
from typing import Callable, Iterator, Tuple

import numpy as np


def _is_leaf(v) -> bool:
    from .autodiff import Var

    return isinstance(v, (np.ndarray, Var))


def named_arrays(obj, prefix: str = "") -> Iterator[Tuple[str, object]]:
    """Yield ``(dotted_name, array)`` for every array leaf, in field order."""
    if _is_leaf(obj):
        yield prefix, obj
    elif dataclasses.is_dataclass(obj):
        for f in dataclasses.fields(obj):
            name = f"{prefix}.{f.name}" if prefix else f.name
            yield from named_arrays(getattr(obj, f.name), name)
    elif isinstance(obj, (list, tuple)):
        for i, item in enumerate(obj):
            yield from named_arrays(item, f"{prefix}.{i}" if prefix else str(i))


def map_arrays(obj, fn: Callable[[str, object], object], prefix: str = ""):
    """Rebuild ``obj`` with every array leaf replaced by ``fn(name, leaf)``."""
    if _is_leaf(obj):
        return fn(prefix, obj)
    if dataclasses.is_dataclass(obj):
        changes = {}
        for f in dataclasses.fields(obj):
            name = f"{prefix}.{f.name}" if prefix else f.name
            changes[f.name] = map_arrays(getattr(obj, f.name), fn, name)
        return dataclasses.replace(obj, **changes)
    if isinstance(obj, list):
        return [map_arrays(v, fn, f"{prefix}.{i}" if prefix else str(i)) for i, v in enumerate(obj)]
    if isinstance(obj, tuple):
        return tuple(map_arrays(v, fn, f"{prefix}.{i}" if prefix else str(i)) for i, v in enumerate(obj))
    return obj


def count(obj) -> int:
    return sum(int(np.size(a.value if hasattr(a, "tape") else a)) for _, a in named_arrays(obj))
