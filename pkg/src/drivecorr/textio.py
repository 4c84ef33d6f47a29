"""Canonical line-oriented text encoding shared by every file format.

Each line is a JSON object. Floats are written with 9 significant digits so
that load -> dump round trips are byte-identical and reports do not depend on
platform repr quirks.
"""

from __future__ import annotations

import json
import math
from pathlib import Path
from typing import Any, Iterator

FLOAT_FORMAT = ".9g"


class ParseError(ValueError):
    """Malformed line in a line-oriented file."""

    def __init__(self, path: str | Path, line_no: int, message: str):
        self.path = str(path)
        self.line_no = line_no
        super().__init__(f"{path}:{line_no}: {message}")


def fmt_float(x: float) -> str:
    x = float(x)
    if not math.isfinite(x):
        raise ValueError(f"cannot serialize non-finite float {x!r}")
    return format(x, FLOAT_FORMAT)


def dumps(obj: Any) -> str:
    """Serialize ``obj`` as compact JSON with canonical float formatting.

    Dict key order is preserved, so callers control field order.
    """
    t = type(obj)
    if t is float:
        if obj - obj != 0.0:  # inf or nan
            raise ValueError(f"cannot serialize non-finite float {obj!r}")
        return format(obj, FLOAT_FORMAT)
    if t is list or t is tuple:
        return "[" + ", ".join([dumps(v) for v in obj]) + "]"
    if t is dict:
        return "{" + ", ".join([f"{_key(k)}: {dumps(v)}" for k, v in obj.items()]) + "}"
    if t is str:
        return json.dumps(obj, ensure_ascii=True)
    if obj is None:
        return "null"
    if obj is True:
        return "true"
    if obj is False:
        return "false"
    if isinstance(obj, int):
        return str(int(obj))
    if isinstance(obj, float):
        return fmt_float(obj)
    if isinstance(obj, str):
        return json.dumps(str(obj), ensure_ascii=True)
    if isinstance(obj, dict):
        return dumps(dict(obj))
    if isinstance(obj, (list, tuple)):
        return dumps(list(obj))
    # numpy scalars
    if hasattr(obj, "item"):
        return dumps(obj.item())
    raise TypeError(f"cannot serialize {type(obj).__name__}")


def _key(k: Any) -> str:
    return json.dumps(str(k), ensure_ascii=True)


def iter_lines(path: str | Path) -> Iterator[tuple[int, dict]]:
    """Yield ``(line_no, object)`` for every non-blank line of ``path``."""
    path = Path(path)
    with path.open("r", encoding="utf-8") as fh:
        for line_no, raw in enumerate(fh, start=1):
            line = raw.strip()
            if not line:
                continue
            try:
                obj = json.loads(line)
            except json.JSONDecodeError as exc:
                raise ParseError(path, line_no, f"invalid record: {exc.msg}") from None
            if not isinstance(obj, dict):
                raise ParseError(path, line_no, "record must be a key/value object")
            yield line_no, obj


def write_lines(path: str | Path, objs) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", encoding="utf-8", newline="\n") as fh:
        for obj in objs:
            fh.write(dumps(obj))
            fh.write("\n")


def write_csv(path: str | Path, header: list[str], rows) -> None:
    """Write rows with canonical float formatting; ``None`` becomes an empty cell."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", encoding="utf-8", newline="\n") as fh:
        fh.write(",".join(header) + "\n")
        for row in rows:
            fh.write(",".join(_csv_cell(v) for v in row) + "\n")


def _csv_cell(v: Any) -> str:
    if v is None:
        return ""
    if isinstance(v, bool):
        return "1" if v else "0"
    if isinstance(v, float):
        return fmt_float(v) if math.isfinite(v) else ""
    if hasattr(v, "item"):
        return _csv_cell(v.item())
    s = str(v)
    if any(c in s for c in ',"\n'):
        s = '"' + s.replace('"', '""') + '"'
    return s
