"""Plain-text ``key = value`` configuration files.

One setting per line. ``#`` starts a comment, blank lines are ignored, keys
are case-insensitive and values keep their inner spacing::

    # design I, scaled down
    design = I
    n = 300
    tau = 0.05
    methods = MA(FVE90±4,K4), FVE90, AIC
"""

from __future__ import annotations

from .exceptions import ParseError


def parse_config_text(text: str) -> dict:
    cfg = {}
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ParseError(f"expected key = value, got {raw.strip()!r}", line=lineno)
        key, value = (part.strip() for part in line.split("=", 1))
        if not key:
            raise ParseError("empty key", line=lineno)
        key = key.lower().replace("-", "_")
        if key in cfg:
            raise ParseError(f"duplicate key {key!r}", line=lineno)
        cfg[key] = value
    return cfg


def read_config(path) -> dict:
    with open(path, encoding="utf-8") as fh:
        return parse_config_text(fh.read())


def split_list(value) -> list:
    """Comma-separated list, respecting parentheses (``MA(BIC±8,K2), AIC``)."""
    if isinstance(value, (list, tuple)):
        return list(value)
    items, depth, cur = [], 0, []
    for ch in str(value):
        if ch == "," and depth == 0:
            items.append("".join(cur).strip())
            cur = []
            continue
        depth += (ch == "(") - (ch == ")")
        cur.append(ch)
    items.append("".join(cur).strip())
    return [x for x in items if x]
