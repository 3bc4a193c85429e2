"""``{{placeholder}}`` templates and fenced-block parsing shared by the LLM stages."""
from __future__ import annotations

import re
from importlib import resources
from pathlib import Path

PLACEHOLDER = re.compile(r"\{\{\s*([A-Za-z_][A-Za-z0-9_]*)\s*\}\}")


class TemplateError(Exception):
    pass


def load_template(name_or_path: str | Path) -> str:
    """Read a template from a path, or from the bundled ``templates/`` by stem."""
    p = Path(name_or_path)
    if p.suffix and p.exists():
        return p.read_text(encoding="utf-8")
    return resources.files("routesql").joinpath("templates", f"{name_or_path}.txt").read_text(encoding="utf-8")


def placeholders(template: str) -> set[str]:
    return set(PLACEHOLDER.findall(template))


def render(template: str, required: tuple[str, ...] = (), **values) -> str:
    names = placeholders(template)
    missing_slots = [r for r in required if r not in names]
    if missing_slots:
        raise TemplateError(f"template lacks placeholder(s): {', '.join(missing_slots)}")
    unresolved = sorted(n for n in names if n not in values)
    if unresolved:
        raise TemplateError(f"unresolved placeholder(s): {', '.join(unresolved)}")
    return PLACEHOLDER.sub(lambda m: str(values[m.group(1)]), template)


def fenced_blocks(text: str, lang: str | None = None) -> list[str]:
    """Bodies of ```lang fenced blocks (any language when ``lang`` is None)."""
    out = []
    for m in re.finditer(r"```[ \t]*([A-Za-z_]*)[ \t]*\n(.*?)```", text, re.S):
        if lang is None or m.group(1).lower() == lang:
            out.append(m.group(2).strip())
    return out
