"""Prompt templates for the refine and reasoning steps.

Templates are plain text files next to this module with ``{question}``,
``{sl}`` and ``{result}`` placeholders. They are reconstructions, not
verbatim copies of any published prompt.
"""
from __future__ import annotations

import re
import string
from importlib import resources

TEMPLATE_NAMES = ("prompt_refine", "prompt_sar", "prompt_sl")


class TemplateError(ValueError):
    pass


def load_template(name: str) -> str:
    if name not in TEMPLATE_NAMES:
        raise TemplateError(f"unknown template {name!r}")
    return resources.files(__name__).joinpath(f"{name}.txt").read_text(encoding="utf-8")


def placeholders(template: str) -> set[str]:
    return {field for _, field, _, _ in string.Formatter().parse(template) if field}


def render(name: str, **fields: str) -> str:
    template = load_template(name)
    missing = placeholders(template) - set(fields)
    if missing:
        raise TemplateError(f"{name}: unfilled placeholders {sorted(missing)}")
    text = template.format(**fields)
    return text


_LEFTOVER = re.compile(r"\{(question|sl|result)\}")


def has_unfilled(text: str) -> bool:
    return bool(_LEFTOVER.search(text))
