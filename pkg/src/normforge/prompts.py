"""Versioned prompt templates with ``{{variable}}`` placeholders.

Templates ship as plain text files in ``normforge/prompts/``; a directory of
overrides can be supplied for experimentation, but the pipeline contract is
the shipped set.
"""

from __future__ import annotations

import re
from dataclasses import dataclass
from importlib import resources
from pathlib import Path

_PLACEHOLDER = re.compile(r"\{\{([a-z_]+)\}\}")

TEMPLATE_NAMES = (
    "flow_reasoning",
    "flow_extraction",
    "norm_reasoning",
    "norm_extraction",
    "norm_abstraction",
    "task_flow_extraction",
    "judge_grounding",
    "judge_coverage",
)


class TemplateError(ValueError):
    pass


def render_template(template: str, variables: dict[str, str]) -> str:
    """Substitute every placeholder; unknown or missing names are errors."""

    def repl(match: re.Match) -> str:
        name = match.group(1)
        if name not in variables:
            raise TemplateError(f"template variable '{name}' not supplied")
        value = variables[name]
        return "" if value is None else str(value)

    return _PLACEHOLDER.sub(repl, template)


@dataclass(frozen=True)
class PromptTemplate:
    name: str
    system: str
    user: str

    def render_user(self, **variables) -> str:
        return render_template(self.user, variables)

    @property
    def variables(self) -> set[str]:
        return set(_PLACEHOLDER.findall(self.system + self.user))


class PromptLibrary:
    def __init__(self, templates: dict[str, PromptTemplate]):
        self._templates = templates

    def __getitem__(self, name: str) -> PromptTemplate:
        if name not in self._templates:
            raise TemplateError(
                f"unknown prompt template '{name}' (have: {sorted(self._templates)})"
            )
        return self._templates[name]

    @classmethod
    def load(cls, directory: Path | str | None = None) -> "PromptLibrary":
        """Load the packaged templates, or a directory of overrides."""
        templates = {}
        if directory is None:
            root = resources.files("normforge") / "prompts"
            read = lambda fname: (root / fname).read_text(encoding="utf-8")
        else:
            directory = Path(directory)
            read = lambda fname: (directory / fname).read_text(encoding="utf-8")
        for name in TEMPLATE_NAMES:
            try:
                system = read(f"{name}.system.txt")
                user = read(f"{name}.user.txt")
            except (FileNotFoundError, OSError) as exc:
                raise TemplateError(f"cannot load template '{name}': {exc}") from exc
            templates[name] = PromptTemplate(name=name, system=system, user=user)
        return cls(templates)
