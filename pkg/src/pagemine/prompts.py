"""Prompt groups: named output classes with their phrase lists and thresholds.

A prompt group bundles the descriptive phrases that should fire for one
output class, e.g. ``{figure - diagram - geometry - sketch}`` in the
dash notation accepted by :func:`parse_prompt_notation`. A suite is a
set of groups evaluated together on each page.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, replace
from pathlib import Path
from typing import Iterable, Mapping, Union

from .errors import EmptyPromptError, IngestError

DEFAULT_BOX_THRESHOLD = 0.35
DEFAULT_TEXT_THRESHOLD = 0.35
DEFAULT_NMS_IOU = 0.5

# single-class suites cast everything into one detector class
SINGLE_CLASS = "VisualElement"


@dataclass(frozen=True)
class PromptGroup:
    """One output class: its detector phrases and score thresholds."""

    class_name: str
    phrases: tuple[str, ...]
    box_threshold: float = DEFAULT_BOX_THRESHOLD
    text_threshold: float = DEFAULT_TEXT_THRESHOLD

    def __post_init__(self):
        if not self.class_name or not self.class_name.strip():
            raise ValueError("class_name must be non-blank")
        normalized = tuple(p.strip().lower() for p in self.phrases)
        if not normalized or any(not p for p in normalized):
            raise EmptyPromptError(f"group {self.class_name!r} has blank phrases: {self.phrases!r}")
        object.__setattr__(self, "phrases", normalized)
        for name, t in (("box_threshold", self.box_threshold), ("text_threshold", self.text_threshold)):
            if not (0.0 < t < 1.0):
                raise ValueError(f"{name} must be in (0, 1), got {t}")


@dataclass(frozen=True)
class PromptSuite:
    """A named collection of prompt groups run together on each page."""

    suite_id: str
    groups: tuple[PromptGroup, ...]
    nms_iou: float = DEFAULT_NMS_IOU

    def __post_init__(self):
        if not self.groups:
            raise ValueError(f"suite {self.suite_id!r} has no groups")
        names = [g.class_name for g in self.groups]
        if len(set(names)) != len(names):
            raise ValueError(f"duplicate class names in suite {self.suite_id!r}: {names}")
        if not (0.0 < self.nms_iou < 1.0):
            raise ValueError(f"nms_iou must be in (0, 1), got {self.nms_iou}")


def parse_prompt_notation(text: str) -> list[str]:
    """Parse dash notation like ``{figure - diagram}`` into a phrase list.

    Braces are optional, phrases are separated by `` - `` (spaced hyphen,
    so multi-word phrases keep their internal hyphens and spaces), and the
    result is trimmed and lowercased in input order.
    """
    t = text.strip()
    if t.startswith("{") and t.endswith("}"):
        t = t[1:-1]
    phrases = [p.strip().lower() for p in t.split(" - ")]
    phrases = [p for p in phrases if p]
    if not phrases:
        raise EmptyPromptError(f"no phrases in prompt {text!r}")
    return phrases


def format_prompt_notation(phrases: Iterable[str]) -> str:
    """Inverse of :func:`parse_prompt_notation` for normalized phrase lists."""
    return "{" + " - ".join(phrases) + "}"


def compile_caption(group: PromptGroup) -> str:
    """Join a group's phrases into one detector caption.

    Phrases are separated by `` . `` and the caption is terminated with
    `` .``, the multi-phrase convention of open-vocabulary detectors.
    """
    return " . ".join(group.phrases) + " ."


def _suite(suite_id: str, groups: Mapping[str, str]) -> PromptSuite:
    return PromptSuite(
        suite_id=suite_id,
        groups=tuple(
            PromptGroup(class_name=name, phrases=tuple(parse_prompt_notation(notation)))
            for name, notation in groups.items()
        ),
    )


_INITIALS = "{dropcap - decorated letter - large letter}"


def builtin_suites() -> dict[str, PromptSuite]:
    """The shipped prompt configurations.

    ``*-v1`` suites use the bare ``{figure}`` prompt; ``*-v2`` suites carry
    the corpus-tailored phrases. ``horae-v2`` keeps the original
    ``lanscape`` spelling; ``horae-v2-landscape`` is the corrected alias.
    The ``*-classes`` suites target class differentiation instead of a
    single pooled visual-element class. All thresholds are 0.35.
    """
    suites = [
        _suite("sved-v1", {SINGLE_CLASS: "{figure}"}),
        _suite("sved-v2", {SINGLE_CLASS: "{figure - diagram - geometry - sketch}"}),
        _suite("chapbook-v1", {SINGLE_CLASS: "{figure}"}),
        _suite("chapbook-v2", {SINGLE_CLASS: "{image - square - rectangle - photo}"}),
        _suite("horae-v1", {SINGLE_CLASS: "{figure}"}),
        _suite("horae-v2", {SINGLE_CLASS: "{figure - lanscape - scene - square}"}),
        _suite("horae-v2-landscape", {SINGLE_CLASS: "{figure - landscape - scene - square}"}),
        _suite(
            "sved-classes",
            {
                "Initials": _INITIALS,
                "ContentIllustration": "{figure - diagram - circle - planets}",
            },
        ),
        _suite(
            "horae-classes",
            {
                "Initials": _INITIALS,
                "Decoration": "{floral - rectangle - flower - decorative - abstract}",
                "Miniature": "{scene - landscape - square}",
            },
        ),
    ]
    return {s.suite_id: s for s in suites}


def group_to_dict(g: PromptGroup) -> dict:
    return {
        "class_name": g.class_name,
        "phrases": list(g.phrases),
        "box_threshold": g.box_threshold,
        "text_threshold": g.text_threshold,
    }


def group_from_dict(d: Mapping) -> PromptGroup:
    return PromptGroup(
        class_name=d["class_name"],
        phrases=tuple(d["phrases"]),
        box_threshold=float(d.get("box_threshold", DEFAULT_BOX_THRESHOLD)),
        text_threshold=float(d.get("text_threshold", DEFAULT_TEXT_THRESHOLD)),
    )


def suite_to_dict(s: PromptSuite) -> dict:
    return {
        "suite_id": s.suite_id,
        "nms_iou": s.nms_iou,
        "groups": [group_to_dict(g) for g in s.groups],
    }


def suite_from_dict(d: Mapping) -> PromptSuite:
    try:
        return PromptSuite(
            suite_id=d["suite_id"],
            groups=tuple(group_from_dict(g) for g in d["groups"]),
            nms_iou=float(d.get("nms_iou", DEFAULT_NMS_IOU)),
        )
    except (KeyError, TypeError) as exc:
        raise IngestError(f"malformed prompt suite: {exc}") from exc


def load_suite(ref: Union[str, Path]) -> PromptSuite:
    """Resolve a suite from a builtin id or a JSON file path."""
    builtins = builtin_suites()
    if isinstance(ref, str) and ref in builtins:
        return builtins[ref]
    path = Path(ref)
    if not path.is_file():
        raise IngestError(f"{ref!r} is neither a builtin suite id nor a suite file")
    try:
        data = json.loads(path.read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise IngestError(f"cannot read suite file {path}: {exc}") from exc
    return suite_from_dict(data)


def with_nms_iou(s: PromptSuite, nms_iou: float) -> PromptSuite:
    return replace(s, nms_iou=nms_iou)
