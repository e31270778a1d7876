"""Audit study definitions.

A study is a grid of (language, model-version) cells. Each language carries one
completion prompt which is kept byte-exact from file to provider request.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from importlib import resources
from pathlib import Path
from typing import Any

__all__ = [
    "ConfigError",
    "LanguageSpec",
    "SamplingParams",
    "StudyConfig",
    "builtin_studies",
    "get_builtin_study",
    "load_study_config",
    "parse_study_config",
    "dump_study_config",
]


class ConfigError(ValueError):
    """Raised when a study config cannot be parsed or violates an invariant."""


@dataclass(frozen=True)
class SamplingParams:
    temperature: float = 1.0
    max_tokens: int = 64
    request_timeout: float = 60.0
    max_retries: int = 5
    parallelism: int = 4

    def __post_init__(self):
        if not self.temperature >= 0:
            raise ConfigError("sampling.temperature must be >= 0")
        if int(self.max_tokens) != self.max_tokens or self.max_tokens < 1:
            raise ConfigError("sampling.max_tokens must be a positive integer")
        if not self.request_timeout > 0:
            raise ConfigError("sampling.request_timeout must be > 0")
        if int(self.max_retries) != self.max_retries or self.max_retries < 0:
            raise ConfigError("sampling.max_retries must be a nonnegative integer")
        if int(self.parallelism) != self.parallelism or self.parallelism < 1:
            raise ConfigError("sampling.parallelism must be >= 1")


@dataclass(frozen=True)
class LanguageSpec:
    code: str
    prompt_text: str
    is_reference: bool = False

    def __post_init__(self):
        if not isinstance(self.code, str) or not self.code:
            raise ConfigError("language code must be a non-empty string")
        if not isinstance(self.prompt_text, str) or not self.prompt_text:
            raise ConfigError(f"prompt_text for language {self.code!r} must be non-empty")


@dataclass(frozen=True)
class StudyConfig:
    """Declarative definition of one bias audit.

    Attributes
    ----------
    study_id : str
        Short identifier, used to name artifact files.
    issue : str
        The political issue under study.
    positive_class : str
        What ``outcome = True`` means for a labeled completion.
    languages : tuple of LanguageSpec
        Ordered; exactly one is the reference category.
    models : tuple of str
        Ordered model-version identifiers (the grouping factor).
    samples_per_cell : int
        Completions collected per (language, model) cell.
    sampling : SamplingParams
    """

    study_id: str
    issue: str
    positive_class: str
    languages: tuple[LanguageSpec, ...]
    models: tuple[str, ...]
    samples_per_cell: int = 500
    sampling: SamplingParams = field(default_factory=SamplingParams)

    def __post_init__(self):
        object.__setattr__(self, "languages", tuple(self.languages))
        object.__setattr__(self, "models", tuple(self.models))
        if not self.study_id:
            raise ConfigError("study_id must be non-empty")
        if len(self.languages) < 2:
            raise ConfigError(
                f"a study needs at least 2 languages, got {len(self.languages)}")
        if len(self.models) < 1:
            raise ConfigError("a study needs at least 1 model")
        codes = [lang.code for lang in self.languages]
        dupes = sorted({c for c in codes if codes.count(c) > 1})
        if dupes:
            raise ConfigError(f"duplicate language code(s): {', '.join(dupes)}")
        dupe_models = sorted({m for m in self.models if self.models.count(m) > 1})
        if dupe_models:
            raise ConfigError(f"duplicate model id(s): {', '.join(dupe_models)}")
        n_ref = sum(lang.is_reference for lang in self.languages)
        if n_ref != 1:
            raise ConfigError(
                f"exactly one language must be flagged as reference, got {n_ref}")
        if (isinstance(self.samples_per_cell, bool)
                or int(self.samples_per_cell) != self.samples_per_cell
                or self.samples_per_cell < 1):
            raise ConfigError("samples_per_cell must be a positive integer")

    @property
    def language_codes(self) -> list[str]:
        return [lang.code for lang in self.languages]

    @property
    def reference_language(self) -> str:
        return next(lang.code for lang in self.languages if lang.is_reference)

    def language(self, code: str) -> LanguageSpec:
        for lang in self.languages:
            if lang.code == code:
                return lang
        raise KeyError(f"language {code!r} not in study {self.study_id!r}")

    def prompt(self, code: str) -> str:
        return self.language(code).prompt_text

    def cells(self) -> list[tuple[str, str]]:
        """All (language, model) cells, language-major in config order."""
        return [(lang.code, m) for lang in self.languages for m in self.models]

    def to_dict(self) -> dict[str, Any]:
        return {
            "study_id": self.study_id,
            "issue": self.issue,
            "positive_class": self.positive_class,
            "languages": [asdict(lang) for lang in self.languages],
            "models": list(self.models),
            "samples_per_cell": self.samples_per_cell,
            "sampling": asdict(self.sampling),
        }


def _require(doc: dict, key: str, kind):
    if key not in doc:
        raise ConfigError(f"missing required field {key!r}")
    value = doc[key]
    if not isinstance(value, kind):
        raise ConfigError(f"field {key!r} has wrong type {type(value).__name__}")
    return value


def parse_study_config(doc: dict[str, Any]) -> StudyConfig:
    """Build a validated :class:`StudyConfig` from a decoded JSON document."""
    if not isinstance(doc, dict):
        raise ConfigError("study config must be a JSON object")
    langs = []
    for i, entry in enumerate(_require(doc, "languages", list)):
        if not isinstance(entry, dict):
            raise ConfigError(f"languages[{i}] must be an object")
        langs.append(LanguageSpec(
            code=_require(entry, "code", str),
            prompt_text=_require(entry, "prompt_text", str),
            is_reference=bool(entry.get("is_reference", False)),
        ))
    models = _require(doc, "models", list)
    if not all(isinstance(m, str) for m in models):
        raise ConfigError("models must be a list of strings")
    sampling = doc.get("sampling", {})
    if not isinstance(sampling, dict):
        raise ConfigError("sampling must be an object")
    unknown = set(sampling) - set(SamplingParams.__dataclass_fields__)
    if unknown:
        raise ConfigError(f"unknown sampling field(s): {', '.join(sorted(unknown))}")
    return StudyConfig(
        study_id=_require(doc, "study_id", str),
        issue=doc.get("issue", ""),
        positive_class=doc.get("positive_class", ""),
        languages=tuple(langs),
        models=tuple(models),
        samples_per_cell=doc.get("samples_per_cell", 500),
        sampling=SamplingParams(**sampling),
    )


def load_study_config(path) -> StudyConfig:
    """Read a UTF-8 JSON study config from ``path`` and validate it."""
    path = Path(path)
    try:
        text = path.read_text(encoding="utf-8")
    except OSError as exc:
        raise ConfigError(f"cannot read study config {path}: {exc}") from exc
    try:
        doc = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ConfigError(f"cannot parse study config {path}: {exc}") from exc
    return parse_study_config(doc)


def dump_study_config(config: StudyConfig) -> str:
    """Serialize to JSON text; non-ASCII prompt characters are written as-is."""
    return json.dumps(config.to_dict(), ensure_ascii=False, indent=2) + "\n"


_BUILTIN_FILES = ("abortion.json", "catalan.json")


def builtin_studies() -> list[StudyConfig]:
    """The two shipped studies: abortion (ref pl) and Catalan independence (ref es)."""
    pkg = resources.files("biaslens") / "studies"
    return [parse_study_config(json.loads((pkg / name).read_text(encoding="utf-8")))
            for name in _BUILTIN_FILES]


def get_builtin_study(study_id: str) -> StudyConfig:
    for study in builtin_studies():
        if study.study_id == study_id:
            return study
    known = ", ".join(s.study_id for s in builtin_studies())
    raise ConfigError(f"unknown built-in study {study_id!r} (known: {known})")
