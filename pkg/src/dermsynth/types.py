"""Shared domain vocabulary: classes, concepts, records, captions, pools, reports."""

from __future__ import annotations

import functools
import hashlib
import json
from dataclasses import dataclass, field
from enum import Enum
from importlib import resources
from pathlib import Path
from typing import Iterable, Mapping

import numpy as np
import yaml

from .errors import ValidationError


class DiagnosisClass(str, Enum):
    NV = "nv"
    MEL = "mel"
    BCC = "bcc"
    BKL = "bkl"
    DF = "df"
    VASC = "vasc"
    AKIEC = "akiec"

    def __str__(self):
        return self.value

    @property
    def full_name(self) -> str:
        return CLASS_NAMES[self]

    @classmethod
    def parse(cls, code) -> "DiagnosisClass":
        if isinstance(code, cls):
            return code
        try:
            return cls(str(code).strip().lower())
        except ValueError:
            raise ValidationError(f"unknown diagnosis class code {code!r}") from None


CLASS_NAMES = {
    DiagnosisClass.NV: "melanocytic nevus",
    DiagnosisClass.MEL: "melanoma",
    DiagnosisClass.BCC: "basal cell carcinoma",
    DiagnosisClass.BKL: "benign keratosis",
    DiagnosisClass.DF: "dermatofibroma",
    DiagnosisClass.VASC: "vascular lesion",
    DiagnosisClass.AKIEC: "actinic keratosis",
}

# Alphabetical, the column order of rendered tables.
HAM_CLASSES = tuple(sorted(DiagnosisClass, key=lambda c: c.value))
D7P_CLASSES = tuple(c for c in HAM_CLASSES if c is not DiagnosisClass.AKIEC)


class Source(str, Enum):
    D7P = "D7P"
    HAM = "HAM"

    def __str__(self):
        return self.value

    @property
    def classes(self):
        return D7P_CLASSES if self is Source.D7P else HAM_CLASSES


class Sex(str, Enum):
    MALE = "male"
    FEMALE = "female"
    UNKNOWN = "unknown"

    def __str__(self):
        return self.value


class Provenance(str, Enum):
    EXPERT = "expert"
    PSEUDO = "pseudo"
    PARAPHRASE = "paraphrase"
    STATIC = "static"

    def __str__(self):
        return self.value


STATIC_TEMPLATE = "an image of {name}"


@dataclass(frozen=True)
class Concept:
    name: str
    values: tuple[str, ...]
    phrase: str = "{value}"

    def render(self, value):
        return self.phrase.format(value=value)


@dataclass(frozen=True)
class ConceptTaxonomy:
    concepts: tuple[Concept, ...]
    version: int = 1

    def __post_init__(self):
        names = [c.name for c in self.concepts]
        if len(names) != 7:
            raise ValidationError(f"taxonomy must list exactly 7 concepts, got {len(names)}")
        if len(set(names)) != len(names):
            raise ValidationError("taxonomy concept names must be unique")
        for c in self.concepts:
            if not c.values:
                raise ValidationError(f"concept {c.name!r} has no allowed values")

    @property
    def names(self) -> tuple[str, ...]:
        return tuple(c.name for c in self.concepts)

    def __getitem__(self, name) -> Concept:
        for c in self.concepts:
            if c.name == name:
                return c
        raise KeyError(name)

    def validate_annotation(self, values: Mapping[str, str]):
        for key, value in values.items():
            if key not in self.names:
                raise ValidationError(f"unknown concept {key!r}")
            if value not in self[key].values:
                raise ValidationError(f"value {value!r} not allowed for concept {key!r}")

    @classmethod
    def from_dict(cls, doc) -> "ConceptTaxonomy":
        concepts = tuple(
            Concept(c["name"], tuple(c["values"]), c.get("phrase", "{value} " + c["name"].replace("_", " ")))
            for c in doc["concepts"]
        )
        return cls(concepts, int(doc.get("version", 1)))

    def to_dict(self):
        return {
            "version": self.version,
            "concepts": [{"name": c.name, "phrase": c.phrase, "values": list(c.values)} for c in self.concepts],
        }


def load_taxonomy(path=None) -> ConceptTaxonomy:
    """Load the concept taxonomy; defaults to the copy shipped with the package."""
    if path is None:
        return _packaged_taxonomy()
    return ConceptTaxonomy.from_dict(yaml.safe_load(Path(path).read_text()))


def load_templates(path=None) -> dict:
    if path is None:
        return dict(_packaged_yaml("templates.yaml"))
    return yaml.safe_load(Path(path).read_text())


@functools.lru_cache(maxsize=None)
def _packaged_yaml(name):
    return yaml.safe_load(resources.files("dermsynth.data").joinpath(name).read_text())


@functools.lru_cache(maxsize=None)
def _packaged_taxonomy():
    return ConceptTaxonomy.from_dict(_packaged_yaml("taxonomy.yaml"))


@dataclass(frozen=True)
class LesionRecord:
    id: str
    image_ref: str
    diagnosis: DiagnosisClass
    source: Source
    age: float | None = None
    sex: Sex | None = None
    site: str | None = None
    concepts: dict | None = None

    def to_dict(self):
        return {
            "id": self.id,
            "image_ref": self.image_ref,
            "diagnosis": self.diagnosis.value,
            "source": self.source.value,
            "age": self.age,
            "sex": None if self.sex is None else self.sex.value,
            "site": self.site,
            "concepts": None if self.concepts is None else dict(self.concepts),
        }

    @classmethod
    def from_dict(cls, d) -> "LesionRecord":
        return cls(
            id=d["id"],
            image_ref=d["image_ref"],
            diagnosis=DiagnosisClass.parse(d["diagnosis"]),
            source=Source(d["source"]),
            age=d.get("age"),
            sex=None if d.get("sex") is None else Sex(d["sex"]),
            site=d.get("site"),
            concepts=d.get("concepts"),
        )


def validate_record(record: LesionRecord, taxonomy: ConceptTaxonomy) -> LesionRecord:
    """Return ``record`` unchanged, or raise ValidationError naming the first broken invariant."""
    if not isinstance(record.diagnosis, DiagnosisClass):
        DiagnosisClass.parse(record.diagnosis)
        raise ValidationError(f"diagnosis must be a DiagnosisClass, got {record.diagnosis!r}")
    if not record.id:
        raise ValidationError("record id must be non-empty")
    if record.source is Source.D7P and record.diagnosis is DiagnosisClass.AKIEC:
        raise ValidationError(f"{record.id}: class akiec does not occur in D7P")
    if record.age is not None and record.age < 0:
        raise ValidationError(f"{record.id}: negative age {record.age}")
    if record.source is Source.D7P and record.concepts is None:
        raise ValidationError(f"{record.id}: D7P record without concept annotations")
    if record.source is Source.HAM and record.concepts is not None:
        raise ValidationError(f"{record.id}: HAM record must not carry concepts at ingestion")
    if record.concepts is not None:
        try:
            taxonomy.validate_annotation(record.concepts)
        except ValidationError as e:
            raise ValidationError(f"{record.id}: {e}") from None
    return record


@dataclass(frozen=True)
class Caption:
    text: str
    token_count: int
    provenance: Provenance
    cls: DiagnosisClass
    source_id: str | None = None

    def __post_init__(self):
        if not self.text.strip():
            raise ValidationError("caption text must be non-empty")
        if self.token_count < 0:
            raise ValidationError("token_count must be non-negative")
        if self.provenance is Provenance.STATIC and self.text != STATIC_TEMPLATE.format(name=self.cls.full_name):
            raise ValidationError(f"static caption text {self.text!r} does not match the template")

    @property
    def id(self) -> str:
        key = json.dumps([self.cls.value, self.provenance.value, self.source_id, self.text])
        return hashlib.sha1(key.encode()).hexdigest()[:12]

    def to_dict(self):
        return {
            "id": self.id,
            "text": self.text,
            "token_count": self.token_count,
            "provenance": self.provenance.value,
            "source_id": self.source_id,
            "class": self.cls.value,
        }

    @classmethod
    def from_dict(cls, d) -> "Caption":
        return cls(
            text=d["text"],
            token_count=int(d["token_count"]),
            provenance=Provenance(d["provenance"]),
            cls=DiagnosisClass.parse(d["class"]),
            source_id=d.get("source_id"),
        )


@dataclass(frozen=True)
class PromptPool:
    entries: dict = field(default_factory=dict)

    def __post_init__(self):
        fixed = {}
        for key, captions in self.entries.items():
            key = DiagnosisClass.parse(key)
            captions = tuple(captions)
            for c in captions:
                if c.cls is not key:
                    raise ValidationError(f"caption of class {c.cls} filed under {key}")
            fixed[key] = captions
        object.__setattr__(self, "entries", fixed)

    @classmethod
    def from_captions(cls, captions: Iterable[Caption]) -> "PromptPool":
        entries: dict = {}
        for c in captions:
            entries.setdefault(c.cls, []).append(c)
        return cls(entries)

    def classes(self):
        return [c for c in HAM_CLASSES if c in self.entries]

    def __getitem__(self, cls):
        return self.entries.get(DiagnosisClass.parse(cls), ())

    def captions(self):
        for c in self.classes():
            yield from self.entries[c]

    def __len__(self):
        return sum(len(v) for v in self.entries.values())


@dataclass(frozen=True)
class EvaluationReport:
    classes: tuple[DiagnosisClass, ...]
    confusion: tuple[tuple[int, ...], ...]
    overall_accuracy: float
    per_class_precision: dict
    n_test: int
    metadata: dict = field(default_factory=dict)

    @classmethod
    def from_confusion(cls, classes, confusion, metadata=None) -> "EvaluationReport":
        m = np.asarray(confusion, dtype=np.int64)
        k = len(classes)
        if m.shape != (k, k):
            raise ValidationError(f"confusion matrix shape {m.shape} does not match {k} classes")
        if (m < 0).any():
            raise ValidationError("confusion matrix has negative entries")
        n = int(m.sum())
        if n <= 0:
            raise ValidationError("empty confusion matrix")
        col = m.sum(axis=0)
        diag = np.diag(m)
        precision = {
            DiagnosisClass.parse(c): (float(diag[i] / col[i]) if col[i] else 0.0) for i, c in enumerate(classes)
        }
        return cls(
            classes=tuple(DiagnosisClass.parse(c) for c in classes),
            confusion=tuple(tuple(int(v) for v in row) for row in m),
            overall_accuracy=float(np.trace(m) / n),
            per_class_precision=precision,
            n_test=n,
            metadata=dict(metadata or {}),
        )

    def confusion_array(self):
        return np.asarray(self.confusion, dtype=np.int64)

    def to_dict(self):
        return {
            "classes": [c.value for c in self.classes],
            "confusion": [list(r) for r in self.confusion],
            "overall_accuracy": self.overall_accuracy,
            "per_class_precision": {c.value: p for c, p in self.per_class_precision.items()},
            "n_test": self.n_test,
            "metadata": self.metadata,
        }

    @classmethod
    def from_dict(cls, d) -> "EvaluationReport":
        return cls(
            classes=tuple(DiagnosisClass.parse(c) for c in d["classes"]),
            confusion=tuple(tuple(int(v) for v in r) for r in d["confusion"]),
            overall_accuracy=float(d["overall_accuracy"]),
            per_class_precision={DiagnosisClass.parse(c): float(p) for c, p in d["per_class_precision"].items()},
            n_test=int(d["n_test"]),
            metadata=d.get("metadata", {}),
        )


class DataMode(str, Enum):
    SYNTH_PLUS_REAL = "synth_plus_real"
    SYNTH_ONLY = "synth_only"
    REAL_ONLY = "real_only"

    def __str__(self):
        return self.value


class PromptRegime(str, Enum):
    RICH_BALANCED = "rich_balanced"
    RICH_ONLY = "rich_only"
    STATIC = "static"

    def __str__(self):
        return self.value


class FinetuneCaptions(str, Enum):
    RICH = "rich"
    STATIC = "static"

    def __str__(self):
        return self.value


@dataclass(frozen=True)
class ExperimentSpec:
    data_mode: DataMode = DataMode.SYNTH_PLUS_REAL
    prompt_regime: PromptRegime = PromptRegime.RICH_BALANCED
    real_cap_per_class: int = 250
    total_per_class: int = 500
    seed: int = 0
    # Which captions the diffusion adapter was fine-tuned on; static only for the label-prompt baseline.
    finetune_captions: FinetuneCaptions = FinetuneCaptions.RICH
    label: str = ""

    def __post_init__(self):
        object.__setattr__(self, "data_mode", DataMode(self.data_mode))
        object.__setattr__(self, "prompt_regime", PromptRegime(self.prompt_regime))
        object.__setattr__(self, "finetune_captions", FinetuneCaptions(self.finetune_captions))
        if self.real_cap_per_class < 0 or self.total_per_class < 0:
            raise ValidationError("per-class counts must be non-negative")
        if self.data_mode is DataMode.SYNTH_PLUS_REAL and self.total_per_class < self.real_cap_per_class:
            raise ValidationError("total_per_class must be >= real_cap_per_class for synth_plus_real")

    @property
    def uses_synthetic(self):
        return self.data_mode is not DataMode.REAL_ONLY

    def to_dict(self):
        return {
            "data_mode": self.data_mode.value,
            "prompt_regime": self.prompt_regime.value,
            "real_cap_per_class": self.real_cap_per_class,
            "total_per_class": self.total_per_class,
            "seed": self.seed,
            "finetune_captions": self.finetune_captions.value,
            "label": self.label,
        }

    @classmethod
    def from_dict(cls, d) -> "ExperimentSpec":
        return cls(**{k: v for k, v in d.items() if k in cls.__dataclass_fields__})


def write_jsonl(path, items):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w") as fh:
        for item in items:
            obj = item.to_dict() if hasattr(item, "to_dict") else item
            fh.write(json.dumps(obj, sort_keys=True) + "\n")


def read_jsonl(path, kind=None):
    out = []
    with open(path) as fh:
        for line in fh:
            line = line.strip()
            if not line:
                continue
            obj = json.loads(line)
            out.append(kind.from_dict(obj) if kind is not None else obj)
    return out
