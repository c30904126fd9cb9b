"""Metadata parsing for the two dermoscopy datasets and stratified train/test splits."""

from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import EmptyClassError, ParseError, ValidationError
from .types import CLASS_NAMES, ConceptTaxonomy, DiagnosisClass, LesionRecord, Sex, Source, validate_record

# Fine-grained diagnoses of the seven-point-checklist release, grouped into the six shared classes.
D7P_DIAGNOSIS_GROUPS = {
    "basal cell carcinoma": "bcc",
    "blue nevus": "nv",
    "clark nevus": "nv",
    "combined nevus": "nv",
    "congenital nevus": "nv",
    "dermal nevus": "nv",
    "recurrent nevus": "nv",
    "reed or spitz nevus": "nv",
    "melanoma": "mel",
    "melanoma (in situ)": "mel",
    "melanoma (less than 0.76 mm)": "mel",
    "melanoma (0.76 to 1.5 mm)": "mel",
    "melanoma (more than 1.5 mm)": "mel",
    "melanoma metastasis": "mel",
    "seborrheic keratosis": "bkl",
    "lentigo": "bkl",
    "melanosis": "bkl",
    "dermatofibroma": "df",
    "vascular lesion": "vasc",
}

_D7P_IMAGE_COLUMNS = ("image_ref", "image", "derm")
_D7P_ID_COLUMNS = ("id", "case_num", "case_id")


def _read_table(table):
    """Accept a path, raw text, or file object; return (header, [(line_no, row), ...])."""
    if isinstance(table, Path) or (isinstance(table, str) and "\n" not in table and Path(table).exists()):
        text = Path(table).read_text()
    elif hasattr(table, "read"):
        text = table.read()
    else:
        text = table
    lines = text.splitlines()
    if not lines or not lines[0].strip():
        raise ParseError("table has no header row", row=1)
    delimiter = "\t" if lines[0].count("\t") > lines[0].count(",") else ","
    reader = csv.reader(io.StringIO(text), delimiter=delimiter)
    header = [h.strip() for h in next(reader)]
    rows = []
    for row in reader:
        line_no = reader.line_num
        if not any(cell.strip() for cell in row):
            continue
        if len(row) != len(header):
            raise ParseError(f"expected {len(header)} fields, got {len(row)}", row=line_no)
        rows.append((line_no, dict(zip(header, (c.strip() for c in row)))))
    return header, rows


def _pick(header, candidates, what):
    for name in candidates:
        if name in header:
            return name
    raise ParseError(f"no {what} column (looked for {', '.join(candidates)})", row=1)


def _parse_sex(value):
    value = (value or "").strip().lower()
    if value in ("male", "m"):
        return Sex.MALE
    if value in ("female", "f"):
        return Sex.FEMALE
    return Sex.UNKNOWN


def _parse_age(value, line_no):
    value = (value or "").strip()
    if value == "" or value.lower() in ("unknown", "nan", "na"):
        return None
    try:
        age = float(value)
    except ValueError:
        raise ParseError(f"age {value!r} is not a number", row=line_no) from None
    if math.isnan(age):
        return None
    return age


def d7p_class(diagnosis: str) -> DiagnosisClass:
    key = diagnosis.strip().lower()
    key = D7P_DIAGNOSIS_GROUPS.get(key, key)
    key = {name: c.value for c, name in CLASS_NAMES.items()}.get(key, key)
    return DiagnosisClass.parse(key)


def parse_d7p_metadata(table, taxonomy: ConceptTaxonomy) -> list[LesionRecord]:
    """Parse a seven-point-checklist style metadata table into validated records.

    Diagnosis cells may hold a short class code or one of the release's fine-grained
    diagnosis names. All seven taxonomy concepts must be present as columns.
    """
    header, rows = _read_table(table)
    image_col = _pick(header, _D7P_IMAGE_COLUMNS, "image path")
    id_col = next((c for c in _D7P_ID_COLUMNS if c in header), None)
    if "diagnosis" not in header:
        raise ParseError("no diagnosis column", row=1)
    missing = [n for n in taxonomy.names if n not in header]
    if missing:
        raise ParseError("missing concept columns: " + ", ".join(missing), row=1)

    records = []
    for line_no, row in rows:
        if not row[image_col]:
            raise ParseError("empty image path", row=line_no)
        try:
            diagnosis = d7p_class(row["diagnosis"])
        except ValidationError as e:
            raise ValidationError(f"row {line_no}: {e}") from None
        rec_id = row[id_col] if id_col else Path(row[image_col]).stem
        if id_col == "case_num":
            rec_id = f"d7p-{rec_id}"
        record = LesionRecord(
            id=rec_id,
            image_ref=row[image_col],
            diagnosis=diagnosis,
            source=Source.D7P,
            age=_parse_age(row.get("age"), line_no),
            sex=_parse_sex(row["sex"]) if "sex" in row else None,
            site=row.get("location") or row.get("site") or None,
            concepts={n: row[n] for n in taxonomy.names},
        )
        try:
            records.append(validate_record(record, taxonomy))
        except ValidationError as e:
            raise ValidationError(f"row {line_no}: {e}") from None
    _check_unique(records)
    return records


def parse_ham_metadata(table) -> list[LesionRecord]:
    """Parse a HAM10000 style table (image_id, dx, age, sex, localization)."""
    header, rows = _read_table(table)
    for col in ("image_id", "dx"):
        if col not in header:
            raise ParseError(f"no {col} column", row=1)
    records = []
    for line_no, row in rows:
        if not row["image_id"]:
            raise ParseError("empty image_id", row=line_no)
        try:
            diagnosis = DiagnosisClass.parse(row["dx"])
        except ValidationError as e:
            raise ValidationError(f"row {line_no}: {e}") from None
        site = row.get("localization") or None
        if site == "unknown":
            site = None
        age = _parse_age(row.get("age"), line_no)
        if age is not None and age < 0:
            raise ValidationError(f"row {line_no}: negative age {age}")
        image_ref = row.get("image_ref") or row["image_id"] + ".jpg"
        records.append(
            LesionRecord(
                id=row["image_id"],
                image_ref=image_ref,
                diagnosis=diagnosis,
                source=Source.HAM,
                age=age,
                sex=_parse_sex(row.get("sex")),
                site=site,
                concepts=None,
            )
        )
    _check_unique(records)
    return records


def _check_unique(records):
    seen = set()
    for r in records:
        if r.id in seen:
            raise ValidationError(f"duplicate record id {r.id!r}")
        seen.add(r.id)


@dataclass
class DatasetIndex:
    records: list
    split_assignment: dict
    seed: int
    test_fraction: float = 0.2
    metadata: dict = field(default_factory=dict)

    def split(self, name):
        return [r for r in self.records if self.split_assignment[r.id] == name]

    @property
    def train(self):
        return self.split("train")

    @property
    def test(self):
        return self.split("test")

    def write_manifest(self, path):
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, delimiter="\t")
            w.writerow(["id", "split"])
            for r in self.records:
                w.writerow([r.id, self.split_assignment[r.id]])

    @staticmethod
    def read_manifest(path) -> dict:
        with open(path, newline="") as fh:
            return {row["id"]: row["split"] for row in csv.DictReader(fh, delimiter="\t")}


def stratified_split(records, test_fraction=0.2, seed=0, classes=None) -> DatasetIndex:
    """Per-class random split; each class sends round(fraction * count) records to test."""
    if not 0 < test_fraction < 1:
        raise ValidationError(f"test_fraction must be in (0, 1), got {test_fraction}")
    by_class: dict = {}
    for r in records:
        by_class.setdefault(r.diagnosis, []).append(r)
    expected = list(classes) if classes is not None else list(by_class)
    for c in expected:
        if not by_class.get(DiagnosisClass.parse(c)):
            raise EmptyClassError(f"class {c} has no records")
    if not by_class:
        raise EmptyClassError("no records to split")

    assignment = {}
    for cls, members in by_class.items():
        n_test = int(math.floor(test_fraction * len(members) + 0.5))
        # One stream per class so adding records of one class never reshuffles another.
        rng = np.random.default_rng([seed, sorted(DiagnosisClass).index(cls)])
        order = rng.permutation(len(members))
        test_ids = {members[i].id for i in order[:n_test]}
        for r in members:
            assignment[r.id] = "test" if r.id in test_ids else "train"
    return DatasetIndex(
        records=list(records),
        split_assignment=assignment,
        seed=seed,
        test_fraction=test_fraction,
        metadata={
            "test_fraction": test_fraction,
            "split_unit": "image row (no per-lesion deduplication)",
        },
    )
