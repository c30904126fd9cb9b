import os

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from dermsynth.errors import EmptyClassError, ParseError, ValidationError
from dermsynth.ingestion import DatasetIndex, parse_d7p_metadata, parse_ham_metadata, stratified_split
from dermsynth.types import DiagnosisClass, LesionRecord, Sex, Source

D7P_HEADER = ("case_num,diagnosis,pigment_network,streaks,pigmentation,regression_structures,"
              "dots_and_globules,vascular_structures,elevation,location,sex,derm\n")


def test_d7p_header_only(taxonomy):
    assert parse_d7p_metadata(D7P_HEADER, taxonomy) == []


def test_d7p_three_rows_field_by_field(taxonomy):
    table = D7P_HEADER + (
        "1,melanoma (in situ),atypical,irregular,diffuse irregular,blue areas,irregular,absent,flat,back,female,a/1.jpg\n"
        "2,clark nevus,typical,absent,diffuse regular,absent,regular,absent,palpable,face,male,a/2.jpg\n"
        "3,basal cell carcinoma,absent,absent,absent,absent,absent,arborizing,nodular,trunk,,a/3.jpg\n"
    )
    recs = parse_d7p_metadata(table, taxonomy)
    assert recs[0] == LesionRecord(
        id="d7p-1", image_ref="a/1.jpg", diagnosis=DiagnosisClass.MEL, source=Source.D7P, age=None,
        sex=Sex.FEMALE, site="back",
        concepts={"pigment_network": "atypical", "streaks": "irregular", "pigmentation": "diffuse irregular",
                  "regression_structures": "blue areas", "dots_and_globules": "irregular",
                  "vascular_structures": "absent", "elevation": "flat"},
    )
    assert [r.diagnosis for r in recs] == [DiagnosisClass.MEL, DiagnosisClass.NV, DiagnosisClass.BCC]
    assert recs[2].sex is Sex.UNKNOWN and recs[2].concepts["vascular_structures"] == "arborizing"
    assert all(r.source is Source.D7P and len(r.concepts) == 7 for r in recs)


def test_d7p_errors_carry_row(taxonomy):
    bad_width = D7P_HEADER + "1,melanoma,atypical\n"
    with pytest.raises(ParseError) as e:
        parse_d7p_metadata(bad_width, taxonomy)
    assert e.value.row == 2
    bad_concept = D7P_HEADER + "1,melanoma,atypical,irregular,wavy,absent,absent,absent,flat,back,f,a.jpg\n"
    with pytest.raises(ValidationError, match="row 2"):
        parse_d7p_metadata(bad_concept, taxonomy)
    with pytest.raises(ParseError):
        parse_d7p_metadata("case_num,diagnosis,derm\n1,melanoma,a.jpg\n", taxonomy)


HAM_HEADER = "lesion_id,image_id,dx,dx_type,age,sex,localization\n"


def test_ham_three_rows_field_by_field():
    table = HAM_HEADER + (
        "L1,ISIC_1,mel,histo,55.0,male,back\n"
        "L2,ISIC_2,nv,follow_up,,female,unknown\n"
        "L3,ISIC_3,akiec,histo,70.0,unknown,face\n"
    )
    recs = parse_ham_metadata(table)
    assert recs == [
        LesionRecord("ISIC_1", "ISIC_1.jpg", DiagnosisClass.MEL, Source.HAM, 55.0, Sex.MALE, "back", None),
        LesionRecord("ISIC_2", "ISIC_2.jpg", DiagnosisClass.NV, Source.HAM, None, Sex.FEMALE, None, None),
        LesionRecord("ISIC_3", "ISIC_3.jpg", DiagnosisClass.AKIEC, Source.HAM, 70.0, Sex.UNKNOWN, "face", None),
    ]


def test_ham_errors():
    with pytest.raises(ValidationError, match="row 2"):
        parse_ham_metadata(HAM_HEADER + "L1,ISIC_1,scc,histo,50,male,back\n")
    with pytest.raises(ParseError) as e:
        parse_ham_metadata(HAM_HEADER + "L1,ISIC_1,mel,histo,fifty,male,back\n")
    assert e.value.row == 2


def test_fixture_corpus_parses_totally(corpus, taxonomy):
    d7p = parse_d7p_metadata(corpus["d7p_metadata"], taxonomy)
    ham = parse_ham_metadata(corpus["ham_metadata"])
    with open(corpus["d7p_metadata"]) as fh:
        assert len(d7p) == sum(1 for _ in fh) - 1
    with open(corpus["ham_metadata"]) as fh:
        assert len(ham) == sum(1 for _ in fh) - 1
    assert {r.diagnosis for r in ham} == set(DiagnosisClass)


def _records(counts):
    out = []
    for cls, n in counts.items():
        out += [LesionRecord(f"{cls.value}-{i}", f"{i}.png", cls, Source.HAM, None, None, None, None)
                for i in range(n)]
    return out


def test_split_examples():
    idx = stratified_split(_records({DiagnosisClass.MEL: 10}), 0.2, seed=5)
    assert (len(idx.test), len(idx.train)) == (2, 8)
    again = stratified_split(_records({DiagnosisClass.MEL: 10}), 0.2, seed=5)
    assert idx.split_assignment == again.split_assignment
    two = stratified_split(_records({DiagnosisClass.MEL: 100, DiagnosisClass.NV: 100}), 0.25, seed=1)
    for c in (DiagnosisClass.MEL, DiagnosisClass.NV):
        assert sum(r.diagnosis is c for r in two.test) == 25


def test_split_empty_class():
    with pytest.raises(EmptyClassError):
        stratified_split(_records({DiagnosisClass.MEL: 3}), 0.2, classes=["mel", "nv"])
    with pytest.raises(EmptyClassError):
        stratified_split([], 0.2)


@settings(max_examples=60, deadline=None)
@given(st.dictionaries(st.sampled_from(list(DiagnosisClass)), st.integers(1, 40), min_size=1),
       st.floats(0.05, 0.95), st.integers(0, 2**31))
def test_split_partition_and_fraction(counts, fraction, seed):
    recs = _records(counts)
    idx = stratified_split(recs, fraction, seed)
    assert set(idx.split_assignment) == {r.id for r in recs}
    assert set(idx.split_assignment.values()) <= {"train", "test"}
    assert len(idx.train) + len(idx.test) == len(recs)
    for cls, n in counts.items():
        n_test = sum(r.diagnosis is cls for r in idx.test)
        assert abs(n_test - fraction * n) <= 1


def test_manifest_roundtrip(tmp_path):
    idx = stratified_split(_records({DiagnosisClass.MEL: 7, DiagnosisClass.DF: 3}), 0.2, seed=0)
    idx.write_manifest(tmp_path / "split.tsv")
    assert DatasetIndex.read_manifest(tmp_path / "split.tsv") == idx.split_assignment


# Published dataset sizes; only checked when the real metadata tables are available.
@pytest.mark.skipif(not os.environ.get("DERMSYNTH_D7P_META"), reason="DERMSYNTH_D7P_META not set")
def test_full_d7p_count(taxonomy):
    assert len(parse_d7p_metadata(os.environ["DERMSYNTH_D7P_META"], taxonomy)) == 1926


@pytest.mark.skipif(not os.environ.get("DERMSYNTH_HAM_META"), reason="DERMSYNTH_HAM_META not set")
def test_full_ham_count():
    assert len(parse_ham_metadata(os.environ["DERMSYNTH_HAM_META"])) > 10_000
