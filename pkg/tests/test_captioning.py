import base64
import threading
from pathlib import Path

import pytest
from hypothesis import given
from hypothesis import strategies as st

from dermsynth.captioning import (
    CaptionProvider,
    count_tokens,
    generate_caption,
    generate_captions,
    make_caption,
    render_expert_instruction,
    render_pseudo_instruction,
    static_caption,
    truncate_to_budget,
)
from dermsynth.errors import BudgetError, ConfigError, ImageNotFoundError, MissingConceptError, ProviderError
from dermsynth.ingestion import parse_d7p_metadata, parse_ham_metadata
from dermsynth.types import CLASS_NAMES, DiagnosisClass, LesionRecord, Provenance, Sex, Source

NODULAR_MELANOMA = "A nodular melanoma featuring diffuse irregular pigmentation, irregular dots"


def d7p_record(**concepts):
    base = {"elevation": "nodular", "pigment_network": "atypical", "streaks": "absent",
            "pigmentation": "diffuse irregular", "regression_structures": "absent",
            "dots_and_globules": "irregular", "vascular_structures": "absent"}
    base.update(concepts)
    return LesionRecord("d7p-1", "x.png", DiagnosisClass.MEL, Source.D7P, None, Sex.MALE, "back", base)


class CountingTransport:
    """Stands in for the HTTP endpoint; records every request."""

    def __init__(self, reply="A flat melanoma with regular dots", fail_first=0):
        self.calls = []
        self.reply = reply
        self.fail_first = fail_first
        self.lock = threading.Lock()

    def __call__(self, url, headers, payload):
        with self.lock:
            self.calls.append(payload)
            n = len(self.calls)
        if n <= self.fail_first:
            raise ConnectionError("boom")
        return {"choices": [{"message": {"content": self.reply}}]}


def test_count_tokens():
    assert count_tokens("") == 0
    assert count_tokens("a b c") == 3
    assert count_tokens(NODULAR_MELANOMA) <= 77


def test_static_captions():
    assert static_caption(DiagnosisClass.MEL).text == "an image of melanoma"
    assert static_caption("nv").text == "an image of melanocytic nevus"
    assert static_caption("df") == static_caption("df")
    assert static_caption("bcc").provenance is Provenance.STATIC


def test_class_name_table():
    # Class-code to full-name table from the HAM10000 documentation.
    assert {c.value: n for c, n in CLASS_NAMES.items()} == {
        "akiec": "actinic keratosis", "bcc": "basal cell carcinoma", "bkl": "benign keratosis",
        "df": "dermatofibroma", "mel": "melanoma", "nv": "melanocytic nevus", "vasc": "vascular lesion",
    }


def test_expert_instruction():
    text = render_expert_instruction(d7p_record())
    for pair in ("elevation: nodular", "pigment network: atypical", "streaks: absent",
                 "pigmentation: diffuse irregular", "regression structures: absent",
                 "dots and globules: irregular", "vascular structures: absent"):
        assert pair in text
    assert "melanoma" in text
    assert "diffuse irregular" in text


def test_expert_instruction_missing_concepts():
    rec = d7p_record()
    concepts = dict(rec.concepts)
    del concepts["streaks"], concepts["elevation"]
    rec = LesionRecord(rec.id, rec.image_ref, rec.diagnosis, Source.D7P, None, None, None, concepts)
    with pytest.raises(MissingConceptError) as e:
        render_expert_instruction(rec)
    assert set(e.value.missing) == {"streaks", "elevation"}


def test_offline_expert_caption_matches_template():
    cap = generate_caption(d7p_record(), CaptionProvider())
    assert cap.text == ("A nodular melanoma with atypical pigment network, diffuse irregular pigmentation, "
                        "irregular dots")
    assert cap.provenance is Provenance.EXPERT and cap.source_id == "d7p-1"
    assert generate_caption(d7p_record(), CaptionProvider()).text == cap.text


def test_truncation_keeps_class_and_drops_clauses():
    long = "A nodular melanoma with " + ", ".join(f"finding{i} detail" for i in range(43))
    assert count_tokens(long) == 90
    out = truncate_to_budget(long, DiagnosisClass.MEL, 77)
    assert count_tokens(out) <= 77 and "melanoma" in out
    assert out.endswith("detail")  # whole clauses removed, no half clause left behind
    with pytest.raises(BudgetError):
        truncate_to_budget("some long lead words then melanoma", DiagnosisClass.MEL, 3)


@given(st.lists(st.text("abcdefgh ", min_size=1, max_size=12), min_size=1, max_size=40),
       st.sampled_from(list(DiagnosisClass)), st.integers(4, 30))
def test_truncation_properties(parts, cls, budget):
    text = f"A {cls.full_name} with " + ", ".join(parts)
    cap = make_caption(text, cls, Provenance.PSEUDO, budget=budget)
    assert count_tokens(cap.text) <= budget
    assert cls.full_name in cap.text.lower()


def test_budget_over_fixture_corpus(corpus, taxonomy):
    d7p = parse_d7p_metadata(corpus["d7p_metadata"], taxonomy)
    ham = parse_ham_metadata(corpus["ham_metadata"])
    provider = CaptionProvider()
    for budget in (77, 12):
        caps = generate_captions(d7p, provider, budget, taxonomy, corpus["d7p_images"])
        caps += generate_captions(ham, provider, budget, taxonomy, corpus["ham_images"])
        assert len(caps) == len(d7p) + len(ham)
        for cap, rec in zip(caps, d7p + ham):
            assert count_tokens(cap.text) <= budget
            assert cap.cls is rec.diagnosis and rec.diagnosis.full_name in cap.text.lower()
    assert {c.provenance for c in caps} == {Provenance.EXPERT, Provenance.PSEUDO}


def test_pseudo_instruction(corpus):
    ham = parse_ham_metadata(corpus["ham_metadata"])
    rec = next(r for r in ham if r.age is not None and r.site and r.sex is not None)
    instr = render_pseudo_instruction(rec, image_root=corpus["ham_images"])
    for label in ("elevation", "pigment network", "streaks", "pigmentation", "regression structures",
                  "dots and globules", "vascular structures"):
        assert label in instr.text
    for field in ("diagnosis:", "age:", "sex:", "anatomical site:"):
        assert field in instr.text
    raw = (Path(corpus["ham_images"]) / rec.image_ref).read_bytes()
    assert base64.b64decode(instr.image_b64) == raw == instr.image_bytes()
    assert instr.media_type == "image/jpeg"

    ageless = LesionRecord(rec.id, rec.image_ref, rec.diagnosis, Source.HAM, None, rec.sex, rec.site, None)
    assert "age:" not in render_pseudo_instruction(ageless, image_root=corpus["ham_images"]).text
    missing = LesionRecord("nope", "nope.jpg", rec.diagnosis, Source.HAM, None, None, None, None)
    with pytest.raises(ImageNotFoundError):
        render_pseudo_instruction(missing, image_root=corpus["ham_images"])


def test_remote_cache_soundness(tmp_path):
    transport = CountingTransport()
    provider = CaptionProvider("remote_text", base_url="http://stub", model="m", cache_dir=str(tmp_path),
                               transport=transport, backoff=0)
    first = generate_caption(d7p_record(), provider)
    assert len(transport.calls) == 1
    offline = CaptionProvider("remote_text", base_url="http://stub", model="m", cache_dir=str(tmp_path),
                              transport=transport, allow_network=False)
    assert generate_caption(d7p_record(), offline) == first
    assert len(transport.calls) == 1
    assert transport.calls[0]["temperature"] == 0.3


def test_temperature_is_part_of_cache_key(tmp_path):
    transport = CountingTransport()
    kw = dict(base_url="http://stub", model="m", cache_dir=str(tmp_path), transport=transport, backoff=0)
    generate_caption(d7p_record(), CaptionProvider("remote_text", temperature=0.3, **kw))
    generate_caption(d7p_record(), CaptionProvider("remote_text", temperature=0.7, **kw))
    assert len(transport.calls) == 2


def test_offline_cache_miss_is_provider_error(tmp_path):
    provider = CaptionProvider("remote_text", base_url="http://stub", model="m", cache_dir=str(tmp_path),
                               allow_network=False, transport=CountingTransport())
    with pytest.raises(ProviderError):
        generate_caption(d7p_record(), provider)


def test_retries_with_backoff(tmp_path, monkeypatch):
    sleeps = []
    monkeypatch.setattr("dermsynth.captioning.time.sleep", sleeps.append)
    transport = CountingTransport(fail_first=2)
    provider = CaptionProvider("remote_text", base_url="http://stub", model="m", transport=transport,
                               max_retries=3, backoff=0.5)
    generate_caption(d7p_record(), provider)
    assert len(transport.calls) == 3 and sleeps == [0.5, 1.0]

    dead = CaptionProvider("remote_text", base_url="http://stub", model="m", max_retries=2, backoff=0.5,
                           transport=CountingTransport(fail_first=99))
    with pytest.raises(ProviderError):
        generate_caption(d7p_record(), dead)


def test_remote_caption_missing_label_gets_prefixed():
    transport = CountingTransport(reply="A flat lesion with regular dots")
    provider = CaptionProvider("remote_text", base_url="http://stub", model="m", transport=transport)
    cap = generate_caption(d7p_record(), provider)
    assert "melanoma" in cap.text


def test_vision_request_carries_image(corpus, tmp_path):
    ham = parse_ham_metadata(corpus["ham_metadata"])[:3]
    transport = CountingTransport(reply="A flat melanocytic nevus with regular dots")
    provider = CaptionProvider("remote_vision", base_url="http://stub", model="m", transport=transport,
                               cache_dir=str(tmp_path), max_workers=3)
    caps = generate_captions(ham, provider, image_root=corpus["ham_images"])
    assert [c.source_id for c in caps] == [r.id for r in ham]
    assert all(c.provenance is Provenance.PSEUDO for c in caps)
    parts = transport.calls[0]["messages"][0]["content"]
    assert parts[1]["image_url"]["url"].startswith("data:image/jpeg;base64,")


def test_provider_route_mismatch():
    with pytest.raises(ConfigError):
        generate_caption(d7p_record(), CaptionProvider("remote_vision", base_url="http://stub", model="m"))
    with pytest.raises(ConfigError):
        CaptionProvider("telepathy")
