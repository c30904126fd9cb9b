"""Concept-grounded caption generation under a token budget.

Three routes produce captions: expert annotations rendered to text (D7P),
pseudo-captions describing an image (HAM) and static label-only captions.
Remote providers talk to an OpenAI-style chat endpoint; the offline
template provider produces the same kinds of captions deterministically.
"""

from __future__ import annotations

import base64
import hashlib
import json
import logging
import mimetypes
import os
import tempfile
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable

import numpy as np

from .errors import BudgetError, ConfigError, ImageNotFoundError, MissingConceptError, ProviderError, ValidationError
from .types import (
    STATIC_TEMPLATE,
    Caption,
    ConceptTaxonomy,
    DiagnosisClass,
    LesionRecord,
    Provenance,
    Source,
    load_taxonomy,
    load_templates,
)

log = logging.getLogger(__name__)

DEFAULT_BUDGET = 77
ENV_BASE_URL = "DERMSYNTH_API_BASE"
ENV_API_KEY = "DERMSYNTH_API_KEY"
ENV_MODEL = "DERMSYNTH_MODEL"


class WhitespaceTokenizer:
    name = "whitespace"

    def count(self, text: str) -> int:
        return len(text.split())


class ClipTokenizer:
    """Token counter backed by the text encoder's own tokenizer (needs ``transformers``)."""

    def __init__(self, name="openai/clip-vit-large-patch14"):
        from transformers import CLIPTokenizer

        self.name = name
        self._tok = CLIPTokenizer.from_pretrained(name)

    def count(self, text: str) -> int:
        return len(self._tok(text)["input_ids"])


_DEFAULT_TOKENIZER = WhitespaceTokenizer()


def count_tokens(text: str, tokenizer=None) -> int:
    return (tokenizer or _DEFAULT_TOKENIZER).count(text)


def truncate_to_budget(text, cls: DiagnosisClass, budget=DEFAULT_BUDGET, tokenizer=None) -> str:
    """Shorten ``text`` to at most ``budget`` tokens.

    Whole trailing comma-separated clauses go first, then trailing words. The
    class name has to survive; if it cannot, BudgetError.
    """
    name = cls.full_name
    if name not in text.lower():
        raise BudgetError(f"caption does not mention the class name {name!r}")
    if count_tokens(text, tokenizer) <= budget:
        return text
    clauses = [c.strip() for c in text.split(",")]
    while len(clauses) > 1 and count_tokens(", ".join(clauses), tokenizer) > budget:
        if name not in ", ".join(clauses[:-1]).lower():
            break
        clauses.pop()
    text = ", ".join(clauses)
    words = text.split()
    while len(words) > 1 and count_tokens(" ".join(words), tokenizer) > budget:
        words.pop()
    text = " ".join(words).rstrip(",;:")
    if name not in text.lower() or count_tokens(text, tokenizer) > budget:
        raise BudgetError(f"cannot fit class name {name!r} within {budget} tokens")
    return text


def make_caption(text, cls, provenance, source_id=None, budget=DEFAULT_BUDGET, tokenizer=None) -> Caption:
    text = " ".join(text.split())
    if cls.full_name not in text.lower():
        # Remote models sometimes drop the label; the conditioning text must carry it.
        text = f"{cls.full_name}, {text}"
    text = truncate_to_budget(text, cls, budget, tokenizer)
    return Caption(text, count_tokens(text, tokenizer), Provenance(provenance), cls, source_id)


def static_caption(cls) -> Caption:
    cls = DiagnosisClass.parse(cls)
    text = STATIC_TEMPLATE.format(name=cls.full_name)
    return Caption(text, count_tokens(text), Provenance.STATIC, cls, None)


# --------------------------------------------------------------------------- instructions


def _concept_label(name):
    return name.replace("_", " ")


def render_expert_instruction(record: LesionRecord, template=None, taxonomy=None, max_words=60) -> str:
    taxonomy = taxonomy or load_taxonomy()
    template = template or load_templates()["expert"]
    concepts = record.concepts or {}
    missing = [n for n in taxonomy.names if n not in concepts]
    if missing:
        raise MissingConceptError(missing)
    lines = "\n".join(f"- {_concept_label(n)}: {concepts[n]}" for n in taxonomy.names)
    return template.format(class_name=record.diagnosis.full_name, concept_lines=lines, max_words=max_words)


@dataclass(frozen=True)
class PseudoInstruction:
    text: str
    image_b64: str
    media_type: str

    def image_bytes(self) -> bytes:
        return base64.b64decode(self.image_b64)


def _resolve_image(record, image_root):
    path = Path(record.image_ref)
    if image_root is not None and not path.is_absolute():
        path = Path(image_root) / path
    if not path.is_file():
        raise ImageNotFoundError(f"{record.id}: image {path} not found")
    return path


def _metadata_lines(record):
    lines = [f"- diagnosis: {record.diagnosis.full_name}"]
    if record.age is not None:
        lines.append(f"- age: {record.age:g} years")
    if record.sex is not None:
        lines.append(f"- sex: {record.sex.value}")
    if record.site:
        lines.append(f"- anatomical site: {record.site}")
    return "\n".join(lines)


def render_pseudo_instruction(record: LesionRecord, taxonomy=None, image_root=None, template=None, max_words=60):
    taxonomy = taxonomy or load_taxonomy()
    template = template or load_templates()["pseudo"]
    path = _resolve_image(record, image_root)
    text = template.format(
        metadata_lines=_metadata_lines(record),
        concept_names=", ".join(_concept_label(n) for n in taxonomy.names),
        max_words=max_words,
    )
    media_type = mimetypes.guess_type(path.name)[0] or "application/octet-stream"
    return PseudoInstruction(text, base64.b64encode(path.read_bytes()).decode("ascii"), media_type)


# --------------------------------------------------------------------------- providers


def default_transport(url, headers, payload, timeout=60.0):
    import httpx

    resp = httpx.post(url, headers=headers, json=payload, timeout=timeout)
    resp.raise_for_status()
    return resp.json()


@dataclass
class CaptionProvider:
    kind: str = "offline_template"
    base_url: str | None = None
    model: str | None = None
    temperature: float = 0.3
    max_retries: int = 3
    backoff: float = 1.0
    cache_dir: str | None = None
    max_workers: int = 4
    seed: int = 0
    allow_network: bool = True
    transport: Callable | None = field(default=None, repr=False, compare=False)

    KINDS = ("remote_text", "remote_vision", "offline_template")

    def __post_init__(self):
        if self.kind not in self.KINDS:
            raise ConfigError(f"unknown provider kind {self.kind!r}")
        if self.is_remote:
            self.base_url = self.base_url or os.environ.get(ENV_BASE_URL, "https://api.openai.com/v1")
            self.model = self.model or os.environ.get(ENV_MODEL, "gpt-4o")

    @property
    def is_remote(self):
        return self.kind != "offline_template"

    @property
    def id(self) -> str:
        if not self.is_remote:
            return f"offline_template/seed={self.seed}"
        return f"{self.kind}/{self.model}/t={self.temperature}"

    def _cache(self):
        return ResponseCache(self.cache_dir) if self.cache_dir else None

    def complete(self, instruction: str, record_id: str, image: PseudoInstruction | None = None) -> str:
        """Send one chat request, going through the on-disk cache first."""
        cache = self._cache()
        key = cache_key(self.id, self.temperature, record_id, instruction, image)
        if cache is not None:
            hit = cache.get(key)
            if hit is not None:
                return hit
        if not self.allow_network:
            raise ProviderError(f"network disabled and no cached response for {record_id}")
        content = [{"type": "text", "text": instruction}]
        if image is not None:
            content.append(
                {"type": "image_url", "image_url": {"url": f"data:{image.media_type};base64,{image.image_b64}"}}
            )
        payload = {
            "model": self.model,
            "temperature": self.temperature,
            "max_tokens": DEFAULT_BUDGET,
            "messages": [{"role": "user", "content": content}],
        }
        headers = {"Content-Type": "application/json"}
        api_key = os.environ.get(ENV_API_KEY)
        if api_key:
            headers["Authorization"] = f"Bearer {api_key}"
        transport = self.transport or default_transport
        url = self.base_url.rstrip("/") + "/chat/completions"
        last = None
        for attempt in range(self.max_retries + 1):
            try:
                resp = transport(url, headers, payload)
                text = resp["choices"][0]["message"]["content"].strip()
                if not text:
                    raise ValueError("empty completion")
                break
            except Exception as e:  # noqa: BLE001 - any transport failure is retried
                last = e
                log.warning("provider call for %s failed (attempt %d): %s", record_id, attempt + 1, type(e).__name__)
                if attempt < self.max_retries:
                    time.sleep(self.backoff * 2**attempt)
        else:
            raise ProviderError(f"{record_id}: provider failed after {self.max_retries + 1} attempts: {last}")
        if cache is not None:
            cache.put(key, text)
        return text


def cache_key(provider_id, temperature, record_id, instruction, image=None) -> str:
    h = hashlib.sha256()
    h.update(instruction.encode())
    if image is not None:
        h.update(image.image_b64.encode())
    key = json.dumps([provider_id, temperature, record_id, h.hexdigest()])
    return hashlib.sha256(key.encode()).hexdigest()


class ResponseCache:
    """Verbatim responses on disk, one file per key, written atomically."""

    def __init__(self, root):
        self.root = Path(root)
        self.root.mkdir(parents=True, exist_ok=True)

    def _path(self, key):
        return self.root / key[:2] / f"{key}.json"

    def get(self, key):
        path = self._path(key)
        if not path.exists():
            return None
        return json.loads(path.read_text())["response"]

    def put(self, key, response):
        path = self._path(key)
        path.parent.mkdir(parents=True, exist_ok=True)
        fd, tmp = tempfile.mkstemp(dir=path.parent, suffix=".tmp")
        with os.fdopen(fd, "w") as fh:
            json.dump({"key": key, "response": response}, fh)
        os.replace(tmp, path)


# --------------------------------------------------------------------------- offline templates


def expert_template_text(record: LesionRecord, taxonomy: ConceptTaxonomy) -> str:
    concepts = record.concepts or {}
    missing = [n for n in taxonomy.names if n not in concepts]
    if missing:
        raise MissingConceptError(missing)
    lead = f"A {concepts['elevation']} " if "elevation" in concepts else "A "
    phrases = []
    for c in taxonomy.concepts:
        if c.name == "elevation":
            continue
        value = concepts[c.name]
        if value == "absent":
            continue
        phrases.append(c.render(value))
    text = lead + record.diagnosis.full_name
    if phrases:
        text += " with " + ", ".join(phrases)
    return text


def image_features(path, size=64) -> dict:
    """Crude lesion statistics used by the offline pseudo-captioner."""
    from PIL import Image

    with Image.open(path) as im:
        arr = np.asarray(im.convert("RGB").resize((size, size)), dtype=np.float64) / 255.0
    gray = arr.mean(axis=2)
    border = np.concatenate([gray[0], gray[-1], gray[:, 0], gray[:, -1]])
    mask = gray < np.median(border) - 0.08
    area = float(mask.mean())
    if mask.any():
        lesion = arr[mask]
        spread = float(lesion.std(axis=0).mean())
        darkness = float(1.0 - lesion.mean())
        redness = float(lesion[:, 0].mean() - lesion[:, 2].mean())
    else:
        spread = darkness = redness = 0.0
    # Very dark isolated pixels inside the lesion approximate dots and globules.
    dark = gray < (gray[mask].mean() - 0.15 if mask.any() else 0.0)
    return {"area": area, "spread": spread, "darkness": darkness, "redness": redness, "dots": float(dark.mean())}


def pseudo_template_text(record: LesionRecord, image_path) -> str:
    f = image_features(image_path)
    elevation = "flat" if f["area"] < 0.12 else ("palpable" if f["area"] < 0.3 else "nodular")
    extent = "diffuse" if f["area"] >= 0.2 else "localized"
    regularity = "irregular" if f["spread"] > 0.06 else "regular"
    phrases = [f"{extent} {regularity} pigmentation"]
    if f["dots"] > 0.01:
        phrases.append(("irregular" if f["dots"] > 0.04 else "regular") + " dots")
    if f["redness"] > 0.25:
        phrases.append("dotted vessels")
    text = f"A {elevation} {record.diagnosis.full_name} with " + ", ".join(phrases)
    if record.site:
        text += f", on the {record.site}"
    return text


def generate_caption(
    record: LesionRecord,
    provider: CaptionProvider,
    budget=DEFAULT_BUDGET,
    taxonomy=None,
    image_root=None,
    tokenizer=None,
) -> Caption:
    """Caption one record: expert route for D7P, pseudo route for HAM."""
    taxonomy = taxonomy or load_taxonomy()
    if record.source is Source.D7P:
        provenance = Provenance.EXPERT
        if provider.kind == "offline_template":
            text = expert_template_text(record, taxonomy)
        elif provider.kind == "remote_text":
            text = provider.complete(render_expert_instruction(record, taxonomy=taxonomy), record.id)
        else:
            raise ConfigError("D7P records are captioned from metadata; use a remote_text or offline provider")
    else:
        provenance = Provenance.PSEUDO
        if provider.kind == "offline_template":
            text = pseudo_template_text(record, _resolve_image(record, image_root))
        elif provider.kind == "remote_vision":
            instr = render_pseudo_instruction(record, taxonomy, image_root)
            text = provider.complete(instr.text, record.id, image=instr)
        else:
            raise ConfigError("HAM records need an image-aware provider (remote_vision or offline)")
    if not text.strip():
        raise ValidationError(f"{record.id}: empty caption")
    return make_caption(text, record.diagnosis, provenance, record.id, budget, tokenizer)


def generate_captions(records, provider: CaptionProvider, budget=DEFAULT_BUDGET, taxonomy=None, image_root=None, tokenizer=None):
    """Caption many records with at most ``provider.max_workers`` requests in flight; keeps input order."""
    taxonomy = taxonomy or load_taxonomy()

    def one(r):
        return generate_caption(r, provider, budget, taxonomy, image_root, tokenizer)

    if not provider.is_remote or provider.max_workers <= 1:
        return [one(r) for r in records]
    with ThreadPoolExecutor(max_workers=provider.max_workers) as pool:
        return list(pool.map(one, records))
