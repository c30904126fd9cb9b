"""Equalize per-class prompt counts by paraphrasing under-represented classes."""

from __future__ import annotations

import hashlib
import json
import re
from pathlib import Path

import numpy as np

from .captioning import DEFAULT_BUDGET, CaptionProvider, make_caption
from .errors import DegenerateParaphraseError, EmptyClassError, TargetTooSmallError, ValidationError
from .types import HAM_CLASSES, Caption, PromptPool, Provenance, load_templates, write_jsonl

# First entry is the canonical rewrite used on the first paraphrase pass.
# Elevation words list themselves first so the canonical pass keeps them.
SYNONYMS = {
    "featuring": ["showing", "displaying", "presenting"],
    "with": ["showing", "featuring", "displaying", "exhibiting"],
    "diffuse irregular pigmentation": ["uneven pigmentation", "diffuse uneven pigmentation", "irregular diffuse pigmentation"],
    "localized irregular pigmentation": ["patchy uneven pigmentation", "focal irregular pigmentation"],
    "diffuse regular pigmentation": ["uniform pigmentation", "even diffuse pigmentation"],
    "localized regular pigmentation": ["focal uniform pigmentation", "localized even pigmentation"],
    "irregular dots": ["scattered dots", "irregularly distributed dots", "uneven dots"],
    "regular dots": ["evenly spaced dots", "uniform dots"],
    "irregular streaks": ["uneven streaks", "irregular radial streaks"],
    "regular streaks": ["symmetric streaks", "even streaks"],
    "atypical pigment network": ["irregular pigment network", "atypical network"],
    "typical pigment network": ["regular pigment network", "typical network"],
    "dotted vessels": ["dot-like vessels", "punctate vessels"],
    "arborizing vessels": ["branching vessels", "tree-like vessels"],
    "comma vessels": ["comma-shaped vessels", "curved vessels"],
    "hairpin vessels": ["looped vessels", "hairpin-shaped vessels"],
    "nodular": ["nodular", "raised"],
    "palpable": ["palpable", "slightly raised"],
    "flat": ["flat", "macular"],
}
WRAPPERS = ["Dermoscopy of {t}", "Dermoscopic view of {t}", "Close-up of {t}"]

_PATTERN = re.compile(r"\b(" + "|".join(re.escape(k) for k in sorted(SYNONYMS, key=len, reverse=True)) + r")\b")


def count_per_class(pool: PromptPool, classes=HAM_CLASSES) -> dict:
    counts = {c: 0 for c in classes}
    for c, captions in pool.entries.items():
        counts[c] = len(captions)
    return counts


def _stream(seed, text, variant):
    digest = hashlib.sha256(json.dumps([seed, text, variant]).encode()).digest()
    return np.random.default_rng(int.from_bytes(digest[:8], "little"))


def offline_paraphrase_text(text: str, seed=0, variant=0) -> str:
    """Seeded synonym substitution plus clause reordering.

    Variant 0 applies the canonical synonym of every matched phrase and keeps
    clause order; later variants draw synonyms and shuffle trailing clauses.
    """
    rng = _stream(seed, text, variant)

    def sub(m):
        options = SYNONYMS[m.group(0)]
        if variant == 0:
            return options[0]
        return options[int(rng.integers(len(options)))]

    out = _PATTERN.sub(sub, text)
    if variant > 0:
        clauses = [c.strip() for c in out.split(",")]
        if len(clauses) > 2:
            tail = clauses[1:]
            rng.shuffle(tail)
            out = ", ".join([clauses[0]] + tail)
    if out == text:
        body = text[0].lower() + text[1:] if text[:2] in ("A ", "An") else text
        out = WRAPPERS[variant % len(WRAPPERS)].format(t=body)
    return out


def paraphrase(caption: Caption, provider: CaptionProvider, budget=DEFAULT_BUDGET, variant=0, tokenizer=None) -> Caption:
    """Reword ``caption``; the result keeps its class and source but has provenance paraphrase."""
    if caption.provenance not in (Provenance.EXPERT, Provenance.PSEUDO, Provenance.PARAPHRASE):
        raise ValidationError(f"cannot paraphrase a {caption.provenance} caption")
    if not provider.is_remote:
        text = offline_paraphrase_text(caption.text, provider.seed, variant)
    else:
        template = load_templates()["paraphrase"]
        text = caption.text
        for attempt in range(provider.max_retries + 1):
            instruction = template.format(class_name=caption.cls.full_name, text=caption.text, max_words=60)
            text = provider.complete(instruction, f"{caption.id}/v{variant}/a{attempt}").strip()
            if text != caption.text:
                break
        else:
            raise DegenerateParaphraseError(f"provider kept returning the input for caption {caption.id}")
    out = make_caption(text, caption.cls, Provenance.PARAPHRASE, caption.source_id, budget, tokenizer)
    if out.text == caption.text:
        raise DegenerateParaphraseError(f"paraphrase of {caption.id} collapsed to the input after truncation")
    return out


def balance_pool(pool: PromptPool, target=None, provider=None, seed=0, budget=DEFAULT_BUDGET, tokenizer=None) -> PromptPool:
    """Bring every class in ``pool`` to exactly ``target`` captions.

    Existing captions stay first, in order. The deficit is filled round-robin
    over the class's existing captions; pass k over the originals uses
    paraphrase variant k.
    """
    provider = provider or CaptionProvider(seed=seed)
    for c, captions in pool.entries.items():
        if not captions:
            raise EmptyClassError(f"class {c} has no captions to paraphrase")
    if not pool.entries:
        return pool
    counts = {c: len(v) for c, v in pool.entries.items()}
    if target is None:
        target = max(counts.values())
    if target <= 0:
        raise ValidationError("target must be positive")
    for c in pool.classes():
        if counts[c] > target:
            raise TargetTooSmallError(f"class {c} already has {counts[c]} captions, above target {target}")

    entries = {}
    for c in pool.classes():
        originals = list(pool.entries[c])
        out = list(originals)
        texts = {x.text for x in out}
        n = len(originals)
        for j in range(target - n):
            src = originals[j % n]
            variant = j // n
            new = paraphrase(src, provider, budget, variant=variant, tokenizer=tokenizer)
            if new.text in texts:
                # One retry on a perturbed variant, then accept the duplicate.
                retry = paraphrase(src, provider, budget, variant=variant + 1000, tokenizer=tokenizer)
                new = retry if retry.text not in texts else new
            texts.add(new.text)
            out.append(new)
        entries[c] = out
    return PromptPool(entries)


def balance_manifest(before: PromptPool, after: PromptPool, target, seed, provider) -> dict:
    return {
        "target": target,
        "seed": seed,
        "provider": provider.id,
        "classes": {
            c.value: {"original": len(before[c]), "paraphrase": len(after[c]) - len(before[c])} for c in after.classes()
        },
    }


def write_pool(path, pool: PromptPool, manifest=None):
    path = Path(path)
    write_jsonl(path, pool.captions())
    if manifest is not None:
        path.with_suffix(".manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True))
