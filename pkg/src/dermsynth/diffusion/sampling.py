"""Deterministic DDIM sampling with optional classifier-free guidance, and dataset generation."""

from __future__ import annotations

import hashlib
import json
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np
import torch

from ..errors import ValidationError
from ..types import PromptPool, write_jsonl
from .schedule import NoiseSchedule
from .text import TextEmbedding, collate
from .train import to_uint8


@dataclass
class SamplerConfig:
    steps: int = 50
    guidance_scale: float = 7.5
    seed: int = 0
    resolution: int = 32
    batch_size: int = 32
    # DDIM stochasticity: 0 is the deterministic ODE sampler, 1 matches ancestral DDPM noise levels.
    eta: float = 0.0

    def __post_init__(self):
        if not 0.0 <= self.eta <= 1.0:
            raise ValidationError("eta must be in [0, 1]")

    def to_dict(self):
        return asdict(self)


def derive_seed(*parts) -> int:
    digest = hashlib.sha256(json.dumps([str(p) for p in parts]).encode()).digest()
    return int.from_bytes(digest[:8], "little") & ((1 << 63) - 1)


def ddim_timesteps(T, steps):
    if not 1 <= steps <= T:
        raise ValidationError(f"sampler steps must be in 1..{T}")
    ts = np.unique(np.linspace(1, T, steps).round().astype(int))[::-1]
    return [int(t) for t in ts]


@torch.no_grad()
def sample_batch(denoiser, conds, schedule: NoiseSchedule, config: SamplerConfig, seeds, uncond=None, channels=3):
    """Sample one image per (embedding, seed) pair; returns (B, C, H, W) in [-1, 1].

    Every image's noise (initial and, for eta > 0, per step) comes from a
    generator seeded by its own seed only. Guidance is applied when ``uncond``
    is given: eps = eps_u + s (eps_c - eps_u).
    """
    res = config.resolution
    shape = (channels, res, res)
    gens = [torch.Generator().manual_seed(int(s)) for s in seeds]
    x = torch.stack([torch.randn(shape, generator=g) for g in gens])
    context, mask = collate(list(conds), dtype=x.dtype)
    if uncond is not None:
        u_context, u_mask = collate([uncond] * len(conds), dtype=x.dtype)
    ts = ddim_timesteps(schedule.T, config.steps)
    for i, t in enumerate(ts):
        t_prev = ts[i + 1] if i + 1 < len(ts) else 0
        ab = schedule.alpha_bar_at(t).item()
        ab_prev = schedule.alpha_bar_at(t_prev).item()
        tt = torch.full((x.shape[0],), t, dtype=torch.long)
        eps = denoiser(x, tt, context, mask)
        if uncond is not None:
            eps_u = denoiser(x, tt, u_context, u_mask)
            eps = eps_u + config.guidance_scale * (eps - eps_u)
        x0 = ((x - (1 - ab) ** 0.5 * eps) / ab**0.5).clamp(-1, 1)
        if ab < 1.0:
            eps = (x - ab**0.5 * x0) / (1 - ab) ** 0.5
        sigma = 0.0
        if config.eta > 0 and ab < 1.0:
            sigma = config.eta * ((1 - ab_prev) / (1 - ab) * (1 - ab / ab_prev)) ** 0.5
        x = ab_prev**0.5 * x0 + max(1 - ab_prev - sigma**2, 0.0) ** 0.5 * eps
        if sigma > 0:
            x = x + sigma * torch.stack([torch.randn(shape, generator=g) for g in gens])
    return x.clamp(-1, 1)


def sample(denoiser, c: TextEmbedding, schedule, config: SamplerConfig, uncond=None, index=0):
    """A single image for embedding ``c``; deterministic in (config.seed, index)."""
    seed = derive_seed(config.seed, index)
    return sample_batch(denoiser, [c], schedule, config, [seed], uncond)[0]


@dataclass(frozen=True)
class SyntheticItem:
    id: str
    image_ref: str
    cls: str
    caption_id: str
    caption_text: str
    seed: int

    def to_dict(self):
        return {
            "id": self.id,
            "image_ref": self.image_ref,
            "class": self.cls,
            "caption_id": self.caption_id,
            "caption_text": self.caption_text,
            "seed": self.seed,
        }

    @classmethod
    def from_dict(cls, d):
        return cls(d["id"], d["image_ref"], d["class"], d["caption_id"], d["caption_text"], int(d["seed"]))


@dataclass
class SyntheticDataset:
    id: str
    root: Path
    items: list

    def per_class(self):
        counts = {}
        for it in self.items:
            counts[it.cls] = counts.get(it.cls, 0) + 1
        return counts

    def of_class(self, cls):
        cls = getattr(cls, "value", cls)
        return [it for it in self.items if it.cls == cls]

    def path(self, item):
        return self.root / item.image_ref

    @classmethod
    def load(cls, root):
        root = Path(root)
        meta = json.loads((root / "dataset.json").read_text())
        from ..types import read_jsonl

        return cls(meta["id"], root, read_jsonl(root / "provenance.jsonl", SyntheticItem))


def generate_dataset(
    denoiser,
    encoder,
    schedule,
    pool: PromptPool,
    per_class: int,
    seed: int,
    out_dir,
    sampler: SamplerConfig | None = None,
    classes=None,
    dataset_id="synthetic",
    guidance=True,
    channels=3,
    decode=None,
) -> SyntheticDataset:
    """Write ``per_class`` images for each class under ``out_dir/<class>/<id>.png``.

    Prompts of each class are cycled in pool order. Provenance (caption id,
    text and per-image seed) goes to ``out_dir/provenance.jsonl``. ``decode``
    maps sampled latents to images for latent-space backends.
    """
    from PIL import Image

    sampler = sampler or SamplerConfig(seed=seed)
    out_dir = Path(out_dir)
    classes = pool.classes() if classes is None else list(classes)
    jobs = []
    for cls in classes:
        captions = pool[cls]
        if per_class and not captions:
            raise ValidationError(f"no prompts for class {cls}")
        for k in range(per_class):
            cap = captions[k % len(captions)]
            jobs.append((cls, k, cap, derive_seed(seed, cls.value, k)))
    uncond = encoder.null() if guidance and sampler.guidance_scale != 1.0 else None
    items = []
    denoiser.eval()
    for start in range(0, len(jobs), sampler.batch_size):
        chunk = jobs[start : start + sampler.batch_size]
        conds = [encoder.encode(cap.text) for _, _, cap, _ in chunk]
        x = sample_batch(denoiser, conds, schedule, sampler, [s for *_, s in chunk], uncond, channels)
        imgs = to_uint8(decode(x) if decode is not None else x)
        for (cls, k, cap, s), img in zip(chunk, imgs):
            item_id = f"{cls.value}_{k:05d}"
            rel = f"{cls.value}/{item_id}.png"
            (out_dir / cls.value).mkdir(parents=True, exist_ok=True)
            Image.fromarray(img).save(out_dir / rel)
            items.append(SyntheticItem(item_id, rel, cls.value, cap.id, cap.text, s))
    out_dir.mkdir(parents=True, exist_ok=True)
    write_jsonl(out_dir / "provenance.jsonl", items)
    (out_dir / "dataset.json").write_text(
        json.dumps({"id": dataset_id, "per_class": per_class, "seed": seed, "sampler": sampler.to_dict()}, indent=2)
    )
    return SyntheticDataset(dataset_id, out_dir, items)
