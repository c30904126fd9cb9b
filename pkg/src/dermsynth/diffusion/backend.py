"""Diffusion backends: the CPU toy model and the pretrained latent-diffusion seam.

Both expose the same handful of calls used by the pipeline: build a
LoRA-adapted denoiser, fine-tune it on (image, caption) pairs, and write a
synthetic dataset from a prompt pool.
"""

from __future__ import annotations

import json
import logging
from pathlib import Path

import numpy as np
import torch

from ..errors import ConfigError
from .denoiser import ToyUNet
from .lora import DEFAULT_TARGETS, attach_lora, load_lora_state
from .sampling import SamplerConfig, generate_dataset
from .schedule import build_linear_schedule
from .text import HashedTextEncoder
from .toy_data import base_corpus
from .train import DiffusionTrainConfig, finetune, pretrain

log = logging.getLogger(__name__)

SHIPPED_BASE = Path(__file__).resolve().parent.parent / "data" / "toy_base.npz"

# Settings the shipped base checkpoint was trained with; a request that differs rebuilds it.
TOY_BASE_RECIPE = {
    "architecture": "ToyUNet",
    "init_seed": 0,
    "model": {"channels": 16, "context_dim": 64, "temb_dim": 64, "in_channels": 3, "heads": 2},
    "timesteps": 200,
    "beta_start": 5e-4,
    "beta_end": 0.1,
    "encoder": {"dim": 64, "seed": 0},
    "corpus": {"n": 2000, "size": 32, "seed": 0, "named_fraction": 0.75},
    "train": {"steps": 8000, "learning_rate": 1e-3, "batch_size": 16, "seed": 1},
}


def _state_to_numpy(model):
    return {k: v.detach().cpu().numpy() for k, v in model.state_dict().items()}


def save_checkpoint(path, model, recipe):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    np.savez(path, **_state_to_numpy(model))
    Path(str(path) + ".json").write_text(json.dumps(recipe, indent=2, sort_keys=True))


def load_checkpoint(path):
    with np.load(path) as data:
        state = {k: torch.from_numpy(data[k]) for k in data.files}
    recipe = json.loads(Path(str(path) + ".json").read_text())
    return state, recipe


def build_toy_base(recipe=None, log_every=500):
    """Pretrain the toy denoiser on captioned shapes.

    The corpus teaches colour words from a fixed palette, so the base already
    conditions on attribute words the way a pretrained text-to-image model
    does; adapters then only have to bind new words.
    """
    recipe = recipe or TOY_BASE_RECIPE
    torch.manual_seed(recipe["init_seed"])
    model = ToyUNet(**recipe["model"])
    schedule = build_linear_schedule(recipe["timesteps"], recipe["beta_start"], recipe["beta_end"])
    encoder = HashedTextEncoder(**recipe["encoder"])
    corpus = base_corpus(**recipe["corpus"])
    tr = recipe["train"]
    cfg = DiffusionTrainConfig(
        steps=tr["steps"], learning_rate=tr["learning_rate"], resolution=recipe["corpus"]["size"],
        batch_size=tr["batch_size"], seed=tr["seed"], random_crop=False, horizontal_flip=True, log_every=log_every,
    )
    losses = pretrain(model, corpus, cfg, encoder, schedule)
    return model, losses


class ToyBackend:
    """Pixel-space toy denoiser with hashed bag-of-token text features.

    The base checkpoint stands in for a pretrained model: it is loaded from the
    file shipped with the package, or built once and kept under ``cache_dir``.
    """

    name = "toy"

    def __init__(self, timesteps=200, beta_start=5e-4, beta_end=0.1, cache_dir=None, base_steps=None):
        self.recipe = json.loads(json.dumps(TOY_BASE_RECIPE))
        self.recipe.update(timesteps=timesteps, beta_start=beta_start, beta_end=beta_end)
        if base_steps is not None:
            self.recipe["train"]["steps"] = int(base_steps)
        self.schedule = build_linear_schedule(timesteps, beta_start, beta_end)
        self.encoder = HashedTextEncoder(**self.recipe["encoder"])
        self.cache_dir = Path(cache_dir) if cache_dir else None
        self._base_state = None

    @classmethod
    def from_config(cls, dcfg, cache_dir=None):
        return cls(dcfg.timesteps, dcfg.beta_start, dcfg.beta_end, cache_dir, dcfg.base_steps)

    @property
    def resolution(self):
        return self.recipe["corpus"]["size"]

    @property
    def base_id(self) -> str:
        import hashlib

        return hashlib.sha256(json.dumps(self.recipe, sort_keys=True).encode()).hexdigest()[:16]

    def _locate_base(self):
        if SHIPPED_BASE.exists():
            _, shipped = load_checkpoint(SHIPPED_BASE)
            if shipped == self.recipe:
                return SHIPPED_BASE
        if self.cache_dir is None:
            return None
        return self.cache_dir / f"toy_base_{self.base_id}.npz"

    def base_state(self):
        if self._base_state is None:
            path = self._locate_base()
            if path is not None and path.exists():
                self._base_state, _ = load_checkpoint(path)
            else:
                log.info("building toy base checkpoint (%d steps)", self.recipe["train"]["steps"])
                model, _ = build_toy_base(self.recipe)
                self._base_state = model.state_dict()
                if path is not None:
                    save_checkpoint(path, model, self.recipe)
        return self._base_state

    def base_model(self):
        model = ToyUNet(**self.recipe["model"])
        model.load_state_dict(self.base_state())
        model.eval()
        return model

    def adapted_model(self, rank=64, alpha=None, targets=DEFAULT_TARGETS, adapter_state=None, seed=0):
        model = attach_lora(self.base_model(), rank=rank, alpha=alpha, targets=targets, seed=seed)
        if adapter_state is not None:
            load_lora_state(model, adapter_state)
        model.eval()
        return model

    def finetune(self, model, dataset, config: DiffusionTrainConfig, on_validate=None):
        if config.resolution != self.resolution:
            raise ConfigError(f"toy backend trains at {self.resolution}px, config asks for {config.resolution}")
        return finetune(model, dataset, config, self.encoder, self.schedule, on_validate)

    def generate(self, model, pool, per_class, seed, out_dir, sampler: SamplerConfig, classes=None, dataset_id="synthetic"):
        if sampler.resolution != self.resolution:
            raise ConfigError(f"toy backend samples at {self.resolution}px, config asks for {sampler.resolution}")
        return generate_dataset(model, self.encoder, self.schedule, pool, per_class, seed, out_dir, sampler,
                                classes=classes, dataset_id=dataset_id)


class PretrainedBackend:
    """Latent-diffusion checkpoint loaded through ``diffusers`` (optional dependency).

    LoRA is attached to the UNet attention projections (to_q, to_k, to_v and
    the first to_out layer). Images are mapped to latents by the checkpoint's
    VAE and captions to token features by its CLIP text encoder. Needs a GPU
    in practice; never exercised by the test suite.
    """

    name = "pretrained"
    TARGETS = ("to_q", "to_k", "to_v", "to_out.0")
    LATENT_SCALE = 0.18215

    def __init__(self, checkpoint="CompVis/stable-diffusion-v1-4", timesteps=1000, beta_start=1e-4, beta_end=0.02,
                 device=None):
        try:
            from diffusers import AutoencoderKL, UNet2DConditionModel
            from transformers import CLIPTextModel, CLIPTokenizer
        except ImportError as e:
            raise ConfigError("the pretrained backend needs the 'pretrained' extra (diffusers, transformers)") from e
        self.device = device or ("cuda" if torch.cuda.is_available() else "cpu")
        self.tokenizer = CLIPTokenizer.from_pretrained(checkpoint, subfolder="tokenizer")
        self.text_encoder = CLIPTextModel.from_pretrained(checkpoint, subfolder="text_encoder").to(self.device).eval()
        self.vae = AutoencoderKL.from_pretrained(checkpoint, subfolder="vae").to(self.device).eval()
        self._unet_cls = UNet2DConditionModel
        self.checkpoint = checkpoint
        self.schedule = build_linear_schedule(timesteps, beta_start, beta_end)
        self.encoder = _ClipEncoder(self.tokenizer, self.text_encoder, self.device)

    @classmethod
    def from_config(cls, dcfg, cache_dir=None):
        return cls(dcfg.checkpoint, dcfg.timesteps, dcfg.beta_start, dcfg.beta_end)

    def adapted_model(self, rank=64, alpha=None, targets=None, adapter_state=None, seed=0):
        unet = self._unet_cls.from_pretrained(self.checkpoint, subfolder="unet").to(self.device)
        unet = attach_lora(unet, rank=rank, alpha=alpha, targets=targets or self.TARGETS, seed=seed)
        model = _UNetDenoiser(unet)
        if adapter_state is not None:
            load_lora_state(model, adapter_state)
        return model.eval()

    @torch.no_grad()
    def _to_latent(self, image):
        x = image[None].to(self.device)
        return (self.vae.encode(x).latent_dist.mean * self.LATENT_SCALE)[0].cpu()

    @torch.no_grad()
    def _decode(self, latents):
        return self.vae.decode(latents.to(self.device) / self.LATENT_SCALE).sample.clamp(-1, 1).cpu()

    def finetune(self, model, dataset, config: DiffusionTrainConfig, on_validate=None):
        from .train import load_image

        pairs = []
        for image, caption in dataset:
            if not isinstance(image, torch.Tensor):
                image = load_image(image, config.resolution)
            pairs.append((self._to_latent(image), caption))
        latent_cfg = DiffusionTrainConfig(**{**config.to_dict(), "resolution": config.resolution // 8,
                                             "random_crop": False})
        return finetune(model, pairs, latent_cfg, self.encoder, self.schedule, on_validate)

    def generate(self, model, pool, per_class, seed, out_dir, sampler: SamplerConfig, classes=None, dataset_id="synthetic"):
        latent_sampler = SamplerConfig(**{**sampler.to_dict(), "resolution": sampler.resolution // 8})
        return generate_dataset(model, self.encoder, self.schedule, pool, per_class, seed, out_dir, latent_sampler,
                                classes=classes, dataset_id=dataset_id, channels=4, decode=self._decode)


class _UNetDenoiser(torch.nn.Module):
    """Adapts a diffusers UNet to the (x, t, context, mask) denoiser call."""

    def __init__(self, unet):
        super().__init__()
        self.unet = unet

    def forward(self, x, t, context, mask=None):
        return self.unet(x, t, encoder_hidden_states=context).sample


class _ClipEncoder:
    def __init__(self, tokenizer, text_encoder, device):
        self.tokenizer = tokenizer
        self.text_encoder = text_encoder
        self.device = device
        self.id = "clip/" + getattr(text_encoder.config, "_name_or_path", "text_encoder")

    @torch.no_grad()
    def _features(self, text):
        ids = self.tokenizer(text, padding="max_length", max_length=self.tokenizer.model_max_length,
                             truncation=True, return_tensors="pt").input_ids.to(self.device)
        return self.text_encoder(ids)[0][0].float().cpu()

    def encode(self, text):
        from .text import TextEmbedding

        text = getattr(text, "text", text)
        return TextEmbedding(text, self._features(text))

    def null(self):
        from .text import TextEmbedding

        return TextEmbedding("", self._features(""))


def make_backend(dcfg, cache_dir=None):
    if dcfg.backend == "toy":
        return ToyBackend.from_config(dcfg, cache_dir)
    if dcfg.backend == "pretrained":
        return PretrainedBackend.from_config(dcfg, cache_dir)
    raise ConfigError(f"unknown diffusion backend {dcfg.backend!r}")
