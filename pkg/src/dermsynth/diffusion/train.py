"""Epsilon-prediction objective and the training loops (LoRA fine-tuning, toy base pretraining)."""

from __future__ import annotations

import logging
import math
from dataclasses import asdict, dataclass, field

import numpy as np
import torch
import torch.nn.functional as F

from ..errors import ConfigError, TrainingAbort, ValidationError
from .lora import lora_parameters, lora_state
from .schedule import NoiseSchedule, q_sample
from .text import collate

log = logging.getLogger(__name__)


@dataclass
class DiffusionTrainConfig:
    steps: int = 15000
    learning_rate: float = 1e-5
    scheduler: str = "constant"
    resolution: int = 256
    batch_size: int = 8
    random_crop: bool = True
    horizontal_flip: bool = True
    crop_scale: tuple = (0.8, 1.0)
    precision: str = "full"
    caption_dropout: float = 0.1
    log_every: int = 100
    validate_every_epochs: int = 5
    seed: int = 0

    def __post_init__(self):
        if self.steps < 0:
            raise ConfigError("steps must be non-negative")
        if self.resolution % 8:
            raise ConfigError("resolution must be a multiple of 8")
        if self.scheduler != "constant":
            raise ConfigError("only the constant learning-rate scheduler is supported")
        if self.precision not in ("full", "mixed"):
            raise ConfigError("precision must be 'full' or 'mixed'")
        self.crop_scale = tuple(self.crop_scale)

    def to_dict(self):
        return asdict(self)


def load_image(path, size):
    """Read an RGB image as a (3, size, size) float tensor in [-1, 1]."""
    from PIL import Image

    with Image.open(path) as im:
        im = im.convert("RGB").resize((size, size), Image.BILINEAR)
        arr = np.asarray(im, dtype=np.float32) / 127.5 - 1.0
    return torch.from_numpy(arr).permute(2, 0, 1).contiguous()


def to_uint8(images):
    """(B, 3, H, W) in [-1, 1] -> (B, H, W, 3) uint8."""
    x = ((images.clamp(-1, 1) + 1.0) * 127.5).round().to(torch.uint8)
    return x.permute(0, 2, 3, 1).cpu().numpy()


def augment(images, config: DiffusionTrainConfig, generator):
    """Random crop (rescaled back to full size) and horizontal flip, drawn per sample."""
    out = []
    res = config.resolution
    for img in images:
        if config.random_crop:
            lo, hi = config.crop_scale
            scale = lo + (hi - lo) * torch.rand((), generator=generator).item()
            side = max(1, int(round(img.shape[-1] * scale)))
            top = int(torch.randint(0, img.shape[-2] - side + 1, (), generator=generator))
            left = int(torch.randint(0, img.shape[-1] - side + 1, (), generator=generator))
            img = img[:, top : top + side, left : left + side]
        if img.shape[-1] != res or img.shape[-2] != res:
            img = F.interpolate(img[None], size=(res, res), mode="bilinear", align_corners=False)[0]
        if config.horizontal_flip and torch.rand((), generator=generator).item() < 0.5:
            img = img.flip(-1)
        out.append(img)
    return torch.stack(out)


def diffusion_loss(denoiser, x0, context, mask, schedule: NoiseSchedule, generator=None, t=None, eps=None):
    """Mean squared error between injected noise and the denoiser's estimate of it.

    ``t`` (1..T per sample) and ``eps`` are drawn from ``generator`` unless given.
    """
    if x0.shape[0] == 0:
        raise ValidationError("empty batch")
    b = x0.shape[0]
    if t is None:
        t = torch.randint(1, schedule.T + 1, (b,), generator=generator)
    if eps is None:
        eps = torch.randn(x0.shape, generator=generator, dtype=x0.dtype)
    x_t = q_sample(x0, t, eps, schedule)
    pred = denoiser(x_t, t, context, mask)
    return F.mse_loss(pred, eps)


@dataclass
class FinetuneResult:
    adapter: dict
    losses: list = field(default_factory=list)
    validation_steps: list = field(default_factory=list)
    steps: int = 0

    def mean_loss(self, start, stop):
        return float(np.mean(self.losses[start:stop]))


def _train(model, params, images, embeddings, config, schedule, null_embedding=None, on_validate=None):
    if not images:
        raise ValidationError("training set is empty")
    if len(images) != len(embeddings):
        raise ValidationError("one caption embedding per image expected")
    gen = torch.Generator().manual_seed(config.seed)
    opt = torch.optim.AdamW(params, lr=config.learning_rate, weight_decay=0.0) if params else None
    n = len(images)
    steps_per_epoch = max(1, math.ceil(n / config.batch_size))
    validate_every = config.validate_every_epochs * steps_per_epoch
    losses, validation_steps = [], []
    model.train()
    for step in range(1, config.steps + 1):
        idx = torch.randint(0, n, (min(config.batch_size, n),), generator=gen).tolist()
        x0 = augment([images[i] for i in idx], config, gen)
        embs = [embeddings[i] for i in idx]
        if null_embedding is not None and config.caption_dropout > 0:
            drop = torch.rand(len(embs), generator=gen) < config.caption_dropout
            embs = [null_embedding if d else e for d, e in zip(drop.tolist(), embs)]
        context, mask = collate(embs, dtype=x0.dtype)
        loss = diffusion_loss(model, x0, context, mask, schedule, gen)
        if not torch.isfinite(loss):
            raise TrainingAbort(f"non-finite diffusion loss {loss.item()} at step {step}")
        opt.zero_grad(set_to_none=True)
        loss.backward()
        opt.step()
        losses.append(float(loss.item()))
        if config.log_every and step % config.log_every == 0:
            log.info("step %d/%d loss %.4f", step, config.steps, float(np.mean(losses[-config.log_every :])))
        if on_validate is not None and step % validate_every == 0:
            model.eval()
            on_validate(step, model)
            model.train()
            validation_steps.append(step)
    model.eval()
    return losses, validation_steps


def _encode_all(dataset, encoder, config):
    images, embeddings = [], []
    cache = {}
    for image, caption in dataset:
        if not isinstance(image, torch.Tensor):
            image = load_image(image, _load_size(config))
        text = getattr(caption, "text", caption)
        if text not in cache:
            cache[text] = encoder.encode(text)
        images.append(image)
        embeddings.append(cache[text])
    return images, embeddings


def _load_size(config):
    # Decode slightly larger than the training resolution so crops keep detail.
    return int(round(config.resolution / config.crop_scale[0])) if config.random_crop else config.resolution


def finetune(model, dataset, config: DiffusionTrainConfig, encoder, schedule, on_validate=None) -> FinetuneResult:
    """Train only the LoRA factors already attached to ``model`` for exactly ``config.steps`` steps.

    ``dataset`` is a list of (image tensor or path, Caption or text) pairs.
    """
    params = lora_parameters(model)
    if not params:
        raise ConfigError("model has no LoRA adapters attached")
    if not dataset:
        raise ValidationError("fine-tuning dataset is empty")
    images, embeddings = _encode_all(dataset, encoder, config)
    losses, val_steps = _train(model, params, images, embeddings, config, schedule, encoder.null(), on_validate)
    return FinetuneResult(lora_state(model), losses, val_steps, config.steps)


def pretrain(model, dataset, config: DiffusionTrainConfig, encoder, schedule) -> list:
    """Full-parameter training; builds the toy backend's base checkpoint."""
    images, embeddings = _encode_all(dataset, encoder, config)
    params = [p for p in model.parameters()]
    for p in params:
        p.requires_grad_(True)
    losses, _ = _train(model, params, images, embeddings, config, schedule, encoder.null())
    return losses
