"""Low-rank adapters on linear projections: W' = W + (alpha / r) B A."""

from __future__ import annotations

import json
import math
from pathlib import Path

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from ..errors import ConfigError

# Attention projections of the toy denoiser and of diffusers' attention blocks.
DEFAULT_TARGETS = ("to_q", "to_k", "to_v", "to_out")


class LoRALinear(nn.Module):
    def __init__(self, base: nn.Linear, rank: int, alpha: float | None = None, generator=None):
        super().__init__()
        if rank < 1:
            raise ConfigError("LoRA rank must be positive")
        self.base = base
        self.rank = rank
        self.alpha = float(rank if alpha is None else alpha)
        self.scaling = self.alpha / rank
        w = base.weight
        self.lora_A = nn.Parameter(torch.empty(rank, base.in_features, dtype=w.dtype))
        self.lora_B = nn.Parameter(torch.zeros(base.out_features, rank, dtype=w.dtype))
        nn.init.kaiming_uniform_(self.lora_A, a=math.sqrt(5), generator=generator)
        for p in base.parameters():
            p.requires_grad_(False)

    @property
    def in_features(self):
        return self.base.in_features

    @property
    def out_features(self):
        return self.base.out_features

    def forward(self, x):
        d_in, d_out = self.base.in_features, self.base.out_features
        if self.rank * (d_in + d_out) >= d_in * d_out:
            # Rank at or above the layer width: one merged matmul is cheaper and exact at B = 0.
            return F.linear(x, self.base.weight + self.delta_weight(), self.base.bias)
        return self.base(x) + self.scaling * ((x @ self.lora_A.T) @ self.lora_B.T)

    def delta_weight(self):
        return self.scaling * (self.lora_B @ self.lora_A)


def _matches(name, target):
    return name == target or name.endswith("." + target)


def _set_submodule(model, name, module):
    parent_name, _, attr = name.rpartition(".")
    parent = model.get_submodule(parent_name) if parent_name else model
    if attr.isdigit():
        parent[int(attr)] = module
    else:
        setattr(parent, attr, module)


def attach_lora(model: nn.Module, rank=64, alpha=None, targets=DEFAULT_TARGETS, seed=0) -> nn.Module:
    """Freeze ``model`` and wrap every nn.Linear whose name ends in one of ``targets``.

    Targets may be short suffixes ("to_q") or full dotted names. A target that
    matches nothing raises ConfigError. The model is modified in place and returned.
    The A factors are drawn from a generator seeded with ``seed``, in module order.
    """
    for p in model.parameters():
        p.requires_grad_(False)
    linears = [(n, m) for n, m in model.named_modules() if isinstance(m, nn.Linear)]
    hit = {t: [] for t in targets}
    for name, module in linears:
        for t in targets:
            if _matches(name, t):
                hit[t].append(name)
                break
    unknown = [t for t, names in hit.items() if not names]
    if unknown:
        raise ConfigError("LoRA targets not found in model: " + ", ".join(unknown))
    modules = dict(linears)
    gen = torch.Generator().manual_seed(int(seed))
    for name, _ in linears:
        if any(name in names for names in hit.values()):
            _set_submodule(model, name, LoRALinear(modules[name], rank, alpha, gen))
    return model


def lora_modules(model):
    return {n: m for n, m in model.named_modules() if isinstance(m, LoRALinear)}


def lora_parameters(model):
    return [p for m in lora_modules(model).values() for p in (m.lora_A, m.lora_B)]


def expected_parameter_count(model, rank):
    return sum(rank * (m.in_features + m.out_features) for m in lora_modules(model).values())


def lora_state(model) -> dict:
    out = {}
    for name, m in lora_modules(model).items():
        out[f"{name}.lora_A"] = m.lora_A.detach().cpu().clone()
        out[f"{name}.lora_B"] = m.lora_B.detach().cpu().clone()
    return out


def load_lora_state(model, state):
    mods = lora_modules(model)
    with torch.no_grad():
        for key, value in state.items():
            name, _, which = key.rpartition(".")
            getattr(mods[name], which).copy_(torch.as_tensor(value))


def reset_lora(model):
    """Zero every B factor, which restores the base model's function exactly."""
    with torch.no_grad():
        for m in lora_modules(model).values():
            m.lora_B.zero_()


def save_adapter(path, state: dict, manifest: dict):
    """Flat named-tensor archive (npz) plus a JSON manifest next to it."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    np.savez(path, **{k: v.numpy() for k, v in state.items()})
    Path(str(path) + ".json").write_text(json.dumps(manifest, indent=2, sort_keys=True))


def load_adapter(path):
    path = Path(path)
    with np.load(path) as data:
        state = {k: torch.from_numpy(data[k]) for k in data.files}
    manifest = json.loads(Path(str(path) + ".json").read_text())
    return state, manifest
