from .lora import DEFAULT_TARGETS, LoRALinear, attach_lora, lora_parameters, lora_state, reset_lora
from .sampling import SamplerConfig, SyntheticDataset, generate_dataset, sample, sample_batch
from .schedule import NoiseSchedule, build_linear_schedule, q_sample
from .text import HashedTextEncoder, TextEmbedding, encode_text
from .train import DiffusionTrainConfig, diffusion_loss, finetune, pretrain

__all__ = [
    "DEFAULT_TARGETS",
    "DiffusionTrainConfig",
    "HashedTextEncoder",
    "LoRALinear",
    "NoiseSchedule",
    "SamplerConfig",
    "SyntheticDataset",
    "TextEmbedding",
    "attach_lora",
    "build_linear_schedule",
    "diffusion_loss",
    "encode_text",
    "finetune",
    "generate_dataset",
    "lora_parameters",
    "lora_state",
    "pretrain",
    "q_sample",
    "reset_lora",
    "sample",
    "sample_batch",
]
