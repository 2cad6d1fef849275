"""Desk-scale graph-conditioned diffusion over part attributes (float64 torch)."""
from .model import (
    Denoiser,
    DenoiserConfig,
    PartBatch,
    attribute_groups,
    cross_attention_inject,
    encode_structure,
    local_global_attention,
    moe_layer,
    object_structure,
    pack_batch,
    span_mask,
    top_k_gates,
)
from .sampling import denoise, postprocess, sample, sample_many
from .schedule import NoiseSchedule, forward_noise, make_noise_schedule
from .training import (
    TrainConfig,
    TrainResult,
    diffusion_loss,
    grad_check,
    load_checkpoint,
    load_trace,
    loss_and_gradients,
    save_checkpoint,
    save_trace,
    train_toy,
)
