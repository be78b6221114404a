"""Parameter counts and analytic FLOP estimates."""
from __future__ import annotations

from .head import tower_channels
from .model import MODALITIES, Model, ModelConfig

# The published lightweight figure ("7"), ambiguous between millions of
# parameters and megabytes of storage.
REFERENCE_PARAMS = 7


def count_params(model_or_params) -> int:
    params = model_or_params.params if isinstance(model_or_params, Model) else model_or_params
    return int(sum(v.size for v in params.values()))


def params_megabytes(n_params, bytes_per_param=4):
    return n_params * bytes_per_param / 1e6


def _ssm_path_macs(cfg: ModelConfig, tokens):
    E, N, R, K = cfg.width, cfg.d_state, cfg.rank, cfg.d_conv
    conv = tokens * E * K
    proj = tokens * E * (R + 2 * N)
    dt = tokens * R * E
    # per (token, channel, state): A_bar h, B_bar x, C h; plus the D x skip
    scan = tokens * E * (3 * N + 1)
    return conv + proj + dt + scan


def _block_macs(cfg: ModelConfig, tokens):
    C, E = cfg.channels, cfg.width
    in_proj = 2 * tokens * C * E
    out_proj = tokens * E * C
    return in_proj + 2 * _ssm_path_macs(cfg, tokens) + out_proj


def flops_breakdown(cfg: ModelConfig) -> dict:
    """FLOPs (2 x multiply-accumulates) of one forward pass, by stage.

    Counts linear maps, convolutions and scan steps; normalization,
    activations and elementwise gating are left out.
    """
    T = cfg.n_template + cfg.n_search
    M = len(MODALITIES)
    patch_dim = cfg.patch * cfg.patch * cfg.in_chans
    embed = M * T * patch_dim * cfg.channels
    backbone = M * cfg.depth * _block_macs(cfg, T)
    C, E = cfg.channels, cfg.width
    fusion = M * (2 * T * C * E + _ssm_path_macs(cfg, T) + T * E * C)
    S2 = cfg.grid ** 2
    head = 0
    chans = tower_channels(2 * C, cfg.head_layers)
    for out_ch in (1, 2, 2):
        head += sum(S2 * 9 * a * b for a, b in zip(chans[:-1], chans[1:]))
        head += S2 * chans[-1] * out_ch
    macs = {"embed": embed, "backbone": backbone, "fusion": fusion, "head": head}
    out = {k: 2 * v for k, v in macs.items()}
    out["total"] = sum(out.values())
    return out


def estimate_flops(cfg: ModelConfig) -> int:
    return flops_breakdown(cfg)["total"]
