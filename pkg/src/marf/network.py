"""The ray-to-medial-atom MLP, its initialization, and the baseline head.

Architecture: an MLP over the 9D ray embedding with skip connections that
re-concatenate the input (and latent code, when conditioned) at the middle
and final hidden layers, plus an extra skip of the raw 9D input into the
final linear layer. Hidden layers apply linear map, layer normalization,
leaky rectifier, then (training only) a pre-sampled dropout mask.

Layer normalization is composed from elementary ops on purpose; see the
note in autodiff.py.

The MARF head emits 4n values split into n atom centers and |radius|.
The PRIF baseline head emits a signed displacement from the perpendicular
foot and a hit logit.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import torch

from .geometry import MedialAtom

Tensor = torch.Tensor

HEAD_MARF = "marf"
HEAD_PRIF = "prif"

LAYER_NORM_EPS = 1e-5

# Instrumentation: rays pushed through forward()/prif_forward() since the
# last reset. Single-process counter, used by render statistics and the
# single-evaluation tests.
_forward_ray_count = 0


def forward_ray_count() -> int:
    return _forward_ray_count


def reset_forward_ray_count() -> None:
    global _forward_ray_count
    _forward_ray_count = 0


@dataclass
class NetworkConfig:
    """Shape and head of the network. Defaults are the desk-scale preset."""

    hidden_layers: int = 4
    width: int = 128
    n_atoms: int = 8
    leaky_slope: float = 0.01
    dropout_rate: float = 0.01
    latent_dim: int = 0
    head: str = HEAD_MARF

    def __post_init__(self):
        if self.hidden_layers < 2 or self.hidden_layers % 2 != 0:
            raise ValueError("hidden_layers must be >= 2 and even")
        if not (0.0 <= self.dropout_rate < 1.0):
            raise ValueError("dropout_rate must be in [0, 1)")
        if self.n_atoms < 1 or self.width < 1 or self.latent_dim < 0:
            raise ValueError("invalid network dimensions")
        if self.head not in (HEAD_MARF, HEAD_PRIF):
            raise ValueError(f"unknown head {self.head!r}")

    @property
    def input_dim(self) -> int:
        return 9 + self.latent_dim

    @property
    def skip_layers(self) -> tuple[int, ...]:
        """Hidden layers whose input re-concatenates the (input, latent)."""
        return tuple(sorted({self.hidden_layers // 2, self.hidden_layers - 1}))

    @property
    def output_dim(self) -> int:
        return 4 * self.n_atoms if self.head == HEAD_MARF else 2

    def layer_in_dims(self) -> list[int]:
        """Input width of every linear layer, hidden then final."""
        dims = []
        for i in range(self.hidden_layers):
            if i == 0:
                dims.append(self.input_dim)
            elif i in self.skip_layers:
                dims.append(self.width + self.input_dim)
            else:
                dims.append(self.width)
        dims.append(self.width + 9)  # final linear: raw input only, no latent
        return dims


@dataclass
class NetworkParams:
    """Weights, biases, normalization affine parameters, and latent table."""

    config: NetworkConfig
    weights: list = field(default_factory=list)
    biases: list = field(default_factory=list)
    gains: list = field(default_factory=list)
    offsets: list = field(default_factory=list)
    latents: Tensor = None

    def named_tensors(self) -> list[tuple[str, Tensor]]:
        """Stable (name, tensor) manifest order used by optimizer/checkpoint."""
        out = []
        for i, (w, b) in enumerate(zip(self.weights, self.biases)):
            out.append((f"w{i}", w))
            out.append((f"b{i}", b))
        for i, (g, o) in enumerate(zip(self.gains, self.offsets)):
            out.append((f"g{i}", g))
            out.append((f"o{i}", o))
        if self.latents is not None and self.latents.numel() > 0:
            out.append(("latents", self.latents))
        return out

    def tensors(self) -> list[Tensor]:
        return [t for _, t in self.named_tensors()]

    def decayed_names(self) -> set:
        """Names subject to weight decay: weight matrices only."""
        return {f"w{i}" for i in range(len(self.weights))}

    def requires_grad_(self, flag: bool = True) -> "NetworkParams":
        for t in self.tensors():
            t.requires_grad_(flag)
        return self


def _kaiming_uniform(shape, fan_in: int, slope: float, gen: torch.Generator) -> Tensor:
    gain = math.sqrt(2.0 / (1.0 + slope * slope))
    bound = gain * math.sqrt(3.0 / fan_in)
    return (torch.rand(shape, generator=gen, dtype=torch.float64) * 2.0 - 1.0) * bound


def init_params(config: NetworkConfig, seed: int, n_shapes: int = 1) -> NetworkParams:
    """Fan-based uniform init with the atom-spreading final layer.

    All linear layers use the rectifier-aware uniform scheme with zero
    biases. For the MARF head the final layer weights are then scaled by
    0.05 and its bias is set so the default prediction is n atoms with
    centers uniform on the sphere of radius 0.6 and radius 0.1, which is
    multi-view consistent and spreads candidates across the volume. The
    baseline head keeps the vanilla init. Latent codes draw from
    N(0, 0.01^2). Deterministic in the seed.
    """
    gen = torch.Generator().manual_seed(seed)
    p = NetworkParams(config)
    dims = config.layer_in_dims()
    for i in range(config.hidden_layers):
        p.weights.append(_kaiming_uniform((config.width, dims[i]), dims[i],
                                          config.leaky_slope, gen))
        p.biases.append(torch.zeros(config.width, dtype=torch.float64))
        p.gains.append(torch.ones(config.width, dtype=torch.float64))
        p.offsets.append(torch.zeros(config.width, dtype=torch.float64))
    w_final = _kaiming_uniform((config.output_dim, dims[-1]), dims[-1],
                               config.leaky_slope, gen)
    b_final = torch.zeros(config.output_dim, dtype=torch.float64)
    if config.head == HEAD_MARF:
        w_final = w_final * 0.05
        centers = torch.randn(config.n_atoms, 3, generator=gen, dtype=torch.float64)
        centers = 0.6 * centers / torch.linalg.vector_norm(centers, dim=-1, keepdim=True)
        b_final = b_final.reshape(config.n_atoms, 4)
        b_final[:, :3] = centers
        b_final[:, 3] = 0.1
        b_final = b_final.reshape(-1)
    p.weights.append(w_final)
    p.biases.append(b_final)
    if config.latent_dim > 0:
        p.latents = 0.01 * torch.randn(n_shapes, config.latent_dim,
                                       generator=gen, dtype=torch.float64)
    else:
        p.latents = torch.zeros(0, 0, dtype=torch.float64)
    return p


def layer_norm(h: Tensor, gain: Tensor, offset: Tensor) -> Tensor:
    mu = h.mean(dim=-1, keepdim=True)
    var = ((h - mu) ** 2).mean(dim=-1, keepdim=True)
    return (h - mu) / torch.sqrt(var + LAYER_NORM_EPS) * gain + offset


def make_dropout_masks(config: NetworkConfig, n_rays: int,
                       gen: torch.Generator) -> list[Tensor] | None:
    """Pre-sampled inverted-dropout masks, one per hidden layer.

    Pre-sampling keeps the computation deterministic given the masks, which
    gradient checks and checkpoint resume rely on.
    """
    if config.dropout_rate <= 0.0:
        return None
    keep = 1.0 - config.dropout_rate
    masks = []
    for _ in range(config.hidden_layers):
        m = (torch.rand(n_rays, config.width, generator=gen, dtype=torch.float64)
             < keep).to(torch.float64) / keep
        masks.append(m)
    return masks


def _trunk(params: NetworkParams, embedding: Tensor, latent: Tensor | None,
           dropout_masks: list | None) -> Tensor:
    cfg = params.config
    if embedding.shape[-1] != 9:
        raise ValueError(f"expected 9D ray embedding, got {embedding.shape[-1]}")
    if cfg.latent_dim > 0:
        if latent is None:
            raise ValueError("conditioned network requires a latent code")
        if latent.shape[-1] != cfg.latent_dim:
            raise ValueError("latent dimension mismatch")
        latent = latent.expand(*embedding.shape[:-1], cfg.latent_dim)
        x0 = torch.cat([embedding, latent], dim=-1)
    elif latent is not None and latent.numel() > 0:
        raise ValueError("unconditioned network got a latent code")
    else:
        x0 = embedding

    global _forward_ray_count
    _forward_ray_count += int(embedding.reshape(-1, 9).shape[0])

    h = x0
    for i in range(cfg.hidden_layers):
        if i in cfg.skip_layers and i != 0:
            h = torch.cat([h, x0], dim=-1)
        h = h @ params.weights[i].T + params.biases[i]
        h = layer_norm(h, params.gains[i], params.offsets[i])
        h = torch.nn.functional.leaky_relu(h, cfg.leaky_slope)
        if dropout_masks is not None:
            h = h * dropout_masks[i]
    h = torch.cat([h, embedding], dim=-1)
    return h @ params.weights[-1].T + params.biases[-1]


def forward(params: NetworkParams, embedding: Tensor, latent: Tensor | None = None,
            dropout_masks: list | None = None) -> MedialAtom:
    """Predict n medial atom candidates for canonical ray embeddings (..., 9).

    Radii pass through absolute value, so they are positive for any raw
    output. Deterministic given (params, embedding, latent, masks).
    """
    if params.config.head != HEAD_MARF:
        raise ValueError("forward() requires the MARF head")
    out = _trunk(params, embedding, latent, dropout_masks)
    out = out.reshape(*out.shape[:-1], params.config.n_atoms, 4)
    return MedialAtom(out[..., :3], out[..., 3].abs())


def prif_forward(params: NetworkParams, embedding: Tensor,
                 latent: Tensor | None = None,
                 dropout_masks: list | None = None) -> tuple[Tensor, Tensor]:
    """Baseline head: signed displacement from the perpendicular foot and a
    hit logit. The hit point is foot + t * q_hat; logit sign classifies."""
    if params.config.head != HEAD_PRIF:
        raise ValueError("prif_forward() requires the PRIF head")
    out = _trunk(params, embedding, latent, dropout_masks)
    return out[..., 0], out[..., 1]
