"""
The longitudinal diffusion transformer: predicts the noise of a velocity-field sequence from its noisy version, the
diffusion step, the visit ages, the disease label and the spatial gradient of the baseline image.

Frames are patch-embedded independently, tagged with an age encoding and a 3D spatial encoding, then processed by
alternating spatial (within a frame) and temporal (across frames at one patch) adaLN-Zero blocks.
"""
import math
from contextlib import contextmanager
from dataclasses import dataclass, field
from typing import ClassVar, Dict, List, Optional, Sequence, Tuple

import torch
import torch.nn as nn
from dataclasses_json import dataclass_json
from einops import rearrange, repeat
from timm.models.vision_transformer import Attention, Mlp

from morphoflow.volume import InvalidInputError, as_shape


class LdtShapeError(InvalidInputError):
    """An input did not fit the model, annotated with the forward stage that rejected it"""

    def __init__(self, message: str, stage: str):
        super().__init__(f'{stage}: {message}')
        self.stage = stage


AGE_CONDITIONINGS = ('appe', 'adaln')


@dataclass_json
@dataclass
class LdtConfig:
    d_model: int = 64
    n_heads: int = 4
    n_layers: int = 2
    """Number of spatial + temporal block pairs"""
    patch_size: int = 4
    pe_dim: Optional[int] = None
    """Width of the raw age encoding, defaults to d_model"""
    input_channels: int = 3
    max_frames: int = 3
    field_shape: List[int] = field(default_factory=lambda: [16, 16, 16])
    mlp_ratio: float = 4.0
    num_classes: int = 3
    age_conditioning: str = 'appe'
    """``appe`` adds an encoding of each frame's age to its tokens, ``adaln`` feeds the age vector to the condition"""
    frequency_embedding_size: int = 256

    PRESETS: ClassVar[Dict[str, Tuple[int, int, int]]] = {
        'mini': (64, 4, 2),
        'S': (384, 6, 12),
        'L': (768, 12, 12),
        'XL': (960, 12, 16),
    }

    @classmethod
    def preset(cls, name: str, **overrides) -> 'LdtConfig':
        """(d_model, n_heads, n_layers) of a named model size, other fields from ``overrides``"""
        if name not in cls.PRESETS:
            raise InvalidInputError(f'Unknown preset {name!r}, expected one of {", ".join(cls.PRESETS)}')
        d, heads, layers = cls.PRESETS[name]
        return cls(**{'d_model': d, 'n_heads': heads, 'n_layers': layers, **overrides})

    @property
    def age_dim(self) -> int:
        return self.pe_dim if self.pe_dim is not None else self.d_model

    @property
    def grid(self) -> Tuple[int, int, int]:
        return tuple(n // self.patch_size for n in self.field_shape)

    @property
    def num_patches(self) -> int:
        gh, gw, gl = self.grid
        return gh * gw * gl

    def validate(self) -> 'LdtConfig':
        self.field_shape = list(as_shape(self.field_shape))
        if self.patch_size < 1 or any(n % self.patch_size for n in self.field_shape):
            raise InvalidInputError(f'Field shape {self.field_shape} is not divisible by patch size {self.patch_size}')
        if self.d_model < 6 or self.d_model % self.n_heads:
            raise InvalidInputError(f'd_model {self.d_model} must be >= 6 and divisible by n_heads {self.n_heads}')
        if self.age_dim < 2 or self.age_dim % 2:
            raise InvalidInputError(f'Age encoding width must be even, got {self.age_dim}')
        if self.n_layers < 1 or self.max_frames < 1 or self.num_classes < 1 or self.input_channels < 1:
            raise InvalidInputError('n_layers, max_frames, num_classes and input_channels must be >= 1')
        if self.age_conditioning not in AGE_CONDITIONINGS:
            raise InvalidInputError(f'age_conditioning must be one of {AGE_CONDITIONINGS}, '
                                    f'got {self.age_conditioning!r}')
        return self


def modulate(x, shift, scale):
    return x * (1 + scale.unsqueeze(1)) + shift.unsqueeze(1)


def sincos_1d(positions: torch.Tensor, width: int) -> torch.Tensor:
    """[cos(w_i p)..., sin(w_i p)...] with w_i = 1/10000^(2i/width); an odd width gets a zero column"""
    half = width // 2
    omega = 1.0 / 10000 ** (2 * torch.arange(half, dtype=torch.float64, device=positions.device) / width)
    args = positions.to(torch.float64).unsqueeze(-1) * omega
    out = torch.cat([torch.cos(args), torch.sin(args)], dim=-1)
    if width % 2:
        out = torch.cat([out, torch.zeros_like(out[..., :1])], dim=-1)
    return out


def age_encoding(ages: torch.Tensor, dim: int) -> torch.Tensor:
    """Sinusoidal encoding of continuous ages (years), (...) -> (..., dim)"""
    if dim < 2 or dim % 2:
        raise InvalidInputError(f'Age encoding width must be even, got {dim}')
    ages = torch.as_tensor(ages)
    encoded = sincos_1d(ages, dim)
    return encoded.to(ages.dtype) if ages.is_floating_point() else encoded


def spatial_pos_encoding(field_shape: Sequence[int], patch_size: int, d: int) -> torch.Tensor:
    """Fixed (N_d, d) encoding of the patch grid: three 1D encodings of width d // 3 side by side, zero padded"""
    if d < 6:
        raise InvalidInputError(f'Spatial encoding needs d >= 6, got {d}')
    width = d // 3
    gh, gw, gl = (n // patch_size for n in as_shape(field_shape))
    ih, iw, il = torch.meshgrid(torch.arange(gh), torch.arange(gw), torch.arange(gl), indexing='ij')
    parts = [sincos_1d(i.reshape(-1), width) for i in (ih, iw, il)]
    out = torch.cat(parts, dim=-1)
    return torch.cat([out, out.new_zeros(out.shape[0], d - out.shape[1])], dim=-1)


def temporal_pos_encoding(frames: int, d: int) -> torch.Tensor:
    """Fixed (T, d) sinusoid over the frame index"""
    if frames < 1:
        raise InvalidInputError(f'Need at least one frame, got {frames}')
    return sincos_1d(torch.arange(frames), d)


def patchify(z: torch.Tensor, patch_size: int) -> torch.Tensor:
    """(B, C, T, H, W, L) -> (B, T, N_d, P^3 C), the tiling that unpatchify inverts"""
    p = patch_size
    return rearrange(z, 'b c t (gh ph) (gw pw) (gl pl) -> b t (gh gw gl) (ph pw pl c)', ph=p, pw=p, pl=p)


def unpatchify(tokens: torch.Tensor, grid: Sequence[int], patch_size: int, channels: int) -> torch.Tensor:
    """(B, T, N_d, P^3 C) -> (B, C, T, H, W, L)"""
    gh, gw, gl = grid
    p = patch_size
    return rearrange(tokens, 'b t (gh gw gl) (ph pw pl c) -> b c t (gh ph) (gw pw) (gl pl)',
                     gh=gh, gw=gw, gl=gl, ph=p, pw=p, pl=p, c=channels)


class PatchEmbed3D(nn.Module):
    """Strided Conv3d applied to every frame independently"""

    def __init__(self, patch_size: int, in_channels: int, d_model: int):
        super().__init__()
        self.patch_size = patch_size
        self.proj = nn.Conv3d(in_channels, d_model, kernel_size=patch_size, stride=patch_size, bias=True)

    def embed_frames(self, frames: torch.Tensor) -> torch.Tensor:
        """(B, C, H, W, L) -> (B, N_d, d)"""
        if any(n % self.patch_size for n in frames.shape[-3:]):
            raise InvalidInputError(f'Frame shape {tuple(frames.shape[-3:])} is not divisible by '
                                    f'patch size {self.patch_size}')
        return rearrange(self.proj(frames), 'b d gh gw gl -> b (gh gw gl) d')

    def forward(self, z: torch.Tensor) -> torch.Tensor:
        """(B, C, T, H, W, L) -> (B, T, N_d, d)"""
        batch = z.shape[0]
        tokens = self.embed_frames(rearrange(z, 'b c t h w l -> (b t) c h w l'))
        return rearrange(tokens, '(b t) n d -> b t n d', b=batch)


class TimestepEmbedder(nn.Module):
    def __init__(self, d_model: int, frequency_embedding_size: int = 256):
        super().__init__()
        self.mlp = nn.Sequential(
            nn.Linear(frequency_embedding_size, d_model, bias=True),
            nn.SiLU(),
            nn.Linear(d_model, d_model, bias=True),
        )
        self.frequency_embedding_size = frequency_embedding_size

    def forward(self, tau: torch.Tensor) -> torch.Tensor:
        dtype = self.mlp[0].weight.dtype
        return self.mlp(sincos_1d(tau, self.frequency_embedding_size).to(dtype))


class AgeEmbedder(nn.Module):
    """Raw age encoding followed by an MLP to the token width"""

    def __init__(self, pe_dim: int, d_model: int):
        super().__init__()
        self.pe_dim = pe_dim
        self.mlp = nn.Sequential(
            nn.Linear(pe_dim, d_model, bias=True),
            nn.SiLU(),
            nn.Linear(d_model, d_model, bias=True),
        )

    def forward(self, ages: torch.Tensor) -> torch.Tensor:
        """(B, T) -> (B, T, d)"""
        return self.mlp(age_encoding(ages, self.pe_dim).to(self.mlp[0].weight.dtype))


@dataclass
class ConditionBundle:
    tau_embed: torch.Tensor
    class_embed: torch.Tensor
    anat_embed: torch.Tensor
    fused: torch.Tensor
    age_embed: Optional[torch.Tensor] = None
    """Only for the adaln age conditioning"""


@dataclass
class LdtConditioning:
    """Per-sample conditioning inputs: ages (B, T) years, labels (B,) and the baseline gradient (B, 3, H, W, L)"""
    ages: torch.Tensor
    labels: torch.Tensor
    grad_prior: torch.Tensor

    def to(self, device=None, dtype: torch.dtype = None) -> 'LdtConditioning':
        return LdtConditioning(self.ages.to(device=device, dtype=dtype), self.labels.to(device=device),
                               self.grad_prior.to(device=device, dtype=dtype))

    def repeat(self, n: int) -> 'LdtConditioning':
        return LdtConditioning(self.ages.repeat(n, 1), self.labels.repeat(n), self.grad_prior.repeat(n, 1, 1, 1, 1))


class ConditionEmbedder(nn.Module):
    """Embeds the diffusion step, the label and the anatomical prior, and fuses them into one adaLN vector"""

    def __init__(self, cfg: LdtConfig):
        super().__init__()
        d = cfg.d_model
        self.num_classes = cfg.num_classes
        self.max_frames = cfg.max_frames
        self.t_embedder = TimestepEmbedder(d, cfg.frequency_embedding_size)
        self.y_embedder = nn.Embedding(cfg.num_classes, d)
        self.age_linear = nn.Linear(cfg.max_frames, d) if cfg.age_conditioning == 'adaln' else None
        self.fuse = nn.Sequential(
            nn.Linear(d, d, bias=True),
            nn.SiLU(),
            nn.Linear(d, d, bias=True),
        )

    def forward(self, tau: torch.Tensor, labels: torch.Tensor, anat_tokens: torch.Tensor,
                ages: torch.Tensor = None) -> ConditionBundle:
        if bool(((labels < 0) | (labels >= self.num_classes)).any()):
            raise InvalidInputError(f'Unknown label in {labels.tolist()}, expected 0..{self.num_classes - 1}')
        tau_embed = self.t_embedder(tau)
        class_embed = self.y_embedder(labels.long())
        anat_embed = anat_tokens.mean(dim=1)
        total = tau_embed + class_embed + anat_embed
        age_embed = None
        if self.age_linear is not None:
            # Ages in centuries, zero padded to max_frames
            padded = ages.new_zeros(ages.shape[0], self.max_frames)
            padded[:, :ages.shape[1]] = ages / 100
            age_embed = self.age_linear(padded.to(total.dtype))
            total = total + age_embed
        return ConditionBundle(tau_embed, class_embed, anat_embed, self.fuse(total), age_embed)


class AdaLNBlock(nn.Module):
    """Pre-norm attention + MLP block whose norms are modulated by the condition, gated to zero at init"""

    def __init__(self, d_model: int, n_heads: int, mlp_ratio: float = 4.0):
        super().__init__()
        self.norm1 = nn.LayerNorm(d_model, elementwise_affine=False, eps=1e-6)
        self.attn = Attention(d_model, num_heads=n_heads, qkv_bias=True)
        self.norm2 = nn.LayerNorm(d_model, elementwise_affine=False, eps=1e-6)
        approx_gelu = lambda: nn.GELU(approximate='tanh')
        self.mlp = Mlp(in_features=d_model, hidden_features=int(d_model * mlp_ratio), act_layer=approx_gelu, drop=0)
        self.adaLN_modulation = nn.Sequential(
            nn.SiLU(),
            nn.Linear(d_model, 6 * d_model, bias=True)
        )

    def modulation(self, c: torch.Tensor) -> Tuple[torch.Tensor, ...]:
        """(shift_msa, scale_msa, gate_msa, shift_mlp, scale_mlp, gate_mlp), each (B, d)"""
        if c.shape[-1] != self.norm1.normalized_shape[0]:
            raise InvalidInputError(f'Condition width {c.shape[-1]} differs from d_model '
                                    f'{self.norm1.normalized_shape[0]}')
        return self.adaLN_modulation(c).chunk(6, dim=1)

    def attend(self, x: torch.Tensor, c: torch.Tensor, pos: torch.Tensor = None) -> torch.Tensor:
        """x (B', S, d) with c (B', d); ``pos`` (S, d) is added to the attention input only"""
        shift_msa, scale_msa, gate_msa, shift_mlp, scale_mlp, gate_mlp = self.modulation(c)
        h = modulate(self.norm1(x), shift_msa, scale_msa)
        if pos is not None:
            h = h + pos
        x = x + gate_msa.unsqueeze(1) * self.attn(h)
        x = x + gate_mlp.unsqueeze(1) * self.mlp(modulate(self.norm2(x), shift_mlp, scale_mlp))
        return x


class SpatialBlock(AdaLNBlock):
    """Attention over the patches of each frame"""

    def forward(self, m: torch.Tensor, c: torch.Tensor) -> torch.Tensor:
        batch, frames = m.shape[:2]
        x = rearrange(m, 'b t n d -> (b t) n d')
        x = self.attend(x, repeat(c, 'b d -> (b t) d', t=frames))
        return rearrange(x, '(b t) n d -> b t n d', b=batch)


class TemporalBlock(AdaLNBlock):
    """Attention over the frames at each patch position"""

    def forward(self, m: torch.Tensor, c: torch.Tensor, pos: torch.Tensor) -> torch.Tensor:
        batch, _, patches = m.shape[:3]
        x = rearrange(m, 'b t n d -> (b n) t d')
        x = self.attend(x, repeat(c, 'b d -> (b n) d', n=patches), pos)
        return rearrange(x, '(b n) t d -> b t n d', b=batch)


class FinalLayer(nn.Module):
    def __init__(self, d_model: int, patch_size: int, out_channels: int):
        super().__init__()
        self.norm_final = nn.LayerNorm(d_model, elementwise_affine=False, eps=1e-6)
        self.linear = nn.Linear(d_model, patch_size ** 3 * out_channels, bias=True)
        self.adaLN_modulation = nn.Sequential(
            nn.SiLU(),
            nn.Linear(d_model, 2 * d_model, bias=True)
        )

    def forward(self, m: torch.Tensor, c: torch.Tensor) -> torch.Tensor:
        """(B, T, N_d, d) -> (B, T, N_d, P^3 C)"""
        batch, frames = m.shape[:2]
        shift, scale = self.adaLN_modulation(c).chunk(2, dim=1)
        x = rearrange(m, 'b t n d -> b (t n) d')
        x = self.linear(modulate(self.norm_final(x), shift, scale))
        return rearrange(x, 'b (t n) e -> b t n e', t=frames)


@contextmanager
def _stage(name: str):
    try:
        yield
    except LdtShapeError:
        raise
    except (InvalidInputError, RuntimeError) as e:
        raise LdtShapeError(str(e), name) from e


class LDT(nn.Module):
    """Longitudinal diffusion transformer, eps_hat = LDT(z_tau, tau, conditioning)"""

    def __init__(self, cfg: LdtConfig):
        super().__init__()
        self.cfg = cfg.validate()
        d = cfg.d_model
        self.x_embedder = PatchEmbed3D(cfg.patch_size, cfg.input_channels, d)
        self.a_embedder = AgeEmbedder(cfg.age_dim, d) if cfg.age_conditioning == 'appe' else None
        self.c_embedder = ConditionEmbedder(cfg)
        self.register_buffer('spatial_pos', spatial_pos_encoding(cfg.field_shape, cfg.patch_size, d).float())
        self.register_buffer('temporal_pos', temporal_pos_encoding(cfg.max_frames, d).float())
        self.spatial_blocks = nn.ModuleList([SpatialBlock(d, cfg.n_heads, cfg.mlp_ratio)
                                             for _ in range(cfg.n_layers)])
        self.temporal_blocks = nn.ModuleList([TemporalBlock(d, cfg.n_heads, cfg.mlp_ratio)
                                              for _ in range(cfg.n_layers)])
        self.final_layer = FinalLayer(d, cfg.patch_size, cfg.input_channels)
        self.initialize_weights()

    def initialize_weights(self):
        def _basic_init(module):
            if isinstance(module, nn.Linear):
                torch.nn.init.xavier_uniform_(module.weight)
                if module.bias is not None:
                    nn.init.constant_(module.bias, 0)

        self.apply(_basic_init)
        # Patch embedding as a linear map over flattened patches
        w = self.x_embedder.proj.weight.data
        nn.init.xavier_uniform_(w.view([w.shape[0], -1]))
        nn.init.constant_(self.x_embedder.proj.bias, 0)
        nn.init.normal_(self.c_embedder.y_embedder.weight, std=0.02)
        nn.init.normal_(self.c_embedder.t_embedder.mlp[0].weight, std=0.02)
        nn.init.normal_(self.c_embedder.t_embedder.mlp[2].weight, std=0.02)
        for block in [*self.spatial_blocks, *self.temporal_blocks]:
            nn.init.constant_(block.adaLN_modulation[-1].weight, 0)
            nn.init.constant_(block.adaLN_modulation[-1].bias, 0)
        nn.init.constant_(self.final_layer.adaLN_modulation[-1].weight, 0)
        nn.init.constant_(self.final_layer.adaLN_modulation[-1].bias, 0)
        nn.init.constant_(self.final_layer.linear.weight, 0)
        nn.init.constant_(self.final_layer.linear.bias, 0)

    def _check_inputs(self, z: torch.Tensor, tau: torch.Tensor, cond: LdtConditioning):
        cfg = self.cfg
        if z.dim() != 6 or z.shape[1] != cfg.input_channels or list(z.shape[3:]) != cfg.field_shape:
            raise InvalidInputError(f'Expected (B, {cfg.input_channels}, T, {", ".join(map(str, cfg.field_shape))}), '
                                    f'got {tuple(z.shape)}')
        batch, _, frames = z.shape[:3]
        if frames > cfg.max_frames:
            raise InvalidInputError(f'{frames} frames exceed max_frames {cfg.max_frames}')
        if tuple(cond.ages.shape) != (batch, frames):
            raise InvalidInputError(f'Ages must be ({batch}, {frames}), got {tuple(cond.ages.shape)}')
        if tau.shape != (batch,) or tuple(cond.labels.shape) != (batch,):
            raise InvalidInputError('tau and labels need one entry per sample')
        if list(cond.grad_prior.shape) != [batch, 3, *cfg.field_shape]:
            raise InvalidInputError(f'Gradient prior must be ({batch}, 3, {", ".join(map(str, cfg.field_shape))}), '
                                    f'got {tuple(cond.grad_prior.shape)}')

    def embed_condition(self, tau: torch.Tensor, cond: LdtConditioning) -> ConditionBundle:
        dtype = self.spatial_pos.dtype
        anat_tokens = self.x_embedder.embed_frames(cond.grad_prior.to(dtype))
        return self.c_embedder(tau, cond.labels, anat_tokens, cond.ages.to(dtype))

    def forward(self, z_tau: torch.Tensor, tau: torch.Tensor, cond: LdtConditioning) -> torch.Tensor:
        with _stage('inputs'):
            self._check_inputs(z_tau, tau, cond)
        frames = z_tau.shape[2]
        with _stage('patch_embed'):
            m = self.x_embedder(z_tau.to(self.spatial_pos.dtype))
        with _stage('age_encoding'):
            if self.a_embedder is not None:
                m = m + self.a_embedder(cond.ages).unsqueeze(2)
            m = m + self.spatial_pos
        with _stage('condition_embed'):
            c = self.embed_condition(tau, cond).fused
        with _stage('blocks'):
            pos = self.temporal_pos[:frames]
            for spatial, temporal in zip(self.spatial_blocks, self.temporal_blocks):
                m = spatial(m, c)
                m = temporal(m, c, pos)
        with _stage('unpatchify'):
            out = unpatchify(self.final_layer(m, c), self.cfg.grid, self.cfg.patch_size, self.cfg.input_channels)
        return out


def parameter_count(model: nn.Module) -> int:
    return sum(p.numel() for p in model.parameters())
