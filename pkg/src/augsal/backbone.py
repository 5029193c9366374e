"""Feature-providing backbones.

A backbone encodes images into a spatial latent, extracts aggregated
denoiser features into a low/high-level FeatureBundle, exposes per-token
cross-attention maps for a prompt, denoises (optionally with an injected
attention map), and decodes latents back to images.

Two implementations share the interface: ``TinyBackbone``, a small trainable
stack usable at desk scale, and ``PretrainedAdapter``, a seam that delegates
to user-supplied callables wrapping a full pretrained latent-diffusion model.

TinyBackbone design notes:

* Cross-attention maps are a function of the conditioning latent and the
  prompt only: they are computed once per denoise call from the input latent
  and reused at every internal step. Injection replaces the target token's
  map and renormalizes so per-pixel attention still sums to 1 over tokens;
  injecting a zero map is therefore exactly equivalent to dropping the token
  from the prompt.
* Token embeddings carry no positional component, so a token's attention map
  does not depend on its index in the prompt.
* Inversion is deterministic forward-noising to the configured timestep with
  noise drawn from a fresh generator seeded by the config seed.
"""

from __future__ import annotations

import math
from abc import ABC, abstractmethod
from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence, Tuple

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .core import (AttentionStack, FeatureBundle, ImageTensor, LatentTensor,
                   resize_bilinear)
from .errors import DataError, NumericalError, ValidationError
from .vocab import EMPTY_TOKEN, default_vocabulary


@dataclass(frozen=True)
class BackboneConfig:
    implementation: str = "tiny"
    latent_channels: int = 4
    downsample_factor: int = 8
    feature_channels_low: int = 24
    feature_channels_high: int = 24
    num_denoise_steps: int = 4
    inversion_steps: int = 30
    seed: int = 0
    # TinyBackbone specifics.
    hidden_channels: int = 32
    token_dim: int = 16
    attention_dim: int = 16
    num_train_timesteps: int = 100
    feature_timestep: Optional[int] = None
    inject_at_all_steps: bool = True

    def __post_init__(self):
        if self.implementation not in ("tiny", "pretrained_adapter"):
            raise ValidationError("implementation",
                                  f"unknown implementation {self.implementation!r}")
        if self.latent_channels < 1:
            raise ValidationError("latent_channels", "need latent_channels >= 1")
        f = self.downsample_factor
        if f < 1 or (f & (f - 1)) != 0:
            raise ValidationError("downsample_factor",
                                  f"downsample factor must be a power of two, got {f}")
        if self.num_denoise_steps < 1 or self.inversion_steps < 1:
            raise ValidationError("steps", "step counts must be >= 1")
        if self.inversion_steps > self.num_train_timesteps:
            raise ValidationError("steps", "inversion timestep beyond schedule end")


def tokenize(prompt, vocabulary: Sequence[str]) -> Tuple[str, ...]:
    """Whitespace tokenization against a fixed vocabulary."""
    if isinstance(prompt, str):
        tokens = tuple(prompt.split())
    else:
        tokens = tuple(prompt)
    if not tokens:
        raise ValidationError("prompt", "prompt must contain at least one token")
    vocab = set(vocabulary)
    for tok in tokens:
        if tok not in vocab:
            raise DataError(f"token {tok!r} not in backbone vocabulary")
    return tokens


@dataclass(frozen=True)
class DecoderFit:
    """Least-squares linearization of the decoder: rgb ~= z @ matrix + intercept."""

    matrix: np.ndarray      # (latent_channels, 3)
    intercept: np.ndarray   # (3,)
    rms: float
    rms_holdout: Optional[float] = None


class Backbone(ABC):
    """Common surface of all feature providers."""

    def __init__(self, config: BackboneConfig, vocabulary: Optional[Sequence[str]] = None):
        self.config = config
        self.vocabulary: Tuple[str, ...] = tuple(vocabulary or default_vocabulary())
        # Empirical latent value range; training updates it, the decoder fit
        # samples inside it.
        self.latent_range: Tuple[float, float] = (-3.0, 3.0)

    def tokenize(self, prompt) -> Tuple[str, ...]:
        return tokenize(prompt, self.vocabulary)

    @abstractmethod
    def encode(self, img: ImageTensor) -> LatentTensor:
        ...

    @abstractmethod
    def decode(self, z: LatentTensor) -> ImageTensor:
        ...

    @abstractmethod
    def invert(self, z: LatentTensor) -> LatentTensor:
        """Map a clean latent onto the noisy trajectory point used for feature
        extraction and editing."""

    @abstractmethod
    def features_from_latent(self, z_t: LatentTensor, tokens: Sequence[str],
                             injected_attention: Optional[Tuple[np.ndarray, int]] = None
                             ) -> FeatureBundle:
        ...

    @abstractmethod
    def attention_from_latent(self, z_t: LatentTensor, tokens: Sequence[str]) -> AttentionStack:
        ...

    @abstractmethod
    def denoise(self, z_t: LatentTensor, tokens: Sequence[str],
                injected_attention: Optional[Tuple[np.ndarray, int]] = None) -> LatentTensor:
        ...

    def check_image_dims(self, img: ImageTensor) -> None:
        f = self.config.downsample_factor
        if img.height % f or img.width % f:
            raise ValidationError("dims", f"image dims {img.height}x{img.width} not divisible "
                                          f"by downsample factor {f}")

    def invert_and_extract(self, img: ImageTensor, prompt) -> Tuple[LatentTensor, FeatureBundle, AttentionStack]:
        """Encode, forward-invert, and read out features plus per-token attention."""
        tokens = self.tokenize(prompt)
        z_t = self.invert(self.encode(img))
        bundle = self.features_from_latent(z_t, tokens)
        attn = self.attention_from_latent(z_t, tokens)
        return z_t, bundle, attn

    def approximate_decoder_matrix(self, n_fit: int = 20000, seed: int = 0,
                                   holdout_frac: float = 0.0) -> DecoderFit:
        """Linear least-squares fit from latent channel values to decoded RGB.

        Random latents are drawn uniformly inside the empirical latent value
        range; each latent pixel is paired with the decoded RGB pixel at the
        center of its image-space block. An intercept column is included in
        the fit; only the linear part is returned as the matrix.
        """
        cfg = self.config
        f = cfg.downsample_factor
        rng = np.random.default_rng(seed)
        side = 8
        per_latent = side * side
        n_latents = max(1, int(np.ceil(n_fit / per_latent)))
        lo, hi = self.latent_range

        zs, rgbs = [], []
        off = f // 2
        for _ in range(n_latents):
            z = rng.uniform(lo, hi, size=(side, side, cfg.latent_channels))
            img = self.decode(LatentTensor(z))
            zs.append(z.reshape(-1, cfg.latent_channels))
            rgbs.append(img.data[off::f, off::f, :].reshape(-1, 3))
        Z = np.concatenate(zs, axis=0)[:max(n_fit, 16)]
        Y = np.concatenate(rgbs, axis=0)[:max(n_fit, 16)]

        n_hold = int(len(Z) * holdout_frac)
        Zf, Yf = (Z[n_hold:], Y[n_hold:]) if n_hold else (Z, Y)

        X = np.concatenate([Zf, np.ones((len(Zf), 1))], axis=1)
        W, *_ = np.linalg.lstsq(X, Yf, rcond=None)
        A, b = W[:-1], W[-1]
        if np.linalg.matrix_rank(A) < 3:
            raise NumericalError("decoder linearization is rank deficient (rank < 3)")
        resid = X @ W - Yf
        rms = float(np.sqrt(np.mean(resid * resid)))
        rms_holdout = None
        if n_hold:
            Xh = np.concatenate([Z[:n_hold], np.ones((n_hold, 1))], axis=1)
            rh = Xh @ W - Y[:n_hold]
            rms_holdout = float(np.sqrt(np.mean(rh * rh)))
        return DecoderFit(matrix=A, intercept=b, rms=rms, rms_holdout=rms_holdout)


def _sinusoidal_embedding(t: torch.Tensor, dim: int) -> torch.Tensor:
    half = dim // 2
    freqs = torch.exp(-math.log(1000.0) * torch.arange(half, dtype=torch.float32) / max(half - 1, 1))
    ang = t.float().reshape(-1, 1) * freqs.reshape(1, -1)
    return torch.cat([torch.sin(ang), torch.cos(ang)], dim=1)


class _Encoder(nn.Module):
    def __init__(self, cfg: BackboneConfig):
        super().__init__()
        h = cfg.hidden_channels
        layers = []
        c_in = 3
        for _ in range(int(math.log2(cfg.downsample_factor))):
            layers += [nn.Conv2d(c_in, h, 3, stride=2, padding=1), nn.SiLU()]
            c_in = h
        if not layers:
            layers += [nn.Conv2d(3, h, 3, padding=1), nn.SiLU()]
            c_in = h
        self.body = nn.Sequential(*layers)
        self.head = nn.Conv2d(c_in, cfg.latent_channels, 1)

    def forward(self, x):
        return self.head(self.body(x))


class _Decoder(nn.Module):
    def __init__(self, cfg: BackboneConfig):
        super().__init__()
        h = cfg.hidden_channels
        self.stem = nn.Conv2d(cfg.latent_channels, h, 1)
        ups = []
        for _ in range(int(math.log2(cfg.downsample_factor))):
            ups += [nn.Upsample(scale_factor=2, mode="nearest"),
                    nn.Conv2d(h, h, 3, padding=1), nn.SiLU()]
        self.body = nn.Sequential(*ups)
        self.head = nn.Conv2d(h, 3, 3, padding=1)

    def forward(self, z):
        return self.head(self.body(F.silu(self.stem(z))))


class _UNet(nn.Module):
    """Small denoiser predicting the clean latent, with prompt cross-attention
    at full latent resolution."""

    def __init__(self, cfg: BackboneConfig, vocab_size: int):
        super().__init__()
        h = cfg.hidden_channels
        c = cfg.latent_channels
        d = cfg.attention_dim
        self.stem = nn.Conv2d(c, h, 3, padding=1)
        self.t_proj = nn.Linear(h, h)
        self.token_embed = nn.Embedding(vocab_size, cfg.token_dim)
        self.q_proj = nn.Conv2d(h, d, 1, bias=False)
        self.k_proj = nn.Linear(cfg.token_dim, d, bias=False)
        self.v_proj = nn.Linear(cfg.token_dim, h, bias=False)
        self.ctx_gate = nn.Conv2d(h, h, 1)
        self.down1 = nn.Conv2d(h, 2 * h, 3, stride=2, padding=1)
        self.down2 = nn.Conv2d(2 * h, 2 * h, 3, stride=2, padding=1)
        self.mid = nn.Conv2d(2 * h, 2 * h, 3, padding=1)
        self.up1 = nn.Conv2d(2 * h, 2 * h, 3, padding=1)
        self.up2 = nn.Conv2d(2 * h + 2 * h, h, 3, padding=1)
        self.out = nn.Conv2d(h + h, c, 3, padding=1)
        self.attn_scale = 1.0 / math.sqrt(d)

    def stem_features(self, z: torch.Tensor, t: torch.Tensor) -> torch.Tensor:
        hfeat = self.stem(z)
        temb = self.t_proj(_sinusoidal_embedding(t, hfeat.shape[1]))
        return F.silu(hfeat + temb[:, :, None, None])

    def attention(self, stem_out: torch.Tensor, token_ids: torch.Tensor) -> torch.Tensor:
        """(B, H*W, T) softmax attention over prompt tokens."""
        b, _, hh, ww = stem_out.shape
        q = self.q_proj(stem_out).flatten(2).transpose(1, 2)      # (B, HW, d)
        k = self.k_proj(self.token_embed(token_ids))              # (T, d)
        logits = q @ k.t() * self.attn_scale
        return torch.softmax(logits, dim=-1)

    def forward(self, z: torch.Tensor, t: torch.Tensor, token_ids: torch.Tensor,
                attn: Optional[torch.Tensor] = None, want_features: bool = False):
        b, _, hh, ww = z.shape
        s = self.stem_features(z, t)
        if attn is None:
            attn = self.attention(s, token_ids)
        v = self.v_proj(self.token_embed(token_ids))              # (T, h)
        ctx = (attn @ v).transpose(1, 2).reshape(b, -1, hh, ww)
        h0 = s + self.ctx_gate(ctx)
        d1 = F.silu(self.down1(h0))
        d2 = F.silu(self.down2(d1))
        m = F.silu(self.mid(d2))
        u1 = F.silu(self.up1(F.interpolate(m, size=d1.shape[-2:], mode="nearest")))
        u2 = F.silu(self.up2(torch.cat([
            F.interpolate(u1, size=h0.shape[-2:], mode="nearest"),
            F.interpolate(d1, size=h0.shape[-2:], mode="nearest")], dim=1)))
        z0_hat = self.out(torch.cat([u2, h0], dim=1))
        if want_features:
            return z0_hat, (m, u1, u2)
        return z0_hat


class TinyBackbone(Backbone):
    """Desk-scale trainable backbone. float32 internally, float64 at the API."""

    def __init__(self, config: BackboneConfig, vocabulary: Optional[Sequence[str]] = None):
        super().__init__(config, vocabulary)
        torch.manual_seed(config.seed)
        self.encoder = _Encoder(config)
        self.decoder = _Decoder(config)
        self.unet = _UNet(config, len(self.vocabulary))
        # 3x3 so aggregated channels can encode local spatial structure the
        # region-pooled readouts would otherwise average away.
        n_raw = 2 * config.hidden_channels * 2 + config.hidden_channels
        self.aggregation = nn.Conv2d(
            n_raw, config.feature_channels_low + config.feature_channels_high,
            3, padding=1)
        with torch.no_grad():
            self.unet.token_embed.weight[self.vocabulary.index(EMPTY_TOKEN)].zero_()

        betas = np.linspace(1e-4, 0.02, config.num_train_timesteps)
        alpha_bar = np.concatenate([[1.0], np.cumprod(1.0 - betas)])
        self.alpha_bar = alpha_bar  # index 0 = clean

    # -- torch plumbing -----------------------------------------------------

    def _token_ids(self, tokens: Sequence[str]) -> torch.Tensor:
        idx = [self.vocabulary.index(t) for t in tokens]
        return torch.tensor(idx, dtype=torch.long)

    def _img_to_torch(self, img: ImageTensor) -> torch.Tensor:
        return torch.from_numpy(np.ascontiguousarray(img.data.transpose(2, 0, 1))).float()[None]

    def _lat_to_torch(self, z: LatentTensor) -> torch.Tensor:
        return torch.from_numpy(np.ascontiguousarray(z.data.transpose(2, 0, 1))).float()[None]

    @staticmethod
    def _to_numpy_hwc(t: torch.Tensor) -> np.ndarray:
        return t[0].detach().numpy().astype(np.float64).transpose(1, 2, 0)

    def modules_dict(self) -> dict:
        return {"encoder": self.encoder, "decoder": self.decoder,
                "unet": self.unet, "aggregation": self.aggregation}

    def eval_mode(self) -> None:
        for m in self.modules_dict().values():
            m.eval()

    def state_arrays(self) -> dict:
        """Flat name -> float array mapping of every parameter and buffer,
        plus the empirical latent range."""
        out = {}
        for prefix, module in self.modules_dict().items():
            for name, tensor in module.state_dict().items():
                out[f"{prefix}.{name}"] = tensor.detach().numpy().astype(np.float64)
        out["latent_range"] = np.array(self.latent_range, dtype=np.float64)
        return out

    def load_state_arrays(self, arrays: dict) -> None:
        rng = arrays.get("latent_range")
        if rng is not None:
            self.latent_range = (float(rng[0]), float(rng[1]))
        for prefix, module in self.modules_dict().items():
            sd = {}
            for name, tensor in module.state_dict().items():
                key = f"{prefix}.{name}"
                if key not in arrays:
                    raise DataError(f"checkpoint missing parameter {key}")
                arr = np.asarray(arrays[key])
                if tuple(arr.shape) != tuple(tensor.shape):
                    raise DataError(f"checkpoint parameter {key} has shape "
                                    f"{arr.shape}, expected {tuple(tensor.shape)}")
                sd[name] = torch.from_numpy(arr.astype(np.float32, copy=True))
            module.load_state_dict(sd)

    # -- interface ops ------------------------------------------------------

    def encode(self, img: ImageTensor) -> LatentTensor:
        self.check_image_dims(img)
        with torch.no_grad():
            z = self.encoder(self._img_to_torch(img))
        return LatentTensor(self._to_numpy_hwc(z))

    def decode(self, z: LatentTensor) -> ImageTensor:
        with torch.no_grad():
            img = self.decoder(self._lat_to_torch(z))
        return ImageTensor(np.clip(self._to_numpy_hwc(img), 0.0, 1.0))

    def invert(self, z: LatentTensor) -> LatentTensor:
        t = self.config.inversion_steps
        ab = self.alpha_bar[t]
        rng = np.random.default_rng(self.config.seed)
        noise = rng.standard_normal(z.data.shape)
        return LatentTensor(np.sqrt(ab) * z.data + np.sqrt(1.0 - ab) * noise)

    def _feature_timestep(self) -> int:
        ft = self.config.feature_timestep
        return self.config.inversion_steps if ft is None else ft

    def _raw_features(self, z_t: torch.Tensor, token_ids: torch.Tensor,
                      injected_attention: Optional[Tuple[np.ndarray, int]] = None
                      ) -> torch.Tensor:
        """Bottleneck + the two coarsest decoder-side blocks, bilinearly
        resampled to the latent grid and channel-concatenated (pre-aggregation).

        An injected attention map modifies the cross-attention context the
        same way denoise() would, so edited trajectories yield edited features.
        """
        t = torch.tensor([float(self._feature_timestep())])
        attn = None
        if injected_attention is not None:
            s = self.unet.stem_features(z_t, t)
            attn_raw = self.unet.attention(s, token_ids)
            attn = self._normalize_rows(
                self._apply_injection(attn_raw, injected_attention, len(token_ids)))
        _, (m, u1, u2) = self.unet(z_t, t, token_ids, attn=attn, want_features=True)
        size = z_t.shape[-2:]
        parts = [F.interpolate(m, size=size, mode="bilinear", align_corners=False),
                 F.interpolate(u1, size=size, mode="bilinear", align_corners=False),
                 F.interpolate(u2, size=size, mode="bilinear", align_corners=False)]
        return torch.cat(parts, dim=1)

    def aggregate(self, raw: torch.Tensor) -> Tuple[torch.Tensor, torch.Tensor]:
        feats = self.aggregation(raw)
        cl = self.config.feature_channels_low
        return feats[:, :cl], feats[:, cl:]

    def features_from_latent(self, z_t: LatentTensor, tokens: Sequence[str],
                             injected_attention: Optional[Tuple[np.ndarray, int]] = None
                             ) -> FeatureBundle:
        token_ids = self._token_ids(self.tokenize(tokens))
        with torch.no_grad():
            raw = self._raw_features(self._lat_to_torch(z_t), token_ids,
                                     injected_attention)
            low, high = self.aggregate(raw)
        return FeatureBundle(low_level=self._to_numpy_hwc(low),
                             high_level=self._to_numpy_hwc(high))

    def attention_from_latent(self, z_t: LatentTensor, tokens: Sequence[str]) -> AttentionStack:
        # Attention is conditioned at the denoise entry timestep so the
        # extracted stack is exactly what denoise() would compute internally.
        tokens = self.tokenize(tokens)
        token_ids = self._token_ids(tokens)
        zt = self._lat_to_torch(z_t)
        with torch.no_grad():
            s = self.unet.stem_features(zt, torch.tensor([float(self.config.inversion_steps)]))
            attn = self.unet.attention(s, token_ids)  # (1, HW, T)
        maps = attn[0].t().reshape(len(tokens), z_t.height, z_t.width)
        return AttentionStack(maps=maps.numpy().astype(np.float64),
                              token_strings=tokens)

    def _apply_injection(self, attn: torch.Tensor, injected: Tuple[np.ndarray, int],
                         n_tokens: int) -> torch.Tensor:
        """Replace the target token's column of the raw softmax matrix."""
        inj_map, k = injected
        if not (0 <= k < n_tokens):
            raise ValidationError("index", f"injection token index {k} out of range "
                                           f"for prompt of {n_tokens} tokens")
        flat = torch.from_numpy(np.array(inj_map, dtype=np.float64)).float().reshape(1, -1)
        if flat.shape[1] != attn.shape[1]:
            raise ValidationError("dims", "injected map does not match the latent grid")
        attn = attn.clone()
        attn[:, :, k] = flat
        return attn

    @staticmethod
    def _normalize_rows(attn: torch.Tensor) -> torch.Tensor:
        """Per-pixel token weights summing to 1; zero rows fall back to uniform."""
        n_tokens = attn.shape[-1]
        total = attn.sum(dim=-1, keepdim=True)
        uniform = torch.full_like(attn, 1.0 / n_tokens)
        return torch.where(total > 0, attn / total.clamp_min(1e-30), uniform)

    def denoise(self, z_t: LatentTensor, tokens: Sequence[str],
                injected_attention: Optional[Tuple[np.ndarray, int]] = None) -> LatentTensor:
        """Deterministic multi-step denoise from the inversion timestep to 0.

        The cross-attention matrix is computed once from ``z_t`` and reused at
        every step; with an injection it is modified per the configured
        injection schedule (default: all steps).
        """
        tokens = self.tokenize(tokens)
        token_ids = self._token_ids(tokens)
        zt = self._lat_to_torch(z_t)
        cfg = self.config
        with torch.no_grad():
            s = self.unet.stem_features(zt, torch.tensor([float(cfg.inversion_steps)]))
            attn_raw = self.unet.attention(s, token_ids)
            # Both branches normalize the same way, so injecting a token's own
            # unmodified map reproduces the plain run bit for bit.
            attn_plain = self._normalize_rows(attn_raw)
            attn_inj = attn_plain
            if injected_attention is not None:
                attn_inj = self._normalize_rows(
                    self._apply_injection(attn_raw, injected_attention, len(tokens)))

            steps = np.linspace(cfg.inversion_steps, 0, cfg.num_denoise_steps + 1)
            steps = np.round(steps).astype(int)
            z = zt
            for i in range(cfg.num_denoise_steps):
                t_cur, t_next = int(steps[i]), int(steps[i + 1])
                use_attn = attn_inj if (cfg.inject_at_all_steps or i == 0) else attn_plain
                z0_hat = self.unet(z, torch.tensor([float(t_cur)]), token_ids, attn=use_attn)
                ab_cur, ab_next = self.alpha_bar[t_cur], self.alpha_bar[t_next]
                if t_cur == t_next:
                    continue
                eps = (z - math.sqrt(ab_cur) * z0_hat) / math.sqrt(max(1.0 - ab_cur, 1e-12))
                z = math.sqrt(ab_next) * z0_hat + math.sqrt(max(1.0 - ab_next, 0.0)) * eps
        return LatentTensor(self._to_numpy_hwc(z))


@dataclass
class AdapterHooks:
    """Callables a pretrained latent-diffusion wrapper must provide.

    Arrays are channels-last float; shapes follow the interface contracts.
    ``extract`` returns (low, high, attention_maps) for a noisy latent and
    token list; ``invert`` defaults to identity when the wrapped model bakes
    inversion into encode.
    """

    encode: Callable[[np.ndarray], np.ndarray]
    decode: Callable[[np.ndarray], np.ndarray]
    denoise: Callable[[np.ndarray, Sequence[str], Optional[Tuple[np.ndarray, int]]], np.ndarray]
    extract: Callable[..., Tuple[np.ndarray, np.ndarray, np.ndarray]]
    vocabulary: Sequence[str] = ()
    invert: Optional[Callable[[np.ndarray], np.ndarray]] = None


class PretrainedAdapter(Backbone):
    """Seam for a full pretrained latent-diffusion backbone.

    Validates every hook output against the interface contracts; numerical
    quality is the wrapped model's business.
    """

    def __init__(self, config: BackboneConfig, hooks: AdapterHooks):
        vocab = tuple(hooks.vocabulary) or default_vocabulary()
        super().__init__(config, vocab)
        self.hooks = hooks

    def encode(self, img: ImageTensor) -> LatentTensor:
        self.check_image_dims(img)
        z = LatentTensor(np.asarray(self.hooks.encode(img.data), dtype=np.float64))
        f = self.config.downsample_factor
        if (z.height, z.width) != (img.height // f, img.width // f):
            raise ValidationError("dims", "adapter encode returned wrong latent dims")
        if z.channels != self.config.latent_channels:
            raise ValidationError("dims", "adapter encode returned wrong channel count")
        return z

    def decode(self, z: LatentTensor) -> ImageTensor:
        img = np.asarray(self.hooks.decode(z.data), dtype=np.float64)
        f = self.config.downsample_factor
        out = ImageTensor(np.clip(img, 0.0, 1.0))
        if (out.height, out.width) != (z.height * f, z.width * f):
            raise ValidationError("dims", "adapter decode returned wrong image dims")
        return out

    def invert(self, z: LatentTensor) -> LatentTensor:
        if self.hooks.invert is None:
            return z
        return LatentTensor(np.asarray(self.hooks.invert(z.data), dtype=np.float64))

    def features_from_latent(self, z_t: LatentTensor, tokens: Sequence[str],
                             injected_attention: Optional[Tuple[np.ndarray, int]] = None
                             ) -> FeatureBundle:
        tokens = self.tokenize(tokens)
        low, high, _ = self.hooks.extract(z_t.data, tokens, injected_attention)
        bundle = FeatureBundle(low_level=np.asarray(low, dtype=np.float64),
                               high_level=np.asarray(high, dtype=np.float64))
        if (bundle.height, bundle.width) != (z_t.height, z_t.width):
            raise ValidationError("dims", "adapter features must live on the latent grid")
        return bundle

    def attention_from_latent(self, z_t: LatentTensor, tokens: Sequence[str]) -> AttentionStack:
        tokens = self.tokenize(tokens)
        _, _, maps = self.hooks.extract(z_t.data, tokens, None)
        stack = AttentionStack(maps=np.asarray(maps, dtype=np.float64), token_strings=tokens)
        if (stack.height, stack.width) != (z_t.height, z_t.width):
            raise ValidationError("dims", "adapter attention must live on the latent grid")
        return stack

    def denoise(self, z_t: LatentTensor, tokens: Sequence[str],
                injected_attention: Optional[Tuple[np.ndarray, int]] = None) -> LatentTensor:
        tokens = self.tokenize(tokens)
        if injected_attention is not None:
            inj_map, k = injected_attention
            if not (0 <= k < len(tokens)):
                raise ValidationError("index", "injection token index out of range")
            if np.asarray(inj_map).shape != (z_t.height, z_t.width):
                raise ValidationError("dims", "injected map does not match the latent grid")
        out = LatentTensor(np.asarray(
            self.hooks.denoise(z_t.data, tokens, injected_attention), dtype=np.float64))
        if (out.height, out.width) != (z_t.height, z_t.width):
            raise ValidationError("dims", "adapter denoise changed latent dims")
        return out


def build_backbone(config: BackboneConfig, vocabulary: Optional[Sequence[str]] = None,
                   hooks: Optional[AdapterHooks] = None) -> Backbone:
    if config.implementation == "tiny":
        return TinyBackbone(config, vocabulary)
    if hooks is None:
        raise ValidationError("implementation",
                              "pretrained_adapter requires AdapterHooks")
    return PretrainedAdapter(config, hooks)


def train_tiny_backbone(backbone: TinyBackbone, images, captions, steps: int,
                        lr: float = 1e-3, batch_size: int = 8, seed: int = 0,
                        ae_steps: Optional[int] = None):
    """Two-phase training for the tiny backbone.

    Phase "ae" trains the encoder/decoder on reconstruction; phase "denoise"
    then trains the U-Net to predict clean latents in the now-frozen latent
    space (a moving latent target would make the denoising loss meaningless
    as a progress signal). ``steps`` counts denoiser steps; ``ae_steps``
    defaults to half of that. Returns the per-step log as
    (step, phase, loss, denoise_loss, recon_loss) rows and updates the
    backbone's empirical latent range.
    """
    if not images:
        raise DataError("backbone training needs a nonempty dataset")
    cfg = backbone.config
    if ae_steps is None:
        ae_steps = steps // 2
    torch.manual_seed(seed)
    rng = np.random.default_rng(seed)

    imgs_t = [backbone._img_to_torch(im)[0] for im in images]
    token_ids = [backbone._token_ids(backbone.tokenize(c)) for c in captions]
    log = []

    opt_ae = torch.optim.AdamW(list(backbone.encoder.parameters())
                               + list(backbone.decoder.parameters()), lr=lr)
    for step in range(ae_steps):
        idx = rng.integers(0, len(imgs_t), size=batch_size)
        batch = torch.stack([imgs_t[i] for i in idx])
        recon = backbone.decoder(backbone.encoder(batch))
        loss = F.mse_loss(recon, batch)
        opt_ae.zero_grad()
        loss.backward()
        if not np.isfinite(loss.detach().item()):
            raise NumericalError(f"backbone AE training diverged at step {step}")
        opt_ae.step()
        val = loss.detach().item()
        log.append((step, "ae", val, 0.0, val))

    opt_dn = torch.optim.AdamW(backbone.unet.parameters(), lr=lr)
    for step in range(steps):
        idx = rng.integers(0, len(imgs_t), size=batch_size)
        batch = torch.stack([imgs_t[i] for i in idx])
        with torch.no_grad():
            z0 = backbone.encoder(batch)

        t = rng.integers(1, cfg.num_train_timesteps + 1, size=batch_size)
        ab = torch.tensor(backbone.alpha_bar[t], dtype=torch.float32).reshape(-1, 1, 1, 1)
        noise = torch.from_numpy(rng.standard_normal(tuple(z0.shape))).float()
        z_t = torch.sqrt(ab) * z0 + torch.sqrt(1.0 - ab) * noise

        # One caption per batch row would need ragged attention; train on a
        # single shared prompt drawn per step instead.
        tok = token_ids[int(idx[0])]
        z0_hat = backbone.unet(z_t, torch.tensor(t, dtype=torch.float32), tok)
        loss = F.mse_loss(z0_hat, z0)
        opt_dn.zero_grad()
        loss.backward()
        if not np.isfinite(loss.detach().item()):
            raise NumericalError(f"backbone training diverged at step {step}")
        opt_dn.step()
        log.append((ae_steps + step, "denoise", loss.detach().item(),
                    loss.detach().item(), 0.0))

    with torch.no_grad():
        vals = []
        for im in imgs_t[:64]:
            vals.append(backbone.encoder(im[None]))
        allz = torch.cat([v.flatten() for v in vals])
        lo = float(torch.quantile(allz, 0.005))
        hi = float(torch.quantile(allz, 0.995))
        backbone.latent_range = (lo, hi)
    return log
