"""Trainable building blocks.

* ``MultiScaleBackbone``: a small convolutional encoder with a top-down
  (lateral add) fusion pathway producing S same-channel feature maps at
  strides {4, 8, 16, 32} of the input (or {2, ..} for tiny test variants).
* ``MultiHeadCrossAttention``: scaled dot-product attention built from
  scratch so its gradients can be checked against finite differences.
* ``CrossAttentionFusion``: LN(MHCA(global, local, local) + global).
* ``LatentPromptEngine``: learnable query tokens refined over N rounds of
  bidirectional cross-attention against the fused features.
* ``AdapterBlock``: residual bottleneck, exact identity at initialization.
* ``MaskTokenDecoder`` / ``SegmentationHead``: toy per-token mask decoding on
  top of a frozen encoder.
* ``OnlineModel`` / ``TargetModel``: the asymmetric encoder pair with
  per-scale projection (both) and prediction (online only) heads.

GELU is used throughout: every block here is finite-difference checkable.
"""

from __future__ import annotations

import io
from pathlib import Path

import torch
import torch.nn.functional as F
from torch import nn

from .config import (AdapterConfig, BackboneConfig, HeadConfig, ModelConfig,
                     PromptEngineConfig, config_diff)

CHECKPOINT_VERSION = 1


class ConfigMismatchError(RuntimeError):
    def __init__(self, diffs):
        self.diffs = list(diffs)
        super().__init__("checkpoint config mismatch:\n  " + "\n  ".join(self.diffs))


def _group_norm(channels: int) -> nn.GroupNorm:
    # >= 2 channels per group so 1x1 maps still have defined statistics
    groups = min(8, channels // 2) or 1
    while groups > 1 and channels % groups != 0:
        groups -= 1
    return nn.GroupNorm(groups, channels)


def _upsample2x(x: torch.Tensor) -> torch.Tensor:
    """Nearest-neighbor doubling via expand (pyramid sizes halve exactly)."""
    b, c, h, w = x.shape
    return (x[:, :, :, None, :, None]
            .expand(b, c, h, 2, w, 2)
            .reshape(b, c, 2 * h, 2 * w))


def map_to_tokens(x: torch.Tensor) -> torch.Tensor:
    """(B, C, H, W) -> (B, H*W, C)."""
    b, c, h, w = x.shape
    return x.reshape(b, c, h * w).transpose(1, 2)


def tokens_to_map(x: torch.Tensor, h: int, w: int) -> torch.Tensor:
    """(B, H*W, C) -> (B, C, H, W)."""
    b, n, c = x.shape
    return x.transpose(1, 2).reshape(b, c, h, w)


class MultiScaleBackbone(nn.Module):
    """Shared-weight encoder; both views pass through this single module."""

    def __init__(self, cfg: BackboneConfig):
        super().__init__()
        self.cfg = cfg
        ch = tuple(cfg.stage_channels)
        if cfg.stem_stride == 4:
            # patch-embedding stem: one stride-4 conv avoids a full-res stage
            self.stem = nn.Sequential(
                nn.Conv2d(1, ch[0], 4, stride=4),
                _group_norm(ch[0]), nn.GELU(),
            )
        elif cfg.stem_stride == 2:
            self.stem = nn.Sequential(
                nn.Conv2d(1, ch[0], 3, stride=2, padding=1),
                _group_norm(ch[0]), nn.GELU(),
            )
        else:
            raise ValueError(f"stem_stride must be 2 or 4, got {cfg.stem_stride}")
        self.stages = nn.ModuleList([
            nn.Sequential(
                nn.Conv2d(ch[i - 1], ch[i], 3, stride=2, padding=1),
                _group_norm(ch[i]), nn.GELU(),
            )
            for i in range(1, cfg.scales)
        ])
        self.laterals = nn.ModuleList([
            nn.Conv2d(c, cfg.fpn_channels, 1) for c in ch
        ])

    def forward(self, x: torch.Tensor):
        """Returns S maps ordered fine -> coarse, each with fpn_channels."""
        if x.dim() != 4 or x.shape[-1] != x.shape[-2]:
            raise ValueError(f"expected square NCHW input, got {tuple(x.shape)}")
        stride = self.cfg.stem_stride * (2 ** (self.cfg.scales - 1))
        if x.shape[-1] % stride != 0:
            raise ValueError(
                f"input side {x.shape[-1]} not divisible by total stride {stride}")
        feats = [self.stem(x)]
        for stage in self.stages:
            feats.append(stage(feats[-1]))
        laterals = [lat(f) for lat, f in zip(self.laterals, feats)]
        for i in range(len(laterals) - 1, 0, -1):
            laterals[i - 1] = laterals[i - 1] + _upsample2x(laterals[i])
        return laterals


class MultiHeadCrossAttention(nn.Module):
    def __init__(self, dim: int, heads: int):
        super().__init__()
        if dim % heads != 0:
            raise ValueError(f"dim {dim} not divisible by heads {heads}")
        self.dim = dim
        self.heads = heads
        self.q_proj = nn.Linear(dim, dim)
        self.k_proj = nn.Linear(dim, dim)
        self.v_proj = nn.Linear(dim, dim)
        self.out_proj = nn.Linear(dim, dim)

    def forward(self, q: torch.Tensor, k: torch.Tensor, v: torch.Tensor,
                return_weights: bool = False):
        if q.shape[-1] != self.dim or k.shape[-1] != self.dim or v.shape[-1] != self.dim:
            raise ValueError("channel dimension mismatch")
        if k.shape[1] != v.shape[1]:
            raise ValueError("key/value sequence lengths differ")
        b, lq, _ = q.shape
        lk = k.shape[1]
        hd = self.dim // self.heads

        def split(t, length):
            return t.reshape(b, length, self.heads, hd).transpose(1, 2)

        qh = split(self.q_proj(q), lq)
        kh = split(self.k_proj(k), lk)
        vh = split(self.v_proj(v), lk)
        scores = qh @ kh.transpose(-1, -2) / (hd ** 0.5)
        weights = torch.softmax(scores, dim=-1)
        out = (weights @ vh).transpose(1, 2).reshape(b, lq, self.dim)
        out = self.out_proj(out)
        if return_weights:
            return out, weights
        return out


class TokenMlp(nn.Module):
    def __init__(self, dim: int, ratio: int = 2):
        super().__init__()
        self.fc1 = nn.Linear(dim, dim * ratio)
        self.fc2 = nn.Linear(dim * ratio, dim)

    def forward(self, x):
        return self.fc2(F.gelu(self.fc1(x)))


class CrossAttentionFusion(nn.Module):
    """Fuse a global token map with a local one: LN(MHCA(g, l, l) + g)."""

    def __init__(self, dim: int, heads: int, ln_eps: float = 1e-5):
        super().__init__()
        self.attn = MultiHeadCrossAttention(dim, heads)
        self.norm = nn.LayerNorm(dim, eps=ln_eps)

    def forward(self, global_tokens, local_tokens):
        if global_tokens.shape != local_tokens.shape:
            raise ValueError("global/local shapes differ")
        return self.norm(self.attn(global_tokens, local_tokens, local_tokens)
                         + global_tokens)


class LatentPromptEngine(nn.Module):
    """Learnable query tokens refined by rounds of bidirectional cross-attention.

    One round maps (fused features F, tokens T) to::

        F' = MLP(LN(MHCA(F, T, T) + F))
        T' = MLP(LN(MHCA(T, F, F) + T))

    and the next round re-fuses F' with the original local features. Round
    weights are shared (the same blocks are applied N times).
    """

    def __init__(self, cfg: PromptEngineConfig):
        super().__init__()
        if cfg.rounds < 1:
            raise ValueError(f"rounds must be >= 1, got {cfg.rounds}")
        self.cfg = cfg
        c = cfg.channels
        self.tokens = nn.Parameter(torch.randn(cfg.tokens, c) * 0.02)
        self.fusion = CrossAttentionFusion(c, cfg.heads, cfg.ln_eps)
        self.feat_attn = MultiHeadCrossAttention(c, cfg.heads)
        self.feat_norm = nn.LayerNorm(c, eps=cfg.ln_eps)
        self.feat_mlp = TokenMlp(c, cfg.mlp_ratio)
        self.tok_attn = MultiHeadCrossAttention(c, cfg.heads)
        self.tok_norm = nn.LayerNorm(c, eps=cfg.ln_eps)
        self.tok_mlp = TokenMlp(c, cfg.mlp_ratio)

    def round(self, fused, tokens):
        feat = self.feat_mlp(self.feat_norm(self.feat_attn(fused, tokens, tokens)
                                            + fused))
        tok = self.tok_mlp(self.tok_norm(self.tok_attn(tokens, fused, fused)
                                         + tokens))
        return feat, tok

    def refine(self, fused, tokens, local_tokens):
        """N rounds starting from an already-fused map; returns (F_last, T_last)."""
        feat, tok = self.round(fused, tokens)
        for _ in range(self.cfg.rounds - 1):
            feat, tok = self.round(self.fusion(feat, local_tokens), tok)
        return feat, tok

    def forward(self, global_tokens, local_tokens):
        b = global_tokens.shape[0]
        tokens = self.tokens.unsqueeze(0).expand(b, -1, -1)
        fused = self.fusion(global_tokens, local_tokens)
        return self.refine(fused, tokens, local_tokens)


class AdapterBlock(nn.Module):
    """x + up(gelu(down(x))); the up projection is zero-init so the block
    starts as an exact identity."""

    def __init__(self, cfg: AdapterConfig):
        super().__init__()
        self.down = nn.Linear(cfg.d, cfg.d_prime)
        self.up = nn.Linear(cfg.d_prime, cfg.d)
        nn.init.zeros_(self.up.weight)
        nn.init.zeros_(self.up.bias)

    def forward(self, x):
        return x + self.up(F.gelu(self.down(x)))


class MaskTokenDecoder(nn.Module):
    """Per-token logit maps: dot products between refined tokens and an
    upsampled, conv-refined feature map."""

    def __init__(self, cfg: PromptEngineConfig, upsample: int = 2):
        super().__init__()
        c = cfg.channels
        self.upsample = upsample
        self.conv = nn.Sequential(
            nn.Conv2d(c, c, 3, padding=1), _group_norm(c), nn.GELU(),
        )
        self.token_proj = nn.Linear(c, c)
        self.scale = c ** -0.5

    def forward(self, feat_tokens, prompt_tokens, hw):
        h, w = hw
        fmap = tokens_to_map(feat_tokens, h, w)
        fmap = F.interpolate(fmap, scale_factor=self.upsample, mode="bilinear",
                             align_corners=False)
        fmap = self.conv(fmap)
        tok = self.token_proj(prompt_tokens)
        return torch.einsum("bkc,bchw->bkhw", tok, fmap) * self.scale


class SegmentationHead(nn.Module):
    """Decode structure logits from the coarsest (frozen) encoder map.

    Global branch: adapter + one self-attention layer. Local branch: two
    convs at the same resolution. The two are fused, refined by the prompt
    engine, and decoded into per-token logit maps.
    """

    def __init__(self, fpn_channels: int, engine_cfg: PromptEngineConfig,
                 adapter_cfg: AdapterConfig):
        super().__init__()
        if engine_cfg.channels != fpn_channels:
            raise ValueError("prompt engine channels must match fpn channels")
        self.adapter = AdapterBlock(adapter_cfg)
        self.global_attn = MultiHeadCrossAttention(fpn_channels, engine_cfg.heads)
        self.local_conv = nn.Sequential(
            nn.Conv2d(fpn_channels, fpn_channels, 3, padding=1),
            _group_norm(fpn_channels), nn.GELU(),
            nn.Conv2d(fpn_channels, fpn_channels, 3, padding=1),
        )
        self.engine = LatentPromptEngine(engine_cfg)
        self.decoder = MaskTokenDecoder(engine_cfg)

    def forward(self, coarse_map):
        b, c, h, w = coarse_map.shape
        tokens = self.adapter(map_to_tokens(coarse_map))
        global_tokens = self.global_attn(tokens, tokens, tokens)
        local_tokens = map_to_tokens(self.local_conv(coarse_map))
        feat, prompt = self.engine(global_tokens, local_tokens)
        return self.decoder(feat, prompt, (h, w))

    def foreground_logits(self, coarse_map):
        """Reduce per-token maps to a single foreground map (max over tokens)."""
        return self.forward(coarse_map).max(dim=1, keepdim=True).values


class ProjectionMlp(nn.Module):
    def __init__(self, in_dim: int, hidden: int, out_dim: int):
        super().__init__()
        self.net = nn.Sequential(
            nn.Linear(in_dim, hidden), nn.LayerNorm(hidden), nn.GELU(),
            nn.Linear(hidden, out_dim),
        )

    def forward(self, x):
        return self.net(x)


class ScaleHeads(nn.Module):
    """Per-scale projection heads, optionally followed by prediction heads."""

    def __init__(self, in_dim: int, cfg: HeadConfig, scales: int,
                 with_predictor: bool):
        super().__init__()
        n = scales if cfg.per_scale else 1
        self.per_scale = cfg.per_scale
        self.scales = scales
        self.projectors = nn.ModuleList([
            ProjectionMlp(in_dim, cfg.pred_hidden, cfg.proj_dim) for _ in range(n)
        ])
        self.predictors = None
        if with_predictor:
            self.predictors = nn.ModuleList([
                ProjectionMlp(cfg.proj_dim, cfg.pred_hidden, cfg.proj_dim)
                for _ in range(n)
            ])

    def _index(self, s: int) -> int:
        if not 0 <= s < self.scales:
            raise ValueError(f"unknown scale {s}")
        return s if self.per_scale else 0

    def project(self, h, s: int):
        return self.projectors[self._index(s)](h)

    def predict(self, z, s: int):
        if self.predictors is None:
            raise RuntimeError("this head set has no prediction heads")
        return self.predictors[self._index(s)](z)


class OnlineModel(nn.Module):
    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.backbone = MultiScaleBackbone(cfg.backbone)
        self.heads = ScaleHeads(cfg.backbone.fpn_channels, cfg.heads,
                                cfg.backbone.scales, with_predictor=True)

    def project_predict(self, h, s: int):
        z = self.heads.project(h, s)
        return z, self.heads.predict(z, s)


class TargetModel(nn.Module):
    """EMA copy: backbone + projectors only (no predictor), never grad-updated."""

    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.backbone = MultiScaleBackbone(cfg.backbone)
        self.heads = ScaleHeads(cfg.backbone.fpn_channels, cfg.heads,
                                cfg.backbone.scales, with_predictor=False)
        for p in self.parameters():
            p.requires_grad_(False)

    def project(self, h, s: int):
        return self.heads.project(h, s)


def target_param_map(online: OnlineModel, target: TargetModel):
    """Pair target parameters with their online counterparts by name.

    Raises ValueError listing unmatched names if the registries disagree
    (the online registry minus prediction heads must equal the target's).
    """
    online_params = dict(online.named_parameters())
    target_params = dict(target.named_parameters())
    expected = {name for name in online_params
                if not name.startswith("heads.predictors")}
    missing = sorted(expected - set(target_params))
    extra = sorted(set(target_params) - expected)
    if missing or extra:
        raise ValueError(
            f"parameter registry mismatch; missing from target: {missing}, "
            f"unexpected in target: {extra}")
    return [(target_params[name], online_params[name]) for name in sorted(expected)]


def save_checkpoint(path, kind: str, config: dict, state_dict: dict,
                    extra: dict | None = None):
    """Atomic (write-temp-then-rename) versioned checkpoint."""
    path = Path(path)
    payload = {
        "version": CHECKPOINT_VERSION,
        "kind": kind,
        "config": config,
        "state_dict": state_dict,
    }
    if extra:
        payload.update(extra)
    tmp = path.with_suffix(path.suffix + ".tmp")
    buf = io.BytesIO()
    torch.save(payload, buf)
    tmp.write_bytes(buf.getvalue())
    tmp.rename(path)
    return path


def load_checkpoint(path, expected_config: dict | None = None) -> dict:
    payload = torch.load(Path(path), map_location="cpu", weights_only=False)
    if payload.get("version") != CHECKPOINT_VERSION:
        raise RuntimeError(f"unsupported checkpoint version {payload.get('version')}")
    if expected_config is not None:
        diffs = config_diff(expected_config, payload["config"])
        if diffs:
            raise ConfigMismatchError(diffs)
    return payload
