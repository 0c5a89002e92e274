"""Multimodal encoders and visuotactile feature fusion.

Three encoders turn raw observations into compact features: a state MLP
over two consecutive joint vectors, a permutation-invariant point encoder
(shared per-point MLP, element-wise max over both frames, output
projection), and a tactile MLP over contact readings. Fusion combines the
visual and tactile features into a vector of width 2 * d_v by one of three
interchangeable methods (cross-attention, MLP, add), so the policy
downstream never sees which one is active.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch

from .errors import ConfigError
from .nets import (
    AttentionSpec,
    MLPSpec,
    ParamStore,
    cross_attention_forward,
    init_attention,
    init_mlp,
    mlp_forward,
)

FUSION_METHODS = ("transformer", "mlp", "add")


@dataclass
class TactileFrame:
    """Contact readings over the keypoint layout.

    ``mode`` is "binary" (entries in {0, 1}) or "continuous" (nonnegative
    forces in newtons); the mode is metadata and does not change how the
    values are encoded.
    """

    values: np.ndarray
    mode: str = "binary"

    def __post_init__(self):
        v = np.asarray(self.values, dtype=np.float64)
        if v.ndim != 1:
            raise ValueError("tactile readings must be a flat vector")
        if not np.all(np.isfinite(v)):
            raise ValueError("tactile readings must be finite")
        if self.mode == "binary":
            if not np.all((v == 0.0) | (v == 1.0)):
                raise ValueError("binary tactile readings must be 0 or 1")
        elif self.mode == "continuous":
            if np.any(v < 0):
                raise ValueError("continuous tactile readings must be nonnegative")
        else:
            raise ValueError(f"unknown tactile mode {self.mode!r}")
        self.values = v

    def __len__(self) -> int:
        return int(self.values.shape[0])


@dataclass(frozen=True)
class PerceptionConfig:
    """Widths for the encoders and the fusion module."""

    n_joints: int
    n_points: int
    n_readings: int
    d_s: int = 64
    d_v: int = 128
    d_tac: int = 64
    state_hidden: int = 64
    point_hidden: int = 64
    tactile_hidden: int = 64
    fusion_hidden: int = 128
    token_width: int = 32
    n_heads: int = 2
    activation: str = "gelu"

    def state_spec(self) -> MLPSpec:
        return MLPSpec((2 * self.n_joints, self.state_hidden, self.state_hidden, self.d_s), self.activation)

    def point_spec(self) -> MLPSpec:
        h = self.point_hidden
        return MLPSpec((4, h, h, h), self.activation)

    def visual_proj_spec(self) -> MLPSpec:
        return MLPSpec((self.point_hidden, self.d_v), self.activation)

    def tactile_spec(self) -> MLPSpec:
        h = self.tactile_hidden
        return MLPSpec((self.n_readings, h, h, h, self.d_tac), self.activation)

    def fusion_mlp_spec(self) -> MLPSpec:
        return MLPSpec((self.d_v + self.d_tac, self.fusion_hidden, 2 * self.d_v), self.activation)

    def attention_spec(self) -> AttentionSpec:
        if self.token_width * (self.d_v // self.token_width) != self.d_v:
            raise ConfigError(f"token width {self.token_width} does not divide d_v {self.d_v}")
        if self.token_width * (self.d_tac // self.token_width) != self.d_tac:
            raise ConfigError(f"token width {self.token_width} does not divide d_tac {self.d_tac}")
        head_width = self.token_width // self.n_heads
        if head_width * self.n_heads != self.token_width:
            raise ConfigError(f"{self.n_heads} heads do not divide token width {self.token_width}")
        return AttentionSpec(self.token_width, self.n_heads, head_width)

    @property
    def d_fuse(self) -> int:
        return 2 * self.d_v


def init_perception(cfg: PerceptionConfig, seed: int, method: str = "transformer",
                    dtype: torch.dtype = torch.float64) -> dict[str, ParamStore]:
    """Parameter stores for all encoders plus the chosen fusion method."""
    if method not in FUSION_METHODS:
        raise ConfigError(f"unknown fusion method {method!r}")
    rng = np.random.Generator(np.random.PCG64(seed))
    stores: dict[str, ParamStore] = {}

    state = ParamStore(dtype)
    init_mlp(cfg.state_spec(), rng, state)
    stores["state"] = state

    visual = ParamStore(dtype)
    init_mlp(cfg.point_spec(), rng, visual, prefix="point")
    init_mlp(cfg.visual_proj_spec(), rng, visual, prefix="proj")
    stores["visual"] = visual

    tactile = ParamStore(dtype)
    init_mlp(cfg.tactile_spec(), rng, tactile)
    stores["tactile"] = tactile

    fusion = ParamStore(dtype)
    if method == "transformer":
        init_attention(cfg.attention_spec(), rng, fusion)
        if cfg.d_tac > cfg.d_v:
            raise ConfigError("transformer fusion assumes d_tac <= d_v")
    elif method == "mlp":
        init_mlp(cfg.fusion_mlp_spec(), rng, fusion)
    else:  # add: parameter-free zero-pad + sum
        if cfg.d_tac > cfg.d_v:
            raise ConfigError("add fusion requires d_tac <= d_v")
    stores["fusion"] = fusion
    return stores


def _batchify(x, width: int, dtype) -> tuple[torch.Tensor, bool]:
    t = torch.as_tensor(np.asarray(x), dtype=dtype) if not isinstance(x, torch.Tensor) else x.to(dtype)
    if t.shape[-1] != width:
        raise ValueError(f"expected trailing width {width}, got {t.shape[-1]}")
    if t.ndim == 1:
        return t[None], False
    return t, True


def encode_state(cfg: PerceptionConfig, params: ParamStore, s_prev, s_cur) -> torch.Tensor:
    """State feature from two consecutive joint vectors, concatenated."""
    a, batched_a = _batchify(s_prev, cfg.n_joints, params.dtype)
    b, batched_b = _batchify(s_cur, cfg.n_joints, params.dtype)
    if a.shape != b.shape:
        raise ValueError("previous and current state shapes differ")
    out = mlp_forward(cfg.state_spec(), params, torch.cat([a, b], dim=-1))
    return out if (batched_a or batched_b) else out[0]


def encode_visual(cfg: PerceptionConfig, params: ParamStore, p_prev, p_cur) -> torch.Tensor:
    """Visual feature from two point-cloud frames.

    Each point becomes (x, y, z, frame_flag) with flag 0 for the earlier
    frame and 1 for the current one; a shared MLP runs per point, features
    are max-pooled over all 2 N points, then projected to d_v. Pooling
    makes the result invariant to point order within each frame.
    """
    p0 = torch.as_tensor(np.asarray(p_prev), dtype=params.dtype)
    p1 = torch.as_tensor(np.asarray(p_cur), dtype=params.dtype)
    batched = p0.ndim == 3
    if not batched:
        p0, p1 = p0[None], p1[None]
    for p in (p0, p1):
        if p.ndim != 3 or p.shape[-1] != 3 or p.shape[1] != cfg.n_points:
            raise ValueError(f"clouds must be (B, {cfg.n_points}, 3), got {tuple(p.shape)}")
    flag0 = torch.zeros(p0.shape[:-1] + (1,), dtype=params.dtype)
    flag1 = torch.ones(p1.shape[:-1] + (1,), dtype=params.dtype)
    pts = torch.cat([torch.cat([p0, flag0], -1), torch.cat([p1, flag1], -1)], dim=1)
    feats = mlp_forward(cfg.point_spec(), params, pts, prefix="point")
    pooled = feats.max(dim=1).values
    out = mlp_forward(cfg.visual_proj_spec(), params, pooled, prefix="proj")
    return out if batched else out[0]


def encode_tactile(cfg: PerceptionConfig, params: ParamStore, readings) -> torch.Tensor:
    """Tactile feature from a reading vector or TactileFrame."""
    if isinstance(readings, TactileFrame):
        readings = readings.values
    x, batched = _batchify(readings, cfg.n_readings, params.dtype)
    out = mlp_forward(cfg.tactile_spec(), params, x)
    return out if batched else out[0]


def fuse_features(cfg: PerceptionConfig, params: ParamStore, f_v, f_tac, method: str) -> torch.Tensor:
    """Fuse visual and tactile features to width 2 d_v.

    transformer: visual tokens query tactile tokens through cross
    attention, the attended tokens are flattened and concatenated with the
    raw visual feature. mlp: one MLP over the concatenation. add: the
    tactile feature is zero-padded to d_v, added to the visual feature, and
    the sum is duplicated.
    """
    if method not in FUSION_METHODS:
        raise ConfigError(f"unknown fusion method {method!r}")
    v, batched = _batchify(f_v, cfg.d_v, params.dtype)
    tac, _ = _batchify(f_tac, cfg.d_tac, params.dtype)
    if tac.shape[0] != v.shape[0]:
        raise ValueError("visual and tactile batch sizes differ")
    if method == "transformer":
        spec = cfg.attention_spec()
        w = cfg.token_width
        q = v.reshape(v.shape[0], cfg.d_v // w, w)
        kv = tac.reshape(tac.shape[0], cfg.d_tac // w, w)
        attended = cross_attention_forward(spec, params, q, kv)
        fused = torch.cat([attended.reshape(v.shape[0], cfg.d_v), v], dim=-1)
    elif method == "mlp":
        fused = mlp_forward(cfg.fusion_mlp_spec(), params, torch.cat([v, tac], dim=-1))
    else:
        s = v + torch.nn.functional.pad(tac, (0, cfg.d_v - cfg.d_tac))
        fused = torch.cat([s, s], dim=-1)
    return fused if batched else fused[0]


def vision_only_fuse(cfg: PerceptionConfig, f_v) -> torch.Tensor:
    """Fused feature when no tactile signal exists: the visual feature duplicated."""
    v = f_v if isinstance(f_v, torch.Tensor) else torch.as_tensor(np.asarray(f_v))
    if v.shape[-1] != cfg.d_v:
        raise ValueError(f"expected visual width {cfg.d_v}, got {v.shape[-1]}")
    return torch.cat([v, v], dim=-1)
