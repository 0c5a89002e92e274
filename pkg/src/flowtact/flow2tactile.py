"""Dense binary contact inferred from point-cloud motion flow.

Two trainable parts: a shortcut generator that predicts the per-point
displacement field between two cloud frames (trained with a chamfer
reconstruction loss plus self-consistency), and a cross-attention search
head that turns (keypoint positions, flow) into per-keypoint contact
logits. The search head also runs in a "pc" ablation mode where the flow
features are replaced by the raw current-frame coordinates.

Also home to the contact-keypoint layout builders (a 456-point five-finger
layout and the small planar toy layout) and reading binarization.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
import torch

from .encoders import TactileFrame
from .errors import ConfigError
from .geometry import (
    KeypointLayout,
    KinematicChain,
    Link,
    RigidTransform,
    capsule_outline_length,
    capsule_outline_point,
    rotation_about_axis,
)
from .nets import (
    AttentionSpec,
    MLPSpec,
    ParamStore,
    cross_attention_forward,
    init_attention,
    init_mlp,
    mlp_forward,
)
from .shortcut import (
    ShortcutModel,
    _draw_dyadic,
    make_shortcut_model,
    sample_noise,
    self_consistency_loss,
    self_consistency_target,
)

# ---------------------------------------------------------------------------
# flow generator


def chamfer_torch(a: torch.Tensor, b: torch.Tensor) -> torch.Tensor:
    """Differentiable symmetric squared chamfer distance, batched: (B,) from
    (B, N, 3) and (B, M, 3)."""
    d2 = ((a[:, :, None, :] - b[:, None, :, :]) ** 2).sum(-1)
    return d2.min(dim=2).values.mean(dim=1) + d2.min(dim=1).values.mean(dim=1)


@dataclass
class FlowModel:
    """Shortcut model over an (N, 3) flow field, conditioned on an embedding
    of the two cloud frames (own encoder parameters, max-pooled per point).
    """

    point_spec: MLPSpec
    proj_spec: MLPSpec
    encoder: ParamStore
    shortcut: ShortcutModel

    @property
    def n_points(self) -> int:
        return self.shortcut.data_shape[0]

    def encode_clouds(self, p_prev: torch.Tensor, p_cur: torch.Tensor) -> torch.Tensor:
        flag0 = torch.zeros(p_prev.shape[:-1] + (1,), dtype=p_prev.dtype)
        flag1 = torch.ones(p_cur.shape[:-1] + (1,), dtype=p_cur.dtype)
        pts = torch.cat(
            [torch.cat([p_prev, flag0], -1), torch.cat([p_cur, flag1], -1)], dim=-2
        )
        feats = mlp_forward(self.point_spec, self.encoder, pts, prefix="point")
        pooled = feats.max(dim=-2).values
        return mlp_forward(self.proj_spec, self.encoder, pooled, prefix="proj")


def make_flow_model(
    n_points: int,
    seed: int,
    cond_width: int = 64,
    point_hidden: int = 48,
    hidden=(96, 96),
    time_width: int = 16,
    base_steps: int = 128,
    activation: str = "gelu",
    dtype: torch.dtype = torch.float64,
) -> FlowModel:
    rng = np.random.Generator(np.random.PCG64(seed))
    point_spec = MLPSpec((4, point_hidden, point_hidden, point_hidden), activation)
    proj_spec = MLPSpec((point_hidden, cond_width), activation)
    encoder = ParamStore(dtype)
    init_mlp(point_spec, rng, encoder, prefix="point")
    init_mlp(proj_spec, rng, encoder, prefix="proj")
    shortcut = make_shortcut_model(
        (n_points, 3),
        cond_width=cond_width,
        seed=seed + 1,
        hidden=hidden,
        time_width=time_width,
        base_steps=base_steps,
        activation=activation,
        dtype=dtype,
    )
    return FlowModel(point_spec, proj_spec, encoder, shortcut)


def _cloud_batch(model: FlowModel, p_prev, p_cur) -> tuple[torch.Tensor, torch.Tensor, bool]:
    dtype = model.shortcut.params.dtype
    a = torch.as_tensor(np.asarray(p_prev), dtype=dtype)
    b = torch.as_tensor(np.asarray(p_cur), dtype=dtype)
    batched = a.ndim == 3
    if not batched:
        a, b = a[None], b[None]
    for c in (a, b):
        if c.ndim != 3 or c.shape[1] != model.n_points or c.shape[2] != 3:
            raise ValueError(f"clouds must be (B, {model.n_points}, 3), got {tuple(c.shape)}")
    return a, b, batched


def predict_flow(model: FlowModel, p_prev, p_cur, n_steps: int = 1, seed: int = 0) -> np.ndarray:
    """Sample a displacement field aligned to ``p_prev`` rows."""
    a, b, batched = _cloud_batch(model, p_prev, p_cur)
    with torch.no_grad():
        cond = model.encode_clouds(a, b)
        from .shortcut import euler_sample

        flow = euler_sample(model.shortcut, cond, n_steps=n_steps, seed=seed, batch=a.shape[0])
    out = flow.numpy()
    return out if batched else out[0]


def flow_matching_loss(model: FlowModel, p_prev, p_cur, f_t, t, cond=None) -> torch.Tensor:
    """Chamfer reconstruction of the current frame from the extrapolated
    flow endpoint f_t + (1 - t) v(f_t, t, dt_min).
    """
    a, b, _ = _cloud_batch(model, p_prev, p_cur)
    if cond is None:
        cond = model.encode_clouds(a, b)
    f_t = torch.as_tensor(f_t, dtype=a.dtype)
    t = torch.as_tensor(t, dtype=a.dtype)
    v = model.shortcut.velocity(f_t, t, model.shortcut.dt_min, cond)
    f1 = f_t + (1.0 - t).reshape(-1, 1, 1) * v
    return chamfer_torch(b, a + f1).mean()


def flow_train_losses(model: FlowModel, p_prev, p_cur, rng: np.random.Generator) -> dict[str, torch.Tensor]:
    """Chamfer flow-matching loss plus self-consistency loss for a batch.

    No ground-truth flow exists without correspondences, so the interpolant
    state is built between seeded noise and the model's own one-step
    endpoint, the latter taken as a constant (no gradient). Draw order from
    ``rng``: noise first, then the dyadic (t, dt) pairs.
    """
    a, b, _ = _cloud_batch(model, p_prev, p_cur)
    n = a.shape[0]
    cond = model.encode_clouds(a, b)
    f0 = sample_noise((n,) + model.shortcut.data_shape, rng, dtype=a.dtype)
    t_np, dt_np = _draw_dyadic(rng, model.shortcut.base_steps, n)
    t = torch.as_tensor(t_np, dtype=a.dtype)
    dt = torch.as_tensor(dt_np, dtype=a.dtype)
    with torch.no_grad():
        f1_boot = f0 + model.shortcut.velocity(f0, 0.0, 1.0, cond.detach())
    f_t = (1.0 - t).reshape(-1, 1, 1) * f0 + t.reshape(-1, 1, 1) * f1_boot

    loss_fm = flow_matching_loss(model, a, b, f_t, t, cond=cond)
    v_target = self_consistency_target(model.shortcut, f_t, t, dt, cond.detach())
    loss_sc = self_consistency_loss(model.shortcut, f_t, t, dt, cond, v_target)
    return {"fm": loss_fm, "sc": loss_sc}


# ---------------------------------------------------------------------------
# keypoint search head


@dataclass(frozen=True)
class SearchHeadConfig:
    n_keypoints: int
    width: int = 64
    n_heads: int = 2
    n_layers: int = 2
    embed_hidden: int = 64
    activation: str = "gelu"

    def kp_spec(self) -> MLPSpec:
        return MLPSpec((3, self.embed_hidden, self.width), self.activation)

    def feat_spec(self) -> MLPSpec:
        return MLPSpec((6, self.embed_hidden, self.width), self.activation)

    def attention_spec(self) -> AttentionSpec:
        if self.width % self.n_heads:
            raise ConfigError(f"{self.n_heads} heads do not divide width {self.width}")
        return AttentionSpec(self.width, self.n_heads, self.width // self.n_heads)


@dataclass
class SearchHead:
    """Keypoint queries attend over per-point motion features; one logit per
    keypoint, positive meaning contact. The logit layer starts at zero.
    """

    cfg: SearchHeadConfig
    params: ParamStore


def make_search_head(cfg: SearchHeadConfig, seed: int, dtype: torch.dtype = torch.float64) -> SearchHead:
    rng = np.random.Generator(np.random.PCG64(seed))
    store = ParamStore(dtype)
    init_mlp(cfg.kp_spec(), rng, store, prefix="kp")
    init_mlp(cfg.feat_spec(), rng, store, prefix="feat")
    for i in range(cfg.n_layers):
        init_attention(cfg.attention_spec(), rng, store, prefix=f"attn{i}")
    store.add("out.w", np.zeros((1, cfg.width)))
    store.add("out.b", np.zeros(1))
    return SearchHead(cfg, store)


def search_head_logits(head: SearchHead, keypoints, point_feats) -> torch.Tensor:
    """Logits (B?, N_k) from keypoints (B?, N_k, 3) and per-point motion
    features (B?, N_p, 6)."""
    cfg = head.cfg
    dtype = head.params.dtype
    kp = torch.as_tensor(np.asarray(keypoints), dtype=dtype) if not isinstance(keypoints, torch.Tensor) else keypoints.to(dtype)
    fp = torch.as_tensor(np.asarray(point_feats), dtype=dtype) if not isinstance(point_feats, torch.Tensor) else point_feats.to(dtype)
    batched = kp.ndim == 3
    if not batched:
        kp = kp[None]
    if fp.ndim == 2:
        fp = fp[None].expand(kp.shape[0], *fp.shape)
    if kp.shape[1] != cfg.n_keypoints:
        raise ValueError(f"expected {cfg.n_keypoints} keypoints, got {kp.shape[1]}")
    if fp.shape[-1] != 6:
        raise ValueError("point features must be 6-wide (position, motion)")
    q = mlp_forward(cfg.kp_spec(), head.params, kp, prefix="kp")
    kv = mlp_forward(cfg.feat_spec(), head.params, fp, prefix="feat")
    spec = cfg.attention_spec()
    for i in range(cfg.n_layers):
        q = cross_attention_forward(spec, head.params, q, kv, prefix=f"attn{i}")
    logits = (q @ head.params["out.w"].transpose(0, 1) + head.params["out.b"]).squeeze(-1)
    return logits if batched else logits[0]


def _motion_features(flow_or_pcur, p_prev, mode: str) -> np.ndarray:
    p_prev = np.asarray(p_prev, dtype=np.float64)
    other = np.asarray(flow_or_pcur, dtype=np.float64)
    if other.shape != p_prev.shape:
        raise ValueError(f"motion rows {other.shape} do not match cloud rows {p_prev.shape}")
    if mode not in ("flow", "pc"):
        raise ConfigError(f"unknown search mode {mode!r}")
    # flow mode: (position, displacement); pc mode: (previous, current) frames
    return np.concatenate([p_prev, other], axis=-1)


def search_tactile(head: SearchHead, keypoints, flow, p_prev, mode: str = "flow"):
    """Predict contact at each keypoint.

    In "flow" mode ``flow`` holds per-point displacements aligned with
    ``p_prev``; in "pc" mode it holds the current-frame coordinates
    instead. Returns (logits, binary TactileFrame) with contact = logit
    strictly positive.
    """
    feats = _motion_features(flow, p_prev, mode)
    with torch.no_grad():
        logits = search_head_logits(head, np.asarray(keypoints), feats).numpy()
    readings = (logits > 0).astype(np.float64)
    return logits, TactileFrame(readings, mode="binary")


def tactile_train_loss(head: SearchHead, keypoints, flow, p_prev, r_gt, mode: str = "flow") -> torch.Tensor:
    """MSE between sigmoid(logits) and the ground-truth binary readings.

    Accepts a single sample or a batch (leading dimension on every array).
    """
    kp = np.asarray(keypoints, dtype=np.float64)
    batched = kp.ndim == 3
    if batched:
        feats = np.stack(
            [_motion_features(f, p, mode) for f, p in zip(np.asarray(flow), np.asarray(p_prev))]
        )
    else:
        feats = _motion_features(flow, p_prev, mode)
    target = torch.as_tensor(np.asarray(r_gt), dtype=head.params.dtype)
    logits = search_head_logits(head, kp, feats)
    return ((torch.sigmoid(logits) - target) ** 2).mean()


# ---------------------------------------------------------------------------
# keypoint layouts


@dataclass(frozen=True)
class ToyHandSpec:
    """Planar two-finger hand: palm bar plus two 2-link fingers."""

    mounts: tuple[float, float] = (-0.05, 0.05)  # x positions on the palm bar
    link_length: float = 0.06
    capsule_radius: float = 0.008
    palm_half_length: float = 0.09
    keypoint_grid: tuple[int, int] = (4, 4)  # wrap density per finger link


@dataclass(frozen=True)
class ShadowLayoutSpec:
    """Five-finger layout: 14 keypoint-carrying finger links (3 per finger on
    four fingers, 2 on the thumb), a 3x4 grid of 12 keypoints per link, and a
    12x24 palm grid of 288 keypoints.
    """

    finger_links: tuple[int, ...] = (3, 3, 3, 3, 2)  # thumb last
    link_grid: tuple[int, int] = (3, 4)
    palm_grid: tuple[int, int] = (12, 24)
    link_length: float = 0.025
    link_radius: float = 0.007
    palm_size: tuple[float, float] = (0.08, 0.09)


def _rz(angle: float) -> np.ndarray:
    return rotation_about_axis([0.0, 0.0, 1.0], angle)


def _link_grid_offsets(length: float, radius: float, grid: tuple[int, int]) -> np.ndarray:
    """k x m keypoints wrapped uniformly around the link's capsule outline,
    anchored so the first keypoint sits exactly on the fingertip apex (where
    single-point pushes make contact)."""
    count = grid[0] * grid[1]
    perim = capsule_outline_length(0.0, length, radius)
    # the outline walk starts at the top-left corner; the far cap apex lies
    # at arc length (span + pi * radius / 2)
    apex = length + radius * np.pi / 2.0
    pts = [
        capsule_outline_point(apex + i / count * perim, 0.0, length, radius)
        for i in range(count)
    ]
    return np.array([[p[0], p[1], 0.0] for p in pts])


def build_hand_chain(kind: str, spec=None) -> KinematicChain:
    """Kinematic chain whose link indices match :func:`build_layout`."""
    z = np.array([0.0, 0.0, 1.0])
    if kind == "toy":
        spec = spec or ToyHandSpec()
        links = [Link(-1, RigidTransform.identity(), z, "fixed")]
        for mount in spec.mounts:
            base = len(links)
            links.append(Link(0, RigidTransform(_rz(math.pi / 2), np.array([mount, 0.0, 0.0])), z, "revolute"))
            links.append(Link(base, RigidTransform(np.eye(3), np.array([spec.link_length, 0.0, 0.0])), z, "revolute"))
        return KinematicChain(tuple(links))
    if kind == "shadow":
        spec = spec or ShadowLayoutSpec()
        links = [Link(-1, RigidTransform.identity(), z, "fixed")]
        n_fingers = len(spec.finger_links)
        w, h = spec.palm_size
        bases = np.linspace(-w / 2 + 0.008, w / 2 - 0.008, n_fingers)
        for f, n_links in enumerate(spec.finger_links):
            parent = 0
            rest = RigidTransform(_rz(math.pi / 2), np.array([bases[f], h, 0.0]))
            for _ in range(n_links):
                idx = len(links)
                links.append(Link(parent, rest, z, "revolute"))
                parent = idx
                rest = RigidTransform(np.eye(3), np.array([spec.link_length, 0.0, 0.0]))
        return KinematicChain(tuple(links))
    raise ConfigError(f"unknown hand kind {kind!r}")


def build_layout(kind: str, spec=None) -> KeypointLayout:
    """Contact keypoints for a hand kind, in link-local coordinates."""
    if kind == "toy":
        spec = spec or ToyHandSpec()
        offsets = _link_grid_offsets(spec.link_length, spec.capsule_radius, spec.keypoint_grid)
        link_index = []
        all_offsets = []
        for link in range(1, 5):
            link_index.extend([link] * len(offsets))
            all_offsets.append(offsets)
        return KeypointLayout(np.array(link_index), np.concatenate(all_offsets))
    if kind == "shadow":
        spec = spec or ShadowLayoutSpec()
        link_index = []
        all_offsets = []
        # palm grid on the fixed base link
        w, h = spec.palm_size
        nx, ny = spec.palm_grid
        xs = np.linspace(-w / 2, w / 2, nx)
        ys = np.linspace(0.0, h, ny)
        palm = np.array([[x, y, 0.0] for y in ys for x in xs])
        link_index.extend([0] * len(palm))
        all_offsets.append(palm)
        # finger links in chain order
        offsets = _link_grid_offsets(spec.link_length, spec.link_radius, spec.link_grid)
        n_finger_links = sum(spec.finger_links)
        for link in range(1, n_finger_links + 1):
            link_index.extend([link] * len(offsets))
            all_offsets.append(offsets)
        return KeypointLayout(np.array(link_index), np.concatenate(all_offsets))
    raise ConfigError(f"unknown layout kind {kind!r}")


def binarize_readings(forces, threshold: float) -> TactileFrame:
    """Threshold continuous forces: contact = force >= threshold (newtons)."""
    if threshold <= 0:
        raise ValueError(f"threshold must be positive, got {threshold}")
    if isinstance(forces, TactileFrame):
        forces = forces.values
    f = np.asarray(forces, dtype=np.float64)
    if np.any(f < 0):
        raise ValueError("forces must be nonnegative")
    return TactileFrame((f >= threshold).astype(np.float64), mode="binary")


def export_tactile_csv(path, keypoints, frame: TactileFrame) -> None:
    """Write rows of (keypoint index, x, y, z, reading)."""
    kp = np.asarray(keypoints, dtype=np.float64)
    if kp.shape != (len(frame), 3):
        raise ValueError("keypoint count does not match frame length")
    with open(path, "w") as fh:
        fh.write("index,x,y,z,reading\n")
        for i in range(len(frame)):
            x, y, z = (repr(float(v)) for v in kp[i])
            fh.write(f"{i},{x},{y},{z},{frame.values[i]:.0f}\n")
