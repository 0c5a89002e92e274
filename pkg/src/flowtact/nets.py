"""Small differentiable-network substrate on top of torch tensors.

Parameters live in a :class:`ParamStore` (named float tensors with a fixed
iteration order) rather than ``nn.Module`` so that initialization,
checkpointing, and the optimizer stay explicit and bit-reproducible:
weights come from a seeded numpy PCG64 stream, never from torch RNG.

Forward passes accept a leading batch dimension everywhere. Double
precision is the default; pass ``dtype`` at init time to opt into float32.
"""

from __future__ import annotations

import io
import json
import math
from dataclasses import dataclass

import numpy as np
import torch

from .errors import ConfigError

DEFAULT_DTYPE = torch.float64

CHECKPOINT_VERSION = 1


def _act(name: str):
    if name == "gelu":
        return torch.nn.functional.gelu
    if name == "tanh":
        return torch.tanh
    raise ConfigError(f"unknown activation {name!r}")


# ---------------------------------------------------------------------------
# specs


@dataclass(frozen=True)
class MLPSpec:
    """Fully-connected stack; ``widths`` includes input and output."""

    widths: tuple[int, ...]
    activation: str = "gelu"

    def __post_init__(self):
        object.__setattr__(self, "widths", tuple(int(w) for w in self.widths))
        if len(self.widths) < 2:
            raise ValueError("MLPSpec needs at least input and output widths")
        if any(w < 1 for w in self.widths):
            raise ValueError("all widths must be >= 1")


@dataclass(frozen=True)
class AttentionSpec:
    """Single cross-attention layer over tokens of width ``width``."""

    width: int
    n_heads: int
    head_width: int

    def __post_init__(self):
        if self.n_heads * self.head_width != self.width:
            raise ValueError(
                f"heads * head_width must equal token width: "
                f"{self.n_heads} * {self.head_width} != {self.width}"
            )


@dataclass(frozen=True)
class VelocityNetSpec:
    """U-shaped residual MLP over flattened data, conditioned on a feature
    vector plus sinusoidal embeddings of the denoising time and step size.

    ``hidden`` is the down path; the up path mirrors it via skip
    connections, with a bottleneck block at the deepest width. The output
    head is zero-initialized so an untrained net is the zero velocity field.
    """

    data_shape: tuple[int, ...]
    cond_width: int
    time_width: int = 16
    hidden: tuple[int, ...] = (128, 128)
    activation: str = "gelu"

    def __post_init__(self):
        object.__setattr__(self, "data_shape", tuple(int(d) for d in self.data_shape))
        object.__setattr__(self, "hidden", tuple(int(h) for h in self.hidden))
        if len(self.hidden) < 1:
            raise ValueError("velocity net needs at least one hidden width")
        if self.time_width < 2 or self.time_width % 2:
            raise ValueError("time_width must be even and >= 2")

    @property
    def data_dim(self) -> int:
        return int(np.prod(self.data_shape))

    @property
    def full_cond_width(self) -> int:
        return self.cond_width + 2 * self.time_width


# ---------------------------------------------------------------------------
# parameter storage


class ParamStore:
    """Ordered mapping of names to trainable tensors."""

    def __init__(self, dtype: torch.dtype = DEFAULT_DTYPE):
        self.dtype = dtype
        self._items: dict[str, torch.Tensor] = {}

    def add(self, name: str, value: np.ndarray) -> None:
        if name in self._items:
            raise ValueError(f"duplicate parameter name {name!r}")
        t = torch.as_tensor(np.array(value, copy=True), dtype=self.dtype)
        t.requires_grad_(True)
        self._items[name] = t

    def names(self) -> list[str]:
        return list(self._items)

    def tensors(self) -> list[torch.Tensor]:
        return list(self._items.values())

    def __getitem__(self, name: str) -> torch.Tensor:
        return self._items[name]

    def __contains__(self, name: str) -> bool:
        return name in self._items

    def __len__(self) -> int:
        return len(self._items)

    @property
    def n_params(self) -> int:
        return sum(t.numel() for t in self._items.values())

    def to_arrays(self) -> dict[str, np.ndarray]:
        return {k: v.detach().cpu().numpy().copy() for k, v in self._items.items()}

    def load_arrays(self, arrays: dict[str, np.ndarray]) -> None:
        for k, t in self._items.items():
            a = np.asarray(arrays[k])
            if tuple(a.shape) != tuple(t.shape):
                raise ValueError(f"shape mismatch for {k!r}: {a.shape} vs {tuple(t.shape)}")
            with torch.no_grad():
                t.copy_(torch.as_tensor(a, dtype=self.dtype))

    def clone(self) -> "ParamStore":
        out = ParamStore(self.dtype)
        for k, v in self._items.items():
            out.add(k, v.detach().cpu().numpy())
        return out


def _uniform(rng: np.random.Generator, shape, fan_in: int) -> np.ndarray:
    bound = 1.0 / math.sqrt(fan_in)
    return rng.uniform(-bound, bound, size=shape)


def _init_linear(store: ParamStore, rng, prefix: str, n_in: int, n_out: int, zero: bool = False):
    if zero:
        store.add(f"{prefix}.w", np.zeros((n_out, n_in)))
    else:
        store.add(f"{prefix}.w", _uniform(rng, (n_out, n_in), n_in))
    store.add(f"{prefix}.b", np.zeros(n_out))


def _linear(store: ParamStore, prefix: str, x: torch.Tensor) -> torch.Tensor:
    return x @ store[f"{prefix}.w"].transpose(0, 1) + store[f"{prefix}.b"]


def init_mlp(spec: MLPSpec, rng, store: ParamStore, prefix: str = "") -> None:
    sep = "." if prefix else ""
    for i in range(len(spec.widths) - 1):
        _init_linear(store, rng, f"{prefix}{sep}layer{i}", spec.widths[i], spec.widths[i + 1])


def init_attention(spec: AttentionSpec, rng, store: ParamStore, prefix: str = "") -> None:
    sep = "." if prefix else ""
    for name in ("q", "k", "v", "o"):
        _init_linear(store, rng, f"{prefix}{sep}{name}", spec.width, spec.width)


def init_velocity_net(spec: VelocityNetSpec, rng, store: ParamStore, prefix: str = "") -> None:
    sep = "." if prefix else ""
    c = spec.full_cond_width
    h = spec.hidden
    _init_linear(store, rng, f"{prefix}{sep}stem", spec.data_dim, h[0])
    for i in range(len(h) - 1):
        _init_res_block(store, rng, f"{prefix}{sep}down{i}", h[i], c, h[i + 1])
    _init_res_block(store, rng, f"{prefix}{sep}bottleneck", h[-1], c, h[-1])
    for i in range(len(h) - 1):
        w_in = h[-1 - i] + h[-2 - i]  # current width + skip width
        _init_res_block(store, rng, f"{prefix}{sep}up{i}", w_in, c, h[-2 - i])
    _init_linear(store, rng, f"{prefix}{sep}head", h[0], spec.data_dim, zero=True)


def _init_res_block(store: ParamStore, rng, prefix: str, n_in: int, n_cond: int, n_out: int):
    _init_linear(store, rng, f"{prefix}.fc1", n_in + n_cond, n_out)
    _init_linear(store, rng, f"{prefix}.fc2", n_out, n_out)
    if n_in != n_out:
        store.add(f"{prefix}.proj", _uniform(rng, (n_out, n_in), n_in))


def _res_block(params: ParamStore, prefix: str, h: torch.Tensor, c: torch.Tensor, act) -> torch.Tensor:
    z = act(_linear(params, f"{prefix}.fc1", torch.cat([h, c], dim=-1)))
    out = _linear(params, f"{prefix}.fc2", z)
    if f"{prefix}.proj" in params:
        return out + h @ params[f"{prefix}.proj"].transpose(0, 1)
    return out + h


def init_params(spec, seed: int, dtype: torch.dtype = DEFAULT_DTYPE) -> ParamStore:
    """Fresh parameters for a spec: weights uniform in +-1/sqrt(fan_in),
    biases zero, all drawn from a PCG64 stream seeded with ``seed``.
    """
    rng = np.random.Generator(np.random.PCG64(seed))
    store = ParamStore(dtype)
    if isinstance(spec, MLPSpec):
        init_mlp(spec, rng, store)
    elif isinstance(spec, AttentionSpec):
        init_attention(spec, rng, store)
    elif isinstance(spec, VelocityNetSpec):
        init_velocity_net(spec, rng, store)
    else:
        raise ConfigError(f"cannot initialize parameters for {type(spec).__name__}")
    return store


# ---------------------------------------------------------------------------
# forwards


def _to_tensor(x, dtype: torch.dtype) -> torch.Tensor:
    if isinstance(x, torch.Tensor):
        return x.to(dtype)
    return torch.as_tensor(np.asarray(x), dtype=dtype)


def mlp_forward(spec: MLPSpec, params: ParamStore, x, prefix: str = "") -> torch.Tensor:
    """Affine stacks with the activation between layers, final layer affine only."""
    act = _act(spec.activation)
    sep = "." if prefix else ""
    h = _to_tensor(x, params.dtype)
    if h.shape[-1] != spec.widths[0]:
        raise ValueError(f"input width {h.shape[-1]} != spec input {spec.widths[0]}")
    n_layers = len(spec.widths) - 1
    for i in range(n_layers):
        h = _linear(params, f"{prefix}{sep}layer{i}", h)
        if i < n_layers - 1:
            h = act(h)
    return h


def cross_attention_forward(
    spec: AttentionSpec, params: ParamStore, queries, keys_values, prefix: str = ""
) -> torch.Tensor:
    """Scaled dot-product cross attention with a residual add from the queries.

    ``queries`` is (..., T_q, width) and ``keys_values`` (..., T_kv, width);
    softmax runs over the key/value tokens per head, heads are concatenated
    and projected, and the query tokens are added back.
    """
    sep = "." if prefix else ""
    q_in = _to_tensor(queries, params.dtype)
    kv_in = _to_tensor(keys_values, params.dtype)
    if q_in.shape[-1] != spec.width or kv_in.shape[-1] != spec.width:
        raise ValueError(
            f"token width mismatch: queries {q_in.shape[-1]}, keys/values "
            f"{kv_in.shape[-1]}, spec {spec.width}"
        )
    q = _linear(params, f"{prefix}{sep}q", q_in)
    k = _linear(params, f"{prefix}{sep}k", kv_in)
    v = _linear(params, f"{prefix}{sep}v", kv_in)

    def split(t):  # (..., T, width) -> (..., heads, T, head_width)
        shape = t.shape[:-1] + (spec.n_heads, spec.head_width)
        return t.reshape(shape).transpose(-3, -2)

    qh, kh, vh = split(q), split(k), split(v)
    logits = qh @ kh.transpose(-2, -1) / math.sqrt(spec.head_width)
    attn = torch.softmax(logits, dim=-1)
    out = attn @ vh  # (..., heads, T_q, head_width)
    out = out.transpose(-3, -2)
    out = out.reshape(out.shape[:-2] + (spec.width,))
    return q_in + _linear(params, f"{prefix}{sep}o", out)


def sinusoidal_embedding(t: torch.Tensor, width: int) -> torch.Tensor:
    """Sin/cos features of a scalar in [0, 1] at geometrically spaced frequencies."""
    half = width // 2
    freqs = torch.exp(
        torch.linspace(0.0, math.log(1000.0), half, dtype=t.dtype, device=t.device)
    )
    ang = t[..., None] * freqs
    return torch.cat([torch.sin(ang), torch.cos(ang)], dim=-1)


def velocity_net_forward(
    spec: VelocityNetSpec, params: ParamStore, x, t, dt, cond=None, prefix: str = ""
) -> torch.Tensor:
    """Velocity prediction at state ``x``, time ``t``, step size ``dt``.

    ``x`` is (..., *data_shape); ``t`` and ``dt`` broadcast over the batch;
    ``cond`` is (..., cond_width) or None when the spec is unconditional.
    """
    sep = "." if prefix else ""
    act = _act(spec.activation)
    x = _to_tensor(x, params.dtype)
    batch_shape = x.shape[: x.ndim - len(spec.data_shape)]
    if x.shape[len(batch_shape):] != spec.data_shape:
        raise ValueError(f"data shape {x.shape} incompatible with spec {spec.data_shape}")
    t = _to_tensor(t, params.dtype).expand(batch_shape) if np.ndim(t) == 0 else _to_tensor(t, params.dtype)
    dt = _to_tensor(dt, params.dtype).expand(batch_shape) if np.ndim(dt) == 0 else _to_tensor(dt, params.dtype)
    if torch.any(t < 0) or torch.any(t >= 1):
        raise ValueError("denoising time t must lie in [0, 1)")
    if torch.any(dt <= 0) or torch.any(dt > 1):
        raise ValueError("step size dt must lie in (0, 1]")

    pieces = [sinusoidal_embedding(t, spec.time_width), sinusoidal_embedding(dt, spec.time_width)]
    if spec.cond_width:
        if cond is None:
            raise ValueError("spec expects a condition vector")
        cond = _to_tensor(cond, params.dtype)
        if cond.shape[-1] != spec.cond_width:
            raise ValueError(f"condition width {cond.shape[-1]} != spec {spec.cond_width}")
        pieces.insert(0, cond.expand(batch_shape + (spec.cond_width,)))
    c = torch.cat(pieces, dim=-1)

    h = _linear(params, f"{prefix}{sep}stem", x.reshape(batch_shape + (spec.data_dim,)))
    skips = []
    for i in range(len(spec.hidden) - 1):
        skips.append(h)
        h = _res_block(params, f"{prefix}{sep}down{i}", h, c, act)
    h = _res_block(params, f"{prefix}{sep}bottleneck", h, c, act)
    for i in range(len(spec.hidden) - 1):
        h = _res_block(params, f"{prefix}{sep}up{i}", torch.cat([h, skips.pop()], dim=-1), c, act)
    y = _linear(params, f"{prefix}{sep}head", h)
    return y.reshape(batch_shape + spec.data_shape)


# ---------------------------------------------------------------------------
# gradient checking and optimizer


def grad_check(fn, params: ParamStore, eps: float = 1e-5) -> float:
    """Max relative error between reverse-mode gradients of ``fn(params)``
    and central finite differences, per coordinate, with denominator
    max(|analytic|, |numeric|, 1e-8).
    """
    if eps <= 0:
        raise ValueError("eps must be positive")
    loss = fn(params)
    if not torch.isfinite(loss):
        raise ValueError("loss is not finite")
    grads = torch.autograd.grad(loss, params.tensors(), allow_unused=True)
    worst = 0.0
    for tensor, grad in zip(params.tensors(), grads):
        g = torch.zeros_like(tensor) if grad is None else grad
        flat = tensor.reshape(-1)
        gflat = g.reshape(-1)
        for j in range(flat.numel()):
            orig = flat[j].item()
            with torch.no_grad():
                flat[j] = orig + eps
            up = float(fn(params).detach())
            with torch.no_grad():
                flat[j] = orig - eps
            down = float(fn(params).detach())
            with torch.no_grad():
                flat[j] = orig
            numeric = (up - down) / (2.0 * eps)
            analytic = float(gflat[j])
            denom = max(abs(analytic), abs(numeric), 1e-8)
            worst = max(worst, abs(analytic - numeric) / denom)
    return worst


def optimizer_step(
    params: ParamStore,
    grads: dict[str, torch.Tensor],
    state: dict | None,
    lr: float,
    beta1: float = 0.9,
    beta2: float = 0.999,
    eps: float = 1e-8,
) -> tuple[ParamStore, dict]:
    """One bias-corrected first/second-moment update, in place."""
    if state is None:
        state = {
            "step": 0,
            "m": {k: torch.zeros_like(v) for k, v in zip(params.names(), params.tensors())},
            "v": {k: torch.zeros_like(v) for k, v in zip(params.names(), params.tensors())},
        }
    state["step"] += 1
    step = state["step"]
    bc1 = 1.0 - beta1**step
    bc2 = 1.0 - beta2**step
    with torch.no_grad():
        for name in params.names():
            g = grads.get(name)
            if g is None:
                g = torch.zeros_like(params[name])
            m = state["m"][name]
            v = state["v"][name]
            m.mul_(beta1).add_(g, alpha=1.0 - beta1)
            v.mul_(beta2).addcmul_(g, g, value=1.0 - beta2)
            params[name].addcdiv_(m / bc1, (v / bc2).sqrt() + eps, value=-lr)
    return params, state


class Adam:
    """Thin stateful wrapper around :func:`optimizer_step` for several stores."""

    def __init__(self, stores: dict[str, ParamStore], lr: float, beta1=0.9, beta2=0.999, eps=1e-8):
        self.stores = stores
        self.lr = lr
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self._states: dict[str, dict | None] = {k: None for k in stores}

    def parameters(self) -> list[torch.Tensor]:
        return [t for s in self.stores.values() for t in s.tensors()]

    def step(self, loss: torch.Tensor) -> None:
        params = self.parameters()
        grads = torch.autograd.grad(loss, params, allow_unused=True)
        it = iter(grads)
        for key, store in self.stores.items():
            gd = {name: next(it) for name in store.names()}
            _, self._states[key] = optimizer_step(
                store, gd, self._states[key], self.lr, self.beta1, self.beta2, self.eps
            )


# ---------------------------------------------------------------------------
# checkpoints


def _spec_to_dict(spec) -> dict:
    if isinstance(spec, MLPSpec):
        return {"kind": "mlp", "widths": list(spec.widths), "activation": spec.activation}
    if isinstance(spec, AttentionSpec):
        return {
            "kind": "attention",
            "width": spec.width,
            "n_heads": spec.n_heads,
            "head_width": spec.head_width,
        }
    if isinstance(spec, VelocityNetSpec):
        return {
            "kind": "velocity_net",
            "data_shape": list(spec.data_shape),
            "cond_width": spec.cond_width,
            "time_width": spec.time_width,
            "hidden": list(spec.hidden),
            "activation": spec.activation,
        }
    if spec is None:
        return {"kind": "none"}
    raise ConfigError(f"cannot serialize spec {type(spec).__name__}")


def _spec_from_dict(doc: dict):
    kind = doc["kind"]
    if kind == "mlp":
        return MLPSpec(tuple(doc["widths"]), doc["activation"])
    if kind == "attention":
        return AttentionSpec(doc["width"], doc["n_heads"], doc["head_width"])
    if kind == "velocity_net":
        return VelocityNetSpec(
            tuple(doc["data_shape"]),
            doc["cond_width"],
            doc["time_width"],
            tuple(doc["hidden"]),
            doc["activation"],
        )
    if kind == "none":
        return None
    raise ConfigError(f"unknown spec kind {kind!r}")


def save_checkpoint(path, components: dict[str, tuple[object, ParamStore]], seed: int, extra: dict | None = None) -> None:
    """Write named (spec, store) pairs to one file.

    Layout: a single-line JSON manifest {version, seed, extra, components:
    {name: {spec, names, shapes}}} terminated by a newline, followed by the
    raw little-endian float64 parameter arrays concatenated in manifest
    order.
    """
    manifest = {
        "version": CHECKPOINT_VERSION,
        "seed": int(seed),
        "extra": extra or {},
        "components": {},
    }
    blobs: list[bytes] = []
    for name, (spec, store) in components.items():
        arrays = store.to_arrays()
        manifest["components"][name] = {
            "spec": _spec_to_dict(spec),
            "names": store.names(),
            "shapes": {k: list(v.shape) for k, v in arrays.items()},
        }
        for pname in store.names():
            blobs.append(np.ascontiguousarray(arrays[pname], dtype="<f8").tobytes())
    buf = io.BytesIO()
    buf.write(json.dumps(manifest, sort_keys=True, separators=(",", ":")).encode())
    buf.write(b"\n")
    for blob in blobs:
        buf.write(blob)
    with open(path, "wb") as fh:
        fh.write(buf.getvalue())


def load_checkpoint(path, dtype: torch.dtype = DEFAULT_DTYPE):
    """Read a checkpoint; returns (components, seed, extra) where components
    maps name -> (spec, ParamStore).
    """
    with open(path, "rb") as fh:
        header = fh.readline()
        manifest = json.loads(header.decode())
        if manifest["version"] != CHECKPOINT_VERSION:
            raise ConfigError(f"unsupported checkpoint version {manifest['version']}")
        components = {}
        for name, comp in manifest["components"].items():
            spec = _spec_from_dict(comp["spec"])
            store = ParamStore(dtype)
            for pname in comp["names"]:
                shape = tuple(comp["shapes"][pname])
                count = int(np.prod(shape)) if shape else 1
                data = np.frombuffer(fh.read(count * 8), dtype="<f8").reshape(shape)
                store.add(pname, data)
            components[name] = (spec, store)
    return components, manifest["seed"], manifest.get("extra", {})
