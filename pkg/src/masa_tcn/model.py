"""MASA-TCN: multi-anchor space-aware temporal convolutional network.

Tensor layout throughout is ``(batch, channels, height, time)``. The input
``(batch, C*f, t)`` is viewed as a one-channel image of height ``C*f``; the
context kernels stride over it one electrode (``f`` rows) at a time.
"""
from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field
from typing import NamedTuple, Optional

import numpy as np

from .numeric import (Tensor, concat, conv2d, dropout, dumps_weights, linear, loads_weights, make_rng,
                      prelu, weight_norm)

FUSION_MODES = ("attentive", "concat", "mean")
SPATIAL_ORDERS = ("early", "late")
HEADS = ("regression", "classification")


class ModelConfigError(ValueError):
    pass


@dataclass(frozen=True)
class ModelConfig:
    num_channels: int = 32
    num_bands: int = 6
    anchor_lengths: tuple = (3, 5, 15)
    width: int = 64
    num_tcn_blocks: int = 1
    tcn_kernel_len: int = 3
    sat_dilation: int = 2
    fusion_mode: str = "attentive"
    spatial_order: str = "early"
    head: str = "regression"
    num_classes: int = 2
    mean_fusion_head: bool = True
    dropout_rate: float = 0.15

    def __post_init__(self):
        object.__setattr__(self, "anchor_lengths", tuple(int(k) for k in self.anchor_lengths))
        for name in ("num_channels", "num_bands", "width", "tcn_kernel_len", "sat_dilation"):
            if getattr(self, name) < 1:
                raise ModelConfigError(f"{name} must be positive")
        if not self.anchor_lengths or min(self.anchor_lengths) < 1:
            raise ModelConfigError("anchor_lengths must be a non-empty list of positive ints")
        if self.num_tcn_blocks < 0:
            raise ModelConfigError("num_tcn_blocks must be >= 0")
        if self.fusion_mode not in FUSION_MODES:
            raise ModelConfigError(f"fusion_mode must be one of {FUSION_MODES}")
        if self.spatial_order not in SPATIAL_ORDERS:
            raise ModelConfigError(f"spatial_order must be one of {SPATIAL_ORDERS}")
        if self.head not in HEADS:
            raise ModelConfigError(f"head must be one of {HEADS}")
        if self.head == "classification" and self.num_classes < 2:
            raise ModelConfigError("classification needs num_classes >= 2")
        if not 0.0 <= self.dropout_rate < 1.0:
            raise ModelConfigError("dropout_rate must be in [0, 1)")

    @property
    def feature_dim(self) -> int:
        return self.num_channels * self.num_bands

    @property
    def depth(self) -> int:
        """Layer count as used in depth ablations: SAT counts 2, each TCN block 2."""
        return 2 + 2 * self.num_tcn_blocks

    @property
    def fused_channels(self) -> int:
        if self.fusion_mode == "concat":
            return len(self.anchor_lengths) * self.width
        return self.width

    @property
    def embedding_channels(self) -> int:
        if self.num_tcn_blocks or self.spatial_order == "late":
            return self.width
        return self.fused_channels

    @property
    def out_dim(self) -> int:
        return 1 if self.head == "regression" else self.num_classes

    def block_dilation(self, i: int) -> int:
        """Dilation of TCN block ``i`` (1-based): doubling onward from the SAT's."""
        return self.sat_dilation * 2 ** i

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d["anchor_lengths"] = list(self.anchor_lengths)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        names = {f.name for f in dataclasses.fields(cls)}
        return cls(**{k: v for k, v in d.items() if k in names})

    @classmethod
    def for_depth(cls, depth: int, **kw) -> "ModelConfig":
        if depth < 2 or depth % 2:
            raise ModelConfigError("depth must be an even number >= 2")
        return cls(num_tcn_blocks=(depth - 2) // 2, **kw)


def param_shapes(cfg: ModelConfig) -> dict:
    """Registry of parameter names and shapes, in serialization order."""
    s, C, f = cfg.width, cfg.num_channels, cfg.num_bands
    shapes = {}
    for i, k in enumerate(cfg.anchor_lengths):
        shapes[f"maaf.anchor{i}.context"] = (s, 1, f, k)
        if cfg.spatial_order == "early":
            shapes[f"maaf.anchor{i}.spatial"] = (s, s, C, 1)
    if cfg.fusion_mode == "attentive":
        shapes["maaf.fusion"] = (s, len(cfg.anchor_lengths) * s, 1, 1)
    ch = cfg.fused_channels
    kt = cfg.tcn_kernel_len
    for j in range(1, cfg.num_tcn_blocks + 1):
        p = f"tcn{j}"
        shapes[f"{p}.conv1.direction"] = (s, ch, 1, kt)
        shapes[f"{p}.conv1.gain"] = (s,)
        shapes[f"{p}.prelu1"] = (s,)
        shapes[f"{p}.conv2.direction"] = (s, s, 1, kt)
        shapes[f"{p}.conv2.gain"] = (s,)
        shapes[f"{p}.prelu2"] = (s,)
        if ch != s:
            shapes[f"{p}.residual"] = (s, ch, 1, 1)
        shapes[f"{p}.prelu_out"] = (s,)
        ch = s
    if cfg.spatial_order == "late":
        shapes["late.spatial"] = (s, ch, C, 1)
        ch = s
    shapes["head.weight"] = (cfg.out_dim, ch)
    shapes["head.bias"] = (cfg.out_dim,)
    return shapes


def expected_param_count(cfg: ModelConfig) -> int:
    """Closed-form parameter count, independent of the registry walk above."""
    s, C, f, A = cfg.width, cfg.num_channels, cfg.num_bands, len(cfg.anchor_lengths)
    m, kt = cfg.num_tcn_blocks, cfg.tcn_kernel_len
    n = s * f * sum(cfg.anchor_lengths)
    if cfg.spatial_order == "early":
        n += A * s * s * C
    if cfg.fusion_mode == "attentive":
        n += A * s * s
    fused = A * s if cfg.fusion_mode == "concat" else s
    if m:
        # first block sees `fused` inputs, the rest see s
        n += s * fused * kt + (m - 1) * s * s * kt      # conv1 directions
        n += m * s * s * kt                             # conv2 directions
        n += m * 2 * s + m * 3 * s                      # gains + prelu slopes
        n += s * fused if fused != s else 0             # residual projection
    last = s if m else fused
    if cfg.spatial_order == "late":
        n += s * last * C
        last = s
    return n + cfg.out_dim * last + cfg.out_dim


def init_params(cfg: ModelConfig, seed: int = 0) -> dict:
    """Uniform(+-1/sqrt(fan_in)) kernels, gains = direction norms, PReLU 0.25, zero bias."""
    rng = make_rng(seed, 0x1417)
    params = {}
    for name, shape in param_shapes(cfg).items():
        if name.endswith(".gain"):
            direction = params[name[: -len("gain")] + "direction"].data
            val = np.sqrt((direction.reshape(shape[0], -1) ** 2).sum(axis=1))
        elif ".prelu" in name:
            val = np.full(shape, 0.25)
        elif name == "head.bias":
            val = np.zeros(shape)
        else:
            fan_in = int(np.prod(shape[1:]))
            bound = 1.0 / np.sqrt(fan_in)
            val = rng.uniform(-bound, bound, size=shape)
        params[name] = Tensor(val, requires_grad=True, name=name)
    return params


def _as_batch(x) -> tuple[Tensor, bool]:
    x = x if isinstance(x, Tensor) else Tensor(x)
    if x.ndim == 2:
        return x.reshape(1, 1, *x.shape), True
    if x.ndim == 3:
        return x.reshape(x.shape[0], 1, x.shape[1], x.shape[2]), False
    if x.ndim == 4 and x.shape[1] == 1:
        return x, False
    raise ValueError(f"expected input (C*f, t) or (B, C*f, t), got {x.shape}")


def context_forward(x4: Tensor, context: Tensor, num_bands: int, dilation: int) -> Tensor:
    """Per-electrode spectral-temporal kernels: ``(B,1,C*f,t) -> (B,s,C,t)``."""
    k = context.shape[-1]
    return conv2d(x4, context, stride=(num_bands, 1), dilation=(1, dilation),
                  left_pad_w=(k - 1) * dilation)


def sat_forward(x, context: Tensor, spatial: Tensor, num_bands: int, dilation: int = 2) -> Tensor:
    """Space-aware temporal layer: context kernels then (C, 1) spatial fusion.

    Returns ``(B, s, 1, t)``.
    """
    x4, _ = _as_batch(x)
    C = spatial.shape[2]
    if x4.shape[2] != C * num_bands:
        raise ValueError(f"feature axis is {x4.shape[2]}, expected C*f = {C}*{num_bands}")
    return conv2d(context_forward(x4, context, num_bands, dilation), spatial)


def fuse(branches: list, mode: str, fusion: Optional[Tensor] = None) -> Tensor:
    if mode == "mean":
        out = branches[0]
        for b in branches[1:]:
            out = out + b
        return out * (1.0 / len(branches))
    cat = concat(branches, axis=1)
    if mode == "concat":
        return cat
    return conv2d(cat, fusion)


def maaf_forward(x, params: dict, cfg: ModelConfig) -> Tensor:
    """Parallel anchors, concatenated on the kernel axis and fused.

    Early spatial order gives ``(B, s', 1, t)``; late keeps the electrode axis,
    ``(B, s', C, t)``. ``s'`` is ``s`` except for concat fusion.
    """
    x4, _ = _as_batch(x)
    if x4.shape[2] != cfg.feature_dim:
        raise ValueError(f"feature axis is {x4.shape[2]}, expected C*f = {cfg.feature_dim}")
    branches = []
    for i in range(len(cfg.anchor_lengths)):
        h = context_forward(x4, params[f"maaf.anchor{i}.context"], cfg.num_bands, cfg.sat_dilation)
        if cfg.spatial_order == "early":
            h = conv2d(h, params[f"maaf.anchor{i}.spatial"])
        branches.append(h)
    return fuse(branches, cfg.fusion_mode, params.get("maaf.fusion"))


def causal_conv(h: Tensor, kernel: Tensor, d: int) -> Tensor:
    return conv2d(h, kernel, dilation=(1, d), left_pad_w=(kernel.shape[-1] - 1) * d)


def tcn_block_forward(h: Tensor, params: dict, prefix: str, d: int, dropout_rate: float = 0.0,
                      training: bool = False, rng=None) -> Tensor:
    """Residual block: two weight-normalised causal convs, PReLU, dropout, skip."""
    out = causal_conv(h, weight_norm(params[f"{prefix}.conv1.direction"], params[f"{prefix}.conv1.gain"]), d)
    out = dropout(prelu(out, params[f"{prefix}.prelu1"]), dropout_rate, rng, training)
    out = causal_conv(out, weight_norm(params[f"{prefix}.conv2.direction"], params[f"{prefix}.conv2.gain"]), d)
    out = dropout(prelu(out, params[f"{prefix}.prelu2"]), dropout_rate, rng, training)
    res = params.get(f"{prefix}.residual")
    skip = h if res is None else conv2d(h, res)
    return prelu(out + skip, params[f"{prefix}.prelu_out"])


def forward(x, params: dict, cfg: ModelConfig, training: bool = False, rng=None) -> Tensor:
    """Embeddings ``H^m`` of shape ``(B, ch, 1, t)`` (``(ch, 1, t)`` for an unbatched input)."""
    x4, single = _as_batch(x)
    if training and cfg.dropout_rate > 0 and rng is None:
        raise ValueError("training-mode forward needs an rng for dropout")
    h = maaf_forward(x4, params, cfg)
    h = dropout(h, cfg.dropout_rate, rng, training)
    for j in range(1, cfg.num_tcn_blocks + 1):
        h = tcn_block_forward(h, params, f"tcn{j}", cfg.block_dilation(j), cfg.dropout_rate, training, rng)
    if cfg.spatial_order == "late":
        h = conv2d(h, params["late.spatial"])
    if single:
        h = h.reshape(h.shape[1:])
    return h


def _per_step(H: Tensor) -> Tensor:
    if H.ndim == 3:
        H = H.reshape(1, *H.shape)
    B, ch, one, t = H.shape
    return H.reshape(B, ch, t).transpose(0, 2, 1)


def regression_head(H: Tensor, W: Tensor, b: Tensor) -> Tensor:
    """Shared projection of each time step's embedding to a scalar: ``(B, t)``."""
    y = linear(_per_step(H), W, b)
    return y.reshape(y.shape[0], y.shape[1])


def classification_head(H: Tensor, W: Tensor, b: Tensor, mean_fusion: bool = True) -> Tensor:
    """Per-step logits averaged over time, or the last step's logits only."""
    z = linear(_per_step(H), W, b)
    if mean_fusion:
        return z.mean(axis=1)
    return z[:, -1, :]


class MasaTCN:
    """Config + parameters, callable on ``(B, C*f, t)`` inputs."""

    def __init__(self, cfg: ModelConfig, params: Optional[dict] = None, seed: int = 0):
        self.cfg = cfg
        self.params = params if params is not None else init_params(cfg, seed)
        shapes = param_shapes(cfg)
        if list(self.params) != list(shapes):
            raise ModelConfigError("parameter registry does not match config")
        for name, shape in shapes.items():
            if self.params[name].shape != tuple(shape):
                raise ModelConfigError(f"{name}: shape {self.params[name].shape}, expected {shape}")

    def embed(self, x, training: bool = False, rng=None) -> Tensor:
        return forward(x, self.params, self.cfg, training, rng)

    def __call__(self, x, training: bool = False, rng=None) -> Tensor:
        x4, single = _as_batch(x)
        H = self.embed(x4, training, rng)
        W, b = self.params["head.weight"], self.params["head.bias"]
        if self.cfg.head == "regression":
            out = regression_head(H, W, b)
        else:
            out = classification_head(H, W, b, self.cfg.mean_fusion_head)
        if single:
            out = out.reshape(out.shape[1:])
        return out

    def predict(self, x) -> np.ndarray:
        return self(x).data

    @property
    def num_params(self) -> int:
        return sum(p.size for p in self.params.values())

    def state(self) -> dict:
        return {k: p.data.copy() for k, p in self.params.items()}

    def load_state(self, state: dict) -> None:
        for k, p in self.params.items():
            p.data = np.array(state[k], dtype=np.float64)

    def to_bytes(self) -> bytes:
        return dumps_weights(self.state(), {"model": self.cfg.to_dict()})

    @classmethod
    def from_bytes(cls, blob: bytes) -> "MasaTCN":
        manifest, state = loads_weights(blob)
        cfg = ModelConfig.from_dict(manifest["config"]["model"])
        params = {k: Tensor(v, requires_grad=True, name=k) for k, v in state.items()}
        return cls(cfg, params)


# ---------------------------------------------------------------- receptive field

class ReceptiveField(NamedTuple):
    analytic: int
    closed_form: int

    @property
    def delta(self) -> int:
        return self.analytic - self.closed_form


def closed_form_receptive_field(k: int, m: int) -> int:
    """Closed form ``1 + (k - 1)(2^(m+2) - 3)``; ignores the anchor front end."""
    return 1 + (k - 1) * (2 ** (m + 2) - 3)


def receptive_field(cfg: ModelConfig) -> ReceptiveField:
    """Per-layer sum ``1 + sum (k - 1) * d`` over the longest causal path.

    The MAAF stage contributes its longest anchor; each TCN block contributes
    two convolutions. The spatial and 1x1 layers have temporal width 1.
    """
    rf = 1 + (max(cfg.anchor_lengths) - 1) * cfg.sat_dilation
    for j in range(1, cfg.num_tcn_blocks + 1):
        rf += 2 * (cfg.tcn_kernel_len - 1) * cfg.block_dilation(j)
    return ReceptiveField(rf, closed_form_receptive_field(cfg.tcn_kernel_len, cfg.num_tcn_blocks))


class ProbeResult(NamedTuple):
    field: int
    lower_bound: bool


def _probe_once(model: MasaTCN, length: int, seed: int) -> int:
    rng = make_rng(seed, 0xF1E1D, length)
    base = rng.uniform(0.0, 1.0, size=(1, model.cfg.feature_dim, length))
    ref = model.embed(base).data[..., -1].copy()
    for lag in range(length - 1, -1, -1):
        probe = base.copy()
        probe[0, :, length - 1 - lag] += 1.0
        if not np.array_equal(model.embed(probe).data[..., -1], ref):
            return lag + 1
    return 0


def empirical_receptive_field(model: MasaTCN, length: int = 16, seed: int = 0,
                              max_length: Optional[int] = None) -> ProbeResult:
    """Largest input lag that changes the last output column, plus one.

    Each pass perturbs input columns from the far past toward the present and
    compares the last output bitwise. Dilated taps leave gaps in the influence
    pattern, so the input doubles until the field fits in half of it; if
    ``max_length`` (default 1024, or ``length`` when given alone) stops the
    growth first, the result is only a lower bound.
    """
    if max_length is None:
        max_length = max(length, 1024)
    while True:
        field = _probe_once(model, length, seed)
        if 2 * field <= length:
            return ProbeResult(field, False)
        if length >= max_length:
            return ProbeResult(field, True)
        length = min(2 * length, max_length)