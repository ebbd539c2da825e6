"""Angle-branched, angle-input and discrete-branched driving networks.

All three share an observation encoder (strided convolutions over the
frame-stacked raster, global average pooling, two fully connected stages) and
a speed encoder. They differ in how the navigation command enters:

* angle-branched: the subgoal angle feeds its own encoder, a single fusion
  stage mixes image, speed and angle features, and the angle's branch
  (left/straight/right) selects one of three action heads;
* angle-input: same inputs, a single action head;
* discrete-branched: no angle features; the branch id selects one of three
  fusion + action stacks.

Checkpoint layout::

    magic      8 bytes   b"SGDRCKP1"
    hdr_len    uint32    little-endian
    header     hdr_len bytes of UTF-8 JSON: version, arch, channel_mode, dims,
               seed, layers=[{name, shape, offset}] (offset counted in float64s)
    payload    all parameter arrays as little-endian float64, in layer order
"""
from __future__ import annotations

import enum
import json
import struct
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import nn
from .errors import ConfigError, FormatError, NonFiniteLossError, ShapeError
from .geometry import COMMAND_ANGLES, Branch, branch_array
from .sim import ChannelMode

CKPT_MAGIC = b"SGDRCKP1"
CKPT_VERSION = 1


class Arch(str, enum.Enum):
    ANGLE_BRANCHED = "angle-branched"
    ANGLE_INPUT = "angle-input"
    DISCRETE_BRANCHED = "discrete-branched"


@dataclass(frozen=True)
class ModelDims:
    k: int = 4
    conv_channels: tuple = (16, 32, 64, 64)
    kernel: int = 3
    stride: int = 2
    feature_dim: int = 64
    scalar_hidden: int = 13
    fusion_hidden: int = 32
    head_hidden: int = 32
    speed_scale: float = 5.0
    angle_scale: float = 180.0

    def __post_init__(self):
        object.__setattr__(self, "conv_channels", tuple(int(c) for c in self.conv_channels))
        if min(self.k, self.kernel, self.stride, self.feature_dim, self.scalar_hidden,
               self.fusion_hidden, self.head_hidden) < 1 or not self.conv_channels:
            raise ConfigError(f"invalid model dims {self}")
        if self.speed_scale <= 0 or self.angle_scale <= 0:
            raise ConfigError("input scales must be positive")


@dataclass
class ModelParameters:
    arch: Arch
    channel_mode: ChannelMode
    dims: ModelDims
    seed: int
    params: dict = field(default_factory=dict)  # name -> float64 array, insertion-ordered

    @property
    def in_channels(self) -> int:
        return self.dims.k * self.channel_mode.n_channels

    @property
    def n_heads(self) -> int:
        return 1 if self.arch is Arch.ANGLE_INPUT else 3

    @property
    def count(self) -> int:
        return int(sum(p.size for p in self.params.values()))

    def copy(self) -> "ModelParameters":
        return ModelParameters(self.arch, self.channel_mode, self.dims, self.seed,
                               {k: v.copy() for k, v in self.params.items()})

    @property
    def fusion_stages(self) -> int:
        return sum(1 for n in self.params if n.startswith("fusion") and n.endswith(".w"))

    # serialization ---------------------------------------------------------------------
    def to_bytes(self) -> bytes:
        layers, offset = [], 0
        for name, arr in self.params.items():
            layers.append({"name": name, "shape": list(arr.shape), "offset": offset})
            offset += arr.size
        header = {"version": CKPT_VERSION, "arch": self.arch.value, "channel_mode": self.channel_mode.value,
                  "dims": asdict(self.dims), "seed": self.seed, "layers": layers}
        hdr = json.dumps(header, sort_keys=True).encode("utf-8")
        payload = b"".join(np.ascontiguousarray(a, dtype="<f8").tobytes() for a in self.params.values())
        return CKPT_MAGIC + struct.pack("<I", len(hdr)) + hdr + payload

    def save(self, path) -> int:
        data = self.to_bytes()
        path = Path(path)
        tmp = path.with_suffix(path.suffix + ".tmp")
        tmp.write_bytes(data)
        tmp.replace(path)
        return len(data)

    @classmethod
    def from_bytes(cls, data: bytes) -> "ModelParameters":
        if data[:8] != CKPT_MAGIC:
            raise FormatError("not a checkpoint (bad magic)")
        (n,) = struct.unpack("<I", data[8:12])
        header = json.loads(data[12:12 + n].decode("utf-8"))
        if header.get("version") != CKPT_VERSION:
            raise FormatError(f"unsupported checkpoint version {header.get('version')}")
        payload = np.frombuffer(data, dtype="<f8", offset=12 + n)
        params = {}
        for layer in header["layers"]:
            size = int(np.prod(layer["shape"])) if layer["shape"] else 1
            arr = payload[layer["offset"]:layer["offset"] + size]
            if arr.size != size:
                raise FormatError(f"checkpoint truncated in layer {layer['name']}")
            params[layer["name"]] = arr.reshape(layer["shape"]).astype(np.float64)
        dims = ModelDims(**header["dims"])
        return cls(Arch(header["arch"]), ChannelMode(header["channel_mode"]), dims, int(header["seed"]), params)

    @classmethod
    def load(cls, path) -> "ModelParameters":
        return cls.from_bytes(Path(path).read_bytes())


def build_model(arch, channel_mode, dims: ModelDims | None = None, seed: int = 0) -> ModelParameters:
    """Xavier-uniform weights from ``seed``; zero biases."""
    arch, channel_mode = Arch(arch), ChannelMode(channel_mode)
    dims = dims or ModelDims()
    rng = np.random.default_rng(seed)
    m = ModelParameters(arch, channel_mode, dims, int(seed))
    p = m.params
    kk = dims.kernel
    c_in = m.in_channels
    for i, c_out in enumerate(dims.conv_channels):
        p[f"conv{i + 1}.w"] = nn.xavier_uniform(rng, (c_out, c_in, kk, kk), c_in * kk * kk, c_out * kk * kk)
        p[f"conv{i + 1}.b"] = np.zeros(c_out)
        c_in = c_out

    def dense(name, n_in, n_out):
        p[f"{name}.w"] = nn.xavier_uniform(rng, (n_in, n_out), n_in, n_out)
        p[f"{name}.b"] = np.zeros(n_out)

    E = dims.feature_dim
    dense("img_fc1", c_in, E)
    dense("img_fc2", E, E)
    dense("spd_fc1", 1, dims.scalar_hidden)
    dense("spd_fc2", dims.scalar_hidden, E)
    if arch is Arch.DISCRETE_BRANCHED:
        for b in range(3):
            dense(f"fusion{b}", 2 * E, dims.fusion_hidden)
    else:
        dense("ang_fc1", 1, dims.scalar_hidden)
        dense("ang_fc2", dims.scalar_hidden, E)
        dense("fusion", 3 * E, dims.fusion_hidden)
    for b in range(m.n_heads):
        dense(f"head{b}_fc1", dims.fusion_hidden, dims.head_hidden)
        dense(f"head{b}_fc2", dims.head_hidden, 3)
    return m


@dataclass
class NetworkOutput:
    steer: np.ndarray  # (B,) in (-1, 1)
    throttle_logits: np.ndarray  # (B, 2)
    head: np.ndarray  # (B,) index of the action head used

    @property
    def throttle(self) -> np.ndarray:
        return np.argmax(self.throttle_logits, axis=1)


def command_input(model: ModelParameters, angles_deg, commands) -> np.ndarray:
    """Second network input: the subgoal angle, or for the discrete-branched
    baseline the route command encoded as -90 / 0 / +90."""
    if model.arch is Arch.DISCRETE_BRANCHED:
        return COMMAND_ANGLES[np.asarray(commands, dtype=np.int64)]
    return np.asarray(angles_deg, dtype=float)


def head_index(model: ModelParameters, angles_deg) -> np.ndarray:
    if model.arch is Arch.ANGLE_INPUT:
        return np.zeros(len(np.atleast_1d(angles_deg)), dtype=np.int64)
    return branch_array(np.atleast_1d(angles_deg))


def _mlp2(p, name1, name2, x, cache, key):
    z1 = nn.linear(x, p[f"{name1}.w"], p[f"{name1}.b"])
    a1 = nn.relu(z1)
    z2 = nn.linear(a1, p[f"{name2}.w"], p[f"{name2}.b"])
    a2 = nn.relu(z2)
    cache[key] = (x, z1, a1, z2)
    return a2


def _mlp2_backward(p, name1, name2, da2, cache, key, grads, need_dx=True):
    x, z1, a1, z2 = cache[key]
    dz2 = da2 * (z2 > 0)
    da1, grads[f"{name2}.w"], grads[f"{name2}.b"] = nn.linear_backward(dz2, a1, p[f"{name2}.w"])
    dz1 = da1 * (z1 > 0)
    dx, grads[f"{name1}.w"], grads[f"{name1}.b"] = nn.linear_backward(dz1, x, p[f"{name1}.w"])
    return dx


def _check_inputs(model, obs, speed, angle):
    obs = np.asarray(obs, dtype=np.float64)
    if obs.ndim == 3:
        obs = obs[None]
    if obs.ndim == 5:  # (B, k, C, H, W)
        obs = obs.reshape(obs.shape[0], -1, *obs.shape[3:])
    if obs.ndim != 4 or obs.shape[1] != model.in_channels:
        raise ShapeError(f"observation shape {obs.shape} does not match {model.in_channels} input channels "
                         f"(k={model.dims.k}, mode={model.channel_mode.value})")
    B = obs.shape[0]
    speed = np.asarray(speed, dtype=np.float64).reshape(-1)
    angle = np.asarray(angle, dtype=np.float64).reshape(-1)
    if speed.size != B or angle.size != B:
        raise ShapeError("speed/angle batch size does not match observations")
    return obs, speed, angle


def forward(model: ModelParameters, obs, speed, angle, return_cache: bool = False):
    """Batched forward pass. ``obs`` is ``(B, k*C, H, W)`` (or ``(B, k, C, H, W)``)."""
    obs, speed, angle = _check_inputs(model, obs, speed, angle)
    p, d = model.params, model.dims
    cache: dict = {}
    x = obs
    n_conv = len(d.conv_channels)
    pad = d.kernel // 2
    for i in range(n_conv):
        z, c = nn.conv2d_forward(x, p[f"conv{i + 1}.w"], p[f"conv{i + 1}.b"], d.stride, pad)
        cache[f"conv{i + 1}"] = (c, z)
        x = nn.relu(z)
    cache["gap_shape"] = x.shape
    g = x.mean(axis=(2, 3))
    f_img = _mlp2(p, "img_fc1", "img_fc2", g, cache, "img")
    f_spd = _mlp2(p, "spd_fc1", "spd_fc2", (speed / d.speed_scale)[:, None], cache, "spd")
    heads = head_index(model, angle)
    B = obs.shape[0]
    out = np.zeros((B, 3))
    if model.arch is Arch.DISCRETE_BRANCHED:
        feat = np.concatenate([f_img, f_spd], axis=1)
        cache["feat"] = feat
        for b in range(3):
            idx = np.flatnonzero(heads == b)
            if len(idx) == 0:
                continue
            zf = nn.linear(feat[idx], p[f"fusion{b}.w"], p[f"fusion{b}.b"])
            hf = nn.relu(zf)
            cache[f"fusion{b}"] = (idx, zf)
            out[idx] = _head(p, b, hf, cache)
    else:
        f_ang = _mlp2(p, "ang_fc1", "ang_fc2", (angle / d.angle_scale)[:, None], cache, "ang")
        feat = np.concatenate([f_img, f_spd, f_ang], axis=1)
        zf = nn.linear(feat, p["fusion.w"], p["fusion.b"])
        hf = nn.relu(zf)
        cache["feat"] = feat
        cache["fusion"] = zf
        for b in range(model.n_heads):
            idx = np.flatnonzero(heads == b)
            if len(idx) == 0:
                continue
            cache[f"route{b}"] = idx
            out[idx] = _head(p, b, hf[idx], cache)
    result = NetworkOutput(np.tanh(out[:, 0]), out[:, 1:3].copy(), heads)
    if return_cache:
        cache["out"] = out
        return result, cache
    return result


def _head(p, b, h, cache):
    z1 = nn.linear(h, p[f"head{b}_fc1.w"], p[f"head{b}_fc1.b"])
    a1 = nn.relu(z1)
    z2 = nn.linear(a1, p[f"head{b}_fc2.w"], p[f"head{b}_fc2.b"])
    cache[f"head{b}"] = (h, z1, a1)
    return z2


def _head_backward(p, b, dz2, cache, grads):
    h, z1, a1 = cache[f"head{b}"]
    da1, grads[f"head{b}_fc2.w"], grads[f"head{b}_fc2.b"] = nn.linear_backward(dz2, a1, p[f"head{b}_fc2.w"])
    dz1 = da1 * (z1 > 0)
    dh, grads[f"head{b}_fc1.w"], grads[f"head{b}_fc1.b"] = nn.linear_backward(dz1, h, p[f"head{b}_fc1.w"])
    return dh


@dataclass(frozen=True)
class LossValue:
    total: float
    steer: float
    throttle: float


def loss_terms(steer_pred, logits, steer_true, throttle_true, weights, lam: float):
    """Per-sample squared steer error and weighted throttle cross-entropy."""
    steer_true = np.asarray(steer_true, dtype=np.float64)
    th = np.asarray(throttle_true, dtype=np.int64)
    w = np.asarray(weights, dtype=np.float64)
    se = (steer_pred - steer_true) ** 2
    lsm = nn.log_softmax(logits)
    ce = -lsm[np.arange(len(th)), th] * w
    return se, ce, lsm


def compute_loss(output: NetworkOutput, steer_true, throttle_true, weights=None, lam: float = 0.5) -> LossValue:
    """``(1 - lam) * MSE(steer) + lam * weighted CE(throttle)``, each averaged over the batch."""
    weights = np.ones(len(output.steer)) if weights is None else weights
    se, ce, _ = loss_terms(output.steer, output.throttle_logits, steer_true, throttle_true, weights, lam)
    s, t = float(se.mean()), float(ce.mean())
    return LossValue((1.0 - lam) * s + lam * t, s, t)


def backward(model: ModelParameters, obs, speed, angle, steer_true, throttle_true, weights=None,
             lam: float = 0.5):
    """Return ``(LossValue, grads)`` with exact gradients of the batch-mean loss.

    Parameters of action heads (and, for the discrete baseline, fusion stages)
    that no sample in the batch routes through get exactly zero gradient.
    """
    output, cache = forward(model, obs, speed, angle, return_cache=True)
    B = len(output.steer)
    weights = np.ones(B) if weights is None else np.asarray(weights, dtype=np.float64)
    se, ce, lsm = loss_terms(output.steer, output.throttle_logits, steer_true, throttle_true, weights, lam)
    per = (1.0 - lam) * se + lam * ce
    bad = np.flatnonzero(~np.isfinite(per))
    if len(bad):
        raise NonFiniteLossError(f"non-finite loss at sample {int(bad[0])}", int(bad[0]))
    loss = LossValue(float(per.mean()), float(se.mean()), float(ce.mean()))

    p, d = model.params, model.dims
    grads = {name: np.zeros_like(v) for name, v in p.items()}
    dout = np.zeros((B, 3))
    s = output.steer
    dout[:, 0] = (1.0 - lam) * 2.0 * (s - np.asarray(steer_true)) * (1.0 - s * s) / B
    prob = np.exp(lsm)
    onehot = np.zeros_like(prob)
    onehot[np.arange(B), np.asarray(throttle_true, dtype=np.int64)] = 1.0
    dout[:, 1:3] = lam * weights[:, None] * (prob - onehot) / B

    E = d.feature_dim
    if model.arch is Arch.DISCRETE_BRANCHED:
        dfeat = np.zeros_like(cache["feat"])
        for b in range(3):
            if f"fusion{b}" not in cache:
                continue
            idx, zf = cache[f"fusion{b}"]
            dh = _head_backward(p, b, dout[idx], cache, grads)
            dzf = dh * (zf > 0)
            dx, grads[f"fusion{b}.w"], grads[f"fusion{b}.b"] = nn.linear_backward(dzf, cache["feat"][idx], p[f"fusion{b}.w"])
            dfeat[idx] += dx
        df_img, df_spd = dfeat[:, :E], dfeat[:, E:]
    else:
        dhf = np.zeros((B, d.fusion_hidden))
        for b in range(model.n_heads):
            if f"route{b}" not in cache:
                continue
            idx = cache[f"route{b}"]
            dhf[idx] = _head_backward(p, b, dout[idx], cache, grads)
        dzf = dhf * (cache["fusion"] > 0)
        dfeat, grads["fusion.w"], grads["fusion.b"] = nn.linear_backward(dzf, cache["feat"], p["fusion.w"])
        df_img, df_spd, df_ang = dfeat[:, :E], dfeat[:, E:2 * E], dfeat[:, 2 * E:]
        _mlp2_backward(p, "ang_fc1", "ang_fc2", df_ang, cache, "ang", grads)
    _mlp2_backward(p, "spd_fc1", "spd_fc2", df_spd, cache, "spd", grads)
    dg = _mlp2_backward(p, "img_fc1", "img_fc2", df_img, cache, "img", grads)
    Bx, Cx, Hx, Wx = cache["gap_shape"]
    dx = np.broadcast_to(dg[:, :, None, None] / (Hx * Wx), cache["gap_shape"])
    pad = d.kernel // 2
    for i in reversed(range(len(d.conv_channels))):
        c, z = cache[f"conv{i + 1}"]
        dz = dx * (z > 0)
        dx, grads[f"conv{i + 1}.w"], grads[f"conv{i + 1}.b"] = nn.conv2d_backward(
            dz, p[f"conv{i + 1}.w"], c, d.stride, pad, need_dx=i > 0)
    return loss, grads


def model_size_mb(model: ModelParameters) -> float:
    return len(model.to_bytes()) / 1e6


__all__ = ["Arch", "Branch", "LossValue", "ModelDims", "ModelParameters", "NetworkOutput", "backward",
           "build_model", "compute_loss", "forward", "head_index", "model_size_mb"]
