"""Conditional U-Net velocity field.

Layout: multi-scale stem -> encoder levels of SE residual blocks with
pixel-unshuffle downsampling -> bottleneck (res block, transformer, res block)
-> decoder with pixel-shuffle upsampling and skip concatenation -> GroupNorm /
SiLU / 3x3 head. Every residual block is conditioned on a sinusoidal time
embedding passed through a two-layer MLP.
"""

from __future__ import annotations

import json
import math
import struct
from collections import OrderedDict
from pathlib import Path

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .config import NetworkConfig

STEM_KERNELS = (1, 3, 7, 15)
CKPT_MAGIC = b"IQTCFMCK"
CKPT_VERSION = 1


# --------------------------------------------------------------------------
# resampling primitives


def _as_tensor(x):
    return (torch.from_numpy(np.ascontiguousarray(x)), True) if isinstance(x, np.ndarray) else (x, False)


def pixel_unshuffle(x, r: int = 2):
    """Space-to-depth: ``(C, H, W) -> (C*r*r, H/r, W/r)`` (batched input allowed).

    Output channel ``c*r*r + dy*r + dx`` holds the pixels at offset
    ``(dy, dx)`` inside each ``r x r`` block of input channel ``c``.
    """
    t, was_np = _as_tensor(x)
    *lead, c, h, w = t.shape
    if h % r or w % r:
        raise ValueError(f"pixel_unshuffle needs H, W divisible by {r}, got {h}x{w}")
    out = t.reshape(*lead, c, h // r, r, w // r, r)
    n = len(lead)
    out = out.permute(*range(n), n, n + 2, n + 4, n + 1, n + 3)
    out = out.reshape(*lead, c * r * r, h // r, w // r)
    return out.numpy().copy() if was_np else out


def pixel_shuffle(x, r: int = 2):
    """Depth-to-space, the exact inverse of :func:`pixel_unshuffle`."""
    t, was_np = _as_tensor(x)
    *lead, c, h, w = t.shape
    if c % (r * r):
        raise ValueError(f"pixel_shuffle needs channels divisible by {r * r}, got {c}")
    n = len(lead)
    out = t.reshape(*lead, c // (r * r), r, r, h, w)
    out = out.permute(*range(n), n, n + 3, n + 1, n + 4, n + 2)
    out = out.reshape(*lead, c // (r * r), h * r, w * r)
    return out.numpy().copy() if was_np else out


# --------------------------------------------------------------------------
# building blocks


def sinusoidal_features(t, dim: int) -> torch.Tensor:
    """``[sin(t*w_i), cos(t*w_i)]`` with ``dim/2`` frequencies log-spaced on [1, 1e4]."""
    if dim % 2:
        raise ValueError("time embedding dim must be even")
    t = torch.as_tensor(t, dtype=torch.float32).reshape(-1, 1)
    half = dim // 2
    if half == 1:
        freqs = torch.ones(1)
    else:
        freqs = torch.exp(torch.arange(half, dtype=torch.float64) * (math.log(1e4) / (half - 1))).float()
    freqs = freqs.to(t.dtype)
    arg = t * freqs[None]
    return torch.cat([torch.sin(arg), torch.cos(arg)], dim=1)


class TimeEmbedding(nn.Module):
    def __init__(self, dim: int):
        super().__init__()
        self.dim = dim
        self.fc1 = nn.Linear(dim, dim)
        self.fc2 = nn.Linear(dim, dim)

    def forward(self, t):
        h = sinusoidal_features(t, self.dim).to(self.fc1.weight.dtype)
        return self.fc2(F.silu(self.fc1(h)))


class MultiScaleStem(nn.Module):
    def __init__(self, in_channels: int, branch_channels: int):
        super().__init__()
        self.branches = nn.ModuleList(
            nn.Conv2d(in_channels, branch_channels, k, padding=k // 2) for k in STEM_KERNELS
        )

    def forward(self, x):
        return torch.cat([b(x) for b in self.branches], dim=1)


class SEModule(nn.Module):
    """Squeeze-and-excitation channel gate."""

    def __init__(self, channels: int, reduction: int):
        super().__init__()
        hidden = max(1, channels // reduction)
        self.fc1 = nn.Linear(channels, hidden)
        self.fc2 = nn.Linear(hidden, channels)

    def gates(self, x):
        s = x.mean(dim=(-2, -1))
        return torch.sigmoid(self.fc2(F.silu(self.fc1(s))))

    def forward(self, x):
        return x * self.gates(x)[..., None, None]


class ResBlock(nn.Module):
    def __init__(self, in_ch: int, out_ch: int, temb_dim: int, groups: int, se_reduction: int):
        super().__init__()
        self.conv1 = nn.Conv2d(in_ch, out_ch, 3, padding=1)
        self.norm1 = nn.GroupNorm(groups, out_ch)
        self.temb = nn.Linear(temb_dim, out_ch)
        self.conv2 = nn.Conv2d(out_ch, out_ch, 3, padding=1)
        self.norm2 = nn.GroupNorm(groups, out_ch)
        self.se = SEModule(out_ch, se_reduction)
        self.shortcut = nn.Conv2d(in_ch, out_ch, 1) if in_ch != out_ch else nn.Identity()

    def forward(self, x, temb):
        h = F.silu(self.norm1(self.conv1(x)))
        h = h + self.temb(F.silu(temb))[:, :, None, None]
        h = F.silu(self.norm2(self.conv2(h)))
        return self.shortcut(x) + self.se(h)


class Downsample(nn.Module):
    def __init__(self, in_ch: int, out_ch: int):
        super().__init__()
        self.proj = nn.Conv2d(4 * in_ch, out_ch, 1)

    def forward(self, x):
        return self.proj(pixel_unshuffle(x))


class Upsample(nn.Module):
    def __init__(self, in_ch: int, out_ch: int):
        super().__init__()
        self.proj = nn.Conv2d(in_ch, 4 * out_ch, 1)

    def forward(self, x):
        return pixel_shuffle(self.proj(x))


class SelfAttention(nn.Module):
    def __init__(self, dim: int, heads: int):
        super().__init__()
        if dim % heads:
            raise ValueError("attention dim must be divisible by heads")
        self.heads = heads
        self.qkv = nn.Linear(dim, 3 * dim)
        self.out = nn.Linear(dim, dim)

    def weights_and_values(self, x):
        b, n, d = x.shape
        q, k, v = self.qkv(x).reshape(b, n, 3, self.heads, d // self.heads).permute(2, 0, 3, 1, 4)
        att = torch.softmax(q @ k.transpose(-2, -1) / math.sqrt(d // self.heads), dim=-1)
        return att, v

    def forward(self, x):
        b, n, d = x.shape
        att, v = self.weights_and_values(x)
        y = (att @ v).transpose(1, 2).reshape(b, n, d)
        return self.out(y)


class BottleneckTransformer(nn.Module):
    """Pre-norm transformer layer over spatial positions, no positional encoding."""

    def __init__(self, dim: int, heads: int):
        super().__init__()
        self.norm1 = nn.LayerNorm(dim)
        self.attn = SelfAttention(dim, heads)
        self.norm2 = nn.LayerNorm(dim)
        self.fc1 = nn.Linear(dim, 4 * dim)
        self.fc2 = nn.Linear(4 * dim, dim)

    def forward(self, x):
        b, c, h, w = x.shape
        seq = x.flatten(2).transpose(1, 2)
        seq = seq + self.attn(self.norm1(seq))
        seq = seq + self.fc2(F.silu(self.fc1(self.norm2(seq))))
        return seq.transpose(1, 2).reshape(b, c, h, w)


class VelocityUNet(nn.Module):
    def __init__(self, cfg: NetworkConfig):
        super().__init__()
        cfg.validate()
        self.cfg = cfg
        g, r, td = cfg.groupnorm_groups, cfg.se_reduction, cfg.time_embed_dim
        chans = cfg.level_channels()
        self.time = TimeEmbedding(td)
        self.stem = MultiScaleStem(2 * cfg.in_channels, cfg.branch_channels)

        self.enc_blocks = nn.ModuleList()
        self.downs = nn.ModuleList()
        prev = cfg.base_channels
        for lvl, ch in enumerate(chans):
            blocks = nn.ModuleList()
            for i in range(cfg.res_blocks_per_level):
                blocks.append(ResBlock(prev if i == 0 else ch, ch, td, g, r))
            self.enc_blocks.append(blocks)
            nxt = chans[lvl + 1] if lvl + 1 < len(chans) else ch
            self.downs.append(Downsample(ch, nxt))
            prev = nxt

        self.mid1 = ResBlock(prev, prev, td, g, r)
        self.mid_attn = BottleneckTransformer(prev, cfg.attn_heads)
        self.mid2 = ResBlock(prev, prev, td, g, r)

        self.ups = nn.ModuleList()
        self.dec_blocks = nn.ModuleList()
        for ch in reversed(chans):
            self.ups.append(Upsample(prev, ch))
            blocks = nn.ModuleList()
            for i in range(cfg.res_blocks_per_level):
                blocks.append(ResBlock(2 * ch if i == 0 else ch, ch, td, g, r))
            self.dec_blocks.append(blocks)
            prev = ch

        self.head_norm = nn.GroupNorm(g, prev)
        self.head = nn.Conv2d(prev, cfg.in_channels, 3, padding=1)

    def forward(self, x_t, x_low, t):
        if x_t.shape != x_low.shape:
            raise ValueError(f"x_t {tuple(x_t.shape)} and x_low {tuple(x_low.shape)} differ")
        squeeze = x_t.dim() == 3
        if squeeze:
            x_t, x_low = x_t[None], x_low[None]
        self.cfg.validate_input(x_t.shape[-2], x_t.shape[-1])
        b = x_t.shape[0]
        t = torch.as_tensor(t, dtype=x_t.dtype).reshape(-1)
        if t.numel() == 1:
            t = t.expand(b)
        temb = self.time(t)

        h = self.stem(torch.cat([x_t, x_low], dim=1))
        skips = []
        for blocks, down in zip(self.enc_blocks, self.downs):
            for blk in blocks:
                h = blk(h, temb)
            skips.append(h)
            h = down(h)
        h = self.mid1(h, temb)
        h = self.mid_attn(h)
        h = self.mid2(h, temb)
        for up, blocks in zip(self.ups, self.dec_blocks):
            h = torch.cat([up(h), skips.pop()], dim=1)
            for blk in blocks:
                h = blk(h, temb)
        out = self.head(F.silu(self.head_norm(h)))
        return out[0] if squeeze else out


# --------------------------------------------------------------------------
# parameters


class ParameterStore(OrderedDict):
    """Ordered ``name -> float32 ndarray`` map of a network's learnable tensors."""

    @property
    def total_count(self) -> int:
        return int(sum(v.size for v in self.values()))

    @classmethod
    def from_model(cls, model: nn.Module) -> "ParameterStore":
        return cls((n, p.detach().cpu().numpy().astype(np.float32, copy=True)) for n, p in model.named_parameters())

    def load_into(self, model: nn.Module) -> nn.Module:
        names = [n for n, _ in model.named_parameters()]
        if names != list(self.keys()):
            raise ValueError("parameter names do not match the model layout")
        with torch.no_grad():
            for n, p in model.named_parameters():
                src = self[n]
                if tuple(src.shape) != tuple(p.shape):
                    raise ValueError(f"{n}: stored shape {src.shape} vs model {tuple(p.shape)}")
                p.copy_(torch.from_numpy(np.ascontiguousarray(src)))
        return model

    def to_model(self, cfg: NetworkConfig) -> VelocityUNet:
        return self.load_into(VelocityUNet(cfg))


def init_params(cfg: NetworkConfig, rng) -> ParameterStore:
    """Draw initial parameters in layout order from ``rng``.

    Conv and dense weights are uniform with variance ``1/fan_in``, biases
    start at zero, norm gains at one and the output head at zero.
    """
    skeleton = VelocityUNet(cfg)
    store = ParameterStore()
    for name, p in skeleton.named_parameters():
        shape = tuple(p.shape)
        if name.startswith("head."):
            arr = np.zeros(shape, dtype=np.float32)
        elif "norm" in name.split(".")[-2]:
            arr = (np.ones if name.endswith("weight") else np.zeros)(shape, dtype=np.float32)
        elif name.endswith("bias"):
            arr = np.zeros(shape, dtype=np.float32)
        else:
            fan_in = int(np.prod(shape[1:]))
            bound = math.sqrt(3.0 / fan_in)
            arr = rng.uniform(-bound, bound, size=shape).astype(np.float32)
        store[name] = arr
    return store


def build_model(cfg: NetworkConfig, rng) -> VelocityUNet:
    return init_params(cfg, rng).to_model(cfg)


def count_params(cfg: NetworkConfig) -> int:
    """Exact number of learnable scalars for ``cfg``."""
    return sum(p.numel() for p in VelocityUNet(cfg).parameters())


def forward(params: ParameterStore, cfg: NetworkConfig, x_t, x_low, t):
    """Functional forward pass on numpy inputs; returns a numpy velocity."""
    model = params.to_model(cfg)
    with torch.no_grad():
        out = model(torch.from_numpy(np.asarray(x_t, np.float32)), torch.from_numpy(np.asarray(x_low, np.float32)), t)
    return out.numpy()


# --------------------------------------------------------------------------
# checkpoint files


def write_tensor_records(fh, tensors: "OrderedDict[str, np.ndarray]") -> None:
    fh.write(struct.pack("<I", len(tensors)))
    for name, arr in tensors.items():
        arr = np.ascontiguousarray(arr, dtype="<f4")
        raw = name.encode("utf-8")
        fh.write(struct.pack("<I", len(raw)))
        fh.write(raw)
        fh.write(struct.pack("<I", arr.ndim))
        fh.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
        fh.write(arr.tobytes())


def read_tensor_records(buf: memoryview, off: int) -> tuple["OrderedDict[str, np.ndarray]", int]:
    (n,) = struct.unpack_from("<I", buf, off)
    off += 4
    out = OrderedDict()
    for _ in range(n):
        (ln,) = struct.unpack_from("<I", buf, off)
        off += 4
        name = bytes(buf[off : off + ln]).decode("utf-8")
        off += ln
        (rank,) = struct.unpack_from("<I", buf, off)
        off += 4
        dims = struct.unpack_from(f"<{rank}I", buf, off)
        off += 4 * rank
        size = int(np.prod(dims, dtype=np.int64))
        out[name] = np.frombuffer(buf, dtype="<f4", count=size, offset=off).reshape(dims).astype(np.float32)
        off += 4 * size
    return out, off


def save_checkpoint(path, store: ParameterStore, cfg: NetworkConfig, extra: dict | None = None) -> None:
    from .config import _to_plain

    header = {
        "format_version": CKPT_VERSION,
        "network": _to_plain(cfg),
        "total_count": store.total_count,
        "extra": extra or {},
    }
    blob = json.dumps(header, sort_keys=True).encode("utf-8")
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "wb") as fh:
        fh.write(CKPT_MAGIC)
        fh.write(struct.pack("<II", CKPT_VERSION, len(blob)))
        fh.write(blob)
        write_tensor_records(fh, store)
    tmp.replace(path)


def load_checkpoint(path) -> tuple[ParameterStore, NetworkConfig, dict]:
    from .config import _from_plain

    buf = memoryview(Path(path).read_bytes())
    if bytes(buf[:8]) != CKPT_MAGIC:
        raise ValueError(f"{path}: not a checkpoint file")
    version, hlen = struct.unpack_from("<II", buf, 8)
    if version != CKPT_VERSION:
        raise ValueError(f"{path}: unsupported checkpoint version {version}")
    header = json.loads(bytes(buf[16 : 16 + hlen]))
    tensors, _ = read_tensor_records(buf, 16 + hlen)
    store = ParameterStore(tensors)
    if store.total_count != header["total_count"]:
        raise ValueError(f"{path}: header count {header['total_count']} != payload {store.total_count}")
    cfg = _from_plain(NetworkConfig, header["network"], "network.")
    return store, cfg, header.get("extra", {})
