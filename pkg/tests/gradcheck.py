"""Finite-difference gradient check shared by the network and acceptance tests."""

import copy

import numpy as np
import torch

from iqtcfm.config import NetworkConfig
from iqtcfm.core import make_rng
from iqtcfm.flow import cfm_loss
from iqtcfm.network import init_params

GRAD_NET = NetworkConfig(
    branch_channels=1,
    depth=2,
    channel_mult=(1, 2),
    res_blocks_per_level=1,
    se_reduction=2,
    time_embed_dim=8,
    attn_heads=2,
    groupnorm_groups=2,
)

BLOCK_TYPES = {
    "stem": ("stem.",),
    "res_se": ("enc_blocks.", "dec_blocks.", "mid1.", "mid2."),
    "down": ("downs.",),
    "up": ("ups.",),
    "transformer": ("mid_attn.",),
    "head": ("head.", "head_norm."),
}


def block_of(name):
    for kind, prefixes in BLOCK_TYPES.items():
        if name.startswith(prefixes):
            return kind
    return None


def gradient_check(per_block=20, seed=0, size=16):
    """Return ``{block: [(name, index, analytic, numeric), ...]}``.

    Analytic gradients come from float32 autograd. The numeric reference is
    a float64 central difference on a double-precision copy of the same
    weights, so it is essentially free of rounding noise.
    """
    rng = make_rng(seed, "gradcheck")
    store = init_params(GRAD_NET, rng)
    # a zero head would block every upstream gradient
    for k in ("head.weight", "head.bias"):
        store[k] = rng.standard_normal(store[k].shape).astype(np.float32) * 0.3
    model = store.to_model(GRAD_NET)
    x_t = torch.from_numpy(rng.standard_normal((2, 1, size, size)).astype(np.float32))
    low = torch.from_numpy(rng.random((2, 1, size, size)).astype(np.float32))
    tgt = torch.from_numpy(rng.standard_normal((2, 1, size, size)).astype(np.float32))
    t = torch.tensor([0.3, 0.8])

    loss = cfm_loss(model(x_t, low, t), tgt)
    model.zero_grad()
    loss.backward()
    grads = {n: p.grad.detach().clone() for n, p in model.named_parameters()}

    m64 = copy.deepcopy(model).double()
    params64 = dict(m64.named_parameters())
    x64, l64, g64, t64 = x_t.double(), low.double(), tgt.double(), t.double()

    def loss64():
        with torch.no_grad():
            return float(cfm_loss(m64(x64, l64, t64), g64))

    by_block = {k: [] for k in BLOCK_TYPES}
    for name in grads:
        kind = block_of(name)
        if kind is not None:
            by_block[kind].append(name)

    out = {}
    for kind, names in by_block.items():
        sizes = np.array([grads[n].numel() for n in names])
        picks = []
        for _ in range(per_block):
            i = int(rng.choice(len(names), p=sizes / sizes.sum()))
            picks.append((names[i], int(rng.integers(sizes[i]))))
        rows = []
        for name, idx in picks:
            p = params64[name]
            flat = p.data.view(-1)
            orig = float(flat[idx])
            h = 1e-5 * max(1.0, abs(orig))
            flat[idx] = orig + h
            up = loss64()
            flat[idx] = orig - h
            dn = loss64()
            flat[idx] = orig
            rows.append((name, idx, float(grads[name].view(-1)[idx]), (up - dn) / (2 * h)))
        out[kind] = rows
    return out


def relative_error(a, b, floor=1e-6):
    return abs(a - b) / max(abs(a), abs(b), floor)
