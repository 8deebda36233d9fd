"""Training loop: Adam with coupled L2 decay, per-epoch cosine annealing, CFM loss."""

from __future__ import annotations

import csv
import json
import logging
import math
import struct
import sys
from collections import OrderedDict
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
import torch

from .config import RunConfig, TrainingConfig
from .core import DatasetManifest, PairedSample, make_rng
from .flow import cfm_loss, make_training_point
from .network import (
    ParameterStore,
    VelocityUNet,
    init_params,
    load_checkpoint,
    read_tensor_records,
    save_checkpoint,
    write_tensor_records,
)

log = logging.getLogger(__name__)

STATE_MAGIC = b"IQTCFMST"


class NonFiniteGradient(FloatingPointError):
    pass


class TrainingDiverged(RuntimeError):
    pass


def cosine_lr(epoch: int, cfg: TrainingConfig) -> float:
    """Cosine annealing from ``lr_init`` (epoch 0) to ``lr_min`` (epoch ``epochs``)."""
    if not 0 <= epoch <= cfg.epochs:
        raise ValueError(f"epoch {epoch} outside [0, {cfg.epochs}]")
    if epoch == 0:
        return cfg.lr_init
    if epoch == cfg.epochs:
        return cfg.lr_min
    return cfg.lr_min + 0.5 * (cfg.lr_init - cfg.lr_min) * (1 + math.cos(math.pi * epoch / cfg.epochs))


# --------------------------------------------------------------------------
# optimizer


@dataclass
class OptimizerState:
    m: list[torch.Tensor]
    v: list[torch.Tensor]
    step: int = 0

    @classmethod
    def zeros_like(cls, params: Sequence[torch.Tensor]) -> "OptimizerState":
        return cls([torch.zeros_like(p) for p in params], [torch.zeros_like(p) for p in params], 0)


def adam_step(params: Sequence[torch.Tensor], grads: Sequence[torch.Tensor], opt: OptimizerState, lr: float, cfg: TrainingConfig) -> None:
    """One bias-corrected Adam update, in place.

    Weight decay is the coupled L2 form: ``g <- g + weight_decay * theta``
    before the moment updates. A non-finite gradient leaves parameters and
    state untouched and raises :class:`NonFiniteGradient`.
    """
    if len(params) != len(grads) or len(params) != len(opt.m):
        raise ValueError("params, grads and optimizer state differ in length")
    for p, g in zip(params, grads):
        if g.shape != p.shape:
            raise ValueError(f"gradient shape {tuple(g.shape)} != parameter {tuple(p.shape)}")
        if not torch.isfinite(g).all():
            raise NonFiniteGradient(f"non-finite gradient at step {opt.step + 1}")
    opt.step += 1
    b1, b2 = cfg.beta1, cfg.beta2
    c1 = 1.0 - b1**opt.step
    c2 = 1.0 - b2**opt.step
    with torch.no_grad():
        for p, g, m, v in zip(params, grads, opt.m, opt.v):
            if cfg.weight_decay:
                g = g + cfg.weight_decay * p
            m.mul_(b1).add_(g, alpha=1 - b1)
            v.mul_(b2).addcmul_(g, g, value=1 - b2)
            denom = (v / c2).sqrt_().add_(cfg.eps)
            p.addcdiv_(m / c1, denom, value=-lr)


def clip_grad_norm(grads: Sequence[torch.Tensor], max_norm: float) -> float:
    total = math.sqrt(sum(float((g.double() ** 2).sum()) for g in grads))
    if total > max_norm:
        scale = max_norm / (total + 1e-12)
        for g in grads:
            g.mul_(scale)
    return total


# --------------------------------------------------------------------------
# epochs


def make_batch(samples: Sequence[PairedSample], rng, ts: Sequence[float] | None = None):
    """Stack path points for ``samples`` into ``(x_t, t, target_v, cond)`` tensors."""
    pts = [make_training_point(s, rng, None if ts is None else ts[i]) for i, s in enumerate(samples)]
    x_t = torch.from_numpy(np.stack([p.x_t for p in pts]))
    tgt = torch.from_numpy(np.stack([p.target_v for p in pts]))
    cond = torch.from_numpy(np.stack([p.cond for p in pts]))
    t = torch.tensor([p.t for p in pts], dtype=torch.float32)
    return x_t, t, tgt, cond


def train_epoch(model: VelocityUNet, opt: OptimizerState, samples: Sequence[PairedSample], cfg: TrainingConfig, rng, lr: float) -> float:
    """One pass over a seeded shuffle of ``samples``; returns the sample-weighted mean loss."""
    if not samples:
        raise ValueError("empty training split")
    params = [p for p in model.parameters()]
    order = rng.permutation(len(samples))
    total, seen = 0.0, 0
    model.train()
    for start in range(0, len(order), cfg.batch_size):
        batch = [samples[i] for i in order[start : start + cfg.batch_size]]
        x_t, t, tgt, cond = make_batch(batch, rng)
        for p in params:
            p.grad = None
        loss = cfm_loss(model(x_t, cond, t), tgt)
        if not torch.isfinite(loss):
            raise TrainingDiverged(f"non-finite loss {float(loss)}")
        loss.backward()
        grads = [p.grad if p.grad is not None else torch.zeros_like(p) for p in params]
        if cfg.grad_clip is not None:
            clip_grad_norm(grads, cfg.grad_clip)
        adam_step(params, grads, opt, lr, cfg)
        total += float(loss.detach()) * len(batch)
        seen += len(batch)
    return total / seen


def validate(model, samples: Sequence[PairedSample], cfg: TrainingConfig, seed: int = 0) -> float:
    """Mean CFM loss over ``samples`` with noise and times frozen by ``seed``."""
    if not samples:
        return float("nan")
    rng = make_rng(seed, "validation")
    total = 0.0
    with torch.no_grad():
        for start in range(0, len(samples), cfg.batch_size):
            batch = samples[start : start + cfg.batch_size]
            x_t, t, tgt, cond = make_batch(batch, rng)
            total += float(cfm_loss(model(x_t, cond, t), tgt)) * len(batch)
    return total / len(samples)


# --------------------------------------------------------------------------
# fit


@dataclass
class TrainState:
    epoch: int = 0  # next epoch to run
    global_step: int = 0
    lr: float = 0.0
    best_val: float = float("inf")
    initial_val: float = float("nan")
    rng_key: list = field(default_factory=list)


def save_train_state(path, state: TrainState, opt: OptimizerState) -> None:
    header = json.dumps({"state": asdict(state), "adam_step": opt.step}, sort_keys=True).encode()
    tensors = OrderedDict()
    for i, (m, v) in enumerate(zip(opt.m, opt.v)):
        tensors[f"m.{i}"] = m.detach().numpy()
        tensors[f"v.{i}"] = v.detach().numpy()
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "wb") as fh:
        fh.write(STATE_MAGIC)
        fh.write(struct.pack("<I", len(header)))
        fh.write(header)
        write_tensor_records(fh, tensors)
    tmp.replace(path)


def load_train_state(path) -> tuple[TrainState, OptimizerState]:
    buf = memoryview(Path(path).read_bytes())
    if bytes(buf[:8]) != STATE_MAGIC:
        raise ValueError(f"{path}: not a training state file")
    (hlen,) = struct.unpack_from("<I", buf, 8)
    header = json.loads(bytes(buf[12 : 12 + hlen]))
    tensors, _ = read_tensor_records(buf, 12 + hlen)
    n = len(tensors) // 2
    opt = OptimizerState(
        [torch.from_numpy(tensors[f"m.{i}"].copy()) for i in range(n)],
        [torch.from_numpy(tensors[f"v.{i}"].copy()) for i in range(n)],
        header["adam_step"],
    )
    return TrainState(**header["state"]), opt


def set_deterministic(flag: bool) -> None:
    if flag:
        torch.use_deterministic_algorithms(True)
        torch.set_num_threads(1)


CURVE_FIELDS = ("epoch", "train_loss", "val_loss", "lr")


def fit(run: RunConfig, manifest: DatasetManifest, out_dir, resume: bool = True, stop_after: int | None = None, progress=None) -> Path:
    """Train per ``run`` on the manifest's train split, validating on val.

    Writes ``checkpoints/{best,last}.ckpt``, ``checkpoints/last.state`` and
    ``curves/training.csv`` under ``out_dir``; returns the best checkpoint
    path. ``stop_after`` ends the run after that many epochs in this call
    (used to exercise the resume path).
    """
    progress = progress or sys.stdout
    tcfg = run.training
    set_deterministic(run.deterministic)
    out_dir = Path(out_dir)
    ck_dir = out_dir / "checkpoints"
    cv_dir = out_dir / "curves"
    ck_dir.mkdir(parents=True, exist_ok=True)
    cv_dir.mkdir(parents=True, exist_ok=True)
    train = manifest.load_pairs("train")
    val = manifest.load_pairs("val")
    if not train:
        raise ValueError("manifest has no train records")

    last_ck, last_st, best_ck = ck_dir / "last.ckpt", ck_dir / "last.state", ck_dir / "best.ckpt"
    curve_path = cv_dir / "training.csv"
    rows: list[dict] = []
    if resume and last_ck.exists() and last_st.exists():
        store, _, _ = load_checkpoint(last_ck)
        model = store.to_model(run.network)
        state, opt = load_train_state(last_st)
        if curve_path.exists():
            with open(curve_path, newline="") as fh:
                rows = [r for r in csv.DictReader(fh) if int(r["epoch"]) < state.epoch]
        log.info("resuming at epoch %d", state.epoch)
    else:
        model = init_params(run.network, make_rng(run.seed, "init")).to_model(run.network)
        opt = OptimizerState.zeros_like(list(model.parameters()))
        state = TrainState()
        state.initial_val = validate(model, val, tcfg, run.seed)

    ran = 0
    saved_epoch = state.epoch
    while state.epoch < tcfg.epochs:
        if stop_after is not None and ran >= stop_after:
            break
        epoch = state.epoch
        lr = cosine_lr(epoch, tcfg)
        state.rng_key = [run.seed, "train", epoch]
        train_loss = train_epoch(model, opt, train, tcfg, make_rng(run.seed, "train", epoch), lr)
        val_loss = validate(model, val, tcfg, run.seed)
        state.global_step = opt.step
        state.lr = lr
        state.epoch = epoch + 1
        rows.append({"epoch": epoch, "train_loss": repr(train_loss), "val_loss": repr(val_loss), "lr": repr(lr)})
        print(f"epoch={epoch} train_loss={train_loss:.6g} val_loss={val_loss:.6g} lr={lr:.6g}", file=progress, flush=True)
        store = ParameterStore.from_model(model)
        if val and val_loss < state.best_val:
            state.best_val = val_loss
            save_checkpoint(best_ck, store, run.network, {"epoch": epoch, "val_loss": val_loss})
        if state.epoch % tcfg.checkpoint_every == 0 or state.epoch == tcfg.epochs:
            save_checkpoint(last_ck, store, run.network, {"epoch": epoch, "val_loss": val_loss})
            save_train_state(last_st, state, opt)
            saved_epoch = state.epoch
        _write_curve(curve_path, rows)
        ran += 1

    if saved_epoch != state.epoch:
        save_checkpoint(last_ck, ParameterStore.from_model(model), run.network, {"epoch": state.epoch - 1})
        save_train_state(last_st, state, opt)
    if not best_ck.exists():
        save_checkpoint(best_ck, ParameterStore.from_model(model), run.network, {"epoch": state.epoch - 1})
    return best_ck


def _write_curve(path: Path, rows: list[dict]) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=CURVE_FIELDS, lineterminator="\n")
        w.writeheader()
        for r in rows:
            w.writerow({k: r[k] for k in CURVE_FIELDS})


def read_curve(path) -> list[dict]:
    with open(path, newline="") as fh:
        return [
            {"epoch": int(r["epoch"]), "train_loss": float(r["train_loss"]), "val_loss": float(r["val_loss"]), "lr": float(r["lr"])}
            for r in csv.DictReader(fh)
        ]
