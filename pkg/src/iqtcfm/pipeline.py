"""Command-line orchestration: simulate, train, infer, evaluate, report.

Every command resolves the config (file + ``--override`` + ``--seed``) and
works inside ``<runs_dir>/<digest>/`` where ``digest`` hashes the resolved
config. Logs go to stderr; results go to files only.
"""

from __future__ import annotations

import argparse
import logging
import sys
from contextlib import contextmanager
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np
import torch

from .config import PRESETS, ConfigError, RunConfig
from .core import DatasetManifest, load_volume, make_rng, read_raw, write_raw
from .flow import integrate, sample_noise
from .metrics import ERROR_MAP_MAX, EvaluationReport, evaluate, error_map, hot_colormap, resolve_provider
from .network import VelocityUNet, load_checkpoint
from .simulator import build_dataset, interpolation_baseline
from .training import fit, set_deterministic

log = logging.getLogger("iqtcfm")

TEST_SPLITS = ("test_ind", "test_ood")
LEGEND_WIDTH = 16


class RunLocked(RuntimeError):
    pass


def run_dir_for(run: RunConfig) -> Path:
    return Path(run.paths.runs_dir) / run.digest()


@contextmanager
def locked(run_dir: Path):
    from filelock import FileLock, Timeout

    run_dir.mkdir(parents=True, exist_ok=True)
    lock = FileLock(str(run_dir / ".lock"))
    try:
        lock.acquire(timeout=0)
    except Timeout:
        raise RunLocked(f"{run_dir} is in use by another command") from None
    try:
        yield
    finally:
        lock.release()


def _snapshot(run: RunConfig, run_dir: Path) -> None:
    path = run_dir / "config.resolved.json"
    if not path.exists():
        run.save(path)


# --------------------------------------------------------------------------
# stages


def _data_digest(run: RunConfig) -> str:
    from .core import digest_of

    return digest_of({"simulator": run.to_dict()["simulator"], "data": run.to_dict()["data"], "seed": run.seed})


def _load_source_volumes(run: RunConfig):
    src = Path(run.data.source)
    if not src.is_dir():
        raise ConfigError(f"data.source {run.data.source!r} is neither 'phantom' nor a directory")
    files = sorted(p for p in src.iterdir() if p.name.endswith((".nii", ".nii.gz", ".raw")))
    if not files:
        raise ConfigError(f"no volumes found in {src}")
    return [load_volume(p) for p in files]


def cmd_simulate(run: RunConfig, run_dir: Path) -> DatasetManifest:
    mdir = run_dir / "manifest"
    stamp = mdir / "data.digest"
    digest = _data_digest(run)
    if stamp.exists() and stamp.read_text().strip() == digest and (mdir / "manifest.jsonl").exists():
        log.info("manifest up to date (%s)", digest)
        return DatasetManifest.read(mdir)
    volumes = None if run.data.source == "phantom" else _load_source_volumes(run)
    manifest = build_dataset(run.simulator, run.data, mdir, run.seed, volumes)
    stamp.write_text(digest + "\n")
    log.info("simulated %s", " ".join(f"{k}={v}" for k, v in manifest.counts().items()))
    return manifest


def _manifest(run: RunConfig, run_dir: Path) -> DatasetManifest:
    if not (run_dir / "manifest" / "manifest.jsonl").exists():
        log.info("no manifest yet; simulating first")
    return cmd_simulate(run, run_dir)


def cmd_train(run: RunConfig, run_dir: Path) -> Path:
    manifest = _manifest(run, run_dir)
    return fit(run, manifest, run_dir, progress=sys.stderr)


def load_model(run: RunConfig, checkpoint) -> tuple[VelocityUNet, int]:
    store, cfg, _ = load_checkpoint(checkpoint)
    if cfg != run.network:
        raise ConfigError(f"checkpoint {checkpoint} was trained with a different network config")
    model = store.to_model(cfg).eval()
    return model, store.total_count


def reconstruct(model, lows: Sequence[np.ndarray], subject_ids: Sequence[str], run: RunConfig) -> list[np.ndarray]:
    """Sample high-quality estimates for ``lows`` (each ``(1, H, W)``).

    Each image starts from noise seeded by ``(run.seed, subject_id)``; images
    are integrated in batches of ``run.sampler.batch_size``.
    """
    out: list[np.ndarray] = []
    bs = run.sampler.batch_size

    def field(x, t, c):
        return model(x, c, t)

    for start in range(0, len(lows), bs):
        ids = subject_ids[start : start + bs]
        low = torch.from_numpy(np.stack(lows[start : start + bs]).astype(np.float32))
        x0 = torch.from_numpy(np.stack([sample_noise(low.shape[1:], make_rng(run.seed, "infer", sid)) for sid in ids]))
        with torch.no_grad():
            x1 = integrate(field, x0, low, run.sampler)
        out.extend(np.clip(x1.numpy(), 0.0, 1.0).astype(np.float32))
    return out


def cmd_infer(run: RunConfig, run_dir: Path, checkpoint=None, input_dir=None) -> dict[str, Path]:
    set_deterministic(run.deterministic)
    checkpoint = Path(checkpoint) if checkpoint else run_dir / "checkpoints" / "best.ckpt"
    if not checkpoint.exists():
        raise FileNotFoundError(f"checkpoint {checkpoint} not found; run 'train' first")
    model, _ = load_model(run, checkpoint)
    outputs = {}
    if input_dir:
        jobs = {"input": [(p.name.split(".")[0], read_raw(p)) for p in sorted(Path(input_dir).glob("*.raw"))]}
    else:
        manifest = _manifest(run, run_dir)
        jobs = {s: [(p.subject_id, p.low) for p in manifest.load_pairs(s)] for s in TEST_SPLITS}
    for split, items in jobs.items():
        dest = run_dir / "recon" / split
        dest.mkdir(parents=True, exist_ok=True)
        ok = []
        for sid, low in items:
            try:
                run.network.validate_input(*np.shape(low)[-2:])
                if np.ndim(low) != 3 or np.shape(low)[0] != run.network.in_channels:
                    raise ConfigError(f"expected ({run.network.in_channels}, H, W), got {np.shape(low)}")
            except ConfigError as exc:
                log.error("skipping %s: %s", sid, exc)
                continue
            ok.append((sid, low))
        ok_shapes: dict[tuple, list] = {}
        for sid, low in ok:
            ok_shapes.setdefault(tuple(np.shape(low)), []).append((sid, low))
        for group in ok_shapes.values():
            recs = reconstruct(model, [g[1] for g in group], [g[0] for g in group], run)
            for (sid, _), rec in zip(group, recs):
                write_raw(rec, dest / f"{sid}.raw")
        outputs[split] = dest
        log.info("reconstructed %d/%d images into %s", len(ok), len(items), dest)
    return outputs


def _recon_dir(run_dir: Path, split: str) -> Path:
    return run_dir / "recon" / split


def _read_recons(directory: Path, ids: Iterable[str]) -> dict[str, np.ndarray]:
    out = {}
    for sid in ids:
        p = directory / f"{sid}.raw"
        if p.exists():
            out[sid] = read_raw(p)
    return out


def cmd_evaluate(run: RunConfig, run_dir: Path, checkpoint=None, external_dir=None) -> dict[str, EvaluationReport]:
    manifest = _manifest(run, run_dir)
    checkpoint = Path(checkpoint) if checkpoint else run_dir / "checkpoints" / "best.ckpt"
    _, n_params = load_model(run, checkpoint)
    if not all(_recon_dir(run_dir, s).exists() for s in TEST_SPLITS):
        cmd_infer(run, run_dir, checkpoint)
    provider = resolve_provider(run.evaluation.lpips_provider)
    reports = {}
    for split in TEST_SPLITS:
        pairs = manifest.load_pairs(split)
        if not pairs:
            log.warning("split %s is empty; skipped", split)
            continue
        ids = [p.subject_id for p in pairs]
        recon = {
            "interpolation": {p.subject_id: interpolation_baseline(p.low, int(p.params.get("downsample_factor", run.simulator.downsample_factor))) for p in pairs},
        }
        params = {"interpolation": None}
        if external_dir:
            recon["external"] = _read_recons(Path(external_dir), ids)
            params["external"] = None
        recon["cfm"] = _read_recons(_recon_dir(run_dir, split), ids)
        params["cfm"] = n_params
        masks = None
        if run.evaluation.brain_mask:
            from .simulator import estimate_mask

            masks = {p.subject_id: estimate_mask(p.high) > 0 for p in pairs}
        report = evaluate(
            [(p.subject_id, p.high) for p in pairs],
            recon,
            split,
            params,
            provider,
            masks,
            error_map_dir=run_dir / "reports" / "error_maps" / split,
            config_digest=run.digest(),
        )
        report.write(run_dir / "reports")
        reports[split] = report
        log.info("%s\n%s", split, report.table())
    return reports


def _gray_rgb(img: np.ndarray) -> np.ndarray:
    a = np.clip(np.asarray(img, dtype=np.float64), 0, 1)
    if a.ndim == 3:
        a = a[0]
    g = np.floor(a * 255 + 0.5).astype(np.uint8)
    return np.repeat(g[..., None], 3, axis=-1)


def make_panel(high, low, interp, cfm) -> np.ndarray:
    """Two-row RGB panel: images (high | low | interpolation | cfm) over error maps.

    The error row shows ``|high - x|`` for each column on the fixed
    [0, ERROR_MAP_MAX] scale; a legend strip on the right holds the gray
    intensity bar (top) and the error colour bar (bottom).
    """
    tiles = [high, low, interp, cfm]
    h, w = np.shape(high)[-2:]
    top = np.concatenate([_gray_rgb(t) for t in tiles], axis=1)
    errs = []
    for t in tiles:
        e = error_map(high, t)
        errs.append(hot_colormap(e[0] if e.ndim == 3 else e))
    errs = np.concatenate(errs, axis=1)
    ramp = np.linspace(1.0, 0.0, h)[:, None] * np.ones((1, LEGEND_WIDTH))
    legend_top = _gray_rgb(ramp)
    legend_bot = hot_colormap(ramp * ERROR_MAP_MAX)
    left = np.concatenate([top, errs], axis=0)
    legend = np.concatenate([legend_top, legend_bot], axis=0)
    return np.concatenate([left, legend], axis=1)


def cmd_report(run: RunConfig, run_dir: Path) -> list[Path]:
    from PIL import Image

    manifest = DatasetManifest.read(run_dir / "manifest")
    out_dir = run_dir / "panels"
    out_dir.mkdir(parents=True, exist_ok=True)
    written, missing = [], []
    for split in TEST_SPLITS:
        for pair in manifest.load_pairs(split)[: run.evaluation.report_subjects]:
            rec_path = _recon_dir(run_dir, split) / f"{pair.subject_id}.raw"
            if not rec_path.exists():
                missing.append(str(rec_path))
                continue
            k = int(pair.params.get("downsample_factor", run.simulator.downsample_factor))
            panel = make_panel(pair.high, pair.low, interpolation_baseline(pair.low, k), read_raw(rec_path))
            path = out_dir / f"{split}_{pair.subject_id}.png"
            Image.fromarray(panel).save(path)
            written.append(path)
    if missing:
        log.error("missing artifacts:\n  %s", "\n  ".join(missing))
        if not written:
            raise FileNotFoundError("no reconstructions available; run 'infer' first")
    return written


# --------------------------------------------------------------------------
# CLI


def resolve_config(args) -> RunConfig:
    if args.config in PRESETS and not Path(args.config).exists():
        run = PRESETS[args.config]()
    else:
        run = RunConfig.load(args.config)
    run = run.with_overrides(args.override or [])
    if args.seed is not None:
        run.seed = args.seed
    if args.deterministic:
        run.deterministic = True
    if args.runs_dir:
        run.paths.runs_dir = args.runs_dir
    return run.validate()


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="iqtcfm", description="Conditional flow matching image quality transfer")
    p.add_argument("command", choices=("simulate", "train", "infer", "evaluate", "report"))
    p.add_argument("--config", required=True, help="config JSON path or preset name (default, desk, tiny)")
    p.add_argument("--override", action="append", metavar="KEY=VALUE", help="dotted-key override, repeatable")
    p.add_argument("--seed", type=int)
    p.add_argument("--deterministic", action="store_true")
    p.add_argument("--runs-dir", help="root directory for run outputs (overrides paths.runs_dir)")
    p.add_argument("--checkpoint", help="checkpoint for infer/evaluate (default: best.ckpt of the run)")
    p.add_argument("--input", help="directory of raw low-quality images for infer")
    p.add_argument("--external", help="directory of external-method reconstructions for evaluate")
    p.add_argument("-v", "--verbose", action="store_true")
    return p


def main(argv: Sequence[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(stream=sys.stderr, level=logging.DEBUG if args.verbose else logging.INFO, format="%(levelname)s %(name)s: %(message)s")
    try:
        run = resolve_config(args)
    except (ConfigError, ValueError, OSError) as exc:
        log.error("invalid configuration: %s", exc)
        return 1
    run_dir = run_dir_for(run)
    try:
        with locked(run_dir):
            _snapshot(run, run_dir)
            if args.command == "simulate":
                cmd_simulate(run, run_dir)
            elif args.command == "train":
                cmd_train(run, run_dir)
            elif args.command == "infer":
                cmd_infer(run, run_dir, args.checkpoint, args.input)
            elif args.command == "evaluate":
                cmd_evaluate(run, run_dir, args.checkpoint, args.external)
            else:
                cmd_report(run, run_dir)
    except ConfigError as exc:
        log.error("%s", exc)
        return 1
    except Exception as exc:
        log.error("%s failed: %s", args.command, exc)
        if args.verbose:
            log.exception("traceback")
        return 2
    print(run_dir, file=sys.stderr)
    return 0


if __name__ == "__main__":
    sys.exit(main())
