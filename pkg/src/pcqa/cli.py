"""``pcqa`` command line: one binary, one config schema, seven subcommands.

Usage errors (bad flags, bad config) exit 2; data errors exit 1.
"""

from __future__ import annotations

import argparse
import csv
import dataclasses
import hashlib
import json
import logging
import os
import re
import sys
import time
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path

import numpy as np

from . import __version__
from .config import CONTEXT_NAMES, SAMPLE_MODES, ConfigError, PipelineConfig

log = logging.getLogger("pcqa")

EXIT_OK, EXIT_DATA, EXIT_USAGE = 0, 1, 2


class UsageError(Exception):
    pass


def threads() -> int:
    """Worker count from ``PCQA_THREADS`` (default 1)."""
    raw = os.environ.get("PCQA_THREADS", "").strip()
    if not raw:
        return 1
    try:
        n = int(raw)
    except ValueError:
        raise UsageError(f"PCQA_THREADS must be a positive integer, got {raw!r}") from None
    if n < 1:
        raise UsageError(f"PCQA_THREADS must be a positive integer, got {raw!r}")
    return n


def _stamp(extra: dict | None = None) -> dict:
    return {"pcqa_version": __version__, **(extra or {})}


def _write_json(path, obj) -> None:
    Path(path).write_text(json.dumps(obj, indent=2, sort_keys=True, allow_nan=True) + "\n")


def _safe_name(text: str) -> str:
    return re.sub(r"[^A-Za-z0-9._-]+", "_", text).strip("_") or "sample"


def _config_hash(cfg: PipelineConfig, sections) -> str:
    pairs = [(k, v) for k, v in cfg.to_pairs() if k == "seed" or k.split(".")[0] in sections]
    return hashlib.sha256(json.dumps(pairs).encode()).hexdigest()[:16]


# --------------------------------------------------------------------------
# preprocess

STAGES = ("load", "normalize", "sample", "render", "write")


def _sample(norm, cfg: PipelineConfig):
    from .sampling import octant_cover_patches, sample_patches, sample_two_scale

    sc = cfg.sampler_config()
    mode = cfg.preprocess.mode
    if mode == "octant-cover":
        return octant_cover_patches(norm, sc.n)
    if mode == "two-scale" or sc.two_scale:
        return sample_two_scale(norm, sc)
    return sample_patches(norm, sc)


def preprocess_one(record, base: Path, out_dir: Path, name: str, cfg: PipelineConfig, force: bool):
    """Returns ``(row, timings, skipped)`` for one manifest record."""
    from .cloud import PointCloud, load_ply, normalize, resolve
    from .raster import render_views, save_views
    from .sampling import save_patchset

    view_paths = [out_dir / "views" / f"{name}_{v}.png" for v in range(6)]
    patch_path = out_dir / "patches" / f"{name}.bin"
    digest = _config_hash(cfg, ("sampler", "render", "preprocess"))
    row = record.to_dict()
    row["cloud_path"] = os.path.relpath(resolve(record.cloud_path, base), out_dir)
    row["view_paths"] = [os.path.relpath(p, out_dir) for p in view_paths]
    row["patch_path"] = os.path.relpath(patch_path, out_dir)
    timings = dict.fromkeys(STAGES, 0.0)

    sidecar = patch_path.with_name(patch_path.name + ".json")
    if not force and all(p.exists() for p in view_paths + [patch_path]) and sidecar.exists():
        try:
            if json.loads(sidecar.read_text()).get("config_hash") == digest:
                return row, timings, True
        except json.JSONDecodeError:
            pass

    t = time.perf_counter()
    raw = load_ply(resolve(record.cloud_path, base))
    cloud = PointCloud(raw.positions, raw.colors, record.content_id)
    timings["load"] = time.perf_counter() - t

    t = time.perf_counter()
    norm = normalize(cloud)
    timings["normalize"] = time.perf_counter() - t

    t = time.perf_counter()
    ps = _sample(norm, cfg)
    timings["sample"] = time.perf_counter() - t

    t = time.perf_counter()
    views = render_views(norm, cfg.render)
    timings["render"] = time.perf_counter() - t

    t = time.perf_counter()
    save_views(views, out_dir / "views", name)
    patch_path.parent.mkdir(parents=True, exist_ok=True)
    ps.meta.update({"config_hash": digest, "content_id": record.content_id, "pcqa_version": __version__})
    save_patchset(ps, patch_path)
    timings["write"] = time.perf_counter() - t
    return row, timings, False


def cmd_preprocess(args, cfg: PipelineConfig) -> int:
    from .cloud import read_manifest, write_jsonl

    if args.mode:
        cfg = dataclasses.replace(cfg, preprocess=dataclasses.replace(cfg.preprocess, mode=args.mode))
    records = read_manifest(args.manifest)
    base = Path(args.manifest).parent
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    names = [f"{i:05d}_{_safe_name(r.content_id)}" for i, r in enumerate(records)]

    def job(i):
        try:
            return preprocess_one(records[i], base, out_dir, names[i], cfg, args.force), None
        except Exception as e:  # per-sample failure, the batch goes on
            return None, e

    t0 = time.perf_counter()
    workers = threads()
    if workers > 1:
        with ThreadPoolExecutor(workers) as ex:
            results = list(ex.map(job, range(len(records))))
    else:
        results = [job(i) for i in range(len(records))]

    rows, failures, timing_rows = [], [], []
    totals = dict.fromkeys(STAGES, 0.0)
    for i, (res, err) in enumerate(results):
        prefix = f"[{i + 1}/{len(records)}] {names[i]}"
        if err is not None:
            failures.append({"index": i, "content_id": records[i].content_id, "error": repr(err)})
            log.error("%s failed: %s", prefix, err)
            print(f"{prefix}: FAILED {err}")
            continue
        row, timings, skipped = res
        rows.append(row)
        for k in STAGES:
            totals[k] += timings[k]
        timing_rows.append([names[i], skipped] + [timings[k] for k in STAGES])
        if skipped:
            print(f"{prefix}: up to date, skipped")
        else:
            parts = " ".join(f"{k} {timings[k]:.3f}s" for k in STAGES)
            print(f"{prefix}: {parts} total {sum(timings.values()):.3f}s")
    wall = time.perf_counter() - t0

    write_jsonl(out_dir / "manifest.jsonl", rows)
    with open(out_dir / "timing.csv", "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["sample", "skipped", *STAGES])
        w.writerows(timing_rows)
    from .plotting import stage_timing

    stage_timing(totals, out_dir / "timing.png")
    _write_json(out_dir / "preprocess.json", _stamp({
        "config": cfg.to_dict(), "samples": len(records), "failed": failures,
        "stage_seconds": totals, "wall_seconds": wall, "threads": workers,
    }))
    print(f"preprocessed {len(rows)}/{len(records)} samples in {wall:.2f}s "
          f"({', '.join(f'{k} {v:.2f}s' for k, v in totals.items())})")
    return EXIT_DATA if failures else EXIT_OK


# --------------------------------------------------------------------------
# distortion

def cmd_distort(args, cfg: PipelineConfig) -> int:
    from .cloud import load_ply, save_ply
    from .distort import apply_distortion, derive_seed, make_localization_sample

    cloud = load_ply(args.input)
    seed = derive_seed(cfg.seed, Path(args.input).name, args.type, args.severity)
    if args.octant is None:
        out = apply_distortion(cloud, args.type, args.severity, seed)
        meta = {"dtype": args.type, "severity": args.severity, "seed": seed, "octant": None}
    else:
        smp = make_localization_sample(cloud, args.octant, args.type, args.severity, seed)
        out = smp.cloud
        meta = smp.labels()
    save_ply(out, args.out, cfg.distort.encoding)
    _write_json(Path(str(args.out) + ".json"), _stamp({"source": str(args.input), **meta}))
    print(f"wrote {args.out}: {len(out)} points ({args.type}, severity {args.severity})")
    return EXIT_OK


def cmd_make_loc_set(args, cfg: PipelineConfig) -> int:
    from scipy.stats import chisquare

    from .cloud import read_jsonl
    from .distort import build_localization_set

    draws = args.draws or cfg.distort.draws
    path = build_localization_set(args.manifest, draws, cfg.seed, args.out, cfg.distort.encoding)
    rows = read_jsonl(path)
    hist = np.bincount([int(r["octant"]) for r in rows], minlength=8)
    p = float(chisquare(hist).pvalue) if len(rows) else float("nan")
    _write_json(Path(args.out) / "localization_summary.json", _stamp({
        "samples": len(rows), "draws": draws, "seed": cfg.seed, "octant_histogram": hist.tolist(),
        "chi2_uniform_p": p,
    }))
    print(f"wrote {len(rows)} samples to {path}; octant histogram {hist.tolist()} (chi2 p={p:.3g})")
    return EXIT_OK


# --------------------------------------------------------------------------
# instructions

def cmd_build_instructions(args, cfg: PipelineConfig) -> int:
    from .prompt import CONTEXTS, MosRange, build_instruction_dataset

    context = args.context or cfg.labels.context
    rng = MosRange(cfg.labels.mos_lo, cfg.labels.mos_hi)
    samples = build_instruction_dataset(args.manifest, rng, CONTEXTS[context], args.out)
    hist = np.bincount([int(s.answer_level) for s in samples], minlength=6)[1:]
    _write_json(Path(str(args.out) + ".meta.json"), _stamp({
        "samples": len(samples), "context": context, "mos_range": [rng.lo, rng.hi],
        "level_histogram": hist.tolist(),
    }))
    print(f"wrote {len(samples)} instruction samples to {args.out}; levels {hist.tolist()}")
    return EXIT_OK


# --------------------------------------------------------------------------
# toy training

def _file_digest(path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()[:16]


def _stage2_data(args, cfg, dims):
    from .prompt import MosRange
    from .toy.data import localization_benchmark, quality_set
    from .toy.runner import instruction_rows, row_sample

    mos_range = MosRange(cfg.labels.mos_lo, cfg.labels.mos_hi)
    if args.data:
        rows = instruction_rows(args.data, dims, cfg.render.background)
        return [row_sample(r, dims, cfg.seed, mos_range=mos_range) for r in rows]
    if args.task == "localization":
        if dims.s != 8:
            raise ValueError("the localization task uses 8 octant patches; set toy.s = 8")
        return localization_benchmark(cfg.data.loc_clouds, cfg.data.loc_draws, cfg.seed, cfg.data.n_points,
                                      dims.n_toy)
    return quality_set(cfg.data.quality_samples, cfg.seed, cfg.data.n_points, dims, mos_range=mos_range)


def cmd_train_toy(args, cfg: PipelineConfig) -> int:
    from .plotting import loss_curve
    from .toy.data import base_text_corpus, caption_set
    from .toy.model import ToyModel
    from .toy.train import answer_accuracy, load_checkpoint, pretrain_base, save_checkpoint, train

    if args.stage == 2 and not args.init:
        raise UsageError("--stage 2 needs --init CHECKPOINT from stage 1")
    stages, parent = [], None
    if args.init:
        model, header = load_checkpoint(args.init)
        stages = list(header.get("stages", [header.get("stage")]))
        parent = _file_digest(args.init)
        if args.stage <= max(stages):
            raise UsageError(f"--init is already at stage {max(stages)}; cannot run stage {args.stage}")
    else:
        model = ToyModel(cfg.toy, cfg.seed)
    dims = model.dims
    t0 = time.perf_counter()
    curve: list = []
    accuracy = None
    if args.stage >= 1 and 0 not in stages:
        print("no base checkpoint given: running stage 0 first")
        curve += pretrain_base(model, base_text_corpus(cfg.data.base_texts, cfg.seed), cfg.train_config(0))
        stages.append(0)
    if args.stage == 0:
        curve += pretrain_base(model, base_text_corpus(cfg.data.base_texts, cfg.seed), cfg.train_config(0))
    elif args.stage == 1:
        caps = caption_set(cfg.data.captions, cfg.seed, n_toy=min(64, dims.n_toy))
        curve += train(model, caps, 1, cfg.train_config(1))
        accuracy = answer_accuracy(model, caps)
    else:
        data = _stage2_data(args, cfg, dims)
        tc = cfg.train_config(2)
        curve += train(model, data, 2, tc)
        accuracy = answer_accuracy(model, data, pooled=tc.pooled)
    stages.append(args.stage)
    seconds = time.perf_counter() - t0

    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    save_checkpoint(model, out, args.stage, _stamp({
        "stages": stages, "parent": parent, "task": args.task, "config": cfg.to_dict(),
    }))
    from .toy.train import write_loss_csv

    write_loss_csv(str(out) + ".loss.csv", curve)
    loss_curve(curve, str(out) + ".loss.png", f"stage {args.stage} loss")
    msg = f"stage {args.stage} done in {seconds:.1f}s, final loss {curve[-1]:.4f}"
    if accuracy is not None:
        msg += f", answer accuracy {accuracy:.3f}"
    print(msg + f"; wrote {out}")
    return EXIT_OK


# --------------------------------------------------------------------------
# evaluation

def cmd_eval(args, cfg: PipelineConfig) -> int:
    from .cloud import read_jsonl
    from .plotting import metric_grid
    from .protocol import OracleRunner, make_splits, run_protocol

    pc = cfg.protocol
    if args.runner == "toy":
        from .prompt import MosRange
        from .toy.runner import ToyRunner, instruction_rows, synthetic_quality_rows
        from .toy.train import load_checkpoint

        if not args.checkpoint:
            raise UsageError("--runner toy needs --checkpoint")
        model, header = load_checkpoint(args.checkpoint)
        if args.data:
            rows = instruction_rows(args.data, model.dims, cfg.render.background)
        else:
            rows = synthetic_quality_rows(args.synthetic, args.variants, cfg.seed, model.dims, cfg.data.n_points)
        runner = ToyRunner(model, cfg.train_config(2), MosRange(cfg.labels.mos_lo, cfg.labels.mos_hi), cfg.seed)
    else:
        if not args.data:
            raise UsageError("--runner oracle needs --data MANIFEST")
        rows = read_jsonl(args.data)
        runner = OracleRunner()

    plans = make_splits(rows, pc.splits, cfg.seed)
    report = run_protocol(runner, rows, plans, range(pc.seeds), pc.fit, workers=threads())
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    _write_json(out / "report.json", _stamp({**report.to_dict(), "runner": args.runner,
                                             "splits": [p.to_dict() for p in plans],
                                             "config": cfg.to_dict()}))
    report.save_csv(out / "report.csv")
    metric_grid(report.srocc, report.split_ids, report.seeds, out / "srocc_grid.png", "SROCC")
    metric_grid(report.plcc, report.split_ids, report.seeds, out / "plcc_grid.png", "PLCC")
    print(f"SROCC {report.srocc_mean:.4f}  PLCC {report.plcc_mean:.4f}  "
          f"({len(plans)} splits x {pc.seeds} seeds); wrote {out}")
    if report.failed:
        print(f"{len(report.failures)} sample predictions failed; see report.json")
        return EXIT_DATA
    return EXIT_OK


def read_predictions(path):
    """``pred`` and ``mos`` columns of a CSV file."""
    with open(path, newline="") as f:
        reader = csv.DictReader(f)
        if reader.fieldnames is None or not {"pred", "mos"} <= set(reader.fieldnames):
            raise ValueError(f"{path}: need 'pred' and 'mos' columns")
        pred, mos = [], []
        for ln, r in enumerate(reader, 2):
            try:
                pred.append(float(r["pred"]))
                mos.append(float(r["mos"]))
            except (TypeError, ValueError):
                raise ValueError(f"{path}:{ln}: non-numeric pred/mos") from None
    return pred, mos


def metrics_report(pred, mos, fit: str = "none") -> dict:
    import warnings

    from .metrics import MetricWarning, pearson, plcc_fitted, srocc

    with warnings.catch_warnings(record=True) as caught:
        warnings.simplefilter("always", MetricWarning)
        out = {"n": len(pred), "fit": fit, "srocc": srocc(pred, mos)}
        if fit == "none":
            out["plcc"], out["converged"] = pearson(pred, mos), None
        else:
            out["plcc"], out["converged"] = plcc_fitted(pred, mos)
    out["warnings"] = [str(w.message) for w in caught if issubclass(w.category, MetricWarning)]
    return out


def cmd_metrics(args, cfg: PipelineConfig) -> int:
    from .plotting import prediction_scatter

    pred, mos = read_predictions(args.predictions)
    fit = args.fit or cfg.protocol.fit
    report = metrics_report(pred, mos, fit)
    _write_json(args.out, _stamp(report))
    prediction_scatter(pred, mos, Path(args.out).with_suffix(".png"),
                       f"SROCC {report['srocc']:.3f}  PLCC {report['plcc']:.3f}")
    print(f"SROCC {report['srocc']:.6f}  PLCC {report['plcc']:.6f}  (n={len(pred)}, fit={fit})")
    return EXIT_OK


# --------------------------------------------------------------------------
# parser

def build_parser() -> argparse.ArgumentParser:
    from .distort import DISTORTION_TYPES

    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", metavar="FILE", help="key=value pipeline config (unknown keys are errors)")
    common.add_argument("--set", metavar="KEY=VALUE", action="append", default=[], dest="overrides",
                        help="override one config key; repeatable")
    common.add_argument("--seed", type=int, help="global seed; overrides the config's seed")
    common.add_argument("-v", "--verbose", action="store_true", help="debug logging")

    p = argparse.ArgumentParser(
        prog="pcqa", description="Point-cloud quality assessment pipeline.",
        epilog="Environment: PCQA_THREADS sets the worker count (default 1).",
    )
    p.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = p.add_subparsers(dest="command", required=True, metavar="COMMAND")

    s = sub.add_parser("preprocess", parents=[common], help="normalize, sample patches and render six views")
    s.add_argument("--manifest", required=True, help="input JSONL manifest (content_id, mos, cloud_path)")
    s.add_argument("--out", required=True, help="output directory")
    s.add_argument("--mode", choices=SAMPLE_MODES, help="patch sampling mode (default from config)")
    s.add_argument("--force", action="store_true", help="recompute existing outputs")
    s.set_defaults(func=cmd_preprocess)

    s = sub.add_parser("distort", parents=[common], help="apply one distortion to a PLY file")
    s.add_argument("--input", required=True, help="input PLY")
    s.add_argument("--out", required=True, help="output PLY (a .json sidecar is written next to it)")
    s.add_argument("--type", required=True, choices=DISTORTION_TYPES)
    s.add_argument("--severity", required=True, type=int, choices=range(1, 8), metavar="1..7")
    s.add_argument("--octant", type=int, choices=range(8), metavar="0..7",
                   help="confine the distortion to one octant")
    s.set_defaults(func=cmd_distort)

    s = sub.add_parser("make-loc-set", parents=[common], help="build the octant localization set")
    s.add_argument("--manifest", required=True, help="JSONL manifest of pristine clouds")
    s.add_argument("--out", required=True, help="output directory")
    s.add_argument("--draws", type=int, help="samples per pristine cloud (default from config)")
    s.set_defaults(func=cmd_make_loc_set)

    s = sub.add_parser("build-instructions", parents=[common], help="write the instruction JSONL")
    s.add_argument("--manifest", required=True, help="preprocessed manifest (from preprocess)")
    s.add_argument("--out", required=True, help="output JSONL")
    s.add_argument("--context", choices=CONTEXT_NAMES, help="prompt context (default from config)")
    s.set_defaults(func=cmd_build_instructions)

    s = sub.add_parser("train-toy", parents=[common], help="train the toy fusion model for one stage")
    s.add_argument("--stage", required=True, type=int, choices=(0, 1, 2))
    s.add_argument("--out", required=True, help="output checkpoint")
    s.add_argument("--init", help="checkpoint to continue from (required for stage 2)")
    s.add_argument("--task", choices=("quality", "localization"), default="quality",
                   help="synthetic stage-2 task when --data is not given")
    s.add_argument("--data", help="instruction JSONL for stage 2 (from build-instructions)")
    s.set_defaults(func=cmd_train_toy)

    s = sub.add_parser("eval", parents=[common], help="run the split x seed evaluation protocol")
    s.add_argument("--runner", choices=("oracle", "toy"), default="toy")
    s.add_argument("--data", help="manifest or instruction JSONL with content_id and mos")
    s.add_argument("--checkpoint", help="toy checkpoint (stage 1 or later) fine-tuned per split")
    s.add_argument("--synthetic", type=int, default=10, metavar="N",
                   help="toy runner without --data: number of synthetic contents")
    s.add_argument("--variants", type=int, default=4, help="distorted variants per synthetic content")
    s.add_argument("--out", required=True, help="output directory")
    s.set_defaults(func=cmd_eval)

    s = sub.add_parser("metrics", parents=[common], help="SROCC/PLCC of a predictions CSV")
    s.add_argument("--predictions", required=True, help="CSV with pred and mos columns")
    s.add_argument("--out", required=True, help="output JSON (a scatter PNG is written next to it)")
    s.add_argument("--fit", choices=("none", "logistic4"), help="PLCC mapping (default from config)")
    s.set_defaults(func=cmd_metrics)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)  # exits 2 on usage errors
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        n = threads()
        cfg = PipelineConfig.load(args.config, args.seed, args.overrides)
    except (ConfigError, UsageError) as e:
        parser.error(str(e))
    os.environ.setdefault("OMP_NUM_THREADS", str(n))
    if args.command in ("train-toy", "eval"):
        import torch

        torch.set_num_threads(n)
    try:
        return args.func(args, cfg)
    except UsageError as e:
        parser.error(str(e))
    except (ValueError, OSError, KeyError, RuntimeError) as e:
        print(f"pcqa {args.command}: error: {e}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
