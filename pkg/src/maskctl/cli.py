"""Command line entry point: ``maskctl run | ablate | train``.

Exit codes: 0 success, 1 config could not be read or parsed, 2 validation
failure (overlapping boxes, schedule overflow, ...), 3 runtime failure.
"""

from __future__ import annotations

import argparse
import csv
import dataclasses
import hashlib
import io
import json
import logging
import os
import sys
import time
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path
from typing import Optional

import numpy as np
import torch

from .attention import ModelConfig, ToyDenoiser, load_checkpoint, save_checkpoint
from .config import ConfigError, RunConfig, load_config
from .errors import ValidationError
from .layout import BBox, membership_vectors, rasterize_bbox
from .masks import PARTIAL_MASKS, expansion_mask, focus_mask, isolation_mask, write_mask
from .pipeline import RunResult, dctext_sample, init_step_flops, full_step_flops, sample_noise, save_latent, write_pgm
from .synth import GLYPHS, GlyphSpec, early_region_report, gen_dataset, region_accuracy, train_toy, vocab_size

log = logging.getLogger("maskctl")

EXIT_OK, EXIT_CONFIG, EXIT_VALIDATION, EXIT_RUNTIME = 0, 1, 2, 3


def _threads() -> int:
    try:
        return max(1, int(os.environ.get("MASKCTL_THREADS", "1")))
    except ValueError:
        return 1


def load_model(config: RunConfig) -> ToyDenoiser:
    path = config.checkpoint_path()
    if path is None:
        seed = int(config.model.checkpoint.split(":", 1)[1])
        return ToyDenoiser(_model_config_for(config), seed=seed)
    return load_checkpoint(path)


def _model_config_for(config: RunConfig) -> ModelConfig:
    tokens = list(config.prompts.global_tokens) + [t for tp in config.prompts.textual for t in tp.tokens]
    longest = max([len(config.prompts.global_tokens)] + [len(tp.tokens) for tp in config.prompts.textual])
    return ModelConfig(
        channels=config.grid.channels,
        grid_h=config.grid.h,
        grid_w=config.grid.w,
        vocab=max(32, max(tokens, default=0) + 1),
        max_prompt_len=max(16, longest),
    )


def glyph_specs(config: RunConfig) -> Optional[list[GlyphSpec]]:
    """Specs for scoring when every textual prompt is a single glyph code; else None."""
    specs = []
    for tp in config.prompts.textual:
        if len(tp.tokens) != 1 or not 0 <= tp.tokens[0] < len(GLYPHS):
            return None
        try:
            specs.append(GlyphSpec(tp.tokens[0], rasterize_bbox(BBox.from_list(tp.bbox), config.grid.h, config.grid.w)))
        except ValidationError:
            return None
    return specs


def execute(model: ToyDenoiser, config: RunConfig) -> RunResult:
    layout = config.layout()
    z_T = sample_noise(config.grid.channels, config.grid.h, config.grid.w, config.seed, model.dtype)
    return dctext_sample(
        model,
        z_T,
        layout,
        [tp.tokens for tp in config.prompts.textual],
        config.prompts.global_tokens,
        config.schedule.build(),
        focus_drop=config.focus_drop,
        snapshot_stages=config.outputs.snapshot_stages,
    )


def early_regions(model: ToyDenoiser, config: RunConfig, result: RunResult) -> Optional[dict]:
    """Per-stage early glyph decodes for each snapshot taken before the global stage."""
    specs = glyph_specs(config)
    if not specs:
        return None
    sched = config.schedule.build()
    bounds = sched.stage_bounds()
    textual = [tp.tokens for tp in config.prompts.textual]
    report = {}
    for stage, z in result.trace.snapshots.items():
        end = bounds[stage][1]
        if stage == "global" or end == 0:
            continue
        report[stage] = early_region_report(model, z, sched.timesteps[end], specs, textual)
    return report


def build_manifest(config: RunConfig, result: RunResult, model: ToyDenoiser) -> dict:
    trace = result.trace
    layout = config.layout()
    specs = glyph_specs(config)
    model_config = model.config
    return {
        "seed": config.seed,
        "config": config.to_dict(),
        "schedule": dict(zip(["T_init", "T_focus", "T_expn", "T_global"], trace.stage_lengths())) | {"T": config.schedule.T},
        "steps": [dataclasses.asdict(s) for s in trace.steps],
        "mask_kinds": [s.mask for s in trace.steps],
        "flops": {"total": trace.total_flops, "by_stage": trace.flops_by_stage()},
        "init_step_flops": init_step_flops(model_config, layout.rects, [tp.tokens for tp in config.prompts.textual]),
        "full_step_flops": full_step_flops(model_config, len(config.prompts.global_tokens), config.grid.h, config.grid.w),
        "latent_sha256": hashlib.sha256(result.latent.numpy().tobytes()).hexdigest(),
        "region_accuracy": region_accuracy(result.latent, specs) if specs else None,
        "early_regions": early_regions(model, config, result),
    }


def cmd_run(args) -> int:
    config = load_config(args.config, args.override)
    config.layout()
    config.schedule.build()
    model = load_model(config)
    started = time.perf_counter()
    result = execute(model, config)
    wall = time.perf_counter() - started

    out = config.output_dir()
    out.mkdir(parents=True, exist_ok=True)
    save_latent(result.latent, out / "final.latent")
    write_pgm(result.latent, out / "final.pgm")
    for stage, z in result.trace.snapshots.items():
        save_latent(z, out / f"snapshot_{stage}.latent")
    manifest = build_manifest(config, result, model)
    (out / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    # wall time varies run to run; kept apart so the manifest stays reproducible
    (out / "timing.json").write_text(json.dumps({"wall_time_s": wall}) + "\n")
    if args.dump_masks:
        mv = membership_vectors(config.layout())
        for mask in (isolation_mask(mv), focus_mask(mv, config.focus_drop), expansion_mask(mv)):
            with open(out / f"mask_{mask.label.replace(':', '_').replace(',', '+')}.bin", "wb") as fh:
                write_mask(mask, fh)
    if args.trace:
        for s in result.trace.steps:
            print(f"{s.stage:9s} step {s.step:3d}  t {s.t_from:.4f} -> {s.t_to:.4f}  mask {s.mask:10s}  flops {s.flops}")
    acc = manifest["region_accuracy"]
    print(f"wrote {out}  flops {result.trace.total_flops}  wall {wall:.2f}s" + (f"  region_accuracy {acc:.3f}" if acc is not None else ""))
    return EXIT_OK


# -- ablation sweeps ----------------------------------------------------------


def _parse_values(text: str) -> list[int]:
    if ".." in text:
        lo, hi = text.split("..", 1)
        return list(range(int(lo), int(hi) + 1))
    return [int(v) for v in text.split(",") if v]


def parse_sweep(spec: str, base: RunConfig) -> list[tuple[str, dict]]:
    """Expand one sweep spec into ``(name, changes)`` variants.

    Grammar: ``drop-one`` | ``drop:<id>[,<id>...]`` | ``<field>=<values>[:fixed-sum]``
    where field is T_init, T_focus or T_expn and values are ``a..b`` or
    ``a,b,c``. ``fixed-sum`` keeps ``T_focus + T_expn`` at the base value.
    """
    if spec == "drop-one":
        spec = "drop:" + ",".join(PARTIAL_MASKS)
    if spec.startswith("drop:"):
        ids = [s for s in spec[5:].split(",") if s]
        bad = set(ids) - set(PARTIAL_MASKS)
        if bad:
            raise ConfigError(f"sweep {spec!r}: unknown partial masks {sorted(bad)}")
        return [(f"drop:{i}", {"focus_drop": [i]}) for i in ids]
    name, sep, rest = spec.partition("=")
    if not sep or name not in ("T_init", "T_focus", "T_expn"):
        raise ConfigError(f"bad sweep spec {spec!r}")
    values_text, _, mode = rest.partition(":")
    if mode not in ("", "fixed-sum"):
        raise ConfigError(f"bad sweep mode {mode!r}")
    try:
        values = _parse_values(values_text)
    except ValueError:
        raise ConfigError(f"bad sweep values in {spec!r}") from None
    out = []
    total = base.schedule.T_focus + base.schedule.T_expn
    for v in values:
        changes = {name: v}
        if mode == "fixed-sum":
            if name == "T_init":
                raise ConfigError("fixed-sum applies to T_focus / T_expn sweeps")
            other = "T_expn" if name == "T_focus" else "T_focus"
            changes[other] = total - v
            if changes[other] < 0:
                raise ConfigError(f"sweep {spec!r}: {name}={v} exceeds T_focus+T_expn={total}")
        out.append((",".join(f"{k}={changes[k]}" for k in sorted(changes)), changes))
    return out


def _variant(base: RunConfig, changes: dict, seed: int) -> RunConfig:
    sched = dataclasses.replace(base.schedule, **{k: v for k, v in changes.items() if k.startswith("T_")})
    return dataclasses.replace(base, schedule=sched, focus_drop=changes.get("focus_drop", base.focus_drop), seed=seed)


def run_ablation(model: ToyDenoiser, base: RunConfig, sweeps: list[str], n_seeds: int = 1, threads: int = 1) -> list[dict]:
    variants = [("base", {})]
    for spec in sweeps:
        variants += parse_sweep(spec, base)
    for _, changes in variants:
        _variant(base, changes, base.seed).schedule.build()
    specs = glyph_specs(base)

    def one(item):
        name, changes = item
        accs, digests, flops = [], [], 0
        for k in range(n_seeds):
            cfg = _variant(base, changes, base.seed + k)
            cfg.outputs = dataclasses.replace(cfg.outputs, snapshot_stages=["init"])
            res = execute(model, cfg)
            flops += res.trace.total_flops
            digests.append(hashlib.sha256(res.trace.snapshots["init"].numpy().tobytes()).hexdigest()[:16])
            if specs:
                accs.append(region_accuracy(res.latent, specs))
        sched = _variant(base, changes, base.seed).schedule
        return {
            "variant": name,
            "T_init": sched.T_init,
            "T_focus": sched.T_focus,
            "T_expn": sched.T_expn,
            "focus_drop": "+".join(changes.get("focus_drop", base.focus_drop)) or "-",
            "region_accuracy": float(np.mean(accs)) if accs else None,
            "flops_per_run": flops // n_seeds,
            "init_digest": digests[0],
        }

    with ThreadPoolExecutor(max_workers=threads) as pool:
        return list(pool.map(one, variants))


def format_table(rows: list[dict], fmt: str) -> str:
    if fmt == "json":
        return json.dumps(rows, indent=2) + "\n"
    buf = io.StringIO()
    writer = csv.DictWriter(buf, fieldnames=list(rows[0]), lineterminator="\n")
    writer.writeheader()
    writer.writerows(rows)
    return buf.getvalue()


def cmd_ablate(args) -> int:
    config = load_config(args.config, args.override)
    config.layout()
    model = load_model(config)
    rows = run_ablation(model, config, args.sweep, n_seeds=args.seeds, threads=_threads())
    text = format_table(rows, args.format)
    if args.out:
        Path(args.out).write_text(text)
    sys.stdout.write(text)
    return EXIT_OK


def cmd_train(args) -> int:
    torch.manual_seed(args.seed)
    dataset = gen_dataset(args.samples, args.max_regions, (args.grid, args.grid), seed=args.seed)
    cfg = ModelConfig(grid_h=args.grid, grid_w=args.grid, vocab=max(32, vocab_size(args.grid, args.grid)))
    dtype = torch.float32 if args.dtype == "float32" else torch.float64
    model = ToyDenoiser(cfg, seed=args.seed, dtype=dtype)
    model, losses = train_toy(model, dataset, args.steps, lr=args.lr, seed=args.seed, batch_size=args.batch_size, log_every=args.log_every)
    save_checkpoint(model, args.out)
    k = max(1, len(losses) // 10)
    print(f"saved {args.out}  loss {np.mean(losses[:k]):.4f} -> {np.mean(losses[-k:]):.4f}")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="maskctl", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p):
        p.add_argument("--config", required=True, help="JSON run config")
        p.add_argument("--override", action="append", default=[], metavar="KEY=VALUE", help="dotted-path override, repeatable")

    p = sub.add_parser("run", help="run the four-stage sampler and export artifacts")
    common(p)
    p.add_argument("--dump-masks", action="store_true", help="write packed bitmaps of the masks")
    p.add_argument("--trace", action="store_true", help="print the per-step stage trace")
    p.set_defaults(func=cmd_run)

    p = sub.add_parser("ablate", help="run sweep variants with a shared seed")
    common(p)
    p.add_argument("--sweep", action="append", default=[], help="drop-one | drop:<ids> | <field>=<values>[:fixed-sum]")
    p.add_argument("--seeds", type=int, default=1, help="seeds per variant (seed, seed+1, ...)")
    p.add_argument("--format", choices=("csv", "json"), default="csv")
    p.add_argument("--out", help="also write the table here")
    p.set_defaults(func=cmd_ablate)

    p = sub.add_parser("train", help="train the toy denoiser on the glyph task")
    p.add_argument("--out", required=True)
    p.add_argument("--steps", type=int, default=2000)
    p.add_argument("--samples", type=int, default=512)
    p.add_argument("--max-regions", type=int, default=3)
    p.add_argument("--grid", type=int, default=16)
    p.add_argument("--lr", type=float, default=3e-3)
    p.add_argument("--batch-size", type=int, default=8, help="global-prompt images per step; masked images match it, crops double it")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--dtype", choices=("float32", "float64"), default="float32")
    p.add_argument("--log-every", type=int, default=0)
    p.set_defaults(func=cmd_train)
    return parser


def main(argv: Optional[list[str]] = None) -> int:
    logging.basicConfig(level=logging.WARNING, format="%(levelname)s %(message)s")
    torch.set_num_threads(_threads())
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except ValidationError as exc:
        print(f"{type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_VALIDATION
    except Exception as exc:  # noqa: BLE001
        print(f"runtime error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
