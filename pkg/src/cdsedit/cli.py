"""Command-line entry point: edits, ablation sweeps, introspection, panels.

Output layout for a run: ``<out>/<timestamp>-<tag>/`` containing
``source.png``, ``output.png``, ``output.latent``, ``loss.csv``,
``heatmaps/step_*.png``, ``summary.json``, ``checkpoints/`` and a
``manifest.json`` written atomically last. The manifest inventory lists
every other file in the directory with its sha256.
"""

from __future__ import annotations

import argparse
import datetime
import json
import os
import statistics
import sys

import numpy as np

from . import arrayio, diagnostics
from .config import (
    ConfigError,
    build_backend,
    build_edit_config,
    build_schedule,
    load_config_file,
    resolve_config,
)
from .editor import run_edit
from .errors import BackendUnavailableError, NonFiniteUpdateError
from .schedule import SCHEDULE_KINDS, make_schedule

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_BACKEND = 3
EXIT_NUMERIC = 4

ABLATION_AXES = ("lambda", "patch_size", "num_patches", "loss_location")


def _err(msg: str) -> None:
    print(f"error: {msg}", file=sys.stderr)


def _add_edit_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", metavar="PATH", help="YAML config file")
    p.add_argument("--source", metavar="PATH", help="source image (.png) or latent (.latent)")
    p.add_argument("--prompt-ref", metavar="STR")
    p.add_argument("--prompt-tgt", metavar="STR")
    p.add_argument("--lambda-con", type=float, metavar="FLOAT")
    p.add_argument("--omega", type=float, metavar="FLOAT")
    p.add_argument("--steps", type=int, metavar="INT")
    p.add_argument("--seed", type=int, metavar="INT")
    p.add_argument("--backend", metavar="NAME")
    p.add_argument("--out", metavar="DIR", help="base directory for run outputs")
    p.add_argument("--patch-size", type=int, metavar="INT")
    p.add_argument("--num-patches", type=int, metavar="INT")
    p.add_argument("--loss-location", metavar="NAME")
    p.add_argument("--tag", metavar="STR", help="run directory suffix")


def _flag_overrides(args) -> dict:
    return {
        "run.source": args.source,
        "run.prompt_ref": args.prompt_ref,
        "run.prompt_tgt": args.prompt_tgt,
        "run.out": args.out,
        "run.tag": args.tag,
        "edit.lambda_con": args.lambda_con,
        "guidance.omega": args.omega,
        "edit.steps": args.steps,
        "edit.seed": args.seed,
        "backend.name": args.backend,
        "patch.patch_size": args.patch_size,
        "patch.num_patches": args.num_patches,
        "edit.loss_location": args.loss_location,
    }


def _resolve_from_args(args) -> tuple[dict, str | None]:
    file_cfg, config_path = None, None
    if args.config:
        config_path = args.config
        file_cfg = load_config_file(config_path)
    resolved = resolve_config(
        file_cfg,
        _flag_overrides(args),
        config_dir=os.path.dirname(os.path.abspath(config_path)) if config_path else None,
    )
    return resolved, config_path


def _make_run_dir(base: str, tag: str) -> str:
    stamp = datetime.datetime.now().strftime("%Y%m%d-%H%M%S-%f")
    run_dir = os.path.join(base, f"{stamp}-{tag}")
    os.makedirs(os.path.join(run_dir, "heatmaps"))
    os.makedirs(os.path.join(run_dir, "checkpoints"))
    return run_dir


def _load_source_latent(path: str, backend) -> np.ndarray:
    if path.endswith(".latent"):
        arrays, _ = arrayio.load_arrays(path)
        return np.asarray(arrays["latent"], dtype=np.float64)
    return backend.encode_image(arrayio.read_png(path))


def _write_manifest(run_dir: str, resolved: dict, backend, input_hashes: dict,
                    extra: dict | None = None) -> None:
    inventory = {}
    for root, _, files in os.walk(run_dir):
        for name in files:
            full = os.path.join(root, name)
            rel = os.path.relpath(full, run_dir)
            if rel == "manifest.json":
                continue
            inventory[rel] = arrayio.sha256_file(full)
    manifest = {
        "config": resolved,
        "seed": resolved["edit"]["seed"],
        "method": "cds" if float(resolved["edit"]["lambda_con"]) > 0 else "dds",
        "backend": backend.descriptor.to_json_dict(),
        "input_hashes": input_hashes,
        "inventory": inventory,
    }
    if extra:
        manifest.update(extra)
    arrayio.write_json_atomic(os.path.join(run_dir, "manifest.json"), manifest)


def _write_run_outputs(run_dir: str, backend, source_latent, result) -> None:
    arrayio.write_png(os.path.join(run_dir, "source.png"), backend.decode_latent(source_latent))
    arrayio.write_png(os.path.join(run_dir, "output.png"), backend.decode_latent(result.final_latent))
    arrayio.save_arrays(
        os.path.join(run_dir, "output.latent"),
        {"latent": result.final_latent},
        meta={"kind": "final_latent"},
    )
    arrayio.write_csv(
        os.path.join(run_dir, "loss.csv"),
        ["step", "t", "dds_norm", "cut_loss"],
        [(r.step, r.t, r.dds_norm, r.cut_loss) for r in result.log],
    )
    for step, grad in result.snapshots:
        hm = diagnostics.gradient_heatmap(grad)
        arrayio.write_png(
            os.path.join(run_dir, "heatmaps", f"step_{step:05d}.png"),
            diagnostics.heatmap_pixels(hm),
        )
    arrayio.write_json_atomic(
        os.path.join(run_dir, "summary.json"), diagnostics.summarize_run(result)
    )
    locations = {str(r.step): r.locations for r in result.log if r.locations is not None}
    if locations:
        arrayio.write_json_atomic(os.path.join(run_dir, "locations.json"), locations)


def cmd_edit(args) -> int:
    resolved, config_path = _resolve_from_args(args)
    source_path = resolved["run"]["source"]
    if not source_path:
        raise ConfigError("no source image given (use --source or the config file)")
    if not os.path.exists(source_path):
        raise ConfigError(f"source not found: {source_path}")
    sched = build_schedule(resolved)
    backend = build_backend(resolved, sched)
    edit_cfg = build_edit_config(resolved)
    source_latent = _load_source_latent(source_path, backend)

    run_dir = _make_run_dir(resolved["run"]["out"], resolved["run"]["tag"] or "edit")
    try:
        result = run_edit(
            source_latent,
            resolved["run"]["prompt_ref"],
            resolved["run"]["prompt_tgt"],
            edit_cfg,
            backend,
            sched,
            checkpoint_dir=os.path.join(run_dir, "checkpoints"),
        )
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc
    _write_run_outputs(run_dir, backend, source_latent, result)
    input_hashes = {"source": arrayio.sha256_file(source_path)}
    if config_path:
        input_hashes["config"] = arrayio.sha256_file(config_path)
    _write_manifest(run_dir, resolved, backend, input_hashes,
                    extra={"duration_s": result.duration_s})
    print(run_dir)
    return EXIT_OK


def _parse_sweep_values(axis: str, raw: str):
    items = [v.strip() for v in raw.split(",") if v.strip()]
    if not items:
        raise ConfigError("empty sweep value list")
    if axis == "lambda":
        return [float(v) for v in items]
    if axis in ("patch_size", "num_patches"):
        return [int(v) for v in items]
    return items


def _axis_override(axis: str, value):
    return {
        "lambda": ("edit", "lambda_con"),
        "patch_size": ("patch", "patch_size"),
        "num_patches": ("patch", "num_patches"),
        "loss_location": ("edit", "loss_location"),
    }[axis], value


def _semantic_shift(backend, source, output, prompt_tgt) -> float:
    mu = backend.class_mean(prompt_tgt)
    return float(np.linalg.norm(source - mu) - np.linalg.norm(output - mu))


def cmd_ablate(args) -> int:
    if args.axis not in ABLATION_AXES:
        raise ConfigError(f"unknown sweep axis {args.axis!r}; expected one of {ABLATION_AXES}")
    values = _parse_sweep_values(args.axis, args.values)
    resolved, config_path = _resolve_from_args(args)
    base_seed = int(resolved["edit"]["seed"])
    n_seeds = int(args.seeds)
    sched = build_schedule(resolved)
    backend = build_backend(resolved, sched)
    prompt_ref = resolved["run"]["prompt_ref"]
    prompt_tgt = resolved["run"]["prompt_tgt"]

    source_path = resolved["run"]["source"]
    fixed_source = _load_source_latent(source_path, backend) if source_path else None

    run_dir = _make_run_dir(resolved["run"]["out"], resolved["run"]["tag"] or f"ablate-{args.axis}")
    detail_rows = []
    summary_rows = []
    panel_tiles = []
    for value in values:
        (section, key), val = _axis_override(args.axis, value)
        case = json.loads(json.dumps(resolved))  # deep copy via JSON round trip
        case[section][key] = val
        finals, structs, shifts = [], [], []
        last_output = None
        for offset in range(n_seeds):
            seed = base_seed + offset
            case["edit"]["seed"] = seed
            edit_cfg = build_edit_config(case)
            if fixed_source is not None:
                source = fixed_source
            else:
                rng = np.random.default_rng(np.random.SeedSequence([seed, 0xA3]))
                source = backend.class_mean(prompt_ref) + 0.1 * rng.standard_normal(
                    backend.descriptor.latent_shape
                )
            result = run_edit(source, prompt_ref, prompt_tgt, edit_cfg, backend, sched)
            final_cut = result.log[-1].cut_loss
            struct = diagnostics.structure_distance_between_latents(
                backend, source, result.final_latent
            ).value
            shift = _semantic_shift(backend, source, result.final_latent, prompt_tgt)
            finals.append(final_cut)
            structs.append(struct)
            shifts.append(shift)
            detail_rows.append((args.axis, value, seed, final_cut, struct, shift))
            last_output = result.final_latent
        summary_rows.append(
            (
                args.axis,
                value,
                n_seeds,
                base_seed,
                statistics.median(finals),
                statistics.median(structs),
                statistics.median(shifts),
            )
        )
        panel_tiles.append(backend.decode_latent(last_output))

    arrayio.write_csv(
        os.path.join(run_dir, "ablation.csv"),
        ["axis", "value", "seeds", "base_seed", "final_cut_loss_median",
         "structure_distance_median", "semantic_shift_median"],
        summary_rows,
    )
    arrayio.write_csv(
        os.path.join(run_dir, "ablation_runs.csv"),
        ["axis", "value", "seed", "final_cut_loss", "structure_distance", "semantic_shift"],
        detail_rows,
    )
    arrayio.write_png(os.path.join(run_dir, "panel.png"), _hstack_images(panel_tiles))
    input_hashes = {}
    if source_path:
        input_hashes["source"] = arrayio.sha256_file(source_path)
    if config_path:
        input_hashes["config"] = arrayio.sha256_file(config_path)
    _write_manifest(run_dir, resolved, backend, input_hashes,
                    extra={"sweep": {"axis": args.axis, "values": values, "seeds": n_seeds}})
    print(run_dir)
    return EXIT_OK


def _hstack_images(tiles, gap: int = 4) -> np.ndarray:
    tiles = [np.atleast_3d(t) for t in tiles]
    height = max(t.shape[0] for t in tiles)
    parts = []
    for i, tile in enumerate(tiles):
        if tile.shape[2] == 1:
            tile = np.repeat(tile, 3, axis=2)
        if tile.shape[0] < height:
            pad = np.zeros((height - tile.shape[0], tile.shape[1], 3), dtype=np.uint8)
            tile = np.vstack([tile, pad])
        parts.append(tile)
        if i < len(tiles) - 1:
            parts.append(np.full((height, gap, 3), 255, dtype=np.uint8))
    return np.hstack(parts)


def cmd_inspect(args) -> int:
    if args.target == "backends":
        if args.action != "list":
            raise ConfigError(f"unknown backends action {args.action!r}")
        resolved = resolve_config()
        sched = build_schedule(resolved)
        backend = build_backend(resolved, sched)
        print(json.dumps([backend.descriptor.to_json_dict()], indent=2))
        return EXIT_OK
    if args.target == "schedule":
        if args.action != "dump":
            raise ConfigError(f"unknown schedule action {args.action!r}")
        params = {}
        for name in ("beta_start", "beta_end", "offset", "start", "end"):
            value = getattr(args, name)
            if value is not None:
                params[name] = value
        try:
            sched = make_schedule(args.kind, args.steps, **params)
        except ValueError as exc:
            raise ConfigError(str(exc)) from exc
        csv_text = sched.to_csv()
        if args.out:
            with open(args.out, "w") as fh:
                fh.write(csv_text)
        else:
            sys.stdout.write(csv_text)
        return EXIT_OK
    raise ConfigError(f"unknown inspect target {args.target!r}")


def cmd_panel(args) -> int:
    run_dir = args.run
    needed = [os.path.join(run_dir, "source.png"), os.path.join(run_dir, "output.png")]
    heat_dir = os.path.join(run_dir, "heatmaps")
    heatmaps = sorted(os.listdir(heat_dir)) if os.path.isdir(heat_dir) else []
    if heatmaps:
        needed.append(os.path.join(heat_dir, heatmaps[-1]))
    for path in needed:
        if not os.path.exists(path):
            raise ConfigError(f"panel input missing: {path}")
    tiles = [arrayio.read_png(p) for p in needed]
    out_path = args.out or os.path.join(run_dir, "panel.png")
    arrayio.write_png(out_path, _hstack_images(tiles))
    print(out_path)
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="cdsedit",
        description="Score-distillation image editing with a contrastive structure regularizer",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p_edit = sub.add_parser("edit", help="run one edit")
    _add_edit_flags(p_edit)
    p_edit.set_defaults(func=cmd_edit)

    p_ablate = sub.add_parser("ablate", help="sweep one axis and compare")
    _add_edit_flags(p_ablate)
    p_ablate.add_argument("--axis", required=True, metavar="NAME",
                          help="lambda | patch_size | num_patches | loss_location")
    p_ablate.add_argument("--values", required=True, metavar="CSV")
    p_ablate.add_argument("--seeds", type=int, default=5, metavar="INT")
    p_ablate.set_defaults(func=cmd_ablate)

    p_inspect = sub.add_parser("inspect", help="introspect backends and schedules")
    p_inspect.add_argument("target", choices=("backends", "schedule"))
    p_inspect.add_argument("action", choices=("list", "dump"))
    p_inspect.add_argument("--kind", default="scaled_linear", choices=SCHEDULE_KINDS)
    p_inspect.add_argument("--steps", type=int, default=1000)
    p_inspect.add_argument("--beta-start", type=float, dest="beta_start")
    p_inspect.add_argument("--beta-end", type=float, dest="beta_end")
    p_inspect.add_argument("--offset", type=float)
    p_inspect.add_argument("--start", type=float)
    p_inspect.add_argument("--end", type=float)
    p_inspect.add_argument("--out", metavar="PATH")
    p_inspect.set_defaults(func=cmd_inspect)

    p_panel = sub.add_parser("panel", help="compose source/output/heatmap side by side")
    p_panel.add_argument("--run", required=True, metavar="DIR")
    p_panel.add_argument("--out", metavar="PATH")
    p_panel.set_defaults(func=cmd_panel)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    try:
        return args.func(args)
    except (ConfigError, FileNotFoundError) as exc:
        _err(str(exc))
        return EXIT_CONFIG
    except BackendUnavailableError as exc:
        _err(str(exc))
        return EXIT_BACKEND
    except NonFiniteUpdateError as exc:
        _err(f"{exc}; last good step {exc.step - 1}")
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
