"""Command line entry point tying the whole workflow together.

Subcommands: synth, curate, train, sample, edit, eval, ablate. Every run
writes a ``run.json`` with the fully resolved configuration; re-running a
command with the same run.json in single-worker mode reproduces its outputs
byte for byte. Config files (key=value lines or JSON, including a previous
run.json) provide defaults; explicit flags win.

Exit codes: 0 success, 2 usage error, 3 invalid config, 4 missing input,
5 runtime failure.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import sys
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path

import numpy as np

from . import __version__
from .autodiff import AutodiffError
from .curate import (
    CurateError,
    CuratorModel,
    build_curator_dataset,
    curator_score,
    filter_dataset,
    fit_curator,
    precision_recall,
)
from .denoiser import (
    LayerDenoiser,
    ModelConfig,
    ModelError,
    TrainConfig,
    get_mode,
    sample as sample_layers,
    train,
)
from .evalbench import (
    EvalError,
    FeatureExtractor,
    FidStats,
    HttpScorer,
    build_edit_suite,
    fid,
    run_ablation,
    run_edit_protocol,
    save_report,
    score_with_external,
)
from .imaging import ImagingError, read_image, read_mask, write_image
from .scenes import (
    CorruptionLabel,
    ManifestError,
    SceneError,
    corrupt_background,
    read_manifest,
    render_scene,
    sample_scene_config,
    write_manifest,
)

EXIT_OK = 0
EXIT_USAGE = 2
EXIT_CONFIG = 3
EXIT_MISSING_INPUT = 4
EXIT_RUNTIME = 5


class CliError(Exception):
    def __init__(self, category: str, message: str, code: int):
        super().__init__(message)
        self.category = category
        self.code = code


def _load_config_file(path: str) -> dict:
    p = Path(path)
    if not p.is_file():
        raise CliError("missing-input", f"config file not found: {path}", EXIT_MISSING_INPUT)
    text = p.read_text()
    stripped = text.lstrip()
    if stripped.startswith("{"):
        try:
            return json.loads(text)
        except json.JSONDecodeError as exc:
            raise CliError("invalid-config", f"{path}: {exc}", EXIT_CONFIG) from exc
    values = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        if "=" not in line:
            raise CliError("invalid-config", f"{path}:{lineno}: expected key = value", EXIT_CONFIG)
        key, _, raw = line.partition("=")
        raw = raw.strip()
        try:
            values[key.strip()] = json.loads(raw)
        except json.JSONDecodeError:
            values[key.strip()] = raw
    return values


def _apply_config_defaults(args: argparse.Namespace, argv: list[str]):
    """Config file supplies values for flags the user did not pass."""
    if not getattr(args, "config", None):
        return
    values = _load_config_file(args.config)
    if isinstance(values.get("config"), dict):
        values = values["config"]  # a previous run.json wraps the resolved flags
    passed = {a.lstrip("-").replace("-", "_") for a in argv if a.startswith("--")}
    for key, value in values.items():
        attr = key.replace("-", "_")
        if hasattr(args, attr) and attr not in passed and attr not in ("config", "command"):
            setattr(args, attr, value)


def _write_run_json(out_dir: Path, command: str, args: argparse.Namespace):
    out_dir.mkdir(parents=True, exist_ok=True)
    resolved = {
        k: v for k, v in sorted(vars(args).items()) if k not in ("func", "config")
    }
    payload = {"command": command, "version": f"layerlab-{__version__}", "config": resolved}
    (out_dir / "run.json").write_text(json.dumps(payload, sort_keys=True, indent=2) + "\n")


def _require_seed(args):
    if args.seed is None:
        raise CliError("invalid-config", "--seed is required (no wall-clock default)", EXIT_CONFIG)


def _render_one(task):
    seed, width, height, corrupt_spec = task
    cfg = sample_scene_config(seed, width=width, height=height)
    trip = render_scene(cfg)
    if corrupt_spec is not None:
        kind, severity, cseed = corrupt_spec
        label = CorruptionLabel(kind=kind, severity=severity)
        trip.background = corrupt_background(trip, label, seed=cseed)
        trip.corruption = label
    return trip


# -- synth -------------------------------------------------------------------


def cmd_synth(args) -> int:
    _require_seed(args)
    rng = np.random.default_rng(args.seed)
    kinds = ("hole_fill", "inconsistent", "shadow_residue")
    tasks = []
    for i in range(args.n):
        seed = int(rng.integers(2**63))
        corrupt = None
        u = rng.uniform()
        cseed = int(rng.integers(2**63))
        severity = float(np.round(rng.uniform(0.3, 1.0), 4))
        if u < args.corrupt_fraction:
            corrupt = (kinds[i % 3], severity, cseed)
        tasks.append((seed, args.width, args.height, corrupt))
    if args.workers > 1:
        with ProcessPoolExecutor(max_workers=args.workers) as pool:
            triplets = list(pool.map(_render_one, tasks))
    else:
        triplets = [_render_one(t) for t in tasks]
    out = Path(args.out)
    write_manifest(triplets, out)
    _write_run_json(out, "synth", args)
    print(f"wrote {args.n} triplets to {out}")
    return EXIT_OK


# -- curate ------------------------------------------------------------------


def cmd_curate(args) -> int:
    out = Path(args.out)
    if args.curate_action == "fit":
        _require_seed(args)
        rows = build_curator_dataset(args.n, args.seed, width=args.width, height=args.height)
        split = int(0.8 * len(rows))
        model = fit_curator([(c, m, bg, good) for c, m, bg, good, ring, _ in rows[:split]],
                            ring_radius=args.ring_radius)
        precision, recall = precision_recall(model, rows[split:])
        out.mkdir(parents=True, exist_ok=True)
        model.save(out / "curator.json")
        report = {
            "schema_version": 1,
            "train_samples": split,
            "heldout_samples": len(rows) - split,
            "precision": precision,
            "recall": recall,
            "threshold": model.threshold,
        }
        (out / "fit_report.json").write_text(json.dumps(report, sort_keys=True, indent=2))
        _write_run_json(out, "curate", args)
        print(f"curator fitted: precision={precision:.3f} recall={recall:.3f}")
        return EXIT_OK
    if args.curate_action == "score":
        model = CuratorModel.load(args.model)
        score = curator_score(
            read_image(args.composite),
            read_mask(args.mask),
            read_image(args.background),
            model,
            ring_radius=args.ring_radius,
        )
        print(f"{score:.6f}")
        return EXIT_OK
    # filter
    model = CuratorModel.load(args.model)
    kept, rejected, report = filter_dataset(
        args.manifest, model, threshold=args.threshold, out_dir=out
    )
    _write_run_json(out, "curate", args)
    print(f"kept {len(kept)} / rejected {len(rejected)} of {report['total']}")
    return EXIT_OK


# -- train -------------------------------------------------------------------


def _model_config_from_args(args) -> ModelConfig:
    return ModelConfig(
        dim=args.dim,
        depth=args.depth,
        heads=args.heads,
        patch=args.patch,
        image_size=args.image_size,
        vocab=args.vocab,
        text_len=args.text_len,
        schedule=args.schedule,
        sample_steps=args.sample_steps,
        mlp_ratio=args.mlp_ratio,
    )


def cmd_train(args) -> int:
    _require_seed(args)
    dataset = read_manifest(args.manifest)
    model_cfg = _model_config_from_args(args)
    train_cfg = TrainConfig(
        steps=args.steps,
        batch_size=args.batch_size,
        lr=args.lr,
        warmup_steps=args.warmup_steps,
        weight_decay=args.weight_decay,
        seed=args.seed,
        modes=tuple(args.modes.split(",")),
        log_every=args.log_every,
        lr_schedule=args.lr_schedule,
    )
    model = LayerDenoiser(model_cfg, seed=args.seed)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    train(model, dataset, train_cfg, log_path=out / "loss_log.jsonl")
    model.save(out / "checkpoint.bin")
    _write_run_json(out, "train", args)
    print(f"trained {args.steps} steps; checkpoint at {out / 'checkpoint.bin'}")
    return EXIT_OK


# -- sample ------------------------------------------------------------------


def cmd_sample(args) -> int:
    model = LayerDenoiser.load(args.checkpoint)
    mode = get_mode(args.mode)
    conditions = {"caption": args.caption}
    if "mask" in mode.conditions:
        if not args.mask:
            raise CliError("missing-input", f"mode {args.mode} needs --mask", EXIT_MISSING_INPUT)
        conditions["mask"] = read_mask(args.mask)
    if "bg" in mode.conditions:
        if not args.bg:
            raise CliError("missing-input", f"mode {args.mode} needs --bg", EXIT_MISSING_INPUT)
        conditions["bg"] = read_image(args.bg)
    if "fg" in mode.conditions:
        if not args.fg:
            raise CliError("missing-input", f"mode {args.mode} needs --fg", EXIT_MISSING_INPUT)
        conditions["fg"] = read_image(args.fg)
    outputs = sample_layers(model, mode, conditions, steps=args.steps, seed=args.seed)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    names = {"comp": "comp.png", "bg": "bg.png", "fg_ve": "fg_ve.png"}
    for role, img in outputs.items():
        write_image(img, out / names[role])
    _write_run_json(out, "sample", args)
    print(f"wrote {', '.join(sorted(names[r] for r in outputs))} to {out}")
    return EXIT_OK


# -- edit / eval / ablate ----------------------------------------------------


def cmd_edit(args) -> int:
    _require_seed(args)
    tasks = tuple(args.tasks.split(","))
    suite = build_edit_suite(
        args.n_scenes, args.seed, width=args.width, height=args.height, tasks=tasks
    )
    report = run_edit_protocol(suite, tasks=tasks)
    scorer = HttpScorer(args.scorer_url) if args.scorer_url else None
    images = [t.composite for t, _ in suite]
    captions = [t.captions.get("composite_text", "") for t, _ in suite]
    report["external_scores"] = score_with_external(images, captions, scorer=scorer)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    save_report(report, out / "edit_report.json")
    _write_run_json(out, "edit", args)
    print(f"edit report at {out / 'edit_report.json'}")
    return EXIT_OK


def cmd_eval(args) -> int:
    if args.eval_action == "fid":
        set_a = [t.composite for t in read_manifest(args.dir_a)]
        set_b = [t.composite for t in read_manifest(args.dir_b)]
        extractor = FeatureExtractor()
        value = fid(
            FidStats.from_features(extractor.extract(set_a)),
            FidStats.from_features(extractor.extract(set_b)),
        )
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        save_report(
            {"schema_version": 1, "fid": value, "n_a": len(set_a), "n_b": len(set_b)},
            out / "fid_report.json",
        )
        _write_run_json(out, "eval", args)
        print(f"fid = {value:.6f}")
        return EXIT_OK
    if args.eval_action == "edits":
        return cmd_edit(args)
    return cmd_ablate(args)


def cmd_ablate(args) -> int:
    _require_seed(args)
    dataset = read_manifest(args.manifest)
    model_cfg = _model_config_from_args(args)
    report = run_ablation(
        dataset,
        model_cfg,
        per_mode_steps=args.per_mode_steps,
        seed=args.seed,
        train_kwargs={
            "batch_size": args.batch_size,
            "lr": args.lr,
            "warmup_steps": args.warmup_steps,
        },
    )
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    save_report(report, out / "ablation_report.json")
    _write_run_json(out, "ablate", args)
    print(f"ablation report at {out / 'ablation_report.json'}")
    return EXIT_OK


# -- parser ------------------------------------------------------------------


def _add_common(p):
    p.add_argument("--config", help="config file (key=value lines or JSON, e.g. a run.json)")
    p.add_argument("--out", default="runs/out", help="output directory")
    p.add_argument("--workers", type=int, default=1, help="parallel workers (1 = bit-exact)")


def _add_model_flags(p):
    p.add_argument("--dim", type=int, default=128)
    p.add_argument("--depth", type=int, default=4)
    p.add_argument("--heads", type=int, default=4)
    p.add_argument("--patch", type=int, default=8)
    p.add_argument("--image-size", type=int, default=64)
    p.add_argument("--vocab", type=int, default=256)
    p.add_argument("--text-len", type=int, default=16)
    p.add_argument("--schedule", choices=("linear_flow", "vp"), default="linear_flow")
    p.add_argument("--sample-steps", type=int, default=50)
    p.add_argument("--mlp-ratio", type=int, default=2)


def _add_train_flags(p):
    p.add_argument("--steps", type=int, default=2000)
    p.add_argument("--batch-size", type=int, default=8)
    p.add_argument("--lr", type=float, default=3e-4)
    p.add_argument("--warmup-steps", type=int, default=200)
    p.add_argument("--weight-decay", type=float, default=0.0)
    p.add_argument("--modes", default="fg_gen,bg_gen,text2all")
    p.add_argument("--log-every", type=int, default=1)
    p.add_argument("--lr-schedule", choices=("constant", "cosine"), default="constant")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="layerlab",
        description=__doc__,
        formatter_class=argparse.RawDescriptionHelpFormatter,
    )
    parser.add_argument("--version", action="version", version=f"layerlab {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="generate a synthetic layered dataset")
    _add_common(p)
    p.add_argument("--n", type=int, default=100)
    p.add_argument("--seed", type=int, default=None, help="required; no wall-clock default")
    p.add_argument("--width", type=int, default=64)
    p.add_argument("--height", type=int, default=64)
    p.add_argument("--corrupt-fraction", type=float, default=0.0,
                   help="fraction of records with an injected background defect")
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("curate", help="fit / score / filter with the background curator")
    p.add_argument("curate_action", choices=("fit", "score", "filter"))
    _add_common(p)
    p.add_argument("--n", type=int, default=1000)
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--width", type=int, default=64)
    p.add_argument("--height", type=int, default=64)
    p.add_argument("--ring-radius", type=int, default=8)
    p.add_argument("--model", help="curator model JSON (score/filter)")
    p.add_argument("--composite", help="composite PNG (score)")
    p.add_argument("--mask", help="mask PNG (score)")
    p.add_argument("--background", help="candidate background PNG (score)")
    p.add_argument("--manifest", help="manifest directory (filter)")
    p.add_argument("--threshold", type=float, default=None)
    p.set_defaults(func=cmd_curate)

    p = sub.add_parser("train", help="train the layer-conditional denoiser")
    _add_common(p)
    p.add_argument("--manifest", required=True)
    p.add_argument("--seed", type=int, default=None, help="required; no wall-clock default")
    _add_model_flags(p)
    _add_train_flags(p)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("sample", help="sample layers from a checkpoint")
    _add_common(p)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--mode", choices=("fg_gen", "bg_gen", "text2all"), required=True)
    p.add_argument("--caption", default="")
    p.add_argument("--mask", help="mask PNG condition")
    p.add_argument("--bg", help="background PNG condition")
    p.add_argument("--fg", help="foreground PNG condition")
    p.add_argument("--steps", type=int, default=None)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_sample)

    def add_edit_flags(p):
        _add_common(p)
        p.add_argument("--n-scenes", type=int, default=50)
        p.add_argument("--seed", type=int, default=None)
        p.add_argument("--width", type=int, default=64)
        p.add_argument("--height", type=int, default=64)
        p.add_argument("--tasks", default="R,M,C")
        p.add_argument("--scorer-url", default=None, help="optional external scorer endpoint")

    p = sub.add_parser("edit", help="run the layer editing protocol")
    add_edit_flags(p)
    p.set_defaults(func=cmd_edit)

    p = sub.add_parser("eval", help="fid / edits / ablate evaluations")
    peval = p.add_subparsers(dest="eval_action", required=True)
    pf = peval.add_parser("fid", help="FID between two manifests' composites")
    _add_common(pf)
    pf.add_argument("--dir-a", required=True)
    pf.add_argument("--dir-b", required=True)
    pf.set_defaults(func=cmd_eval, eval_action="fid")
    pe = peval.add_parser("edits", help="layer editing protocol")
    add_edit_flags(pe)
    pe.set_defaults(func=cmd_eval, eval_action="edits")
    pa = peval.add_parser("ablate", help="unified vs separate-task comparison")
    _add_common(pa)
    pa.add_argument("--manifest", required=True)
    pa.add_argument("--seed", type=int, default=None)
    pa.add_argument("--per-mode-steps", type=int, default=50)
    _add_model_flags(pa)
    pa.add_argument("--batch-size", type=int, default=8)
    pa.add_argument("--lr", type=float, default=3e-4)
    pa.add_argument("--warmup-steps", type=int, default=20)
    pa.set_defaults(func=cmd_eval, eval_action="ablate")

    p = sub.add_parser("ablate", help="unified vs separate-task comparison")
    _add_common(p)
    p.add_argument("--manifest", required=True)
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--per-mode-steps", type=int, default=50)
    _add_model_flags(p)
    p.add_argument("--batch-size", type=int, default=8)
    p.add_argument("--lr", type=float, default=3e-4)
    p.add_argument("--warmup-steps", type=int, default=20)
    p.set_defaults(func=cmd_ablate)

    return parser


_ERROR_CODES = [
    ((CliError,), None, None),
    ((FileNotFoundError, ManifestError), "missing-input", EXIT_MISSING_INPUT),
    ((ModelError, AutodiffError), "model", EXIT_RUNTIME),
    ((CurateError, EvalError, SceneError, ImagingError), "runtime", EXIT_RUNTIME),
    ((ValueError, TypeError), "invalid-config", EXIT_CONFIG),
]


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        _apply_config_defaults(args, sys.argv[1:] if argv is None else list(argv))
        return args.func(args)
    except CliError as exc:
        print(f"error:{exc.category}: {exc}", file=sys.stderr)
        return exc.code
    except Exception as exc:  # map library errors to documented exit codes
        for types, category, code in _ERROR_CODES[1:]:
            if isinstance(exc, types):
                print(f"error:{category}: {exc}", file=sys.stderr)
                return code
        raise


if __name__ == "__main__":
    sys.exit(main())
