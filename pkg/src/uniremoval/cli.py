"""``uniremoval`` command line: corpus synthesis, training, restoration, evaluation.

Exit codes: 0 success, 1 runtime failure, 2 bad arguments or a missing
prerequisite (the missing path is named on stderr).
"""
from __future__ import annotations

import argparse
import datetime as _dt
import json
import logging
import os
import subprocess
import sys
import tempfile
from importlib import metadata
from pathlib import Path

from . import config as C
from .imagedata import PairedDataset, UnpairedDataset, list_images, load_image, parse_kinds, save_image

log = logging.getLogger("uniremoval")

EXIT_OK, EXIT_FAILURE, EXIT_USAGE = 0, 1, 2
MANIFEST_NAME = "run_manifest.json"


class UsageError(Exception):
    """Bad arguments or a missing prerequisite (exit code 2)."""


# --------------------------------------------------------------------------
# run manifest
# --------------------------------------------------------------------------

def _now() -> str:
    return _dt.datetime.now(_dt.timezone.utc).isoformat(timespec="seconds")


def describe_version() -> str:
    """``git describe``-style identifier, falling back to the package version."""
    try:
        out = subprocess.run(["git", "describe", "--always", "--dirty", "--tags"], capture_output=True,
                             text=True, timeout=5, cwd=Path(__file__).resolve().parent)
        if out.returncode == 0 and out.stdout.strip():
            return out.stdout.strip()
    except (OSError, subprocess.SubprocessError):
        pass
    try:
        return metadata.version("artifact")
    except metadata.PackageNotFoundError:
        return "unknown"


def write_json_atomic(data, path) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(prefix=path.name, suffix=".tmp", dir=path.parent)
    with os.fdopen(fd, "w", encoding="utf-8") as fh:
        json.dump(data, fh, indent=2, sort_keys=True, default=str)
    os.replace(tmp, path)


class RunManifest:
    def __init__(self, command: str, argv, resolved_config, seed):
        self.data = {"command": command, "argv": list(argv), "resolved_config": resolved_config,
                     "seed": seed, "version": describe_version(), "start": _now(), "end": None,
                     "artifacts": []}

    def artifact(self, path) -> None:
        self.data["artifacts"].append(str(path))

    def write(self, path) -> None:
        self.data["end"] = _now()
        write_json_atomic(self.data, path)


# --------------------------------------------------------------------------
# shared helpers
# --------------------------------------------------------------------------

def _profile_config(args) -> dict:
    try:
        raw = C.load_config_file(args.config)
    except FileNotFoundError as exc:
        raise UsageError(f"config file not found: {exc.filename}") from exc
    try:
        return C.resolve_profile(raw, args.profile)
    except KeyError as exc:
        raise UsageError(str(exc.args[0])) from exc


def _raw_config(args) -> dict:
    try:
        return C.load_config_file(args.config)
    except FileNotFoundError as exc:
        raise UsageError(f"config file not found: {exc.filename}") from exc


def _train_config(args, stage: str) -> C.TrainConfig:
    overrides = list(args.override or [])
    if args.seed is not None:
        overrides.append(f"seed={args.seed}")
    if args.workdir is not None:
        overrides.append(f"workdir={json.dumps(str(args.workdir))}")
    if getattr(args, "data", None) is not None:
        key = "data.unpaired_root" if stage == "da" else "data.paired_root"
        overrides.append(f"{key}={json.dumps(str(args.data))}")
    try:
        flat = C.stage_dict(_profile_config(args), stage)
        flat = C.apply_overrides(flat, overrides)
        return C.TrainConfig.from_dict(flat)
    except (KeyError, ValueError, TypeError) as exc:
        raise UsageError(f"invalid configuration: {exc}") from exc


def _require_file(path) -> Path:
    path = Path(path)
    if not path.is_file():
        raise UsageError(f"missing prerequisite: {path}")
    return path


def _require_dir(path, what: str) -> Path:
    path = Path(path)
    if not path.is_dir():
        raise UsageError(f"{what} does not exist: {path}")
    return path


def teacher_checkpoint_path(workdir, kind_label: str) -> Path:
    return Path(workdir) / f"teacher_{kind_label}.ckpt"


def stage_paths(workdir, name: str) -> dict:
    workdir = Path(workdir)
    return {"checkpoint": workdir / f"{name}.ckpt", "last": workdir / f"{name}.last.ckpt",
            "log": workdir / "logs" / f"{name}.csv", "plot": workdir / "logs" / f"{name}.png",
            "manifest": workdir / "manifests" / f"{name}.json"}


def plot_log(records, columns, path, title: str) -> Path:
    import matplotlib
    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    fig, ax = plt.subplots(figsize=(6, 3.5))
    its = [r["iteration"] for r in records]
    for col in columns:
        ax.plot(its, [r[col] for r in records], label=col, linewidth=1)
    ax.set_xlabel("iteration")
    ax.set_title(title)
    ax.legend(fontsize=7)
    fig.tight_layout()
    fig.savefig(path, dpi=100)
    plt.close(fig)
    return Path(path)


def plot_metrics(report, path) -> Path:
    import matplotlib
    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    fig, axes = plt.subplots(1, len(report.metrics), figsize=(3.2 * len(report.metrics), 3), squeeze=False)
    for ax, m in zip(axes[0], report.metrics):
        ax.hist([r[m] for _, r in report.rows], bins=20)
        ax.set_title(m)
    fig.tight_layout()
    fig.savefig(path, dpi=100)
    plt.close(fig)
    return Path(path)


# --------------------------------------------------------------------------
# commands
# --------------------------------------------------------------------------

def cmd_make_clean(args) -> int:
    from .degradations import write_clean_corpus

    corpus = _raw_config(args).get("desk_corpus", {})
    n = args.count if args.count is not None else corpus.get("clean_images", 200)
    size = args.size if args.size is not None else corpus.get("size", 64)
    seed = args.seed if args.seed is not None else 0
    if n <= 0 or size < 8:
        raise UsageError("--count must be positive and --size at least 8")
    manifest = RunManifest("make-clean", args.argv, {"count": n, "size": size}, seed)
    for p in write_clean_corpus(args.out_dir, n, size, seed):
        manifest.artifact(p)
    manifest.write(args.manifest or Path(args.out_dir) / MANIFEST_NAME)
    return EXIT_OK


def cmd_synth_data(args) -> int:
    from .degradations import build_real_dataset, build_synthetic_dataset

    clean_dir = _require_dir(args.clean_dir, "clean image directory")
    if not list_images(clean_dir):
        raise UsageError(f"clean image directory is empty: {clean_dir}")
    try:
        kinds = parse_kinds(args.kinds.split(","))
    except ValueError as exc:
        raise UsageError(str(exc)) from exc
    seed = args.seed if args.seed is not None else _profile_config(args).get("seed", 0)
    out_dir = Path(args.out_dir)
    if out_dir.resolve() == clean_dir.resolve():
        raise UsageError("output directory must differ from the clean image directory")
    builder = build_real_dataset if args.real else build_synthetic_dataset
    built = builder(clean_dir, out_dir, kinds, seed)
    manifest = RunManifest("synth-data", args.argv,
                           {"kinds": [k.label for k in kinds], "real": args.real, "profile": args.profile},
                           seed)
    manifest.artifact(out_dir / "manifest.json")
    for rec in built["entries"]:
        manifest.artifact(out_dir / (rec["degraded"] or rec["clean"]))
    manifest.write(args.manifest or out_dir / MANIFEST_NAME)
    return EXIT_OK


def _load_ckpt(path, stage):
    from .training import CheckpointError, StageError, load_checkpoint

    path = _require_file(path)
    try:
        return load_checkpoint(path, expected_stage=stage)
    except (CheckpointError, StageError) as exc:
        raise UsageError(str(exc)) from exc


def cmd_train(args) -> int:
    from . import training as T
    from .imagedata import DegradationKind

    cfg = _train_config(args, args.stage)
    workdir = Path(cfg.workdir)
    if args.stage == "teacher":
        if not args.kind:
            raise UsageError("train teacher needs --kind")
        kind = DegradationKind.parse(args.kind)
        name = f"teacher_{kind.label}"
    else:
        name = args.stage
    paths = stage_paths(workdir, name)
    out_path = Path(args.out) if args.out else paths["checkpoint"]
    resume = _load_ckpt(args.resume, args.stage) if args.resume else None

    if args.stage == "teacher":
        root = _require_dir(cfg.data["paired_root"], "paired data root")
        data = PairedDataset.from_root(root, kind)
        if len(data) == 0:
            raise UsageError(f"no {kind.label} pairs under {root}")
        run = lambda: T.train_teacher(kind, data, cfg, out_path, paths["log"], resume, args.force,
                                      paths["last"])
    elif args.stage == "kt":
        given = dict(item.split("=", 1) for item in (args.teacher or []))
        teachers = {}
        for kind in cfg.kinds:
            label = DegradationKind(kind).label
            teachers[label] = _load_ckpt(given.get(label, teacher_checkpoint_path(workdir, label)), "teacher")
        root = _require_dir(cfg.data["paired_root"], "paired data root")
        data = {DegradationKind(k).label: PairedDataset.from_root(root, k) for k in cfg.kinds}
        run = lambda: T.train_kt(teachers, data, cfg, out_path, paths["log"], resume, args.force, paths["last"])
    else:
        student = _load_ckpt(args.student or stage_paths(workdir, "kt")["checkpoint"], "kt")
        root = _require_dir(cfg.data["unpaired_root"], "unpaired data root")
        _require_dir(Path(root) / "clear", "clear image directory")
        data = UnpairedDataset.from_root(root, [DegradationKind(k).label for k in cfg.kinds])
        try:
            data.validate()
        except ValueError as exc:
            raise UsageError(str(exc)) from exc
        run = lambda: T.train_da(student, data, cfg, out_path, paths["log"], resume, args.force, paths["last"])

    manifest = RunManifest(f"train {args.stage}", args.argv, cfg.to_dict(), cfg.seed)
    ckpt = run()
    records = T.read_log(paths["log"])
    cols = [c for c in records[0] if c.startswith("loss")] if records else []
    if records:
        plot_log(records, cols, paths["plot"], name)
        manifest.artifact(paths["plot"])
    for p in (out_path, paths["log"]):
        manifest.artifact(p)
    manifest.data["heldout_psnr"] = ckpt.extra.get("heldout_psnr")
    manifest.write(args.manifest or paths["manifest"])
    if ckpt.extra.get("heldout_psnr"):
        print(json.dumps({"stage": args.stage, "heldout_psnr": ckpt.extra["heldout_psnr"]}))
    return EXIT_OK


def cmd_restore(args) -> int:
    from .training import restore_array, student_from_checkpoint

    in_dir = _require_dir(args.in_dir, "input directory")
    ckpt = _load_ckpt(args.checkpoint, None)
    out_dir = Path(args.out_dir)
    if out_dir.resolve() == in_dir.resolve():
        raise UsageError("output directory must differ from the input directory")
    inputs = list_images(in_dir)
    if not inputs:
        raise UsageError(f"no images in {in_dir}")
    net = student_from_checkpoint(ckpt)
    manifest = RunManifest("restore", args.argv, {"checkpoint": str(args.checkpoint), "stage": ckpt.stage},
                           args.seed)
    for path in inputs:
        img = load_image(path)
        restored = restore_array(net, img[None])[0]
        dst = out_dir / (path.name if path.suffix.lower() == ".png" else path.stem + ".png")
        save_image(restored, dst)
        manifest.artifact(dst)
    manifest.write(args.manifest or out_dir / MANIFEST_NAME)
    return EXIT_OK


def cmd_evaluate(args) -> int:
    from .metrics import FULL_REFERENCE, NO_REFERENCE, evaluate_images

    metrics = [m.strip().lower() for m in args.metrics.split(",") if m.strip()]
    unknown = set(metrics) - set(FULL_REFERENCE) - set(NO_REFERENCE)
    if not metrics or unknown:
        raise UsageError(f"unknown metrics {sorted(unknown)}; choose from {FULL_REFERENCE + NO_REFERENCE}")
    needs_ref = [m for m in metrics if m in FULL_REFERENCE]
    if needs_ref and not args.ref_dir:
        raise UsageError(f"metrics {needs_ref} need --ref-dir")
    pred_dir = _require_dir(args.pred_dir, "prediction directory")
    preds = [(p.name, load_image(p)) for p in list_images(pred_dir)]
    if not preds:
        raise UsageError(f"no images in {pred_dir}")
    refs = None
    if needs_ref:
        ref_dir = _require_dir(args.ref_dir, "reference directory")
        refs = {}
        for name, _ in preds:
            ref = ref_dir / name
            if not ref.is_file():
                raise UsageError(f"missing reference image: {ref}")
            refs[name] = load_image(ref)
    if args.brisque_model:
        _require_file(args.brisque_model)
    report = evaluate_images(preds, refs, metrics, args.brisque_model)
    out_csv = Path(args.out_csv)
    report.write_csv(out_csv)
    manifest = RunManifest("evaluate", args.argv, {"metrics": metrics, "pred_dir": str(pred_dir),
                                                  "ref_dir": args.ref_dir}, args.seed)
    manifest.artifact(out_csv)
    if args.plot:
        manifest.artifact(plot_metrics(report, out_csv.with_suffix(".png")))
    manifest.data["aggregate"] = report.aggregate()
    manifest.data["undefined"] = {m: names for m, names in report.undefined().items() if names}
    manifest.write(args.manifest or out_csv.with_name(out_csv.stem + ".manifest.json"))
    print(json.dumps(report.aggregate()))
    return EXIT_OK


# --------------------------------------------------------------------------
# parser
# --------------------------------------------------------------------------

def _common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help=f"config JSON (default: packaged default.json, or ${C.CONFIG_DIR_ENV})")
    p.add_argument("--profile", default="desk", help="config profile (default: desk)")
    p.add_argument("--override", "-o", action="append", metavar="KEY=VALUE",
                   help="dotted config override, repeatable; wins over the config file")
    p.add_argument("--seed", type=int, help="random seed (config key: seed)")
    p.add_argument("--manifest", help="run-manifest output path")
    p.add_argument("-v", "--verbose", action="store_true")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="uniremoval", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("make-clean", help="write a procedural clean image corpus")
    _common(p)
    p.add_argument("--out-dir", required=True)
    p.add_argument("--count", type=int, help="number of images (config key: desk_corpus.clean_images)")
    p.add_argument("--size", type=int, help="square image size (config key: desk_corpus.size)")
    p.set_defaults(func=cmd_make_clean)

    p = sub.add_parser("synth-data", help="degrade clean images into a paired or unpaired corpus")
    _common(p)
    p.add_argument("--clean-dir", required=True)
    p.add_argument("--out-dir", required=True)
    p.add_argument("--kinds", default="haze,rain,blur", help="comma-separated kinds (config key: kinds)")
    p.add_argument("--real", action="store_true", help="unpaired layout with shifted parameter ranges")
    p.set_defaults(func=cmd_synth_data)

    p = sub.add_parser("train", help="run one training stage")
    _common(p)
    p.add_argument("stage", choices=C.STAGES)
    p.add_argument("--kind", help="degradation kind (teacher stage)")
    p.add_argument("--workdir", help="run directory (config key: workdir)")
    p.add_argument("--data", help="dataset root (config keys: data.paired_root / data.unpaired_root)")
    p.add_argument("--teacher", action="append", metavar="KIND=PATH", help="teacher checkpoint (kt stage)")
    p.add_argument("--student", help="KT checkpoint (da stage)")
    p.add_argument("--out", help="checkpoint output path")
    p.add_argument("--resume", help="resume from a checkpoint of the same stage")
    p.add_argument("--force", action="store_true", help="resume despite a config-hash mismatch")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("restore", help="restore every image in a directory")
    _common(p)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--in-dir", required=True)
    p.add_argument("--out-dir", required=True)
    p.set_defaults(func=cmd_restore)

    p = sub.add_parser("evaluate", help="score images with full- or no-reference metrics")
    _common(p)
    p.add_argument("--pred-dir", required=True)
    p.add_argument("--ref-dir")
    p.add_argument("--metrics", default="psnr,ssim")
    p.add_argument("--out-csv", required=True)
    p.add_argument("--brisque-model", help="BRISQUE SVR JSON (default: packaged reference model)")
    p.add_argument("--plot", action="store_true", help="also write a metric histogram PNG")
    p.set_defaults(func=cmd_evaluate)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code) if exc.code is not None else EXIT_OK
    args.argv = ["uniremoval", *(sys.argv[1:] if argv is None else argv)]
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except UsageError as exc:
        print(f"uniremoval {args.command}: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except Exception as exc:  # noqa: BLE001 - uniform exit-code contract
        log.debug("failure", exc_info=True)
        print(f"uniremoval {args.command}: failed: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_FAILURE


if __name__ == "__main__":
    sys.exit(main())
