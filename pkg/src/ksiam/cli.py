"""Command line interface.

Exit codes: 0 success, 2 usage/config, 3 data, 4 tile capacity, 5 internal.
"""
from __future__ import annotations

import argparse
import csv
import dataclasses
import logging
import os
import sys
from pathlib import Path

from . import __version__
from .config import CONFIG_KEYS, build_train_config, read_config, split_keys, write_config
from .data import DatasetManifest, load_manifest, parse_roles
from .errors import CapacityError, ConfigError, DataError, FoldError, KSiamError
from .training import TrainConfig

log = logging.getLogger("ksiam")

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_CAPACITY, EXIT_INTERNAL = 0, 2, 3, 4, 5

COMMANDS = ("generate", "train", "evaluate", "cross-validate", "hpsearch", "ablation", "predict", "plot-roc")
PIPELINES = ("ksiam", "seg_siam", "two_stage", "tilewise")

# command options: (flag, dest, type, default, help); defaults apply after the config file
_COMMON = [("--out", "out", str, None, "output directory (default: $KSIAM_OUT or ./runs)"),
           ("--workers", "workers", int, 1, "parallel processes; 1 gives the determinism contract")]
_DATA = [("--data", "data", str, None, "dataset manifest CSV")]
_CV = [("--search-fold", "search_fold", int, 0, "fold reserved for hyperparameter search"),
       ("--test-folds", "test_folds", str, "1,2,3,4", "comma separated test folds"),
       ("--n-folds", "n_folds", int, 5, "number of folds assigned when the manifest has none")]
_CHECKPOINT = [("--checkpoint", "checkpoint", str, None, "model checkpoint (.safetensors)")]

_OPTIONS = {
    "generate": [("--n-patients", "n_patients", int, 200, None),
                 ("--positive-fraction", "positive_fraction", float, 0.17, None),
                 ("--signal-tile-fraction", "signal_tile_fraction", float, 0.25, None),
                 ("--slide-size", "slide_size", str, "1536,1536", "height,width in native pixels"),
                 ("--mpp", "microns_per_pixel", float, 0.5, "native microns per pixel"),
                 ("--tissue-fraction", "tissue_fraction", float, 0.6, None),
                 ("--tumor-fraction", "tumor_fraction_of_tissue", float, 0.5, None),
                 ("--heads", "heads", str, "MSI", "comma separated head names"),
                 ("--motif-px", "motif_px", int, 64, None),
                 ("--motif-square-px", "motif_square_px", int, 8, None),
                 ("--motif-opacity", "motif_opacity", float, 1.0, "blend weight of the motif over tissue"),
                 ("--n-folds", "n_folds", int, 5, "assign patient folds (0 leaves them empty)")],
    "train": _DATA + [("--folds", "folds", str, None, "training folds (default: every patient)"),
                      ("--pipeline", "pipeline", str, "ksiam", f"one of {', '.join(PIPELINES)}")],
    "evaluate": _DATA + _CHECKPOINT + [("--folds", "folds", str, None, "folds to evaluate (default: all)")],
    "cross-validate": _DATA + _CV + [("--pipeline", "pipeline", str, "ksiam", f"one of {', '.join(PIPELINES)}")],
    "hpsearch": _DATA + [("--search-fold", "search_fold", int, 0, None),
                         ("--n-folds", "n_folds", int, 5, None),
                         ("--n-runs", "n_runs", int, 96, None),
                         ("--validation-fraction", "validation_fraction", float, 0.2, None),
                         ("--blr-range", "blr_range", str, "3e-6,1e-4", None),
                         ("--bs-range", "bs_range", str, "4,24", None),
                         ("--epochs-range", "epochs_range", str, "32,96", None),
                         ("--warmup-range", "warmup_range", str, "0,18", None),
                         ("--pipeline", "pipeline", str, "ksiam", None)],
    "ablation": _DATA + _CV + [("--pipelines", "pipelines", str, ",".join(PIPELINES), None)],
    "predict": _DATA + _CHECKPOINT + [("--patients", "patients", str, None, "comma separated ids (default: all)"),
                                      ("--roles", "roles", str, None, "slide roles (default: eval_roles)")],
    "plot-roc": [("--input", "inputs", str, None, "label=path/to/roc.csv, comma separated"),
                 ("--title", "title", str, "ROC", None)],
}
_NO_TRAIN_CONFIG = {"generate", "plot-roc", "evaluate", "predict"}


class _Parser(argparse.ArgumentParser):
    def error(self, message):  # usage errors print help text
        self.print_help(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="ksiam", description="k-Siamese whole-slide classification toolkit")
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)
    for name in COMMANDS:
        p = sub.add_parser(name)
        p.add_argument("--config", help="flat key = value config file; flags override it")
        p.add_argument("--seed", type=int, default=None)
        p.add_argument("-v", "--verbose", action="count", default=0)
        for flag, dest, typ, _, help_ in _COMMON + _OPTIONS[name]:
            p.add_argument(flag, dest=dest, type=typ, default=None, help=help_)
        if name not in _NO_TRAIN_CONFIG:
            g = p.add_argument_group("training configuration (same keys as the config file)")
            for key in CONFIG_KEYS:
                if key == "seed":
                    continue
                flags = [f"--{key}"] + ([f"--{key.replace('_', '-')}"] if "_" in key else [])
                g.add_argument(*flags, dest=f"cfg:{key}", default=None, metavar="VALUE")
    return parser


@dataclasses.dataclass
class Run:
    command: str
    options: dict
    config: TrainConfig | None
    out: Path

    def __getattr__(self, name):
        try:
            return self.options[name]
        except KeyError:
            raise AttributeError(name) from None


def resolve(args: argparse.Namespace) -> Run:
    """Merge built-in defaults < config file < flags."""
    file_values = read_config(args.config) if args.config else {}
    file_values.pop("command", None)
    train_file, other_file = split_keys(file_values)
    specs = _COMMON + _OPTIONS[args.command]
    known = {dest for _, dest, *_ in specs}
    stray = sorted(set(other_file) - known)
    if stray:
        raise ConfigError(f"config keys not understood by '{args.command}': {', '.join(stray)}")
    options = {}
    for flag, dest, typ, default, _ in specs:
        value = getattr(args, dest)
        if value is None and dest in other_file:
            try:
                value = typ(other_file[dest])
            except ValueError:
                raise ConfigError(f"invalid value for {dest}: {other_file[dest]!r}") from None
        options[dest] = default if value is None else value
    config = None
    if args.command not in _NO_TRAIN_CONFIG:
        values = dict(train_file)
        values.update({k: v for k in CONFIG_KEYS if (v := getattr(args, f"cfg:{k}", None)) is not None})
        if args.seed is not None:
            values["seed"] = args.seed
        config = build_train_config(values)
    elif args.seed is not None:
        options["seed"] = args.seed
    elif "seed" in train_file:
        options["seed"] = int(train_file["seed"])
    out = Path(options["out"] or os.environ.get("KSIAM_OUT") or "runs")
    options["out"] = str(out)
    return Run(args.command, options, config, out)


def snapshot(run: Run) -> Path:
    extra = {"command": run.command, **{k: v for k, v in run.options.items() if v is not None}}
    path = run.out / "resolved_config.cfg"
    if run.config is not None:
        return write_config(path, run.config, extra, header=f"resolved configuration of 'ksiam {run.command}'")
    path.parent.mkdir(parents=True, exist_ok=True)
    lines = [f"# resolved configuration of 'ksiam {run.command}'"] + [f"{k} = {v}" for k, v in extra.items()]
    path.write_text("\n".join(lines) + "\n", encoding="utf-8")
    return path


def _ints(text: str | None) -> list[int] | None:
    if text is None or str(text).strip() in ("", "all"):
        return None
    try:
        return [int(v) for v in str(text).split(",") if v.strip()]
    except ValueError:
        raise ConfigError(f"expected comma separated integers, got {text!r}") from None


def _pair(text: str, typ):
    parts = [p.strip() for p in str(text).split(",")]
    if len(parts) != 2:
        raise ConfigError(f"expected 'low,high', got {text!r}")
    try:
        return typ(parts[0]), typ(parts[1])
    except ValueError:
        raise ConfigError(f"expected 'low,high', got {text!r}") from None


def _pipeline(name: str):
    from .baselines import PipelineKind

    try:
        return PipelineKind(name)
    except ValueError:
        raise ConfigError(f"unknown pipeline {name!r}; choose from {', '.join(PIPELINES)}") from None


def _dataset(run: Run) -> DatasetManifest:
    if not run.data:
        raise ConfigError("--data is required")
    return load_manifest(run.data)


# commands ----------------------------------------------------------------------

def cmd_generate(run: Run) -> None:
    from .evaluation import ensure_folds
    from .synthetic import SyntheticSpec, generate_synthetic_dataset

    spec = SyntheticSpec(
        n_patients=run.n_patients, positive_fraction=run.positive_fraction,
        signal_tile_fraction=run.signal_tile_fraction, slide_size_px=_pair(run.slide_size, int),
        microns_per_pixel=run.microns_per_pixel, tissue_fraction=run.tissue_fraction,
        tumor_fraction_of_tissue=run.tumor_fraction_of_tissue,
        heads=tuple(h.strip() for h in run.heads.split(",") if h.strip()),
        motif_px=run.motif_px, motif_square_px=run.motif_square_px,
        motif_opacity=run.motif_opacity, rng_seed=run.options.get("seed", 0) or 0)
    manifest = generate_synthetic_dataset(spec, run.out)
    if run.n_folds:
        ensure_folds(manifest, run.n_folds, spec.rng_seed).write(run.out / "manifest.csv")
    print(f"wrote {len(manifest.rows)} slides of {spec.n_patients} patients to {run.out / 'manifest.csv'}")


def cmd_train(run: Run) -> None:
    from .baselines import train_pipeline
    from .checkpoint import save_checkpoint
    from .plots import plot_history

    dataset = _dataset(run)
    folds = _ints(run.folds)
    ids = dataset.patient_ids if folds is None else None
    model, history = train_pipeline(_pipeline(run.pipeline), dataset, run.config, folds=folds, patient_ids=ids)
    history.checkpoint = str(save_checkpoint(model, run.out / "model.safetensors", run.config, run.pipeline))
    (run.out / "history.csv").write_text(history.to_csv(), encoding="utf-8")
    plot_history({run.pipeline: history}, run.out / "history.png")
    if history.skipped_slides:
        log.warning("%d slide draws skipped for lack of tiles", len(history.skipped_slides))
    print(f"final loss {history.losses[-1]:.4f}; checkpoint {history.checkpoint}")


def cmd_evaluate(run: Run) -> None:
    from .baselines import PipelineKind
    from .checkpoint import load_checkpoint
    from .evaluation import build_report, emit_report, predict_patient
    from .seeding import derive_seed
    from .tiling import TileSampler

    if not run.checkpoint:
        raise ConfigError("--checkpoint is required")
    model, config, meta = load_checkpoint(run.checkpoint)
    dataset = _dataset(run)
    folds = _ints(run.folds)
    patients = dataset.patients()
    ids = [p for p in sorted(patients) if folds is None or patients[p].fold in folds]
    if not ids:
        raise FoldError("no patients in the selected folds")
    mask = PipelineKind(config_pipeline(meta)).mask_source()
    seed = derive_seed(_seed(run, config), "inference")
    sampler = TileSampler(config.tiling)
    scores = [predict_patient(model, patients[p], config.eval_roles, config.k_infer, seed, dataset.heads, sampler, mask)
              for p in ids]
    report = build_report(scores, dataset.heads, "all" if folds is None else ",".join(map(str, folds)))
    emit_report(report, run.out)
    for h in report.heads:
        print(f"{h.head}: n={h.n} auc={h.auc:.4f} ap={h.ap:.4f}")


def config_pipeline(meta: dict) -> str:
    return meta.get("pipeline") or ("ksiam" if meta.get("kind") == "ksiam" else "tilewise")


def _seed(run: Run, config: TrainConfig) -> int:
    seed = run.options.get("seed")
    return config.seed if seed is None else seed


def cmd_cross_validate(run: Run) -> None:
    from .evaluation import cross_validate, emit_report
    from .plots import plot_history

    kind = _pipeline(run.pipeline)
    result = cross_validate(_dataset(run), run.config, run.search_fold, _ints(run.test_folds) or (),
                            pipeline=kind.value, n_folds=run.n_folds, workers=run.workers)
    emit_report(result, run.out)
    for f, h in sorted(result.histories.items()):
        (run.out / f"history_fold{f}.csv").write_text(h.to_csv(), encoding="utf-8")
    plot_history({f"fold {f}": h for f, h in sorted(result.histories.items())}, run.out / "history.png")
    for head in result.heads:
        h = result.pooled.head(head)
        print(f"{kind.value} {head}: pooled n={h.n} auc={h.auc:.4f} ap={h.ap:.4f}")


def cmd_hpsearch(run: Run) -> None:
    from .hpsearch import SearchSpace, emit_search, run_search

    space = SearchSpace(_pair(run.blr_range, float), _pair(run.bs_range, int), _pair(run.epochs_range, int),
                        _pair(run.warmup_range, int), run.n_runs, run.config.seed).validate()
    result = run_search(_dataset(run), space, run.search_fold, run.validation_fraction, base=run.config,
                        pipeline=_pipeline(run.pipeline).value, n_folds=run.n_folds, workers=run.workers)
    emit_search(result, run.out)
    b = result.best
    print(f"best run {b.run_index}: objective {b.objective:.4f} (blr {b.config.blr:.3g}, bs {b.config.bs}, "
          f"epochs {b.config.epochs}, warmup {b.config.warmup})")


def cmd_ablation(run: Run) -> None:
    from .baselines import emit_ablation, run_ablation

    kinds = [_pipeline(p.strip()) for p in run.pipelines.split(",") if p.strip()]
    result = run_ablation(_dataset(run), run.config, run.search_fold, _ints(run.test_folds) or (),
                          pipelines=kinds, n_folds=run.n_folds, workers=run.workers)
    emit_ablation(result, run.out)
    sys.stdout.write(result.comparison_csv())


def cmd_predict(run: Run) -> None:
    from .baselines import PipelineKind
    from .checkpoint import load_checkpoint
    from .evaluation import predict_slide
    from .data import get_patient_slides
    from .seeding import derive_seed, rng_for
    from .tiling import TileSampler

    if not run.checkpoint:
        raise ConfigError("--checkpoint is required")
    model, config, meta = load_checkpoint(run.checkpoint)
    dataset = _dataset(run)
    roles = parse_roles(run.roles) if run.roles else config.eval_roles
    ids = [p.strip() for p in run.patients.split(",")] if run.patients else dataset.patient_ids
    mask = PipelineKind(config_pipeline(meta)).mask_source()
    seed = derive_seed(_seed(run, config), "inference")
    sampler = TileSampler(config.tiling)
    run.out.mkdir(parents=True, exist_ok=True)
    path = run.out / "predictions.csv"
    with path.open("w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["patient_id", "slide_id", "head", "probability", "k_used"])
        for pid in ids:
            for slide in get_patient_slides(dataset, pid, roles):
                pred = predict_slide(model, slide, config.k_infer, rng_for(seed, "infer", slide.slide_id), sampler,
                                     mask(slide) if mask else None)
                for head, prob in zip(dataset.heads, pred.probs):
                    w.writerow([pid, slide.slide_id, head, repr(float(prob)), pred.k_used])
    print(f"wrote {path}")


def cmd_plot_roc(run: Run) -> None:
    from .plots import plot_roc

    if not run.inputs:
        raise ConfigError("--input label=path[,label=path...] is required")
    curves = {}
    for item in run.inputs.split(","):
        label, sep, path = item.partition("=")
        if not sep:
            label, path = Path(item).stem, item
        try:
            with open(path, newline="", encoding="utf-8") as fh:
                rows = list(csv.DictReader(fh))
            curves[label] = [(float(r["fpr"]), float(r["tpr"]), float(r["threshold"])) for r in rows]
        except OSError as exc:
            raise DataError(f"cannot read {path}: {exc}") from None
        except (KeyError, ValueError):
            raise DataError(f"{path} is not an ROC point file (fpr,tpr,threshold)") from None
    print(f"wrote {plot_roc(curves, run.out / 'roc.png', title=run.title)}")


HANDLERS = {"generate": cmd_generate, "train": cmd_train, "evaluate": cmd_evaluate,
            "cross-validate": cmd_cross_validate, "hpsearch": cmd_hpsearch, "ablation": cmd_ablation,
            "predict": cmd_predict, "plot-roc": cmd_plot_roc}


def exit_code(exc: BaseException) -> int:
    if isinstance(exc, (ConfigError, FoldError)):
        return EXIT_USAGE
    if isinstance(exc, CapacityError):
        return EXIT_CAPACITY
    if isinstance(exc, (DataError, OSError)):
        return EXIT_DATA
    return EXIT_INTERNAL


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    logging.basicConfig(level=logging.WARNING - 10 * min(args.verbose, 2),
                        format="%(asctime)s %(levelname)s %(name)s: %(message)s")
    try:
        run = resolve(args)
        snapshot(run)
        HANDLERS[run.command](run)
    except KSiamError as exc:
        print(f"ksiam {args.command}: {type(exc).__name__}: {exc}", file=sys.stderr)
        return exit_code(exc)
    except OSError as exc:
        print(f"ksiam {args.command}: I/O error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except Exception as exc:  # noqa: BLE001
        log.debug("internal error", exc_info=True)
        print(f"ksiam {args.command}: internal error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_INTERNAL
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
