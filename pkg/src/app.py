import argparse
import csv
import json
import logging
import sys
import time
from pathlib import Path
from typing import Optional

from src.api.settings import (
    AblationSettings,
    EvaluateSettings,
    GenerateSettings,
    ToyDataSettings,
    ToyModelSettings,
    TrainSettings,
    VerifySettings,
    load_settings,
    parse_modality_paths,
    resolve_threads,
)
from src.services.acw_service import DEFAULT_BUDGET, ClassPrototypes, load_head, save_head, train
from src.services.datagen_service import MANIFEST_NAME, diff_datasets, generate_dataset, read_manifest, verify_dataset
from src.services.embedding_service import EmbeddingSet, read_embeddings, write_embeddings
from src.services.errors import ConfigError, DepthForgeError, ModalityMissingError
from src.services.eval_service import (
    FusionMode,
    Protocol,
    evaluate,
    format_report_table,
    run_ablation,
    synth_toy_embeddings,
)
from src.services.model_service import load_model, make_toy_model, save_model

EXIT_OK = 0
EXIT_RUNTIME = 1
EXIT_CONFIG = 2


def _add_toy_flags(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--seed", type=int)
    parser.add_argument("--classes", dest="n_classes", type=int)
    parser.add_argument("--dim", type=int)
    parser.add_argument("--samples-per-class", type=int)
    parser.add_argument("--sigma-clean", dest="noise_sigma_clean", type=float)
    parser.add_argument("--sigma-corrupt", dest="noise_sigma_corrupt", type=float)
    parser.add_argument("--corrupt-fraction", type=float)
    parser.add_argument("--degradation-bias", type=float)
    parser.add_argument("--modalities", help="comma-separated modality names, e.g. rgb,depth")
    parser.add_argument("--out-dir")


def _add_train_flags(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--lr", type=float)
    parser.add_argument("--lambda", dest="lam", type=float)
    parser.add_argument("--batch", type=int)
    parser.add_argument("--epochs", type=int)
    parser.add_argument("--tau", type=float)
    parser.add_argument(
        "--budget", type=float, nargs="?", const=DEFAULT_BUDGET,
        help=f"adapt lambda toward this mean confidence loss; bare --budget uses {DEFAULT_BUDGET}",
    )
    parser.add_argument("--hidden", type=int)
    parser.add_argument("--train-prototypes", action="store_true", default=None)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="depthforge", description="Virtual depth-face data and ACW score fusion.")
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="JSON settings file; flags override its values")
    verbosity = common.add_mutually_exclusive_group()
    verbosity.add_argument("--verbose", action="store_true")
    verbosity.add_argument("--quiet", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("toy-model", parents=[common], help="write a procedural MDL1 morphable model")
    p.add_argument("--seed", type=int)
    p.add_argument("--v-rings", type=int)
    p.add_argument("--k-id", type=int)
    p.add_argument("--k-exp", type=int)
    p.add_argument("--out")

    p = sub.add_parser("generate", parents=[common], help="render a depth/normal dataset")
    p.add_argument("--model")
    p.add_argument("--out-dir")
    p.add_argument("--seed", type=int)
    p.add_argument("--identities", dest="n_identities", type=int)
    p.add_argument("--expressions", dest="n_random_expressions", type=int)
    p.add_argument("--trunc", type=float)
    p.add_argument("--threads", type=int)
    p.add_argument("--progress", action="store_true", default=None)

    p = sub.add_parser("verify", parents=[common], help="check a generated dataset")
    p.add_argument("--dataset")
    p.add_argument("--sample", type=int)
    p.add_argument("--seed", type=int)
    p.add_argument("--against", help="second dataset directory to diff byte-for-byte")

    p = sub.add_parser("toy-data", parents=[common], help="write a synthetic embedding protocol")
    _add_toy_flags(p)

    p = sub.add_parser("train-acw", parents=[common], help="train confidence heads")
    p.add_argument("--embeddings", action="append", metavar="MOD=PATH")
    p.add_argument("--gallery", action="append", metavar="MOD=PATH")
    p.add_argument("--out-dir")
    p.add_argument("--seed", type=int)
    _add_train_flags(p)

    p = sub.add_parser("evaluate", parents=[common], help="rank-1 identification report")
    p.add_argument("--gallery", action="append", metavar="MOD=PATH")
    p.add_argument("--probes", action="append", metavar="MOD=PATH")
    p.add_argument("--heads", action="append", metavar="MOD=PATH")
    p.add_argument("--mode", help="acw | fixed[:w1,w2] | single:<modality>")
    p.add_argument("--weights", help="comma-separated fixed fusion weights")
    p.add_argument("--tags", help="CSV of probe id,tag")
    p.add_argument("--out-dir")

    p = sub.add_parser("ablation", parents=[common], help="single vs fixed vs ACW on a toy protocol")
    _add_toy_flags(p)
    _add_train_flags(p)
    return parser


def _float_list(text: Optional[str], name: str) -> Optional[list[float]]:
    if text is None:
        return None
    try:
        return [float(v) for v in text.split(",")]
    except ValueError:
        raise ConfigError(f"{name} must be comma-separated numbers, got {text!r}")


def _modalities(text: Optional[str]) -> Optional[list[str]]:
    return [m.strip() for m in text.split(",") if m.strip()] if text else None


def _toy_overrides(args: argparse.Namespace) -> dict:
    return {
        "seed": args.seed,
        "n_classes": args.n_classes,
        "dim": args.dim,
        "samples_per_class": args.samples_per_class,
        "noise_sigma_clean": args.noise_sigma_clean,
        "noise_sigma_corrupt": args.noise_sigma_corrupt,
        "corrupt_fraction": args.corrupt_fraction,
        "degradation_bias": args.degradation_bias,
        "modalities": _modalities(args.modalities),
        "out_dir": args.out_dir,
    }


def _train_overrides(args: argparse.Namespace) -> dict:
    return {
        "lr": args.lr,
        "lam": args.lam,
        "batch": args.batch,
        "epochs": args.epochs,
        "tau": args.tau,
        "budget": args.budget,
        "hidden": args.hidden,
        "train_prototypes": args.train_prototypes,
    }


def build_settings(args: argparse.Namespace):
    if args.command == "toy-model":
        overrides = {"seed": args.seed, "v_rings": args.v_rings, "k_id": args.k_id, "k_exp": args.k_exp, "out": args.out}
        return load_settings(ToyModelSettings, args.config, overrides)
    if args.command == "generate":
        overrides = {
            "model": args.model, "out_dir": args.out_dir, "seed": args.seed,
            "n_identities": args.n_identities, "n_random_expressions": args.n_random_expressions,
            "trunc": args.trunc, "threads": args.threads, "progress": args.progress,
        }
        return load_settings(GenerateSettings, args.config, overrides)
    if args.command == "verify":
        overrides = {"dataset": args.dataset, "sample": args.sample, "seed": args.seed, "against": args.against}
        return load_settings(VerifySettings, args.config, overrides)
    if args.command == "toy-data":
        return load_settings(ToyDataSettings, args.config, _toy_overrides(args))
    if args.command == "train-acw":
        overrides = {
            "embeddings": parse_modality_paths(args.embeddings),
            "gallery": parse_modality_paths(args.gallery),
            "out_dir": args.out_dir,
            "seed": args.seed,
            **_train_overrides(args),
        }
        return load_settings(TrainSettings, args.config, overrides)
    if args.command == "evaluate":
        overrides = {
            "gallery": parse_modality_paths(args.gallery),
            "probes": parse_modality_paths(args.probes),
            "heads": parse_modality_paths(args.heads),
            "mode": args.mode,
            "weights": _float_list(args.weights, "--weights"),
            "tags": args.tags,
            "out_dir": args.out_dir,
        }
        return load_settings(EvaluateSettings, args.config, overrides)
    if args.command == "ablation":
        train_values = {k: v for k, v in _train_overrides(args).items() if v is not None}
        overrides = {**_toy_overrides(args), "train": train_values or None}
        return load_settings(AblationSettings, args.config, overrides)
    raise ConfigError(f"unknown command {args.command!r}")


def cmd_toy_model(settings: ToyModelSettings) -> int:
    model = make_toy_model(settings.seed, settings.v_rings, settings.k_id, settings.k_exp)
    Path(settings.out).parent.mkdir(parents=True, exist_ok=True)
    save_model(model, settings.out)
    print(f"V={model.n_vertices} K_id={model.k_id} K_exp={model.k_exp} -> {settings.out}")
    return EXIT_OK


def cmd_generate(settings: GenerateSettings) -> int:
    threads = resolve_threads(settings.threads)
    model = load_model(settings.model)
    started = time.perf_counter()
    manifest = generate_dataset(model, settings.gen_config(), threads=threads, progress=settings.progress)
    elapsed = time.perf_counter() - started
    rate = manifest.total_count / elapsed if elapsed > 0 else float("inf")
    print(f"generated {manifest.total_count} images in {elapsed:.2f}s ({rate:.1f} images/s, {threads} thread(s))")
    return EXIT_OK


def cmd_verify(settings: VerifySettings) -> int:
    root = Path(settings.dataset)
    manifest = read_manifest(root / MANIFEST_NAME)
    report = verify_dataset(manifest, root=root, sample=settings.sample, seed=settings.seed)
    print(f"checked {report.checked}: {report.passed} passed, {report.failed} failed")
    for violation in report.violations[:20]:
        print(f"  {violation.kind}: {violation.path} {violation.detail}".rstrip())
    ok = report.ok
    if settings.against is not None:
        other_root = Path(settings.against)
        other = read_manifest(other_root / MANIFEST_NAME)
        diffs = diff_datasets(manifest, other, root, other_root)
        print(f"{len(diffs)} differing files against {other_root}")
        for rel in diffs[:20]:
            print(f"  {rel}")
        ok = ok and not diffs
    return EXIT_OK if ok else EXIT_RUNTIME


def _write_tags(path: Path, tags: list[str]) -> None:
    with open(path, "w", newline="", encoding="utf-8") as f:
        writer = csv.writer(f)
        writer.writerow(["id", "tag"])
        writer.writerows(enumerate(tags))


def _read_tags(path: str) -> list[str]:
    with open(path, newline="", encoding="utf-8") as f:
        rows = list(csv.DictReader(f))
    try:
        rows.sort(key=lambda row: int(row["id"]))
        return [row["tag"] for row in rows]
    except (KeyError, ValueError, TypeError):
        raise ConfigError(f"{path}: expected a CSV with columns id,tag")


def cmd_toy_data(settings: ToyDataSettings) -> int:
    data = synth_toy_embeddings(settings)
    out = Path(settings.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    protocol = data.protocol
    for m in settings.modalities:
        write_embeddings(protocol.gallery[m], out / f"gallery_{m}.emb")
        write_embeddings(protocol.probes[m], out / f"probes_{m}.emb")
        write_embeddings(data.train[m], out / f"train_{m}.emb")
    _write_tags(out / "probe_tags.csv", protocol.probe_tags())
    _write_tags(out / "train_tags.csv", data.train_tags)
    (out / "toy_config.json").write_text(settings.model_dump_json(indent=2), encoding="utf-8")
    print(f"wrote {3 * len(settings.modalities)} embedding files for {protocol.n_probes} probes to {out}")
    return EXIT_OK


def _read_modality_files(paths: dict[str, str], role: str) -> dict[str, EmbeddingSet]:
    sets = {}
    for modality, path in paths.items():
        if not Path(path).exists():
            raise ModalityMissingError(modality, f"{role} file not found: {path}")
        sets[modality] = read_embeddings(path)
    return sets


def cmd_train_acw(settings: TrainSettings) -> int:
    gallery = _read_modality_files(settings.gallery, "gallery")
    for modality in gallery:
        if modality not in settings.embeddings:
            raise ModalityMissingError(modality, "no training embeddings given")
    embeddings = _read_modality_files({m: settings.embeddings[m] for m in gallery}, "training")
    prototypes = {m: ClassPrototypes.from_neutral(g, frozen=not settings.train_prototypes) for m, g in gallery.items()}
    result = train(embeddings, prototypes, settings.train_config(), settings.seed)

    out = Path(settings.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    for modality, head in result.heads.items():
        save_head(head, out / f"head_{modality}.acw")
    (out / "loss_history.csv").write_text(result.history.to_csv(), encoding="utf-8")
    final = f"{result.history.losses[-1]:.4f}" if len(result.history) else "n/a"
    print(f"trained {len(result.heads)} head(s) for {len(result.history)} epochs, final loss {final} -> {out}")
    return EXIT_OK


def cmd_evaluate(settings: EvaluateSettings) -> int:
    mode = FusionMode.parse(settings.mode)
    if settings.weights is not None:
        if mode.kind != "fixed":
            raise ConfigError("--weights only applies to fixed fusion")
        mode = FusionMode(kind="fixed", weights=settings.weights)
    gallery = _read_modality_files(settings.gallery, "gallery")
    probes = _read_modality_files(settings.probes, "probe")
    heads = {m: load_head(path) for m, path in settings.heads.items()}
    tags = _read_tags(settings.tags) if settings.tags else None
    protocol = Protocol(gallery, probes, tags)

    report = evaluate(protocol, heads, mode, config=settings.model_dump())
    out = Path(settings.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    (out / "report.json").write_text(report.model_dump_json(indent=2), encoding="utf-8")
    table = format_report_table({report.mode: report})
    (out / "report.txt").write_text(table, encoding="utf-8")
    print(table, end="")
    return EXIT_OK


def cmd_ablation(settings: AblationSettings) -> int:
    result = run_ablation(settings.toy_config(), settings.train)
    out = Path(settings.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    payload = {
        "reports": {name: r.model_dump() for name, r in result.reports.items()},
        "confidence_by_tag": result.confidence_by_tag,
        "history": result.training.history.model_dump(),
    }
    (out / "ablation.json").write_text(json.dumps(payload, indent=2), encoding="utf-8")
    table = format_report_table(result.reports)
    (out / "ablation.txt").write_text(table, encoding="utf-8")
    print(table, end="")
    for tag, means in result.confidence_by_tag.items():
        print(f"mean confidence [{tag}]: " + ", ".join(f"{m}={c:.3f}" for m, c in means.items()))
    return EXIT_OK


COMMANDS = {
    "toy-model": cmd_toy_model,
    "generate": cmd_generate,
    "verify": cmd_verify,
    "toy-data": cmd_toy_data,
    "train-acw": cmd_train_acw,
    "evaluate": cmd_evaluate,
    "ablation": cmd_ablation,
}


def main(argv: Optional[list[str]] = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)

    level = logging.DEBUG if args.verbose else logging.WARNING if args.quiet else logging.INFO
    logging.basicConfig(level=level, format="%(asctime)s - %(levelname)s - %(message)s")
    logging.getLogger().setLevel(level)

    try:
        settings = build_settings(args)
    except (ConfigError, ValueError) as e:
        print(f"error: {e}", file=sys.stderr)
        print(parser.format_usage().strip(), file=sys.stderr)
        return EXIT_CONFIG

    try:
        return COMMANDS[args.command](settings)
    except ConfigError as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_CONFIG
    except (DepthForgeError, OSError) as e:
        logging.debug("Command failed", exc_info=True)
        print(f"error: {e}", file=sys.stderr)
        return EXIT_RUNTIME
    except ValueError as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_CONFIG
    except Exception:
        logging.exception(f"Unexpected failure in '{args.command}'")
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
