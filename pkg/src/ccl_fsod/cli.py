"""Command-line entry point: ``ccl-fsod <subcommand> ... --out DIR``.

Every subcommand writes ``manifest.json`` (resolved configuration, version
string, seeds) next to its artifacts. Validation problems exit with status 1
and a single ``error: <subcommand>: <reason>`` line on stderr.
"""

from __future__ import annotations

import argparse
import csv
import dataclasses
import json
import subprocess
import sys
from pathlib import Path

import numpy as np

from . import bounds, io, knowledge, toymodel, trainer
from .counterfactual import augment
from .knowledge import KnowledgeMatrix
from .trainer import TrainConfig

PACKAGE_VERSION = "0.1.0"


class CliError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise CliError(message)


def version_string() -> str:
    """``git describe``-style identifier, or the package version outside a checkout."""
    try:
        out = subprocess.run(
            ["git", "describe", "--always", "--dirty", "--tags"],
            cwd=Path(__file__).resolve().parent,
            capture_output=True,
            text=True,
            timeout=5,
        )
        if out.returncode == 0 and out.stdout.strip():
            return f"{PACKAGE_VERSION}+g{out.stdout.strip()}"
    except (OSError, subprocess.SubprocessError):
        pass
    return PACKAGE_VERSION


def write_manifest(out: Path, command: str, config: dict, seeds: dict, inputs: dict | None = None) -> None:
    io.dump_json(
        out / "manifest.json",
        {
            "command": command,
            "config": config,
            "seeds": seeds,
            "inputs": inputs or {},
            "version": version_string(),
        },
    )


def _out_dir(args) -> Path:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    return out


# -- TrainConfig flags ----------------------------------------------------------

_BOOL_FLAGS = {
    "use_ccl": "ccl",
    "use_knowledge_matrix": "knowledge-matrix",
    "use_clustering": "clustering",
    "use_counterfactual": "counterfactual",
    "use_random_mask_baseline": "random-mask-baseline",
    "train_conv2": "train-conv2",
    "normalize_embeddings": "normalize-embeddings",
}
_SKIP_FLAGS = {"stage"}


def _add_train_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="JSON file with TrainConfig keys (flags override it)")
    p.add_argument("--seed", type=int, help="global seed: data=S, augment=S+1, init=S+2 unless set explicitly")
    defaults = TrainConfig()
    g = p.add_argument_group("training configuration")
    for f in dataclasses.fields(TrainConfig):
        if f.name in _SKIP_FLAGS:
            continue
        default = getattr(defaults, f.name)
        if f.name in _BOOL_FLAGS:
            flag = _BOOL_FLAGS[f.name]
            g.add_argument(f"--{flag}", dest=f.name, action="store_true", default=None,
                           help=f"enable {f.name} (default: {default})")
            g.add_argument(f"--no-{flag}", dest=f.name, action="store_false", default=None,
                           help=f"disable {f.name}")
        elif f.name == "channels":
            g.add_argument("--channels", type=int, nargs=2, default=None, metavar=("C1", "C2"),
                           help=f"conv widths (default: {' '.join(map(str, default))})")
        else:
            g.add_argument(f"--{f.name.replace('_', '-')}", dest=f.name, type=type(default), default=None,
                           help=f"(default: {default})")


def resolve_train_config(args, stage: str) -> TrainConfig:
    values = {}
    if args.config:
        values.update(io.load_json(args.config))
    if args.seed is not None:
        for offset, key in enumerate(("seed_data", "seed_augment", "seed_init")):
            values[key] = args.seed + offset
    for f in dataclasses.fields(TrainConfig):
        v = getattr(args, f.name, None)
        if v is not None and f.name not in _SKIP_FLAGS:
            values[f.name] = v
    values["stage"] = stage
    return TrainConfig.from_dict(values)


def _seeds(cfg: TrainConfig) -> dict:
    return {"data": cfg.seed_data, "augment": cfg.seed_augment, "init": cfg.seed_init}


def _load_zeta(path) -> KnowledgeMatrix:
    return knowledge.read_matrix_csv(path)


# -- subcommands ------------------------------------------------------------


def cmd_knowledge(args) -> int:
    out = _out_dir(args)
    labels, names = None, None
    if args.labels:
        names, labels = knowledge.load_attribute_labels(args.labels)
    if args.categories:
        names = [n.strip() for n in Path(args.categories).read_text().split() if n.strip()]
    if names is None:
        raise CliError("need --labels or --categories to name the categories")
    C = len(names)
    base_set = range(C)
    if args.base:
        unknown = [b for b in args.base if b not in names]
        if unknown:
            raise CliError(f"unknown base categories {unknown}")
        base_set = [names.index(b) for b in args.base]
    sets = knowledge.load_embedding_sets(args.embeddings, names) if args.embeddings else None
    table = knowledge.load_text_table(args.text) if args.text else None
    zeta = knowledge.build_knowledge_matrix(
        args.case, C, base_set=base_set, embedding_sets=sets, labels=labels, text_table=table,
        K=args.K, seed=args.seed, category_names=names,
    )
    knowledge.write_matrix_csv(zeta, out / "knowledge.csv")
    write_manifest(
        out, "knowledge",
        {"case": args.case, "K": args.K, "base": [names[i] for i in base_set]},
        {"kmeans": args.seed},
        {k: getattr(args, k) for k in ("labels", "categories", "embeddings", "text")},
    )
    print(out / "knowledge.csv")
    return 0


def cmd_dataset(args) -> int:
    out = _out_dir(args)
    kw = {}
    if args.attribute_table:
        table = io.load_json(args.attribute_table)
        if args.c_base is None:
            raise CliError("--attribute-table needs --c-base")
        kw.update(attribute_table=table, C_base=args.c_base, C_novel=len(table) - args.c_base)
    cfg = toymodel.DatasetConfig(
        k_shot=args.k_shot, base_per_class=args.base_per_class, test_per_class=args.test_per_class,
        seed=args.seed, noise=args.noise, part_dropout=args.part_dropout, **kw,
    )
    ds = toymodel.generate_dataset(cfg)
    ds.dump(out)
    write_manifest(out, "dataset", dataclasses.asdict(cfg), {"data": cfg.seed})
    print(f"{len(ds.images)} images, {ds.C} categories -> {out}")
    return 0


def cmd_train_base(args) -> int:
    out = _out_dir(args)
    cfg = resolve_train_config(args, "base")
    ds = toymodel.ToyDataset.load(args.dataset)
    history = []
    params = trainer.train_base(cfg, ds, history)
    params.dump(out / "params")
    with open(out / "metrics.jsonl", "w") as fh:
        for step, loss in enumerate(history):
            fh.write(json.dumps({"step": step, "cls": loss}, sort_keys=True) + "\n")
        final = trainer.evaluate(params, ds)
        fh.write(json.dumps({"final": {"per_class_accuracy": final.per_class_accuracy,
                                       "base_accuracy": final.base_accuracy}}, sort_keys=True) + "\n")
    write_manifest(out, "train-base", cfg.to_dict(), _seeds(cfg), {"dataset": args.dataset})
    print(f"base accuracy {final.base_accuracy:.4f} -> {out}")
    return 0


def cmd_fine_tune(args) -> int:
    out = _out_dir(args)
    cfg = resolve_train_config(args, "finetune")
    ds = toymodel.ToyDataset.load(args.dataset)
    params = toymodel.ToyModelParams.load(args.params)
    if params.C != ds.C:
        raise CliError(f"checkpoint has {params.C} classes, dataset has {ds.C}")
    zeta = _load_zeta(args.knowledge_matrix) if args.knowledge_matrix else trainer.toy_knowledge_matrix(cfg, ds, params)
    knowledge.write_matrix_csv(zeta, out / "knowledge.csv")
    tuned, metrics = trainer.fine_tune(params, cfg, ds, zeta)
    tuned.dump(out / "params")
    (out / "metrics.jsonl").write_text(metrics.to_jsonl())
    write_manifest(
        out, "fine-tune", cfg.to_dict(), _seeds(cfg),
        {"dataset": args.dataset, "params": args.params, "knowledge_matrix": args.knowledge_matrix},
    )
    print(f"novel accuracy {metrics.novel_accuracy:.4f} base accuracy {metrics.base_accuracy:.4f} -> {out}")
    return 0


def cmd_augment_preview(args) -> int:
    out = _out_dir(args)
    cfg = resolve_train_config(args, "finetune")
    ds = toymodel.ToyDataset.load(args.dataset)
    params = toymodel.ToyModelParams.load(args.params)
    if not 0 <= args.index < len(ds.images):
        raise CliError(f"--index {args.index} outside 0..{len(ds.images) - 1}")
    zeta = _load_zeta(args.knowledge_matrix) if args.knowledge_matrix else trainer.toy_knowledge_matrix(cfg, ds, params)
    image, label = ds.images[args.index], int(ds.labels[args.index])
    rng = np.random.default_rng(cfg.seed_augment)
    sample = augment(image, label, params, zeta, cfg.k_e, cfg.threshold, rng,
                     random_mask=cfg.use_random_mask_baseline)
    io.save_image(out / "original.ppm", image)
    io.save_image(out / "augmented.ppm", sample.image)
    io.save_image(out / "mask.pgm", sample.mask * 255)
    for key, name in (("A_c", "attribution_true"), ("A_counter", "attribution_counter"),
                      ("counterfactual", "counterfactual")):
        io.save_image(out / f"{name}.pgm", io.map_to_gray(sample.maps[key]))
    io.dump_json(out / "preview.json", {
        "index": args.index,
        "label": label,
        "counter_category": sample.counter_category,
        "counter_name": ds.category_names[sample.counter_category],
        "threshold": cfg.threshold,
        "k_e": cfg.k_e,
        "seed": cfg.seed_augment,
        "fill_seed": sample.maps["fill_seed"],
        "erased_pixels": int((sample.mask == 0).sum()),
    })
    write_manifest(out, "augment-preview", cfg.to_dict(), _seeds(cfg),
                   {"dataset": args.dataset, "params": args.params, "index": args.index})
    print(out / "preview.json")
    return 0


def _bound_inputs(path) -> bounds.BoundInputs:
    return bounds.BoundInputs.from_dict(io.load_json(path)) if path else bounds.BoundInputs()


def _format(value) -> str:
    return repr(float(value)) if not isinstance(value, bool) else str(value).lower()


def cmd_bounds(args) -> int:
    out = _out_dir(args)
    p = _bound_inputs(args.params)
    if args.action == "eval":
        value = bounds.evaluate(args.formula, p)
        result = value if isinstance(value, dict) else {"value": value}
        io.dump_json(out / "bound.json", {"formula": args.formula, **result})
        if isinstance(value, dict):
            print(" ".join(f"{k}={_format(v)}" for k, v in value.items()))
        else:
            print(_format(value))
    else:
        grid = io.load_json(args.grid) if args.grid else bounds.DEFAULT_THM2_GRID
        fields = {f.name for f in dataclasses.fields(bounds.BoundInputs)}
        unknown = sorted(set(grid) - fields)
        if unknown:
            raise CliError(f"unknown grid keys {unknown}")
        rows = bounds.sweep(args.formula, p, grid)
        with open(out / "sweep.csv", "w", newline="") as fh:
            writer = csv.DictWriter(fh, fieldnames=list(rows[0]), lineterminator="\n")
            writer.writeheader()
            for row in rows:
                writer.writerow({k: _format(v) if isinstance(v, (float, bool)) else v for k, v in row.items()})
        print(f"{len(rows)} rows -> {out / 'sweep.csv'}")
    write_manifest(out, f"bounds {args.action}", {"formula": args.formula, **dataclasses.asdict(p)}, {},
                   {"params": args.params, "grid": getattr(args, "grid", None)})
    return 0


def cmd_export(args) -> int:
    out = _out_dir(args)
    if not (args.dataset or args.params or args.matrix):
        raise CliError("nothing to export: give --dataset, --params or --matrix")
    if args.dataset:
        ds = toymodel.ToyDataset.load(args.dataset)
        img_dir = out / "images"
        img_dir.mkdir(exist_ok=True)
        with open(out / "images.csv", "w", newline="") as fh:
            writer = csv.writer(fh, lineterminator="\n")
            writer.writerow(["file", "label", "category", "split"])
            for i in range(min(args.limit, len(ds.images))):
                name = f"{i:05d}.ppm"
                io.save_image(img_dir / name, ds.images[i])
                writer.writerow([name, int(ds.labels[i]), ds.category_names[ds.labels[i]], ds.split[i]])
    if args.params:
        params = toymodel.ToyModelParams.load(args.params)
        p_dir = out / "params"
        p_dir.mkdir(exist_ok=True)
        for name, value in params.as_dict().items():
            io.write_matrix(p_dir / f"{name}.csv", value.reshape(value.shape[0], -1) if value.ndim > 1 else value[None])
    if args.matrix:
        src = Path(args.matrix)
        m = io.read_matrix(src)
        io.write_matrix(out / (src.stem + (".bin" if src.suffix == ".csv" else ".csv")), m)
    write_manifest(out, "export", {"limit": args.limit}, {},
                   {"dataset": args.dataset, "params": args.params, "matrix": args.matrix})
    print(out)
    return 0


# -- parser -------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    fmt = argparse.ArgumentDefaultsHelpFormatter
    parser = _Parser(prog="ccl-fsod", description="Few-shot contrastive learning toolkit at desk scale.")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("knowledge", help="build a knowledge matrix", formatter_class=fmt)
    p.add_argument("--case", type=int, default=knowledge.DEFAULT_CASE, choices=[1, 2, 3, 4, 5])
    p.add_argument("--labels", help="JSON {category: [0/1 bits]}")
    p.add_argument("--categories", help="whitespace-separated category names (when no --labels)")
    p.add_argument("--embeddings", help="directory with one <category>.bin/.csv embedding matrix each")
    p.add_argument("--text", help="directory with categories/attributes/null word-vector matrices")
    p.add_argument("--base", nargs="*", help="base category names (case 3); default all")
    p.add_argument("--K", type=int, default=knowledge.DEFAULT_K, help="k-means centers per category")
    p.add_argument("--seed", type=int, default=0, help="k-means seed")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_knowledge)

    p = sub.add_parser("dataset", help="generate the synthetic few-shot task", formatter_class=fmt)
    d = toymodel.DatasetConfig()
    p.add_argument("--seed", type=int, default=d.seed)
    p.add_argument("--k-shot", type=int, default=d.k_shot)
    p.add_argument("--base-per-class", type=int, default=d.base_per_class)
    p.add_argument("--test-per-class", type=int, default=d.test_per_class)
    p.add_argument("--noise", type=float, default=d.noise)
    p.add_argument("--part-dropout", type=float, default=d.part_dropout)
    p.add_argument("--attribute-table", help="JSON {category: bits}; base categories first")
    p.add_argument("--c-base", type=int, help="number of base categories in --attribute-table")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_dataset)

    p = sub.add_parser("train-base", help="stage one: train on base categories")
    p.add_argument("--dataset", required=True)
    p.add_argument("--out", required=True)
    _add_train_flags(p)
    p.set_defaults(func=cmd_train_base)

    p = sub.add_parser("fine-tune", help="stage two: few-shot fine-tuning")
    p.add_argument("--dataset", required=True)
    p.add_argument("--params", required=True, help="checkpoint directory from train-base")
    p.add_argument("--knowledge-matrix-file", dest="knowledge_matrix",
                   help="knowledge matrix CSV (default: built from the dataset per --knowledge-case)")
    p.add_argument("--out", required=True)
    _add_train_flags(p)
    p.set_defaults(func=cmd_fine_tune)

    p = sub.add_parser("augment-preview", help="dump counterfactual maps for one image")
    p.add_argument("--dataset", required=True)
    p.add_argument("--params", required=True)
    p.add_argument("--index", type=int, default=0, help="image index in the dataset (default: 0)")
    p.add_argument("--knowledge-matrix-file", dest="knowledge_matrix")
    p.add_argument("--out", required=True)
    _add_train_flags(p)
    p.set_defaults(func=cmd_augment_preview)

    p = sub.add_parser("bounds", help="evaluate generalization-bound formulas")
    bsub = p.add_subparsers(dest="action", required=True, parser_class=_Parser)
    for action in ("eval", "sweep"):
        q = bsub.add_parser(action, formatter_class=fmt)
        q.add_argument("--formula", required=True, choices=["lemma1", "thm1", "prop1", "thm2"])
        q.add_argument("--params", help="JSON with BoundInputs fields (defaults otherwise)")
        if action == "sweep":
            q.add_argument("--grid", help="JSON {field: [values]}; default: the k_e x N_r grid")
        q.add_argument("--out", required=True)
        q.set_defaults(func=cmd_bounds)

    p = sub.add_parser("export", help="convert artifacts to portable formats", formatter_class=fmt)
    p.add_argument("--dataset", help="dataset directory -> PPM images + index CSV")
    p.add_argument("--params", help="checkpoint directory -> per-parameter CSV")
    p.add_argument("--matrix", help="binary matrix <-> CSV conversion")
    p.add_argument("--limit", type=int, default=100, help="maximum images to export")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_export)
    return parser


def main(argv=None) -> int:
    argv = sys.argv[1:] if argv is None else list(argv)
    command = argv[0] if argv and not argv[0].startswith("-") else "ccl-fsod"
    try:
        args = build_parser().parse_args(argv)
        return args.func(args)
    except SystemExit as exc:  # --help
        return int(exc.code or 0)
    except (CliError, ValueError, KeyError, OSError, json.JSONDecodeError) as exc:
        reason = str(exc).replace("\n", " ").strip() or type(exc).__name__
        print(f"error: {command}: {reason}", file=sys.stderr)
        return 1


run = main


if __name__ == "__main__":
    sys.exit(main())
