"""Command-line entry point.

Exit codes: 0 success, 2 validation or config error, 3 provider error,
4 training abort.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

from .config import dump_config, load_config
from .errors import DermSynthError
from .types import ExperimentSpec

log = logging.getLogger("dermsynth")

DATASET_CHOICES = ("d7p", "ham")


def _spec_from_args(cfg, args) -> ExperimentSpec:
    d = cfg.spec.to_dict()
    for name in ("data_mode", "prompt_regime", "finetune_captions"):
        value = getattr(args, name, None)
        if value:
            d[name] = value
    return ExperimentSpec.from_dict(d)


def _pipeline(cfg, args):
    from .experiments import Pipeline

    return Pipeline(cfg, args.work_dir or cfg.work_dir)


def _out_dir(cfg, args, default):
    out = Path(args.out or Path(args.work_dir or cfg.work_dir) / default)
    out.mkdir(parents=True, exist_ok=True)
    return out


def cmd_ingest(cfg, args):
    p = _pipeline(cfg, args)
    index = p.ingest()
    out = _out_dir(cfg, args, "ingest")
    print("dataset\tclass\ttrain\ttest")
    for ds, idx in index.items():
        idx.write_manifest(out / f"{ds}_split.tsv")
        classes = sorted({r.diagnosis.value for r in idx.records})
        for c in classes:
            n_train = sum(r.diagnosis.value == c for r in idx.train)
            n_test = sum(r.diagnosis.value == c for r in idx.test)
            print(f"{ds}\t{c}\t{n_train}\t{n_test}")


def cmd_caption(cfg, args):
    from .types import write_jsonl

    p = _pipeline(cfg, args)
    caps = p.captions()
    out = _out_dir(cfg, args, "captions")
    write_jsonl(out / "captions.jsonl", caps)
    print("provenance\tclass\tcount")
    counts = {}
    for c in caps:
        counts[(c.provenance.value, c.cls.value)] = counts.get((c.provenance.value, c.cls.value), 0) + 1
    for (prov, cls), n in sorted(counts.items()):
        print(f"{prov}\t{cls}\t{n}")


def cmd_balance(cfg, args):
    from .balancing import write_pool

    p = _pipeline(cfg, args)
    p.captions()
    pool, key, manifest = p.pool(args.prompt_regime or "rich_balanced")
    out = _out_dir(cfg, args, "pools")
    write_pool(out / f"{manifest['regime']}.jsonl", pool, manifest)
    print("class\tprompts")
    for c in pool.classes():
        print(f"{c.value}\t{len(pool[c])}")


def cmd_finetune(cfg, args):
    p = _pipeline(cfg, args)
    p.captions()
    _, key = p.adapter(args.finetune_captions or "rich")
    path = p.cache.path("adapters", key) / "adapter.npz"
    print(f"adapter\t{path}")


def cmd_sample(cfg, args):
    p = _pipeline(cfg, args)
    p.captions()
    synth, _ = p.synthetic(args.prompt_regime or "rich_balanced", args.finetune_captions or "rich")
    print(f"synthetic_dataset\t{synth.id}\t{synth.root}")
    print("class\timages")
    for c, n in sorted(synth.per_class().items()):
        print(f"{c}\t{n}")


def cmd_train_classifier(cfg, args):
    from .classifier import train_classifier
    from .experiments import DATASET_CLASSES

    p = _pipeline(cfg, args)
    spec = _spec_from_args(cfg, args)
    ts = p.training_set(spec, args.dataset)
    model = train_classifier(ts.pairs(), None, p.classifier_config(spec), DATASET_CLASSES[args.dataset])
    out = _out_dir(cfg, args, "classifiers")
    path = out / f"{args.dataset}_{spec.data_mode.value}_{spec.prompt_regime.value}.npz"
    model.save(path)
    (out / (path.stem + ".manifest.json")).write_text(json.dumps(ts.manifest, indent=2, sort_keys=True))
    print(f"classifier\t{path}")
    print(f"epochs_run\t{model.info['epochs_run']}")


def cmd_evaluate(cfg, args):
    from .classifier import TrainedClassifier, evaluate, predict
    from .experiments import _real_path
    from .report import render_report_table

    p = _pipeline(cfg, args)
    model = TrainedClassifier.load(args.model)
    test = p.ingest()[args.dataset].test
    preds = predict(model, [_real_path(r, p.image_root(args.dataset)) for r in test])
    report = evaluate(preds, [r.diagnosis for r in test], model.classes, {"model": str(args.model), "dataset": args.dataset})
    out = _out_dir(cfg, args, "evaluations")
    (out / f"{Path(args.model).stem}.report.json").write_text(json.dumps(report.to_dict(), indent=2, sort_keys=True))
    print(render_report_table([(Path(args.model).stem, report)]).delimited(), end="")


def _grid(cfg, args, which):
    from .experiments import write_outputs

    p = _pipeline(cfg, args)
    out = _out_dir(cfg, args, which)
    dump_config(cfg, out / "config.yaml")
    result = p.run_main(out) if which == "main" else p.run_ablation_suite(None, out)
    written = write_outputs(result, out)
    for stem, table in result["tables"].items():
        print(f"# {stem}")
        print(table.delimited(), end="")
    log.info("wrote %s", ", ".join(w["tsv"] for w in written.values()))


def cmd_run(cfg, args):
    _grid(cfg, args, "main")


def cmd_ablate(cfg, args):
    _grid(cfg, args, "ablation")


def cmd_report(cfg, args):
    from .experiments import load_rows
    from .report import render_bundle, render_report_table

    tables = {}
    for path in args.rows:
        stem = Path(path).name.removesuffix(".rows.json")
        tables[stem] = render_report_table(load_rows(path))
    out = _out_dir(cfg, args, "report")
    render_bundle(tables, out)
    for stem, table in tables.items():
        print(f"# {stem}")
        print(table.delimited() if args.format == "tsv" else table.human() + "\n", end="")


def build_parser():
    parser = argparse.ArgumentParser(prog="dermsynth", description="Concept-captioned synthetic dermoscopy pipeline")
    parser.add_argument("--config", help="YAML document overriding the profile defaults")
    parser.add_argument("--seed", type=int)
    parser.add_argument("--profile", choices=("desk", "full"))
    parser.add_argument("--offline", action="store_true", help="forbid network calls; remote providers must hit the cache")
    parser.add_argument("--work-dir", help="cache and output root (default: config work_dir)")
    parser.add_argument("-v", "--verbose", action="count", default=0)
    sub = parser.add_subparsers(dest="command", required=True)

    def add(name, fn, help_):
        sp = sub.add_parser(name, help=help_)
        sp.add_argument("--out", help="output directory")
        sp.set_defaults(fn=fn)
        return sp

    add("ingest", cmd_ingest, "parse metadata and write the train/test split")
    add("caption", cmd_caption, "caption the training split")
    sp = add("balance", cmd_balance, "build a prompt pool (balanced by default)")
    sp.add_argument("--prompt-regime", dest="prompt_regime", choices=("rich_balanced", "rich_only", "static"))
    sp = add("finetune", cmd_finetune, "fine-tune the LoRA adapter")
    sp.add_argument("--finetune-captions", dest="finetune_captions", choices=("rich", "static"))
    sp = add("sample", cmd_sample, "generate a synthetic dataset")
    sp.add_argument("--prompt-regime", dest="prompt_regime", choices=("rich_balanced", "rich_only", "static"))
    sp.add_argument("--finetune-captions", dest="finetune_captions", choices=("rich", "static"))
    sp = add("train-classifier", cmd_train_classifier, "assemble a training set and train a classifier")
    sp.add_argument("--dataset", choices=DATASET_CHOICES, required=True)
    sp.add_argument("--data-mode", dest="data_mode", choices=("synth_plus_real", "synth_only", "real_only"))
    sp.add_argument("--prompt-regime", dest="prompt_regime", choices=("rich_balanced", "rich_only", "static"))
    sp.add_argument("--finetune-captions", dest="finetune_captions", choices=("rich", "static"))
    sp = add("evaluate", cmd_evaluate, "score a saved classifier on a test split")
    sp.add_argument("--dataset", choices=DATASET_CHOICES, required=True)
    sp.add_argument("--model", required=True)
    add("run", cmd_run, "main comparison: baseline, real-only, rich+balanced")
    add("ablate", cmd_ablate, "ablations A, B and C")
    sp = add("report", cmd_report, "render tables and figures from saved *.rows.json files")
    sp.add_argument("rows", nargs="+")
    sp.add_argument("--format", choices=("tsv", "human"), default="tsv")
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    level = logging.WARNING - 10 * min(args.verbose, 2)
    logging.basicConfig(level=level, format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr)
    try:
        cfg = load_config(args.config, args.profile, args.seed, args.offline or None)
        args.fn(cfg, args)
    except DermSynthError as e:
        print(f"error: {e}", file=sys.stderr)
        return e.exit_code
    return 0


if __name__ == "__main__":
    sys.exit(main())
