"""Experiment assembly and the end-to-end pipeline with cached, content-addressed stages."""

from __future__ import annotations

import json
import logging
from contextlib import contextmanager
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .balancing import balance_manifest, balance_pool
from .cache import ArtifactCache, content_key, file_digest
from .captioning import CaptionProvider, ClipTokenizer, WhitespaceTokenizer, generate_captions, static_caption
from .classifier import ClassifierConfig, evaluate, predict, train_classifier
from .config import PipelineConfig
from .errors import ConfigError, DermSynthError, InsufficientSyntheticError, StageError, ValidationError
from .ingestion import DatasetIndex, parse_d7p_metadata, parse_ham_metadata, stratified_split
from .report import ReportRow, render_bundle, render_report_table
from .types import (
    D7P_CLASSES,
    HAM_CLASSES,
    Caption,
    DataMode,
    DiagnosisClass,
    EvaluationReport,
    ExperimentSpec,
    FinetuneCaptions,
    PromptPool,
    PromptRegime,
    load_taxonomy,
    read_jsonl,
    write_jsonl,
)

log = logging.getLogger(__name__)

DATASETS = ("d7p", "ham")
DATASET_CLASSES = {"d7p": D7P_CLASSES, "ham": HAM_CLASSES}


@dataclass
class TrainingItem:
    path: str
    cls: DiagnosisClass
    origin: str  # "real" or "synthetic"
    ref: dict

    def to_dict(self):
        return {"path": self.path, "class": self.cls.value, "origin": self.origin, **self.ref}


@dataclass
class TrainingSet:
    items: list
    manifest: dict = field(default_factory=dict)
    classes: list = field(default_factory=list)

    def pairs(self):
        return [(it.path, it.cls) for it in self.items]

    def counts(self):
        # Classes with nothing selected still get a zero row.
        out = {c.value: {"real": 0, "synthetic": 0} for c in self.classes}
        for it in self.items:
            row = out.setdefault(it.cls.value, {"real": 0, "synthetic": 0})
            row["real" if it.origin == "real" else "synthetic"] += 1
        return out


def _real_path(record, image_root):
    p = Path(record.image_ref)
    return str(p if p.is_absolute() or image_root is None else Path(image_root) / p)


def assemble_training_set(spec: ExperimentSpec, real_index, synth=None, classes=None, image_root=None,
                          caption_provenance=None, audit=True) -> TrainingSet:
    """Combine real training images and synthetic images according to the ExperimentSpec data mode.

    synth_plus_real: min(cap, available) real images per class, topped up with
    synthetic ones to ``total_per_class``. synth_only: ``total_per_class``
    synthetic images. real_only: every real training image. Real images are
    chosen by a seeded per-class shuffle; synthetic ones in dataset order.
    ``real_index`` is a DatasetIndex or a plain list of training records.
    """
    records = real_index.train if isinstance(real_index, DatasetIndex) else list(real_index)
    classes = [DiagnosisClass.parse(c) for c in (classes or sorted({r.diagnosis for r in records}, key=lambda c: c.value))]
    if spec.uses_synthetic and synth is None:
        raise ValidationError(f"data mode {spec.data_mode} needs a synthetic dataset")
    by_class = {c: [r for r in records if r.diagnosis is c] for c in classes}
    items = []
    for c in classes:
        real = by_class[c]
        if spec.data_mode is DataMode.REAL_ONLY:
            n_real, n_synth = len(real), 0
        elif spec.data_mode is DataMode.SYNTH_ONLY:
            n_real, n_synth = 0, spec.total_per_class
        else:
            n_real = min(spec.real_cap_per_class, len(real))
            n_synth = spec.total_per_class - n_real
        rng = np.random.default_rng([spec.seed, sorted(DiagnosisClass).index(c)])
        for i in sorted(rng.permutation(len(real))[:n_real].tolist()):
            r = real[i]
            items.append(TrainingItem(_real_path(r, image_root), c, "real", {"record_id": r.id}))
        if n_synth:
            pool = synth.of_class(c)
            if len(pool) < n_synth:
                raise InsufficientSyntheticError(c.value, n_synth, len(pool))
            for it in pool[:n_synth]:
                ref = {"synthetic_id": it.id, "caption_id": it.caption_id, "seed": it.seed}
                if caption_provenance is not None:
                    ref["caption_provenance"] = caption_provenance.get(it.caption_id, "unknown")
                items.append(TrainingItem(str(synth.path(it)), c, "synthetic", ref))
    ts = TrainingSet(items, classes=classes)
    ts.manifest = {
        "spec": spec.to_dict(),
        "classes": [c.value for c in classes],
        "counts": ts.counts(),
        "synthetic_dataset": getattr(synth, "id", None) if spec.uses_synthetic else None,
        "items": [it.to_dict() for it in items],
    }
    if audit:
        ts.manifest["sha256"] = {it.path: file_digest(it.path) for it in items if Path(it.path).exists()}
    return ts


ROW_LABELS = {
    "baseline_synth_plus_real": "label-prompt baseline (synth+real)",
    "real_only": "real-only",
    "ours_synth_plus_real": "rich+balanced prompts (synth+real)",
    "baseline_synth_only": "label-prompt baseline (synth only)",
    "ours_synth_only": "rich+balanced prompts (synth only)",
    "rich_only_synth_only": "rich-only prompts (synth only)",
    "rich_only_synth_plus_real": "rich-only prompts (synth+real)",
    "static_synth_only": "static prompts (synth only)",
    "static_synth_plus_real": "static prompts (synth+real)",
}

ABLATION_GROUPS = {
    "A: synthetic data alone": ("baseline_synth_only", "ours_synth_only"),
    "B: no prompt balancing": ("rich_only_synth_only", "rich_only_synth_plus_real"),
    "C: static label-only prompts": ("static_synth_only", "static_synth_plus_real"),
}


def main_grid(base: ExperimentSpec) -> dict:
    """The three rows of the main comparison, keyed by row id."""
    d = base.to_dict()

    def spec(**kw):
        return ExperimentSpec.from_dict({**d, **kw})

    return {
        "baseline_synth_plus_real": spec(data_mode="synth_plus_real", prompt_regime="static", finetune_captions="static",
                                         label=ROW_LABELS["baseline_synth_plus_real"]),
        "real_only": spec(data_mode="real_only", prompt_regime="rich_balanced", finetune_captions="rich",
                          label=ROW_LABELS["real_only"]),
        "ours_synth_plus_real": spec(data_mode="synth_plus_real", prompt_regime="rich_balanced", finetune_captions="rich",
                                     label=ROW_LABELS["ours_synth_plus_real"]),
    }


def ablation_grid(base: ExperimentSpec) -> dict:
    d = base.to_dict()

    def spec(key, mode, regime, ft):
        return ExperimentSpec.from_dict({**d, "data_mode": mode, "prompt_regime": regime, "finetune_captions": ft,
                                         "label": ROW_LABELS[key]})

    return {
        "baseline_synth_only": spec("baseline_synth_only", "synth_only", "static", "static"),
        "ours_synth_only": spec("ours_synth_only", "synth_only", "rich_balanced", "rich"),
        "rich_only_synth_only": spec("rich_only_synth_only", "synth_only", "rich_only", "rich"),
        "rich_only_synth_plus_real": spec("rich_only_synth_plus_real", "synth_plus_real", "rich_only", "rich"),
        "static_synth_only": spec("static_synth_only", "synth_only", "static", "rich"),
        "static_synth_plus_real": spec("static_synth_plus_real", "synth_plus_real", "static", "rich"),
    }


def _group_of(key):
    for group, keys in ABLATION_GROUPS.items():
        if key in keys:
            return group
    return ""


@contextmanager
def stage(name):
    try:
        yield
    except StageError:
        raise
    except DermSynthError as e:
        raise StageError(name, e) from e


class Pipeline:
    """Stage graph: ingest -> caption -> pools -> adapters -> synthetic sets -> classifiers -> reports.

    Every expensive artifact lives in a content-addressed cache under
    ``work_dir/cache`` so experiments that share a prompt regime or adapter
    reuse it instead of rebuilding.
    """

    def __init__(self, config: PipelineConfig, work_dir=None):
        self.cfg = config
        self.root = Path(work_dir or config.work_dir)
        self.cache = ArtifactCache(self.root / "cache")
        self.taxonomy = load_taxonomy()
        self._memo = {}
        self.calls = []

    # data -------------------------------------------------------------
    def data_paths(self) -> dict:
        if "paths" in self._memo:
            return self._memo["paths"]
        d = self.cfg.data
        if d.uses_fixtures:
            from .fixtures import write_fixture_corpus

            payload = {"fixture_seed": d.fixture_seed, "size": d.fixture_size, "version": 1}
            path, _ = self.cache.build("fixtures", payload, lambda tmp: write_fixture_corpus(tmp, d.fixture_seed,
                                                                                              size=d.fixture_size))
            paths = {
                "d7p_metadata": str(path / "d7p" / "meta.csv"),
                "d7p_images": str(path / "d7p"),
                "ham_metadata": str(path / "ham" / "HAM10000_metadata.csv"),
                "ham_images": str(path / "ham"),
            }
        else:
            if not (d.d7p_metadata and d.ham_metadata):
                raise ConfigError("set both d7p_metadata and ham_metadata, or neither to use fixtures")
            paths = {
                "d7p_metadata": d.d7p_metadata,
                "d7p_images": d.d7p_images or str(Path(d.d7p_metadata).parent),
                "ham_metadata": d.ham_metadata,
                "ham_images": d.ham_images or str(Path(d.ham_metadata).parent),
            }
        self._memo["paths"] = paths
        return paths

    def image_root(self, dataset):
        return self.data_paths()[f"{dataset}_images"]

    def ingest(self) -> dict:
        if "index" in self._memo:
            return self._memo["index"]
        with stage("ingest"):
            paths = self.data_paths()
            d7p = parse_d7p_metadata(Path(paths["d7p_metadata"]), self.taxonomy)
            ham = parse_ham_metadata(Path(paths["ham_metadata"]))
            split_seed = self.cfg.seed
            index = {
                "d7p": stratified_split(d7p, self.cfg.data.test_fraction, split_seed, D7P_CLASSES),
                "ham": stratified_split(ham, self.cfg.data.test_fraction, split_seed, HAM_CLASSES),
            }
        self._memo["index"] = index
        self._memo["data_key"] = content_key({
            "d7p": file_digest(paths["d7p_metadata"]),
            "ham": file_digest(paths["ham_metadata"]),
            "split_seed": split_seed,
            "test_fraction": self.cfg.data.test_fraction,
        })
        return index

    # captions and pools ------------------------------------------------
    def _tokenizer(self):
        name = self.cfg.captions.tokenizer
        if name == "whitespace":
            return WhitespaceTokenizer()
        if name == "clip":
            return ClipTokenizer()
        raise ConfigError(f"unknown tokenizer {name!r}")

    def provider(self, kind) -> CaptionProvider:
        c = self.cfg.captions
        return CaptionProvider(
            kind=kind, base_url=c.base_url, model=c.model, temperature=c.temperature, max_retries=c.max_retries,
            cache_dir=str(self.root / "cache" / "responses"), max_workers=c.max_workers, seed=self.cfg.seed,
            allow_network=not self.cfg.offline,
        )

    def _caption_payload(self):
        c = self.cfg.captions
        self.ingest()
        return {"data": self._memo["data_key"], "d7p": self.provider(c.d7p_provider).id,
                "ham": self.provider(c.ham_provider).id, "budget": c.budget, "tokenizer": c.tokenizer}

    def captions(self) -> list:
        """Rich captions for the training split of both datasets (test images are never captioned)."""
        if "captions" in self._memo:
            return self._memo["captions"]
        index = self.ingest()
        c = self.cfg.captions

        def build(tmp):
            out = []
            for ds, kind in (("d7p", c.d7p_provider), ("ham", c.ham_provider)):
                out += generate_captions(index[ds].train, self.provider(kind), c.budget, self.taxonomy,
                                         self.image_root(ds), self._tokenizer())
            write_jsonl(tmp / "captions.jsonl", out)

        with stage("caption"):
            path, key = self.cache.build("captions", self._caption_payload(), build)
            caps = read_jsonl(path / "captions.jsonl", Caption)
        self._memo["captions"] = caps
        self._memo["captions_key"] = key
        self.calls.append("caption")
        return caps

    def _dataset_captions(self, datasets):
        index = self.ingest()
        ids = {r.id for ds in datasets for r in index[ds].train}
        return [cap for cap in self.captions() if cap.source_id in ids]

    def pool(self, regime, datasets=DATASETS) -> tuple:
        """(PromptPool, pool key, manifest) for a prompt regime over the given datasets' training captions."""
        regime = PromptRegime(regime)
        memo_key = ("pool", regime, tuple(datasets))
        if memo_key in self._memo:
            return self._memo[memo_key]
        classes = sorted({c for ds in datasets for c in DATASET_CLASSES[ds]}, key=lambda c: c.value)
        with stage("balance" if regime is PromptRegime.RICH_BALANCED else "pool"):
            if regime is PromptRegime.STATIC:
                pool = PromptPool({c: [static_caption(c)] for c in classes})
                key = content_key({"regime": "static", "classes": [c.value for c in classes]})
                manifest = {"regime": "static", "balance_pool": False}
            else:
                rich = PromptPool.from_captions(self._dataset_captions(datasets))
                payload = {"captions": self._memo["captions_key"], "datasets": list(datasets), "regime": regime.value}
                if regime is PromptRegime.RICH_ONLY:
                    pool, key = rich, content_key(payload)
                    manifest = {"regime": regime.value, "balance_pool": False,
                                "counts": {c.value: len(rich[c]) for c in rich.classes()}}
                else:
                    c = self.cfg.captions
                    provider = self.provider(c.paraphrase_provider)
                    payload.update(paraphrase=provider.id, seed=self.cfg.seed)

                    def build(tmp):
                        balanced = balance_pool(rich, None, provider, self.cfg.seed, c.budget, self._tokenizer())
                        write_jsonl(tmp / "pool.jsonl", balanced.captions())
                        man = balance_manifest(rich, balanced, max(len(rich[k]) for k in rich.classes()),
                                               self.cfg.seed, provider)
                        (tmp / "manifest.json").write_text(json.dumps(man, indent=2, sort_keys=True))

                    path, key = self.cache.build("pools", payload, build)
                    pool = PromptPool.from_captions(read_jsonl(path / "pool.jsonl", Caption))
                    manifest = {"regime": regime.value, "balance_pool": True,
                                **json.loads((path / "manifest.json").read_text())}
                    self.calls.append("balance_pool")
        missing = [c.value for c in classes if not pool[c]]
        if missing:
            raise StageError("pool", ValidationError(f"no training captions for classes {missing}"))
        out = (pool, key, manifest)
        self._memo[memo_key] = out
        return out

    # diffusion -----------------------------------------------------------
    def backend(self):
        if "backend" not in self._memo:
            from .diffusion.backend import make_backend

            with stage("finetune"):
                self._memo["backend"] = make_backend(self.cfg.diffusion, self.root / "cache" / "models")
        return self._memo["backend"]

    def _adapter_datasets(self, dataset):
        return DATASETS if self.cfg.diffusion.joint_adapter else (dataset,)

    def adapter(self, finetune_captions, dataset="d7p") -> tuple:
        """Fine-tune (or load) the LoRA adapter; returns (state dict, adapter key)."""
        from .diffusion.lora import load_adapter, save_adapter

        ft = FinetuneCaptions(finetune_captions)
        datasets = self._adapter_datasets(dataset)
        memo_key = ("adapter", ft, datasets)
        if memo_key in self._memo:
            return self._memo[memo_key]
        index = self.ingest()
        captions = {cap.source_id: cap for cap in self._dataset_captions(datasets)}
        dcfg = self.cfg.diffusion
        backend = self.backend()
        train_cfg = dcfg.train
        payload = {
            "captions": self._memo["captions_key"], "finetune_captions": ft.value, "datasets": list(datasets),
            "backend": backend.name, "base": getattr(backend, "base_id", dcfg.checkpoint), "train": train_cfg.to_dict(),
            "rank": dcfg.lora_rank, "alpha": dcfg.lora_alpha, "targets": list(dcfg.lora_targets), "seed": self.cfg.seed,
        }

        def build(tmp):
            pairs = []
            for ds in datasets:
                for r in index[ds].train:
                    cap = captions[r.id] if ft is FinetuneCaptions.RICH else static_caption(r.diagnosis)
                    pairs.append((_real_path(r, self.image_root(ds)), cap))
            model = backend.adapted_model(dcfg.lora_rank, dcfg.lora_alpha, dcfg.lora_targets, seed=self.cfg.seed)
            cfg = type(train_cfg)(**{**train_cfg.to_dict(), "seed": self.cfg.seed})
            result = backend.finetune(model, pairs, cfg)
            save_adapter(tmp / "adapter.npz", result.adapter, {
                **payload, "n_pairs": len(pairs), "steps": result.steps, "validation_steps": result.validation_steps,
                "first_loss": result.losses[0] if result.losses else None,
                "last_loss": result.losses[-1] if result.losses else None,
            })
            np.save(tmp / "losses.npy", np.asarray(result.losses, dtype=np.float64))

        with stage("finetune"):
            path, key = self.cache.build("adapters", payload, build)
            state, _ = load_adapter(path / "adapter.npz")
        self.calls.append(f"finetune:{ft.value}")
        out = (state, key)
        self._memo[memo_key] = out
        return out

    def synthetic(self, regime, finetune_captions, dataset="d7p"):
        """Sample (or load) the synthetic set for a (prompt regime, adapter) pair; returns (dataset, pool manifest)."""
        from .diffusion.sampling import SamplerConfig, SyntheticDataset

        regime = PromptRegime(regime)
        datasets = self._adapter_datasets(dataset)
        memo_key = ("synth", regime, FinetuneCaptions(finetune_captions), datasets)
        if memo_key in self._memo:
            return self._memo[memo_key]
        pool, pool_key, pool_manifest = self.pool(regime, datasets)
        state, adapter_key = self.adapter(finetune_captions, dataset)
        dcfg = self.cfg.diffusion
        sampler = SamplerConfig(**{**dcfg.sampler.to_dict(), "seed": self.cfg.seed})
        per_class = self.cfg.spec.total_per_class
        payload = {"adapter": adapter_key, "pool": pool_key, "per_class": per_class, "sampler": sampler.to_dict()}
        dataset_id = content_key(payload)

        def build(tmp):
            backend = self.backend()
            model = backend.adapted_model(dcfg.lora_rank, dcfg.lora_alpha, dcfg.lora_targets, adapter_state=state)
            backend.generate(model, pool, per_class, self.cfg.seed, tmp, sampler, dataset_id=dataset_id)
            (tmp / "pool_manifest.json").write_text(json.dumps(pool_manifest, indent=2, sort_keys=True))

        with stage("sample"):
            path, _ = self.cache.build("synthetic", payload, build)
            synth = SyntheticDataset.load(path)
        self.calls.append(f"sample:{regime.value}:{FinetuneCaptions(finetune_captions).value}")
        out = (synth, pool_manifest)
        self._memo[memo_key] = out
        return out

    def caption_provenance(self, regime, datasets=DATASETS) -> dict:
        pool, _, _ = self.pool(regime, datasets)
        return {cap.id: cap.provenance.value for cap in pool.captions()}

    # classifier ----------------------------------------------------------
    def classifier_config(self, spec) -> ClassifierConfig:
        return ClassifierConfig(**{**self.cfg.classifier.to_dict(), "seed": spec.seed})

    def training_set(self, spec: ExperimentSpec, dataset) -> TrainingSet:
        index = self.ingest()
        synth, pool_manifest = (None, None)
        provenance = None
        if spec.uses_synthetic:
            synth, pool_manifest = self.synthetic(spec.prompt_regime, spec.finetune_captions, dataset)
            provenance = self.caption_provenance(spec.prompt_regime, self._adapter_datasets(dataset))
        with stage("assemble"):
            ts = assemble_training_set(spec, index[dataset], synth, DATASET_CLASSES[dataset], self.image_root(dataset),
                                       provenance)
        ts.manifest["pool"] = pool_manifest
        return ts

    def run_experiment(self, spec: ExperimentSpec, out_dir=None) -> dict:
        """Train one classifier per dataset for ``spec`` and score it on that dataset's real test split."""
        index = self.ingest()
        reports = {}
        for ds in DATASETS:
            ts = self.training_set(spec, ds)
            classes = DATASET_CLASSES[ds]
            ccfg = self.classifier_config(spec)
            with stage("train"):
                model = train_classifier(ts.pairs(), None, ccfg, classes)
            test = index[ds].test
            with stage("evaluate"):
                preds = predict(model, [_real_path(r, self.image_root(ds)) for r in test])
                meta = {
                    "dataset": ds,
                    "spec": spec.to_dict(),
                    "config_digest": self.cfg.digest(),
                    "seeds": {"pipeline": self.cfg.seed, "split": self.cfg.seed, "classifier": ccfg.seed,
                              "sampler": self.cfg.seed},
                    "synthetic_dataset": ts.manifest["synthetic_dataset"],
                    "pool": ts.manifest["pool"],
                    "counts": ts.manifest["counts"],
                    "classifier": model.info,
                    "classifier_config": ccfg.to_dict(),
                }
                report = evaluate(preds, [r.diagnosis for r in test], classes, meta)
            if out_dir is not None:
                d = Path(out_dir) / ds
                d.mkdir(parents=True, exist_ok=True)
                (d / "manifest.json").write_text(json.dumps(ts.manifest, indent=2, sort_keys=True))
                (d / "report.json").write_text(json.dumps(report.to_dict(), indent=2, sort_keys=True))
                (d / "history.json").write_text(json.dumps(model.history, indent=2))
            reports[ds] = report
        return reports

    def _run_grid(self, grid: dict, name, out_dir=None, grouped=False) -> dict:
        out_dir = Path(out_dir) if out_dir else None
        results = {}
        for key, spec in grid.items():
            log.info("%s: %s", name, spec.label)
            results[key] = self.run_experiment(spec, out_dir / name / key if out_dir else None)
        tables = {}
        for ds in DATASETS:
            rows = [ReportRow(grid[k].label, results[k][ds], _group_of(k) if grouped else "") for k in grid]
            tables[f"{name}_{ds}"] = render_report_table(rows)
        return {"reports": results, "tables": tables}

    def run_main(self, out_dir=None):
        return self._run_grid(main_grid(self.cfg.spec), "main", out_dir)

    def run_ablation_suite(self, base_spec=None, out_dir=None):
        return self._run_grid(ablation_grid(base_spec or self.cfg.spec), "ablation", out_dir, grouped=True)


def run_experiment(spec: ExperimentSpec, pipeline: Pipeline, out_dir=None) -> dict:
    return pipeline.run_experiment(spec, out_dir)


def run_ablation_suite(base_spec: ExperimentSpec, pipeline: Pipeline, out_dir=None) -> dict:
    return pipeline.run_ablation_suite(base_spec, out_dir)


def write_outputs(result: dict, out_dir) -> dict:
    """Tables (.tsv/.txt), figures and a JSON bundle of every report."""
    out_dir = Path(out_dir)
    written = render_bundle(result["tables"], out_dir)
    bundle = {key: {ds: rep.to_dict() for ds, rep in reps.items()} for key, reps in result["reports"].items()}
    for stem, table in result["tables"].items():
        (out_dir / f"{stem}.rows.json").write_text(json.dumps(
            [{"label": r.label, "group": r.group, "report": r.report.to_dict()} for r in table.rows], indent=2))
    (out_dir / "reports.json").write_text(json.dumps(bundle, indent=2, sort_keys=True))
    return written


def load_rows(path) -> list:
    return [ReportRow(d["label"], EvaluationReport.from_dict(d["report"]), d.get("group", ""))
            for d in json.loads(Path(path).read_text())]


__all__ = [
    "Pipeline",
    "TrainingSet",
    "assemble_training_set",
    "ablation_grid",
    "main_grid",
    "run_ablation_suite",
    "run_experiment",
    "write_outputs",
    "load_rows",
]
