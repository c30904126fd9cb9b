"""Acceptance suite: one test per primary criterion, each printing a PASS/FAIL line.

Run with ``pytest tests/test_acceptance.py -v -s`` to see the lines as they happen;
they are also collected into an "acceptance criteria" section of the summary.
"""

import hashlib
import json
import math
import random
import subprocess
import sys
import time
from collections import Counter
from pathlib import Path

import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from dermsynth.balancing import balance_pool, paraphrase
from dermsynth.captioning import CaptionProvider, count_tokens, generate_caption, generate_captions, static_caption
from dermsynth.classifier import ClassifierConfig, evaluate, predict, train_classifier
from dermsynth.config import desk_profile
from dermsynth.diffusion import attach_lora, diffusion_loss, lora_parameters, q_sample
from dermsynth.diffusion.backend import ToyBackend
from dermsynth.diffusion.denoiser import TinyDenoiser, ToyUNet
from dermsynth.diffusion.lora import expected_parameter_count, lora_modules
from dermsynth.diffusion.sampling import SamplerConfig, SyntheticDataset, SyntheticItem, derive_seed, sample_batch
from dermsynth.diffusion.schedule import build_linear_schedule
from dermsynth.diffusion.text import HashedTextEncoder, collate
from dermsynth.diffusion.toy_data import color_oracle, colored_squares
from dermsynth.diffusion.train import DiffusionTrainConfig
from dermsynth.errors import ValidationError
from dermsynth.experiments import Pipeline, assemble_training_set
from dermsynth.fixtures import draw_lesion, sample_concepts
from dermsynth.ingestion import parse_d7p_metadata, parse_ham_metadata
from dermsynth.types import (
    D7P_CLASSES,
    HAM_CLASSES,
    DiagnosisClass,
    ExperimentSpec,
    LesionRecord,
    PromptPool,
    Provenance,
    Source,
)

BUDGET = 77


# ----------------------------------------------------------------------------- metric oracle


def _oracle(predictions, labels, classes):
    """Confusion matrix by nested loops, then accuracy and precision from it."""
    k = len(classes)
    m = [[0] * k for _ in range(k)]
    for p, y in zip(predictions, labels):
        m[classes.index(y)][classes.index(p)] += 1
    n = sum(sum(row) for row in m)
    acc = sum(m[i][i] for i in range(k)) / n
    prec, zero_cols = {}, 0
    for j, c in enumerate(classes):
        col = sum(m[i][j] for i in range(k))
        if col == 0:
            zero_cols += 1
            prec[c] = 0.0
        else:
            prec[c] = m[j][j] / col
    return m, acc, prec, zero_cols


def test_metric_oracle(criterion):
    with criterion("metric oracle: 1000 random instances, exact match"):
        rng = random.Random(2024)
        t0 = time.perf_counter()
        zero_cases = 0
        for _ in range(1000):
            classes = rng.sample(HAM_CLASSES, rng.randint(1, 7))
            n = rng.randint(1, 200)
            labels = [rng.choice(classes) for _ in range(n)]
            # Skewed predictions so some classes are never predicted.
            preds = [rng.choice(classes[: rng.randint(1, len(classes))]) for _ in range(n)]
            m, acc, prec, zeros = _oracle(preds, labels, classes)
            zero_cases += zeros
            rep = evaluate(preds, labels, classes)
            assert [list(r) for r in rep.confusion] == m
            assert rep.overall_accuracy == acc
            assert rep.per_class_precision == prec
            assert rep.n_test == n
        assert zero_cases > 0
        assert time.perf_counter() - t0 < 10


# ----------------------------------------------------------------------------- balancing


def _random_pool(rng, provider):
    classes = rng.sample(HAM_CLASSES, rng.randint(1, 7))
    nprng = np.random.default_rng(rng.randrange(2**32))
    by_class = {}
    for cls in classes:
        caps = []
        for i in range(rng.randint(1, 8)):
            rec = LesionRecord(f"{cls.value}-{i}", "x.png", cls, Source.D7P, None, None, None,
                               sample_concepts(cls.value, nprng))
            caps.append(generate_caption(rec, provider))
        by_class[cls] = caps
    return PromptPool(by_class)


def test_balancing_suite(criterion):
    with criterion("balancing: 100 random pools, target/prefix/deficit/idempotence"):
        rng = random.Random(7)
        t0 = time.perf_counter()
        for i in range(100):
            provider = CaptionProvider(seed=i)
            pool = _random_pool(rng, provider)
            target = max(len(pool[c]) for c in pool.classes()) + rng.randint(0, 3)
            out = balance_pool(pool, target=target, provider=provider, seed=i)
            assert set(out.classes()) == set(pool.classes())
            for cls in pool.classes():
                before, after = list(pool[cls]), list(out[cls])
                assert len(after) == target
                assert after[: len(before)] == before
                added = after[len(before):]
                assert sum(c.provenance is Provenance.PARAPHRASE for c in after) == target - len(before)
                assert all(c.cls is cls and c.token_count <= BUDGET for c in added)
            again = balance_pool(out, target=target, provider=provider, seed=i)
            assert {c: list(again[c]) for c in again.classes()} == {c: list(out[c]) for c in out.classes()}
        assert time.perf_counter() - t0 < 30


# ----------------------------------------------------------------------------- token budget


def _long_reply(url, headers, payload):
    # Omits the class name and runs far past the budget.
    words = " ".join(f"clause{i} with irregular pigment network," for i in range(40))
    return {"choices": [{"message": {"content": f"Dermoscopy shows {words} and scattered dots."}}]}


def _reworded_reply(url, headers, payload):
    prompt = payload["messages"][0]["content"][0]["text"]
    return {"choices": [{"message": {"content": "Reworded view: " + prompt}}]}


def _check(captions):
    for c in captions:
        assert count_tokens(c.text) <= BUDGET and c.token_count <= BUDGET
        assert c.cls.full_name in c.text.lower()


def test_token_budget(criterion, corpus, taxonomy):
    with criterion("token budget: every provider over the fixture corpus"):
        d7p = parse_d7p_metadata(corpus["d7p_metadata"], taxonomy)
        ham = parse_ham_metadata(corpus["ham_metadata"])
        offline = CaptionProvider()
        emitted = []
        emitted += generate_captions(d7p, offline, BUDGET, taxonomy, corpus["d7p_images"])
        emitted += generate_captions(ham, offline, BUDGET, taxonomy, corpus["ham_images"])
        text = CaptionProvider("remote_text", base_url="http://stub", model="m", transport=_long_reply)
        vision = CaptionProvider("remote_vision", base_url="http://stub", model="m", transport=_long_reply)
        remote = generate_captions(d7p, text, BUDGET, taxonomy, corpus["d7p_images"])
        remote += generate_captions(ham, vision, BUDGET, taxonomy, corpus["ham_images"])
        raw = count_tokens(_long_reply(None, None, None)["choices"][0]["message"]["content"])
        assert raw > BUDGET and all(c.token_count < raw for c in remote)
        emitted += remote
        emitted += [static_caption(c) for c in HAM_CLASSES]
        emitted += [paraphrase(c, offline, BUDGET, variant=i % 4) for i, c in enumerate(emitted[:200])]
        reword = CaptionProvider("remote_text", base_url="http://stub", model="m", transport=_reworded_reply)
        emitted += [paraphrase(c, reword, BUDGET) for c in emitted[:20] + remote[:20]]
        assert len(emitted) > len(d7p) + len(ham)
        _check(emitted)


# ----------------------------------------------------------------------------- LoRA


def test_lora_identity_and_count(criterion):
    with criterion("LoRA: identity at init and rank-64 parameter count"):
        torch.manual_seed(0)
        base = ToyUNet()
        enc = HashedTextEncoder(64)
        ctx, mask = collate([enc.encode("red square"), enc.encode("a small green diamond")])
        x = torch.randn(2, 3, 32, 32, generator=torch.Generator().manual_seed(1))
        t = torch.tensor([3, 170])
        with torch.no_grad():
            ref = base(x, t, ctx, mask)
            adapted = attach_lora(base, rank=64)
            assert (adapted(x, t, ctx, mask) - ref).abs().max().item() <= 1e-6
        mods = lora_modules(adapted)
        assert {n.rsplit(".", 1)[-1] for n in mods} == {"to_q", "to_k", "to_v", "to_out"}
        by_hand = sum(64 * (m.in_features + m.out_features) for m in mods.values())
        trainable = sum(p.numel() for p in adapted.parameters() if p.requires_grad)
        assert trainable == by_hand == expected_parameter_count(adapted, 64)


# ----------------------------------------------------------------------------- diffusion numerics

SCHED = build_linear_schedule(200, 5e-4, 0.1)


@settings(max_examples=200, deadline=None)
@given(st.integers(2, 1000), st.floats(1e-6, 0.5), st.floats(1e-6, 0.999))
def _schedule_is_monotone(T, b1, bT):
    if not 0 < b1 < bT < 1:
        with pytest.raises(ValidationError):
            build_linear_schedule(T, b1, bT)
        return
    s = build_linear_schedule(T, b1, bT)
    ab = s.alpha_bar
    assert (s.beta[1:] > s.beta[:-1]).all()
    assert (ab[1:] <= ab[:-1]).all() and (ab >= 0).all() and (ab < 1).all()
    # Strict wherever the product has not underflowed.
    assert (ab[1:] < ab[:-1])[ab[1:] > 0].all()


def _fd_worst_relative_error():
    torch.manual_seed(0)
    model = TinyDenoiser().double()
    attach_lora(model, rank=2)
    with torch.no_grad():
        for m in lora_modules(model).values():
            m.lora_B.normal_(0, 0.3)
    assert sum(p.numel() for p in model.parameters()) <= 1000
    params = lora_parameters(model)
    g = torch.Generator().manual_seed(11)
    x0 = torch.randn(3, 2, 3, 3, generator=g, dtype=torch.float64)
    eps = torch.randn(x0.shape, generator=g, dtype=torch.float64)
    ctx = torch.randn(3, 3, 6, generator=g, dtype=torch.float64)
    mask = torch.ones(3, 3, dtype=torch.bool)
    t = torch.tensor([2, 100, 199])

    def loss():
        return diffusion_loss(model, x0, ctx, mask, SCHED, t=t, eps=eps)

    grads = torch.autograd.grad(loss(), params)
    h, worst = 1e-6, 0.0
    with torch.no_grad():
        for p, gp in zip(params, grads):
            flat, gflat = p.view(-1), gp.reshape(-1)
            for i in range(flat.numel()):
                orig = flat[i].item()
                flat[i] = orig + h
                up = loss().item()
                flat[i] = orig - h
                down = loss().item()
                flat[i] = orig
                fd = (up - down) / (2 * h)
                worst = max(worst, abs(fd - gflat[i].item()) / max(abs(fd), abs(gflat[i].item()), 1e-8))
    return worst


def test_diffusion_numerics(criterion):
    with criterion("diffusion numerics: monotone schedule, q_sample moments, FD gradient"):
        t0 = time.perf_counter()
        _schedule_is_monotone()
        n = 10_000
        for t in (1, 50, 120, 200):
            g = torch.Generator().manual_seed(t)
            ab = float(SCHED.alpha_bar[t - 1])
            x0 = torch.full((n,), 0.7, dtype=torch.float64)
            x_t = q_sample(x0, t, torch.randn(n, generator=g, dtype=torch.float64), SCHED)
            mean, var = math.sqrt(ab) * 0.7, 1 - ab
            assert abs(x_t.var().item() - var) / var < 0.05
            # 5% of the mean, widened by the MC standard error when the mean itself is near 0.
            assert abs(x_t.mean().item() - mean) < 0.05 * mean + 4 * math.sqrt(var / n)
        assert _fd_worst_relative_error() < 1e-4
        assert time.perf_counter() - t0 < 120


# ----------------------------------------------------------------------------- conditional round trip


@pytest.mark.slow
def test_conditional_round_trip(criterion):
    with criterion("conditional round trip: >= 90% colour agreement over 200 samples"):
        t0 = time.perf_counter()
        backend = ToyBackend()
        model = backend.adapted_model(rank=64, seed=0)
        cfg = DiffusionTrainConfig(steps=2000, learning_rate=1e-3, resolution=32, batch_size=16, caption_dropout=0.3,
                                   random_crop=False, horizontal_flip=False, log_every=0, seed=2)
        backend.finetune(model, colored_squares(64, seed=3), cfg)
        sampler = SamplerConfig(steps=50, guidance_scale=7.5, eta=1.0, resolution=32, batch_size=50)
        hits = {}
        for name in ("red", "blue"):
            conds = [backend.encoder.encode(f"{name} square")] * 100
            seeds = [derive_seed(0, name, i) for i in range(100)]
            imgs = sample_batch(model, conds, backend.schedule, sampler, seeds, uncond=backend.encoder.null())
            hits[name] = sum(color_oracle(im) == name for im in imgs)
        agreement = sum(hits.values()) / 200
        print(f"\nround trip: {hits} agreement {agreement:.3f}")
        assert agreement >= 0.90
        assert time.perf_counter() - t0 < 600


# ----------------------------------------------------------------------------- protocol fidelity

ABLATION_ROWS = [
    ("A: synthetic data alone", "label-prompt baseline (synth only)"),
    ("A: synthetic data alone", "rich+balanced prompts (synth only)"),
    ("B: no prompt balancing", "rich-only prompts (synth only)"),
    ("B: no prompt balancing", "rich-only prompts (synth+real)"),
    ("C: static label-only prompts", "static prompts (synth only)"),
    ("C: static label-only prompts", "static prompts (synth+real)"),
]


def _tiny_config():
    cfg = desk_profile()
    cfg.diffusion.base_steps = 4
    cfg.diffusion.lora_rank = 4
    cfg.diffusion.train.steps = 3
    cfg.diffusion.train.log_every = 0
    cfg.diffusion.sampler.steps = 2
    cfg.spec = ExperimentSpec(real_cap_per_class=4, total_per_class=6)
    cfg.classifier.architecture = "small_cnn"
    cfg.classifier.max_epochs = 2
    cfg.classifier.patience = 1
    return cfg


def test_protocol_fidelity(criterion, tmp_path):
    with criterion("protocol fidelity: 250/500 arithmetic and ablation row set"):
        mel, nv, df, bcc = DiagnosisClass.MEL, DiagnosisClass.NV, DiagnosisClass.DF, DiagnosisClass.BCC
        inventory = {mel: 300, nv: 250, df: 100, bcc: 0}
        records = [LesionRecord(f"{c.value}-{i}", f"{c.value}/{i}.png", c, Source.HAM, None, None, None, None)
                   for c, n in inventory.items() for i in range(n)]
        synth = SyntheticDataset("s", tmp_path, [
            SyntheticItem(f"{c.value}_{k:05d}", f"{c.value}/{k}.png", c.value, "cap", "t", k)
            for c in inventory for k in range(500)])
        ts = assemble_training_set(ExperimentSpec(), records, synth, list(inventory))
        got = {c: (v["real"], v["synthetic"]) for c, v in ts.counts().items()}
        assert got == {"mel": (250, 250), "nv": (250, 250), "df": (100, 400), "bcc": (0, 500)}

        result = Pipeline(_tiny_config(), tmp_path / "work").run_ablation_suite(None, tmp_path / "out")
        for ds, classes in (("d7p", D7P_CLASSES), ("ham", HAM_CLASSES)):
            table = result["tables"][f"ablation_{ds}"]
            assert [(r.group, r.label) for r in table.rows] == ABLATION_ROWS
            assert table.columns == ["accuracy", *sorted(c.value for c in classes)]


# ----------------------------------------------------------------------------- end-to-end desk run


def _desk_run(work):
    t0 = time.perf_counter()
    proc = subprocess.run(
        [sys.executable, "-m", "dermsynth", "--profile", "desk", "--offline", "--work-dir", str(work),
         "run", "--out", str(work / "out")],
        capture_output=True, text=True,
    )
    assert proc.returncode == 0, proc.stderr[-3000:]
    return proc.stdout, time.perf_counter() - t0


def _normalised_outputs(work):
    """Every non-image output with the work-dir prefix stripped; PNG figures are checked for presence only."""
    out = {}
    for p in sorted((work / "out").rglob("*")):
        if p.is_file() and p.suffix != ".png":
            out[str(p.relative_to(work))] = p.read_text().replace(str(work), "<work>")
    return out


def _sha256(path):
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


@pytest.mark.slow
def test_desk_end_to_end(criterion, tmp_path):
    with criterion("end-to-end desk run: deterministic, complete reports and manifests, < 20 min"):
        a, b = tmp_path / "a", tmp_path / "b"
        out_a, secs_a = _desk_run(a)
        out_b, secs_b = _desk_run(b)
        print(f"\ndesk runs: {secs_a:.0f}s and {secs_b:.0f}s")
        assert secs_a < 1200 and secs_b < 1200
        assert out_a.replace(str(a), "<work>") == out_b.replace(str(b), "<work>")
        files_a, files_b = _normalised_outputs(a), _normalised_outputs(b)
        assert files_a.keys() == files_b.keys()
        for k in files_a:
            assert files_a[k] == files_b[k], k

        for ds, classes in (("d7p", D7P_CLASSES), ("ham", HAM_CLASSES)):
            header = (a / "out" / f"main_{ds}.tsv").read_text().splitlines()[0].split("\t")
            assert {c.value for c in classes} <= set(header)
            assert list((a / "out" / "figures").glob(f"main_{ds}_*.png"))
            for exp in ("baseline_synth_plus_real", "real_only", "ours_synth_plus_real"):
                manifest = json.loads((a / "out" / "main" / exp / ds / "manifest.json").read_text())
                assert manifest["classes"] == [c.value for c in classes]
                items = manifest["items"]
                assert items and set(manifest["sha256"]) == {it["path"] for it in items}
                for it in items:
                    assert Path(it["path"]).is_file()
                    assert manifest["sha256"][it["path"]] == _sha256(it["path"])
                    if it["origin"] == "synthetic":
                        assert it["synthetic_id"] and it["caption_id"] and isinstance(it["seed"], int)
                        assert it["caption_provenance"]
                    else:
                        assert it["record_id"]
                assert Counter(it["class"] for it in items) == {
                    c: v["real"] + v["synthetic"] for c, v in manifest["counts"].items() if v["real"] + v["synthetic"]}


# ----------------------------------------------------------------------------- classifier sanity


def test_classifier_sanity(criterion):
    with criterion("classifier sanity: 50-image overfit within 30 epochs, lr step schedule"):
        cfg = ClassifierConfig()
        assert cfg.lr_at(0) == pytest.approx(0.01)
        assert cfg.lr_at(10) == pytest.approx(0.001)
        assert cfg.lr_at(20) == pytest.approx(0.0001)
        rng = np.random.default_rng(5)
        data = [(draw_lesion(c.value, rng, 32), c) for c in (DiagnosisClass.MEL, DiagnosisClass.NV) for _ in range(25)]
        run = ClassifierConfig(input_size=32, max_epochs=30, patience=29, horizontal_flip=False, seed=0)
        model = train_classifier(data, data, run)
        assert len(model.history) <= 30
        preds = predict(model, [img for img, _ in data])
        assert sum(p == y for p, (_, y) in zip(preds, data)) == 50
