"""Acceptance gate: one test per release criterion, each printing a
PASS/FAIL line with its runtime (see also the terminal summary block).

Every expected value here is either hand arithmetic or an independent
brute-force computation living in this file; tolerances are fixed in the
assertions.
"""

import math

import numpy as np
import pytest

from maskdetect.backend import OracleNoiseBackend
from maskdetect.core import ManifestEntry, RunConfig, make_rng
from maskdetect.detector import calibrate_tau, choose_k, run_detection
from maskdetect.evaluation import auroc, average_precision, fpr_at_tpr
from maskdetect.masks import MaskSpec, generate_mask
from maskdetect.scoring import ScoringParams, psnr, ssim
from maskdetect.theory import (
    auc_ceiling,
    kl_divergence,
    likelihood_gap,
    random_distribution,
    sample_indices,
    tv_distance,
    validate_k_bound,
)

from conftest import criterion, make_image, make_mask


def test_scoring_exactness():
    with criterion("scoring exactness (hand-derived fixtures)", 1.0):
        full = ScoringParams(region="full")
        # identity: zero error, capped psnr, unit ssim
        rng = np.random.default_rng(0)
        img = make_image(rng.integers(0, 256, (16, 16, 3)))
        assert psnr(img, img, params=full) == 100.0
        assert ssim(img, img) == pytest.approx(1.0, abs=1e-9)

        # maximal single-pixel error: MSE = MAX^2 so exactly 0 dB
        zero = make_image(np.zeros((3, 3, 1)))
        maxed = make_image(np.full((3, 3, 1), 255))
        one_px = make_mask([[1, 0, 0], [0, 0, 0], [0, 0, 0]])
        assert psnr(zero, maxed, one_px) == pytest.approx(0.0, abs=1e-4)

        # constant difference of 2: MSE = 4, 10*log10(65025/4) = 42.1103...
        a = make_image(np.full((4, 5, 3), 10))
        b = make_image(np.full((4, 5, 3), 12))
        assert psnr(a, b, params=full) == pytest.approx(42.1103, abs=1e-4)

        # zero-variance ssim closed form: C1 / (255^2 + C1)
        c1 = (0.01 * 255) ** 2
        got = ssim(zero_8 := make_image(np.zeros((8, 8, 3))),
                   make_image(np.full((8, 8, 3), 255)))
        assert got == pytest.approx(c1 / (65025.0 + c1), abs=1e-12)
        assert got == pytest.approx(9.9990e-5, abs=1e-8)


def _auroc_brute(fake, real):
    f = fake[:, None]
    r = real[None, :]
    return float((np.sum(f < r) + 0.5 * np.sum(f == r)) / (f.size * r.size))


def _ap_brute(fake, real):
    # tie-free random draws: plain stable sort, then precision at fake hits
    deltas = np.concatenate([fake, real])
    flags = np.concatenate([np.ones(fake.size, bool), np.zeros(real.size, bool)])
    order = np.argsort(deltas, kind="stable")
    hits = 0
    precisions = []
    for pos, idx in enumerate(order, start=1):
        if flags[idx]:
            hits += 1
            precisions.append(hits / pos)
    return sum(precisions) / len(precisions)


def test_metric_oracles():
    with criterion("auroc/ap equal brute-force oracles, 200 instances", 30.0):
        rng = np.random.default_rng(202)
        for _ in range(200):
            nf = int(rng.integers(2, 501))
            nr = int(rng.integers(2, 501))
            fake = rng.normal(0.0, 1.0, nf)
            real = rng.normal(rng.uniform(-1, 1), rng.uniform(0.5, 2.0), nr)
            assert auroc(fake, real) == pytest.approx(_auroc_brute(fake, real),
                                                      abs=1e-12)
            assert average_precision(fake, real) == pytest.approx(
                _ap_brute(fake, real), abs=1e-12)


def test_fpr95_convention():
    with criterion("fpr95 threshold convention", 1.0):
        result = calibrate_tau([float(v) for v in range(1, 101)], 0.95)
        assert result.tau == 95.0
        declared = sum(1 for v in range(1, 101) if v <= result.tau)
        assert declared == 95

        rng = np.random.default_rng(11)
        for _ in range(50):
            n = int(rng.integers(5, 400))
            values = rng.normal(size=n)  # continuous: distinct a.s.
            tau = calibrate_tau(values.tolist(), 0.95).tau
            frac = float(np.mean(values <= tau))
            assert 0.95 <= frac <= 0.95 + 1.0 / n


def test_end_to_end_likelihood_gap_pipeline():
    with criterion("end-to-end oracle-noise pipeline (400 images)", 60.0):
        rng = np.random.default_rng(400)
        images = {}
        entries = []
        for i in range(400):
            label = "fake" if i < 200 else "real"
            image_id = f"{label}-{i:03d}"
            images[image_id] = make_image(rng.integers(64, 192, (64, 64, 3)))
            entries.append(ManifestEntry(id=image_id, path=image_id, label=label,
                                         source_model="fixture"))
        fake_ids = [e.id for e in entries if e.label == "fake"]
        backend = OracleNoiseBackend(sigma_fake=2.0, sigma_real=8.0,
                                     fake_ids=fake_ids)
        config = RunConfig(mask_kind="genhalf", mask_seed=1, k=3, metric="psnr",
                           concurrency=1)
        records, failures = run_detection(entries, config, backend,
                                          loader=lambda e: images[e.id])
        assert not failures and len(records) == 400
        labels = {e.id: e.label for e in entries}
        fake = [r.delta for r in records if labels[r.id] == "fake"]
        real = [r.delta for r in records if labels[r.id] == "real"]
        assert auroc(fake, real) >= 0.99
        fpr95, _ = fpr_at_tpr(fake, real, 0.95)
        assert fpr95 <= 0.02


def test_k_bound_validation():
    with criterion("hoeffding k-bound (K=48, 1000 trials)", 30.0):
        assert choose_k(1.0, 0.05, 0.5, 4.0) == 48
        ratio = validate_k_bound(sigma=1.0, gap=0.5, delta_prob=0.05, c=4.0,
                                 trials=1000, seed=12)
        assert ratio <= 0.10  # the 1 - 2*delta guarantee


def test_lecam_ceiling():
    with criterion("le cam auc ceiling, 50 pairs x 20 detectors", 60.0):
        rng = make_rng(777)
        n = 10_000
        slack = 3.0 / math.sqrt(n)
        for _ in range(50):
            g = random_distribution(rng, 10)
            h = random_distribution(rng, 10)
            ceiling = auc_ceiling(tv_distance(g, h))
            g_idx = sample_indices(g, n, rng)
            h_idx = sample_indices(h, n, rng)
            for d in range(20):
                scores = rng.normal(size=10)
                if d % 2 == 1:
                    scores = (scores > rng.normal()).astype(np.float64)
                auc = auroc(-scores[g_idx], -scores[h_idx])
                assert auc <= ceiling + slack


def test_pinsker_chain():
    with criterion("pinsker chain on 1000 random instances", 10.0):
        rng = make_rng(888)
        for _ in range(1000):
            g = random_distribution(rng, 12)
            h = random_distribution(rng, 12)
            logp = np.log(random_distribution(rng, 12).probs)
            gap = likelihood_gap(g, h, logp)
            sup = float(np.max(np.abs(logp)))
            bound = sup * math.sqrt(kl_divergence(g, h) / 2.0)
            assert bound - gap >= -1e-9


def test_detect_determinism(tmp_path):
    with criterion("detect-run determinism (records and masks)", 30.0):
        from maskdetect.cli import main
        from maskdetect.core import ManifestEntry, image_to_png, write_manifest

        rng = np.random.default_rng(5)
        entries = []
        for i in range(6):
            label = "fake" if i % 2 else "real"
            img = make_image(rng.integers(64, 192, (32, 32, 3)))
            name = f"{label}-{i}.png"
            image_to_png(img, tmp_path / name)
            entries.append(ManifestEntry(id=f"{label}-{i}", path=name,
                                         label=label, source_model="fixture"))
        manifest = tmp_path / "m.jsonl"
        write_manifest(entries, manifest)
        args = ["detect", "--manifest", str(manifest), "--backend",
                "builtin:oracle-noise?sigma_fake=2&sigma_real=8",
                "--images-root", str(tmp_path), "--mask", "thick",
                "--mask-seed", "3", "--k", "2", "--concurrency", "3"]
        out1, out2 = tmp_path / "s1.jsonl", tmp_path / "s2.jsonl"
        assert main(args + ["--out", str(out1)]) == 0
        assert main(args + ["--out", str(out2)]) == 0
        assert sorted(out1.read_text().splitlines()) == \
            sorted(out2.read_text().splitlines())

        for seed in (0, 1, 42):
            spec = MaskSpec(kind="thick", seed=seed)
            m1 = generate_mask(spec, 64, 64)
            m2 = generate_mask(spec, 64, 64)
            assert np.array_equal(m1.bits, m2.bits)
