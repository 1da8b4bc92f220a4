import math

import numpy as np
import pytest

from red_denoise import metrics
from red_denoise.errors import ShapeMismatch
from red_denoise.fileio import ManifestEntry, save_rtf, write_manifest
from red_denoise.metrics import (
    QualityReport,
    evaluate,
    format_report,
    parse_report,
    psnr,
    rmse,
    score,
    ssim,
)

from oracles import psnr_loops, rmse_loops, ssim_loops


def test_rmse_basics():
    a = np.random.default_rng(0).random((1, 4, 4))
    assert rmse(a, a) == 0.0
    assert rmse(np.zeros(4), np.ones(4)) == 1.0
    with pytest.raises(ShapeMismatch):
        rmse(np.zeros(3), np.zeros(4))


def test_psnr_closed_forms():
    a = np.zeros((1, 10, 10))
    assert psnr(a, a + 0.1) == pytest.approx(20.0, abs=1e-12)
    assert psnr(a, a) == math.inf
    assert psnr(a, a + 0.0062) == pytest.approx(44.152, abs=1e-3)


def test_ssim_closed_forms():
    a = np.random.default_rng(1).random((1, 16, 16))
    assert ssim(a, a) == 1.0
    c1, c2 = 1e-4, 9e-4
    expected = c1 * c2 / ((1 + c1) * c2)
    assert ssim(np.zeros((1, 16, 16)), np.ones((1, 16, 16))) == pytest.approx(expected, rel=1e-14)
    assert expected == pytest.approx(9.999e-5, rel=1e-4)


def test_ssim_errors():
    with pytest.raises(ShapeMismatch):
        ssim(np.zeros((1, 7, 16)), np.zeros((1, 7, 16)))
    with pytest.raises(ShapeMismatch):
        ssim(np.zeros((1, 8, 8)), np.zeros((1, 8, 9)))


@pytest.mark.parametrize("seed", range(5))
def test_metrics_match_loops(seed):
    rng = np.random.default_rng(seed)
    a, b = rng.random((2, 1, 16, 16))
    assert abs(rmse(a, b) - rmse_loops(a, b)) < 1e-12
    assert abs(psnr(a, b) - psnr_loops(a, b)) < 1e-12
    assert abs(ssim(a, b) - ssim_loops(a, b)) < 1e-12


def test_ssim_symmetric_and_bounded():
    rng = np.random.default_rng(3)
    for _ in range(10):
        a, b = rng.random((2, 1, 24, 24))
        assert abs(ssim(a, b) - ssim(b, a)) < 1e-12
        assert -1 <= ssim(a, b) <= 1
        assert ssim(a, a) == 1.0


def test_psnr_decreases_with_noise():
    rng = np.random.default_rng(4)
    clean = rng.random((1, 32, 32))
    noise = rng.standard_normal(clean.shape)
    values = [psnr(clean + amp * noise, clean) for amp in (0.01, 0.05, 0.2)]
    assert values[0] > values[1] > values[2]


def test_psnr_rmse_relation():
    rng = np.random.default_rng(5)
    a, b = rng.random((2, 1, 16, 16))
    r = rmse(a, b)
    assert abs(psnr(a, b) - (-10 * math.log10(r * r))) < 1e-10


def test_report_aggregates_and_tsv():
    rng = np.random.default_rng(6)
    clean = rng.random((3, 1, 16, 16))
    noisy = clean + 0.05 * rng.standard_normal(clean.shape)
    report = QualityReport([score(f"img{i}", noisy[i], clean[i]) for i in range(3)])
    mean = report.mean()
    assert abs(mean["ssim"] - np.mean([r.ssim for r in report.records])) < 1e-12
    assert abs(mean["psnr_db"] - np.mean([r.psnr_db for r in report.records])) < 1e-12
    text = format_report(report)
    lines = text.splitlines()
    assert lines[0] == "id\tssim\trmse\tpsnr_db"
    assert [l.split("\t")[0] for l in lines[1:]] == ["img0", "img1", "img2", "#mean", "#std"]
    parsed = parse_report(text)
    assert parsed["img1"] == (report.records[1].ssim, report.records[1].rmse, report.records[1].psnr_db)


def test_identical_flag_in_tsv():
    a = np.ones((1, 8, 8)) * 0.5
    text = format_report(QualityReport([score("same", a, a)]))
    assert text.splitlines()[1] == "same\t1.0\t0.0\tidentical"


def test_empty_report():
    report = QualityReport([])
    assert report.mean() is None and report.std() is None
    assert "#mean\tabsent\tabsent\tabsent" in format_report(report)


def make_manifest(tmp_path, n, seed=0):
    rng = np.random.default_rng(seed)
    entries = []
    for i in range(n):
        clean = rng.random((1, 16, 16))
        noisy = np.clip(clean + 0.05 * rng.standard_normal(clean.shape), 0, 1)
        cp, np_ = tmp_path / f"pair_{i:04d}_clean.rtf", tmp_path / f"pair_{i:04d}_noisy.rtf"
        save_rtf(cp, clean)
        save_rtf(np_, noisy)
        entries.append(ManifestEntry(i, 1e4, 90, cp, np_))
    path = tmp_path / "manifest.tsv"
    write_manifest(path, entries)
    return path


def test_evaluate_identity_equals_baseline(tmp_path):
    path = make_manifest(tmp_path, 4)
    ev = evaluate(path, lambda x: x)
    assert ev.denoised.records == ev.noisy.records
    assert [r.id for r in ev.denoised.records] == [f"pair_{i:04d}" for i in range(4)]


def test_evaluate_nine_records_in_order(tmp_path):
    path = make_manifest(tmp_path, 9)
    ev = evaluate(path, lambda x: np.clip(x * 0.9 + 0.05, 0, 1), workers=3)
    assert len(ev.denoised.records) == len(ev.noisy.records) == 9
    assert [r.id for r in ev.denoised.records] == [f"pair_{i:04d}" for i in range(9)]
    text = ev.format()
    assert text.count(":denoised") == 9 + 2 and text.count(":noisy") == 9 + 2


def test_evaluate_empty_manifest(tmp_path):
    path = tmp_path / "manifest.tsv"
    path.write_text("")
    ev = evaluate(path, lambda x: x)
    assert ev.denoised.records == [] and ev.denoised.mean() is None


def test_evaluate_records_failures(tmp_path):
    path = make_manifest(tmp_path, 3)
    (tmp_path / "pair_0001_noisy.rtf").unlink()
    ev = evaluate(path, lambda x: x)
    assert len(ev.denoised.records) == 3
    assert ev.denoised.records[1].error is not None and "FileNotFoundError" in ev.denoised.records[1].error
    assert ev.denoised.records[0].ok and ev.denoised.records[2].ok
    assert "#failed:denoised\tpair_0001" in ev.format()


def test_worker_count_env(monkeypatch):
    monkeypatch.setenv("RED_DENOISE_THREADS", "3")
    assert metrics.worker_count() == 3
    monkeypatch.delenv("RED_DENOISE_THREADS")
    assert metrics.worker_count() >= 1
