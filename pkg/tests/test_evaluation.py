import numpy as np
import oracles
import pytest
import torch

from smml import srn
from smml.backbone import ArchConfig, build_branch
from smml.errors import ConfigurationError, ValidationError
from smml.evaluation import (
    ABLATION_VARIANTS,
    REGIONS,
    EvalReport,
    emit_report,
    evaluate_all_subsets,
    parse_report_csv,
    predict,
    region_dsc,
)
from smml.masking import ModalityMask, enumerate_subsets
from smml.phantom import PhantomConfig, generate_phantom

ARCH = ArchConfig()


@pytest.fixture(scope="module")
def samples():
    return generate_phantom(PhantomConfig(num_subjects=3, seed=21))


@pytest.fixture(scope="module")
def branches():
    return {"branch1": build_branch(ARCH, 31, torch.float64),
            "branch2": build_branch(ARCH, 32, torch.float64)}


def test_predict_contract(samples, branches):
    probs, labels = predict(samples[0], ModalityMask((1, 1, 1, 1)), branches)
    assert probs.shape == (4, 16, 16, 16)
    assert labels.shape == (16, 16, 16)
    np.testing.assert_allclose(probs.sum(axis=0), 1.0, rtol=1e-12)
    with pytest.raises(ValidationError):
        predict(samples[0], ModalityMask((0, 0, 0, 0)), branches)


def test_predict_identical_branches_equals_single(samples):
    b = build_branch(ARCH, 33, torch.float64)
    b2 = build_branch(ARCH, 33, torch.float64)
    both, _ = predict(samples[0], ModalityMask((1, 0, 1, 1)), {"branch1": b, "branch2": b2})
    single, _ = predict(samples[0], ModalityMask((1, 0, 1, 1)), {"branch1": b})
    np.testing.assert_array_equal(both, single)


def test_predict_mean_arithmetic():
    # mean of branch softmaxes, argmax ties to lowest class
    p1 = np.array([0.8, 0.2])
    p2 = np.array([0.6, 0.4])
    mean = (p1 + p2) / 2
    np.testing.assert_allclose(mean, [0.7, 0.3])
    assert np.argmax(mean) == 0
    tie = np.array([0.5, 0.5])
    assert np.argmax(tie) == 0  # lowest index on ties


def test_predict_missing_modality_invariance(samples, branches):
    s = samples[0]
    for mask in enumerate_subsets(4):
        _, base = predict(s, mask, branches)
        perturbed = s
        changed = s.volumes.copy()
        for k, bit in enumerate(mask.bits):
            if not bit:
                changed[k] += np.random.default_rng(k).normal(0, 5, size=changed[k].shape).astype(np.float32)
        perturbed = type(s)(s.subject_id, changed, s.labels)
        probs_a, pred_a = predict(perturbed, mask, branches)
        probs_b, pred_b = predict(s, mask, branches)
        np.testing.assert_array_equal(probs_a, probs_b)
        np.testing.assert_array_equal(pred_a, pred_b)
        np.testing.assert_array_equal(pred_b, base)


def test_region_dsc_values():
    gt = np.zeros((4, 4, 4), dtype=np.int64)
    assert region_dsc(gt, gt, REGIONS["WT"]) == 1.0  # both empty
    gt[0, 0, 0] = 3
    gt[0, 0, 1] = 3
    pred = np.zeros_like(gt)
    pred[0, 0, 0] = 3
    assert abs(region_dsc(pred, gt, REGIONS["ET"]) - 2 / 3) < 1e-12
    pred2 = np.zeros_like(gt)
    pred2[1, 1, 1] = 3
    assert region_dsc(pred2, gt, REGIONS["ET"]) == 0.0
    assert region_dsc(gt, gt, REGIONS["ET"]) == 1.0


def test_region_dsc_matches_oracle():
    rng = np.random.default_rng(1)
    for _ in range(20):
        pred = rng.integers(0, 4, size=(4, 4, 4))
        gt = rng.integers(0, 4, size=(4, 4, 4))
        for region in REGIONS.values():
            assert abs(region_dsc(pred, gt, region)
                       - oracles.region_dsc(pred, gt, region)) < 1e-12


def test_region_nesting_of_class_sets():
    assert REGIONS["ET"] <= REGIONS["TC"] <= REGIONS["WT"]


def test_evaluate_all_subsets_shape_and_averages(samples, branches):
    report = evaluate_all_subsets(samples, branches)
    assert report.table.shape == (15, 3)
    assert report.regions == ("WT", "TC", "ET")
    assert (report.table >= 0).all() and (report.table <= 100).all()
    np.testing.assert_allclose(report.region_averages, report.table.mean(axis=0),
                               atol=1e-9)
    assert [m.bits for m in report.masks] == [m.bits for m in enumerate_subsets(4)]

    again = evaluate_all_subsets(samples, branches)
    np.testing.assert_array_equal(report.table, again.table)


def test_evaluate_empty_split_errors(branches):
    with pytest.raises(ConfigurationError):
        evaluate_all_subsets([], branches)


def test_report_csv_roundtrip(samples, branches, tmp_path):
    report = evaluate_all_subsets(samples, branches)
    path = emit_report(report, tmp_path / "report.csv", "csv")
    parsed = parse_report_csv(path)
    np.testing.assert_array_equal(parsed.table, report.table)
    assert [m.bits for m in parsed.masks] == [m.bits for m in report.masks]


def test_report_markdown_layout(samples, branches, tmp_path):
    report = evaluate_all_subsets(samples, branches)
    path = emit_report(report, tmp_path / "report.md", "markdown")
    lines = path.read_text().splitlines()
    data = [ln for ln in lines if ln.startswith("| ●") or ln.startswith("| ○")]
    assert len(data) == 15
    assert lines[-1].startswith("| Avg |")
    assert "●●●●" in lines[-2]  # full-modality row is last data row


def test_ablation_variant_lattice():
    assert len(ABLATION_VARIANTS) >= 6
    assert ABLATION_VARIANTS["full"] == {}
    base = ABLATION_VARIANTS["baseline_single"]
    assert base["dual_branch"] is False
    assert base["lambda_pc"] == 0.0 and base["lambda_fc"] == 0.0
    assert base["lambda_refine"] == 0.0 and base["lambda_task_refine"] == 0.0
