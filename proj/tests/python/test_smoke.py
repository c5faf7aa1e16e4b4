import math

import numpy as np
import pytest

import fodshift


def test_constants():
    assert fodshift.sh_n_coeffs(8) == 45
    assert fodshift.fa_of_tensor(1.7e-3, 0.2e-3) == pytest.approx(0.8704, abs=1e-4)
    assert [fodshift.tessellation(k).shape[0] for k in (0, 1, 4)] == [12, 42, 2562]
    pts = fodshift.tessellation(2)
    assert np.allclose(np.linalg.norm(pts, axis=1), 1.0)


def test_mom_worked_example():
    alpha, beta = fodshift.mom_alpha_beta(100.0, 25.0, 120.0, 100.0)
    assert alpha == 2.0
    assert beta == -80.0


def test_cohort_arrays_and_self_evaluation(tmp_path):
    subs = fodshift.build_cohort("bcp", n_subjects=2, grid=6, seed=3)
    assert [s.id for s in subs] == ["bcp-000", "bcp-001"]
    s = subs[0]
    assert s.dims == (6, 6, 6)
    assert s.dwi.shape == (6, 6, 6, len(s.b_values))
    assert s.gt_fod.shape == (6, 6, 6, 45)
    assert s.directions.shape == (len(s.b_values), 3)
    assert s.wm_mask.dtype == np.uint8
    assert 0 < s.wm_mask.sum() < 216

    # the b0 rows equal s0 scaled signal with noise: positive everywhere
    b0 = np.asarray(s.b_values) == 0
    assert (s.dwi[..., b0] > 0).all()

    rep = fodshift.evaluate_fods(s.gt_fod, s.gt_fod, s.wm_mask)
    assert rep["delta_afd"] == 0.0
    for c in rep["classes"]:
        if c["n_voxels"]:
            assert c["ar"] == 100.0
            assert c["ae"] == pytest.approx(0.0, abs=1e-9)

    fodshift.write_cohort(str(tmp_path), subs)
    back = fodshift.read_subject(str(tmp_path / "bcp-000"))
    assert np.array_equal(back.dwi, s.dwi)
    assert np.array_equal(back.gt_fod, s.gt_fod)
    assert 0.0 < fodshift.mean_wm_fa(s) < 1.0


def test_experiment_record_and_csv():
    spec = {
        "kind": "intra_baseline",
        "n_subjects": 7,
        "grid": [6, 6, 6],
        "hidden": [8],
        "train": {"epochs": 2},
        "gold_standard": False,
    }
    a = fodshift.run_experiment(spec)
    b = fodshift.run_experiment(spec)
    assert a == b
    assert [r["method"] for r in a["results"]] == ["dl"]
    assert fodshift.leakage_audit(a) == []
    csv = fodshift.render_csv([a]).splitlines()
    assert csv[0] == "site,experiment,method,n_target_subjects,class,AR,AE,dAFD,n_voxels"
    assert len(csv) == 1 + 3


def test_errors_are_python_exceptions():
    with pytest.raises(ValueError):
        fodshift.build_cohort("mars")
    with pytest.raises(ValueError):
        fodshift.run_experiment({"kind": "nope"})
    assert math.isfinite(fodshift.fa_of_tensor(1e-3, 1e-3))
