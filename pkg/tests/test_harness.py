import json
import math

import jsonschema
import numpy as np
import pytest

from mtpix2pix import data as dp
from mtpix2pix import harness as hs
from mtpix2pix import metrics as mx
from mtpix2pix.errors import ConfigError
from mtpix2pix.models import SchemeConfig, build_discriminator, build_generator, count_parameters


def test_toy_dataset_is_byte_identical(tmp_path):
    hs.make_toy_dataset(8, 64, 3, tmp_path / "a")
    hs.make_toy_dataset(8, 64, 3, tmp_path / "b")
    files = sorted(p.relative_to(tmp_path / "a") for p in (tmp_path / "a").rglob("*") if p.is_file())
    assert len(files) == 8 * 3 + 1
    for f in files:
        assert (tmp_path / "a" / f).read_bytes() == (tmp_path / "b" / f).read_bytes()


def test_toy_masks_have_all_classes(tmp_path):
    index = hs.make_toy_dataset(8, 64, 1, tmp_path)
    for s in dp.load_samples(index, size=64):
        labels = dp.label_map(s.Y1)
        assert set(np.unique(labels)) == {0, 1, 2, 3}


def test_toy_suppressed_equals_input_outside_stripes():
    for seed in range(5):
        x, labels, supp, stripes = hs.toy_arrays(64, np.random.default_rng(seed))
        assert stripes.any()
        assert np.array_equal(x[~stripes], supp[~stripes])
        assert (x[stripes] > supp[stripes]).all()
        assert not (stripes & (labels == 0)).any()


def test_toy_arguments_checked(tmp_path):
    with pytest.raises(ConfigError):
        hs.make_toy_dataset(3, 64, 0, tmp_path)
    with pytest.raises(ConfigError):
        hs.make_toy_dataset(8, 32, 0, tmp_path)


def test_run_spec_validation(tmp_path):
    with pytest.raises(ConfigError):
        hs.RunSpec([], tmp_path)
    with pytest.raises(ConfigError):
        hs.RunSpec(["nope"], tmp_path)
    with pytest.raises(ConfigError):
        hs.RunSpec(["mt"], tmp_path, k=1)
    with pytest.raises(ConfigError):
        hs.RunSpec(["mt"], tmp_path, train={"momentum": 0.9})
    with pytest.raises(ConfigError):
        hs.RunSpec.from_dict({"schemes": ["mt"], "data": str(tmp_path), "colour": 1})
    assert hs.RunSpec(["mt"], tmp_path, k=1, loso=True).loso
    with pytest.raises(ConfigError):
        hs.run_ablation(hs.RunSpec(["mt", "mt"], tmp_path))


def test_moving_average():
    assert hs.moving_average([]) == []
    v = np.arange(10, dtype=float)
    got = hs.moving_average(v, window=3)
    want = [np.mean(v[max(0, i - 2):i + 1]) for i in range(10)]
    assert np.allclose(got, want, rtol=0, atol=1e-12)


def test_leak_check():
    z = np.zeros((4, 4, 3), np.float32)
    a = dp.PairedSample("a", "S1", z, z, z)
    b = dp.PairedSample("b", "S2", z, z, z)
    aug = dp.PairedSample("b__rot+10", "S2", z, z, z, origin="augmented")
    hs._check_no_leak([a], [b])
    with pytest.raises(hs.LeakageError):
        hs._check_no_leak([a, aug], [b])
    with pytest.raises(hs.LeakageError):
        hs._check_no_leak([a], [aug])


@pytest.fixture(scope="module")
def ablation(tmp_path_factory):
    root = tmp_path_factory.mktemp("abl")
    hs.make_toy_dataset(8, 64, 1, root / "data")
    spec = hs.RunSpec(list(hs.ALL_SCHEMES), root / "data", root / "out", k=4, image_size=64,
                      base_width=2, seed=1, train={"max_epochs": 1})
    report = hs.run_ablation(spec)
    hs.write_report(report, spec.out)
    return spec, report


def test_each_subject_tested_once_per_scheme(ablation):
    spec, report = ablation
    for s in spec.schemes:
        folds = [f for f in report.folds if f.scheme == s]
        assert sorted(f.fold for f in folds) == [0, 1, 2, 3]
        tested = [subj for f in folds for subj in f.test_subjects]
        assert sorted(tested) == sorted(report.split.assignments)
        recs = report.records_for(s)
        assert len(recs) == 8 and len({r.id for r in recs}) == 8
        for f in folds:
            assert not set(f.test_subjects) & set(f.train_subjects)
        assert all(r.id.startswith("toy") and "__" not in r.id for r in recs)


def test_task_fields_per_scheme(ablation):
    _, report = ablation
    for r in report.records_for("mt"):
        assert r.seg is not None and r.rmse is not None and r.mssim is not None
        assert r.baseline_rmse is not None
    for r in report.records_for("st-seg"):
        assert r.seg is not None and r.rmse is None and r.mssim is None
    for r in report.records_for("st-bone-d"):
        assert r.seg is None and r.rmse is not None


def test_fold_split_shared_across_schemes(ablation):
    spec, report = ablation
    split = dp.subject_kfold(dp.load_manifest(spec.data), 4, 1)
    assert report.split == split
    for f in report.folds:
        assert f.test_subjects == split.test_subjects(f.fold)
    for s in spec.schemes:
        for fold in range(4):
            ck = spec.out / s / f"fold{fold}" / "final.ckpt"
            from mtpix2pix.trainer import load_checkpoint
            assert load_checkpoint(ck).split_fingerprint == split.fingerprint()


def test_parameter_count_equalities(ablation):
    _, report = ablation
    p = report.parameters
    assert len(p) == 6
    assert p["mt"] == p["mtdg"]
    assert p["st-seg"] == p["st-bone"] == p["st-seg-d"] == p["st-bone-d"]
    assert p["st-seg"] < p["mt"] < 2 * p["st-seg"]
    cfg = SchemeConfig("mt", 64, 2)
    assert p["mt"] == count_parameters(build_generator(cfg), build_discriminator(cfg))


def test_table_layout(ablation):
    _, report = ablation
    rows = report.table()
    labels = [r["metric"] for r in rows]
    assert labels == ["Average Dice", "Average FNR", "Average MSSIM", "Average RMSE",
                      "No. Parameters", "Epochs"]
    assert set(rows[0]["values"]) == {"mt", "mtdg", "st-seg", "st-seg-d"}
    assert set(rows[2]["values"]) == {"mt", "mtdg", "st-bone", "st-bone-d"}
    assert rows[-1]["values"] == {s: 1 for s in hs.ALL_SCHEMES}


def test_report_files_and_schemas(ablation):
    spec, report = ablation
    out = spec.out
    summary = json.loads((out / "summary.json").read_text())
    jsonschema.validate(summary, hs.SUMMARY_SCHEMA)
    boxes = sorted((out / "boxplots").glob("*.json"))
    assert boxes
    for p in boxes:
        jsonschema.validate(json.loads(p.read_text()), hs.BOXPLOT_SCHEMA)
    for s in spec.schemes:
        for fold in range(4):
            d = out / s / f"fold{fold}"
            assert (d / "final.ckpt").exists() and (d / "loss_log.csv").exists()
            assert (d / "preds").is_dir() and any((d / "preds").glob("*.png"))
            curve = json.loads((out / "loss_curves" / f"{s}_fold{fold}.json").read_text())
            assert len(curve["loss_l1"]) == len(curve["step"]) > 0
    assert (out / "mt" / "fold0" / "metrics.csv").exists()
    assert (out / "mt" / "fold0" / "metrics_bone.csv").exists()
    assert not (out / "st-seg" / "fold0" / "metrics_bone.csv").exists()


def test_boxplot_matches_summary_stats(ablation):
    spec, report = ablation
    doc = json.loads((spec.out / "boxplots" / "dice_average.json").read_text())
    for s, stats in doc["groups"].items():
        want = mx.summary_stats(list(report.values(s, "dice/average").values()))
        assert stats == want.to_dict()


def test_summary_recomputes_from_raw_records(ablation):
    spec, report = ablation
    summary = json.loads((spec.out / "summary.json").read_text())
    reloaded = hs.load_report(spec.out)
    again = reloaded.summaries()
    for s, info in summary["schemes"].items():
        assert set(info["metrics"]) == set(again[s])
        for m, stored in info["metrics"].items():
            fresh = again[s][m].to_dict()
            for key in ("mean", "std", "median", "q25", "q75", "whisker_low", "whisker_high"):
                assert math.isclose(stored[key], fresh[key], rel_tol=1e-12, abs_tol=1e-12)
            assert stored["n"] == fresh["n"]
    assert hs.strip_wall_clock(hs.summary_dict(reloaded)) == hs.strip_wall_clock(summary)


def test_pvalues_pair_by_sample(ablation):
    _, report = ablation
    pv = report.pvalues()
    entry = pv["dice/average"]["st-seg|mt"]
    va, vb = report.values("mt", "dice/average"), report.values("st-seg", "dice/average")
    t, p = mx.paired_ttest([vb[i] for i in sorted(vb)], [va[i] for i in sorted(va)])
    assert entry["n"] == 8
    assert entry["p"] == (None if math.isnan(p) else p)
    assert "st-bone|mt" in pv["rmse"] and "st-bone|mt" not in pv["dice/average"]


def test_evaluate_sample_on_perfect_output():
    rng = np.random.default_rng(0)
    x, labels, supp, _ = hs.toy_arrays(64, rng)
    s = dp.PairedSample("a", "S", dp.normalize(np.repeat(x[..., None], 3, -1)),
                        dp.normalize(dp.encode_labels(labels)),
                        dp.normalize(np.repeat(supp[..., None], 3, -1)))
    res = hs.evaluate_sample(np.concatenate([s.Y1, s.Y2], axis=-1), s, ("seg", "bone"))
    assert all(res["seg"][c]["dice"] == 1.0 for c in (1, 2, 3))
    assert res["rmse"] == 0.0 and res["mssim"] == pytest.approx(1.0, abs=1e-12)
