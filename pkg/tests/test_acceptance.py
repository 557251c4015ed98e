"""Acceptance suite: every criterion prints one PASS line when green.

The heavy end-to-end criteria (desk-scale training and the front-end
trend) run on the canonical synthetic benchmarks and take the bulk of
the suite's wall time; they are ordered last.
"""

import math
import os
import time

import numpy as np
import pytest
import torch

from arrayloc import beamform, features, metrics, model, pipeline
from arrayloc.benchmarks import desk_benchmark_config, trend_benchmark_config
from arrayloc.cli import main as cli_main
from arrayloc.geometry import (CameraModel, azimuth_to_pixel,
                               default_ava_array, default_look_directions)
from arrayloc.metrics import Detection, sigmoid_thresholds
from arrayloc.model import (NetworkConfig, Prediction, SpeakerLocNet,
                            gradient_check, loss_terms, target_confidence)
from arrayloc.scenes import LabelRecord, SceneSpec, render_scene, SAMPLE_RATE


def _ok(criterion, detail=""):
    print(f"\nACCEPTANCE PASS [{criterion}] {detail}")


# -------------------------------------------------------------------
# Criterion 1: beamformer correctness (distortionless + WNG + runtime)
# -------------------------------------------------------------------

def test_c1_beamformer_correctness(geom):
    t0 = time.time()
    design = beamform.design_sdb(geom, default_look_directions(15),
                                 fft_size=512, sample_rate=48000,
                                 wng_min_db=-10.0)
    elapsed = time.time() - t0
    d = beamform.steering_vectors(geom, design.bin_freqs_hz,
                                  design.look_dirs.azimuths_deg)
    distortion = np.abs(np.einsum("fdm,fdm->fd", design.weights.conj(), d) - 1.0)
    wng_db = 10 * np.log10(beamform.white_noise_gain(design.weights, d))
    unflagged = ~design.flagged
    assert distortion.max() < 1e-6
    assert wng_db[unflagged].min() >= -10.1
    assert elapsed < 60.0
    _ok("C1 beamformer", f"max distortion {distortion.max():.2e}, "
        f"min WNG {wng_db[unflagged].min():.2f} dB, design {elapsed:.1f}s")


# -------------------------------------------------------------------
# Criterion 2: spatial selectivity on simulated 2 kHz plane waves
# -------------------------------------------------------------------

def test_c2_spatial_selectivity(geom, sdb_design):
    i0 = sdb_design.look_dirs.azimuths_deg.index(0.0)
    mid = slice(int(0.3 * SAMPLE_RATE), int(0.7 * SAMPLE_RATE))
    level = {}
    for az in (0.0, 45.0):
        n = SAMPLE_RATE
        tone = np.cos(2 * np.pi * 2000.0 * np.arange(n) / SAMPLE_RATE)
        spec = SceneSpec(duration_s=1.0, trajectory_knots=((0.0, az),),
                         activity_segments=((0.0, 1.0),), noise_floor_db=-300.0,
                         rng_seed=0, source_signal=tone)
        audio, _ = render_scene(spec, geom)
        out = beamform.apply_beamformer(sdb_design, audio)
        level[az] = out[i0, mid].std()
    atten_db = 20 * math.log10(level[45.0] / level[0.0])
    assert atten_db <= -6.0
    _ok("C2 selectivity", f"45 deg arrival at {atten_db:.1f} dB on the 0 deg beam")


# -------------------------------------------------------------------
# Criterion 3: loss unit examples exact + gradient check at float64
# -------------------------------------------------------------------

def test_c3_loss_and_gradients(rng):
    assert target_confidence(True, 0.5, 0.5) == 1.0
    assert target_confidence(False, None, 0.9) == 0.0
    assert target_confidence(True, 0.3, 0.5) == pytest.approx(0.8)
    assert loss_terms(Prediction(0.5, 1.0), True, 0.5)[0] == 0.0
    assert loss_terms(Prediction(0.7, 0.0), False)[0] == 0.0
    assert loss_terms(Prediction(0.5, 0.9), True, 0.3)[0] == pytest.approx(0.05)

    torch.manual_seed(123)
    net = SpeakerLocNet(NetworkConfig(in_channels=15))
    feats = rng.normal(size=(15, 64, 64))
    err_active = gradient_check(net, feats, np.eye(11)[0], active=True, x=0.3,
                                n_params=200, step=1e-4, rng_seed=9)
    err_silent = gradient_check(net, feats, np.eye(11)[4], active=False, x=None,
                                n_params=100, step=1e-4, rng_seed=10)
    assert err_active < 1e-4
    assert err_silent < 1e-4
    _ok("C3 loss/gradients", f"max rel err {max(err_active, err_silent):.2e}")


# -------------------------------------------------------------------
# Criterion 4: metric implementations match brute-force enumeration
# -------------------------------------------------------------------

def _enumerate_pr(dets, gt, tol, threshold):
    gt_map = {(g.frame_index, g.view_id): g for g in gt}
    tp = fp = 0
    for d in dets:
        g = gt_map[(d.frame_index, d.view_id)]
        if d.c_hat >= threshold:
            if g.active and abs(d.x_hat_px - g.x_px) <= tol:
                tp += 1
            else:
                fp += 1
    n_active = sum(g.active for g in gt)
    precision = tp / (tp + fp) if tp + fp else 1.0
    recall = tp / n_active if n_active else 1.0
    return precision, recall


def test_c4_metric_oracle_equivalence():
    rng = np.random.Generator(np.random.PCG64(2024))
    cam = CameraModel()
    thresholds = sigmoid_thresholds(41)
    worst_ap_gap = 0.0
    for _ in range(100):
        n = int(rng.integers(3, 51))
        gt, dets = [], []
        for i in range(n):
            active = rng.random() < 0.6
            x_gt = float(rng.uniform(0, 2448)) if active else None
            gt.append(LabelRecord(i, 0, active, x_gt))
            x_hat = (x_gt + rng.normal(0, 150)) if active and rng.random() < 0.7 \
                else rng.uniform(0, 2448)
            dets.append(Detection(i, 0, float(np.clip(x_hat, 0, 2447.9)),
                                  float(rng.uniform(0, 1))))
        curve = metrics.pr_curve(dets, gt, 89.0, thresholds)
        for k, t in enumerate(thresholds):
            p, r = _enumerate_pr(dets, gt, 89.0, t)
            assert curve.precision[k] == pytest.approx(p, abs=1e-12)
            assert curve.recall[k] == pytest.approx(r, abs=1e-12)
        # AP against dense-grid envelope integration
        ap = metrics.voc_ap(curve)
        r_grid = np.linspace(0.0, 1.0, 100_001)
        p_env = np.zeros_like(r_grid)
        for rr, pp in zip(curve.recall, curve.precision):
            p_env[r_grid <= rr] = np.maximum(p_env[r_grid <= rr], pp)
        ap_dense = float(np.trapezoid(p_env, r_grid))
        worst_ap_gap = max(worst_ap_gap, abs(ap - ap_dense))
        # aD and classification against direct enumeration
        ad_px, _ = metrics.average_distance(dets, gt, cam)
        gt_map = {(g.frame_index, g.view_id): g for g in gt}
        errs = [abs(d.x_hat_px - gt_map[(d.frame_index, d.view_id)].x_px)
                for d in dets if d.c_hat >= 0.5
                and gt_map[(d.frame_index, d.view_id)].active]
        if errs:
            assert ad_px == pytest.approx(float(np.mean(errs)), rel=1e-12)
        acc = metrics.classification_accuracy(dets, gt)
        expected = float(np.mean([(d.c_hat >= 0.5) ==
                                  gt_map[(d.frame_index, d.view_id)].active
                                  for d in dets]))
        assert acc == pytest.approx(expected, abs=1e-12)
    # dense-grid integration itself carries O(1/n_grid) error
    assert worst_ap_gap < 2e-5
    _ok("C4 metric oracles", f"100 instances, max AP gap {worst_ap_gap:.2e}")


# -------------------------------------------------------------------
# Criterion 6: calibration anchors
# -------------------------------------------------------------------

def test_c6_calibration_anchors():
    cam = CameraModel()
    off2 = azimuth_to_pixel(cam, 2.0) - cam.principal_x_px
    off5 = azimuth_to_pixel(cam, 5.0) - cam.principal_x_px
    assert abs(off2 - 89.0) < 1e-9
    assert abs(off5 - 222.0) <= 1.0
    _ok("C6 anchors", f"2 deg -> {off2:.6f} px, 5 deg -> {off5:.2f} px")


# -------------------------------------------------------------------
# Criterion 9: subcommand determinism (byte-identical artifacts)
# -------------------------------------------------------------------

def test_c9_subcommand_determinism(tmp_path):
    import yaml
    cfg_doc = {
        "seed": 31, "front_end": "beamformed", "look_dirs": 3,
        "max_train_frames": 32,
        "trainer": {"epochs": 1, "batch_size": 16, "learning_rate": 1e-3},
        "model": {"conv_channels": [4, 4, 4, 8, 8, 8, 512],
                  "fc_dims": [16, 8, 8, 8], "head_hidden": 8},
        "simulate": {"train_speech_scenes": 1, "train_speech_duration_s": 10.0,
                     "train_silent_scenes": 1, "train_silent_duration_s": 6.0,
                     "test_scenes": 1, "test_duration_s": 6.0,
                     "azimuth_limit_deg": 20.0},
        "eval": {"n_thresholds": 21},
    }
    cfg_path = tmp_path / "cfg.yaml"
    with open(cfg_path, "w") as f:
        yaml.safe_dump(cfg_doc, f)

    def run(root):
        base = ["--config", str(cfg_path)]
        scenes = os.path.join(root, "scenes")
        feats = os.path.join(root, "features")
        run_dir = os.path.join(root, "run")
        os.makedirs(run_dir, exist_ok=True)
        assert cli_main(base + ["design-bf", "--out", os.path.join(run_dir, "w.bin")]) == 0
        assert cli_main(base + ["simulate", "--out-dir", scenes]) == 0
        assert cli_main(base + ["featurize", "--manifest",
                                os.path.join(scenes, "manifest.json"),
                                "--out-dir", feats]) == 0
        assert cli_main(base + ["train", "--features", feats, "--out-dir", run_dir]) == 0
        assert cli_main(base + ["infer", "--model",
                                os.path.join(run_dir, "model_beamformed.ckpt"),
                                "--features", feats,
                                "--out", os.path.join(run_dir, "det.csv")]) == 0
        assert cli_main(base + ["eval", "--detections", os.path.join(run_dir, "det.csv"),
                                "--manifest", os.path.join(scenes, "manifest.json"),
                                "--out", os.path.join(run_dir, "report.txt")]) == 0
        return root

    a = run(str(tmp_path / "a"))
    b = run(str(tmp_path / "b"))
    n = 0
    for dirpath, _, names in os.walk(a):
        for name in names:
            pa = os.path.join(dirpath, name)
            pb = pa.replace(a, b, 1)
            assert open(pa, "rb").read() == open(pb, "rb").read(), f"{name} differs"
            n += 1
    assert n >= 15
    _ok("C9 determinism", f"{n} artifacts byte-identical across reruns")


# -------------------------------------------------------------------
# Criteria 5, 7, 8: desk-scale end-to-end on the synthetic benchmarks
# -------------------------------------------------------------------

@pytest.fixture(scope="module")
def desk_run(tmp_path_factory):
    root = str(tmp_path_factory.mktemp("desk"))
    cfg = desk_benchmark_config(seed=0)
    manifest = pipeline.simulate_cmd(cfg, os.path.join(root, "scenes"))
    feats_dir = os.path.join(root, "features")
    pipeline.featurize_cmd(cfg, manifest, feats_dir)
    t0 = time.time()
    run_dir = os.path.join(root, "run")
    pipeline.train_cmd(cfg, feats_dir, run_dir)
    train_seconds = time.time() - t0
    det = os.path.join(run_dir, "detections.csv")
    pipeline.infer_cmd(cfg, os.path.join(run_dir, "model_beamformed.ckpt"),
                       feats_dir, det)
    report = pipeline.eval_cmd(cfg, det, manifest, os.path.join(run_dir, "report.txt"))
    return {"cfg": cfg, "root": root, "features": feats_dir,
            "train_seconds": train_seconds, "report": report}


def test_c5_feature_contract(desk_run):
    feats, _ = features.load_feature_cache(
        os.path.join(desk_run["features"], "train.bin"))
    n, c, n_mel, n_t = feats.shape
    assert (n_mel, n_t) == (64, 64)
    assert c == 15
    assert n >= 19000
    stats = features.load_norm_stats(os.path.join(desk_run["features"], "stats.txt"))
    acc = np.zeros(64)
    count = 0
    for start in range(0, n, 512):
        block = np.asarray(feats[start:start + 512], dtype=np.float64)
        normed = features.normalize(block, stats)
        acc += normed.sum(axis=(0, 1, 3))
        count += block.shape[0] * block.shape[1] * block.shape[3]
    per_bin_mean = acc / count
    assert np.abs(per_bin_mean).max() < 1e-6
    _ok("C5 features", f"{n} chunks of 15x64x64, max |post-norm bin mean| "
        f"{np.abs(per_bin_mean).max():.2e}")


def test_c7_desk_scale_end_to_end(desk_run):
    report = desk_run["report"]
    assert desk_run["train_seconds"] < 3600.0
    assert report.ad_deg <= 5.0
    assert report.cls_accuracy >= 0.90
    _ok("C7 desk scale", f"train {desk_run['train_seconds'] / 60:.1f} min, "
        f"aD {report.ad_deg:.2f} deg ({report.ad_px:.0f} px), "
        f"cls {report.cls_accuracy:.3f}")


def test_c8_front_end_trend(tmp_path_factory):
    root = str(tmp_path_factory.mktemp("trend"))
    cfg = trend_benchmark_config(seed=0)
    reports = pipeline.trend_cmd(cfg, root)
    ap = {fe: reports[fe].ap_at_2deg for fe in
          ("mono", "stereo", "raw16", "beamformed")}
    assert ap["mono"] < ap["stereo"] < ap["raw16"] < ap["beamformed"], ap
    assert reports["beamformed+tc"].ad_px <= reports["beamformed"].ad_px + 1e-9
    _ok("C8 trend", " < ".join(f"{fe}:{ap[fe]:.3f}" for fe in
                               ("mono", "stereo", "raw16", "beamformed"))
        + f"; +tc aD {reports['beamformed+tc'].ad_px:.0f}px "
          f"<= {reports['beamformed'].ad_px:.0f}px")
