"""End-to-end pipeline stages behind the CLI subcommands: benchmark scene
generation, feature extraction per front end, training, inference,
evaluation and the front-end comparison sweep.

Every stage is deterministic for a fixed config and seed, and every
artifact embeds the config hash so mismatched combinations are refused.
"""

from __future__ import annotations

import json
import math
import os
from dataclasses import dataclass

import numpy as np
import torch

from . import beamform, features, metrics, model, scenes
from .config import (PipelineConfig, config_hash, config_to_dict,
                     file_sha256, FRONT_ENDS)
from .geometry import (ArrayGeometry, CameraModel, center_mic_index,
                       default_ava_array, load_camera, load_geometry,
                       save_camera, save_geometry, stereo_pair_indices)


class PipelineError(RuntimeError):
    """Raised when a stage cannot run or inputs do not match."""


def _write_run_manifest(out_dir: str, command: str, cfg: PipelineConfig,
                        artifacts: dict) -> None:
    doc = {
        "command": command,
        "config_hash": config_hash(cfg),
        "seed": cfg.seed,
        "config": config_to_dict(cfg),
        "artifacts": {k: file_sha256(v) for k, v in sorted(artifacts.items())},
    }
    with open(os.path.join(out_dir, f"run_{command}.json"), "w") as f:
        json.dump(doc, f, indent=2, sort_keys=True)
        f.write("\n")


def resolve_geometry(cfg: PipelineConfig) -> ArrayGeometry:
    if cfg.geometry_file:
        return load_geometry(cfg.geometry_file)
    return default_ava_array()


def resolve_cameras(cfg: PipelineConfig) -> dict[int, CameraModel]:
    if cfg.camera_files:
        cams = [load_camera(p) for p in cfg.camera_files]
        return {c.view_id: c for c in cams}
    return {v: _benchmark_camera(v, cfg.simulate.n_views)
            for v in range(cfg.simulate.n_views)}


def _benchmark_camera(view_id: int, n_views: int) -> CameraModel:
    # Views differ by a principal-point shift, emulating offset cameras
    # on the rig sharing one boresight.
    shift = (view_id - (n_views - 1) / 2.0) * 240.0
    base = CameraModel()
    return CameraModel(principal_x_px=base.image_width_px / 2.0 + shift, view_id=view_id)


# ---------------------------------------------------------------------------
# simulate
# ---------------------------------------------------------------------------

def _random_trajectory(rng, duration_s: float, az_limit: float) -> tuple:
    knots = [(0.0, rng.uniform(-az_limit, az_limit))]
    t = 0.0
    while t < duration_s:
        t += rng.uniform(4.0, 8.0)
        knots.append((min(t, duration_s), rng.uniform(-az_limit, az_limit)))
    return tuple(knots)


def _random_activity(rng, duration_s: float) -> tuple:
    segments = []
    t = rng.uniform(0.0, 1.0)
    while t < duration_s - 0.5:
        end = min(t + rng.uniform(1.5, 5.0), duration_s)
        segments.append((t, end))
        t = end + rng.uniform(0.4, 2.5)
    return tuple(segments)


def benchmark_scene_specs(cfg: PipelineConfig) -> list:
    """(name, split, role, SceneSpec) for the synthetic benchmark."""
    sim = cfg.simulate
    views = tuple(_benchmark_camera(v, sim.n_views) for v in range(sim.n_views))
    specs = []
    root = np.random.SeedSequence([cfg.seed, 0xA5CE])
    seeds = iter(root.spawn(sim.train_speech_scenes + sim.train_silent_scenes
                            + sim.test_scenes))

    def scene_seed(seq):
        return int(seq.generate_state(1)[0])

    for i in range(sim.train_speech_scenes):
        seq = next(seeds)
        rng = np.random.Generator(np.random.PCG64(seq))
        spec = scenes.SceneSpec(
            duration_s=sim.train_speech_duration_s,
            trajectory_knots=_random_trajectory(rng, sim.train_speech_duration_s,
                                                sim.azimuth_limit_deg),
            activity_segments=_random_activity(rng, sim.train_speech_duration_s),
            noise_floor_db=sim.noise_floor_db, views=views,
            rng_seed=scene_seed(seq), source_distance_m=sim.source_distance_m)
        specs.append((f"train_speech_{i}", "train", "speech", spec))
    for i in range(sim.train_silent_scenes):
        seq = next(seeds)
        spec = scenes.SceneSpec(
            duration_s=sim.train_silent_duration_s,
            trajectory_knots=((0.0, 0.0),), activity_segments=(),
            noise_floor_db=sim.noise_floor_db, views=views,
            rng_seed=scene_seed(seq), source_distance_m=sim.source_distance_m)
        specs.append((f"train_silent_{i}", "train", "silent", spec))
    for i in range(sim.test_scenes):
        seq = next(seeds)
        rng = np.random.Generator(np.random.PCG64(seq))
        spec = scenes.SceneSpec(
            duration_s=sim.test_duration_s,
            trajectory_knots=_random_trajectory(rng, sim.test_duration_s,
                                                sim.azimuth_limit_deg),
            activity_segments=_random_activity(rng, sim.test_duration_s),
            noise_floor_db=sim.noise_floor_db, views=views,
            rng_seed=scene_seed(seq), source_distance_m=sim.source_distance_m)
        specs.append((f"test_speech_{i}", "test", "speech", spec))
    return specs


def simulate_cmd(cfg: PipelineConfig, out_dir: str) -> str:
    """Render the benchmark scenes; returns the manifest path."""
    os.makedirs(out_dir, exist_ok=True)
    geom = resolve_geometry(cfg)
    artifacts = {}
    geo_path = os.path.join(out_dir, "geometry.txt")
    save_geometry(geo_path, geom)
    artifacts["geometry"] = geo_path
    cam_names = []
    for v, cam in sorted(resolve_cameras(cfg).items()):
        cam_path = os.path.join(out_dir, f"camera_{v}.txt")
        save_camera(cam_path, cam)
        cam_names.append(f"camera_{v}.txt")
        artifacts[f"camera_{v}"] = cam_path
    entries = []
    for name, split, role, spec in benchmark_scene_specs(cfg):
        audio, labels = scenes.render_scene(spec, geom)
        wav = os.path.join(out_dir, f"{name}.wav")
        lab = os.path.join(out_dir, f"{name}_labels.csv")
        scenes.save_audio(wav, audio)
        scenes.write_labels(lab, labels)
        artifacts[f"{name}.wav"] = wav
        artifacts[f"{name}_labels"] = lab
        entries.append(scenes.ManifestEntry(split=split, role=role,
                                            audio=f"{name}.wav",
                                            labels=f"{name}_labels.csv",
                                            geometry="geometry.txt",
                                            cameras=tuple(cam_names)))
    manifest_path = os.path.join(out_dir, "manifest.json")
    scenes.save_manifest(manifest_path, scenes.DatasetManifest(entries=tuple(entries)))
    artifacts["manifest"] = manifest_path
    _write_run_manifest(out_dir, "simulate", cfg, artifacts)
    return manifest_path


# ---------------------------------------------------------------------------
# design-bf
# ---------------------------------------------------------------------------

def design_cmd(cfg: PipelineConfig, out_path: str) -> beamform.BeamformerDesign:
    geom = resolve_geometry(cfg)
    design = beamform.design_sdb(geom, cfg.look_dir_set,
                                 fft_size=cfg.beamformer.fft_size,
                                 sample_rate=cfg.beamformer.sample_rate,
                                 wng_min_db=cfg.beamformer.wng_min_db)
    beamform.save_weights(out_path, design)
    out_dir = os.path.dirname(os.path.abspath(out_path))
    _write_run_manifest(out_dir, "design-bf", cfg, {"weights": out_path})
    return design


# ---------------------------------------------------------------------------
# featurize
# ---------------------------------------------------------------------------

def compute_dataset_gains(manifest: scenes.DatasetManifest, target_rms: float,
                          split: str = "train") -> np.ndarray:
    """Per-channel gains from the whole split's audio (streamed RMS)."""
    sq_sum, count = None, 0
    for entry in manifest.entries:
        if entry.split != split:
            continue
        audio = scenes.load_audio(manifest.resolve(entry.audio))
        s = (audio ** 2).sum(axis=1)
        sq_sum = s if sq_sum is None else sq_sum + s
        count += audio.shape[1]
    if sq_sum is None or count == 0:
        raise PipelineError(f"no {split} audio in manifest")
    rms = np.sqrt(sq_sum / count)
    if np.any(rms == 0.0):
        raise features.CalibrationError("zero-RMS channel in calibration material")
    return target_rms / rms


def _entry_frame_offsets(manifest: scenes.DatasetManifest, split: str) -> dict[int, int]:
    """Global frame index base per entry, so multiple scenes pool into one
    evaluation sequence without frame collisions."""
    offsets, base = {}, 0
    for ei, entry in enumerate(manifest.entries):
        if entry.split != split:
            continue
        n = scenes._audio_n_samples(manifest.resolve(entry.audio))
        offsets[ei] = base
        base += n // scenes.SAMPLES_PER_FRAME + 10
    return offsets


def _front_end_signals(cfg: PipelineConfig, geom: ArrayGeometry, audio: np.ndarray,
                       design: beamform.BeamformerDesign | None) -> np.ndarray:
    if cfg.front_end == "beamformed":
        return beamform.apply_beamformer(design, audio)
    if cfg.front_end == "raw16":
        return audio
    if cfg.front_end == "stereo":
        return audio[list(stereo_pair_indices(geom))]
    return audio[[center_mic_index(geom)]]


@dataclass
class FeatureSet:
    """Extracted features plus per-row sample metadata."""

    features: np.ndarray           # (N, C, 64, 64)
    gframe: np.ndarray             # (N,) pooled frame index
    view: np.ndarray               # (N,)
    active: np.ndarray             # (N,) bool
    x_px: np.ndarray               # (N,) NaN where inactive
    x_norm: np.ndarray             # (N,) 0.5 placeholder where inactive


def extract_features(cfg: PipelineConfig, manifest: scenes.DatasetManifest,
                     refs: list, gains: np.ndarray, cams: dict,
                     design: beamform.BeamformerDesign | None,
                     out_path: str | None = None,
                     cache_dtype=np.float32) -> FeatureSet:
    """Extract per-frame log-mel stacks for the configured front end.

    refs is a list of FrameRef; rows are written scene by scene so memory
    stays bounded. When out_path is given the features go to a cache file
    and the returned array is the memmap.
    """
    geom = resolve_geometry(cfg)
    offsets = {}
    split_of_entry = {}
    for ei, entry in enumerate(manifest.entries):
        split_of_entry[ei] = entry.split
    for split in ("train", "test"):
        offsets[split] = _entry_frame_offsets(manifest, split)
    n = len(refs)
    n_ch = cfg.n_channels
    shape = (n, n_ch, features.N_MELS, features.N_FRAMES)
    chash = config_hash(cfg)
    if out_path is not None:
        writer = features.FeatureCacheWriter(out_path, shape, cache_dtype, chash)
        store = writer.data
    else:
        writer = None
        store = np.zeros(shape, dtype=cache_dtype)

    gframe = np.zeros(n, dtype=np.int64)
    view = np.zeros(n, dtype=np.int64)
    active = np.zeros(n, dtype=bool)
    x_px = np.full(n, np.nan)
    x_norm = np.full(n, 0.5)

    by_entry: dict[int, list] = {}
    for row, ref in enumerate(refs):
        by_entry.setdefault(ref.entry_index, []).append((row, ref))
    for ei in sorted(by_entry):
        audio = scenes.load_audio(manifest.resolve(manifest.entries[ei].audio))
        audio *= gains[:, None]
        sigs = _front_end_signals(cfg, geom, audio, design)
        base = offsets[split_of_entry[ei]][ei]
        for row, ref in by_entry[ei]:
            chunk = scenes.extract_chunk(sigs, ref.frame_index)
            stack = features.log_mel(chunk).astype(cache_dtype)
            store[row] = stack
            gframe[row] = base + ref.frame_index
            view[row] = ref.view_id
            active[row] = ref.active
            if ref.active and ref.x_px is not None:
                cam = cams[ref.view_id]
                x_px[row] = ref.x_px
                x_norm[row] = ref.x_px / cam.image_width_px
        del audio, sigs
    if writer is not None:
        writer.close()
        store, _ = features.load_feature_cache(out_path)
    return FeatureSet(store, gframe, view, active, x_px, x_norm)


def test_frame_refs(manifest: scenes.DatasetManifest, split: str = "test") -> list:
    """Every valid-chunk labeled frame of the split (no balancing)."""
    refs = []
    for ei, entry in enumerate(manifest.entries):
        if entry.split != split:
            continue
        audio_path = manifest.resolve(entry.audio)
        n_samples = scenes._audio_n_samples(audio_path)
        lo, hi = scenes.valid_chunk_frames(n_samples)
        for r in scenes.ingest_pseudo_labels(manifest.resolve(entry.labels)):
            if lo <= r.frame_index < hi:
                refs.append(scenes.FrameRef(ei, audio_path, r.frame_index,
                                            r.view_id, r.active, r.x_px))
    if not refs:
        raise PipelineError(f"manifest has no usable {split} frames")
    return refs


def _write_samples_csv(path, fs: FeatureSet, chash: str) -> None:
    with open(path, "w") as f:
        f.write(f"# config={chash}\n")
        f.write("idx,gframe,view,active,x_px,x_norm\n")
        for i in range(len(fs.gframe)):
            xp = "" if math.isnan(fs.x_px[i]) else repr(float(fs.x_px[i]))
            f.write(f"{i},{fs.gframe[i]},{fs.view[i]},{int(fs.active[i])},"
                    f"{xp},{float(fs.x_norm[i])!r}\n")


def _read_samples_csv(path) -> dict:
    rows = {"gframe": [], "view": [], "active": [], "x_px": [], "x_norm": []}
    with open(path) as f:
        for line in f:
            line = line.strip()
            if not line or line.startswith("#") or line.startswith("idx,"):
                continue
            parts = line.split(",")
            rows["gframe"].append(int(parts[1]))
            rows["view"].append(int(parts[2]))
            rows["active"].append(bool(int(parts[3])))
            rows["x_px"].append(float(parts[4]) if parts[4] else np.nan)
            rows["x_norm"].append(float(parts[5]))
    return {k: np.array(v) for k, v in rows.items()}


def featurize_cmd(cfg: PipelineConfig, manifest_path: str, out_dir: str,
                  weights_path: str | None = None) -> None:
    """Balanced train features plus full test features, stats and gains."""
    os.makedirs(out_dir, exist_ok=True)
    manifest = scenes.load_manifest(manifest_path)
    cams = resolve_cameras(cfg)
    chash = config_hash(cfg)
    cache_dtype = np.float16 if cfg.features.cache_dtype == "float16" else np.float32

    design = None
    if cfg.front_end == "beamformed":
        if weights_path:
            design = beamform.load_weights(weights_path, cfg.look_dir_set,
                                           cfg.beamformer.wng_min_db)
        else:
            design = beamform.design_sdb(resolve_geometry(cfg), cfg.look_dir_set,
                                         fft_size=cfg.beamformer.fft_size,
                                         sample_rate=cfg.beamformer.sample_rate,
                                         wng_min_db=cfg.beamformer.wng_min_db)

    gains = compute_dataset_gains(manifest, cfg.features.target_rms)
    gains_path = os.path.join(out_dir, "gains.txt")
    with open(gains_path, "w") as f:
        f.write(f"# config={chash}\n")
        for g in gains:
            f.write(f"{float(g)!r}\n")

    train_refs = scenes.sample_training_frames(manifest, cfg.seed,
                                               max_frames=cfg.max_train_frames)
    train_path = os.path.join(out_dir, "train.bin")
    train_set = extract_features(cfg, manifest, train_refs, gains, cams, design,
                                 out_path=train_path, cache_dtype=cache_dtype)
    _write_samples_csv(os.path.join(out_dir, "train_samples.csv"), train_set, chash)

    stats = features.compute_norm_stats(
        (np.asarray(train_set.features[i], dtype=np.float64)
         for i in range(len(train_set.features))),
        per_channel=cfg.features.per_channel_stats)
    stats_path = os.path.join(out_dir, "stats.txt")
    features.save_norm_stats(stats_path, stats, chash)

    refs = test_frame_refs(manifest)
    test_path = os.path.join(out_dir, "test.bin")
    test_set = extract_features(cfg, manifest, refs, gains, cams, design,
                                out_path=test_path, cache_dtype=cache_dtype)
    _write_samples_csv(os.path.join(out_dir, "test_samples.csv"), test_set, chash)

    _write_run_manifest(out_dir, "featurize", cfg, {
        "train.bin": train_path, "test.bin": test_path, "stats.txt": stats_path,
        "gains.txt": gains_path,
        "train_samples.csv": os.path.join(out_dir, "train_samples.csv"),
        "test_samples.csv": os.path.join(out_dir, "test_samples.csv"),
    })


# ---------------------------------------------------------------------------
# train / infer / eval
# ---------------------------------------------------------------------------

class NormalizedFrameDataset(model.FrameDataset):
    """FrameDataset applying feature normalization at fetch time."""

    def __init__(self, feats, onehot, active, x, stats: features.NormalizationStats):
        super().__init__(feats, onehot, active, x)
        self.stats = stats

    def fetch(self, idx):
        f, oh, act, x = super().fetch(idx)
        norm = features.normalize(f.numpy().astype(np.float64), self.stats)
        return torch.from_numpy(norm.astype(np.float32)), oh, act, x


def _onehot(views: np.ndarray, n: int = model.ONE_HOT_LEN) -> np.ndarray:
    out = np.zeros((len(views), n), dtype=np.float32)
    out[np.arange(len(views)), views] = 1.0
    return out


def _check_hash(kind: str, found: str, expected: str) -> None:
    if found and expected and found != expected:
        raise PipelineError(f"{kind} was produced under config {found}, "
                            f"current config is {expected}; refusing to mix")


def train_cmd(cfg: PipelineConfig, features_dir: str, out_dir: str,
              log=None) -> tuple:
    os.makedirs(out_dir, exist_ok=True)
    chash = config_hash(cfg)
    feats, fhash = features.load_feature_cache(os.path.join(features_dir, "train.bin"))
    _check_hash("feature cache", fhash, chash)
    samples = _read_samples_csv(os.path.join(features_dir, "train_samples.csv"))
    stats_path = os.path.join(features_dir, "stats.txt")
    stats = features.load_norm_stats(stats_path)
    dataset = NormalizedFrameDataset(feats, _onehot(samples["view"]),
                                     samples["active"], samples["x_norm"], stats)
    trainer = TrainerSeeded(cfg)
    net, history = model.train(dataset, cfg.model, trainer.config, log=log)
    ckpt_path = os.path.join(out_dir, f"model_{cfg.front_end}.ckpt")
    model.save_checkpoint(ckpt_path, net, trainer.config, config_hash=chash,
                          stats_hash=file_sha256(stats_path))
    loss_path = os.path.join(out_dir, f"loss_{cfg.front_end}.csv")
    model.save_loss_history(loss_path, history, chash)
    _write_run_manifest(out_dir, "train", cfg,
                        {"checkpoint": ckpt_path, "loss": loss_path})
    return net, history


class TrainerSeeded:
    """Trainer config with the pipeline seed folded into the rng seed."""

    def __init__(self, cfg: PipelineConfig):
        base = cfg.trainer
        self.config = model.TrainerConfig(
            epochs=base.epochs, batch_size=base.batch_size,
            learning_rate=base.learning_rate,
            rng_seed=int(np.random.SeedSequence([cfg.seed, base.rng_seed])
                         .generate_state(1)[0]))


def infer_cmd(cfg: PipelineConfig, ckpt_path: str, features_dir: str,
              out_path: str, smooth_sigma: float | None = None) -> list:
    chash = config_hash(cfg)
    net, meta = model.load_checkpoint(ckpt_path)
    _check_hash("checkpoint", meta.get("config_hash", ""), chash)
    stats_path = os.path.join(features_dir, "stats.txt")
    if meta.get("stats_hash"):
        if file_sha256(stats_path) != meta["stats_hash"]:
            raise PipelineError("normalization stats do not match the checkpoint; "
                                "refusing mismatched feature-stats/model pair")
    feats, fhash = features.load_feature_cache(os.path.join(features_dir, "test.bin"))
    _check_hash("feature cache", fhash, chash)
    samples = _read_samples_csv(os.path.join(features_dir, "test_samples.csv"))
    stats = features.load_norm_stats(stats_path)
    cams = resolve_cameras(cfg)

    outs = []
    batch = 256
    for start in range(0, len(feats), batch):
        block = np.asarray(feats[start:start + batch], dtype=np.float64)
        block = features.normalize(block, stats).astype(np.float32)
        oh = _onehot(samples["view"][start:start + batch])
        outs.append(model.predict_batch(net, block, oh))
    pred = np.concatenate(outs, axis=0)

    detections = []
    for i in range(len(pred)):
        cam = cams[int(samples["view"][i])]
        detections.append(metrics.Detection(
            frame_index=int(samples["gframe"][i]), view_id=int(samples["view"][i]),
            x_hat_px=float(pred[i, 0] * cam.image_width_px),
            c_hat=float(pred[i, 1])))
    smooth = smooth_sigma if smooth_sigma is not None else cfg.eval.smooth_sigma
    if smooth is not None:
        detections = metrics.smooth_detections(detections, smooth)
    metrics.write_detections(out_path, detections, chash)
    _write_run_manifest(os.path.dirname(os.path.abspath(out_path)) or ".",
                        "infer", cfg, {"detections": out_path})
    return detections


def pooled_ground_truth(cfg: PipelineConfig, manifest: scenes.DatasetManifest,
                        split: str = "test") -> list:
    """Label records of the split re-indexed on the pooled frame axis."""
    offsets = _entry_frame_offsets(manifest, split)
    gt = []
    for ei, entry in enumerate(manifest.entries):
        if entry.split != split:
            continue
        for r in scenes.ingest_pseudo_labels(manifest.resolve(entry.labels)):
            gt.append(scenes.LabelRecord(offsets[ei] + r.frame_index, r.view_id,
                                         r.active, r.x_px, r.screened))
    return gt


def eval_cmd(cfg: PipelineConfig, detections_path: str, manifest_path: str,
             out_path: str, tolerance_deg: float | None = None) -> metrics.MetricsReport:
    chash = config_hash(cfg)
    detections, dhash = metrics.read_detections(detections_path)
    _check_hash("detections file", dhash, chash)
    manifest = scenes.load_manifest(manifest_path)
    gt = pooled_ground_truth(cfg, manifest)
    # Active frames whose position fell outside the camera cannot be scored.
    scoreable = {(g.frame_index, g.view_id) for g in gt
                 if not (g.active and g.x_px is None)}
    det_keys = {(d.frame_index, d.view_id) for d in detections}
    orphans = det_keys - {(g.frame_index, g.view_id) for g in gt}
    if orphans:
        raise PipelineError(f"{len(orphans)} detections have no ground truth "
                            f"(e.g. {sorted(orphans)[:3]})")
    keep = det_keys & scoreable
    detections = [d for d in detections if (d.frame_index, d.view_id) in keep]
    gt = [g for g in gt if (g.frame_index, g.view_id) in keep]

    cams = resolve_cameras(cfg)
    thresholds = metrics.sigmoid_thresholds(cfg.eval.n_thresholds)
    report = metrics.compute_report(detections, gt, cams, thresholds)
    extra = {"n_scored_frames": float(len(gt))}
    if tolerance_deg is not None and tolerance_deg not in (2.0, 5.0):
        cam0 = cams[min(cams)]
        tol_px = cam0.focal_px * math.tan(math.radians(tolerance_deg))
        curve = metrics.pr_curve(detections, gt, tol_px, thresholds)
        extra[f"ap_at_{tolerance_deg:g}deg"] = metrics.voc_ap(curve)
        extra[f"f1_at_{tolerance_deg:g}deg"] = metrics.max_f1(curve)
    metrics.write_report(out_path, report, chash, extra)
    _write_run_manifest(os.path.dirname(os.path.abspath(out_path)) or ".",
                        "eval", cfg, {"report": out_path})
    return report


# ---------------------------------------------------------------------------
# trend: all four front ends on one shared benchmark
# ---------------------------------------------------------------------------

def trend_cmd(cfg: PipelineConfig, out_dir: str, manifest_path: str | None = None,
              log=None) -> dict:
    os.makedirs(out_dir, exist_ok=True)
    if manifest_path is None:
        manifest_path = simulate_cmd(cfg, os.path.join(out_dir, "scenes"))
    reports = {}
    for fe in FRONT_ENDS:
        fe_cfg = cfg.with_overrides(front_end=fe)
        fe_dir = os.path.join(out_dir, fe)
        os.makedirs(fe_dir, exist_ok=True)
        if log:
            log(f"[{fe}] featurize")
        featurize_cmd(fe_cfg, manifest_path, fe_dir)
        if log:
            log(f"[{fe}] train")
        train_cmd(fe_cfg, fe_dir, fe_dir,
                  log=(lambda e, l: log(f"[{fe}] epoch {e}: {l:.5f}")) if log else None)
        det_path = os.path.join(fe_dir, f"detections_{fe}.csv")
        infer_cmd(fe_cfg, os.path.join(fe_dir, f"model_{fe}.ckpt"), fe_dir, det_path)
        report = eval_cmd(fe_cfg, det_path, manifest_path,
                          os.path.join(fe_dir, f"report_{fe}.txt"))
        reports[fe] = report

    # Temporal-coherence row: the beamformed detections smoothed.
    fe_cfg = cfg.with_overrides(front_end="beamformed")
    tc_sigma = cfg.eval.smooth_sigma if cfg.eval.smooth_sigma else 2.0
    bf_dir = os.path.join(out_dir, "beamformed")
    dets, _ = metrics.read_detections(os.path.join(bf_dir, "detections_beamformed.csv"))
    smoothed = metrics.smooth_detections(dets, tc_sigma)
    tc_path = os.path.join(bf_dir, "detections_beamformed_tc.csv")
    metrics.write_detections(tc_path, smoothed, config_hash(fe_cfg))
    reports["beamformed+tc"] = eval_cmd(fe_cfg, tc_path, manifest_path,
                                        os.path.join(bf_dir, "report_beamformed_tc.txt"))

    table = os.path.join(out_dir, "trend_table.txt")
    with open(table, "w") as f:
        f.write(f"# config={config_hash(cfg)}\n")
        f.write("front_end ap_at_2deg f1_at_2deg ap_at_5deg f1_at_5deg "
                "ad_px ad_deg cls_accuracy\n")
        for fe in list(FRONT_ENDS) + ["beamformed+tc"]:
            r = reports[fe]
            f.write(f"{fe} {r.ap_at_2deg:.4f} {r.f1_at_2deg:.4f} {r.ap_at_5deg:.4f} "
                    f"{r.f1_at_5deg:.4f} {r.ad_px:.1f} {r.ad_deg:.3f} "
                    f"{r.cls_accuracy:.4f}\n")
    _write_run_manifest(out_dir, "trend", cfg, {"trend_table": table})
    return reports
