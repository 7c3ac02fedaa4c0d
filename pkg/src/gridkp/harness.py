"""Run orchestration: stages, checkpoints, prediction/eval runs, ablations.

A run directory holds::

    run_dir/
      config.ini           # snapshot of the effective configuration
      checkpoints/         # detector.npz, predictor_<kind>.npz
      logs/                # per-step training CSVs
      predictions/         # predicted frames + grid tracks
      reports/             # metric and ablation CSVs
      LOCK                 # present while a process owns the directory

Stage 2 never touches detector weights: it loads them once to precompute
keypoint tracks (cached as interchange files) and to synthesize frames.
"""
from __future__ import annotations

import csv
import json
import time
from contextlib import contextmanager
from dataclasses import replace
from pathlib import Path

import numpy as np

from gridkp import data as gdata
from gridkp import metrics as gmetrics
from gridkp import predictor as gpred
from gridkp.config import TrainConfig, config_hash, serialize_config
from gridkp.detector import DetectorModel, train_detector
from gridkp.grid import GridSpec
from gridkp.nn import Adam
from gridkp.predictor import PredictorModel, VectorPropagator, train_predictor


class MissingArtifact(FileNotFoundError):
    pass


class IncompatibleCheckpoint(ValueError):
    pass


class RunLocked(RuntimeError):
    pass


RUN_SUBDIRS = ("checkpoints", "logs", "predictions", "reports")


def ensure_run_dir(run_dir) -> Path:
    run_dir = Path(run_dir)
    for sub in RUN_SUBDIRS:
        (run_dir / sub).mkdir(parents=True, exist_ok=True)
    return run_dir


@contextmanager
def run_lock(run_dir):
    lock = Path(run_dir) / "LOCK"
    if lock.exists():
        raise RunLocked(f"run directory is locked by another process: {lock}")
    lock.write_text(f"pid={id(lock)} time={time.time()}\n")
    try:
        yield
    finally:
        lock.unlink(missing_ok=True)


# ---------------------------------------------------------------------------
# checkpoints
# ---------------------------------------------------------------------------

def save_checkpoint(path, param_arrays: dict, meta: dict, opt: Adam | None = None) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    arrays = {f"p.{k}": v for k, v in param_arrays.items()}
    if opt is not None:
        state = opt.state_dict()
        meta = dict(meta, opt_t=state.pop("t"), opt_lr=state.pop("lr"))
        arrays.update({f"opt.{k}": v for k, v in state.items()})
    np.savez_compressed(path, __meta__=np.frombuffer(json.dumps(meta).encode(), dtype=np.uint8), **arrays)
    return path


def load_checkpoint(path) -> tuple[dict, dict, dict]:
    path = Path(path)
    if not path.exists():
        raise MissingArtifact(f"checkpoint not found: {path}")
    with np.load(path) as z:
        meta = json.loads(bytes(z["__meta__"]).decode())
        params = {k[2:]: z[k] for k in z.files if k.startswith("p.")}
        opt_state = {k[4:]: z[k] for k in z.files if k.startswith("opt.")}
    return params, meta, opt_state


def _restore_optimizer(model, opt_state, meta) -> Adam | None:
    if not opt_state:
        return None
    opt = Adam(model.named_parameters())
    opt.load_state_dict(dict(opt_state, t=meta["opt_t"], lr=meta["opt_lr"]))
    return opt


def build_detector(cfg: TrainConfig, use_grid=None, seed=None, num_keypoints=None) -> DetectorModel:
    grid = GridSpec(cfg.grid_height, cfg.grid_width, num_keypoints or cfg.num_keypoints)
    return DetectorModel(
        grid, image_size=cfg.image_size, channels=cfg.channels, sigma=cfg.sigma,
        seed=cfg.seed if seed is None else seed, base=cfg.det_base,
        use_grid=cfg.use_grid if use_grid is None else use_grid,
    )


def detector_meta(cfg: TrainConfig, model: DetectorModel, step: int) -> dict:
    return {
        "kind": "detector",
        "grid": [model.grid.height, model.grid.width, model.grid.num_keypoints],
        "image_size": model.image_size, "channels": model.channels,
        "sigma": model.sigma, "base": cfg.det_base, "use_grid": model.use_grid,
        "lam": cfg.lam, "condensation": cfg.condensation,
        "step": step, "config_hash": config_hash(cfg),
    }


def load_detector(path) -> tuple[DetectorModel, dict, Adam | None]:
    params, meta, opt_state = load_checkpoint(path)
    if meta.get("kind") != "detector":
        raise IncompatibleCheckpoint(f"{path} is not a detector checkpoint")
    grid = GridSpec(*meta["grid"])
    model = DetectorModel(
        grid, image_size=meta["image_size"], channels=meta["channels"],
        sigma=meta["sigma"], base=meta["base"], use_grid=meta["use_grid"],
    )
    model.load_state_arrays(params)
    return model, meta, _restore_optimizer(model, opt_state, meta)


def predictor_meta(cfg: TrainConfig, detector_hash: str, step: int, propagator=None) -> dict:
    return {
        "kind": "predictor",
        "propagator": propagator or cfg.propagator,
        "grid": [cfg.grid_height, cfg.grid_width, cfg.num_keypoints],
        "sigma": cfg.sigma, "beta": cfg.beta, "step": step,
        "detector_hash": detector_hash, "config_hash": config_hash(cfg),
    }


def build_propagator(cfg: TrainConfig, propagator=None, seed=None):
    kind = propagator or cfg.propagator
    grid = GridSpec(cfg.grid_height, cfg.grid_width, cfg.num_keypoints)
    seed = cfg.seed if seed is None else seed
    if kind == "vector":
        return VectorPropagator(grid, seed=seed)
    return PredictorModel(grid, seed=seed, map_mode=kind, sigma=cfg.sigma)


def load_predictor(path):
    params, meta, opt_state = load_checkpoint(path)
    if meta.get("kind") != "predictor":
        raise IncompatibleCheckpoint(f"{path} is not a predictor checkpoint")
    grid = GridSpec(*meta["grid"])
    if meta["propagator"] == "vector":
        model = VectorPropagator(grid)
    else:
        model = PredictorModel(grid, map_mode=meta["propagator"], sigma=meta["sigma"])
    model.load_state_arrays(params)
    return model, meta, _restore_optimizer(model, opt_state, meta)


# ---------------------------------------------------------------------------
# data plumbing
# ---------------------------------------------------------------------------

def dataset_arrays(manifest: gdata.DatasetManifest, split: str) -> np.ndarray:
    seqs = gdata.load_split(manifest, split)
    if not seqs:
        raise MissingArtifact(f"dataset split {split!r} is empty under {manifest.root}")
    return np.stack([s.frames for s in seqs])


def load_dataset_arrays(cfg: TrainConfig) -> tuple[np.ndarray, np.ndarray, gdata.DatasetManifest]:
    root = Path(cfg.data_root)
    if not root.exists():
        raise MissingArtifact(f"data root not found: {root} (run gen-data first)")
    manifest = gdata.load_manifest(root)
    return dataset_arrays(manifest, "train"), dataset_arrays(manifest, "test"), manifest


def precompute_tracks(model: DetectorModel, frames: np.ndarray, path=None) -> np.ndarray:
    """Frozen-detector keypoint tracks [N, T, K, 2] for stage-2 training."""
    if path is not None and Path(path).exists():
        tracks, grid = gdata.load_grid_tracks(path)
        if grid == model.grid and tracks.shape[:2] == frames.shape[:2]:
            return tracks
    n, t = frames.shape[:2]
    tracks = np.zeros((n, t, model.grid.num_keypoints, 2), dtype=np.int64)
    for i in range(n):
        _, _, kps = model.detect(frames[i])
        tracks[i] = kps
    if path is not None:
        gdata.save_grid_tracks(path, tracks, model.grid)
    return tracks


def csv_logger(path, fieldnames):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    f = open(path, "w", newline="")
    writer = csv.DictWriter(f, fieldnames=fieldnames)
    writer.writeheader()

    def log(row):
        writer.writerow({k: row.get(k, "") for k in fieldnames})
        f.flush()

    log.close = f.close
    return log


# ---------------------------------------------------------------------------
# stages
# ---------------------------------------------------------------------------

def run_stage(stage: str, cfg: TrainConfig, resume: bool = False) -> Path:
    """Train one stage and return the checkpoint path."""
    if stage not in ("detect", "predict"):
        raise ValueError(f"unknown stage {stage!r}")
    run_dir = ensure_run_dir(cfg.run_dir)
    (run_dir / "config.ini").write_text(serialize_config(cfg))
    with run_lock(run_dir):
        if stage == "detect":
            return _run_detect_stage(cfg, run_dir, resume)
        return _run_predict_stage(cfg, run_dir, resume)


def _run_detect_stage(cfg: TrainConfig, run_dir: Path, resume: bool) -> Path:
    train, test, _ = load_dataset_arrays(cfg)
    val = test[: min(8, len(test))]
    ckpt = run_dir / "checkpoints" / "detector.npz"
    model = build_detector(cfg)
    opt, start = None, 0
    if resume and ckpt.exists():
        model, meta, opt = load_detector(ckpt)
        start = meta["step"]
    log = csv_logger(run_dir / "logs" / "detector.csv",
                     ["step", "loss", "rec", "con", "lr", "val"])

    def on_step(row):
        log(row)
        if (row["step"] + 1) % cfg.det_checkpoint_every == 0:
            save_checkpoint(ckpt, model.state_arrays(), detector_meta(cfg, model, row["step"] + 1), opt_holder[0])

    opt_holder = [opt]
    opt, _ = train_detector(
        model, train, cfg.det_steps, batch_size=cfg.det_batch, lr=cfg.det_lr,
        decay_rate=cfg.det_decay, patience=cfg.det_patience, lam=cfg.lam,
        worst_only=cfg.condensation == "worst", seed=cfg.seed,
        val_frames=val, eval_every=cfg.det_eval_every,
        start_step=start, optimizer=opt, on_step=on_step,
    )
    opt_holder[0] = opt
    log.close()
    save_checkpoint(ckpt, model.state_arrays(), detector_meta(cfg, model, cfg.det_steps), opt)
    return ckpt


def _run_predict_stage(cfg: TrainConfig, run_dir: Path, resume: bool) -> Path:
    det_path = run_dir / "checkpoints" / "detector.npz"
    det_model, det_meta, _ = load_detector(det_path)
    if det_meta["grid"] != [cfg.grid_height, cfg.grid_width, cfg.num_keypoints]:
        raise IncompatibleCheckpoint(
            f"detector checkpoint grid {det_meta['grid']} does not match config "
            f"{[cfg.grid_height, cfg.grid_width, cfg.num_keypoints]}"
        )
    train, test, _ = load_dataset_arrays(cfg)
    tracks = precompute_tracks(det_model, train, run_dir / "tracks_train.npz")
    val_tracks = precompute_tracks(det_model, test, run_dir / "tracks_test.npz")
    val_tracks = val_tracks[: min(8, len(val_tracks))]

    ckpt = run_dir / "checkpoints" / f"predictor_{cfg.propagator}.npz"
    model = build_propagator(cfg)
    opt, start = None, 0
    if resume and ckpt.exists():
        model, meta, opt = load_predictor(ckpt)
        start = meta["step"]
    if cfg.propagator == "vector":
        history = model.train_on_tracks(
            tracks, cfg.pred_steps, window=cfg.pred_window, lr=cfg.pred_lr, seed=cfg.seed
        )
        log = csv_logger(run_dir / "logs" / "predictor_vector.csv", ["step", "loss"])
        for row in history:
            log(row)
        log.close()
        save_checkpoint(ckpt, model.state_arrays(),
                        predictor_meta(cfg, det_meta["config_hash"], cfg.pred_steps))
        return ckpt

    log = csv_logger(run_dir / "logs" / f"predictor_{cfg.propagator}.csv",
                     ["step", "loss", "kp", "kl", "lr", "val"])

    def on_step(row):
        log(row)
        if (row["step"] + 1) % cfg.pred_checkpoint_every == 0:
            save_checkpoint(ckpt, model.state_arrays(),
                            predictor_meta(cfg, det_meta["config_hash"], row["step"] + 1),
                            opt_holder[0])

    opt_holder = [opt]
    opt, _ = train_predictor(
        model, tracks, cfg.pred_steps, batch_size=cfg.pred_batch,
        window=cfg.pred_window, lr=cfg.pred_lr, decay_rate=cfg.pred_decay,
        patience=cfg.pred_patience, beta=cfg.beta, seed=cfg.seed,
        val_tracks=val_tracks, eval_every=cfg.pred_eval_every,
        start_step=start, optimizer=opt, on_step=on_step,
    )
    opt_holder[0] = opt
    log.close()
    save_checkpoint(ckpt, model.state_arrays(),
                    predictor_meta(cfg, det_meta["config_hash"], cfg.pred_steps), opt)
    return ckpt


# ---------------------------------------------------------------------------
# prediction + evaluation runs
# ---------------------------------------------------------------------------

def load_run_models(cfg: TrainConfig):
    run_dir = Path(cfg.run_dir)
    det_model, det_meta, _ = load_detector(run_dir / "checkpoints" / "detector.npz")
    pred_path = run_dir / "checkpoints" / f"predictor_{cfg.propagator}.npz"
    pred_model, pred_meta, _ = load_predictor(pred_path)
    if pred_meta["grid"] != det_meta["grid"]:
        raise IncompatibleCheckpoint(
            f"predictor grid {pred_meta['grid']} != detector grid {det_meta['grid']}"
        )
    if pred_meta["detector_hash"] != det_meta["config_hash"]:
        raise IncompatibleCheckpoint(
            "predictor was trained against a different detector "
            f"({pred_meta['detector_hash']} != {det_meta['config_hash']})"
        )
    return det_model, pred_model, det_meta, pred_meta


def predict_from_run(cfg: TrainConfig, samples: int, seed: int, out_dir=None) -> Path:
    """Roll out every test sequence; write frames + track interchange files."""
    det_model, pred_model, _, _ = load_run_models(cfg)
    _, test, manifest = load_dataset_arrays(cfg)
    t_obs, horizon = cfg.t_obs, cfg.horizon
    out = Path(out_dir) if out_dir else Path(cfg.run_dir) / "predictions"
    out.mkdir(parents=True, exist_ok=True)
    n = len(test)
    k = cfg.num_keypoints
    all_tracks = np.zeros((samples, n, horizon, k, 2), dtype=np.int64)
    for i in range(n):
        observed = test[i, :t_obs]
        _, _, obs_kps = det_model.detect(observed)
        observed_maps = pred_model.maps_from_tracks(obs_kps)
        for j in range(samples):
            maps, kps = gpred.rollout(pred_model, observed_maps, horizon, (seed, i, j))
            all_tracks[j, i] = kps
            refs = np.repeat(observed[:1], horizon, axis=0)
            ref_kps = np.repeat(obs_kps[:1], horizon, axis=0)
            frames = det_model.synthesize_batch(kps, refs, ref_kps)
            seq_dir = out / f"seq_{i:05d}" / f"sample_{j:03d}"
            seq_dir.mkdir(parents=True, exist_ok=True)
            for t in range(horizon):
                gdata.save_frame_png(seq_dir / f"frame_{t:05d}.png", frames[t])
    for j in range(samples):
        gdata.save_grid_tracks(out / f"tracks_sample_{j:03d}.npz", all_tracks[j], pred_model.grid)
    meta = {
        "samples": samples, "seed": seed, "t_obs": t_obs, "horizon": horizon,
        "num_sequences": n, "sequence_ids": manifest.test_ids,
    }
    (out / "predictions.json").write_text(json.dumps(meta, indent=2) + "\n")
    return out


def evaluate_run(cfg: TrainConfig, pred_dir=None) -> tuple[Path, Path]:
    """Score a prediction directory against ground truth; write CSV reports."""
    pred_dir = Path(pred_dir) if pred_dir else Path(cfg.run_dir) / "predictions"
    meta_path = pred_dir / "predictions.json"
    if not meta_path.exists():
        raise MissingArtifact(f"no predictions found under {pred_dir} (run predict first)")
    meta = json.loads(meta_path.read_text())
    det_model, _, _, _ = load_run_models(cfg)
    _, test, _ = load_dataset_arrays(cfg)
    t_obs, horizon, samples = meta["t_obs"], meta["horizon"], meta["samples"]
    tracks = [gdata.load_grid_tracks(pred_dir / f"tracks_sample_{j:03d}.npz")[0]
              for j in range(samples)]
    rows = []
    summary = {"ssim": [], "psnr": [], "coord_err_final": []}
    for i in range(len(test)):
        truth = test[i, t_obs : t_obs + horizon]
        _, _, ref_kps = det_model.detect(truth)
        best = (-np.inf, None, None, None)
        psnr_means = []
        for j in range(samples):
            seq_dir = pred_dir / f"seq_{i:05d}" / f"sample_{j:03d}"
            pred = np.stack([
                gdata.load_frame_png(seq_dir / f"frame_{t:05d}.png", test.shape[2])
                for t in range(horizon)
            ])
            scores = gmetrics.per_frame_scores(pred, truth)
            cerr = gmetrics.coordinate_error(tracks[j][i].astype(float), ref_kps.astype(float))
            psnr_means.append(float(np.mean(scores.psnr)))
            if float(np.mean(scores.ssim)) > best[0]:
                best = (float(np.mean(scores.ssim)), scores, cerr, j)
        _, scores, cerr, j = best
        for t in range(horizon):
            rows.append({
                "sequence_id": f"seq_{i:05d}", "t": t_obs + t,
                "ssim": f"{scores.ssim[t]:.6f}", "psnr": f"{scores.psnr[t]:.6f}",
                "coord_err": f"{cerr[t]:.6f}", "sample_seed": j,
            })
        summary["ssim"].append(best[0])
        summary["psnr"].append(max(psnr_means))
        summary["coord_err_final"].append(float(cerr[-1]))
    reports = Path(cfg.run_dir) / "reports"
    per_frame = reports / "metrics_per_frame.csv"
    summ = reports / "metrics_summary.csv"
    gmetrics.write_per_frame_csv(per_frame, rows)
    gmetrics.write_summary_csv(summ, summary)
    return per_frame, summ


# ---------------------------------------------------------------------------
# ablation experiments
# ---------------------------------------------------------------------------

DETECTION_VARIANTS = {
    "baseline": {"use_grid": False, "lam": 0.0},
    "baseline+con": {"use_grid": False, "lam": None},
    "baseline+grid": {"use_grid": True, "lam": 0.0},
    "full": {"use_grid": True, "lam": None},
}


def train_detector_variant(cfg: TrainConfig, train: np.ndarray, val: np.ndarray,
                           use_grid: bool, lam: float, seed: int) -> DetectorModel:
    model = build_detector(cfg, use_grid=use_grid, seed=seed)
    train_detector(
        model, train, cfg.det_steps, batch_size=cfg.det_batch, lr=cfg.det_lr,
        decay_rate=cfg.det_decay, patience=cfg.det_patience, lam=lam,
        worst_only=cfg.condensation == "worst", seed=seed,
        val_frames=val, eval_every=cfg.det_eval_every,
    )
    return model


def reconstruction_scores(model: DetectorModel, frames: np.ndarray) -> dict:
    """Mean reconstruction SSIM/PSNR over [N, T, C, S, S] held-out frames."""
    ssims, psnrs = [], []
    for i in range(len(frames)):
        recon = model.reconstruct_sequence(frames[i])
        s = gmetrics.per_frame_scores(recon, frames[i])
        ssims.append(float(np.mean(s.ssim)))
        psnrs.append(float(np.mean(np.minimum(s.psnr, 99.0))))
    return {"ssim": float(np.mean(ssims)), "psnr": float(np.mean(psnrs))}


def detection_ablation(cfg: TrainConfig, train: np.ndarray, test: np.ndarray,
                       seed: int = 0) -> dict:
    """Train the 2x2 detection variants on one budget; score held-out recon."""
    val = test[: min(8, len(test))]
    out = {}
    for name, spec in DETECTION_VARIANTS.items():
        lam = cfg.lam if spec["lam"] is None else spec["lam"]
        model = train_detector_variant(cfg, train, val, spec["use_grid"], lam, seed)
        out[name] = reconstruction_scores(model, test)
        out[name]["model"] = model
    return out


def propagation_ablation(cfg: TrainConfig, det_model: DetectorModel,
                         tracks_train: np.ndarray, tracks_test: np.ndarray,
                         frames_test: np.ndarray, seed: int = 0,
                         marks=(5, 10, 15, 20), best_of: int = 5) -> dict:
    """Train the three propagators on the same detector tracks and compare.

    Coordinate error is best-of-``best_of`` per sequence against the frozen
    detector's reference tracks; degeneration rates compare predicted-frame
    SSIM/PSNR with the same detector's reconstruction upper bound.
    """
    t_obs = cfg.t_obs
    horizon = max(marks)
    if tracks_test.shape[1] < t_obs + horizon:
        raise ValueError("test tracks shorter than t_obs + max(marks)")
    recon = reconstruction_scores(det_model, frames_test[:, t_obs : t_obs + horizon])
    out = {}
    for kind in ("binary", "gaussian", "vector"):
        prop = build_propagator(cfg, propagator=kind, seed=seed)
        if kind == "vector":
            prop.train_on_tracks(tracks_train, cfg.pred_steps, window=cfg.pred_window,
                                 lr=cfg.pred_lr, seed=seed)
        else:
            train_predictor(prop, tracks_train, cfg.pred_steps,
                            batch_size=cfg.pred_batch, window=cfg.pred_window,
                            lr=cfg.pred_lr, decay_rate=cfg.pred_decay,
                            patience=cfg.pred_patience, beta=cfg.beta, seed=seed)
        errs = []
        pred_ssims, pred_psnrs = [], []
        for i in range(len(tracks_test)):
            obs = tracks_test[i, :t_obs]
            ref = tracks_test[i, t_obs : t_obs + horizon].astype(np.float64)
            best_err = None
            best_final = np.inf
            n_samples = 1 if kind == "vector" else best_of
            best_coords = None
            for j in range(n_samples):
                coords = _prop_rollout(prop, obs, horizon, (seed, i, j))
                cerr = gmetrics.coordinate_error(coords, ref)
                if float(cerr.mean()) < best_final:
                    best_final = float(cerr.mean())
                    best_err = cerr
                    best_coords = coords
            errs.append(best_err)
            frames = _synthesize_from_coords(det_model, prop, best_coords,
                                             frames_test[i, 0], tracks_test[i, 0])
            s = gmetrics.per_frame_scores(frames, frames_test[i, t_obs : t_obs + horizon])
            pred_ssims.append(float(np.mean(s.ssim)))
            pred_psnrs.append(float(np.mean(np.minimum(s.psnr, 99.0))))
        errs = np.stack(errs)
        out[kind] = {
            "coord_err": {m: float(errs[:, m - 1].mean()) for m in marks},
            "pred_ssim": float(np.mean(pred_ssims)),
            "pred_psnr": float(np.mean(pred_psnrs)),
            "degen_ssim": gmetrics.degeneration_rate(recon["ssim"], float(np.mean(pred_ssims))),
            "degen_psnr": gmetrics.degeneration_rate(recon["psnr"], float(np.mean(pred_psnrs))),
        }
    out["_recon"] = recon
    return out


def _prop_rollout(prop, observed_track, horizon, seed):
    if isinstance(prop, VectorPropagator):
        return prop.rollout_coords(observed_track, horizon, seed)
    return gpred.rollout_coords(prop, observed_track, horizon, seed)


def _synthesize_from_coords(det_model, prop, coords_cells, ref_frame, ref_kps):
    """Render predicted (col, row) cell coords back to frames."""
    horizon = len(coords_cells)
    refs = np.repeat(ref_frame[None], horizon, axis=0)
    ref_kps = np.repeat(ref_kps[None], horizon, axis=0)
    grid = det_model.grid
    xy = np.stack([
        (np.asarray(coords_cells)[..., 0] + 0.5) / grid.width,
        (np.asarray(coords_cells)[..., 1] + 0.5) / grid.height,
    ], axis=-1)
    return det_model.synthesize_from_coords(xy, refs, ref_kps)


def keypoint_sweep(cfg: TrainConfig, train, test, ks=(6, 12, 18), seed: int = 0) -> dict:
    """Reconstruction + prediction scores for each keypoint count."""
    out = {}
    for k in ks:
        kcfg = replace(cfg, num_keypoints=k)
        val = test[: min(8, len(test))]
        det = train_detector_variant(kcfg, train, val, kcfg.use_grid, kcfg.lam, seed)
        rec = reconstruction_scores(det, test)
        tracks_train = precompute_tracks(det, train)
        tracks_test = precompute_tracks(det, test)
        prop = build_propagator(kcfg, propagator="binary", seed=seed)
        train_predictor(prop, tracks_train, kcfg.pred_steps, batch_size=kcfg.pred_batch,
                        window=kcfg.pred_window, lr=kcfg.pred_lr, beta=kcfg.beta, seed=seed)
        ssims, psnrs = [], []
        for i in range(len(test)):
            obs = tracks_test[i, : kcfg.t_obs]
            maps = prop.maps_from_tracks(obs)
            _, kps = gpred.rollout(prop, maps, kcfg.horizon, (seed, i))
            refs = np.repeat(test[i, :1], kcfg.horizon, axis=0)
            rkps = np.repeat(tracks_test[i, :1], kcfg.horizon, axis=0)
            frames = det.synthesize_batch(kps, refs, rkps)
            s = gmetrics.per_frame_scores(frames, test[i, kcfg.t_obs : kcfg.t_obs + kcfg.horizon])
            ssims.append(float(np.mean(s.ssim)))
            psnrs.append(float(np.mean(np.minimum(s.psnr, 99.0))))
        out[k] = {
            "recon_ssim": rec["ssim"], "recon_psnr": rec["psnr"],
            "pred_ssim": float(np.mean(ssims)), "pred_psnr": float(np.mean(psnrs)),
        }
    return out


def run_ablation_suite(cfg: TrainConfig, seed: int | None = None) -> list[Path]:
    """All three ablation tables; a failed cell is recorded, not fatal."""
    seed = cfg.seed if seed is None else seed
    run_dir = ensure_run_dir(cfg.run_dir)
    reports = run_dir / "reports"
    train, test, _ = load_dataset_arrays(cfg)
    written = []

    det_rows = []
    detection = None
    try:
        detection = detection_ablation(cfg, train, test, seed)
        for name in DETECTION_VARIANTS:
            r = detection[name]
            det_rows.append([name, f"{r['ssim']:.4f}", f"{r['psnr']:.2f}", "", ""])
    except Exception as e:  # partial-failure isolation
        det_rows.append(["FAILED", "", "", "", repr(e)])
    path = reports / "detection_ablation.csv"
    _write_table(path, ["method", "ssim", "psnr", "lpips", "error"], det_rows)
    written.append(path)

    prop_rows = []
    try:
        det_model = (detection or {}).get("full", {}).get("model")
        if det_model is None:
            val = test[: min(8, len(test))]
            det_model = train_detector_variant(cfg, train, val, True, cfg.lam, seed)
        marks = tuple(m for m in (5, 10, 15, 20) if cfg.t_obs + m <= test.shape[1])
        tracks_train = precompute_tracks(det_model, train)
        tracks_test = precompute_tracks(det_model, test)
        res = propagation_ablation(cfg, det_model, tracks_train, tracks_test, test,
                                   seed, marks=marks)
        for kind in ("binary", "gaussian", "vector"):
            r = res[kind]
            prop_rows.append(
                [kind] + [f"{r['coord_err'][m]:.3f}" for m in marks]
                + [f"{100 * r['degen_ssim']:.1f}%", f"{100 * r['degen_psnr']:.1f}%", "", ""]
            )
        mark_cols = [f"t={cfg.t_obs + m}" for m in marks]
    except Exception as e:
        mark_cols = ["t=+5", "t=+10", "t=+15", "t=+20"]
        prop_rows.append(["FAILED"] + [""] * len(mark_cols) + ["", "", "", repr(e)])
    path = reports / "propagation_ablation.csv"
    _write_table(path, ["method"] + mark_cols + ["degen_ssim", "degen_psnr", "degen_lpips", "error"],
                 prop_rows)
    written.append(path)

    sweep_rows = []
    try:
        sweep = keypoint_sweep(cfg, train, test, seed=seed)
        for k, r in sweep.items():
            sweep_rows.append([
                k, f"{r['recon_ssim']:.4f}", f"{r['recon_psnr']:.2f}", "",
                f"{r['pred_ssim']:.4f}", f"{r['pred_psnr']:.2f}", "", "",
            ])
    except Exception as e:
        sweep_rows.append(["FAILED", "", "", "", "", "", "", repr(e)])
    path = reports / "keypoint_sweep.csv"
    _write_table(
        path,
        ["keypoints", "recon_ssim", "recon_psnr", "recon_lpips",
         "pred_ssim", "pred_psnr", "pred_lpips", "error"],
        sweep_rows,
    )
    written.append(path)
    return written


def _write_table(path, header, rows) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(header)
        writer.writerows(rows)
