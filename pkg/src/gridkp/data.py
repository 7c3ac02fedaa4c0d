"""Synthetic moving-shape videos with exact tracks, plus on-disk dataset I/O.

Positions are stored in pixel units: an object at (x, y) sits on the center
of pixel column x / row y, so the normalized coordinate is ((x + 0.5) / S,
(y + 0.5) / S), matching the grid cell-center convention. Tracks therefore
snap onto an S x S grid with zero quantization error.

On disk a dataset is::

    root/
      sequences/seq_00000/frame_00000.png ...
      train.txt            # one sequence directory per line, relative to root
      test.txt
      meta.json            # frames per sequence, t_obs, horizon
      tracks.npz           # ground-truth object tracks (normalized xy)
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from PIL import Image

MOTION_KINDS = ("constant", "bouncing", "switching")


@dataclass(frozen=True)
class SyntheticSceneConfig:
    num_objects: int = 1
    motion_kind: str = "bouncing"
    image_size: int = 64
    object_radius: float = 5.0
    seed: int = 0
    noise_std: float = 0.0
    switch_prob: float = 0.15
    min_speed: float = 0.8
    max_speed: float = 1.6

    def __post_init__(self):
        if self.motion_kind not in MOTION_KINDS:
            raise ValueError(f"motion_kind must be one of {MOTION_KINDS}")
        if self.num_objects < 1:
            raise ValueError("need at least one object")
        if 2 * self.object_radius + 2 >= self.image_size:
            raise ValueError("objects do not fit inside the frame")


@dataclass
class VideoSequence:
    """Frame tensor [T, C, H, W] with pixel values in [0, 1]."""

    frames: np.ndarray

    def __post_init__(self):
        f = self.frames
        if f.ndim != 4:
            raise ValueError(f"expected [T, C, H, W] frames, got shape {f.shape}")
        t, c, h, w = f.shape
        if t < 2:
            raise ValueError("sequences need at least 2 frames")
        if c not in (1, 3):
            raise ValueError("frames must be grayscale or RGB")
        if h % 4 or w % 4:
            raise ValueError("spatial dims must be divisible by 4")

    def __len__(self) -> int:
        return self.frames.shape[0]


# ---------------------------------------------------------------------------
# motion + rendering
# ---------------------------------------------------------------------------

def simulate_motion(kind, starts, velocities, num_steps, image_size, radius,
                    rng=None, switch_prob=0.15, speed=None):
    """Advance object centers for ``num_steps`` frames.

    ``starts``/``velocities`` are [n, 2] pixel-unit arrays; returns positions
    [num_steps, n, 2]. Bouncing reflects at the walls so the position
    sequence is symmetric about the contact point; switching resamples the
    velocity direction at seeded random steps and also bounces.
    """
    if kind not in MOTION_KINDS:
        raise ValueError(f"unknown motion kind {kind!r}")
    pos = np.array(starts, dtype=np.float64)
    vel = np.array(velocities, dtype=np.float64)
    lo = float(radius)
    hi = float(image_size - 1 - radius)
    if np.any(pos < lo) or np.any(pos > hi):
        raise ValueError("start positions leave no room for the object")
    out = np.empty((num_steps, len(pos), 2))
    out[0] = pos
    for t in range(1, num_steps):
        if kind == "switching" and rng is not None:
            for n in range(len(pos)):
                if rng.uniform() < switch_prob:
                    ang = rng.uniform(0, 2 * np.pi)
                    spd = np.hypot(*vel[n]) if speed is None else speed
                    vel[n] = [spd * np.cos(ang), spd * np.sin(ang)]
        pos = pos + vel
        if kind in ("bouncing", "switching"):
            for d in range(2):
                low_hit = pos[:, d] < lo
                pos[low_hit, d] = 2 * lo - pos[low_hit, d]
                vel[low_hit, d] *= -1
                high_hit = pos[:, d] > hi
                pos[high_hit, d] = 2 * hi - pos[high_hit, d]
                vel[high_hit, d] *= -1
        elif np.any(pos < lo) or np.any(pos > hi):
            raise ValueError("constant-velocity trajectory leaves the frame")
        out[t] = pos
    return out


def render_frame(positions, image_size, radius, shapes=None, intensities=None):
    """Anti-aliased disks/squares on a black background, [1, S, S] float32."""
    n = len(positions)
    shapes = shapes or ["disk" if i % 2 == 0 else "square" for i in range(n)]
    if intensities is None:
        intensities = [1.0 - 0.3 * (i / max(n - 1, 1)) for i in range(n)]
    cols = np.arange(image_size, dtype=np.float64)[None, :]
    rows = np.arange(image_size, dtype=np.float64)[:, None]
    frame = np.zeros((image_size, image_size), dtype=np.float64)
    for (x, y), shape, val in zip(positions, shapes, intensities):
        dx = np.abs(cols - x)
        dy = np.abs(rows - y)
        if shape == "disk":
            d = np.hypot(dx, dy)
        else:
            d = np.maximum(dx, dy)
        cov = np.clip(radius - d + 0.5, 0.0, 1.0)
        frame = np.maximum(frame, val * cov)
    return frame[None].astype(np.float32)


def generate_synthetic(config: SyntheticSceneConfig, num_sequences: int, num_frames: int):
    """Deterministic synthetic set: frames [N, T, 1, S, S] + tracks [N, T, n, 2].

    Tracks are normalized (x, y) object centers.
    """
    rng = np.random.default_rng(config.seed)
    s = config.image_size
    r = config.object_radius
    lo, hi = r, s - 1 - r
    frames = np.empty((num_sequences, num_frames, 1, s, s), dtype=np.float32)
    tracks = np.empty((num_sequences, num_frames, config.num_objects, 2))
    for i in range(num_sequences):
        speeds = rng.uniform(config.min_speed, config.max_speed, config.num_objects)
        angles = rng.uniform(0, 2 * np.pi, config.num_objects)
        vel = np.stack([speeds * np.cos(angles), speeds * np.sin(angles)], axis=1)
        if config.motion_kind == "constant":
            # pick starts so the whole run stays inside the walls
            span = vel * (num_frames - 1)
            start_lo = lo - np.minimum(span, 0)
            start_hi = hi - np.maximum(span, 0)
            starts = rng.uniform(start_lo, start_hi)
        else:
            starts = rng.uniform(lo, hi, (config.num_objects, 2))
        pos = simulate_motion(
            config.motion_kind, starts, vel, num_frames, s, r,
            rng=rng, switch_prob=config.switch_prob,
        )
        for t in range(num_frames):
            frame = render_frame(pos[t], s, r)
            if config.noise_std > 0:
                noise = rng.normal(0.0, config.noise_std, frame.shape)
                frame = np.clip(frame + noise, 0.0, 1.0).astype(np.float32)
            frames[i, t] = frame
        tracks[i] = (pos + 0.5) / s
    return frames, tracks


# ---------------------------------------------------------------------------
# on-disk layout
# ---------------------------------------------------------------------------

@dataclass
class DatasetManifest:
    root: Path
    train_ids: list = field(default_factory=list)
    test_ids: list = field(default_factory=list)
    frames_per_sequence: int = 20
    t_obs: int = 10
    horizon: int = 10

    def split_ids(self, split: str) -> list:
        if split == "train":
            return self.train_ids
        if split == "test":
            return self.test_ids
        raise ValueError(f"unknown split {split!r}")

    def validate(self) -> None:
        need = self.t_obs + self.horizon
        if self.frames_per_sequence < need:
            raise ValueError(
                f"sequences hold {self.frames_per_sequence} frames, "
                f"need t_obs + horizon = {need}"
            )
        for sid in self.train_ids + self.test_ids:
            d = Path(self.root) / sid
            if not d.is_dir():
                raise FileNotFoundError(f"sequence directory missing: {d}")
            n = len(sorted(d.glob("frame_*.png")))
            if n < need:
                raise ValueError(f"sequence {d} has {n} frames, need at least {need}")


def write_dataset(root, frames, tracks, num_train, t_obs, horizon):
    """Write frames/manifests/tracks in the documented layout."""
    root = Path(root)
    (root / "sequences").mkdir(parents=True, exist_ok=True)
    n, t = frames.shape[:2]
    ids = []
    for i in range(n):
        sid = f"sequences/seq_{i:05d}"
        seq_dir = root / sid
        seq_dir.mkdir(exist_ok=True)
        for ti in range(t):
            save_frame_png(seq_dir / f"frame_{ti:05d}.png", frames[i, ti])
        ids.append(sid)
    train_ids, test_ids = ids[:num_train], ids[num_train:]
    (root / "train.txt").write_text("".join(s + "\n" for s in train_ids))
    (root / "test.txt").write_text("".join(s + "\n" for s in test_ids))
    meta = {"frames_per_sequence": t, "t_obs": t_obs, "horizon": horizon}
    (root / "meta.json").write_text(json.dumps(meta, indent=2) + "\n")
    np.savez_compressed(root / "tracks.npz", tracks=tracks)
    return DatasetManifest(root, train_ids, test_ids, t, t_obs, horizon)


def load_manifest(root) -> DatasetManifest:
    root = Path(root)
    meta_path = root / "meta.json"
    if not meta_path.exists():
        raise FileNotFoundError(f"not a dataset directory (no meta.json): {root}")
    meta = json.loads(meta_path.read_text())
    def read_ids(name):
        p = root / name
        return [ln.strip() for ln in p.read_text().splitlines() if ln.strip()] if p.exists() else []
    return DatasetManifest(
        root,
        read_ids("train.txt"),
        read_ids("test.txt"),
        int(meta["frames_per_sequence"]),
        int(meta["t_obs"]),
        int(meta["horizon"]),
    )


def save_frame_png(path, frame) -> None:
    arr = np.clip(np.round(frame * 255), 0, 255).astype(np.uint8)
    if arr.shape[0] == 1:
        img = Image.fromarray(arr[0], mode="L")
    else:
        img = Image.fromarray(arr.transpose(1, 2, 0), mode="RGB")
    img.save(path)


def load_frame_png(path, expect_channels=None) -> np.ndarray:
    try:
        with Image.open(path) as img:
            if expect_channels == 1:
                img = img.convert("L")
            elif expect_channels == 3:
                img = img.convert("RGB")
            elif img.mode not in ("L", "RGB"):
                img = img.convert("RGB")
            arr = np.asarray(img, dtype=np.float32) / 255.0
    except (OSError, SyntaxError) as e:
        raise ValueError(f"corrupt or unreadable frame file {path}: {e}") from e
    if arr.ndim == 2:
        return arr[None]
    return arr.transpose(2, 0, 1)


def load_sequence(root, sid, num_frames=None, expect_channels=None) -> VideoSequence:
    seq_dir = Path(root) / sid
    files = sorted(seq_dir.glob("frame_*.png"))
    if num_frames is not None:
        if len(files) < num_frames:
            raise ValueError(f"sequence {seq_dir} has {len(files)} frames, need {num_frames}")
        files = files[:num_frames]
    if not files:
        raise FileNotFoundError(f"no frames in {seq_dir}")
    first = load_frame_png(files[0], expect_channels)
    channels = first.shape[0]
    frames = np.empty((len(files),) + first.shape, dtype=np.float32)
    frames[0] = first
    for i, f in enumerate(files[1:], start=1):
        frames[i] = load_frame_png(f, expect_channels=channels)
    return VideoSequence(frames)


def load_split(manifest: DatasetManifest, split: str) -> list[VideoSequence]:
    """Eagerly load a split; channel layout is locked to the first sequence."""
    manifest.validate()
    out = []
    channels = None
    for sid in manifest.split_ids(split):
        seq = load_sequence(manifest.root, sid, manifest.frames_per_sequence, channels)
        channels = seq.frames.shape[1]
        out.append(seq)
    return out


def iter_sequences(manifest: DatasetManifest, split: str, seed=None, epoch: int = 0):
    """Yield sequences in a fixed order that is a pure function of (seed, epoch)."""
    ids = list(manifest.split_ids(split))
    if seed is not None:
        order = np.random.default_rng((seed, epoch)).permutation(len(ids))
        ids = [ids[i] for i in order]
    channels = None
    for sid in ids:
        seq = load_sequence(manifest.root, sid, manifest.frames_per_sequence, channels)
        channels = seq.frames.shape[1]
        yield seq


def load_ground_truth_tracks(root) -> np.ndarray:
    with np.load(Path(root) / "tracks.npz") as z:
        return z["tracks"]


# ---------------------------------------------------------------------------
# grid keypoint track interchange files
# ---------------------------------------------------------------------------

def save_grid_tracks(path, tracks, grid) -> None:
    """Integer [N, T, K, 2] (col, row) tracks with a GridSpec header."""
    tracks = np.asarray(tracks)
    if tracks.ndim != 4 or tracks.shape[-1] != 2:
        raise ValueError(f"expected [N, T, K, 2] tracks, got {tracks.shape}")
    np.savez_compressed(
        path,
        tracks=tracks.astype(np.int16),
        grid_height=grid.height,
        grid_width=grid.width,
        num_keypoints=grid.num_keypoints,
    )


def load_grid_tracks(path):
    from gridkp.grid import GridSpec

    with np.load(Path(path)) as z:
        grid = GridSpec(int(z["grid_height"]), int(z["grid_width"]), int(z["num_keypoints"]))
        return z["tracks"].astype(np.int64), grid
