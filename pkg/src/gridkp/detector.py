"""Keypoint detector and frame synthesizer.

A heatmap trunk turns a frame into K sigmoid heatmaps at grid resolution;
spatial expectation gives continuous keypoints, which are pushed onto the
grid with a straight-through snap. Keypoints are rendered as Gaussian blobs
and decoded back to pixels together with appearance features and blobs of a
reference frame, so the only route from the target frame to the
reconstruction is through the keypoints.

Training minimizes the squared reconstruction error plus a weighted
condensation term that widens each heatmap's peak-to-mean gap.
"""
from __future__ import annotations

import numpy as np

from gridkp import autodiff as ad
from gridkp import grid as g
from gridkp import nn
from gridkp.autodiff import Tensor


class TrainingDiverged(RuntimeError):
    def __init__(self, msg, snapshot=None):
        super().__init__(msg)
        self.snapshot = snapshot or {}


# ---------------------------------------------------------------------------
# tensor-side building blocks (shared with the predictor module)
# ---------------------------------------------------------------------------

def expectation_tensor(heat: Tensor) -> tuple[Tensor, Tensor]:
    """Spatial expectation of [B, K, h, w] maps -> normalized (x, y) [B, K]."""
    _, _, h, w = heat.shape
    xs = Tensor(((np.arange(w) + 0.5) / w).reshape(1, 1, 1, w).astype(heat.dtype))
    ys = Tensor(((np.arange(h) + 0.5) / h).reshape(1, 1, h, 1).astype(heat.dtype))
    mass = ad.tsum(heat, axis=(-2, -1))
    ex = ad.div(ad.tsum(ad.mul(heat, xs), axis=(-2, -1)), mass)
    ey = ad.div(ad.tsum(ad.mul(heat, ys), axis=(-2, -1)), mass)
    return ex, ey


def snap_tensor(ex: Tensor, ey: Tensor, grid: g.GridSpec) -> tuple[Tensor, Tensor, np.ndarray]:
    """Straight-through snap of batched normalized coords onto the grid.

    Returns snapped (x, y) tensors and the integer (col, row) keypoints
    [B, K, 2].
    """
    b, k = ex.shape
    flat = np.stack([ex.data.reshape(-1), ey.data.reshape(-1)], axis=1)
    kps, centers = g.snap_to_grid(np.clip(flat, 0.0, 1.0), grid)
    cx = centers[:, 0].reshape(b, k).astype(ex.dtype)
    cy = centers[:, 1].reshape(b, k).astype(ey.dtype)
    sx = ad.straight_through_snap(ex, cx)
    sy = ad.straight_through_snap(ey, cy)
    return sx, sy, kps.reshape(b, k, 2)


def render_tensor(x: Tensor, y: Tensor, out_size: int, sigma_px: float) -> Tensor:
    """Gaussian blobs (peak 1) at normalized coords, rendered [B, K, S, S]."""
    b, k = x.shape
    cols = Tensor(np.arange(out_size, dtype=x.dtype).reshape(1, 1, 1, out_size))
    rows = Tensor(np.arange(out_size, dtype=x.dtype).reshape(1, 1, out_size, 1))
    cx = ad.reshape(ad.sub(ad.mul(x, float(out_size)), 0.5), (b, k, 1, 1))
    cy = ad.reshape(ad.sub(ad.mul(y, float(out_size)), 0.5), (b, k, 1, 1))
    d2 = ad.add(ad.square(ad.sub(cols, cx)), ad.square(ad.sub(rows, cy)))
    return ad.exp(ad.mul(d2, -1.0 / (2.0 * sigma_px * sigma_px)))


def condensation_tensor(heat: Tensor, worst_only: bool = False) -> Tensor:
    """Batch-mean condensation term of [B, K, h, w] heatmaps."""
    b, k = heat.shape[:2]
    gap = ad.sub(ad.max_spatial(heat), ad.tmean(heat, axis=(-2, -1)))  # [B, K]
    if worst_only:
        worst = ad.mul(ad.max_spatial(ad.reshape(ad.mul(gap, -1.0), (b, 1, k, 1))), -1.0)
        return ad.tmean(ad.mul(ad.reshape(worst, (b,)), -1.0))
    return ad.mul(ad.tmean(ad.tsum(gap, axis=1)), -1.0)


# ---------------------------------------------------------------------------
# model
# ---------------------------------------------------------------------------

class DetectorModel(nn.Module):
    """Detector trunk + appearance encoder + analogy-making decoder.

    ``use_grid=False`` skips the snap and renders blobs at the continuous
    expectations (the detection-ablation variant).
    """

    def __init__(self, grid: g.GridSpec, image_size=64, channels=1, sigma=1.5,
                 seed=0, base=16, use_grid=True, dtype=np.float32):
        if image_size % 4:
            raise ValueError("image size must be divisible by 4")
        ups = int(round(np.log2(grid.height * 4 / image_size)))
        if grid.height != grid.width or image_size // 4 * 2 ** ups != grid.height or not 0 <= ups <= 2:
            raise ValueError(
                f"heatmap trunk supports square grids of {image_size // 4}, "
                f"{image_size // 2} or {image_size}, got {grid.height}x{grid.width}"
            )
        self.grid = grid
        self.image_size = image_size
        self.channels = channels
        self.sigma = float(sigma)
        self.use_grid = use_grid
        self.dtype = dtype
        self._trunk_ups = ups
        rng = np.random.default_rng(seed)
        K, C = grid.num_keypoints, channels

        # heatmap trunk: downsample x4, re-expand to grid resolution
        self.td1 = nn.Conv2d(C, base, rng, dtype=dtype)
        self.td2 = nn.Conv2d(base, 2 * base, rng, stride=2, dtype=dtype)
        self.td3 = nn.Conv2d(2 * base, 4 * base, rng, stride=2, dtype=dtype)
        tu = []
        ch = 4 * base
        for _ in range(ups):
            tu.append(nn.Conv2d(ch, ch // 2, rng, dtype=dtype))
            ch //= 2
        self.tu = tu
        self.thead = nn.Conv2d(ch, K, rng, dtype=dtype)
        # start the sigmoid maps dim: low total mass makes the spatial
        # expectation peak-driven instead of centroid-driven from step one
        self.thead.b.data[:] = -4.0

        # appearance encoder: a quarter-resolution trunk plus a
        # full-resolution branch so the decoder can copy static content in
        # one hop instead of pushing everything through the 16x16 bottleneck
        self.e0 = nn.Conv2d(C, base // 2, rng, dtype=dtype)
        self.e1 = nn.Conv2d(C, 2 * base, rng, stride=2, dtype=dtype)
        self.e2 = nn.Conv2d(2 * base, 2 * base, rng, stride=2, dtype=dtype)

        # decoder: blob stacks down, fuse with appearance, mirror back up.
        # blobs enter at two scales: the canonical sigma for precision and a
        # 4x wider one so position gradients reach distant image content.
        self.gd1 = nn.Conv2d(4 * K, 2 * base, rng, stride=2, dtype=dtype)
        self.gd2 = nn.Conv2d(2 * base, 2 * base, rng, stride=2, dtype=dtype)
        self.fuse = nn.Conv2d(4 * base, 4 * base, rng, dtype=dtype)
        self.du1 = nn.Conv2d(4 * base, 2 * base, rng, dtype=dtype)
        self.du2 = nn.Conv2d(2 * base, base, rng, dtype=dtype)
        # the output conv also sees the raw blob stacks and the full-res
        # reference features: without those shortcuts the painting amplitude
        # has to climb through the whole upsampling path and desk-scale
        # budgets never get there. zero-init makes the initial
        # reconstruction an exactly clean frame.
        self.dout = nn.Conv2d(base + 4 * K + base // 2, C, rng, zero_init=True, dtype=dtype)

    @property
    def sigma_px(self) -> float:
        return self.sigma * self.image_size / self.grid.height

    def render_blob_scales(self, x, y) -> tuple[Tensor, Tensor]:
        """(narrow, wide) blob stacks for decoder conditioning."""
        narrow = render_tensor(x, y, self.image_size, self.sigma_px)
        wide = render_tensor(x, y, self.image_size, 4.0 * self.sigma_px)
        return narrow, wide

    # forward pieces -------------------------------------------------------
    def heatmaps(self, frames: Tensor) -> Tensor:
        h = ad.leaky_relu(self.td1(frames))
        h = ad.leaky_relu(self.td2(h))
        h = ad.leaky_relu(self.td3(h))
        for conv in self.tu:
            h = ad.leaky_relu(conv(ad.upsample2x(h)))
        return ad.sigmoid(self.thead(h))

    def keypoints(self, heat: Tensor, frozen_offsets=None):
        """Heatmaps -> (x, y) tensors used for rendering + integer keypoints.

        ``frozen_offsets`` replays a previously captured snap displacement as
        a fixed translation. That is the function whose gradient the
        straight-through estimator computes, and it is what finite-difference
        checks must probe (the raw snapped forward is locally constant).
        """
        ex, ey = expectation_tensor(heat)
        if not self.use_grid:
            flat = np.stack([ex.data.reshape(-1), ey.data.reshape(-1)], axis=1)
            kps, _ = g.snap_to_grid(np.clip(flat, 0.0, 1.0), self.grid)
            return ex, ey, kps.reshape(ex.shape + (2,)), None
        if frozen_offsets is not None:
            ox, oy = frozen_offsets
            sx = ad.add(ex, Tensor(ox))
            sy = ad.add(ey, Tensor(oy))
            flat = np.stack([sx.data.reshape(-1), sy.data.reshape(-1)], axis=1)
            kps, _ = g.snap_to_grid(np.clip(flat, 0.0, 1.0), self.grid)
            return sx, sy, kps.reshape(ex.shape + (2,)), (ox, oy)
        sx, sy, kps = snap_tensor(ex, ey, self.grid)
        offsets = (sx.data - ex.data, sy.data - ey.data)
        return sx, sy, kps, offsets

    def encode_appearance(self, frames: Tensor) -> tuple[Tensor, Tensor]:
        full = ad.leaky_relu(self.e0(frames))
        quarter = ad.leaky_relu(self.e2(ad.leaky_relu(self.e1(frames))))
        return quarter, full

    def decode(self, blobs_t: Tensor, feat_ref, blobs_ref: Tensor) -> Tensor:
        """Raw (unclipped) reconstruction; inference paths clip to [0, 1].

        A linear head keeps the sparse-foreground gradient alive; a sigmoid
        here saturates toward the all-background solution early in training.
        """
        feat_q, feat_f = feat_ref
        gfeat = ad.leaky_relu(self.gd1(ad.concat(list(blobs_t) + list(blobs_ref), axis=1)))
        gfeat = ad.leaky_relu(self.gd2(gfeat))
        h = ad.leaky_relu(self.fuse(ad.concat([gfeat, feat_q], axis=1)))
        h = ad.leaky_relu(self.du1(ad.upsample2x(h)))
        h = ad.leaky_relu(self.du2(ad.upsample2x(h)))
        return self.dout(ad.concat([h] + list(blobs_t) + list(blobs_ref) + [feat_f], axis=1))

    def forward_train(self, targets: np.ndarray, refs: np.ndarray,
                      frozen_offsets=None) -> dict:
        """Full differentiable pass on [B, C, S, S] target/reference frames.

        Pass a previous result's ``offsets`` as ``frozen_offsets`` to evaluate
        the translated (snap-frozen) forward used by gradient checks.
        """
        vt = Tensor(targets.astype(self.dtype))
        v1 = Tensor(refs.astype(self.dtype))
        ft, fr = (frozen_offsets or (None, None))
        heat_t = self.heatmaps(vt)
        xt, yt, kps_t, off_t = self.keypoints(heat_t, ft)
        heat_r = self.heatmaps(v1)
        xr, yr, kps_r, off_r = self.keypoints(heat_r, fr)
        blobs_t = self.render_blob_scales(xt, yt)
        blobs_r = self.render_blob_scales(xr, yr)
        recon = self.decode(blobs_t, self.encode_appearance(v1), blobs_r)
        return {
            "recon": recon, "heat": heat_t, "heat_ref": heat_r,
            "kps": kps_t, "kps_ref": kps_r, "xy": (xt, yt),
            "offsets": (off_t, off_r),
        }

    # inference ------------------------------------------------------------
    def detect(self, frames: np.ndarray):
        """Frames [T, C, S, S] -> (heatmaps, continuous kps, grid kps).

        Shapes: [T, K, H, W], [T, K, 2] normalized (x, y), [T, K, 2]
        integer (col, row).
        """
        frames = np.asarray(frames)
        if frames.ndim == 3:
            frames = frames[None]
        if frames.shape[1:] != (self.channels, self.image_size, self.image_size):
            raise ValueError(
                f"frame shape {frames.shape[1:]} does not match model "
                f"({self.channels}, {self.image_size}, {self.image_size})"
            )
        with ad.no_grad():
            heat = self.heatmaps(Tensor(frames.astype(self.dtype)))
            ex, ey = expectation_tensor(heat)
        cont = np.stack([ex.data, ey.data], axis=-1).astype(np.float64)
        flat = cont.reshape(-1, 2)
        kps, _ = g.snap_to_grid(np.clip(flat, 0.0, 1.0), self.grid)
        return heat.data, cont, kps.reshape(cont.shape)

    def synthesize(self, kps: np.ndarray, ref_frame: np.ndarray, ref_kps: np.ndarray) -> np.ndarray:
        """Decode one frame from integer grid keypoints and a reference frame."""
        return self.synthesize_batch(kps[None], ref_frame[None], ref_kps[None])[0]

    def synthesize_batch(self, kps, ref_frames, ref_kps) -> np.ndarray:
        kps = np.asarray(kps)
        ref_kps = np.asarray(ref_kps)
        for arr in (kps, ref_kps):
            if arr.shape[1:] != (self.grid.num_keypoints, 2):
                raise ValueError(f"keypoint array shape {arr.shape} does not match grid")
        centers = self.grid.centers_from_grid(kps)
        centers_r = self.grid.centers_from_grid(ref_kps)
        with ad.no_grad():
            bl_t = self.render_blob_scales(
                Tensor(centers[..., 0].astype(self.dtype)),
                Tensor(centers[..., 1].astype(self.dtype)),
            )
            bl_r = self.render_blob_scales(
                Tensor(centers_r[..., 0].astype(self.dtype)),
                Tensor(centers_r[..., 1].astype(self.dtype)),
            )
            feat = self.encode_appearance(Tensor(np.asarray(ref_frames).astype(self.dtype)))
            out = self.decode(bl_t, feat, bl_r)
        return np.clip(out.data, 0.0, 1.0).astype(np.float32)

    def synthesize_from_coords(self, coords_xy, ref_frames, ref_kps) -> np.ndarray:
        """Like synthesize_batch but with continuous normalized (x, y) coords."""
        coords_xy = np.asarray(coords_xy)
        centers_r = self.grid.centers_from_grid(np.asarray(ref_kps))
        with ad.no_grad():
            bl_t = self.render_blob_scales(
                Tensor(np.clip(coords_xy[..., 0], 0, 1).astype(self.dtype)),
                Tensor(np.clip(coords_xy[..., 1], 0, 1).astype(self.dtype)),
            )
            bl_r = self.render_blob_scales(
                Tensor(centers_r[..., 0].astype(self.dtype)),
                Tensor(centers_r[..., 1].astype(self.dtype)),
            )
            feat = self.encode_appearance(Tensor(np.asarray(ref_frames).astype(self.dtype)))
            out = self.decode(bl_t, feat, bl_r)
        return np.clip(out.data, 0.0, 1.0).astype(np.float32)

    def reconstruct_sequence(self, seq_frames: np.ndarray) -> np.ndarray:
        """Detect keypoints on every frame and re-synthesize the sequence."""
        _, _, kps = self.detect(seq_frames)
        refs = np.repeat(seq_frames[:1], len(seq_frames), axis=0)
        ref_kps = np.repeat(kps[:1], len(kps), axis=0)
        return self.synthesize_batch(kps, refs, ref_kps)


# ---------------------------------------------------------------------------
# losses
# ---------------------------------------------------------------------------

def reconstruction_loss(originals: np.ndarray, reconstructions: np.ndarray) -> float:
    """Sum over frames of the squared l2 frame difference."""
    a = np.asarray(originals, dtype=np.float64)
    b = np.asarray(reconstructions, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch: {a.shape} vs {b.shape}")
    return float(((a - b) ** 2).sum())


def detection_loss(originals, reconstructions, heatmaps_over_time, lam: float,
                   worst_only: bool = False) -> float:
    """reconstruction + lambda * condensation, both summed over timesteps."""
    if lam < 0:
        raise ValueError("lambda must be nonnegative")
    rec = reconstruction_loss(originals, reconstructions)
    con = sum(
        g.condensation_statistic(h, worst_only=worst_only) for h in np.asarray(heatmaps_over_time)
    )
    return rec + lam * float(con)


def detection_loss_tensor(recon: Tensor, targets: Tensor, heat: Tensor, lam: float,
                          worst_only: bool = False) -> tuple[Tensor, Tensor, Tensor]:
    """Differentiable batch objective: pixel-mean reconstruction + lambda
    times the per-frame condensation term.

    Normalizing the reconstruction per pixel (rather than the summed frame
    norm the reporting op uses) keeps lambda = 0.01 strong enough to actually
    condense the heatmaps; against a 64x64 pixel sum the condensation
    gradient is ~4000x weaker and the heatmap mass never collapses, which
    leaves every spatial expectation stuck near the global centroid.
    """
    rec = ad.tmean(ad.square(ad.sub(recon, targets)))
    con = condensation_tensor(heat, worst_only=worst_only)
    if not worst_only:
        # keypoint mean keeps lambda * con on the pixel-mean loss scale
        con = ad.mul(con, 1.0 / heat.shape[1])
    return ad.add(rec, ad.mul(con, lam)), rec, con


def heatmap_gap(heat: np.ndarray) -> float:
    """Mean per-channel (max - mean), the quantity condensation drives up."""
    flat = heat.reshape(heat.shape[0] * heat.shape[1], -1) if heat.ndim == 4 else heat.reshape(heat.shape[0], -1)
    return float((flat.max(axis=1) - flat.mean(axis=1)).mean())


# ---------------------------------------------------------------------------
# training
# ---------------------------------------------------------------------------

def train_detector(model: DetectorModel, frames: np.ndarray, steps: int,
                   batch_size=8, lr=1e-3, decay_rate=0.25, patience=10,
                   lam=0.01, worst_only=False, seed=0, val_frames=None,
                   eval_every=25, start_step=0, optimizer=None, on_step=None):
    """Adam training on [N, T, C, S, S] frames; reference frame is frame 0.

    Batches are a pure function of (seed, step), so runs resume exactly.
    Returns (optimizer, history); history rows are per-step telemetry dicts.
    """
    n, t = frames.shape[:2]
    params = model.named_parameters()
    opt = optimizer or nn.Adam(params, lr=lr)
    sched = nn.PlateauDecay(opt, decay_rate, patience)
    history = []
    for step in range(start_step, steps):
        rng = np.random.default_rng((seed, step))
        si = rng.integers(0, n, size=batch_size)
        ti = rng.integers(0, t, size=batch_size)
        targets = frames[si, ti]
        refs = frames[si, 0]
        out = model.forward_train(targets, refs)
        loss, rec, con = detection_loss_tensor(
            out["recon"], Tensor(targets.astype(model.dtype)), out["heat"], lam, worst_only
        )
        if not np.isfinite(loss.item()):
            raise TrainingDiverged(
                f"non-finite detector loss at step {step}",
                snapshot={"step": step, "rec": rec.item(), "con": con.item()},
            )
        opt.zero_grad()
        loss.backward()
        opt.step()
        row = {
            "step": step, "loss": loss.item(), "rec": rec.item(),
            "con": con.item(), "lr": opt.lr,
        }
        if val_frames is not None and (step + 1) % eval_every == 0:
            row["val"] = evaluate_reconstruction_loss(model, val_frames)
            sched.update(row["val"])
        history.append(row)
        if on_step is not None:
            on_step(row)
    return opt, history


def evaluate_reconstruction_loss(model: DetectorModel, frames: np.ndarray) -> float:
    """Mean per-frame reconstruction loss over a [N, T, C, S, S] array."""
    total = 0.0
    count = 0
    for i in range(frames.shape[0]):
        recon = model.reconstruct_sequence(frames[i])
        total += reconstruction_loss(frames[i], recon)
        count += frames.shape[1]
    return total / count
