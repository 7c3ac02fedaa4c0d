"""Stochastic keypoint propagation over the grid.

The main propagator is a convolutional-recurrent VRNN on one-hot binary
location maps: a convLSTM carries the history, per-step Gaussian beliefs are
produced by prior/posterior heads on the hidden state, and a decoder turns
(z, h) into per-keypoint probability maps over grid cells. Prediction picks
the argmax cell, so every propagated keypoint is an exact grid location.

Two ablation propagators share the interface: the same VRNN reading/writing
Gaussian maps with l2 regression and expectation decoding, and a dense LSTM
regressing flattened coordinate vectors.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from gridkp import autodiff as ad
from gridkp import grid as g
from gridkp import nn
from gridkp.autodiff import Tensor
from gridkp.detector import TrainingDiverged, expectation_tensor

PROB_FLOOR = 1e-12
MIN_STD = 1e-5


@dataclass
class LatentBelief:
    """Diagonal Gaussian over the single-channel latent response map."""

    mean: np.ndarray
    std: np.ndarray

    def __post_init__(self):
        if self.mean.shape != self.std.shape:
            raise ValueError("mean/std shape mismatch")
        if np.any(self.std <= 0):
            raise ValueError("std must be strictly positive")


@dataclass
class RecurrentState:
    hidden: np.ndarray
    cell: np.ndarray

    def __post_init__(self):
        if self.hidden.shape != self.cell.shape:
            raise ValueError("hidden/cell shape mismatch")
        if not (np.all(np.isfinite(self.hidden)) and np.all(np.isfinite(self.cell))):
            raise ValueError("state contains non-finite entries")


class PredictorModel(nn.Module):
    """convLSTM VRNN over keypoint maps.

    ``map_mode='binary'`` consumes/classifies one-hot maps (the main model);
    ``map_mode='gaussian'`` consumes/regresses Gaussian maps (ablation).
    """

    def __init__(self, grid: g.GridSpec, seed=0, hidden=64, enc_ch=32, trunk=32,
                 map_mode="binary", sigma=1.5, dtype=np.float32):
        if grid.height % 4 or grid.width % 4:
            raise ValueError("grid dims must be divisible by 4 for the H/4 state")
        if map_mode not in ("binary", "gaussian"):
            raise ValueError(f"unknown map_mode {map_mode!r}")
        self.grid = grid
        self.hidden = hidden
        self.map_mode = map_mode
        self.sigma = sigma
        self.dtype = dtype
        rng = np.random.default_rng(seed)
        K = grid.num_keypoints
        self.enc1 = nn.Conv2d(K, 16, rng, stride=2, dtype=dtype)
        self.enc2 = nn.Conv2d(16, enc_ch, rng, stride=2, dtype=dtype)
        self.lstm = nn.ConvLSTMCell(enc_ch + 1, hidden, rng, dtype=dtype)
        self.ptrunk = nn.Conv2d(hidden, trunk, rng, dtype=dtype)
        self.pmean = nn.Conv2d(trunk, 1, rng, zero_init=True, dtype=dtype)
        self.pstd = nn.Conv2d(trunk, 1, rng, zero_init=True, dtype=dtype)
        self.qtrunk = nn.Conv2d(hidden + enc_ch, trunk, rng, dtype=dtype)
        self.qmean = nn.Conv2d(trunk, 1, rng, zero_init=True, dtype=dtype)
        self.qstd = nn.Conv2d(trunk, 1, rng, zero_init=True, dtype=dtype)
        self.dc = nn.Conv2d(hidden + 1, 64, rng, dtype=dtype)
        self.du1 = nn.Conv2d(64, 32, rng, dtype=dtype)
        # zero-init head: binary mode starts at the uniform categorical,
        # gaussian mode starts at exactly-zero maps
        self.du2 = nn.Conv2d(32, K, rng, zero_init=True, dtype=dtype)

    # tensor-side pieces ----------------------------------------------------
    def encode_maps_t(self, maps: Tensor) -> Tensor:
        return ad.leaky_relu(self.enc2(ad.leaky_relu(self.enc1(maps))))

    def prior_t(self, h: Tensor) -> tuple[Tensor, Tensor]:
        t = ad.leaky_relu(self.ptrunk(h))
        return self.pmean(t), ad.add(ad.softplus(self.pstd(t)), MIN_STD)

    def posterior_t(self, enc_next: Tensor, h: Tensor) -> tuple[Tensor, Tensor]:
        t = ad.leaky_relu(self.qtrunk(ad.concat([enc_next, h], axis=1)))
        return self.qmean(t), ad.add(ad.softplus(self.qstd(t)), MIN_STD)

    def decode_t(self, z: Tensor, h: Tensor) -> Tensor:
        t = ad.leaky_relu(self.dc(ad.concat([z, h], axis=1)))
        t = ad.leaky_relu(self.du1(ad.upsample2x(t)))
        logits = self.du2(ad.upsample2x(t))
        if self.map_mode == "binary":
            return ad.spatial_softmax(logits)
        # gaussian regression keeps a linear head; consumers clip as needed
        return logits

    def step_t(self, enc_maps: Tensor, z: Tensor, h: Tensor, c: Tensor):
        return self.lstm(ad.concat([enc_maps, z], axis=1), h, c)

    def zero_state_t(self, batch: int) -> tuple[Tensor, Tensor]:
        s = (batch, self.hidden, self.grid.height // 4, self.grid.width // 4)
        return Tensor(np.zeros(s, self.dtype)), Tensor(np.zeros(s, self.dtype))

    def zero_latent(self, batch: int) -> Tensor:
        return Tensor(np.zeros((batch, 1, self.grid.height // 4, self.grid.width // 4), self.dtype))

    def maps_from_tracks(self, tracks: np.ndarray) -> np.ndarray:
        """Integer (col, row) tracks [..., K, 2] -> model input maps."""
        shape = tracks.shape[:-2]
        flat = tracks.reshape((-1,) + tracks.shape[-2:])
        if self.map_mode == "binary":
            out = np.zeros((flat.shape[0], self.grid.num_keypoints,
                            self.grid.height, self.grid.width), self.dtype)
            for i, kps in enumerate(flat):
                out[i] = g.to_binary_maps(kps, self.grid)
        else:
            out = np.empty((flat.shape[0], self.grid.num_keypoints,
                            self.grid.height, self.grid.width), self.dtype)
            for i, kps in enumerate(flat):
                out[i] = g.render_gaussian_maps(kps, self.grid, self.sigma)
        return out.reshape(shape + out.shape[1:])


# ---------------------------------------------------------------------------
# spec-level operations (inference, numpy in/out)
# ---------------------------------------------------------------------------

def init_state(model: PredictorModel) -> RecurrentState:
    h, c = model.zero_state_t(1)
    return RecurrentState(h.data[0].copy(), c.data[0].copy())


def prior_belief(model: PredictorModel, state: RecurrentState) -> LatentBelief:
    with ad.no_grad():
        m, s = model.prior_t(Tensor(state.hidden[None]))
    return LatentBelief(m.data[0].copy(), s.data[0].copy())


def posterior_belief(model: PredictorModel, next_binary: np.ndarray,
                     state: RecurrentState) -> LatentBelief:
    with ad.no_grad():
        enc = model.encode_maps_t(Tensor(np.asarray(next_binary, model.dtype)[None]))
        m, s = model.posterior_t(enc, Tensor(state.hidden[None]))
    return LatentBelief(m.data[0].copy(), s.data[0].copy())


def sample_belief(belief: LatentBelief, seed) -> np.ndarray:
    eps = np.random.default_rng(seed).standard_normal(belief.mean.shape)
    return (belief.mean + belief.std * eps).astype(belief.mean.dtype)


def decode_keypoints(model: PredictorModel, z: np.ndarray, state: RecurrentState) -> np.ndarray:
    with ad.no_grad():
        probs = model.decode_t(
            Tensor(np.asarray(z, model.dtype)[None]), Tensor(state.hidden[None])
        )
    return probs.data[0].astype(np.float64)


def update_state(model: PredictorModel, binary: np.ndarray, z: np.ndarray,
                 state: RecurrentState) -> RecurrentState:
    with ad.no_grad():
        enc = model.encode_maps_t(Tensor(np.asarray(binary, model.dtype)[None]))
        h, c = model.step_t(
            enc, Tensor(np.asarray(z, model.dtype)[None]),
            Tensor(state.hidden[None]), Tensor(state.cell[None]),
        )
    return RecurrentState(h.data[0].copy(), c.data[0].copy())


def keypoint_prediction_loss(probs_seq, targets_seq) -> float:
    """Cross-entropy between probability maps and one-hot targets.

    Mean over keypoints (and any batch axis), summed over the time axis.
    """
    p = np.asarray(probs_seq, dtype=np.float64)
    t = np.asarray(targets_seq, dtype=np.float64)
    if p.shape != t.shape:
        raise ValueError(f"shape mismatch: {p.shape} vs {t.shape}")
    ce = -(t * np.log(np.maximum(p, PROB_FLOOR))).sum(axis=(-2, -1))  # [..., T?, K]
    return float(ce.mean(axis=-1).sum(axis=-1).mean())


def kl_loss(posterior: LatentBelief, prior: LatentBelief) -> float:
    """Closed-form diagonal Gaussian KL(q || p), summed over cells."""
    qm, qs = posterior.mean, posterior.std
    pm, ps = prior.mean, prior.std
    if qm.shape != pm.shape:
        raise ValueError("belief shapes differ")
    kl = np.log(ps / qs) + (qs ** 2 + (qm - pm) ** 2) / (2.0 * ps ** 2) - 0.5
    return float(kl.sum())


def kl_tensor(qm, qs, pm, ps) -> Tensor:
    """Batch-mean KL, summed over latent cells."""
    a = ad.sub(ad.log(ps), ad.log(qs))
    b = ad.div(ad.add(ad.square(qs), ad.square(ad.sub(qm, pm))), ad.mul(ad.square(ps), 2.0))
    per = ad.tsum(ad.sub(ad.add(a, b), 0.5), axis=(1, 2, 3))
    return ad.tmean(per)


def cross_entropy_tensor(probs: Tensor, targets: np.ndarray) -> Tensor:
    """Mean over batch and keypoints of -sum_ij B log P."""
    b, k = probs.shape[:2]
    logp = ad.log(ad.clip_min(probs, PROB_FLOOR))
    return ad.mul(ad.tsum(ad.mul(logp, Tensor(targets.astype(probs.dtype)))), -1.0 / (b * k))


# ---------------------------------------------------------------------------
# training
# ---------------------------------------------------------------------------

def elbo_losses(model: PredictorModel, maps: np.ndarray, beta: float, rng) -> tuple[Tensor, Tensor, Tensor]:
    """Teacher-forced pass over [B, T, K, H, W] maps.

    Posterior samples drive both the decoder and the recurrence; returns
    (total, keypoint term, KL term) with the total equal to kp + beta * kl.
    """
    bsz, t_len = maps.shape[:2]
    h, c = model.zero_state_t(bsz)
    h, c = model.step_t(model.encode_maps_t(Tensor(maps[:, 0])), model.zero_latent(bsz), h, c)
    kp_terms = []
    kl_terms = []
    for t in range(1, t_len):
        enc_next = model.encode_maps_t(Tensor(maps[:, t]))
        pm, ps = model.prior_t(h)
        qm, qs = model.posterior_t(enc_next, h)
        eps = Tensor(rng.standard_normal(qm.shape).astype(model.dtype))
        z = ad.add(qm, ad.mul(qs, eps))
        if model.map_mode == "binary":
            probs = model.decode_t(z, h)
            kp_terms.append(cross_entropy_tensor(probs, maps[:, t]))
        else:
            pred = model.decode_t(z, h)
            diff = ad.square(ad.sub(pred, Tensor(maps[:, t])))
            k = maps.shape[2]
            kp_terms.append(ad.mul(ad.tsum(diff), 1.0 / (bsz * k)))
        kl_terms.append(kl_tensor(qm, qs, pm, ps))
        h, c = model.step_t(enc_next, z, h, c)
    kp = kp_terms[0]
    for term in kp_terms[1:]:
        kp = ad.add(kp, term)
    kl = kl_terms[0]
    for term in kl_terms[1:]:
        kl = ad.add(kl, term)
    return ad.add(kp, ad.mul(kl, beta)), kp, kl


def train_predictor(model: PredictorModel, tracks: np.ndarray, steps: int,
                    batch_size=4, window=12, lr=1e-3, decay_rate=0.25,
                    patience=10, beta=0.1, seed=0, val_tracks=None,
                    eval_every=25, start_step=0, optimizer=None, on_step=None):
    """Train on integer grid tracks [N, T, K, 2] from a frozen detector."""
    n, t_len = tracks.shape[:2]
    window = min(window, t_len)
    params = model.named_parameters()
    opt = optimizer or nn.Adam(params, lr=lr)
    sched = nn.PlateauDecay(opt, decay_rate, patience)
    history = []
    for step in range(start_step, steps):
        rng = np.random.default_rng((seed, step))
        si = rng.integers(0, n, size=batch_size)
        ti = rng.integers(0, t_len - window + 1, size=batch_size)
        batch = np.stack([tracks[s, u : u + window] for s, u in zip(si, ti)])
        maps = model.maps_from_tracks(batch)
        loss, kp, kl = elbo_losses(model, maps, beta, rng)
        if not np.isfinite(loss.item()):
            raise TrainingDiverged(
                f"non-finite predictor loss at step {step}",
                snapshot={"step": step, "kp": kp.item(), "kl": kl.item()},
            )
        opt.zero_grad()
        loss.backward()
        opt.step()
        row = {"step": step, "loss": loss.item(), "kp": kp.item(), "kl": kl.item(), "lr": opt.lr}
        if val_tracks is not None and (step + 1) % eval_every == 0:
            vrng = np.random.default_rng((seed, 0x5EED, step))
            vmaps = model.maps_from_tracks(val_tracks[:, :window])
            with ad.no_grad():
                vloss, _, _ = elbo_losses(model, vmaps, beta, vrng)
            row["val"] = vloss.item()
            sched.update(row["val"])
        history.append(row)
        if on_step is not None:
            on_step(row)
    return opt, history


# ---------------------------------------------------------------------------
# rollout + video prediction
# ---------------------------------------------------------------------------

def rollout(model: PredictorModel, observed_maps: np.ndarray, horizon: int, seed):
    """Condition on observed maps, then feed back argmax predictions.

    The conditioning phase advances the state with prior samples; the
    prediction phase decodes probability maps, snaps them to one-hot maps via
    argmax, and reuses those as input. Returns (binary maps
    [horizon, K, H, W] uint8, integer keypoints [horizon, K, 2]).
    """
    observed_maps = np.asarray(observed_maps, dtype=model.dtype)
    if observed_maps.ndim != 4 or observed_maps.shape[0] < 1:
        raise ValueError("need at least one observed map stack")
    if horizon < 0:
        raise ValueError("horizon must be nonnegative")
    rng = np.random.default_rng(seed)
    k, hh, ww = observed_maps.shape[1:]
    with ad.no_grad():
        h, c = model.zero_state_t(1)
        z = model.zero_latent(1)
        h, c = model.step_t(model.encode_maps_t(Tensor(observed_maps[:1])), z, h, c)
        for t in range(1, observed_maps.shape[0]):
            pm, ps = model.prior_t(h)
            eps = rng.standard_normal(pm.shape).astype(model.dtype)
            z = ad.add(pm, ad.mul(ps, Tensor(eps)))
            h, c = model.step_t(model.encode_maps_t(Tensor(observed_maps[t : t + 1])), z, h, c)
        out_maps = np.zeros((horizon, k, hh, ww), dtype=np.uint8)
        out_kps = np.zeros((horizon, k, 2), dtype=np.int64)
        for i in range(horizon):
            pm, ps = model.prior_t(h)
            eps = rng.standard_normal(pm.shape).astype(model.dtype)
            z = ad.add(pm, ad.mul(ps, Tensor(eps)))
            probs = model.decode_t(z, h)
            if model.map_mode == "binary":
                kps, bmaps = g.from_probability_maps(probs.data[0].astype(np.float64), model.grid)
                feed = bmaps.astype(model.dtype)
            else:
                clipped = np.clip(probs.data, 0.0, 1.0) + 1e-8
                ex, ey = expectation_tensor(Tensor(clipped))
                coords = np.clip(np.stack([ex.data[0], ey.data[0]], axis=1), 0.0, 1.0)
                kps, _ = g.snap_to_grid(coords, model.grid)
                bmaps = g.to_binary_maps(kps, model.grid)
                feed = clipped[0]
            out_maps[i] = bmaps
            out_kps[i] = kps
            h, c = model.step_t(model.encode_maps_t(Tensor(feed[None])), z, h, c)
    return out_maps, out_kps


def rollout_coords(model: PredictorModel, observed_track: np.ndarray, horizon: int, seed):
    """Track-level rollout: integer observed (col, row) -> float cell coords.

    Binary mode emits exact cells; gaussian mode emits the continuous
    expectation of its regressed maps (and feeds the raw maps back).
    """
    observed_maps = model.maps_from_tracks(np.asarray(observed_track))
    if model.map_mode == "binary":
        _, kps = rollout(model, observed_maps, horizon, seed)
        return kps.astype(np.float64)
    rng = np.random.default_rng(seed)
    with ad.no_grad():
        h, c = model.zero_state_t(1)
        z = model.zero_latent(1)
        h, c = model.step_t(model.encode_maps_t(Tensor(observed_maps[:1])), z, h, c)
        for t in range(1, observed_maps.shape[0]):
            pm, ps = model.prior_t(h)
            z = ad.add(pm, ad.mul(ps, Tensor(rng.standard_normal(pm.shape).astype(model.dtype))))
            h, c = model.step_t(model.encode_maps_t(Tensor(observed_maps[t : t + 1])), z, h, c)
        out = np.zeros((horizon, model.grid.num_keypoints, 2))
        for i in range(horizon):
            pm, ps = model.prior_t(h)
            z = ad.add(pm, ad.mul(ps, Tensor(rng.standard_normal(pm.shape).astype(model.dtype))))
            pred = model.decode_t(z, h)
            clipped = Tensor(np.clip(pred.data, 0.0, 1.0) + 1e-8)
            ex, ey = expectation_tensor(clipped)
            out[i, :, 0] = ex.data[0] * model.grid.width - 0.5
            out[i, :, 1] = ey.data[0] * model.grid.height - 0.5
            h, c = model.step_t(model.encode_maps_t(clipped), z, h, c)
    return out


def predict_video(det_model, pred_model: PredictorModel, observed_frames: np.ndarray,
                  horizon: int, seed) -> np.ndarray:
    """Detect -> roll out -> synthesize ``horizon`` future frames."""
    if det_model.grid != pred_model.grid:
        raise ValueError("detector and predictor use different grids")
    observed_frames = np.asarray(observed_frames)
    if horizon == 0:
        return np.zeros((0,) + observed_frames.shape[1:], dtype=np.float32)
    _, _, kps = det_model.detect(observed_frames)
    observed_maps = pred_model.maps_from_tracks(kps)
    _, pred_kps = rollout(pred_model, observed_maps, horizon, seed)
    refs = np.repeat(observed_frames[:1], horizon, axis=0)
    ref_kps = np.repeat(kps[:1], horizon, axis=0)
    return det_model.synthesize_batch(pred_kps, refs, ref_kps)


# ---------------------------------------------------------------------------
# 1D-vector ablation propagator
# ---------------------------------------------------------------------------

class VectorPropagator(nn.Module):
    """Dense LSTM regressing flattened normalized keypoint coordinates."""

    def __init__(self, grid: g.GridSpec, seed=0, hidden=128, dtype=np.float32):
        self.grid = grid
        self.hidden = hidden
        self.dtype = dtype
        rng = np.random.default_rng(seed)
        k2 = 2 * grid.num_keypoints
        self.lstm = nn.LSTMCell(k2, hidden, rng, dtype=dtype)
        self.head = nn.Dense(hidden, k2, rng, dtype=dtype)

    def coords_from_tracks(self, tracks: np.ndarray) -> np.ndarray:
        """Integer (col, row) tracks [..., K, 2] -> flattened normalized vecs."""
        c = self.grid.centers_from_grid(np.asarray(tracks))
        return c.reshape(c.shape[:-2] + (-1,)).astype(self.dtype)

    def train_on_tracks(self, tracks: np.ndarray, steps: int, batch_size=16,
                        window=12, lr=1e-3, seed=0):
        n, t_len = tracks.shape[:2]
        window = min(window, t_len)
        vecs = self.coords_from_tracks(tracks)
        opt = nn.Adam(self.named_parameters(), lr=lr)
        history = []
        for step in range(steps):
            rng = np.random.default_rng((seed, step))
            si = rng.integers(0, n, size=batch_size)
            ti = rng.integers(0, t_len - window + 1, size=batch_size)
            batch = np.stack([vecs[s, u : u + window] for s, u in zip(si, ti)])
            h = Tensor(np.zeros((batch_size, self.hidden), self.dtype))
            c = Tensor(np.zeros((batch_size, self.hidden), self.dtype))
            terms = []
            for t in range(window - 1):
                h, c = self.lstm(Tensor(batch[:, t]), h, c)
                pred = self.head(h)
                diff = ad.square(ad.sub(pred, Tensor(batch[:, t + 1])))
                terms.append(ad.mul(ad.tsum(diff), 1.0 / batch_size))
            loss = terms[0]
            for term in terms[1:]:
                loss = ad.add(loss, term)
            if not np.isfinite(loss.item()):
                raise TrainingDiverged(f"non-finite vector-propagator loss at step {step}")
            opt.zero_grad()
            loss.backward()
            opt.step()
            history.append({"step": step, "loss": loss.item()})
        return history

    def rollout_coords(self, observed_track: np.ndarray, horizon: int, seed=None):
        """Float (col, row) cell coordinates for ``horizon`` future steps."""
        vecs = self.coords_from_tracks(np.asarray(observed_track))
        with ad.no_grad():
            h = Tensor(np.zeros((1, self.hidden), self.dtype))
            c = Tensor(np.zeros((1, self.hidden), self.dtype))
            pred = None
            for t in range(vecs.shape[0]):
                h, c = self.lstm(Tensor(vecs[t : t + 1]), h, c)
                pred = self.head(h)
            out = np.zeros((horizon, self.grid.num_keypoints, 2))
            for i in range(horizon):
                xy = np.clip(pred.data[0], 0.0, 1.0).reshape(-1, 2).astype(np.float64)
                out[i, :, 0] = xy[:, 0] * self.grid.width - 0.5
                out[i, :, 1] = xy[:, 1] * self.grid.height - 0.5
                if i + 1 < horizon:
                    h, c = self.lstm(Tensor(np.clip(pred.data, 0.0, 1.0)), h, c)
                    pred = self.head(h)
        return out
