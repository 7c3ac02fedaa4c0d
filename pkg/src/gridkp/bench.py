"""Backend benchmark: numba kernels vs the pure-numpy fallback.

Times the convolution kernels on the shapes the models actually use, plus
one full training step of each model, for every available backend::

    python -m gridkp.bench [--steps N]
"""
from __future__ import annotations

import argparse
import time

import numpy as np

from gridkp import kernels

# (label, B, Ci, Co, H, W, stride) for the hot conv shapes
CONV_SHAPES = [
    ("detector trunk 64x64 s1", 8, 16, 16, 64, 64, 1),
    ("detector down 64->32 s2", 8, 16, 32, 64, 64, 2),
    ("detector up 32x32 s1", 8, 64, 32, 32, 32, 1),
    ("decoder head 64x64 s1", 8, 16, 12, 64, 64, 1),
    ("convLSTM gates 16x16 s1", 4, 97, 256, 16, 16, 1),
    ("predictor enc 32->16 s2", 4, 12, 16, 32, 32, 2),
]


def time_fn(fn, repeats) -> float:
    fn()  # warm (JIT compile on the numba path)
    t0 = time.perf_counter()
    for _ in range(repeats):
        fn()
    return (time.perf_counter() - t0) / repeats


def bench_convs(repeats: int) -> None:
    rng = np.random.default_rng(0)
    header = f"{'shape':28s} " + "".join(f"{b:>12s}" for b in kernels.available_backends())
    print(header)
    print("-" * len(header))
    for label, B, Ci, Co, H, W, stride in CONV_SHAPES:
        x = rng.standard_normal((B, Ci, H, W)).astype(np.float32)
        w = rng.standard_normal((Co, Ci, 3, 3)).astype(np.float32) * 0.1
        b = np.zeros(Co, np.float32)
        Ho, Wo = (H + 2 - 3) // stride + 1, (W + 2 - 3) // stride + 1
        dy = rng.standard_normal((B, Co, Ho, Wo)).astype(np.float32)
        row = f"{label:28s} "
        for backend in kernels.available_backends():
            kernels.set_backend(backend)

            def step():
                kernels.conv2d_forward(x, w, b, stride, 1)
                kernels.conv2d_grad_input(dy, w, stride, 1, H, W)
                kernels.conv2d_grad_weights(x, dy, stride, 1, 3, 3)

            ms = time_fn(step, repeats) * 1e3
            flops = 3 * 2 * B * Co * Ho * Wo * Ci * 9
            row += f"{ms:8.1f}ms" + f"({flops / ms / 1e6:4.0f}GF/s)".rjust(0)
        print(row)


def bench_training_steps(repeats: int) -> None:
    from gridkp import data as gdata
    from gridkp.detector import DetectorModel, train_detector
    from gridkp.grid import GridSpec
    from gridkp.predictor import PredictorModel, train_predictor

    scene = gdata.SyntheticSceneConfig(num_objects=2, image_size=64, object_radius=5, seed=0)
    frames, _ = gdata.generate_synthetic(scene, 4, 8)
    det = DetectorModel(GridSpec(64, 64, 12), image_size=64, seed=0)
    tracks = np.random.default_rng(0).integers(0, 32, size=(8, 16, 8, 2))
    pred = PredictorModel(GridSpec(32, 32, 8), seed=0)
    print()
    print(f"{'training step':28s} " + "".join(f"{b:>12s}" for b in kernels.available_backends()))
    for label, fn in [
        ("detector 64x64 K12 B4", lambda: train_detector(det, frames, 1, batch_size=4, seed=0)),
        ("predictor 32x32 K8 B2 T10", lambda: train_predictor(pred, tracks, 1, batch_size=2, window=10, seed=0)),
    ]:
        row = f"{label:28s} "
        for backend in kernels.available_backends():
            kernels.set_backend(backend)
            row += f"{time_fn(fn, repeats) * 1e3:10.0f}ms"
        print(row)


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(description=__doc__)
    parser.add_argument("--steps", type=int, default=5, help="timing repeats per case")
    args = parser.parse_args(argv)
    prev = kernels.get_backend()
    print(f"available backends: {', '.join(kernels.available_backends())} "
          f"(default: {prev})")
    try:
        bench_convs(args.steps)
        bench_training_steps(max(2, args.steps // 2))
    finally:
        kernels.set_backend(prev)
    return 0


if __name__ == "__main__":
    raise SystemExit(main())
