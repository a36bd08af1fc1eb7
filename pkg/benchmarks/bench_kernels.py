"""Numba vs numpy kernel timings.

    python benchmarks/bench_kernels.py [--repeat N] [--json out.json]

Each kernel runs on the shapes it sees during training (batch 32, 40 mel
bands, 63 frames) or trigger application (0.5 s at 16 kHz).  Numba is
warmed up first so compilation time is excluded.  Also times one full
training epoch and one surrogate-trigger pass end to end.
"""

import argparse
import json
import time

import numpy as np

from vcbackdoor import kernels
from vcbackdoor._accel import NUMBA_AVAILABLE, use_backend
from vcbackdoor.corpus import synthesize_corpus
from vcbackdoor.dsp import stft
from vcbackdoor.train import ModelSpec, TrainConfig, train_classifier
from vcbackdoor.triggers import surrogate_identity_shift


def best_of(fn, repeat):
    times = []
    for _ in range(repeat):
        t0 = time.perf_counter()
        fn()
        times.append(time.perf_counter() - t0)
    return min(times), float(np.median(times))


def cases():
    rng = np.random.default_rng(0)
    x1 = rng.standard_normal((32, 1, 40, 63)).astype(np.float32)
    x2 = rng.standard_normal((32, 8, 20, 31)).astype(np.float32)
    cols2 = kernels.im2col(x2, 3)
    a1 = rng.standard_normal((32, 8, 40, 63)).astype(np.float32)
    p1, arg1 = kernels.maxpool2(a1)
    frames = rng.standard_normal((63, 512))
    spec = stft(rng.standard_normal(8000) * 0.1)
    return {
        "overlap_add": lambda: kernels.overlap_add(frames, 128, 512 + 62 * 128),
        "im2col (conv1)": lambda: kernels.im2col(x1, 3),
        "im2col (conv2)": lambda: kernels.im2col(x2, 3),
        "col2im (conv2)": lambda: kernels.col2im(cols2, 8, 3),
        "maxpool2": lambda: kernels.maxpool2(a1),
        "maxpool2_backward": lambda: kernels.maxpool2_backward(p1, arg1, 40, 63),
        "phase_vocoder_shift": lambda: kernels.phase_vocoder_shift(spec.magnitudes, spec.phases, 1.2, 128, 512),
    }


def end_to_end():
    ds = synthesize_corpus(n_classes=4, samples_per_class=64, n_speakers=8)
    spec = ModelSpec(num_classes=4)
    cfg = TrainConfig(epochs=1)
    train_classifier(ds, spec, cfg)  # fills the feature cache
    wav = ds.samples[0].waveform
    params = {"ratio": 1.2, "band_weights": [0.5, 0.5, 3.0, 3.0]}
    return {
        "train epoch (256 samples)": lambda: train_classifier(ds, spec, cfg),
        "surrogate trigger (0.5 s)": lambda: surrogate_identity_shift(wav, params),
    }


def main():
    ap = argparse.ArgumentParser(description=__doc__.split("\n")[0])
    ap.add_argument("--repeat", type=int, default=20)
    ap.add_argument("--json", help="also write results here")
    args = ap.parse_args()

    backends = ["numpy"] + (["numba"] if NUMBA_AVAILABLE else [])
    results = {}
    for group, make in (("kernels", cases), ("end-to-end", end_to_end)):
        bench = make()
        for name, fn in bench.items():
            row = {}
            for b in backends:
                with use_backend(b):
                    fn()  # warm-up / JIT compile
                    row[b] = best_of(fn, args.repeat if group == "kernels" else max(2, args.repeat // 10))[0]
            results[name] = row

    print(f"{'case':<28}" + "".join(f"{b + ' (ms)':>14}" for b in backends) + f"{'speedup':>10}")
    for name, row in results.items():
        line = f"{name:<28}" + "".join(f"{1e3 * row[b]:14.3f}" for b in backends)
        if "numba" in row:
            line += f"{row['numpy'] / row['numba']:10.2f}"
        print(line)
    if args.json:
        with open(args.json, "w") as fh:
            json.dump(results, fh, indent=1)


if __name__ == "__main__":
    main()
