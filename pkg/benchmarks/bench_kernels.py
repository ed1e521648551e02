"""Compare the compiled kernels with the numpy fallback.

    python3 benchmarks/bench_kernels.py [--size 16] [--repeat 5]

Prints one line per kernel and per full loss-and-gradient step with the
median wall time of each backend and the speed ratio.
"""
import argparse
import time

import numpy as np

from ttoreg import kernels
from ttoreg.loss import LossConfig
from ttoreg.network import ArchitectureSpec, conv3d, conv3d_backward, init_params, loss_and_gradients
from ttoreg.field import warp_array, warp_array_backward


def timed(fn, repeat):
    fn()
    times = []
    for _ in range(repeat):
        t = time.perf_counter()
        fn()
        times.append(time.perf_counter() - t)
    return float(np.median(times))


def cases(n):
    rng = np.random.default_rng(0)
    x = rng.standard_normal((n, n, n, 16)).astype(np.float32)
    w = rng.standard_normal((16, 16, 3, 3, 3)).astype(np.float32) * 0.1
    b = np.zeros(16, np.float32)
    out, xp = conv3d(x, w, b)
    dy = rng.standard_normal(out.shape).astype(np.float32)
    vol = rng.standard_normal((n, n, n, 1)).astype(np.float32)
    u = rng.uniform(-2, 2, (n, n, n, 3)).astype(np.float32)
    g = rng.standard_normal((n, n, n, 1)).astype(np.float32)
    m, f = rng.random((2, n, n, n)).astype(np.float32)
    yield "conv3d forward 16->16", lambda: conv3d(x, w, b)
    yield "conv3d backward 16->16", lambda: conv3d_backward(xp, w, dy)
    yield "warp forward", lambda: warp_array(vol, u)
    yield "warp backward", lambda: warp_array_backward(vol, u, g)
    cfg = LossConfig("ncc", 3)
    for arch in (ArchitectureSpec("plain-cnn"), ArchitectureSpec("encoder-decoder")):
        p = init_params(arch, 0)
        yield f"loss+grad {arch.label()}", lambda p=p: loss_and_gradients(p, m, f, cfg)


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--size", type=int, default=16, help="cube edge in voxels")
    ap.add_argument("--repeat", type=int, default=5)
    args = ap.parse_args(argv)
    backends = kernels.available_backends()
    if "compiled" not in backends:
        print("compiled kernels not built; only the fallback can be timed")
    print(f"{'case':<28}" + "".join(f"{b + ' ms':>14}" for b in backends) + f"{'speedup':>10}")
    for name, fn in cases(args.size):
        ms = []
        for b in backends:
            kernels.use_backend(b)
            ms.append(timed(fn, args.repeat) * 1000)
        ratio = f"{ms[0] / ms[1]:>9.1f}x" if len(ms) == 2 else ""
        print(f"{name:<28}" + "".join(f"{v:>14.2f}" for v in ms) + ratio)


if __name__ == "__main__":
    main()
