"""Time the numba kernels against their numpy counterparts.

    python3 benchmarks/bench_kernels.py [--repeat 5] [--batch 8]

Shapes follow the first blocks of the two stage networks. Each pair is also
checked for identical output before timing.
"""
import argparse
import os
import subprocess
import sys
import time

import numpy as np

from leafcascade import kernels as K


def best_of(fn, repeat):
    fn()  # warm-up; triggers JIT compilation for the numba variants
    times = []
    for _ in range(repeat):
        t0 = time.perf_counter()
        fn()
        times.append(time.perf_counter() - t0)
    return min(times)


def cases(batch, rng):
    x1 = rng.standard_normal((batch, 64, 64, 64)).astype(np.float32)  # s_leafnet block 2 input
    x2 = rng.standard_normal((batch, 3, 196, 196)).astype(np.float32)  # w_leafnet input
    p = rng.standard_normal((batch, 64, 128, 128)).astype(np.float32)
    gp = rng.standard_normal((batch, 64, 64, 64)).astype(np.float32)
    cols = K._np_im2col3x3(x1)
    n, c, h, w = x1.shape
    return [
        ("im2col3x3 64ch 64x64", lambda: K._nb_im2col3x3(x1), lambda: K._np_im2col3x3(x1)),
        ("im2col3x3 3ch 196x196", lambda: K._nb_im2col3x3(x2), lambda: K._np_im2col3x3(x2)),
        ("col2im3x3 64ch 64x64", lambda: K._nb_col2im3x3(cols, n, c, h, w),
         lambda: K._np_col2im3x3(cols, n, c, h, w)),
        ("maxpool2 64ch 128x128", lambda: K._nb_maxpool2(p), lambda: K._np_maxpool2(p)),
        ("maxpool2 backward", lambda: K._nb_maxpool2_backward(p, gp), lambda: K._np_maxpool2_backward(p, gp)),
        ("avgpool2 64ch 128x128", lambda: K._nb_avgpool2(p), lambda: K._np_avgpool2(p)),
        ("avgpool2 backward", lambda: K._nb_avgpool2_backward(gp, 128, 128),
         lambda: K._np_avgpool2_backward(gp, 128, 128)),
    ]


FORWARD = """
import time, numpy as np
from leafcascade.netdef import build_s_leafnet, forward
from leafcascade.trainer import xavier_init
net = build_s_leafnet(44)
w = xavier_init(net)
x = np.random.default_rng(0).random((16, 1, 128, 128)).astype(np.float32)
forward(net, w, x)
t0 = time.perf_counter()
for _ in range(3):
    forward(net, w, x)
print((time.perf_counter() - t0) / 3)
"""


def forward_time(flag):
    env = dict(os.environ, LEAFCASCADE_NUMBA=flag)
    out = subprocess.run([sys.executable, "-c", FORWARD], env=env, capture_output=True, text=True, check=True)
    return float(out.stdout.strip())


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--repeat", type=int, default=5)
    ap.add_argument("--batch", type=int, default=8)
    ap.add_argument("--skip-forward", action="store_true", help="skip the whole-network comparison")
    args = ap.parse_args()

    rng = np.random.default_rng(0)
    print(f"{'kernel':<26}{'numba ms':>10}{'numpy ms':>10}{'speedup':>9}")
    for name, nb, npf in cases(args.batch, rng):
        a, b = nb(), npf()
        if not np.array_equal(a, b):
            raise SystemExit(f"{name}: numba and numpy outputs differ")
        t_nb, t_np = best_of(nb, args.repeat), best_of(npf, args.repeat)
        print(f"{name:<26}{t_nb * 1e3:>10.2f}{t_np * 1e3:>10.2f}{t_np / t_nb:>8.2f}x")

    if not args.skip_forward:
        t_nb, t_np = forward_time("1"), forward_time("0")
        print(f"{'s_leafnet forward, N=16':<26}{t_nb * 1e3:>10.1f}{t_np * 1e3:>10.1f}{t_np / t_nb:>8.2f}x")


if __name__ == "__main__":
    main()
