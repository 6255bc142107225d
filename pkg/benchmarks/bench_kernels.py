"""Time the compiled and pure-Python kernels on representative inputs.

    python benchmarks/bench_kernels.py [--repeat N]
"""

import argparse
import timeit

import numpy as np

from flgpr._kernels import backends


def cases(rng):
    z = rng.normal(size=(600, 300))
    pts = rng.uniform(0, 60, size=(1500, 2))
    X = rng.normal(size=(400, 20))
    y = np.where(X[:, 0] + rng.normal(size=400) > 0, 1.0, -1.0)
    Kmat = np.exp(-((X[:, None] - X[None]) ** 2).sum(-1) / 20.0)
    return {
        "rx_lambda 600x300 (40/80)": lambda m: m.rx_lambda(z, 40, 80),
        "dpmeans 1500 pts": lambda m: m.dpmeans(pts, 1.0, 100),
        "smo_solve n=400 rbf": lambda m: m.smo_solve(Kmat, y, 1.0, 1e-3, 100000),
    }


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--repeat", type=int, default=3)
    args = ap.parse_args()
    mods = backends()
    print(f"{'kernel':32s}" + "".join(f"{b:>12s}" for b in mods) + "     speedup")
    for name, fn in cases(np.random.default_rng(0)).items():
        t = {b: min(timeit.repeat(lambda: fn(m), number=1, repeat=args.repeat))
             for b, m in mods.items()}
        sp = t["python"] / t["cython"] if "cython" in t else float("nan")
        print(f"{name:32s}" + "".join(f"{t[b]:11.4f}s" for b in mods) + f"  {sp:9.1f}x")


if __name__ == "__main__":
    main()
