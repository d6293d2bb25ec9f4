"""Time the compiled and numpy kernels on the workloads the solver actually runs.

    python3 benchmarks/bench_kernels.py [--repeat N]
"""
import argparse
import timeit

import numpy as np

from etnmpc.kernels import compiled_available, kernel_for
from etnmpc.model import chen_allgower

N_SEG, SPS, T = 40, 20, 4.0


def workloads(kern):
    rng = np.random.default_rng(0)
    x0 = np.array([2.693, 0.0])
    U = rng.uniform(-2, 2, size=(N_SEG, 1))
    h = T / (N_SEG * SPS)
    Q, R, P = 0.1 * np.eye(2), np.array([[0.05]]), np.array([[0.0814, 0.0314], [0.0314, 0.0814]])
    W = np.zeros((1000, 2))
    H = np.full(1000, 1e-3)
    Ur = np.repeat(U, 25, axis=0)
    return {
        "rk4_steps (1000 steps)": lambda: kern.rk4_steps(x0, Ur, W, H),
        "shoot (800 steps)": lambda: kern.shoot(x0, U, SPS, h, Q, R),
        "cost_terminal": lambda: kern.cost_terminal(x0, U, SPS, h, Q, R, P),
        "cost_terminal_grad (81 shoots)": lambda: kern.cost_terminal_grad(x0, U, SPS, h, Q, R,
                                                                           P, 1e-6),
    }


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--repeat", type=int, default=5)
    args = ap.parse_args()
    model = chen_allgower()
    backends = ["python"] + (["cython"] if compiled_available() else [])
    if len(backends) == 1:
        print("compiled extension not built; timing the numpy fallback only")
    times = {}
    for b in backends:
        for name, fn in workloads(kernel_for(model, b)).items():
            number = 3 if "grad" in name and b == "python" else 20
            best = min(timeit.repeat(fn, number=number, repeat=args.repeat)) / number
            times[(b, name)] = best
    print(f"{'workload':34s}" + "".join(f"{b:>14s}" for b in backends)
          + ("     speedup" if len(backends) == 2 else ""))
    for name in workloads(kernel_for(model, "python")):
        row = f"{name:34s}" + "".join(f"{times[(b, name)] * 1e3:11.3f} ms" for b in backends)
        if len(backends) == 2:
            row += f"{times[('python', name)] / times[('cython', name)]:11.1f}x"
        print(row)


if __name__ == "__main__":
    main()
