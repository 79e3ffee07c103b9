"""Time the compiled kernels against the numpy fallback.

    python3 benchmarks/bench_kernels.py [--repeat 5]
"""

import argparse
import timeit

import numpy as np

from ltelab import _backend
from ltelab.env import Vocab, generate_task, render_prompt
from ltelab.policy import PolicyShape, SampleConfig, backward_windows, forward_windows, init_params, sample_arrays


def cases(shape, n_windows, n_prompts):
    params = init_params(shape, 0)
    rng = np.random.default_rng(0)
    wins = rng.integers(0, shape.vocab, size=(n_windows, shape.window))
    prompts = [render_prompt(generate_task(i, 2, 10)) for i in range(n_prompts)]
    cfg = SampleConfig(temperature=1.0, max_len=32)

    def fwd(b):
        return lambda: forward_windows(params, wins, b)

    def bwd(b):
        hidden, lp = forward_windows(params, wins, b)
        dz = np.exp(lp) / len(wins)
        return lambda: backward_windows(params, wins, hidden, dz, b)

    def smp(b):
        return lambda: sample_arrays(params, prompts, cfg, np.random.default_rng(1), backend=b)

    return {"forward": fwd, "backward": bwd, "sample": smp}


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--repeat", type=int, default=5)
    ap.add_argument("--windows", type=int, default=4096)
    ap.add_argument("--prompts", type=int, default=256)
    args = ap.parse_args()
    backends = ["python"] + (["cython"] if _backend.compiled_kernels is not None else [])
    shape = PolicyShape(32, 8, Vocab(10).size, 128)
    table = cases(shape, args.windows, args.prompts)
    print(f"{'kernel':<10}" + "".join(f"{b:>12}" for b in backends) + ("     speedup" if len(backends) > 1 else ""))
    for name, make in table.items():
        times = [min(timeit.repeat(make(b), number=1, repeat=args.repeat)) for b in backends]
        row = f"{name:<10}" + "".join(f"{t * 1e3:>10.2f}ms" for t in times)
        if len(times) > 1:
            row += f"{times[0] / times[1]:>11.1f}x"
        print(row)
    if len(backends) == 1:
        print("compiled extension not built; only the fallback was timed")


if __name__ == "__main__":
    main()
