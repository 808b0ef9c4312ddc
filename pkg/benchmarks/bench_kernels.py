"""Time the compiled kernels against the numpy fallback.

    python3 benchmarks/bench_kernels.py [--repeat N]

Each row is the best-of-N wall time per call; outputs of the two backends are
checked for agreement before timing.
"""
import argparse
import timeit

import numpy as np

from capolab import kernels, nn


def _mlp_args(batch, dims, rng):
    spec = nn.MlpSpec(dims[0], dims[1:-1], dims[-1])
    layers = nn.unflatten(spec, 0.3 * rng.standard_normal(spec.num_params))
    weights = [W for W, _ in layers]
    biases = [b for _, b in layers]
    x = rng.standard_normal((batch, dims[0]))
    return weights, biases, x


def _grad_buffers(weights):
    return [np.empty_like(W) for W in weights], [np.empty(W.shape[0]) for W in weights]


def _gae_args(T, E, rng):
    return (rng.standard_normal((T, E)), rng.standard_normal((T, E)), rng.standard_normal((T, E)),
            rng.random((T, E)) < 0.01, rng.random((T, E)) < 0.02, 0.99, 0.95)


def bench(repeat=5):
    rng = np.random.default_rng(0)
    py, cy = kernels.python_backend, kernels.compiled_backend
    rows = []
    for batch in (128, 1024, 4096):
        weights, biases, x = _mlp_args(batch, (4, 64, 64, 2), rng)
        acts_py, acts_cy = py.forward(weights, biases, x), None
        cases = {"forward": lambda b: b.forward(weights, biases, x)}
        g_out = rng.standard_normal((batch, 2))

        def backward(b):
            gw, gb = _grad_buffers(weights)
            return b.backward(weights, acts_py, g_out, gw, gb, True)

        cases["backward"] = backward
        if cy is not None:
            acts_cy = cy.forward(weights, biases, x)
            np.testing.assert_allclose(acts_cy[-1], acts_py[-1], rtol=1e-12, atol=1e-12)
        for name, fn in cases.items():
            rows.append((name, batch, _time(fn, py, repeat), _time(fn, cy, repeat) if cy else None))
    for T, E in ((512, 8), (2048, 16)):
        args = _gae_args(T, E, rng)
        if cy is not None:
            np.testing.assert_allclose(cy.gae(*args), py.gae(*args), rtol=0, atol=1e-12)
        fn = lambda b, args=args: b.gae(*args)  # noqa: E731
        rows.append(("gae", T * E, _time(fn, py, repeat), _time(fn, cy, repeat) if cy else None))
    return rows


def _time(fn, backend, repeat):
    timer = timeit.Timer(lambda: fn(backend))
    n, _ = timer.autorange()
    return min(timer.repeat(repeat, n)) / n


def main():
    parser = argparse.ArgumentParser()
    parser.add_argument("--repeat", type=int, default=5)
    args = parser.parse_args()
    print(f"{'kernel':<10}{'size':>8}{'python ms':>12}{'compiled ms':>14}{'speedup':>10}")
    for name, size, t_py, t_cy in bench(args.repeat):
        if t_cy is None:
            print(f"{name:<10}{size:>8}{1e3 * t_py:>12.4f}{'n/a':>14}{'':>10}")
        else:
            print(f"{name:<10}{size:>8}{1e3 * t_py:>12.4f}{1e3 * t_cy:>14.4f}{t_py / t_cy:>9.1f}x")


if __name__ == "__main__":
    main()
