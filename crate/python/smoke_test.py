"""Quick end-to-end run of the Python bindings. Exits non-zero on failure."""

import tempfile

import numpy as np

import minima


def main():
    rng = np.random.default_rng(0)

    net = minima.Network(3, [4, 3], 1, activation="relu", seed=2)
    x = rng.standard_normal((12, 3))
    y = rng.standard_normal((12, 1))
    assert net.widths == [3, 4, 3, 1] and net.depth == 2
    out = np.array(net.forward(x))
    assert out.shape == (12, 1)
    assert abs(net.loss(x, y) - 0.5 * np.sum((out - y) ** 2)) < 1e-12

    report = minima.compute_j(net, x, y)
    scale = 1 + 0.5 * np.sum(y**2)
    assert abs(report["J_direct"] - report["J_decomposed"]) <= 1e-6 * scale, report

    # Deep linear net at a stationary point: the loss is the least-squares residual.
    lin = minima.Network(3, [3, 3], 1, activation="linear", seed=3)
    lin, rep = lin.descend(x, y, tol=1e-10)
    assert rep["grad_norm"] <= 1e-8, rep
    beta, *_ = np.linalg.lstsq(x, y, rcond=None)
    residual = 0.5 * np.sum((y - x @ beta) ** 2)
    assert abs(minima.compute_j(lin, x, y)["L"] - residual) <= 1e-6

    cert = minima.detect_structure(lin, x, t=0)
    assert cert is not None and cert["sets"][-1] == [0]
    bound = minima.loss_bound(lin, x, y, cert, [0, 2])
    assert np.isfinite(bound["bound"])
    assert minima.detect_structure(net, x, t=0) is None

    with tempfile.TemporaryDirectory() as d:
        lin.save(d)
        back = minima.Network.load(d)
        assert back.weights() == lin.weights()
    rebuilt = minima.Network.from_weights(lin.weights(), activation="linear")
    assert rebuilt.forward(x) == lin.forward(x)

    a = minima.gen_synthetic(samples=20, seed=4)
    assert a == minima.gen_synthetic(samples=20, seed=4)
    assert len(a[0]) == 20 and len(a[0][0]) == 6

    summary = minima.rank_experiment("over", m=8, d_x=4, d=4, trials=5, seed=1)
    assert summary["target_rank"] == 8 and 0.0 <= summary["full_rank_fraction"] <= 1.0, summary

    tails = minima.chi_square_tail_check([1.0] * 4, 1.0, trials=20000, seed=0)
    assert tails["upper"]["within_bound"] and tails["lower"]["within_bound"], tails

    checks = minima.lemma_check(cases=8, seed=0)
    assert [c["passed"] for c in checks] == [True] * 4, checks

    assert minima.derive_seed(0, [1, 2]) == minima.derive_seed(0, [1, 2])
    for bad in (lambda: minima.Network(3, [4], 1, activation="sigmoid"),
                lambda: net.forward([[1.0, 2.0]]),
                lambda: minima.compute_j(net, x, y, cutoff="median")):
        try:
            bad()
        except ValueError:
            pass
        else:
            raise AssertionError("expected ValueError")

    print("python smoke test: ok")


if __name__ == "__main__":
    main()
