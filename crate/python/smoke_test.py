"""Smoke test for the `klb` extension module.

Build and install it first:

    pip install maturin
    maturin build --release -m crates/py/Cargo.toml -o target/wheels
    pip install --force-reinstall target/wheels/klb-*.whl
"""

import tempfile

import klb


def main():
    assert klb.quantize(0.12345) == 0.123
    w = klb.normalize({0: 0.3, 1: 0.3, 2: 0.3})
    assert abs(sum(w.values()) - 1.0) < 1e-12

    # Exact quadratic samples come back exactly.
    truth = lambda x: 40.0 + 200.0 * x + 3000.0 * x * x
    curve = klb.fit_curve([(x, truth(x), False) for x in (0.0, 0.02, 0.04, 0.06)], 40.0, 0.06)
    assert abs(curve.predict(0.05) - truth(0.05)) < 1e-6, curve

    options = [[(0.0, 1.0), (0.5, 2.0), (1.0, 9.0)], [(0.0, 1.0), (0.5, 3.0), (1.0, 9.0)]]
    assert klb.solve_exact(options) == klb.oracle(options) == ([0.5, 0.5], 5.0)

    sc = klb.Scenario("pool3-noisy")
    sc.duration = 120.0
    run = sc.run()
    assert not run.violations(), run.violations()
    assert abs(sum(run.weights.values()) - 1.0) < 1e-9
    again = sc.run()
    assert run.metrics_csv() == again.metrics_csv()
    print("pool3-noisy:", {k: round(v, 3) for k, v in run.summary["class_util"].items()})

    with tempfile.TemporaryDirectory() as d:
        run.write(d)
        report = klb.replay(d)
        assert report["ticks"] > 0 and not report["truncated"], report
        assert klb.verify(d) == []

    print("ilp:", klb.ilp_bench([10, 50]))
    print("ok")


if __name__ == "__main__":
    main()
