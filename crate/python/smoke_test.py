"""Smoke test for the `slipctl` extension module.

Build and install it first:

    pip install maturin
    maturin build --release -m crates/py/Cargo.toml -o dist
    pip install dist/slipctl-*.whl
"""

import json

import slipctl


def main():
    assert "fig6-brake-mu-step" in slipctl.fixture_ids()

    cfg = slipctl.SimConfig()
    cfg.horizon = 200
    gains = slipctl.synthesize_gains(cfg)
    assert gains.horizon == 200 and len(gains.k_r) == 400

    m = slipctl.Maneuver.fixture("fig6-brake-mu-step")
    m.duration = 5.0
    trace = slipctl.run_scenario(m, cfg, gains)
    assert len(trace) == round(5.0 / cfg.sample_time)
    assert trace.columns() == slipctl.TRACE_COLUMNS
    slip = trace.column("kappa_l")
    assert min(slip) < -0.03, min(slip)
    metrics = trace.metrics()
    print("fig6 (N = 200):", json.dumps({k: round(v, 4) if isinstance(v, float) else v for k, v in metrics.items()}))
    assert trace.to_csv().splitlines()[0] == ",".join(slipctl.TRACE_COLUMNS)

    again = slipctl.run_scenario(m, cfg, gains)
    assert again.to_csv() == trace.to_csv()

    m.controller = "pid"
    assert slipctl.run_scenario(m).metrics()["overshoot"] >= 0.0

    try:
        slipctl.Maneuver.fixture("fig6")
    except KeyError as e:
        assert "fig6-brake-mu-step" in str(e)
    else:
        raise AssertionError("unknown fixture accepted")

    s = slipctl.TuningSession(seed=1)
    for _ in range(5):
        a, b = s.pending_pair
        pa, pb = s.points[a], s.points[b]
        # prefer the shorter horizon
        s.record("a" if pa[2] <= pb[2] else "b")
    print("best after", s.iteration, "pairs:", s.best())
    restored = slipctl.TuningSession.from_json(s.to_json())
    assert restored.points == s.points and restored.pending_pair == s.pending_pair

    print("smoke test passed")


if __name__ == "__main__":
    main()
