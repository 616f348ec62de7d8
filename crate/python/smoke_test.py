#!/usr/bin/env python3
"""Smoke test for the pcnet_py extension module.

Build the extension and place it on the path first:

    cargo build -p pcnet-py --release
    cp target/release/libpcnet_py.so python/pcnet_py.so

then run `python3 python/smoke_test.py`.
"""

import math
import os
import sys
import tempfile

sys.path.insert(0, os.path.dirname(os.path.abspath(__file__)))

import pcnet_py


def approx(a, b, tol):
    assert abs(a - b) < tol, f"{a} !~ {b} (tol {tol})"


def main():
    # Geodesy: one degree of longitude on the equator.
    approx(pcnet_py.vincenty(0.0, 0.0, 0.0, 1.0), 111319.4908, 1e-3)

    # Score arithmetic on a known ladder.
    approx(pcnet_py.score([[float(i) for i in range(1, 101)]]), 72.775, 1e-12)

    # Simulate a clean trace and check the solvers recover the truth.
    clean = pcnet_py.simulate_trace(
        seed=5, num_epochs=10, noise_sigma_m=0.0, nlos_probability=0.0
    )
    assert clean.num_epochs == 10
    truth = {t: (lat, lng, h) for t, lat, lng, h in clean.ground_truth()}
    for fix in pcnet_py.solve(clean, method="wls"):
        assert fix.converged and fix.n_sats == 10
        lat, lng, h = fix.geodetic()
        t_lat, t_lng, t_h = truth[fix.time_ms]
        approx(pcnet_py.vincenty(lat, lng, t_lat, t_lng), 0.0, 1e-5)
        approx(h, t_h, 1e-5)

    # A noisy NLOS corpus: train briefly, persist, reload, and evaluate.
    traces = [
        pcnet_py.simulate_trace(seed=s, num_epochs=12, trace_id=f"t{s}")
        for s in range(6)
    ]
    model = pcnet_py.train(traces[:5], max_epochs=3, seed=1)
    assert model.param_count == 88099 and model.output_dim == 3

    with tempfile.TemporaryDirectory() as d:
        path = os.path.join(d, "model.pcdn")
        model.save(path)
        reloaded = pcnet_py.Model.load(path)
        assert reloaded.param_count == model.param_count

        held_out = traces[5]
        corrected = pcnet_py.predict(reloaded, held_out)
        assert len(corrected) == held_out.num_epochs

        rows = pcnet_py.evaluate(
            [held_out], methods=["wls", "rwls", "pcdeepnet"], model=reloaded
        )
    assert len(rows) == 3
    by_method = {r["method"]: r for r in rows}
    assert set(by_method) == {"wls", "rwls", "pcdeepnet"}
    for r in rows:
        assert r["p50_m"] <= r["p95_m"]
        assert math.isfinite(r["score_m"]) and r["score_m"] >= 0.0
    # The robust solver should not lose to plain WLS on an NLOS trace.
    assert by_method["rwls"]["score_m"] <= by_method["wls"]["score_m"] * 1.05

    print("pcnet_py smoke test passed")


if __name__ == "__main__":
    main()
