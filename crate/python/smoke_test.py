"""Smoke test for the `fmpc` extension module.

Build and install first, e.g. `maturin develop -m crates/py/Cargo.toml`.
"""

import json
import math
import tempfile

import fmpc


def main():
    car = fmpc.MassOnCar()
    x = [0.3, -0.2, 0.1, 0.5]
    assert abs(car.lie_g_h(x)) < 1e-9
    assert abs(car.lie_g_lf_h(x) - 1.0 / 9.0) < 1e-9
    assert car.output_and_derivative(x, -30.0) == car.output_and_derivative(x, 30.0)

    funnels = fmpc.FunnelPair()
    assert funnels.psi0(0.0) == (3.1, -6.0)
    assert abs(funnels.validate_g1(7.6) - 0.1) < 1e-12
    assert funnels.membership(0.0, 4.0, 0.0) is None

    assert fmpc.stage_cost("two_funnel", 0.0, 1.0, 0.0, 0.0) == 2.0
    assert fmpc.stage_cost("one_funnel", 0.0, 1.0, 0.0, 0.0) == 1.0
    assert abs(fmpc.stage_cost("two_funnel", 0.0, 0.0, 0.0, 0.0) - 2.1161450) < 1e-6
    assert math.isinf(fmpc.stage_cost("two_funnel", 0.0, 1.0 - 3.1, 0.0, 0.0))

    m0, m1 = fmpc.check_initial_feasibility([0.0] * 4)
    assert abs(m0 - 2.1) < 1e-12 and abs(m1 - 6.1) < 1e-12
    assert fmpc.check_initial_feasibility([5.0, 0.0, 0.0, 0.0]) is None

    cfg = fmpc.ExperimentConfig.paper_sec5()
    assert (cfg.horizon, cfg.shift, cfg.bound, cfg.lambda_u) == (0.6, 0.04, 30.0, 0.005)
    assert fmpc.ExperimentConfig.from_json(cfg.to_json()).to_json() == cfg.to_json()
    bad = fmpc.ExperimentConfig.paper_sec5()
    bad.shift = 0.0
    assert any("shift must be positive" in p for p in bad.validate())

    cfg.t_end = 1.0
    run = fmpc.run_scheme(cfg, "two_funnel")
    assert run["completed"] and run["steps"] == 25
    assert run["psi0_violations"] == 0 and run["psi1_violations"] == 0
    assert len(run["t"]) == len(run["e"]) == len(run["u"])

    with tempfile.TemporaryDirectory() as out:
        cfg.output_dir = out
        summaries = fmpc.run_experiment(cfg)
        assert [s["scheme"] for s in summaries] == ["two_funnel", "one_funnel"]
        assert fmpc.audit_run(out)["two_funnel"] == []
        with open(f"{out}/two_funnel.csv") as f:
            assert f.readline().strip() == fmpc.CSV_HEADER
        with open(f"{out}/summary.json") as f:
            assert len(json.load(f)["runs"]) == 2

    print("fmpc smoke test ok:", run["max_abs_u"], summaries[1]["max_abs_u"])


if __name__ == "__main__":
    main()
