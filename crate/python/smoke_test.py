"""Smoke test for the batchscale_py extension.

Build and install first:
    pip install maturin
    maturin build --release -m crates/py/Cargo.toml -o dist
    pip install dist/batchscale_py-*.whl
"""

import json
import math
import tempfile
from pathlib import Path

import batchscale_py as bs


def close(a, b, rel=1e-9):
    return abs(a - b) <= rel * abs(b)


def main():
    # constant-noise closed forms
    fb = bs.PowerLawFit(2.0, 10.0, 0.5)
    cfg = bs.SimConfig(0.5, bs.NoiseProfile.constant(4.0), fb)
    assert close(bs.steps_to_loss(cfg, 4.0, 3.0), 100.0 / (1 - 0.5 * 4.0 / 8.0), 1e-6)
    oracle = dict(bs.constant_noise_oracle(0.5, 4.0, 100.0))
    assert oracle["b_opt"] == 2.0 and oracle["b_min"] == 1.0

    try:
        bs.step_ratio(0.5, 4.0, 1.0)
    except bs.BatchscaleError as e:
        assert e.args[0] == "stall"
    else:
        raise AssertionError("expected a stall")

    # crossing under linear noise, none under constant noise
    fb = bs.PowerLawFit(2.0, 5.0, 0.3)
    lin = bs.SimConfig(0.5, bs.NoiseProfile.linear(2.0, 0.08), fb)
    a, b = bs.simulate_run(lin, 2.0, 1000), bs.simulate_run(lin, 6.0, 1000)
    loss, _, _ = bs.find_crossing(a, b)
    assert abs(loss - 3.4004) < 1e-3, loss
    const = bs.SimConfig(0.5, bs.NoiseProfile.constant(4.0), fb)
    assert bs.find_crossing(bs.simulate_run(const, 2.0, 600), bs.simulate_run(const, 6.0, 600)) is None

    # power law and E(S) fits
    recs = [(s, float(s), fb.loss_at(s)) for s in range(10, 5000, 10)]
    fit = bs.fit_power_law(bs.TrainingRun(1.0, recs), warmup_exclude=0)
    assert close(fit.alpha, 0.3, 1e-6)

    model = bs.FreeParams(100.0, 150.0, 200.0, 300.0, 0.04, 400.0).model()
    assert close(model.eval(125.0), 700.0) and close(model.a_1, 8.0)
    pts = [(s, model.eval(s)) for s in (100 * 1.02 * (12.0 / 1.02) ** (i / 31) for i in range(32))]
    es = bs.fit_es(pts, target_loss=3.0)
    assert es.model.constraint_residual() <= 1e-9
    assert close(es.metrics().b_opt, 2.0, 1e-2)
    json.loads(es.to_json())

    # scheduling and reference formulas
    s = bs.make_schedule(125e9, [0.0] * 4, intercept=2e6, slope=1e6 / 125e9)
    assert s.batches == [3e6, 4e6, 5e6, 6e6]
    s = bs.make_schedule(125e9, [0.0] * 4, intercept=2e6, slope=1e6 / 125e9, anchored=False)
    assert s.batches == [1e6, 2e6, 3e6, 4e6]
    assert bs.deepseek_bopt(1.0) == 0.2920
    assert bs.surge_lr(1.0, 4.0, 4.0) == 1.0 and bs.mccandlish_lr(1.0, 4.0, 4.0) == 0.5

    rep = bs.verify_equivalence([1.0, 2.0], [1.0, 2.0, 3.0], [[3.0, 2.5, 2.2], [3.1, 2.4, 2.0]])
    assert rep.passed

    # whole pipeline from a bundled config
    with tempfile.TemporaryDirectory() as d:
        bs.run_pipeline(bs.demo_config("witness"), d)
        assert (Path(d) / "report.json").exists()

    print("batchscale_py smoke test OK", bs.__version__)


if __name__ == "__main__":
    main()
