"""Smoke test for the mgreconfig extension module.

Build and install first:  pip install --no-build-isolation -e crates/python
"""

import json
import pathlib
import tempfile

import mgreconfig

FIXTURES = pathlib.Path(__file__).resolve().parent.parent / "crates" / "core" / "fixtures"


def main():
    assert mgreconfig.min_sample_size(0.01, 0.05, 4) == 4846
    assert mgreconfig.min_sample_size_mr3(0.1, 0.1, 1, 2) == 418
    try:
        mgreconfig.min_sample_size(1.5, 0.05, 4)
    except ValueError:
        pass
    else:
        raise AssertionError("rho outside (0, 1) accepted")

    small = mgreconfig.Feeder.load(str(FIXTURES / "feeder_small.toml"))
    assert small.node_count == 4 and small.line_count == 4
    assert small.switchable_lines() == ["1-2", "3-4", "2-4"]
    again = mgreconfig.Feeder.from_toml(small.to_toml())
    assert again.to_toml() == small.to_toml()

    sol = small.solve(400.0, scenario="scenario_small.toml", rho=0.1, beta=0.1, seed=11)
    assert sol["status"] == "optimal", sol["status"]
    assert sol["open_switches"] == ["2-4"], sol["open_switches"]
    assert sol["line_current"]["2-4"] == 0.0

    pts = small.sweep([0.0, 400.0], scenario="scenario_small.toml", rho=0.1, beta=0.1, seed=11)
    assert len(pts) == 2 and all(p is not None for p in pts)
    assert len(pts[1]["open_switches"]) >= len(pts[0]["open_switches"])

    big = mgreconfig.Feeder.load(str(FIXTURES / "feeder37.toml"))
    assert (big.node_count, big.line_count, len(big.switchable_lines())) == (36, 43, 17)
    assert (big.dg_count, big.line_phase_count) == (7, 129)

    with tempfile.TemporaryDirectory() as tmp:
        code = mgreconfig.run_cli(
            ["solve", "--config", str(FIXTURES / "small_run.toml"), "--out", tmp]
        )
        assert code == 0, code
        doc = json.loads(pathlib.Path(tmp, "solution.json").read_text())
        assert doc["open_switches"] == ["2-4"]

    print("smoke test passed")


if __name__ == "__main__":
    main()
