"""Exercise the nimbus extension end to end.

Build first:  pip install --no-build-isolation -e crates/python
"""

import json
import math
import sys

import nimbus


def check(cond, what):
    if not cond:
        print(f"FAIL {what}")
        sys.exit(1)
    print(f"ok   {what}")


def main():
    a = nimbus.BoundingBox(10, 20, 110, 220)
    b = a.translate(2, -2)
    check(a.width == 100 and a.height == 200, "box dimensions")
    check(math.isclose(a.mse(b), 4.0), "mse of a shifted box")
    check(nimbus.mean_box([a, b]) == a.translate(1, -1), "mean box")
    try:
        nimbus.BoundingBox(5, 0, 1, 1)
        check(False, "inverted box rejected")
    except ValueError:
        check(True, "inverted box rejected")

    boxes = [a] * 8 + [nimbus.BoundingBox(500, 500, 600, 600)]
    kept = nimbus.filter_outliers(boxes, 2.0)
    check(len(kept) == 8, "outlier dropped")
    mse, std = nimbus.quality_stats([a, b], a)
    check(math.isclose(mse, 2.0), "quality stats")

    profile = nimbus.CrowdProfile.paper2016()
    again = nimbus.CrowdProfile.from_toml(profile.to_toml())
    check(again.to_json() == profile.to_json(), "profile toml round trip")

    one = nimbus.run_experiment("one-shot", trials=20, seed=nimbus.DEFAULT_SEED)
    roll = nimbus.run_experiment("rollover", profile, trials=20)
    check(one.n_trials == 20 and len(one.latencies_s) == 20 - one.excluded, "trial count")
    check(one.latency_median < roll.latency_median, "rollover slower than one-shot")
    check(roll.mse_mean < one.mse_mean, "rollover more accurate than one-shot")
    rerun = nimbus.run_experiment("one-shot", trials=20)
    check(rerun.trials_csv() == one.trials_csv(), "same seed, same trials")

    table, csv = nimbus.compare([one, roll])
    check("Median latency" in table and csv.startswith("strategy,"), "comparison output")
    print(table)

    report = json.loads(roll.to_json())
    check(report["strategy"] == "rollover", "report json")


if __name__ == "__main__":
    main()
