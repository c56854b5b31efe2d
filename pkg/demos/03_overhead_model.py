"""Estimate end-to-end slowdown for the bundled workload scenarios.

The model is deliberately small: a scenario yields a switch rate, the cost
model turns each switch into cycles, and the baseline cpi converts the extra
cycles into a percentage. The interesting part is how strongly the answer
depends on switch density and on how often the switcher misses cache.

    python3 demos/03_overhead_model.py
"""

import importlib.resources

from capcomp.workload import (
    CostModel,
    estimate_overhead,
    format_report_table,
    parse_scenario,
    run_scenario,
)

SCENARIOS = [
    ("libsodium_hex.scn", "rare boundary crossings"),
    ("libsodium_all.scn", "mixed call profile"),
    ("libsodium_chacha_only.scn", "chatty inner loop"),
    ("sqlite_fs.scn", "storage engine calling its filesystem"),
    ("promote_pipeline.scn", "pipeline that promotes buffers"),
]


def fixture(name):
    return importlib.resources.files("capcomp").joinpath(
        "fixtures", name).read_text()


def main():
    cm = CostModel()
    print(f"cost model: hot={cm.hot} cold={cm.cold} "
          f"hot_fraction={cm.hot_fraction} -> "
          f"effective {cm.effective_switch():.2f} cycles per switch")
    print()

    print(f"{'scenario':<28} {'switch/1k':>10} {'overhead':>9}   profile")
    summaries = {}
    for name, blurb in SCENARIOS:
        summary = run_scenario(parse_scenario(fixture(name)))
        summaries[name] = summary
        est = estimate_overhead(summary, cm)
        print(f"{summary.name:<28} {est.switches_per_1k:>10.3f} "
              f"{est.percent:>8.3f}%   {blurb}")

    print()
    print("full report for the densest scenario:")
    dense = summaries["libsodium_chacha_only.scn"]
    print(format_report_table(dense, estimate_overhead(dense, cm), cm))

    # sensitivity: the same workload under different switcher cache behavior
    print()
    print("hot fraction sweep (libsodium_chacha_only):")
    for hf in (1.0, 0.999, 0.99, 0.9):
        est = estimate_overhead(dense, CostModel(hot_fraction=hf))
        print(f"  hot_fraction={hf:<6} -> {est.percent:7.3f}%")


if __name__ == "__main__":
    main()
