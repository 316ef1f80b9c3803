"""Smoke test for the payslice extension module.

Build and install first:

    maturin build --release -m crates/python/Cargo.toml
    pip install target/wheels/payslice-*.whl
"""

import tempfile
from fractions import Fraction

import payslice


def check_numerics():
    assert payslice.quantile([10, 20, 30, 40], 0.5) == 25.0
    assert payslice.quantile_exact([1, 2], Fraction(1, 3)) == Fraction(4, 3)
    assert payslice.plan_second_wave(100, 50, 10) == 450
    assert payslice.round_value(87_650_00, 1_000_00) == 88_000_00

    day = 86_400
    days = [d * day for d in range(1, 9)]
    assert payslice.batching_delays(days, 5, 50) == 2 * day

    stats = payslice.box_stats([1, 2, 3, 4, 100])
    assert stats["hi"] == 7 and stats["outliers"] == [100]

    smoothed = payslice.smooth([110_000_00] * 6, [[95_000_00] * 40], tau=10)
    assert smoothed["summary"]["p50"] == 100_625_00
    assert smoothed["provenance"] == "smoothed"


def check_pipeline():
    with tempfile.TemporaryDirectory() as root:
        p = payslice.Pipeline.ephemeral(root, seed=1)
        for i in range(5):
            profile = {
                "member_id": f"member-{i}",
                "raw_title": "Data Engineer",
                "raw_region": "Greater Seattle Area",
                "country": "US",
                "years_experience": 7,
                "company_size_band": "medium",
            }
            p.submit(profile, {"currency": "USD", "base_salary": 130_000_00 + i * 2_000_00}, 1_700_000_000 + 60 * i)
        manifest = p.finish()
        assert manifest["conserved"]
        key = "title-country-region:title=data-engineer,country=US,region=greater-seattle-area"
        answer = p.query(key, "member-0", 1_700_500_000)
        print("p50", answer["insight"]["types"]["base_salary"]["summary"]["p50"])


if __name__ == "__main__":
    check_numerics()
    check_pipeline()
    print("ok")
