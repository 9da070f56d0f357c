import json
from types import SimpleNamespace

import numpy as np
import pandas as pd
import pytest

from bench import (
    REPORT_COLUMNS,
    ThroughputRecord,
    bench_throughput,
    benchmark_maps,
    report,
    write_throughput,
)
from diffusion import NoiseSchedule


class StubModel:
    """Reports a fixed wall time per generate call"""

    def __init__(self, name, seconds, fail_at=None):
        self.name = name
        self.spec = SimpleNamespace(image_size=64, schedule=NoiseSchedule())
        self.seconds = seconds
        self.fail_at = fail_at
        self.calls = []

    def generate(self, labels, masks, cfg, seeds):
        self.calls.append((cfg.kind, cfg.n_steps, len(seeds)))
        if self.fail_at == cfg.n_steps:
            raise RuntimeError("out of memory")
        return SimpleNamespace(wall_time=self.seconds * cfg.n_steps, nfe=2 * cfg.n_steps - 1)


class TestThroughput:

    def test_relative_to_reference(self):
        edm = StubModel("edm", 0.01)
        ldm = StubModel("ldm", 0.0025)
        records = bench_throughput([edm, ldm], [3, 5], batch=4, repeats=2, seed=0)
        by_cell = {(r.model, r.nfe): r for r in records}
        assert by_cell[("edm", 3)].relative_throughput == pytest.approx(1.0)
        assert by_cell[("ldm", 3)].relative_throughput == pytest.approx(4.0)
        assert by_cell[("edm", 5)].n_steps == 3 and by_cell[("edm", 5)].achieved_nfe == 5
        assert by_cell[("edm", 3)].images_per_second == pytest.approx(4 / 0.02)
        # warmup plus repeats per cell
        assert len(edm.calls) == 2 * (1 + 2)

    def test_failed_cell_is_nan(self):
        edm = StubModel("edm", 0.01, fail_at=3)
        records = bench_throughput([edm], [3, 5], batch=2, repeats=1, seed=0)
        failed = [r for r in records if r.nfe == 5][0]
        assert np.isnan(failed.images_per_second)
        assert "out of memory" in failed.error
        assert np.isnan(failed.relative_throughput)

    def test_missing_reference_leaves_relative_empty(self):
        records = bench_throughput([StubModel("ldm", 0.01)], [3], batch=2, repeats=1, seed=0)
        assert np.isnan(records[0].relative_throughput)

    def test_invalid_arguments(self):
        with pytest.raises(ValueError):
            bench_throughput([], [3], batch=0, repeats=1, seed=0)

    def test_benchmark_maps(self):
        labels, masks = benchmark_maps(3)
        assert labels.shape == (3, 64, 64) and masks.shape == (3, 1, 64, 64)


class TestReport:

    def test_grid_with_holes_and_baseline(self, tmp_path):
        pd.DataFrame([
            {"model": "edm", "nfe": 5, "metric": "dice_2", "mean": 0.8, "std": 0.01},
            {"model": "ldm", "nfe": 5, "metric": "dice_2", "mean": 0.7, "std": 0.02},
        ]).to_csv(tmp_path / "utility_curve.csv", index=False)
        pd.DataFrame([
            {"model": "real", "nfe": 0, "metric": "dice_2", "mean": 0.9, "std": 0.01},
        ]).to_csv(tmp_path / "downstream_baseline.csv", index=False)
        write_throughput([
            ThroughputRecord("edm", 5, 8, 10.0, 0.5, 1.0, 5, 3, 1),
            ThroughputRecord("ldm", 10, 8, 40.0, 1.0, float("nan"), 9, 5, 1),
        ], tmp_path)
        with open(tmp_path / "manifest.json", "w") as f:
            json.dump({"models": ["edm", "ldm"], "nfe_settings": [5, 10]}, f)

        table = report(tmp_path)
        assert list(table.columns) == REPORT_COLUMNS
        assert not table.duplicated(subset=["model", "nfe", "metric"]).any()
        # 2 models x 2 NFE x 3 metrics, plus the real-data baseline
        assert len(table) == 2 * 2 * 3 + 1
        real = table[table["model"] == "real"].iloc[0]
        assert real["mean"] == 0.9
        hole = table[(table["model"] == "edm") & (table["nfe"] == 10) & (table["metric"] == "dice_2")].iloc[0]
        assert np.isnan(hole["mean"])
        speed = table[(table["model"] == "ldm") & (table["nfe"] == 10) & (table["metric"] == "images_per_second")]
        assert speed["mean"].iloc[0] == 40.0
        assert (tmp_path / "report.csv").exists()

    def test_empty_results_dir(self, tmp_path):
        table = report(tmp_path, output_path=tmp_path / "r.csv")
        assert table.empty and list(table.columns) == REPORT_COLUMNS
