"""
Bench - generation throughput versus NFE and plot-ready reports
"""

import json
import logging
import statistics
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np
import pandas as pd
from tqdm import tqdm

from ode_sampler import SolverConfig, nfe_to_steps
from phantom_data import PhantomSpec, generate_phantom, stack_maps
from tensor_ops import configure_threads

logger = logging.getLogger(__name__)

REPORT_COLUMNS = ["model", "nfe", "metric", "mean", "std"]
THROUGHPUT_FILE = "throughput.csv"
UTILITY_FILE = "utility_curve.csv"
BASELINE_FILE = "downstream_baseline.csv"
REPORT_FILE = "report.csv"


@dataclass
class ThroughputRecord:
    """Images per second of one model at one NFE setting"""

    model: str
    nfe: int
    batch_size: int
    images_per_second: float
    std_images_per_second: float = 0.0
    relative_throughput: float = float("nan")
    achieved_nfe: int = 0
    n_steps: int = 0
    threads: int = 0
    error: str = ""


def benchmark_maps(batch, image_size=64, seed=0):
    """A fixed batch of phantom maps for timing"""
    records = [generate_phantom(PhantomSpec(view=("A4C", "A2C")[i % 2], resolution=image_size, seed=seed + i))
               for i in range(batch)]
    return stack_maps(records)


def _time_cell(model, labels, masks, cfg, seeds, repeats):
    model.generate(labels, masks, cfg, seeds)  # warmup, discarded
    return [model.generate(labels, masks, cfg, seeds).wall_time for _ in range(repeats)]


def bench_throughput(models, nfe_settings, batch, repeats, seed, reference="edm", solver_kind="heun", threads=None):
    """
    Measure images/sec for every (model, NFE) cell

    Latent models include VAE decoding in the timed region. A cell that fails
    (e.g. out of memory) is reported with NaN throughput and its error.

    Returns:
        list of ThroughputRecords
    """
    if repeats < 1 or batch < 1:
        raise ValueError("batch and repeats must be >= 1")
    n_threads = configure_threads(threads)
    seeds = list(range(seed, seed + batch))
    records = []

    for model in models:
        labels, masks = benchmark_maps(batch, model.spec.image_size, seed)
        for nfe in tqdm(nfe_settings, desc=f"bench {model.name}", unit="nfe"):
            n_steps, achieved = nfe_to_steps(solver_kind, nfe)
            cfg = SolverConfig(solver_kind, n_steps, model.spec.schedule, seed)
            try:
                times = _time_cell(model, labels, masks, cfg, seeds, repeats)
                rates = [batch / t for t in times]
                records.append(ThroughputRecord(
                    model=model.name, nfe=nfe, batch_size=batch,
                    images_per_second=batch / statistics.median(times),
                    std_images_per_second=float(np.std(rates)),
                    achieved_nfe=achieved, n_steps=n_steps, threads=n_threads,
                ))
            except (RuntimeError, MemoryError) as e:
                logger.error(f"Benchmark cell {model.name}/NFE {nfe} failed: {e}")
                records.append(ThroughputRecord(
                    model=model.name, nfe=nfe, batch_size=batch, images_per_second=float("nan"),
                    achieved_nfe=achieved, n_steps=n_steps, threads=n_threads, error=str(e),
                ))

    reference_rates = {r.nfe: r.images_per_second for r in records if r.model == reference}
    if not reference_rates:
        logger.warning(f"Reference model '{reference}' not benchmarked; relative throughput left empty")
    for record in records:
        ref = reference_rates.get(record.nfe)
        if ref is not None and np.isfinite(ref) and ref > 0:
            record.relative_throughput = record.images_per_second / ref
    return records


def write_throughput(records, output_dir):
    path = Path(output_dir) / THROUGHPUT_FILE
    pd.DataFrame([asdict(r) for r in records]).to_csv(path, index=False)
    return path


def _throughput_rows(path):
    frame = pd.read_csv(path)
    rows = []
    for _, r in frame.iterrows():
        rows.append({"model": r["model"], "nfe": int(r["nfe"]), "metric": "images_per_second",
                     "mean": r["images_per_second"], "std": r["std_images_per_second"]})
        rows.append({"model": r["model"], "nfe": int(r["nfe"]), "metric": "relative_throughput",
                     "mean": r["relative_throughput"], "std": 0.0})
    return pd.DataFrame(rows, columns=REPORT_COLUMNS)


def report(results_dir, output_path=None):
    """
    Merge utility and throughput results into one model,nfe,metric,mean,std table

    When results_dir/manifest.json lists models and nfe_settings, every
    (model, nfe, metric) cell appears exactly once; missing cells are NaN.

    Returns:
        pandas DataFrame
    """
    results_dir = Path(results_dir)
    frames = []
    for name in (BASELINE_FILE, UTILITY_FILE):
        if (results_dir / name).exists():
            frames.append(pd.read_csv(results_dir / name)[REPORT_COLUMNS])
    if (results_dir / THROUGHPUT_FILE).exists():
        frames.append(_throughput_rows(results_dir / THROUGHPUT_FILE))
    if not frames:
        logger.warning(f"No results found under {results_dir}")
    table = pd.concat(frames, ignore_index=True) if frames else pd.DataFrame(columns=REPORT_COLUMNS)
    table = table.drop_duplicates(subset=["model", "nfe", "metric"], keep="last")

    manifest_path = results_dir / "manifest.json"
    if manifest_path.exists():
        with open(manifest_path, "r") as f:
            manifest = json.load(f)
        models, nfes = manifest.get("models", []), manifest.get("nfe_settings", [])
        metrics = sorted(table["metric"].unique()) if len(table) else []
        if models and nfes and metrics:
            grid = pd.MultiIndex.from_product([models, nfes, metrics], names=["model", "nfe", "metric"]).to_frame(index=False)
            table = grid.merge(table, on=["model", "nfe", "metric"], how="outer")
            holes = int(table["mean"].isna().sum())
            if holes:
                logger.warning(f"Report has {holes} empty cell(s)")

    table = table.sort_values(["model", "nfe", "metric"]).reset_index(drop=True)[REPORT_COLUMNS]
    output_path = Path(output_path) if output_path else results_dir / REPORT_FILE
    table.to_csv(output_path, index=False)
    logger.info(f"Report written to {output_path} ({len(table)} rows)")
    return table
