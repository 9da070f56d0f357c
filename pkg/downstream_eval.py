"""
Downstream Eval - utility of synthetic data for segmentation and view classification
Dice, Hausdorff and accuracy metrics, subset bootstrap, a small U-Net
segmenter, a small CNN classifier and the model x NFE utility table.
"""

import logging
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
import pandas as pd
import torch
import torch.nn as nn
import torch.nn.functional as F
from scipy.ndimage import distance_transform_edt
from tqdm import tqdm

from checkpoint import save_module
from gamma_vae import TrainingDivergedError
from phantom_data import DatasetLoadError, load_split, stack_records
from sector_ops import N_LABELS

logger = logging.getLogger(__name__)

LV_ENDOCARDIUM = 2
DICE_LABELS = (1, 2, 3, 4)
VIEW_CLASSES = {"A2C": 0, "A4C": 1}
UTILITY_COLUMNS = ["model", "nfe", "metric", "mean", "std"]


class EmptyMaskError(ValueError):
    """Hausdorff distance requested for an empty mask"""


@dataclass
class MetricsReport:
    """Point estimate plus subset-bootstrap mean and std of one metric"""

    metric: str
    point: float
    mean: float
    std: float
    n_iterations: int
    fraction: float
    seed: int
    n_cases: int = 0
    excluded: int = 0


# ===== Metrics =====

def _binary_pair(pred, gt):
    pred = np.asarray(pred).astype(bool)
    gt = np.asarray(gt).astype(bool)
    if pred.shape != gt.shape:
        raise ValueError(f"Mask shapes differ: {pred.shape} vs {gt.shape}")
    return pred, gt


def dice(pred, gt):
    """2|X & Y| / (|X| + |Y|); two empty masks score 1"""
    pred, gt = _binary_pair(pred, gt)
    total = pred.sum() + gt.sum()
    if total == 0:
        return 1.0
    return float(2.0 * np.logical_and(pred, gt).sum() / total)


def _directed(source, target):
    # distance of every pixel to the nearest target pixel
    return float(distance_transform_edt(~target)[source].max())


def hausdorff(pred, gt):
    """Symmetric Hausdorff distance in pixels via exact Euclidean distance transforms"""
    pred, gt = _binary_pair(pred, gt)
    if not pred.any() or not gt.any():
        raise EmptyMaskError("Hausdorff distance is undefined for an empty mask")
    return max(_directed(pred, gt), _directed(gt, pred))


def hausdorff_brute(pred, gt):
    """O(|X| |Y|) reference Hausdorff distance"""
    pred, gt = _binary_pair(pred, gt)
    if not pred.any() or not gt.any():
        raise EmptyMaskError("Hausdorff distance is undefined for an empty mask")
    a = np.argwhere(pred).astype(np.int64)
    b = np.argwhere(gt).astype(np.int64)
    sq = ((a[:, None, :] - b[None, :, :]) ** 2).sum(-1)
    return float(max(np.sqrt(sq.min(axis=1).max()), np.sqrt(sq.min(axis=0).max())))


def accuracy(preds, gts):
    """(TP + TN) / all for binary labels"""
    preds = np.asarray(preds).reshape(-1)
    gts = np.asarray(gts).reshape(-1)
    if preds.size == 0:
        raise ValueError("accuracy needs at least one prediction")
    if preds.size != gts.size:
        raise ValueError(f"{preds.size} predictions for {gts.size} labels")
    if not np.isin(preds, (0, 1)).all() or not np.isin(gts, (0, 1)).all():
        raise ValueError("accuracy expects binary labels")
    return float((preds == gts).mean())


def bootstrap(values, fraction=0.8, iterations=1000, seed=0, replace=False, metric="metric", excluded=0):
    """
    Repeated subset means of per-case metric values

    Each iteration draws floor(fraction * n) cases (without replacement by
    default) and averages them.

    Returns:
        MetricsReport
    """
    values = np.asarray(values, dtype=np.float64).reshape(-1)
    if values.size < 2:
        raise ValueError(f"bootstrap needs at least 2 cases, got {values.size}")
    if not 0 < fraction <= 1:
        raise ValueError(f"fraction must lie in (0, 1], got {fraction}")
    if iterations < 1:
        raise ValueError(f"iterations must be >= 1, got {iterations}")

    rng = np.random.default_rng(seed)
    k = max(1, int(np.floor(fraction * values.size)))
    means = np.array([
        values[rng.choice(values.size, size=k, replace=replace)].mean() for _ in range(iterations)
    ])
    return MetricsReport(
        metric=metric,
        point=float(values.mean()),
        mean=float(means.mean()),
        std=float(means.std()),
        n_iterations=iterations,
        fraction=fraction,
        seed=seed,
        n_cases=int(values.size),
        excluded=excluded,
    )


# ===== Networks =====

def _conv_block(cin, cout):
    return nn.Sequential(
        nn.Conv2d(cin, cout, 3, padding=1), nn.GroupNorm(min(8, cout), cout), nn.ReLU(),
        nn.Conv2d(cout, cout, 3, padding=1), nn.GroupNorm(min(8, cout), cout), nn.ReLU(),
    )


class SmallUNet(nn.Module):
    """Three-level U-Net segmenter"""

    def __init__(self, in_channels=1, n_classes=N_LABELS, base=16, levels=3):
        super().__init__()
        widths = [base * 2 ** i for i in range(levels)]
        self.down = nn.ModuleList()
        previous = in_channels
        for width in widths:
            self.down.append(_conv_block(previous, width))
            previous = width
        self.up = nn.ModuleList()
        for width in reversed(widths[:-1]):
            self.up.append(_conv_block(previous + width, width))
            previous = width
        self.head = nn.Conv2d(previous, n_classes, 1)

    def forward(self, x):
        skips = []
        for i, block in enumerate(self.down):
            x = block(x)
            if i < len(self.down) - 1:
                skips.append(x)
                x = F.max_pool2d(x, 2)
        for block in self.up:
            x = F.interpolate(x, scale_factor=2, mode="nearest")
            x = block(torch.cat([x, skips.pop()], dim=1))
        return self.head(x)


class SmallCNN(nn.Module):
    """Four strided conv layers, global average pool, linear head"""

    def __init__(self, in_channels=1, n_classes=2, widths=(16, 32, 64, 64)):
        super().__init__()
        layers = []
        previous = in_channels
        for width in widths:
            layers += [nn.Conv2d(previous, width, 3, stride=2, padding=1), nn.ReLU()]
            previous = width
        self.features = nn.Sequential(*layers)
        self.head = nn.Linear(previous, n_classes)

    def forward(self, x):
        return self.head(self.features(x).mean(dim=(2, 3)))


# ===== Training =====

@dataclass
class DownstreamConfig:
    epochs: int = 15
    batch_size: int = 16
    learning_rate: float = 1e-4
    optimizer: str = "adam"
    seg_base_channels: int = 16
    bootstrap_iterations: int = 1000
    bootstrap_fraction: float = 0.8
    bootstrap_replace: bool = False
    shuffle_labels: bool = False

    def __post_init__(self):
        if self.optimizer.lower() != "adam":
            raise ValueError(f"Downstream models train with Adam, got {self.optimizer}")


@dataclass
class DownstreamResult:
    """Trained model, its optional checkpoint and the metric reports"""

    model: nn.Module
    reports: dict
    checkpoint: Path = None
    history: list = field(default_factory=list)


def _make_optimizer(model, cfg):
    return torch.optim.Adam(model.parameters(), lr=cfg.learning_rate)


def _fit(model, inputs, targets, cfg, seed, desc):
    optimizer = _make_optimizer(model, cfg)
    history = []
    for epoch in tqdm(range(1, cfg.epochs + 1), desc=desc, unit="epoch"):
        model.train()
        rng = np.random.default_rng([seed, epoch])
        order = torch.from_numpy(rng.permutation(inputs.shape[0]))
        total, batches = 0.0, 0
        for start in range(0, len(order), cfg.batch_size):
            idx = order[start:start + cfg.batch_size]
            loss = F.cross_entropy(model(inputs[idx]), targets[idx])
            if not torch.isfinite(loss):
                raise TrainingDivergedError(f"{desc} loss diverged at epoch {epoch}")
            optimizer.zero_grad()
            loss.backward()
            optimizer.step()
            total += loss.item()
            batches += 1
        history.append({"epoch": epoch, "loss": total / max(batches, 1)})
    return history


def _save(model, output_dir, name, cfg, seed, history):
    if output_dir is None:
        return None
    output_dir = Path(output_dir)
    output_dir.mkdir(parents=True, exist_ok=True)
    pd.DataFrame(history, columns=["epoch", "loss"]).to_csv(output_dir / f"{name}_training_log.csv", index=False)
    return save_module(output_dir / f"{name}.ckpt", model, {"kind": name, "config": asdict(cfg), "seed": seed})


@torch.no_grad()
def _predict(model, inputs, batch_size):
    model.eval()
    return torch.cat([model(inputs[i:i + batch_size]).argmax(1) for i in range(0, inputs.shape[0], batch_size)])


def segmentation_reports(pred_labels, gt_labels, cfg, seed):
    """Per-label Dice (labels 1-4) and LV-endocardium Hausdorff with bootstrap"""
    reports = {}
    pred_labels = np.asarray(pred_labels)
    gt_labels = np.asarray(gt_labels)
    for label in DICE_LABELS:
        values = [dice(p == label, g == label) for p, g in zip(pred_labels, gt_labels)]
        reports[f"dice_{label}"] = bootstrap(values, cfg.bootstrap_fraction, cfg.bootstrap_iterations, seed,
                                             cfg.bootstrap_replace, metric=f"dice_{label}")

    distances, excluded = [], 0
    for p, g in zip(pred_labels, gt_labels):
        try:
            distances.append(hausdorff(p == LV_ENDOCARDIUM, g == LV_ENDOCARDIUM))
        except EmptyMaskError:
            excluded += 1
    if excluded:
        logger.warning(f"Hausdorff: {excluded} case(s) with an empty LV endocardium excluded")
    if len(distances) >= 2:
        reports[f"hd_{LV_ENDOCARDIUM}"] = bootstrap(distances, cfg.bootstrap_fraction, cfg.bootstrap_iterations,
                                                    seed, cfg.bootstrap_replace, metric=f"hd_{LV_ENDOCARDIUM}",
                                                    excluded=excluded)
    return reports


def train_segmenter(train_dataset, test_dataset, cfg, seed, output_dir=None):
    """
    Train the small U-Net on image/map pairs and evaluate on the test split

    With cfg.shuffle_labels the training maps are permuted across images.

    Returns:
        DownstreamResult with dice_1..dice_4 and hd_2 reports
    """
    torch.manual_seed(seed)
    images, _, labels = stack_records(train_dataset)
    if cfg.shuffle_labels:
        labels = labels[torch.from_numpy(np.random.default_rng(seed).permutation(labels.shape[0]))]
    model = SmallUNet(base=cfg.seg_base_channels)
    history = _fit(model, images, labels, cfg, seed, "segmenter")

    test_images, _, test_labels = stack_records(test_dataset)
    predictions = _predict(model, test_images, cfg.batch_size)
    reports = segmentation_reports(predictions.numpy(), test_labels.numpy(), cfg, seed)
    logger.info("Segmenter: " + ", ".join(f"{k}={r.mean:.3f}" for k, r in reports.items()))
    return DownstreamResult(model, reports, _save(model, output_dir, "segmenter", cfg, seed, history), history)


def view_labels(records):
    return torch.tensor([VIEW_CLASSES[r.view] for r in records], dtype=torch.long)


def train_classifier(train_dataset, test_dataset, cfg, seed, output_dir=None):
    """
    Train the small CNN to tell A2C from A4C and evaluate on the test split

    With cfg.shuffle_labels the training views are replaced by random labels.

    Returns:
        DownstreamResult with an accuracy report
    """
    torch.manual_seed(seed)
    images, _, _ = stack_records(train_dataset)
    targets = view_labels(train_dataset)
    if cfg.shuffle_labels:
        targets = torch.from_numpy(np.random.default_rng(seed).integers(0, 2, size=targets.shape[0]))
    model = SmallCNN()
    history = _fit(model, images, targets, cfg, seed, "classifier")

    test_images, _, _ = stack_records(test_dataset)
    predictions = _predict(model, test_images, cfg.batch_size).numpy()
    truth = view_labels(test_dataset).numpy()
    correct = (predictions == truth).astype(np.float64)
    report = bootstrap(correct, cfg.bootstrap_fraction, cfg.bootstrap_iterations, seed,
                       cfg.bootstrap_replace, metric="accuracy")
    report.point = accuracy(predictions, truth)
    logger.info(f"Classifier: accuracy={report.point:.3f} (bootstrap {report.mean:.3f} +/- {report.std:.3f})")
    return DownstreamResult(model, {"accuracy": report}, _save(model, output_dir, "classifier", cfg, seed, history), history)


# ===== Utility table =====

SEG_METRICS = [f"dice_{label}" for label in DICE_LABELS] + [f"hd_{LV_ENDOCARDIUM}"]
CLS_METRICS = ["accuracy"]


def _cell_metrics(downstream):
    metrics = []
    if "seg" in downstream:
        metrics += SEG_METRICS
    if "cls" in downstream:
        metrics += CLS_METRICS
    return metrics


def utility_curve(generated_root, model_names, nfe_settings, test_dataset, cfg, seed=0,
                  downstream=("seg", "cls"), output_path=None):
    """
    Train downstream models per (model, NFE) cell and tabulate bootstrap metrics

    A cell whose generated dataset is missing or unreadable becomes a row
    with NaN mean/std rather than an error.

    Returns:
        pandas DataFrame with columns model, nfe, metric, mean, std
    """
    unknown = set(downstream) - {"seg", "cls"}
    if unknown:
        raise ValueError(f"Unknown downstream tasks: {sorted(unknown)}")
    rows = []
    for model_name in model_names:
        for nfe in nfe_settings:
            cell_dir = Path(generated_root) / model_name / f"nfe_{nfe}"
            try:
                records = load_split(cell_dir, "train")
            except (DatasetLoadError, OSError) as e:
                logger.warning(f"Utility cell {model_name}/NFE {nfe} missing: {e}")
                rows += [{"model": model_name, "nfe": nfe, "metric": m, "mean": np.nan, "std": np.nan}
                         for m in _cell_metrics(downstream)]
                continue

            reports = {}
            if "seg" in downstream:
                reports.update(train_segmenter(records, test_dataset, cfg, seed).reports)
            if "cls" in downstream:
                reports.update(train_classifier(records, test_dataset, cfg, seed).reports)
            for metric in _cell_metrics(downstream):
                report = reports.get(metric)
                rows.append({
                    "model": model_name, "nfe": nfe, "metric": metric,
                    "mean": report.mean if report else np.nan,
                    "std": report.std if report else np.nan,
                })

    table = pd.DataFrame(rows, columns=UTILITY_COLUMNS)
    if output_path is not None:
        table.to_csv(output_path, index=False)
        logger.info(f"Utility table written to {output_path}")
    return table
