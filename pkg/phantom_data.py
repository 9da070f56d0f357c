"""
Phantom Data - synthetic sector-masked echo phantoms and dataset I/O
Generates 4-label semantic maps with Rayleigh speckle images, augments maps
geometrically, reads CAMUS-style folders and writes the on-disk PNG format.
"""

import json
import logging
import math
import re
from dataclasses import dataclass, field, replace
from pathlib import Path

import cv2
import numpy as np
import torch
from PIL import Image

from sector_ops import LABELS, SECTOR_LABEL, EmptySectorError, SectorMask, SemanticMap, sector_from_image

logger = logging.getLogger(__name__)

VIEWS = ("A2C", "A4C")
PHASES = ("ED", "ES")
SPLITS = ("train", "val", "test")

TISSUE_INTENSITY = {"tissue": 0.35, "myocardium": 0.7, "blood": 0.12}
RAYLEIGH_SCALE = math.sqrt(2.0 / math.pi)  # unit-mean Rayleigh

ROTATION_RANGE_DEG = 10.0
SCALE_RANGE = (0.9, 1.1)
TRANSLATION_FRACTION = 0.05
MAX_AUGMENT_RETRIES = 10

LABEL_PALETTE = [
    0, 0, 0,
    200, 60, 60,
    60, 200, 60,
    60, 60, 200,
    90, 90, 90,
]


class RejectedSpecError(ValueError):
    """Phantom geometry places a chamber outside the sector"""


class AugmentationError(RuntimeError):
    """No valid augmentation found within the retry budget"""


class DatasetLoadError(ValueError):
    """A dataset file could not be read or is inconsistent"""


@dataclass
class PhantomSpec:
    """Parameters of one synthetic echo phantom"""

    view: str = "A4C"
    phase: str = "ED"
    resolution: int = 64
    seed: int = 0
    patient_id: int = 1
    center_jitter: float = 0.03
    axis_jitter: tuple = (0.9, 1.1)
    rotation_jitter_deg: float = 5.0
    speckle_sigma: dict = field(default_factory=lambda: {
        "tissue": RAYLEIGH_SCALE, "myocardium": RAYLEIGH_SCALE, "blood": RAYLEIGH_SCALE,
    })
    sector_apex: tuple = (0.5, 0.04)
    sector_radius: float = 0.92
    sector_half_angle_deg: float = 36.0
    blur_sigma: float = 0.8

    def __post_init__(self):
        if self.view not in VIEWS:
            raise RejectedSpecError(f"Unknown view {self.view}; use one of {VIEWS}")
        if self.phase not in PHASES:
            raise RejectedSpecError(f"Unknown phase {self.phase}; use one of {PHASES}")
        if self.resolution < 16:
            raise RejectedSpecError(f"Resolution {self.resolution} too small for a phantom")


@dataclass
class DatasetRecord:
    """One image with its semantic map, sector and view/phase labels"""

    image: np.ndarray
    semantic_map: SemanticMap
    sector: SectorMask
    view: str
    phase: str
    patient_id: int = 0
    name: str = ""


@dataclass
class MapRecord:
    """A conditioning map without an image (generation input)"""

    semantic_map: SemanticMap
    view: str
    phase: str
    patient_id: int = 0
    variant: int = 0
    name: str = ""


@dataclass
class Corpus:
    """Train phantoms, augmented generation maps and the held-out test split"""

    train_records: list
    generation_maps: list
    test_records: list

    @property
    def size(self):
        return len(self.generation_maps)


@dataclass
class PhantomLayers:
    """Intermediate layers of a phantom render"""

    labels: np.ndarray
    blood: np.ndarray
    sector: np.ndarray
    pre_blur: np.ndarray
    image: np.ndarray


@dataclass
class AffineParams:
    """Geometric transform about the image centre"""

    angle_deg: float = 0.0
    scale: float = 1.0
    tx: float = 0.0
    ty: float = 0.0


# ===== Geometry =====

def _grid(resolution):
    coords = np.linspace(0.0, 1.0, resolution)
    u, v = np.meshgrid(coords, coords)
    return u, v


def _ellipse(u, v, center, axes, angle_deg):
    theta = np.deg2rad(angle_deg)
    du, dv = u - center[0], v - center[1]
    a = du * np.cos(theta) + dv * np.sin(theta)
    b = -du * np.sin(theta) + dv * np.cos(theta)
    return (a / axes[0]) ** 2 + (b / axes[1]) ** 2 <= 1.0


def _sector(u, v, spec):
    du = u - spec.sector_apex[0]
    dv = v - spec.sector_apex[1]
    radius = np.hypot(du, dv)
    angle = np.degrees(np.arctan2(np.abs(du), dv))
    return (radius <= spec.sector_radius) & (dv >= 0) & (angle <= spec.sector_half_angle_deg)


def _chamber_layout(view, phase, rng, spec):
    """Ellipses (center, axes, angle) per chamber in normalised coordinates"""
    def jitter_center(c):
        return (c[0] + rng.uniform(-spec.center_jitter, spec.center_jitter),
                c[1] + rng.uniform(-spec.center_jitter, spec.center_jitter))

    def jitter_axes(a, k=1.0):
        s = rng.uniform(*spec.axis_jitter)
        return (a[0] * s * k, a[1] * s * k)

    lv_scale = 1.0 if phase == "ED" else 0.82
    wall = 0.045 if phase == "ED" else 0.052
    rot = rng.uniform(-spec.rotation_jitter_deg, spec.rotation_jitter_deg)

    if view == "A4C":
        lv_c = jitter_center((0.41, 0.50))
        lv_a = jitter_axes((0.075, 0.15), lv_scale)
        layout = {
            # apex tilted toward the sector axis
            "lv": (lv_c, lv_a, 10.0 + rot),
            "la": (jitter_center((0.43, 0.80)), jitter_axes((0.075, 0.07)), rot),
            # right heart: blood pools without a label of their own
            "rv": (jitter_center((0.63, 0.50)), jitter_axes((0.06, 0.14)), -8.0 + rot),
            "ra": (jitter_center((0.62, 0.80)), jitter_axes((0.06, 0.06)), rot),
        }
    else:
        lv_c = jitter_center((0.5, 0.50))
        lv_a = jitter_axes((0.09, 0.16), lv_scale)
        layout = {
            "lv": (lv_c, lv_a, rot),
            "la": (jitter_center((0.5, 0.80)), jitter_axes((0.085, 0.07)), rot),
        }
    center, axes, angle = layout["lv"]
    layout["myo"] = (center, (axes[0] + wall, axes[1] + wall), angle)
    return layout


def render_phantom(spec):
    """Render all layers of a phantom; generate_phantom keeps only the record"""
    rng = np.random.default_rng(spec.seed)
    u, v = _grid(spec.resolution)
    sector = _sector(u, v, spec)
    layout = _chamber_layout(spec.view, spec.phase, rng, spec)

    masks = {name: _ellipse(u, v, *params) for name, params in layout.items()}
    for name, mask in masks.items():
        if (mask & ~sector).any():
            raise RejectedSpecError(f"Chamber '{name}' of {spec.view}/{spec.phase} leaves the sector")

    labels = np.zeros(sector.shape, dtype=np.uint8)
    labels[sector] = SECTOR_LABEL
    labels[masks["myo"]] = 1
    labels[masks["la"]] = 3
    labels[masks["lv"]] = 2

    blood = masks["lv"] | masks["la"]
    for extra in ("rv", "ra"):
        if extra in masks:
            blood |= masks[extra]

    pre_blur = speckle_field(labels, blood, spec, rng)
    blurred = cv2.GaussianBlur(pre_blur, (3, 3), spec.blur_sigma, borderType=cv2.BORDER_REFLECT)
    image = np.clip(blurred, 0.0, 1.0) * sector
    return PhantomLayers(labels=labels, blood=blood, sector=sector, pre_blur=pre_blur,
                         image=image.astype(np.float32))


def tissue_regions(labels, blood):
    """Boolean masks of the three reflectivity classes"""
    return {
        "blood": blood,
        "myocardium": (labels == 1) & ~blood,
        "tissue": (labels == SECTOR_LABEL) & ~blood,
    }


def speckle_field(labels, blood, spec, rng):
    """
    Tissue reflectivity times Rayleigh speckle, before the point-spread blur

    Each region's intensities are Rayleigh distributed with scale
    base_intensity * speckle_sigma.
    """
    field_ = np.zeros(labels.shape, dtype=np.float32)
    for region, mask in tissue_regions(labels, blood).items():
        scale = TISSUE_INTENSITY[region] * spec.speckle_sigma[region]
        field_[mask] = rng.rayleigh(scale=scale, size=int(mask.sum()))
    return field_


def generate_phantom(spec):
    """Generate one DatasetRecord from a PhantomSpec"""
    layers = render_phantom(spec)
    record = DatasetRecord(
        image=layers.image,
        semantic_map=SemanticMap(layers.labels),
        sector=SectorMask.from_array(layers.sector),
        view=spec.view,
        phase=spec.phase,
        patient_id=spec.patient_id,
        name=record_name(spec.patient_id, spec.view, spec.phase),
    )
    validate_record(record)
    return record


def record_name(patient_id, view, phase, variant=None):
    name = f"patient{patient_id:04d}_{view}_{phase}"
    return name if variant is None else f"{name}_aug{variant}"


def validate_record(record):
    """Check DatasetRecord invariants; raises DatasetLoadError on violation"""
    image = np.asarray(record.image)
    sector = record.sector.numpy().astype(bool)
    labels = record.semantic_map.labels
    if image.shape != labels.shape or sector.shape != labels.shape:
        raise DatasetLoadError(f"{record.name}: image/map/sector shapes disagree")
    if image.min() < 0 or image.max() > 1:
        raise DatasetLoadError(f"{record.name}: image values outside [0, 1]")
    if np.any(image[~sector] != 0):
        raise DatasetLoadError(f"{record.name}: non-zero pixels outside the sector")
    if not np.array_equal(sector, labels >= 1):
        raise DatasetLoadError(f"{record.name}: sector disagrees with the semantic map")
    if record.view not in VIEWS or record.phase not in PHASES:
        raise DatasetLoadError(f"{record.name}: bad view/phase {record.view}/{record.phase}")
    return True


# ===== Augmentation =====

def draw_affine(rng):
    """Draw geometric augmentation parameters from the configured ranges"""
    return AffineParams(
        angle_deg=float(rng.uniform(-ROTATION_RANGE_DEG, ROTATION_RANGE_DEG)),
        scale=float(rng.uniform(*SCALE_RANGE)),
        tx=float(rng.uniform(-TRANSLATION_FRACTION, TRANSLATION_FRACTION)),
        ty=float(rng.uniform(-TRANSLATION_FRACTION, TRANSLATION_FRACTION)),
    )


def _affine_matrix(shape, params):
    h, w = shape
    matrix = cv2.getRotationMatrix2D(((w - 1) / 2.0, (h - 1) / 2.0), params.angle_deg, params.scale)
    matrix[0, 2] += params.tx * w
    matrix[1, 2] += params.ty * h
    return matrix


def transform_map(semantic_map, params):
    """Warp a semantic map with nearest-neighbour resampling"""
    labels = semantic_map.labels
    warped = cv2.warpAffine(
        labels, _affine_matrix(labels.shape, params), (labels.shape[1], labels.shape[0]),
        flags=cv2.INTER_NEAREST, borderMode=cv2.BORDER_CONSTANT, borderValue=0,
    )
    return SemanticMap(warped)


def transform_record(record, params):
    """Warp image (bilinear) and map (nearest) together; sector follows the map"""
    semantic_map = transform_map(record.semantic_map, params)
    sector = semantic_map.labels >= 1
    image = cv2.warpAffine(
        np.asarray(record.image, dtype=np.float32), _affine_matrix(sector.shape, params),
        (sector.shape[1], sector.shape[0]),
        flags=cv2.INTER_LINEAR, borderMode=cv2.BORDER_CONSTANT, borderValue=0,
    )
    image = np.clip(image, 0.0, 1.0) * sector
    return replace(record, image=image.astype(np.float32), semantic_map=semantic_map,
                   sector=SectorMask.from_array(sector))


def colour_jitter(record, rng, brightness=(0.85, 1.15), gamma=(0.8, 1.25)):
    """In-sector brightness and gamma jitter; the background stays 0"""
    sector = record.sector.numpy().astype(bool)
    image = np.clip(np.asarray(record.image, dtype=np.float32), 0.0, 1.0)
    image = np.clip(image ** rng.uniform(*gamma) * rng.uniform(*brightness), 0.0, 1.0)
    return replace(record, image=(image * sector).astype(np.float32))


def augment_map(semantic_map, n_variants, seed):
    """
    Geometric-only variants of a semantic map

    Each variant gets its own seed derived from (seed, k). A draw that pushes
    every structure label out of frame is redrawn, up to 10 times.
    """
    if n_variants < 1:
        raise ValueError(f"n_variants must be >= 1, got {n_variants}")

    variants = []
    for k in range(n_variants):
        rng = np.random.default_rng([seed, k])
        for _ in range(MAX_AUGMENT_RETRIES):
            candidate = transform_map(semantic_map, draw_affine(rng))
            if np.isin(candidate.labels, (1, 2, 3)).any():
                variants.append(candidate)
                break
        else:
            raise AugmentationError(f"Variant {k}: no valid transform in {MAX_AUGMENT_RETRIES} draws")
    return variants


# ===== Corpus =====

def _record_seed(corpus_seed, index, attempt=0):
    return int(np.random.SeedSequence([corpus_seed, index, attempt]).generate_state(1)[0])


def _phantom_for(patient_id, view, phase, corpus_seed, index, resolution):
    for attempt in range(MAX_AUGMENT_RETRIES):
        spec = PhantomSpec(view=view, phase=phase, resolution=resolution,
                           seed=_record_seed(corpus_seed, index, attempt), patient_id=patient_id)
        try:
            return generate_phantom(spec)
        except RejectedSpecError as e:
            logger.warning(f"Rejected phantom spec (attempt {attempt + 1}): {e}")
    raise RejectedSpecError(f"No valid phantom for patient {patient_id} {view}/{phase}")


def build_training_corpus(n_patients, views=VIEWS, phases=PHASES, variants=5, seed=0,
                          resolution=64, n_test_patients=10):
    """
    Build the desk-scale corpus

    Returns:
        Corpus with real phantoms for the training patients, their augmented
        maps (patients x views x phases x variants) and phantoms for a disjoint
        set of held-out test patients.
    """
    if min(n_patients, len(views), len(phases), variants) < 1:
        raise ValueError("Corpus counts must all be >= 1")

    train_records, generation_maps, test_records = [], [], []
    index = 0
    for patient_id in range(1, n_patients + n_test_patients + 1):
        for view in views:
            for phase in phases:
                record = _phantom_for(patient_id, view, phase, seed, index, resolution)
                index += 1
                if patient_id > n_patients:
                    test_records.append(record)
                    continue
                train_records.append(record)
                for k, variant in enumerate(augment_map(record.semantic_map, variants, _record_seed(seed, index, 99))):
                    generation_maps.append(MapRecord(
                        semantic_map=variant, view=view, phase=phase, patient_id=patient_id,
                        variant=k, name=record_name(patient_id, view, phase, k),
                    ))

    logger.info(f"Corpus: {len(train_records)} train phantoms, {len(generation_maps)} generation maps, "
                f"{len(test_records)} test phantoms")
    return Corpus(train_records, generation_maps, test_records)


def corpus_from_records(records, variants=5, seed=0, n_test_patients=10):
    """
    Split loaded records (e.g. CAMUS) by patient and augment the training maps

    The highest patient ids form the held-out test split.
    """
    patients = sorted({r.patient_id for r in records})
    if len(patients) <= n_test_patients:
        raise ValueError(f"{len(patients)} patients cannot leave {n_test_patients} out for testing")
    test_ids = set(patients[len(patients) - n_test_patients:])
    train_records = [r for r in records if r.patient_id not in test_ids]
    test_records = [r for r in records if r.patient_id in test_ids]

    generation_maps = []
    for index, record in enumerate(train_records):
        for k, variant in enumerate(augment_map(record.semantic_map, variants, _record_seed(seed, index, 99))):
            generation_maps.append(MapRecord(
                semantic_map=variant, view=record.view, phase=record.phase, patient_id=record.patient_id,
                variant=k, name=record_name(record.patient_id, record.view, record.phase, k),
            ))
    return Corpus(train_records, generation_maps, test_records)


def stack_records(records):
    """
    Stack records into tensors

    Returns:
        (images [N,1,H,W], masks [N,1,H,W], labels [N,H,W] long)
    """
    dtype = torch.get_default_dtype()
    images = torch.from_numpy(np.stack([np.asarray(r.image, dtype=np.float64) for r in records]))
    masks = torch.stack([r.sector.mask.reshape(r.sector.mask.shape[-2:]) for r in records])
    labels = torch.from_numpy(np.stack([r.semantic_map.labels for r in records]).astype(np.int64))
    return images[:, None].to(dtype), masks[:, None].to(dtype), labels


def stack_maps(maps):
    """Label tensor [N,H,W] and sector masks [N,1,H,W] for map-only records"""
    labels = torch.from_numpy(np.stack([m.semantic_map.labels for m in maps]).astype(np.int64))
    return labels, (labels >= 1)[:, None].to(torch.get_default_dtype())


# ===== On-disk format =====

def _write_label_png(labels, path):
    image = Image.fromarray(labels.astype(np.uint8), mode="P")
    image.putpalette(LABEL_PALETTE + [0] * (768 - len(LABEL_PALETTE)))
    image.save(path)


def _read_label_png(path):
    with Image.open(path) as image:
        return np.array(image)


def _write_image_png(image, path):
    Image.fromarray(np.round(np.clip(image, 0, 1) * 255).astype(np.uint8), mode="L").save(path)


def _read_image_png(path):
    with Image.open(path) as image:
        return np.asarray(image.convert("L"), dtype=np.float32) / 255.0


def save_split(records, root, split, extra=None):
    """
    Write records under root/split/{images,labels}/NAME.png plus manifest.json

    MapRecords (no image) are written with a null image path. `extra` is
    merged into the manifest (model id, solver settings).
    """
    if split not in SPLITS:
        raise ValueError(f"Unknown split {split}; use one of {SPLITS}")
    split_dir = Path(root) / split
    (split_dir / "images").mkdir(parents=True, exist_ok=True)
    (split_dir / "labels").mkdir(parents=True, exist_ok=True)

    entries = []
    for record in records:
        label_rel = f"labels/{record.name}.png"
        _write_label_png(record.semantic_map.labels, split_dir / label_rel)
        image_rel = None
        if getattr(record, "image", None) is not None:
            image_rel = f"images/{record.name}.png"
            _write_image_png(record.image, split_dir / image_rel)
        entries.append({
            "name": record.name,
            "image": image_rel,
            "label": label_rel,
            "view": record.view,
            "phase": record.phase,
            "patient_id": int(record.patient_id),
            "variant": getattr(record, "variant", None),
        })

    manifest = {"split": split, **(extra or {}), "count": len(entries), "records": entries}
    with open(split_dir / "manifest.json", "w") as f:
        json.dump(manifest, f, indent=2)
    logger.info(f"Wrote {len(entries)} records to {split_dir}")
    return split_dir / "manifest.json"


def write_map_split(maps, root, split="train"):
    """Write map-only generation inputs (MapRecords) in the split format"""
    if any(getattr(m, "image", None) is not None for m in maps):
        raise ValueError("write_map_split expects MapRecords without images")
    return save_split(maps, root, split)


def load_split(root, split):
    """Read a split written by save_split; returns DatasetRecords and MapRecords"""
    split_dir = Path(root) / split
    manifest_path = split_dir / "manifest.json"
    if not manifest_path.exists():
        raise DatasetLoadError(f"Manifest not found: {manifest_path}")
    with open(manifest_path, "r") as f:
        manifest = json.load(f)

    records = []
    for entry in manifest["records"]:
        semantic_map = SemanticMap(_read_label_png(split_dir / entry["label"]))
        if entry["image"] is None:
            records.append(MapRecord(semantic_map, entry["view"], entry["phase"],
                                     entry["patient_id"], entry.get("variant") or 0, entry["name"]))
            continue
        sector = semantic_map.labels >= 1
        image = _read_image_png(split_dir / entry["image"]) * sector
        records.append(DatasetRecord(image.astype(np.float32), semantic_map, SectorMask.from_array(sector),
                                     entry["view"], entry["phase"], entry["patient_id"], entry["name"]))
    return records


# ===== CAMUS-style folders =====

CAMUS_PATTERN = re.compile(r"^(patient\d{4})_(2CH|4CH)_(ED|ES)\.png$")
CAMUS_VIEWS = {"2CH": "A2C", "4CH": "A4C"}
# released CAMUS ground truth: 1 = LV endocardium, 2 = LV myocardium, 3 = LA
CAMUS_LABEL_REMAP = {1: 2, 2: 1}
LABEL_ORDERS = ("tool", "camus")


@dataclass
class CamusDataset:
    """Records loaded from a CAMUS-layout folder plus per-file diagnostics"""

    records: list
    diagnostics: list


def _camus_record(image_path, label_path, expected_resolution, label_order):
    match = CAMUS_PATTERN.match(image_path.name)
    patient, view_code, phase = match.groups()
    try:
        image = _read_image_png(image_path)
        labels = _read_label_png(label_path)
    except (OSError, ValueError) as e:
        raise DatasetLoadError(f"{image_path.name}: unreadable ({e})") from e

    if image.shape != (expected_resolution, expected_resolution):
        raise DatasetLoadError(f"{image_path.name}: resolution {image.shape}, expected {expected_resolution}")
    if labels.shape != image.shape:
        raise DatasetLoadError(f"{label_path.name}: label shape {labels.shape} differs from image")
    unknown = np.setdiff1d(np.unique(labels), np.array(list(LABELS)))
    if unknown.size:
        raise DatasetLoadError(f"{label_path.name}: unknown labels {unknown.tolist()}")

    labels = labels.astype(np.uint8)
    if label_order == "camus":
        remapped = labels.copy()
        for source, target in CAMUS_LABEL_REMAP.items():
            remapped[labels == source] = target
        labels = remapped
    if not (labels == SECTOR_LABEL).any():
        try:
            recovered = sector_from_image(image).numpy().astype(bool)
        except EmptySectorError as e:
            raise DatasetLoadError(f"{image_path.name}: no sector label and {e}") from e
        sector = recovered | (labels >= 1)
        labels[sector & (labels == 0)] = SECTOR_LABEL
    sector = labels >= 1

    return DatasetRecord(
        image=(image * sector).astype(np.float32),
        semantic_map=SemanticMap(labels),
        sector=SectorMask.from_array(sector),
        view=CAMUS_VIEWS[view_code],
        phase=phase,
        patient_id=int(patient[len("patient"):]),
        name=record_name(int(patient[len("patient"):]), CAMUS_VIEWS[view_code], phase),
    )


def load_camus_layout(root_path, expected_resolution=256, label_order="tool"):
    """
    Load root/patientNNNN/patientNNNN_{2CH,4CH}_{ED,ES}[_gt].png pairs

    Problems with one file are recorded in `diagnostics` and loading carries
    on with the remaining files. Maps without a sector label get one from
    thresholding the image.

    Args:
        label_order: "tool" when the `_gt` files already use this tool's
            alphabet (1 = myocardium, 2 = endocardium); "camus" for the
            released CAMUS encoding, whose labels 1 and 2 are swapped on load
    """
    if label_order not in LABEL_ORDERS:
        raise ValueError(f"label_order must be one of {LABEL_ORDERS}, got '{label_order}'")
    root = Path(root_path)
    if not root.is_dir():
        raise DatasetLoadError(f"CAMUS root not found: {root}")

    records, diagnostics = [], []
    for patient_dir in sorted(p for p in root.iterdir() if p.is_dir()):
        for image_path in sorted(patient_dir.glob("*.png")):
            if not CAMUS_PATTERN.match(image_path.name):
                continue
            label_path = image_path.with_name(image_path.stem + "_gt.png")
            if not label_path.exists():
                diagnostics.append(f"{image_path.name}: missing semantic file {label_path.name}")
                logger.warning(diagnostics[-1])
                continue
            try:
                records.append(_camus_record(image_path, label_path, expected_resolution, label_order))
            except DatasetLoadError as e:
                diagnostics.append(str(e))
                logger.warning(str(e))

    logger.info(f"Loaded {len(records)} CAMUS records from {root} ({len(diagnostics)} problems)")
    return CamusDataset(records, diagnostics)
