import logging
from pathlib import Path

import numpy as np
import requests
from tenacity import retry, stop_after_attempt, wait_exponential

from quantguard.errors import DatasetError
from quantguard.network import Dataset, load_dataset, save_dataset
from quantguard.settings import load_settings

logger = logging.getLogger("quantguard.datasets")

IRIS_CLASSES = ("Iris-setosa", "Iris-versicolor", "Iris-virginica")
KNOWN_DATASETS = ("iris", "seeds")


@retry(stop=stop_after_attempt(3), wait=wait_exponential(multiplier=1, min=4, max=10))
def _download_text(url: str, timeout: float) -> str:
    response = requests.get(url, timeout=timeout)
    response.raise_for_status()
    logger.debug("Downloaded dataset", extra={"event": "dataset_downloaded", "url": url})
    return response.text


def minmax_scale(features: np.ndarray) -> np.ndarray:
    features = np.asarray(features, dtype=np.float64)
    lo = features.min(axis=0)
    span = features.max(axis=0) - lo
    safe = np.where(span > 0, span, 1.0)
    return np.where(span > 0, (features - lo) / safe, 0.0)


def parse_iris(text: str) -> Dataset:
    rows, labels = [], []
    for line in text.splitlines():
        parts = [p.strip() for p in line.split(",")]
        if len(parts) != 5:
            continue
        if parts[4] not in IRIS_CLASSES:
            raise DatasetError(f"unknown iris class {parts[4]!r}")
        rows.append([float(p) for p in parts[:4]])
        labels.append(IRIS_CLASSES.index(parts[4]))
    if not rows:
        raise DatasetError("no iris rows found")
    return Dataset(minmax_scale(np.array(rows)), np.array(labels), len(IRIS_CLASSES))


def parse_seeds(text: str) -> Dataset:
    # some rows of the UCI file are separated by several tabs
    rows, labels = [], []
    for line in text.splitlines():
        parts = line.split()
        if len(parts) != 8:
            continue
        rows.append([float(p) for p in parts[:7]])
        labels.append(int(float(parts[7])) - 1)
    if not rows:
        raise DatasetError("no seeds rows found")
    return Dataset(minmax_scale(np.array(rows)), np.array(labels), 3)


def fetch_dataset(name: str, data_dir: Path | None = None, refresh: bool = False) -> Path:
    """Download a benchmark dataset once and cache it as a scaled CSV."""
    if name not in KNOWN_DATASETS:
        raise DatasetError(f"unknown dataset {name!r}; choose one of {', '.join(KNOWN_DATASETS)}")
    settings = load_settings()
    data_dir = Path(data_dir or settings.DATA_DIR)
    target = data_dir / f"{name}.csv"
    if target.exists() and not refresh:
        return target

    url = settings.IRIS_URL if name == "iris" else settings.SEEDS_URL
    text = _download_text(url, settings.DOWNLOAD_TIMEOUT)
    data = parse_iris(text) if name == "iris" else parse_seeds(text)
    save_dataset(data, target, header=True)
    logger.info("Dataset cached", extra={"event": "dataset_cached", "dataset": name,
                                         "path": str(target), "samples": len(data)})
    return target


def load_benchmark(name: str, data_dir: Path | None = None) -> Dataset:
    return load_dataset(fetch_dataset(name, data_dir), has_header=True, num_classes=3)


def split_dataset(data: Dataset, test_fraction: float, seed: int) -> tuple[Dataset, Dataset]:
    """Stratified split; each class keeps round(test_fraction * size) test samples."""
    if not 0.0 <= test_fraction < 1.0:
        raise ValueError("test_fraction must lie in [0, 1)")
    rng = np.random.default_rng(seed)
    train_idx, test_idx = [], []
    for cls in range(data.num_classes):
        members = np.flatnonzero(data.labels == cls)
        members = members[rng.permutation(len(members))]
        n_test = int(round(test_fraction * len(members)))
        test_idx.extend(members[:n_test])
        train_idx.extend(members[n_test:])
    return data.subset(sorted(train_idx)), data.subset(sorted(test_idx))


def make_blobs(
    n_per_class: int,
    num_classes: int,
    input_dim: int,
    spread: float = 0.05,
    seed: int = 0,
    min_separation: float = 0.3,
) -> Dataset:
    """Gaussian clusters inside [0, 1]^d whose centers sit at least ``min_separation`` apart."""
    rng = np.random.default_rng(seed)
    for _ in range(1000):
        centers = rng.uniform(0.2, 0.8, size=(num_classes, input_dim))
        gaps = np.linalg.norm(centers[:, None, :] - centers[None, :, :], axis=-1)
        if num_classes < 2 or gaps[np.triu_indices(num_classes, 1)].min() >= min_separation:
            break
    else:
        raise DatasetError(f"could not place {num_classes} centers {min_separation} apart in {input_dim} dims")
    features = np.concatenate(
        [centers[c] + rng.normal(0.0, spread, size=(n_per_class, input_dim)) for c in range(num_classes)]
    )
    labels = np.repeat(np.arange(num_classes), n_per_class)
    return Dataset(np.clip(features, 0.0, 1.0), labels, num_classes)
