"""SGD-with-momentum training in the three modes, top-1 evaluation, and ablation sweeps.

Randomness is keyed by explicit seed tuples so a run is reproducible bit for
bit: parameter init uses (seed, 0), the epoch shuffle (seed, 1, epoch) and the
per-sample flip/donor/region draws (seed, 2, epoch, sample index).
"""

from __future__ import annotations

import csv
import logging
import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Callable, Dict, List, Optional, Sequence, Tuple, Union

import numpy as np

from .augment import GridSpec, build_masks, compose_mask, compose_replace, normalize, resize_bilinear, sample_region
from .autodiff import Graph, NonFiniteError
from .backbone import ModelParams, PARAM_NAMES, backbone_nodes, init_params, param_placeholders, predict
from .config import RunConfig, lr_at_epoch
from .data import Dataset, SynthSpec, channel_stats, generate_synthetic, load_image_folder, split_half
from .losses import objective_nodes

logger = logging.getLogger(__name__)

LOSS_KEYS = ("l_f", "l_replace", "l_mask", "l_cls", "l_cos", "total")
METRICS_COLUMNS = ("epoch",) + LOSS_KEYS + ("train_top1", "test_top1", "lr")
VARIANTS = ("f", "replace", "mask")


class CategoryMismatchError(ValueError):
    pass


class DivergenceError(FloatingPointError):
    pass


@dataclass
class MetricsRecord:
    epoch: int
    losses: Dict[str, float]
    train_top1: float
    test_top1: float
    lr: float

    def row(self) -> Dict[str, object]:
        return {"epoch": self.epoch, **{k: self.losses[k] for k in LOSS_KEYS},
                "train_top1": self.train_top1, "test_top1": self.test_top1, "lr": self.lr}


@dataclass
class Prepared:
    """Resized, normalized images ready for the network."""
    train: np.ndarray
    train_labels: np.ndarray
    test: np.ndarray
    test_labels: np.ndarray
    mean: np.ndarray
    std: np.ndarray


def datasets_for(config: RunConfig) -> Tuple[Dataset, Dataset]:
    """The (train, test) pair a config describes: its data folder or the default synthetic set."""
    full = load_image_folder(config.data) if config.data else generate_synthetic(SynthSpec())
    if config.split == "none":
        return full, full
    return split_half(full, config.split_seed)


def prepare(config: RunConfig, train_set: Dataset, test_set: Dataset) -> Prepared:
    """Resize both splits and normalize with channel statistics of the training split.

    Flipping is applied later per sample; it commutes with per-channel
    normalization, so the resize -> flip -> normalize order is preserved.
    """
    side = config.image_side

    def resize_all(ds):
        return np.stack([resize_bilinear(img, side, side) for img in ds.images])

    train = resize_all(train_set)
    test = resize_all(test_set)
    mean, std = channel_stats(train)
    if np.any(std <= 0):
        raise ValueError(f"training images have a constant channel (std {std}); cannot normalize")
    return Prepared(normalize(train, mean, std), train_set.labels, normalize(test, mean, std), test_set.labels, mean, std)


def evaluate_top1(params: ModelParams, images: Union[Dataset, np.ndarray], labels: Optional[np.ndarray] = None) -> float:
    """Fraction of samples whose argmax logit equals the label (original images only)."""
    if isinstance(images, Dataset):
        images, labels = images.images, images.labels
    if len(images) == 0:
        raise ValueError("cannot evaluate on an empty dataset")
    preds = predict(params, np.asarray(images))
    return float(np.mean(preds == np.asarray(labels)))


def build_step_graph(config: RunConfig, batch: int) -> Tuple[Graph, Dict[str, int], Dict[str, int]]:
    """Graph of one training step: parameter placeholders, image batches per variant, labels."""
    g = Graph()
    p = param_placeholders(g)
    labels = g.placeholder("labels")
    variants = VARIANTS if config.mode != "baseline" else ("f",)
    nets = {v: backbone_nodes(g, p, g.placeholder(f"x_{v}")) for v in variants}
    obj = objective_nodes(
        g,
        {v: nets[v]["logits"] for v in variants},
        {v: nets[v]["features"] for v in variants},
        labels,
        batch,
        mode=config.mode,
        cos_weight=config.cos_weight,
        eps=config.eps,
        third_pair=config.cos_third_pair,
    )
    for k in LOSS_KEYS:
        g.mark_output(k, obj[k])
    return g, p, obj


def sample_rng(seed: int, epoch: int, index: int) -> np.random.Generator:
    return np.random.default_rng([seed, 2, epoch, index])


def make_batch(
    config: RunConfig, prep: Prepared, indices: Sequence[int], epoch: int, donor_pools: Dict[int, np.ndarray]
) -> Dict[str, np.ndarray]:
    """Flip each original, then (in ce/cecs modes) build its replaced and masked versions."""
    side = config.image_side
    grid = GridSpec.for_image(side, side, config.n)
    xs = {v: [] for v in VARIANTS}
    for idx in indices:
        rng = sample_rng(config.seed, epoch, int(idx))
        f = prep.train[idx]
        if rng.random() < config.flip_prob:
            f = f[:, ::-1]
        xs["f"].append(f)
        if config.mode == "baseline":
            continue
        label = int(prep.train_labels[idx])
        pool = donor_pools[label]
        j = int(pool[rng.integers(pool.size)])
        s = prep.train[j]
        if rng.random() < config.flip_prob:
            s = s[:, ::-1]
        masks = build_masks(sample_region(config.n, config.q, rng), grid, f.shape[2])
        xs["replace"].append(compose_replace(f, s, masks))
        xs["mask"].append(compose_mask(f, masks))
    out = {f"x_{v}": np.stack(xs[v]) for v in VARIANTS if xs[v]}
    out["labels"] = prep.train_labels[np.asarray(indices)]
    return out


def train(
    config: RunConfig,
    train_set: Dataset,
    test_set: Dataset,
    params: Optional[ModelParams] = None,
    on_epoch: Optional[Callable[[MetricsRecord], None]] = None,
) -> Tuple[ModelParams, List[MetricsRecord]]:
    """Train from ``params`` (or a fresh seeded init) and return final params plus per-epoch metrics."""
    config.validate()
    if train_set.category_count != test_set.category_count:
        raise CategoryMismatchError(
            f"train has {train_set.category_count} categories, test has {test_set.category_count}"
        )
    k = train_set.category_count
    prep = prepare(config, train_set, test_set)
    if params is None:
        params = init_params(k, np.random.default_rng([config.seed, 0]), in_channels=prep.train.shape[3])
    else:
        params = params.copy()
    donor_pools = {}
    if config.mode != "baseline":
        for label in range(k):
            pool = np.flatnonzero(prep.train_labels != label)
            if pool.size == 0:
                raise ValueError("replacement needs training samples from at least two categories")
            donor_pools[label] = pool

    arrays = params.arrays()
    velocity = {name: np.zeros_like(v) for name, v in arrays.items()}
    graphs: Dict[int, tuple] = {}
    n_train = len(prep.train_labels)
    history: List[MetricsRecord] = []

    for epoch in range(config.epochs):
        lr = lr_at_epoch(config, epoch)
        order = np.random.default_rng([config.seed, 1, epoch]).permutation(n_train)
        sums = dict.fromkeys(LOSS_KEYS, 0.0)
        for start in range(0, n_train, config.batch_size):
            idx = order[start:start + config.batch_size]
            if len(idx) not in graphs:
                graphs[len(idx)] = build_step_graph(config, len(idx))
            g, p, obj = graphs[len(idx)]
            feed = make_batch(config, prep, idx, epoch, donor_pools)
            feed.update(arrays)
            try:
                out = g.evaluate(feed)
                grads = g.backward(obj["total"])
            except NonFiniteError as exc:
                raise DivergenceError(f"epoch {epoch}: training diverged ({exc})") from exc
            for name in PARAM_NAMES:
                velocity[name] = config.momentum * velocity[name] - lr * grads[p[name]]
                arrays[name] = arrays[name] + velocity[name]
            for key in LOSS_KEYS:
                sums[key] += float(out[key]) * len(idx)
        params = ModelParams(**arrays)
        record = MetricsRecord(
            epoch=epoch,
            losses={key: sums[key] / n_train for key in LOSS_KEYS},
            train_top1=evaluate_top1(params, prep.train, prep.train_labels),
            test_top1=evaluate_top1(params, prep.test, prep.test_labels),
            lr=lr,
        )
        history.append(record)
        logger.debug("epoch %d total %.4f train %.3f test %.3f", epoch, record.losses["total"],
                     record.train_top1, record.test_top1)
        if on_epoch is not None:
            on_epoch(record)
    return ModelParams(**arrays), history


def write_metrics_csv(path: Union[str, Path], history: Sequence[MetricsRecord]) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=METRICS_COLUMNS, lineterminator="\n")
        writer.writeheader()
        for rec in history:
            writer.writerow({k: repr(v) if isinstance(v, float) else v for k, v in rec.row().items()})


# -- ablations -------------------------------------------------------------------------


@dataclass
class AblationResult:
    study: str
    rows: List[Tuple[str, int, float]] = field(default_factory=list)  # (mode_or_q, seed, test_top1)

    def labels(self) -> List[str]:
        seen = []
        for label, _, _ in self.rows:
            if label not in seen:
                seen.append(label)
        return seen

    def per_seed(self, label: str) -> List[float]:
        return [acc for lab, _, acc in self.rows if lab == label]

    def median(self, label: str) -> float:
        return float(np.median(self.per_seed(label)))

    def write_csv(self, path: Union[str, Path]) -> None:
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh, lineterminator="\n")
            writer.writerow(["mode_or_q", "seed", "test_top1"])
            for label, seed, acc in self.rows:
                writer.writerow([label, seed, f"{acc:.6f}"])
            for label in self.labels():
                writer.writerow([label, "median", f"{self.median(label):.6f}"])


def ablation_configs(base: RunConfig, study: str) -> List[Tuple[str, RunConfig]]:
    """Module study: baseline / ce / cecs at base q. Patch study: cecs at q = 1, 2, 3."""
    if study == "module":
        return [(mode, replace(base, mode=mode)) for mode in ("baseline", "ce", "cecs")]
    if study == "patch":
        return [(f"q={q}", replace(base, mode="cecs", q=q).validate()) for q in (1, 2, 3)]
    raise ValueError(f"unknown ablation study {study!r}")


def _final_test_top1(args) -> float:
    config, train_set, test_set = args
    _, history = train(config, train_set, test_set)
    return history[-1].test_top1 if history else float("nan")


def worker_count() -> int:
    env = os.environ.get("CECS_THREADS")
    if env:
        return max(1, int(env))
    return os.cpu_count() or 1


def run_ablation(
    base: RunConfig,
    train_set: Dataset,
    test_set: Dataset,
    seeds: Sequence[int] = (0, 1, 2, 3, 4),
    study: str = "module",
    workers: Optional[int] = None,
    memo: Optional[Dict[str, float]] = None,
) -> AblationResult:
    """Train every (row, seed) pair and record the final-epoch test accuracy.

    ``memo`` maps a resolved config dump to its accuracy; pass the same dict to
    several studies (on the same data) so shared rows are trained once.
    """
    jobs = [(label, seed, replace(cfg, seed=seed)) for label, cfg in ablation_configs(base, study) for seed in seeds]
    memo = {} if memo is None else memo
    todo = list({cfg.dump(): cfg for _, _, cfg in jobs if cfg.dump() not in memo}.items())
    workers = worker_count() if workers is None else workers
    args = [(cfg, train_set, test_set) for _, cfg in todo]
    if workers > 1 and len(args) > 1:
        with ProcessPoolExecutor(max_workers=min(workers, len(args))) as pool:
            accs = list(pool.map(_final_test_top1, args))
    else:
        accs = [_final_test_top1(a) for a in args]
    memo.update(zip((key for key, _ in todo), accs))
    result = AblationResult(study)
    for label, seed, cfg in jobs:
        result.rows.append((label, seed, memo[cfg.dump()]))
    return result
