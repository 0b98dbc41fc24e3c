"""Three-layer convolutional feature extractor, linear head, and class activation maps.

conv3x3(8)+relu+maxpool2 -> conv3x3(16)+relu+maxpool2 -> conv3x3(32)+relu
-> global average pool (the 32-d feature vector) -> linear classifier.
Images are NHWC float64.
"""

from __future__ import annotations

from dataclasses import dataclass, fields
from typing import Dict, Iterator, Tuple

import numpy as np

from .autodiff import Graph

FEATURE_DIM = 32
CONV_WIDTHS = (8, 16, 32)
PARAM_NAMES = ("conv1_w", "conv1_b", "conv2_w", "conv2_b", "conv3_w", "conv3_b", "fc_w", "fc_b")


@dataclass
class ModelParams:
    conv1_w: np.ndarray
    conv1_b: np.ndarray
    conv2_w: np.ndarray
    conv2_b: np.ndarray
    conv3_w: np.ndarray
    conv3_b: np.ndarray
    fc_w: np.ndarray
    fc_b: np.ndarray

    @property
    def num_classes(self) -> int:
        return self.fc_w.shape[1]

    @property
    def in_channels(self) -> int:
        return self.conv1_w.shape[2]

    def arrays(self) -> Dict[str, np.ndarray]:
        return {f.name: getattr(self, f.name) for f in fields(self)}

    def items(self) -> Iterator[Tuple[str, np.ndarray]]:
        return iter(self.arrays().items())

    def copy(self) -> "ModelParams":
        return ModelParams(**{k: v.copy() for k, v in self.items()})

    def flatten(self) -> np.ndarray:
        return np.concatenate([v.reshape(-1) for _, v in self.items()])

    @classmethod
    def unflatten(cls, flat: np.ndarray, num_classes: int, in_channels: int) -> "ModelParams":
        shapes = param_shapes(num_classes, in_channels)
        total = sum(int(np.prod(s)) for s in shapes.values())
        flat = np.asarray(flat, dtype=np.float64).reshape(-1)
        if flat.size != total:
            raise ValueError(f"expected {total} values for K={num_classes}, C={in_channels}; got {flat.size}")
        out, pos = {}, 0
        for name, shape in shapes.items():
            size = int(np.prod(shape))
            out[name] = flat[pos:pos + size].reshape(shape).copy()
            pos += size
        return cls(**out)


def param_shapes(num_classes: int, in_channels: int = 3) -> Dict[str, tuple]:
    c1, c2, c3 = CONV_WIDTHS
    return {
        "conv1_w": (3, 3, in_channels, c1), "conv1_b": (c1,),
        "conv2_w": (3, 3, c1, c2), "conv2_b": (c2,),
        "conv3_w": (3, 3, c2, c3), "conv3_b": (c3,),
        "fc_w": (c3, num_classes), "fc_b": (num_classes,),
    }


def init_params(k: int, rng: np.random.Generator, in_channels: int = 3) -> ModelParams:
    """Gaussian weights with standard deviation 1/sqrt(fan_in); zero biases."""
    if k < 2:
        raise ValueError(f"need at least 2 categories, got k={k}")
    arrays = {}
    for name, shape in param_shapes(k, in_channels).items():
        if name.endswith("_b"):
            arrays[name] = np.zeros(shape)
        else:
            fan_in = int(np.prod(shape[:-1]))
            arrays[name] = rng.normal(0.0, 1.0 / np.sqrt(fan_in), size=shape)
    return ModelParams(**arrays)


@dataclass
class ForwardResult:
    features: np.ndarray  # (N, 32) or (32,)
    logits: np.ndarray  # (N, K) or (K,)
    last_maps: np.ndarray  # (N, H/4, W/4, 32) or (H/4, W/4, 32)


def param_placeholders(g: Graph) -> Dict[str, int]:
    return {name: g.placeholder(name) for name in PARAM_NAMES}


def backbone_nodes(g: Graph, p: Dict[str, int], x: int) -> Dict[str, int]:
    """Append one backbone pass over image batch node ``x``; parameters are shared via ``p``."""
    h = g.maxpool2(g.relu(g.add(g.conv2d(x, p["conv1_w"]), p["conv1_b"])))
    h = g.maxpool2(g.relu(g.add(g.conv2d(h, p["conv2_w"]), p["conv2_b"])))
    maps = g.relu(g.add(g.conv2d(h, p["conv3_w"]), p["conv3_b"]))
    feats = g.global_avg_pool(maps)
    logits = g.add(g.matmul(feats, p["fc_w"]), p["fc_b"])
    return {"last_maps": maps, "features": feats, "logits": logits}


def extract_features(params: ModelParams, image: np.ndarray) -> ForwardResult:
    """Forward pass for one HxWxC image or an NxHxWxC batch."""
    image = np.asarray(image, dtype=np.float64)
    single = image.ndim == 3
    batch = image[None] if single else image
    if batch.ndim != 4 or batch.shape[1] % 4 or batch.shape[2] % 4:
        raise ValueError(f"image sides must be divisible by 4, got shape {image.shape}")
    if batch.shape[3] != params.in_channels:
        raise ValueError(f"image has {batch.shape[3]} channels, params expect {params.in_channels}")
    # fresh graph per call keeps concurrent callers from sharing evaluation state
    g = Graph()
    out = backbone_nodes(g, param_placeholders(g), g.placeholder("image"))
    for k, v in out.items():
        g.mark_output(k, v)
    res = g.evaluate({"image": batch, **params.arrays()})
    if single:
        return ForwardResult(res["features"][0], res["logits"][0], res["last_maps"][0])
    return ForwardResult(res["features"], res["logits"], res["last_maps"])


def predict(params: ModelParams, images: np.ndarray, batch_size: int = 64) -> np.ndarray:
    """Argmax class per image (ties resolve to the smallest index)."""
    preds = []
    for start in range(0, len(images), batch_size):
        logits = extract_features(params, images[start:start + batch_size]).logits
        preds.append(np.argmax(logits, axis=1))
    return np.concatenate(preds) if preds else np.zeros(0, dtype=np.int64)


def activation_map(result: ForwardResult, params: ModelParams, class_idx: int) -> np.ndarray:
    """Class activation map over the last conv maps, min-max scaled to [0, 1].

    Negative evidence is clipped by a ReLU first; a map with no positive
    response comes back as all zeros.
    """
    k = params.num_classes
    if not 0 <= class_idx < k:
        raise IndexError(f"class {class_idx} outside [0, {k})")
    maps = np.asarray(result.last_maps, dtype=np.float64)
    if maps.ndim != 3:
        raise ValueError(f"expected one H'xW'xD map, got shape {maps.shape}")
    cam = np.maximum(maps @ params.fc_w[:, class_idx], 0.0)
    lo, hi = cam.min(), cam.max()
    if hi - lo <= 0:
        return np.zeros_like(cam)
    return (cam - lo) / (hi - lo)
