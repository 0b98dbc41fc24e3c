"""Cross-entropy, cosine similarity and the combined triplet objective.

The ``*_node`` builders append differentiable fragments to a
:class:`~cecs.autodiff.Graph`; the plain functions evaluate the same
fragments on concrete arrays and return Python floats.
"""

from __future__ import annotations

from dataclasses import dataclass, asdict
from typing import Dict

import numpy as np

from .autodiff import Graph

DEFAULT_EPS = 1e-8


class LabelOutOfRangeError(IndexError):
    pass


class DimensionMismatchError(ValueError):
    pass


@dataclass(frozen=True)
class LossBreakdown:
    l_f: float
    l_replace: float
    l_mask: float
    l_cls: float
    c_replace_mask: float
    c_replace_f: float
    l_cos: float
    total: float

    def as_dict(self) -> Dict[str, float]:
        return asdict(self)


# -- graph fragments ---------------------------------------------------------


def cross_entropy_node(g: Graph, logits: int, labels: int) -> int:
    """Per-row ``-log softmax(logits)[label]`` (log-sum-exp form)."""
    return g.scale(g.gather(g.log_softmax(logits), labels), -1.0)


def mean_node(g: Graph, x: int, count: int) -> int:
    return g.scale(g.sum(x), 1.0 / count)


def cosine_node(g: Graph, u: int, v: int, eps: float = DEFAULT_EPS) -> int:
    """Row-wise (u.v) / (max(|u|, eps) * max(|v|, eps))."""
    denom = g.mul(g.l2_norm(u, eps), g.l2_norm(v, eps))
    return g.scalar_div(g.dot(u, v), denom)


def similarity_loss_node(
    g: Graph, v_f: int, v_replace: int, v_mask: int, eps: float = DEFAULT_EPS, third_pair: bool = False
) -> Dict[str, int]:
    """Row-wise (1 - cos(replace, mask)) + (1 - cos(replace, original)).

    ``third_pair`` adds (1 - cos(original, mask)); off by default.
    """
    one = g.constant(1.0)
    c_rm = cosine_node(g, v_replace, v_mask, eps)
    c_rf = cosine_node(g, v_replace, v_f, eps)
    l_cos = g.add(g.sub(one, c_rm), g.sub(one, c_rf))
    if third_pair:
        l_cos = g.add(l_cos, g.sub(one, cosine_node(g, v_f, v_mask, eps)))
    return {"c_replace_mask": c_rm, "c_replace_f": c_rf, "l_cos": l_cos}


def objective_nodes(
    g: Graph,
    logits: Dict[str, int],
    features: Dict[str, int],
    labels: int,
    batch: int,
    mode: str = "cecs",
    cos_weight: float = 1.0,
    eps: float = DEFAULT_EPS,
    third_pair: bool = False,
) -> Dict[str, int]:
    """Batch-mean loss components for one of the three training modes.

    ``logits``/``features`` are keyed by ``"f"``, ``"replace"``, ``"mask"``;
    baseline mode only needs ``"f"``. Every returned entry is a scalar node
    and ``total`` is the node to differentiate. Components that a mode does
    not use are constant zeros.
    """
    if mode not in ("baseline", "ce", "cecs"):
        raise ValueError(f"unknown mode {mode!r}")
    zero = g.constant(0.0)
    out = {k: zero for k in ("l_replace", "l_mask", "c_replace_mask", "c_replace_f", "l_cos")}
    out["l_f"] = mean_node(g, cross_entropy_node(g, logits["f"], labels), batch)
    if mode == "baseline":
        out["l_cls"] = out["l_f"]
        out["total"] = out["l_cls"]
        return out
    out["l_replace"] = mean_node(g, cross_entropy_node(g, logits["replace"], labels), batch)
    out["l_mask"] = mean_node(g, cross_entropy_node(g, logits["mask"], labels), batch)
    out["l_cls"] = g.add(g.add(out["l_f"], out["l_replace"]), out["l_mask"])
    if mode == "ce":
        out["total"] = out["l_cls"]
        return out
    sim = similarity_loss_node(g, features["f"], features["replace"], features["mask"], eps, third_pair)
    for key in ("c_replace_mask", "c_replace_f", "l_cos"):
        out[key] = mean_node(g, sim[key], batch)
    weighted = out["l_cos"] if cos_weight == 1.0 else g.scale(out["l_cos"], cos_weight)
    out["total"] = g.add(out["l_cls"], weighted)
    return out


# -- plain evaluation ----------------------------------------------------------


def _vec(x) -> np.ndarray:
    return np.asarray(x, dtype=np.float64)


def cross_entropy(logits, label: int) -> float:
    logits = _vec(logits)
    if logits.ndim != 1:
        raise DimensionMismatchError(f"logits must be 1-D, got shape {logits.shape}")
    if not 0 <= int(label) < logits.shape[0]:
        raise LabelOutOfRangeError(f"label {label} outside [0, {logits.shape[0]})")
    g = Graph()
    node = cross_entropy_node(g, g.placeholder("logits"), g.placeholder("label"))
    g.evaluate({"logits": logits, "label": np.int64(label)})
    return float(g.value(node))


def classification_loss(logits_f, logits_replace, logits_mask, label: int) -> float:
    """Sum of the three cross-entropies against the same label."""
    shapes = {np.shape(logits_f), np.shape(logits_replace), np.shape(logits_mask)}
    if len(shapes) != 1:
        raise DimensionMismatchError(f"logits shapes differ: {shapes}")
    l_f = cross_entropy(logits_f, label)
    l_r = cross_entropy(logits_replace, label)
    l_m = cross_entropy(logits_mask, label)
    return l_f + l_r + l_m


def cosine_similarity(u, v, eps: float = DEFAULT_EPS) -> float:
    u, v = _vec(u), _vec(v)
    if u.shape != v.shape or u.ndim != 1:
        raise DimensionMismatchError(f"cannot compare vectors of shape {u.shape} and {v.shape}")
    if eps <= 0:
        raise ValueError("eps must be positive")
    g = Graph()
    node = cosine_node(g, g.placeholder("u"), g.placeholder("v"), eps)
    g.evaluate({"u": u, "v": v})
    return float(g.value(node))


def similarity_loss(v_f, v_replace, v_mask, eps: float = DEFAULT_EPS, third_pair: bool = False) -> float:
    vs = [_vec(v) for v in (v_f, v_replace, v_mask)]
    if len({v.shape for v in vs}) != 1 or vs[0].ndim != 1:
        raise DimensionMismatchError(f"feature vectors must share one 1-D shape, got {[v.shape for v in vs]}")
    g = Graph()
    ids = [g.placeholder(k) for k in ("f", "replace", "mask")]
    node = similarity_loss_node(g, *ids, eps=eps, third_pair=third_pair)["l_cos"]
    g.evaluate(dict(zip(("f", "replace", "mask"), vs)))
    return float(g.value(node))


def total_loss(
    logits_f,
    logits_replace,
    logits_mask,
    v_f,
    v_replace,
    v_mask,
    label: int,
    use_cos: bool = True,
    cos_weight: float = 1.0,
    eps: float = DEFAULT_EPS,
) -> LossBreakdown:
    """Full breakdown for a single triplet; ``use_cos=False`` drops the cosine term."""
    l_f = cross_entropy(logits_f, label)
    l_r = cross_entropy(logits_replace, label)
    l_m = cross_entropy(logits_mask, label)
    l_cls = l_f + l_r + l_m
    if use_cos:
        c_rm = cosine_similarity(v_replace, v_mask, eps)
        c_rf = cosine_similarity(v_replace, v_f, eps)
        l_cos = (1.0 - c_rm) + (1.0 - c_rf)
    else:
        c_rm = c_rf = l_cos = 0.0
    total = l_cls + cos_weight * l_cos
    return LossBreakdown(l_f, l_r, l_m, l_cls, c_rm, c_rf, l_cos, total)
