"""Central finite-difference verification of :class:`~cecs.autodiff.Graph` gradients."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Dict, Iterable, Mapping, Optional

import numpy as np

from .augment import GridSpec, Region, build_masks, compose_mask, compose_replace
from .autodiff import OP_KINDS, Graph
from .backbone import backbone_nodes, init_params, param_placeholders
from .losses import objective_nodes


class DegeneratePointError(ValueError):
    """The check point sits on (or within one step of) a non-differentiable kink."""


@dataclass
class GradCheckReport:
    tolerance: float
    step: float
    max_rel_error: Dict[str, float] = field(default_factory=dict)
    worst_entry: Dict[str, tuple] = field(default_factory=dict)
    checked_entries: Dict[str, int] = field(default_factory=dict)
    refined_entries: int = 0

    @property
    def failures(self) -> Dict[str, float]:
        return {k: v for k, v in self.max_rel_error.items() if not v < self.tolerance}

    @property
    def passed(self) -> bool:
        return not self.failures

    def summary(self) -> str:
        lines = []
        for name, err in self.max_rel_error.items():
            flag = "ok  " if err < self.tolerance else "FAIL"
            lines.append(f"{flag} {name:<16} max rel err {err:.3e} over {self.checked_entries[name]} entries")
        return "\n".join(lines)


def relative_error(analytic, numeric, floor: float = 1e-8) -> np.ndarray:
    """|a - n| / max(|a|, |n|, floor); the floor keeps exact zeros from dividing by zero."""
    a, n = np.asarray(analytic, float), np.asarray(numeric, float)
    return np.abs(a - n) / np.maximum(np.maximum(np.abs(a), np.abs(n)), floor)


def _states_equal(s1, s2) -> bool:
    return s1.keys() == s2.keys() and all(np.array_equal(s1[k], s2[k]) for k in s1)


def grad_check(
    graph: Graph,
    loss_node: int,
    inputs: Mapping[str, np.ndarray],
    step: float = 1e-4,
    tolerance: float = 1e-4,
    wrt: Optional[Iterable[str]] = None,
    max_entries: Optional[int] = None,
    floor: float = 1e-8,
    max_refinements: int = 3,
    rng: Optional[np.random.Generator] = None,
) -> GradCheckReport:
    """Compare ``graph.backward`` against central differences for each input in ``wrt``.

    Every checked entry is perturbed by +/- ``step``. If either perturbation
    changes the discrete branch state of the graph (a ReLU flips, a pool
    winner changes, a norm clamp engages) the step is shrunk tenfold, up to
    ``max_refinements`` times, before giving up with
    :class:`DegeneratePointError`. A ReLU input of exactly zero at the base
    point is degenerate outright.

    ``max_entries`` subsamples entries per input (with ``rng``) for large tensors.
    """
    if step <= 0:
        raise ValueError("step must be positive")
    base = {k: np.array(v, dtype=np.float64) if not np.issubdtype(np.asarray(v).dtype, np.integer) else np.asarray(v)
            for k, v in inputs.items()}
    names = list(wrt) if wrt is not None else [k for k, v in base.items() if v.dtype.kind == "f"]

    graph.evaluate(base)
    for node in graph.nodes:
        if node.op == "relu" and np.any(graph.value(node.inputs[0]) == 0.0):
            raise DegeneratePointError(f"ReLU input exactly zero at {node.label()}; resample the check point")
    base_state = graph.kink_state()
    grads = graph.backward(loss_node)

    report = GradCheckReport(tolerance=tolerance, step=step)
    rng = rng if rng is not None else np.random.default_rng(0)
    for name in names:
        x = base[name]
        analytic = grads[graph.placeholders[name]]
        flat_idx = np.arange(x.size)
        if max_entries is not None and x.size > max_entries:
            flat_idx = np.sort(rng.choice(x.size, size=max_entries, replace=False))
        numeric = np.empty(len(flat_idx))
        for j, fi in enumerate(flat_idx):
            idx = np.unravel_index(fi, x.shape)
            h = step
            for attempt in range(max_refinements + 1):
                orig = x[idx]
                x[idx] = orig + h
                fp = _loss(graph, base, loss_node)
                sp = graph.kink_state()
                x[idx] = orig - h
                fm = _loss(graph, base, loss_node)
                sm = graph.kink_state()
                x[idx] = orig
                if _states_equal(sp, base_state) and _states_equal(sm, base_state):
                    break
                h /= 10.0
            else:
                raise DegeneratePointError(
                    f"kink within {h * 10:.1e} of the check point at {name}{tuple(int(i) for i in idx)}"
                )
            if attempt:
                report.refined_entries += 1
            numeric[j] = (fp - fm) / (2.0 * h)
        a = analytic.reshape(-1)[flat_idx]
        err = relative_error(a, numeric, floor)
        worst = int(np.argmax(err)) if err.size else 0
        report.max_rel_error[name] = float(err[worst]) if err.size else 0.0
        report.worst_entry[name] = tuple(int(i) for i in np.unravel_index(flat_idx[worst], x.shape)) if err.size else ()
        report.checked_entries[name] = int(len(flat_idx))
    graph.evaluate(base)
    return report


def _loss(graph: Graph, inputs, loss_node: int) -> float:
    graph.evaluate(inputs, outputs=[])
    return float(graph.value(loss_node))


# -- the standard suite ------------------------------------------------------------------


def _smooth(rng: np.random.Generator, shape, low: float = 0.2, high: float = 1.5) -> np.ndarray:
    """Random entries bounded away from zero, with random signs."""
    return rng.uniform(low, high, size=shape) * rng.choice([-1.0, 1.0], size=shape)


def op_trial(kind: str, rng: np.random.Generator):
    """A small random graph exercising ``kind``; returns (graph, loss node, inputs).

    Non-scalar op outputs are contracted with a fixed random weight tensor so
    every output entry contributes to the loss with a distinct coefficient.
    """
    g = Graph()
    inputs = {}

    def leaf(name, value):
        inputs[name] = value
        return g.placeholder(name)

    if kind in ("add", "sub", "mul"):
        shape = tuple(rng.integers(1, 4, size=rng.integers(1, 4)))
        # the second operand is broadcast along leading axes half the time
        bshape = shape[1:] if len(shape) > 1 and rng.random() < 0.5 else shape
        a, b = leaf("a", _smooth(rng, shape)), leaf("b", _smooth(rng, bshape))
        out = getattr(g, kind)(a, b)
    elif kind == "matmul":
        m, k, n = rng.integers(1, 5, size=3)
        ashape = (k,) if rng.random() < 0.3 else (m, k)
        out = g.matmul(leaf("a", _smooth(rng, ashape)), leaf("b", _smooth(rng, (k, n))))
    elif kind == "conv2d":
        padding = "same" if rng.random() < 0.5 else "valid"
        ks = 3 if padding == "same" else int(rng.integers(1, 4))
        h, w = rng.integers(ks, 6, size=2)
        cin, cout = rng.integers(1, 3, size=2)
        x = leaf("x", _smooth(rng, (1, h, w, cin)))
        out = g.conv2d(x, leaf("w", _smooth(rng, (ks, ks, cin, cout))), padding=padding)
    elif kind == "relu":
        out = g.relu(leaf("x", _smooth(rng, (int(rng.integers(2, 8)),))))
    elif kind == "maxpool2":
        h, w = 2 * rng.integers(1, 3, size=2)
        # distinct values keep every pool winner unique
        vals = rng.permutation(int(h * w * 2)).reshape(1, h, w, 2) * 0.1 + rng.uniform(0, 0.01, (1, h, w, 2))
        out = g.maxpool2(leaf("x", vals))
    elif kind == "global_avg_pool":
        out = g.global_avg_pool(leaf("x", _smooth(rng, (2, 3, 3, 2))))
    elif kind == "dot":
        shape = (int(rng.integers(1, 4)), int(rng.integers(1, 6)))
        out = g.dot(leaf("a", _smooth(rng, shape)), leaf("b", _smooth(rng, shape)))
    elif kind == "l2_norm":
        out = g.l2_norm(leaf("x", _smooth(rng, (2, int(rng.integers(1, 6))))), eps=1e-8)
    elif kind == "scalar_div":
        n = int(rng.integers(1, 5))
        out = g.scalar_div(leaf("a", _smooth(rng, (n,))), leaf("b", _smooth(rng, (n,), 0.5, 2.0)))
    elif kind == "log_softmax":
        out = g.log_softmax(leaf("x", rng.normal(0.0, 2.0, size=(2, int(rng.integers(2, 6))))))
    elif kind == "gather":
        k = int(rng.integers(2, 6))
        x = leaf("x", _smooth(rng, (3, k)))
        out = g.gather(x, leaf("idx", rng.integers(0, k, size=3)))
    elif kind == "sum":
        out = g.sum(leaf("x", _smooth(rng, (2, 3))))
    elif kind == "scale":
        out = g.scale(leaf("x", _smooth(rng, (4,))), float(rng.uniform(-3, 3)))
    else:
        raise ValueError(f"unknown op kind {kind!r}")

    g.evaluate(inputs, outputs=[])
    shape = np.shape(g.value(out))
    if shape == ():
        return g, out, inputs
    weights = g.constant(rng.uniform(0.5, 1.5, size=shape))
    return g, g.sum(g.mul(out, weights)), inputs


def op_suite(trials: int = 100, seed: int = 0, step: float = 1e-4, tolerance: float = 1e-4) -> Dict[str, float]:
    """Worst relative error per op kind over ``trials`` random graphs each."""
    rng = np.random.default_rng(seed)
    worst = {}
    for kind in OP_KINDS:
        worst[kind] = 0.0
        for _ in range(trials):
            g, loss, inputs = op_trial(kind, rng)
            rep = grad_check(g, loss, inputs, step=step, tolerance=tolerance)
            worst[kind] = max(worst[kind], max(rep.max_rel_error.values(), default=0.0))
    return worst


def pipeline_check(side: int = 16, k: int = 3, seed: int = 0, tolerance: float = 1e-3,
                   max_entries: Optional[int] = None) -> GradCheckReport:
    """Backbone plus the full cecs objective on one random side x side x 3 triplet.

    Checks every parameter and the original and replaced images.
    """
    rng = np.random.default_rng(seed)
    params = init_params(k, rng)
    # nonzero biases keep the zeroed block of the masked image off the ReLU kink
    for name in ("conv1_b", "conv2_b", "conv3_b", "fc_b"):
        setattr(params, name, rng.normal(0.0, 0.1, size=getattr(params, name).shape))
    f, s = rng.normal(size=(2, side, side, 3))
    masks = build_masks(Region(1, 1, 2), GridSpec.for_image(side, side, 4 if side % 7 else 7), 3)
    g = Graph()
    p = param_placeholders(g)
    nets = {v: backbone_nodes(g, p, g.placeholder(f"x_{v}")) for v in ("f", "replace", "mask")}
    labels = g.placeholder("labels")
    obj = objective_nodes(g, {v: n["logits"] for v, n in nets.items()},
                          {v: n["features"] for v, n in nets.items()}, labels, 1, mode="cecs")
    inputs = {"x_f": f[None], "x_replace": compose_replace(f, s, masks)[None],
              "x_mask": compose_mask(f, masks)[None], "labels": np.array([int(rng.integers(k))]),
              **params.arrays()}
    # the zeroed block makes every pool window inside it a tie, so the loss is not
    # differentiable in the masked image's own pixels; parameters stay smooth
    wrt = list(params.arrays()) + ["x_f", "x_replace"]
    return grad_check(g, obj["total"], inputs, tolerance=tolerance, wrt=wrt, max_entries=max_entries, rng=rng)
