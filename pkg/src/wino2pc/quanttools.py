"""Winograd-domain quantization toolkit.

Outlier detection on transformed weights, bit re-weighting of the
per-bit importance set, the bit-level quantizer and its straight-through
gradient, Hutchinson sensitivity estimation, exact communication-budgeted
bit assignment, and a toy-scale finetuning loop that exercises the whole
training path on synthetic data.
"""

from __future__ import annotations

import itertools
import json
import math
from dataclasses import dataclass, field

import numpy as np

from .errors import DegenerateStd, Infeasible, NonFiniteLoss
from .protocols import BitImportance, default_importance


# -- outlier statistics ------------------------------------------------------------

def zscore(w) -> float:
    """(max - mean) / std with the population standard deviation."""
    a = np.asarray(w, dtype=np.float64).ravel()
    std = float(a.std())
    if std == 0.0:
        raise DegenerateStd("constant tensor has no z-score")
    return float((a.max() - a.mean()) / std)


def has_outliers(w, threshold: float = 4.0) -> bool:
    if not math.isfinite(threshold):
        return False
    try:
        return zscore(w) > threshold
    except DegenerateStd:
        return False


# -- bit re-weighting ----------------------------------------------------------------

def reweight_bits(lw: int) -> BitImportance:
    """Replace the head importance 2^(lw-1) with 2^lw; the tail is unchanged.

    Keeps the number of representable values at 2^lw while enlarging the
    covered magnitude range, which is how outliers are absorbed without
    widening the weights.
    """
    base = default_importance(lw)
    return BitImportance((1 << lw,) + base.weights[1:])


# -- bit-level quantizer (training form) -----------------------------------------------

def _round_half_away(x):
    return np.sign(x) * np.floor(np.abs(x) + 0.5)


def bsq_forward(w_bits, importance: BitImportance, s: float, lw: int):
    """Quantized weight from relaxed bits: s * Round(sum_b w_b * B[b]) / (2^lw - 1).

    w_bits are the per-bit relaxations in [0, 1], most-significant first,
    matching the importance order.
    """
    bits = np.asarray(w_bits, dtype=np.float64)
    coef = np.asarray(importance.weights, dtype=np.float64)
    acc = np.tensordot(bits, coef, axes=([-1], [0]))
    return s * _round_half_away(acc) / ((1 << lw) - 1)


def bsq_forward_smooth(w_bits, importance: BitImportance, s: float, lw: int):
    """Straight-through relaxation of bsq_forward (rounding as identity)."""
    bits = np.asarray(w_bits, dtype=np.float64)
    coef = np.asarray(importance.weights, dtype=np.float64)
    acc = np.tensordot(bits, coef, axes=([-1], [0]))
    return s * acc / ((1 << lw) - 1)


def bsq_backward(upstream_grad, b: int, lw: int,
                 importance: BitImportance | None = None, s: float = 1.0):
    """Gradient of the STE-smoothed quantizer w.r.t. the b-th bit.

    b counts from the least significant bit, so with the default
    importance and unit scale this is the textbook 2^b / (2^lw - 1)
    factor; a re-weighted importance set or a non-unit scale generalize
    it to s * B[b] / (2^lw - 1).
    """
    imp = importance or default_importance(lw)
    coef = imp.weights[len(imp) - 1 - b]
    return s * coef / ((1 << lw) - 1) * np.asarray(upstream_grad,
                                                   dtype=np.float64)


# -- Hessian sensitivity -----------------------------------------------------------------

def hessian_trace(loss_fn, w: np.ndarray, probes: int = 100,
                  eps: float = 1e-3, seed: int = 0) -> float:
    """Hutchinson estimate of the average Hessian trace, trace(H)/dim.

    Uses double central differences of the loss along Rademacher probes:
    z^T H z ~ (L(w + eps z) - 2 L(w) + L(w - eps z)) / eps^2.
    """
    w = np.asarray(w, dtype=np.float64)
    rng = np.random.default_rng(seed)
    base = float(loss_fn(w))
    if not math.isfinite(base):
        raise NonFiniteLoss("loss is not finite at the expansion point")
    total = 0.0
    for _ in range(probes):
        z = rng.integers(0, 2, size=w.shape).astype(np.float64) * 2.0 - 1.0
        up = float(loss_fn(w + eps * z))
        dn = float(loss_fn(w - eps * z))
        if not (math.isfinite(up) and math.isfinite(dn)):
            raise NonFiniteLoss("loss diverged during probing")
        total += (up - 2.0 * base + dn) / (eps * eps)
    return total / (probes * w.size)


@dataclass
class LayerSensitivity:
    """Per-layer candidate table: bit width -> (perturbation, modeled bits)."""

    layer_id: str
    options: dict[int, tuple[float, int]] = field(default_factory=dict)

    def add(self, bits: int, omega: float, comm_bits: int) -> None:
        self.options[int(bits)] = (float(omega), int(comm_bits))

    def candidates(self) -> list[int]:
        return sorted(self.options)


def sensitivity_rows(layers: list[LayerSensitivity]) -> list[dict]:
    rows = []
    for ls in layers:
        for bits, (omega, comm) in sorted(ls.options.items()):
            rows.append({"layer": ls.layer_id, "bits": bits,
                         "omega": omega, "comm_bits": comm})
    return rows


def sensitivity_from_rows(rows: list[dict]) -> list[LayerSensitivity]:
    table: dict[str, LayerSensitivity] = {}
    order = []
    for r in rows:
        lid = str(r["layer"])
        if lid not in table:
            table[lid] = LayerSensitivity(lid)
            order.append(lid)
        table[lid].add(int(r["bits"]), float(r["omega"]), int(r["comm_bits"]))
    return [table[lid] for lid in order]


def load_sensitivity(path: str) -> list[LayerSensitivity]:
    with open(path) as f:
        return sensitivity_from_rows(json.load(f))


def save_sensitivity(layers: list[LayerSensitivity], path: str) -> None:
    with open(path, "w") as f:
        json.dump(sensitivity_rows(layers), f, indent=1)


def quant_perturbation(w_win: np.ndarray, lw: int,
                       importance: BitImportance | None = None,
                       signed: bool = True) -> float:
    """Squared L2 error of quantizing a Winograd-domain weight tensor."""
    from .models import quantize_weights

    imp = importance or default_importance(lw)
    codes, e_w = quantize_weights(np.asarray(w_win, dtype=np.float64), imp,
                                  signed)
    deq = np.ldexp(codes.astype(np.float64), -e_w)
    return float(((deq - w_win) ** 2).sum())


DEFAULT_CANDIDATE_BITS = (2, 3, 4, 6, 8)


def layer_sensitivity_table(model: dict, traces: dict[str, float],
                            candidate_bits=DEFAULT_CANDIDATE_BITS,
                            lam: int = 128) -> list[LayerSensitivity]:
    """Per-layer Omega/C table for the budgeted bit assignment.

    Omega is the supplied average Hessian trace times the squared error of
    quantizing the transformed weights at each candidate width; C is the
    modeled communication of the layer lowered at that width.  Traces come
    from the caller (Hutchinson estimates or an externally measured table).
    """
    import copy

    from .costs import CostModel
    from .graphir import estimate_comm
    from .models import _resolve, lower_model
    from .qtensor import load_qtsr
    from .winograd import weight_transform_int, winograd_matrices

    cm = CostModel(lam=lam)
    out = []
    n_batch, _, h, w = model["input"]["shape"]
    for idx, layer in enumerate(model["layers"]):
        if layer["kind"] != "conv3x3":
            continue
        carrier = load_qtsr(_resolve(model, layer["weight_file"]))
        plan = winograd_matrices(int(layer.get("plan_m", 2)), 3)
        num, den = weight_transform_int(carrier.data,
                                        1 << carrier.params.scale_exp, plan)
        w_win = num.astype(np.float64) / den
        trace = float(traces.get(layer["name"], 1.0))
        ls = LayerSensitivity(layer["name"])
        for b in candidate_bits:
            sub = copy.deepcopy(model)
            sub["layers"] = [dict(sub["layers"][idx],
                                  weight_bits=int(b), bit_importance=None,
                                  win_weight_scale_exp=0)]
            sub["input"]["shape"] = [n_batch, layer["in_channels"], h, w]
            g = lower_model(sub, with_weights=False)
            _, totals = estimate_comm(g, cm)
            omega = trace * quant_perturbation(w_win, int(b))
            ls.add(int(b), omega, totals["total"])
        out.append(ls)
        stride = int(layer.get("stride", 1))
        pad = int(layer.get("padding", 1))
        h = (h + 2 * pad - 3) // stride + 1
        w = (w + 2 * pad - 3) // stride + 1
    return out


# -- exact budgeted bit assignment ------------------------------------------------------

def _assignment_key(layers, choice):
    omega = sum(layers[i].options[b][0] for i, b in enumerate(choice))
    comm = sum(layers[i].options[b][1] for i, b in enumerate(choice))
    return omega, comm


def _brute_force(layers, zeta):
    best = None
    for choice in itertools.product(*[ls.candidates() for ls in layers]):
        omega, comm = _assignment_key(layers, choice)
        if comm > zeta:
            continue
        cand = (omega, comm, choice)
        if best is None or cand < best:
            best = cand
    return best


def _pareto_dp(layers, zeta):
    # states: comm -> (omega, comm, choice), pareto-pruned per layer
    states = [(0.0, 0, ())]
    for ls in layers:
        nxt = []
        for omega, comm, choice in states:
            for b in ls.candidates():
                o2, c2 = ls.options[b]
                comm2 = comm + c2
                if comm2 > zeta:
                    continue
                nxt.append((omega + o2, comm2, choice + (b,)))
        nxt.sort(key=lambda s: (s[1], s[0], s[2]))
        pruned = []
        best_omega = None
        for omega, comm, choice in nxt:
            if best_omega is None or omega < best_omega:
                pruned.append((omega, comm, choice))
                best_omega = omega
        states = pruned
        if not states:
            return None
    return min(states)


def assign_bits_ilp(layers: list[LayerSensitivity], zeta: int) -> dict:
    """Exact budgeted bit assignment: min total perturbation s.t. comm <= zeta.

    Ties break toward lower total communication, then the lexicographically
    smaller bit vector.  Exhaustive for small problems, pareto-frontier
    dynamic programming beyond that; both are exact.
    """
    if not layers:
        return {"bits": {}, "omega_total": 0.0, "comm_total": 0}
    floor_comm = sum(min(c for _, c in ls.options.values()) for ls in layers)
    if floor_comm > zeta:
        raise Infeasible(
            f"minimum possible communication {floor_comm} exceeds budget {zeta}")
    if len(layers) <= 12:
        best = _brute_force(layers, zeta)
    else:
        best = _pareto_dp(layers, zeta)
    if best is None:
        raise Infeasible("no assignment fits the budget")
    omega, comm, choice = best
    return {
        "bits": {ls.layer_id: b for ls, b in zip(layers, choice)},
        "omega_total": omega,
        "comm_total": comm,
    }


# -- toy finetuning loop ------------------------------------------------------------------

def make_blobs(n: int = 200, seed: int = 0):
    """Two separable 2-D classes along the (1, 1) direction."""
    rng = np.random.default_rng(seed)
    half = n // 2
    x0 = rng.normal(0.0, 0.45, size=(half, 2))
    x1 = rng.normal(2.2, 0.45, size=(n - half, 2))
    x = np.vstack([x0, x1])
    y = np.concatenate([np.zeros(half), np.ones(n - half)])
    order = rng.permutation(n)
    return x[order], y[order]


@dataclass
class ToyResult:
    bits: np.ndarray          # (features, lw) relaxed bits
    scale: float
    bias: float
    importance: BitImportance
    lw: int
    losses: list[float]
    accuracy: float

    def quantized_weights(self) -> np.ndarray:
        return bsq_forward(self.bits, self.importance, self.scale, self.lw)

    def hard_codes(self) -> np.ndarray:
        hard = (self.bits >= 0.5).astype(np.int64)
        coef = np.asarray(self.importance.weights, dtype=np.int64)
        return hard @ coef


def finetune_toy(lw: int = 4, epochs: int = 50, seed: int = 0,
                 importance: BitImportance | None = None, lr: float = 0.25,
                 n_points: int = 200) -> ToyResult:
    """Train a tiny quantized linear classifier with the STE quantizer.

    The weights are held as per-bit relaxations in [0, 1] updated by plain
    gradient descent through the straight-through estimator; the scale and
    bias stay float.  Returns the trained bits, loss curve, and accuracy.
    """
    imp = importance or default_importance(lw)
    x, y = make_blobs(n_points, seed)
    rng = np.random.default_rng(seed + 1)
    bits = rng.uniform(0.3, 0.7, size=(2, lw))
    scale = 1.0
    bias = -2.0
    denom = (1 << lw) - 1
    coef = np.asarray(imp.weights, dtype=np.float64)
    losses = []

    def forward(b, s, b0):
        wq = bsq_forward(b, imp, s, lw)
        logits = x @ wq + b0
        p = 1.0 / (1.0 + np.exp(-logits))
        eps = 1e-9
        loss = -np.mean(y * np.log(p + eps) + (1 - y) * np.log(1 - p + eps))
        return loss, p, wq

    loss, p, wq = forward(bits, scale, bias)
    losses.append(float(loss))
    for _ in range(epochs):
        # dL/dlogit = (p - y)/n ; dlogit/dw = x ; STE through Round
        g_logit = (p - y) / len(y)
        g_w = x.T @ g_logit
        g_bits = np.outer(g_w, coef) * scale / denom
        g_scale = float(g_w @ (bits @ coef)) / denom
        g_bias = float(g_logit.sum())
        bits = np.clip(bits - lr * g_bits, 0.0, 1.0)
        scale -= lr * g_scale
        bias -= lr * g_bias
        loss, p, wq = forward(bits, scale, bias)
        losses.append(float(loss))
    acc = float(np.mean((x @ wq + bias > 0) == y))
    return ToyResult(bits, scale, bias, imp, lw, losses, acc)


def export_toy_model(result: ToyResult, path: str) -> str:
    """Write the trained classifier in the model format (one fc layer)."""
    import os

    from .models import CARRIER_BITS, save_model
    from .qtensor import QTensor, QuantParams, save_qtsr

    os.makedirs(path, exist_ok=True)
    codes = result.hard_codes()
    peak = int(np.max(np.abs(codes))) if codes.size else 0
    bits = max(peak.bit_length() + 1, 2)
    save_qtsr(os.path.join(path, "fc.dq.qtsr"),
              QTensor(codes.reshape(1, -1), QuantParams(bits, 0)))
    model = {
        "name": "toy_classifier",
        "carrier_bits": CARRIER_BITS,
        "input": {"file": "input.qtsr", "shape": [1, 2],
                  "bits": CARRIER_BITS, "scale_exp": 4},
        "layers": [{
            "name": "fc", "kind": "fc", "out_features": 1,
            "weight_file": "fc.dq.qtsr", "dq_weight_file": "fc.dq.qtsr",
            "dq_weight_scale_exp": 0, "weight_bits": result.lw,
            "act_bits": CARRIER_BITS - 2, "act_scale_exp": None,
            "bit_importance": list(result.importance.weights),
            "signed_weights": False,
        }],
        "output": {"file": "output.qtsr"},
        "toy_scale": result.scale,
        "toy_bias": result.bias,
    }
    sample = QTensor(np.array([[32, 36]], dtype=np.int64),  # (2.0, 2.25)
                     QuantParams(CARRIER_BITS, 4))
    save_qtsr(os.path.join(path, "input.qtsr"), sample)
    json_path = os.path.join(path, "model.json")
    save_model(model, json_path)
    return json_path
