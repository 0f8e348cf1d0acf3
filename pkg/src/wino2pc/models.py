"""Model file format, weight transformation, and lowering to the protocol graph.

A model is a JSON document plus QTSR tensor files.  Float weights travel
as high-precision fixed-point carriers (exact dyadic rationals), so the
offline Winograd weight transform and its quantization are reproducible
bit for bit.  Lowering produces the naive protocol graph; the optimizer
passes are applied separately.

Between layers the activation stream lives in a fixed-width carrier
domain (8-bit by default).  Scale exponents not pinned by the model are
derived mechanically so that every requantization shift is exactly the
worst-case live-bit excess, which keeps the whole pipeline free of
uncontrolled wraparound.
"""

from __future__ import annotations

import json
import os

import numpy as np

from .errors import GraphError, UnsupportedPlan
from .graphir import GraphIR, Node, clog2, infer
from .protocols import (BitImportance, default_importance, min_acc_bits,
                        quantize_to_codes, representable_codes)
from .qtensor import QTensor, QuantParams, load_qtsr, save_qtsr
from .winograd import weight_transform_int, winograd_matrices

CARRIER_BITS = 8
FLOAT_CARRIER_BITS = 24
FLOAT_CARRIER_EXP = 16


def load_model(path: str) -> dict:
    with open(path) as f:
        model = json.load(f)
    model["_dir"] = os.path.dirname(os.path.abspath(path))
    return model


def save_model(model: dict, path: str) -> None:
    clean = {k: v for k, v in model.items() if not k.startswith("_")}
    with open(path, "w") as f:
        json.dump(clean, f, indent=1)


def _resolve(model: dict, name: str) -> str:
    return os.path.join(model.get("_dir", "."), name)


def model_importance(layer: dict) -> BitImportance:
    if layer.get("bit_importance"):
        return BitImportance(tuple(layer["bit_importance"]))
    return default_importance(int(layer["weight_bits"]))


def float_carrier(values: np.ndarray) -> QTensor:
    """Store real weights exactly as high-precision dyadic fixed point."""
    return QTensor(
        np.round(np.ldexp(np.asarray(values, dtype=np.float64),
                          FLOAT_CARRIER_EXP)).astype(np.int64),
        QuantParams(FLOAT_CARRIER_BITS, FLOAT_CARRIER_EXP))


def _pick_weight_scale(w_real: np.ndarray, imp: BitImportance,
                       signed: bool) -> int:
    codes = representable_codes(imp, signed)
    top = float(max(abs(int(codes[0])), abs(int(codes[-1]))))
    peak = float(np.max(np.abs(w_real))) if w_real.size else 0.0
    if peak == 0.0:
        return 0
    e = int(np.floor(np.log2(top / peak)))
    return int(np.clip(e, -100, 100))


def quantize_weights(w_real: np.ndarray, imp: BitImportance,
                     signed: bool) -> tuple[np.ndarray, int]:
    e_w = _pick_weight_scale(w_real, imp, signed)
    codes = quantize_to_codes(np.ldexp(w_real, e_w), imp, signed)
    return codes, e_w


def _codes_params(codes: np.ndarray, e_w: int) -> QuantParams:
    peak = int(np.max(np.abs(codes))) if codes.size else 0
    bits = max(peak.bit_length() + 1, 2)
    return QuantParams(bits, e_w)


def transform_weights(model_path: str, out_path: str | None = None,
                      reweight_outliers: bool = False,
                      outlier_threshold: float = 4.0) -> dict:
    """Offline phase: Winograd-transform, quantize, and write weight files.

    Emits <layer>.win.qtsr (Winograd-domain codes) and <layer>.dq.qtsr
    (direct-domain codes, used by the per-bit fallback path), records the
    chosen weight scales and bit importances in the model JSON.
    Deterministic and idempotent.
    """
    from .quanttools import has_outliers, reweight_bits

    model = load_model(model_path)
    for layer in model["layers"]:
        if layer["kind"] not in ("conv3x3", "fc"):
            continue
        carrier = load_qtsr(_resolve(model, layer["weight_file"]))
        w_real = np.ldexp(carrier.data.astype(np.float64),
                          -carrier.params.scale_exp)
        lw = int(layer["weight_bits"])
        signed = bool(layer.get("signed_weights", True))
        imp = model_importance(layer)
        if layer["kind"] == "conv3x3":
            plan = winograd_matrices(int(layer.get("plan_m", 2)), 3)
            num, den = weight_transform_int(carrier.data,
                                            1 << carrier.params.scale_exp, plan)
            w_win = num.astype(np.float64) / den
            if reweight_outliers and len(imp) == lw \
                    and has_outliers(w_win, outlier_threshold):
                imp = reweight_bits(lw)
                layer["bit_importance"] = list(imp.weights)
            win_codes, e_win = quantize_weights(w_win, imp, signed)
            win_name = f"{layer['name']}.win.qtsr"
            save_qtsr(_resolve(model, win_name),
                      QTensor(win_codes, _codes_params(win_codes, e_win)))
            layer["win_weight_file"] = win_name
            layer["win_weight_scale_exp"] = e_win
        dq_codes, e_dq = quantize_weights(w_real, imp, signed)
        dq_name = f"{layer['name']}.dq.qtsr"
        save_qtsr(_resolve(model, dq_name),
                  QTensor(dq_codes, _codes_params(dq_codes, e_dq)))
        layer["dq_weight_file"] = dq_name
        layer["dq_weight_scale_exp"] = e_dq
        layer["bit_importance"] = list(imp.weights)
    save_model(model, out_path or model_path)
    model["_dir"] = os.path.dirname(os.path.abspath(out_path or model_path))
    return model


class _Lowering:
    def __init__(self, model: dict, use_winograd: bool, with_weights: bool):
        self.model = model
        self.use_winograd = use_winograd
        self.with_weights = with_weights
        self.g = GraphIR()
        self.carrier = int(model.get("carrier_bits", CARRIER_BITS))
        self.carrier_scale = int(model["input"].get("scale_exp", 0))
        self.cur = ""
        self.ring = 0
        self.scale = 0
        self.vb = 0
        self.snapshots: dict[str, str] = {}

    def emit(self, nid: str, kind: str, inputs: list[str], **attrs) -> str:
        self.g.add(Node(nid, kind, inputs, attrs))
        return nid

    def chain(self, nid: str, kind: str, **attrs) -> str:
        self.cur = self.emit(nid, kind, [self.cur], **attrs)
        return self.cur

    # -- pieces -----------------------------------------------------------------

    def to_activation(self, name: str, la: int, e_a: int | None):
        """Re-quantize the carrier stream to the layer's activation domain."""
        if e_a is None:
            e_a = self.scale - (self.vb - la)
        shift = self.scale - e_a
        if shift < 0 or self.vb - shift > la:
            raise GraphError(
                f"{name}: activation scale 2^{e_a} unreachable from the "
                f"carrier (shift {shift}, live bits {self.vb})")
        if shift > 0:
            self.chain(f"{name}.aq", "Trunc", shift=shift, role="requant")
            self.scale -= shift
            self.vb = max(self.vb - shift, 1)
        return e_a

    def to_carrier(self, name: str):
        """Return to the fixed carrier domain (width and scale).

        The shift comes from the scale target, not the worst-case live
        bits: like a calibrated deployment, values beyond the carrier
        range wrap, identically in the protocol and the plain oracle.
        """
        shift = self.scale - self.carrier_scale
        if shift > 0:
            self.chain(f"{name}.cq", "Trunc", shift=shift, role="requant")
            self.scale -= shift
            self.vb = max(self.vb - shift, 1)
        if self.ring > self.carrier:
            self.chain(f"{name}.cn", "Requant", to_bits=self.carrier,
                       role="requant")
            self.ring = self.carrier
        self.vb = min(self.vb, self.carrier)

    def lower_conv(self, layer: dict, headroom: int = 0):
        name = layer["name"]
        lw = int(layer["weight_bits"])
        la = int(layer["act_bits"])
        imp = model_importance(layer)
        signed = bool(layer.get("signed_weights", True))
        stride = int(layer.get("stride", 1))
        pad = int(layer.get("padding", 1))
        c = int(layer["in_channels"])
        k = int(layer["out_channels"])
        winograd = self.use_winograd and bool(layer.get("winograd", True)) \
            and stride == 1
        self.to_activation(name, la, layer.get("act_scale_exp"))
        n, _, h, w = self.in_shape
        if winograd:
            plan = winograd_matrices(int(layer.get("plan_m", 2)), 3)
            from .winograd import tiling_spec
            spec = tiling_spec(h, w, plan, pad)
            l_ft = la + plan.ft_ext_bits
            acc = min_acc_bits(l_ft, c, imp) + plan.out_ext_bits + headroom
            if self.ring < l_ft:
                self.chain(f"{name}.fte", "Ext", to_bits=l_ft, role="ft_ext")
                self.ring = l_ft
            self.chain(f"{name}.ft", "FeatureTransform", m=plan.m, r=plan.r,
                       pad=pad)
            self.vb = la + plan.ft_ext_bits
            self.chain(f"{name}.acce", "Ext", to_bits=acc, role="acc_ext")
            self.ring = acc
            e_w = int(layer["win_weight_scale_exp"])
            self.chain(f"{name}.gemm", "Gemm", layout="win",
                       weights=name, m=k, l=c, lw=lw,
                       importance=list(imp.weights), signed=signed,
                       acc_bits=acc, positions=plan.t * plan.t,
                       n_cols=n * spec.tiles, w_scale_exp=e_w, role="gemm")
            self.scale += e_w
            self.vb = min(acc, la + plan.ft_ext_bits + clog2(c)
                          + clog2(imp.total))
            self.chain(f"{name}.ot", "OutputTransform", m=plan.m, r=plan.r,
                       pad=pad, in_h=h, in_w=w)
            self.vb += plan.out_ext_bits
            self.in_shape = (n, k, spec.out_h, spec.out_w)
        else:
            l_gemm = c * 9
            acc = min_acc_bits(la, l_gemm, imp) + headroom
            if self.ring < acc:
                self.chain(f"{name}.acce", "Ext", to_bits=acc, role="acc_ext")
                self.ring = acc
            elif self.ring > acc:
                acc = self.ring
            e_w = int(layer.get("dq_weight_scale_exp", 0))
            oh = (h + 2 * pad - 3) // stride + 1
            ow = (w + 2 * pad - 3) // stride + 1
            self.chain(f"{name}.gemm", "Gemm", layout="direct",
                       weights=f"{name}.direct", m=k, l=l_gemm, lw=lw,
                       importance=list(imp.weights), signed=signed,
                       acc_bits=acc, positions=1, n_cols=n * oh * ow,
                       stride=stride, pad=pad, r=3, w_scale_exp=e_w,
                       role="gemm")
            self.scale += e_w
            self.vb = min(acc, la + clog2(l_gemm) + clog2(imp.total))
            self.in_shape = (n, k, oh, ow)
        self.ring = acc
        if self.with_weights:
            self._register_weights(layer, winograd)

    def _register_weights(self, layer: dict, winograd: bool):
        name = layer["name"]
        imp = model_importance(layer)
        signed = bool(layer.get("signed_weights", True))
        if winograd:
            t = winograd_matrices(int(layer.get("plan_m", 2)), 3).t
            codes = load_qtsr(_resolve(self.model, layer["win_weight_file"])).data
            k, c = codes.shape[0], codes.shape[1]
            self.g.weights[name] = {
                "codes": codes.reshape(k, c, t * t).transpose(2, 0, 1),
                "importance": tuple(imp.weights),
                "signed": signed,
            }
        else:
            codes = load_qtsr(_resolve(self.model, layer["dq_weight_file"])).data
            k = codes.shape[0]
            self.g.weights[f"{name}.direct"] = {
                "codes": codes.reshape(k, -1),
                "importance": tuple(imp.weights),
                "signed": signed,
            }

    def lower_fc(self, layer: dict):
        name = layer["name"]
        lw = int(layer["weight_bits"])
        la = int(layer["act_bits"])
        imp = model_importance(layer)
        signed = bool(layer.get("signed_weights", True))
        feats = int(np.prod(self.in_shape[1:]))
        out_feats = int(layer["out_features"])
        self.to_activation(name, la, layer.get("act_scale_exp"))
        acc = min_acc_bits(la, feats, imp)
        if self.ring < acc:
            self.chain(f"{name}.acce", "Ext", to_bits=acc, role="acc_ext")
            self.ring = acc
        elif self.ring > acc:
            acc = self.ring
        e_w = int(layer.get("dq_weight_scale_exp", 0))
        self.chain(f"{name}.gemm", "Gemm", layout="fc",
                   weights=f"{name}.direct", m=out_feats, l=feats, lw=lw,
                   importance=list(imp.weights), signed=signed, acc_bits=acc,
                   positions=1, n_cols=self.in_shape[0], w_scale_exp=e_w,
                   role="gemm")
        self.scale += e_w
        self.vb = min(acc, la + clog2(feats) + clog2(imp.total))
        self.ring = acc
        self.in_shape = (self.in_shape[0], out_feats)
        if self.with_weights:
            codes = load_qtsr(_resolve(self.model, layer["dq_weight_file"])).data
            self.g.weights[f"{name}.direct"] = {
                "codes": codes.reshape(out_feats, -1),
                "importance": tuple(imp.weights),
                "signed": signed,
            }

    def lower_relu(self, layer: dict):
        name = layer["name"]
        if self.ring > self.carrier or self.scale != self.carrier_scale:
            self.to_carrier(name)
        self.chain(f"{name}", "Relu", role="relu")

    def lower_residual(self, layer: dict):
        name = layer["name"]
        src = layer.get("source", "@input")
        if src not in self.snapshots:
            raise GraphError(f"{name}: unknown residual source {src!r}")
        src_id = self.snapshots[src]
        l_add = self.ring + 1
        main = self.chain(f"{name}.me", "Ext", to_bits=l_add,
                          role="residual_main_align")
        res = self.emit(f"{name}.re", "Ext", [src_id], to_bits=l_add,
                        role="residual_res_align")
        self.cur = self.emit(f"{name}", "ResidualAdd", [main, res])
        self.ring = l_add
        self.vb = min(l_add, self.vb + 1)

    # -- driver ------------------------------------------------------------------

    def lower(self) -> tuple[GraphIR, str]:
        inp = self.model["input"]
        self.in_shape = tuple(inp["shape"])
        self.ring = int(inp["bits"])
        self.scale = int(inp.get("scale_exp", 0))
        self.vb = self.ring
        if self.ring != self.carrier:
            raise GraphError("model input must live in the carrier domain")
        self.cur = self.emit("input", "Input", [], shape=list(self.in_shape),
                             bits=self.ring, scale_exp=self.scale)
        self.snapshots["@input"] = self.cur
        layer_list = self.model["layers"]
        for i, layer in enumerate(layer_list):
            kind = layer["kind"]
            if kind == "conv3x3":
                # one extra accumulator bit when a residual carry follows,
                # so the simplified residual protocol stays wrap-free
                nxt = layer_list[i + 1]["kind"] if i + 1 < len(layer_list) else ""
                self.lower_conv(layer, headroom=1 if nxt == "residual_add" else 0)
            elif kind == "fc":
                self.lower_fc(layer)
            elif kind == "relu":
                self.lower_relu(layer)
            elif kind == "residual_add":
                self.lower_residual(layer)
            elif kind in ("input", "output"):
                continue
            else:
                raise UnsupportedPlan(f"unknown layer kind {kind!r}")
            self.snapshots[layer["name"]] = self.cur
        if self.ring > self.carrier or self.scale != self.carrier_scale:
            self.to_carrier("out")
        out = self.emit("output", "Output", [self.cur])
        infer(self.g)
        return self.g, out


def lower_model(model: dict, use_winograd: bool = True,
                with_weights: bool = True) -> GraphIR:
    """Lower a loaded model to the (unoptimized) protocol graph."""
    g, _ = _Lowering(model, use_winograd, with_weights).lower()
    return g


def load_input(model: dict) -> QTensor:
    return load_qtsr(_resolve(model, model["input"]["file"]))
