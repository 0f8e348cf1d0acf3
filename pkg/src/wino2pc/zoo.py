"""Bundled example models: deterministic generators for tests and demos.

Two multi-layer benchmarks shaped like the common private-inference
targets, scaled to 16x16 so a full two-party run stays laptop-fast:

  * minionn16: a 7-conv stack with a small classifier head (W4A4).
  * resnet16:  two residual blocks at 16x16, W2A6, 8-bit residual stream.

Plus single-conv models with random shapes and bit widths for the oracle
equivalence sweeps.  Every generator writes a complete model directory
(JSON + QTSR tensors) and runs the offline weight transformation.
"""

from __future__ import annotations

import os

import numpy as np

from .models import CARRIER_BITS, float_carrier, save_model, transform_weights
from .qtensor import QTensor, QuantParams, save_qtsr


def _write_weights(path: str, rng: np.random.Generator, shape,
                   spread: float = 0.05) -> None:
    w = rng.normal(0.0, spread, size=shape)
    from .qtensor import save_qtsr as _save

    _save(path, float_carrier(w))


def _write_input(path: str, rng: np.random.Generator, shape,
                 scale_exp: int = 0) -> None:
    data = rng.integers(-(1 << (CARRIER_BITS - 1)),
                        (1 << (CARRIER_BITS - 1)), size=shape)
    save_qtsr(path, QTensor(data, QuantParams(CARRIER_BITS, scale_exp)))


def _conv(name: str, c: int, k: int, lw: int, la: int, stride: int = 1,
          winograd: bool = True) -> dict:
    return {
        "name": name, "kind": "conv3x3", "in_channels": c, "out_channels": k,
        "stride": stride, "padding": 1, "weight_file": f"{name}.w.qtsr",
        "weight_bits": lw, "act_bits": la, "act_scale_exp": None,
        "bit_importance": None, "signed_weights": True, "plan_m": 2,
        "winograd": winograd,
    }


def write_single_conv(path: str, seed: int, lw: int, la: int,
                      c: int | None = None, k: int | None = None,
                      h: int | None = None, with_relu: bool = True) -> str:
    """One random conv layer (optionally followed by ReLU); returns json path."""
    os.makedirs(path, exist_ok=True)
    rng = np.random.default_rng(seed)
    c = c or int(rng.integers(1, 17))
    k = k or int(rng.integers(1, 17))
    h = h or int(rng.integers(4, 17))
    layers = [_conv("conv", c, k, lw, la)]
    if with_relu:
        layers.append({"name": "relu", "kind": "relu"})
    model = {
        "name": f"single_w{lw}a{la}_s{seed}",
        "carrier_bits": CARRIER_BITS,
        "input": {"file": "input.qtsr", "shape": [1, c, h, h],
                  "bits": CARRIER_BITS, "scale_exp": 0},
        "layers": layers,
        "output": {"file": "output.qtsr"},
    }
    _write_weights(os.path.join(path, "conv.w.qtsr"), rng, (k, c, 3, 3))
    _write_input(os.path.join(path, "input.qtsr"), rng, (1, c, h, h))
    json_path = os.path.join(path, "model.json")
    save_model(model, json_path)
    transform_weights(json_path)
    return json_path


def write_minionn16(path: str, seed: int = 7) -> str:
    """Seven 3x3 convs with ReLUs and a 10-way classifier head, W4A4."""
    os.makedirs(path, exist_ok=True)
    rng = np.random.default_rng(seed)
    chans = [3, 8, 8, 16, 16, 16, 16, 16]
    layers = []
    for i in range(7):
        layers.append(_conv(f"conv{i + 1}", chans[i], chans[i + 1], 4, 4))
        layers.append({"name": f"relu{i + 1}", "kind": "relu"})
    layers.append({
        "name": "fc", "kind": "fc", "out_features": 10,
        "weight_file": "fc.w.qtsr", "weight_bits": 4, "act_bits": 4,
        "act_scale_exp": None, "bit_importance": None, "signed_weights": True,
    })
    model = {
        "name": "minionn16",
        "carrier_bits": CARRIER_BITS,
        "input": {"file": "input.qtsr", "shape": [1, 3, 16, 16],
                  "bits": CARRIER_BITS, "scale_exp": 0},
        "layers": layers,
        "output": {"file": "output.qtsr"},
    }
    for i in range(7):
        _write_weights(os.path.join(path, f"conv{i + 1}.w.qtsr"), rng,
                       (chans[i + 1], chans[i], 3, 3))
    _write_weights(os.path.join(path, "fc.w.qtsr"), rng, (10, 16 * 16 * 16))
    _write_input(os.path.join(path, "input.qtsr"), rng, (1, 3, 16, 16))
    json_path = os.path.join(path, "model.json")
    save_model(model, json_path)
    transform_weights(json_path)
    return json_path


def write_resnet16(path: str, seed: int = 11, channels: int = 64,
                   lw: int = 2, la: int = 6) -> str:
    """Two residual blocks at 16x16: conv-relu-conv-add-relu, twice."""
    os.makedirs(path, exist_ok=True)
    rng = np.random.default_rng(seed)
    c = channels
    layers = [
        _conv("b1c1", c, c, lw, la),
        {"name": "b1r1", "kind": "relu"},
        _conv("b1c2", c, c, lw, la),
        {"name": "b1add", "kind": "residual_add", "source": "@input"},
        {"name": "b1r2", "kind": "relu"},
        _conv("b2c1", c, c, lw, la),
        {"name": "b2r1", "kind": "relu"},
        _conv("b2c2", c, c, lw, la),
        {"name": "b2add", "kind": "residual_add", "source": "b1r2"},
        {"name": "b2r2", "kind": "relu"},
    ]
    model = {
        "name": f"resnet16_c{c}_w{lw}a{la}",
        "carrier_bits": CARRIER_BITS,
        "input": {"file": "input.qtsr", "shape": [1, c, 16, 16],
                  "bits": CARRIER_BITS, "scale_exp": 0},
        "layers": layers,
        "output": {"file": "output.qtsr"},
    }
    for name in ("b1c1", "b1c2", "b2c1", "b2c2"):
        _write_weights(os.path.join(path, f"{name}.w.qtsr"), rng, (c, c, 3, 3))
    _write_input(os.path.join(path, "input.qtsr"), rng, (1, c, 16, 16))
    json_path = os.path.join(path, "model.json")
    save_model(model, json_path)
    transform_weights(json_path)
    return json_path
