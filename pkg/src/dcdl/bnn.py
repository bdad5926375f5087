"""Binary-activation CNN with straight-through training.

The network family is fixed: convolutions with real-valued weights, sign
activations producing {-1, +1}, non-overlapping max pooling (which on
binary inputs is a logical OR), and one final dense layer with dropout.
Gradients pass through the sign via the clipped identity, so weights stay
real while every inter-layer signal a rule can attach to is binary.

Binary planes enter as bits b and are mapped to 2b - 1 before the first
convolution.  Flattening order everywhere is (channel, row, column), the
same flat indexing the bit-packed types use.
"""

from __future__ import annotations

import base64
import copy
import json
from dataclasses import dataclass, field

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .binarize import BitPlane
from .errors import ContractError, ModelFormatError, TrainingFailure


# --- architecture ------------------------------------------------------------

@dataclass(frozen=True)
class Conv:
    filters: int
    fh: int
    fw: int
    stride: int = 1


@dataclass(frozen=True)
class Sign:
    pass


@dataclass(frozen=True)
class MaxPool:
    ph: int
    pw: int


@dataclass(frozen=True)
class Dense:
    units: int
    dropout_rate: float = 0.0
    fixed_weights: tuple | None = None


@dataclass(frozen=True)
class BnnArchitecture:
    layers: tuple
    input_shape: tuple  # (channels, height, width)

    def __post_init__(self):
        if not self.layers or not isinstance(self.layers[-1], Dense):
            raise ContractError("architecture must end with its single Dense layer")
        if sum(isinstance(l, Dense) for l in self.layers) != 1:
            raise ContractError("exactly one Dense layer is allowed")
        for i, layer in enumerate(self.layers):
            if isinstance(layer, Conv):
                for nxt in self.layers[i + 1:]:
                    if isinstance(nxt, Sign):
                        break
                    if isinstance(nxt, (Conv, Dense)):
                        raise ContractError(
                            "every Conv needs a Sign before the next Conv/Dense "
                            "(rule extraction requires binary inter-layer signals)")
        self.output_shapes()  # geometry must chain

    def output_shapes(self) -> list[tuple]:
        """Shape after each layer; raises on impossible geometry."""
        shapes = []
        c, h, w = self.input_shape
        for layer in self.layers:
            if isinstance(layer, Conv):
                if layer.fh > h or layer.fw > w:
                    raise ContractError(
                        f"filter {layer.fh}x{layer.fw} larger than input {h}x{w}")
                h = (h - layer.fh) // layer.stride + 1
                w = (w - layer.fw) // layer.stride + 1
                c = layer.filters
            elif isinstance(layer, MaxPool):
                if h % layer.ph or w % layer.pw:
                    raise ContractError(
                        f"pool {layer.ph}x{layer.pw} does not divide plane {h}x{w}")
                h //= layer.ph
                w //= layer.pw
            elif isinstance(layer, Dense):
                shapes.append((layer.units,))
                continue
            shapes.append((c, h, w))
        return shapes


@dataclass
class TrainParams:
    learning_rate: float = 0.01
    momentum: float = 0.9
    batch_size: int = 64
    max_epochs: int = 30
    patience: int = 5


@dataclass
class BnnModel:
    architecture: BnnArchitecture
    weights: list  # per layer: {"w": array, "b": array} for Conv/Dense, None otherwise
    hparams: TrainParams = field(default_factory=TrainParams)
    seed: int = 0

    def copy_weights(self) -> list:
        return copy.deepcopy(self.weights)


def default_architecture(input_shape, filters1: int = 8, filters2: int = 8,
                         filter_size: int = 3, pool: int = 2,
                         dropout: float = 0.5) -> BnnArchitecture:
    """Two conv blocks, max pooling, two-unit dense head."""
    return BnnArchitecture(
        layers=(
            Conv(filters1, filter_size, filter_size, 1),
            Sign(),
            Conv(filters2, filter_size, filter_size, 1),
            MaxPool(pool, pool),
            Sign(),
            Dense(2, dropout_rate=dropout),
        ),
        input_shape=tuple(input_shape),
    )


def visualization_architecture(input_shape) -> BnnArchitecture:
    """One filter as large as the image, then a fixed [1, 0] dense readout."""
    c, h, w = input_shape
    return BnnArchitecture(
        layers=(
            Conv(1, h, w, 1),
            Sign(),
            Dense(2, dropout_rate=0.0, fixed_weights=(1.0, 0.0)),
        ),
        input_shape=tuple(input_shape),
    )


def build_model(arch: BnnArchitecture, hparams: TrainParams | None = None,
                seed: int = 0) -> BnnModel:
    """Initialize real-valued weights from the seed."""
    rng = np.random.default_rng(np.random.SeedSequence(seed, spawn_key=(0,)))
    weights = []
    shapes = arch.output_shapes()
    in_shape = arch.input_shape
    for i, layer in enumerate(arch.layers):
        if isinstance(layer, Conv):
            fan_in = in_shape[0] * layer.fh * layer.fw
            w = rng.normal(0.0, 1.0 / np.sqrt(fan_in),
                           size=(layer.filters, in_shape[0], layer.fh, layer.fw))
            weights.append({"w": w, "b": np.zeros(layer.filters)})
        elif isinstance(layer, Dense):
            d = int(np.prod(in_shape))
            if layer.fixed_weights is not None:
                w = np.asarray(layer.fixed_weights, dtype=np.float64).reshape(d, layer.units)
            else:
                w = rng.normal(0.0, 1.0 / np.sqrt(d), size=(d, layer.units))
            weights.append({"w": w, "b": np.zeros(layer.units)})
        else:
            weights.append(None)
        in_shape = shapes[i]
    return BnnModel(architecture=arch, weights=weights,
                    hparams=hparams or TrainParams(), seed=seed)


# --- primitive ops -----------------------------------------------------------

def sign_forward(x):
    """B(x) = 2 H(x) - 1 with H(0) = 1, elementwise."""
    return np.where(np.asarray(x, dtype=np.float64) >= 0.0, 1.0, -1.0)


def sign_backward(upstream_grad, x):
    """Clipped straight-through: pass the gradient where |x| <= 1, else 0."""
    return np.where(np.abs(x) <= 1.0, upstream_grad, 0.0)


def _im2col(x, fh, fw, stride):
    n, c, h, w = x.shape
    if fh > h or fw > w:
        raise ContractError(f"filter {fh}x{fw} larger than input {h}x{w}")
    win = sliding_window_view(x, (fh, fw), axis=(2, 3))[:, :, ::stride, ::stride]
    oh, ow = win.shape[2], win.shape[3]
    cols = win.transpose(0, 2, 3, 1, 4, 5).reshape(n * oh * ow, c * fh * fw)
    return np.ascontiguousarray(cols), oh, ow


def conv_forward(x, weights, bias=None, stride: int = 1):
    """VALID cross-correlation of a {-1,+1} plane batch with real filters.

    x: (N, C, H, W) or (C, H, W); weights: (F, C, fh, fw).
    """
    x = np.asarray(x, dtype=np.float64)
    single = x.ndim == 3
    if single:
        x = x[None]
    f, c, fh, fw = weights.shape
    if c != x.shape[1]:
        raise ContractError(f"filter expects {c} channels, input has {x.shape[1]}")
    cols, oh, ow = _im2col(x, fh, fw, stride)
    out = cols @ weights.reshape(f, -1).T
    if bias is not None:
        out += bias
    out = out.reshape(x.shape[0], oh, ow, f).transpose(0, 3, 1, 2)
    return out[0] if single else out


def _conv_backward(dout, cols, x_shape, weights, stride):
    n, c, h, w = x_shape
    f, _, fh, fw = weights.shape
    oh, ow = dout.shape[2], dout.shape[3]
    dout2 = dout.transpose(0, 2, 3, 1).reshape(-1, f)
    dw = (dout2.T @ cols).reshape(weights.shape)
    db = dout2.sum(axis=0)
    dcols = (dout2 @ weights.reshape(f, -1)).reshape(n, oh, ow, c, fh, fw)
    dcols = dcols.transpose(0, 3, 4, 5, 1, 2)  # (N, C, fh, fw, OH, OW)
    dx = np.zeros(x_shape)
    for u in range(fh):
        for v in range(fw):
            dx[:, :, u:u + stride * oh:stride, v:v + stride * ow:stride] += dcols[:, :, u, v]
    return dx, dw, db


def maxpool_forward(x, ph: int, pw: int):
    """Non-overlapping max pooling; the binary-plane counterpart of a logical OR."""
    x = np.asarray(x, dtype=np.float64)
    single = x.ndim == 3
    if single:
        x = x[None]
    n, c, h, w = x.shape
    if h % ph or w % pw:
        raise ContractError(f"pool {ph}x{pw} does not divide plane {h}x{w}")
    windows = x.reshape(n, c, h // ph, ph, w // pw, pw).transpose(0, 1, 2, 4, 3, 5)
    windows = windows.reshape(n, c, h // ph, w // pw, ph * pw)
    out = windows.max(axis=-1)
    return out[0] if single else out


def _maxpool_forward_train(x, ph, pw):
    n, c, h, w = x.shape
    windows = x.reshape(n, c, h // ph, ph, w // pw, pw).transpose(0, 1, 2, 4, 3, 5)
    windows = windows.reshape(n, c, h // ph, w // pw, ph * pw)
    idx = windows.argmax(axis=-1)
    return windows.max(axis=-1), idx


def _maxpool_backward(dout, idx, x_shape, ph, pw):
    n, c, h, w = x_shape
    dwin = np.zeros((n, c, h // ph, w // pw, ph * pw))
    np.put_along_axis(dwin, idx[..., None], dout[..., None], axis=-1)
    dwin = dwin.reshape(n, c, h // ph, w // pw, ph, pw).transpose(0, 1, 2, 4, 3, 5)
    return dwin.reshape(x_shape)


def softmax_cross_entropy(logits, classes):
    z = logits - logits.max(axis=1, keepdims=True)
    expz = np.exp(z)
    probs = expz / expz.sum(axis=1, keepdims=True)
    n = logits.shape[0]
    loss = float(-np.log(probs[np.arange(n), classes] + 1e-300).mean())
    dlogits = probs.copy()
    dlogits[np.arange(n), classes] -= 1.0
    return loss, dlogits / n


# --- forward / backward engine -----------------------------------------------

def _forward(model: BnnModel, x, train_mode: bool = False,
             rng: np.random.Generator | None = None, record: dict | None = None):
    """Run the network; returns (logits, caches).  When record is given, it is
    filled with per-layer sign outputs and per-conv binarized outputs."""
    caches = []
    for li, layer in enumerate(model.architecture.layers):
        if isinstance(layer, Conv):
            wb = model.weights[li]
            cols, oh, ow = _im2col(x, layer.fh, layer.fw, layer.stride)
            out = (cols @ wb["w"].reshape(layer.filters, -1).T + wb["b"])
            out = out.reshape(x.shape[0], oh, ow, layer.filters).transpose(0, 3, 1, 2)
            caches.append(("conv", cols, x.shape))
            if record is not None:
                record.setdefault("conv_sign", []).append(sign_forward(out))
            x = out
        elif isinstance(layer, Sign):
            caches.append(("sign", x))
            x = sign_forward(x)
            if record is not None:
                record.setdefault("sign", []).append(x)
        elif isinstance(layer, MaxPool):
            if x.shape[2] % layer.ph or x.shape[3] % layer.pw:
                raise ContractError(
                    f"pool {layer.ph}x{layer.pw} does not divide plane {x.shape[2]}x{x.shape[3]}")
            out, idx = _maxpool_forward_train(x, layer.ph, layer.pw)
            caches.append(("pool", idx, x.shape))
            x = out
        elif isinstance(layer, Dense):
            wb = model.weights[li]
            flat = x.reshape(x.shape[0], -1)
            if train_mode and layer.dropout_rate > 0.0:
                keep = 1.0 - layer.dropout_rate
                mask = (rng.random(flat.shape) < keep) / keep
                flat = flat * mask
            else:
                mask = None
            caches.append(("dense", flat, mask, x.shape))
            x = flat @ wb["w"] + wb["b"]
    return x, caches


def _backward(model: BnnModel, caches, dlogits):
    """Gradients for every Conv/Dense layer, aligned with model.weights."""
    grads = [None] * len(model.architecture.layers)
    dx = dlogits
    for li in range(len(model.architecture.layers) - 1, -1, -1):
        layer = model.architecture.layers[li]
        cache = caches[li]
        if isinstance(layer, Dense):
            _, flat, mask, x_shape = cache
            wb = model.weights[li]
            dw = flat.T @ dx
            db = dx.sum(axis=0)
            dflat = dx @ wb["w"].T
            if mask is not None:
                dflat = dflat * mask
            grads[li] = {"w": dw, "b": db}
            dx = dflat.reshape(x_shape)
        elif isinstance(layer, Sign):
            dx = sign_backward(dx, cache[1])
        elif isinstance(layer, MaxPool):
            _, idx, x_shape = cache
            dx = _maxpool_backward(dx, idx, x_shape, layer.ph, layer.pw)
        elif isinstance(layer, Conv):
            _, cols, x_shape = cache
            dx, dw, db = _conv_backward(dx, cols, x_shape, model.weights[li]["w"], layer.stride)
            grads[li] = {"w": dw, "b": db}
    return grads, dx


def planes_to_pm1(planes) -> np.ndarray:
    """Stack BitPlanes into a (N, C, H, W) array over {-1, +1}."""
    arrs = [p.to_bool_array() for p in planes]
    return np.stack(arrs).astype(np.float64) * 2.0 - 1.0


def _as_input_array(model: BnnModel, data) -> np.ndarray:
    if isinstance(data, np.ndarray):
        return data.astype(np.float64)
    return planes_to_pm1(data)


def predict_logits(model: BnnModel, data, chunk: int = 512) -> np.ndarray:
    x = _as_input_array(model, data)
    outs = []
    for start in range(0, x.shape[0], chunk):
        logits, _ = _forward(model, x[start:start + chunk])
        outs.append(logits)
    return np.concatenate(outs)


def predict_classes(model: BnnModel, data) -> np.ndarray:
    return predict_logits(model, data).argmax(axis=1)


def mean_loss(model: BnnModel, data, classes, chunk: int = 512) -> float:
    x = _as_input_array(model, data)
    total, count = 0.0, 0
    for start in range(0, x.shape[0], chunk):
        logits, _ = _forward(model, x[start:start + chunk])
        loss, _ = softmax_cross_entropy(logits, classes[start:start + chunk])
        total += loss * logits.shape[0]
        count += logits.shape[0]
    return total / count


def train(model: BnnModel, train_planes, train_labels, holdout_planes, holdout_labels,
          verbose: bool = False) -> BnnModel:
    """Mini-batch gradient descent with momentum and holdout early stopping.

    Labels are one-vs-all booleans (True = class index 1).  Returns a new
    model holding the weights with the best holdout loss seen.
    """
    hp = model.hparams
    x = _as_input_array(model, train_planes)
    y = np.asarray(train_labels, dtype=bool).astype(np.int64)
    x_hold = _as_input_array(model, holdout_planes)
    y_hold = np.asarray(holdout_labels, dtype=bool).astype(np.int64)

    rng = np.random.default_rng(np.random.SeedSequence(model.seed, spawn_key=(1,)))
    weights = copy.deepcopy(model.weights)
    work = BnnModel(model.architecture, weights, hp, model.seed)
    fixed = [isinstance(l, Dense) and l.fixed_weights is not None
             for l in model.architecture.layers]
    velocity = [None if wb is None else {"w": np.zeros_like(wb["w"]), "b": np.zeros_like(wb["b"])}
                for wb in weights]

    best_loss = np.inf
    best_weights = copy.deepcopy(weights)
    stale = 0
    for epoch in range(hp.max_epochs):
        order = rng.permutation(x.shape[0])
        for start in range(0, x.shape[0], hp.batch_size):
            batch = order[start:start + hp.batch_size]
            logits, caches = _forward(work, x[batch], train_mode=True, rng=rng)
            loss, dlogits = softmax_cross_entropy(logits, y[batch])
            if not np.isfinite(loss):
                raise TrainingFailure(f"non-finite loss {loss} at epoch {epoch}")
            grads, _ = _backward(work, caches, dlogits)
            for li, g in enumerate(grads):
                if g is None or fixed[li]:
                    continue
                v = velocity[li]
                v["w"] = hp.momentum * v["w"] - hp.learning_rate * g["w"]
                v["b"] = hp.momentum * v["b"] - hp.learning_rate * g["b"]
                weights[li]["w"] += v["w"]
                weights[li]["b"] += v["b"]
        hold_loss = mean_loss(work, x_hold, y_hold)
        if not np.isfinite(hold_loss):
            raise TrainingFailure(f"non-finite holdout loss at epoch {epoch}")
        if verbose:
            acc = float((predict_classes(work, x_hold) == y_hold).mean())
            print(f"epoch {epoch}: holdout loss {hold_loss:.4f} acc {acc:.4f}")
        if hold_loss < best_loss - 1e-9:
            best_loss = hold_loss
            best_weights = copy.deepcopy(weights)
            stale = 0
        else:
            stale += 1
            if stale >= hp.patience:
                break
    return BnnModel(model.architecture, best_weights, hp, model.seed)


# --- activation traces ---------------------------------------------------------

@dataclass
class ActivationTrace:
    """Binary views of a forward pass, packed per image.

    sign_planes[j][i] is the boolean output of the j-th Sign layer for image i;
    conv_sign_planes[j][i] binarizes the j-th Conv layer's output at the conv's
    own resolution (identical to the Sign signal once any interposed pooling is
    ORed, since max commutes with the sign).  labels are the argmax classes.
    """

    sign_planes: list
    conv_sign_planes: list
    labels: np.ndarray


def _to_bitplanes(batch_pm1: np.ndarray) -> list[BitPlane]:
    return [BitPlane.from_bool_array(batch_pm1[i] > 0) for i in range(batch_pm1.shape[0])]


def record_traces(model: BnnModel, planes, chunk: int = 512) -> ActivationTrace:
    x = _as_input_array(model, planes)
    n_sign = sum(isinstance(l, Sign) for l in model.architecture.layers)
    n_conv = sum(isinstance(l, Conv) for l in model.architecture.layers)
    sign_planes = [[] for _ in range(n_sign)]
    conv_sign_planes = [[] for _ in range(n_conv)]
    labels = []
    for start in range(0, x.shape[0], chunk):
        record: dict = {}
        logits, _ = _forward(model, x[start:start + chunk], record=record)
        labels.append(logits.argmax(axis=1))
        for j, arr in enumerate(record.get("sign", [])):
            sign_planes[j].extend(_to_bitplanes(arr))
        for j, arr in enumerate(record.get("conv_sign", [])):
            conv_sign_planes[j].extend(_to_bitplanes(arr))
    return ActivationTrace(sign_planes, conv_sign_planes, np.concatenate(labels))


# --- serialization -------------------------------------------------------------

MODEL_FORMAT_VERSION = 1


def _encode_array(arr: np.ndarray) -> dict:
    return {
        "shape": list(arr.shape),
        "data": base64.b64encode(arr.astype("<f4").tobytes()).decode("ascii"),
    }


def _decode_array(obj) -> np.ndarray:
    raw = base64.b64decode(obj["data"])
    return np.frombuffer(raw, dtype="<f4").reshape(obj["shape"]).astype(np.float64)


def _layer_to_json(layer) -> dict:
    if isinstance(layer, Conv):
        return {"type": "conv", "filters": layer.filters, "fh": layer.fh,
                "fw": layer.fw, "stride": layer.stride}
    if isinstance(layer, Sign):
        return {"type": "sign"}
    if isinstance(layer, MaxPool):
        return {"type": "maxpool", "ph": layer.ph, "pw": layer.pw}
    if isinstance(layer, Dense):
        return {"type": "dense", "units": layer.units, "dropout_rate": layer.dropout_rate,
                "fixed_weights": list(layer.fixed_weights) if layer.fixed_weights else None}
    raise ModelFormatError(f"unknown layer {layer!r}")


def _layer_from_json(obj):
    t = obj.get("type")
    if t == "conv":
        return Conv(obj["filters"], obj["fh"], obj["fw"], obj["stride"])
    if t == "sign":
        return Sign()
    if t == "maxpool":
        return MaxPool(obj["ph"], obj["pw"])
    if t == "dense":
        fw = obj.get("fixed_weights")
        return Dense(obj["units"], obj["dropout_rate"], tuple(fw) if fw else None)
    raise ModelFormatError(f"unknown layer type {t!r}")


def model_to_json(model: BnnModel) -> str:
    doc = {
        "format": "dcdl-bnn",
        "version": MODEL_FORMAT_VERSION,
        "input_shape": list(model.architecture.input_shape),
        "layers": [_layer_to_json(l) for l in model.architecture.layers],
        "weights": [None if wb is None else {"w": _encode_array(wb["w"]), "b": _encode_array(wb["b"])}
                    for wb in model.weights],
        "hparams": {
            "learning_rate": model.hparams.learning_rate,
            "momentum": model.hparams.momentum,
            "batch_size": model.hparams.batch_size,
            "max_epochs": model.hparams.max_epochs,
            "patience": model.hparams.patience,
        },
        "seed": model.seed,
    }
    return json.dumps(doc, indent=1, sort_keys=True)


def model_from_json(text: str) -> BnnModel:
    try:
        doc = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ModelFormatError(f"model document is not valid JSON: {exc}") from exc
    if doc.get("format") != "dcdl-bnn":
        raise ModelFormatError(f"not a network model document (format={doc.get('format')!r})")
    if doc.get("version") != MODEL_FORMAT_VERSION:
        raise ModelFormatError(f"unsupported model version {doc.get('version')!r}")
    arch = BnnArchitecture(
        layers=tuple(_layer_from_json(l) for l in doc["layers"]),
        input_shape=tuple(doc["input_shape"]),
    )
    weights = [None if wb is None else {"w": _decode_array(wb["w"]), "b": _decode_array(wb["b"])}
               for wb in doc["weights"]]
    hp = TrainParams(**doc["hparams"])
    return BnnModel(arch, weights, hp, doc.get("seed", 0))


def save_model(model: BnnModel, path) -> None:
    with open(path, "w") as fh:
        fh.write(model_to_json(model))


def load_model(path) -> BnnModel:
    with open(path) as fh:
        return model_from_json(fh.read())
