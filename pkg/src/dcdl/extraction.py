"""Layerwise and whole-network rule extraction.

The layerwise (decompositional) path mirrors the network: every
convolutional filter is approximated by one window rule fitted to the
filter's binarized outputs, pooling becomes a logical OR over each window,
and the final dense layer becomes one DNF over the flattened plane.  The
instances a layer's search sees are windows of the PREVIOUS approximation's
output, while its labels always come from the network's own binarized
activations.

The whole-network (black-box) path flattens each input image into a single
instance and fits one DNF directly against either the network's predicted
labels or the ground-truth labels.
"""

from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .binarize import BitPlane
from .boolcore import (
    BitDataset,
    DnfFormula,
    eval_formula_batch,
    format_formula,
    pack_bool_matrix,
    parse_formula,
)
from .bnn import BnnModel, Conv, Dense, MaxPool, Sign, record_traces
from .convrules import ConvRule
from .errors import ContractError, RuleParseError
from .sls import SlsParams, sls_search

DEFAULT_MAX_WINDOWS = 200_000

BLACKBOX_MODES = ("nn_prediction", "true_label")


# --- approximation layers ------------------------------------------------------

@dataclass
class ConvLayerApprox:
    rules: list[ConvRule]

    def __post_init__(self):
        if not self.rules:
            raise ContractError("a conv approximation needs at least one rule")
        first = self.rules[0]
        for r in self.rules:
            if (r.fh, r.fw, r.fc, r.stride) != (first.fh, first.fw, first.fc, first.stride):
                raise ContractError("all rules of a layer must share geometry")


@dataclass
class PoolApprox:
    ph: int
    pw: int


@dataclass
class DenseApprox:
    formula: DnfFormula


@dataclass
class DcdlModel:
    layers: list
    input_shape: tuple  # (channels, height, width)

    def __post_init__(self):
        self.validate_chaining()

    def validate_chaining(self) -> None:
        c, h, w = self.input_shape
        for layer in self.layers:
            if isinstance(layer, ConvLayerApprox):
                r = layer.rules[0]
                if r.fc != c:
                    raise ContractError(f"rule expects {r.fc} channels, gets {c}")
                if r.fh > h or r.fw > w:
                    raise ContractError(f"filter {r.fh}x{r.fw} exceeds plane {h}x{w}")
                h = (h - r.fh) // r.stride + 1
                w = (w - r.fw) // r.stride + 1
                c = len(layer.rules)
            elif isinstance(layer, PoolApprox):
                if h % layer.ph or w % layer.pw:
                    raise ContractError(f"pool {layer.ph}x{layer.pw} does not divide {h}x{w}")
                h //= layer.ph
                w //= layer.pw
            elif isinstance(layer, DenseApprox):
                if layer.formula.n != c * h * w:
                    raise ContractError(
                        f"dense formula over {layer.formula.n} variables, plane has {c * h * w}")
            else:
                raise ContractError(f"unknown approximation layer {layer!r}")


# --- boolean plane operations ---------------------------------------------------

def or_pool(plane: BitPlane, ph: int, pw: int) -> BitPlane:
    """Logical OR over non-overlapping ph x pw windows, per channel."""
    vals = plane.to_bool_array()
    c, h, w = vals.shape
    if h % ph or w % pw:
        raise ContractError(f"pool {ph}x{pw} does not divide plane {h}x{w}")
    pooled = vals.reshape(c, h // ph, ph, w // pw, pw).any(axis=(2, 4))
    return BitPlane.from_bool_array(pooled)


def _batch_or_pool(vals: np.ndarray, ph: int, pw: int) -> np.ndarray:
    n, c, h, w = vals.shape
    if h % ph or w % pw:
        raise ContractError(f"pool {ph}x{pw} does not divide plane {h}x{w}")
    return vals.reshape(n, c, h // ph, ph, w // pw, pw).any(axis=(3, 5))


def _batch_windows(vals: np.ndarray, fh: int, fw: int, stride: int):
    """(N, C, H, W) bools -> ((N*P, C*fh*fw) rows, out_h, out_w); window rows are
    grouped image by image, positions row-major within an image."""
    n, c, h, w = vals.shape
    if fh > h or fw > w:
        raise ContractError(f"filter {fh}x{fw} exceeds plane {h}x{w}")
    win = sliding_window_view(vals, (fh, fw), axis=(2, 3))[:, :, ::stride, ::stride]
    oh, ow = win.shape[2], win.shape[3]
    rows = win.transpose(0, 2, 3, 1, 4, 5).reshape(n * oh * ow, c * fh * fw)
    return np.ascontiguousarray(rows), oh, ow


def _apply_conv_approx(vals: np.ndarray, approx: ConvLayerApprox) -> np.ndarray:
    """Evaluate every rule of the layer on a (N, C, H, W) bool batch; output
    (N, R, OH, OW) bools, one channel per rule."""
    r0 = approx.rules[0]
    rows, oh, ow = _batch_windows(vals, r0.fh, r0.fw, r0.stride)
    bits = pack_bool_matrix(rows)
    n = vals.shape[0]
    out = np.zeros((n, len(approx.rules), oh, ow), dtype=bool)
    for j, rule in enumerate(approx.rules):
        out[:, j] = eval_formula_batch(rule.formula, bits).reshape(n, oh, ow)
    return out


def dcdl_forward(dcdl: DcdlModel, vals: np.ndarray) -> np.ndarray:
    """Boolean feed-forward over a (N, C, H, W) batch; returns (N,) labels."""
    for layer in dcdl.layers:
        if isinstance(layer, ConvLayerApprox):
            vals = _apply_conv_approx(vals, layer)
        elif isinstance(layer, PoolApprox):
            vals = _batch_or_pool(vals, layer.ph, layer.pw)
        elif isinstance(layer, DenseApprox):
            flat = vals.reshape(vals.shape[0], -1)
            return eval_formula_batch(layer.formula, pack_bool_matrix(flat))
    raise ContractError("model has no dense approximation layer")


def dcdl_predict(dcdl: DcdlModel, image: BitPlane) -> bool:
    return bool(dcdl_predict_batch(dcdl, [image])[0])


def dcdl_predict_batch(dcdl: DcdlModel, images) -> np.ndarray:
    if isinstance(images, np.ndarray):
        vals = images.astype(bool)
    else:
        vals = np.stack([p.to_bool_array() for p in images])
    c, h, w = dcdl.input_shape
    if vals.shape[1:] != (c, h, w):
        raise ContractError(f"input shape {vals.shape[1:]} != model input {(c, h, w)}")
    return dcdl_forward(dcdl, vals)


# --- training -------------------------------------------------------------------

def _derived_seeds(base_seed: int, *key: int) -> tuple[int, int, int]:
    """Three independent 63-bit seeds named by (layer, filter): search stream,
    train subsample, holdout subsample.  Stable no matter in which order
    filters are processed."""
    ss = np.random.SeedSequence(entropy=base_seed, spawn_key=tuple(key))
    state = ss.generate_state(3, np.uint64)
    return tuple(int(s >> np.uint64(1)) for s in state)


def _subsample(n_total: int, cap: int, seed: int):
    if n_total <= cap:
        return None
    rng = np.random.default_rng(seed)
    return np.sort(rng.choice(n_total, size=cap, replace=False))


def _planes_to_bool_batch(planes) -> np.ndarray:
    return np.stack([p.to_bool_array() for p in planes])


def _trace_channel_labels(trace_planes, channel: int) -> np.ndarray:
    """Flatten one channel of every traced plane, image-major then row-major."""
    return np.concatenate([p.to_bool_array()[channel].reshape(-1) for p in trace_planes])


def dcdl_train(model: BnnModel, train_planes, holdout_planes, sls_params: SlsParams,
               max_windows: int = DEFAULT_MAX_WINDOWS, verbose: bool = False) -> DcdlModel:
    """Approximate every layer of a trained network with rules.

    Per conv filter: instances are the filter-shaped windows of the current
    approximation's output (the dithered inputs for the first layer), labels
    are the network's binarized outputs for that filter at the matching
    positions.  Pooling needs no training.  The dense layer is fitted against
    the network's predicted labels on the flattened plane.  Window datasets
    larger than max_windows are uniformly subsampled with per-filter seeds.
    """
    arch = model.architecture
    trace_train = record_traces(model, train_planes)
    trace_hold = record_traces(model, holdout_planes)

    cur_train = _planes_to_bool_batch(train_planes)
    cur_hold = _planes_to_bool_batch(holdout_planes)
    approx_layers: list = []
    conv_idx = 0

    for li, layer in enumerate(arch.layers):
        if isinstance(layer, Conv):
            rows_tr, oh, ow = _batch_windows(cur_train, layer.fh, layer.fw, layer.stride)
            rows_ho, _, _ = _batch_windows(cur_hold, layer.fh, layer.fw, layer.stride)
            bits_tr = pack_bool_matrix(rows_tr)
            bits_ho = pack_bool_matrix(rows_ho)
            n_vars = rows_tr.shape[1]
            in_channels = cur_train.shape[1]
            rules = []
            for f in range(layer.filters):
                labels_tr = _trace_channel_labels(trace_train.conv_sign_planes[conv_idx], f)
                labels_ho = _trace_channel_labels(trace_hold.conv_sign_planes[conv_idx], f)
                sls_seed, sample_tr, sample_ho = _derived_seeds(sls_params.seed, li, f)
                sel_tr = _subsample(bits_tr.shape[0], max_windows, sample_tr)
                sel_ho = _subsample(bits_ho.shape[0], max_windows, sample_ho)
                train_ds = BitDataset(
                    bits_tr if sel_tr is None else bits_tr[sel_tr],
                    labels_tr if sel_tr is None else labels_tr[sel_tr], n_vars)
                hold_ds = BitDataset(
                    bits_ho if sel_ho is None else bits_ho[sel_ho],
                    labels_ho if sel_ho is None else labels_ho[sel_ho], n_vars)
                res = sls_search(train_ds, hold_ds, replace(sls_params, seed=sls_seed))
                if verbose:
                    print(f"layer {li} filter {f}: validation score "
                          f"{res.best_validation_score}/{len(hold_ds)}")
                rules.append(ConvRule(res.formula, layer.fh, layer.fw, in_channels, layer.stride))
            approx = ConvLayerApprox(rules)
            approx_layers.append(approx)
            cur_train = _apply_conv_approx(cur_train, approx)
            cur_hold = _apply_conv_approx(cur_hold, approx)
            conv_idx += 1
        elif isinstance(layer, MaxPool):
            approx_layers.append(PoolApprox(layer.ph, layer.pw))
            cur_train = _batch_or_pool(cur_train, layer.ph, layer.pw)
            cur_hold = _batch_or_pool(cur_hold, layer.ph, layer.pw)
        elif isinstance(layer, Sign):
            continue  # labels already come from the sign signals
        elif isinstance(layer, Dense):
            flat_tr = cur_train.reshape(cur_train.shape[0], -1)
            flat_ho = cur_hold.reshape(cur_hold.shape[0], -1)
            sls_seed, _, _ = _derived_seeds(sls_params.seed, li, 0)
            train_ds = BitDataset.from_bool_matrix(flat_tr, trace_train.labels == 1)
            hold_ds = BitDataset.from_bool_matrix(flat_ho, trace_hold.labels == 1)
            res = sls_search(train_ds, hold_ds, replace(sls_params, seed=sls_seed))
            if verbose:
                print(f"layer {li} dense: validation score "
                      f"{res.best_validation_score}/{len(hold_ds)}")
            approx_layers.append(DenseApprox(res.formula))

    input_shape = tuple(int(d) for d in (_planes_to_bool_batch(train_planes[:1]).shape[1:]))
    return DcdlModel(approx_layers, input_shape)


def blackbox_train(images, labels, mode: str, sls_params: SlsParams,
                   validation_images=None, validation_labels=None) -> DnfFormula:
    """Fit one DNF to whole flattened images.

    mode tags the provenance of `labels` ("nn_prediction" or "true_label");
    with no validation set, the training set doubles as validation.
    """
    if mode not in BLACKBOX_MODES:
        raise ContractError(f"mode must be one of {BLACKBOX_MODES}, got {mode!r}")
    bits = np.stack([p.as_instance().bits for p in images])
    train = BitDataset(bits, np.asarray(labels, dtype=bool), images[0].n)
    if validation_images is None:
        validation = train
    else:
        vbits = np.stack([p.as_instance().bits for p in validation_images])
        validation = BitDataset(vbits, np.asarray(validation_labels, dtype=bool), images[0].n)
    return sls_search(train, validation, sls_params).formula


# --- serialization -----------------------------------------------------------

DCDL_FORMAT_VERSION = 1


def serialize_dcdl(dcdl: DcdlModel) -> str:
    c, h, w = dcdl.input_shape
    lines = [f"dcdl-model v{DCDL_FORMAT_VERSION}", f"input {c} {h} {w}"]
    for layer in dcdl.layers:
        if isinstance(layer, ConvLayerApprox):
            r0 = layer.rules[0]
            lines.append(f"conv {len(layer.rules)} {r0.fh} {r0.fw} {r0.fc} {r0.stride}")
            lines.extend(format_formula(r.formula) for r in layer.rules)
        elif isinstance(layer, PoolApprox):
            lines.append(f"pool {layer.ph} {layer.pw}")
        elif isinstance(layer, DenseApprox):
            lines.append(f"dense {layer.formula.n}")
            lines.append(format_formula(layer.formula))
    lines.append("end")
    return "\n".join(lines) + "\n"


def parse_dcdl(text: str) -> DcdlModel:
    lines = [l.rstrip() for l in text.splitlines() if l.strip()]
    if not lines or lines[0] != f"dcdl-model v{DCDL_FORMAT_VERSION}":
        raise RuleParseError("not a layerwise rule model document")
    if len(lines) < 3 or not lines[1].startswith("input "):
        raise RuleParseError("missing input geometry line")
    c, h, w = map(int, lines[1].split()[1:])
    layers: list = []
    i = 2
    while i < len(lines):
        head = lines[i]
        if head == "end":
            break
        fields = head.split()
        if fields[0] == "conv":
            count, fh, fw, fc, stride = map(int, fields[1:])
            rules = []
            for j in range(count):
                formula = parse_formula(lines[i + 1 + j], fh * fw * fc)
                rules.append(ConvRule(formula, fh, fw, fc, stride))
            layers.append(ConvLayerApprox(rules))
            i += 1 + count
        elif fields[0] == "pool":
            layers.append(PoolApprox(int(fields[1]), int(fields[2])))
            i += 1
        elif fields[0] == "dense":
            n = int(fields[1])
            layers.append(DenseApprox(parse_formula(lines[i + 1], n)))
            i += 2
        else:
            raise RuleParseError(f"unknown layer header {head!r}")
    else:
        raise RuleParseError("missing end marker")
    return DcdlModel(layers, (c, h, w))


def save_dcdl(dcdl: DcdlModel, path) -> None:
    with open(path, "w") as fh:
        fh.write(serialize_dcdl(dcdl))


def load_dcdl(path) -> DcdlModel:
    with open(path) as fh:
        return parse_dcdl(fh.read())
