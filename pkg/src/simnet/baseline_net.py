"""Fully-connected baseline networks and state extraction.

The trainer consumes triples (U, X, Z) of inputs, post-activation and
pre-activation states collected from a layered net, stacked with the
last layer on top, plus the matching outputs.  Embedding such a net as
an equilibrium model places the layer weights on the block
superdiagonal of A, the first-layer weights in B, and the readout in C;
biases ride along in an appended all-ones input row, so B's last column
collects every hidden bias and D's last column the output bias.
"""

import csv
import gzip
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .implicit_core import Activation, ImplicitModel, _act_from_wire, _act_to_wire
from .matrix_store import (
    as_matrix,
    csr_from_bytes,
    csr_to_bytes,
    inf_norm,
    to_csr,
    to_dense,
)
from .seeding import STREAM_BASELINE_INIT, STREAM_BASELINE_SHUFFLE, derive_rng

NET_MAGIC = b"SIMNET1"
BUNDLE_MAGIC = b"SIMBND1"

_RESCALE_MODES = ("none", "model", "layers")


@dataclass(eq=False)
class LayeredNet:
    """Weights, biases and activation of a feed-forward net.

    ``use_bias`` decides input augmentation; a freshly initialised net
    keeps zero bias vectors but still augments, so the embedding layout
    does not change once training makes them nonzero.
    """

    weights: list
    biases: list
    activation: Activation
    use_bias: bool = True

    def __post_init__(self):
        if not self.weights:
            raise ValueError("need at least one weight matrix")
        if len(self.weights) != len(self.biases):
            raise ValueError("one bias vector per weight matrix")
        self.weights = [as_matrix(w, f"weights[{i}]") for i, w in enumerate(self.weights)]
        self.biases = [
            np.ascontiguousarray(b, dtype=np.float64) for b in self.biases
        ]
        for i, (w, b) in enumerate(zip(self.weights, self.biases)):
            if b.shape != (w.shape[0],):
                raise ValueError(f"bias {i} length must match weight rows")
            if not np.all(np.isfinite(b)):
                raise ValueError(f"bias {i} has non-finite entries")
            if i and w.shape[1] != self.weights[i - 1].shape[0]:
                raise ValueError(f"weights[{i}] does not chain with weights[{i - 1}]")
        if not self.use_bias and any(np.any(b) for b in self.biases):
            raise ValueError("bias-free net carries nonzero biases")

    @property
    def in_dim(self):
        return self.weights[0].shape[1]

    @property
    def out_dim(self):
        return self.weights[-1].shape[0]

    @property
    def hidden_widths(self):
        return [w.shape[0] for w in self.weights[:-1]]

    @property
    def n_states(self):
        return int(sum(self.hidden_widths))

    @property
    def depth(self):
        """Number of weight matrices."""
        return len(self.weights)

    @classmethod
    def initialize(cls, widths, activation=Activation("relu"), seed=0, use_bias=True):
        """Uniform +-sqrt(6/(fan_in+fan_out)) weights, zero biases."""
        if len(widths) < 2:
            raise ValueError("widths must list input and output sizes")
        rng = derive_rng(seed, STREAM_BASELINE_INIT)
        weights, biases = [], []
        for fan_in, fan_out in zip(widths[:-1], widths[1:]):
            bound = np.sqrt(6.0 / (fan_in + fan_out))
            weights.append(rng.uniform(-bound, bound, size=(fan_out, fan_in)))
            biases.append(np.zeros(fan_out))
        return cls(weights, biases, activation, use_bias)


def forward(net, U):
    """Per-layer pre/post activations and the logits.

    Returns ``(Z_list, X_list, Yhat)`` with one entry per hidden layer,
    ordered first layer first.
    """
    U = as_matrix(U, "U")
    if U.shape[0] != net.in_dim:
        raise ValueError(f"inputs must have {net.in_dim} rows, got {U.shape[0]}")
    phi = net.activation
    z_list, x_list = [], []
    x = U
    for w, b in zip(net.weights[:-1], net.biases[:-1]):
        z = w @ x + b[:, None]
        x = phi(z)
        z_list.append(z)
        x_list.append(x)
    yhat = net.weights[-1] @ x + net.biases[-1][:, None]
    return z_list, x_list, yhat


def logits(net, U):
    return forward(net, U)[2]


def accuracy(net, U, labels):
    labels = np.asarray(labels)
    pred = np.argmax(logits(net, U), axis=0)
    return float(np.mean(pred == labels))


def _softmax(scores):
    shifted = scores - scores.max(axis=0, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=0, keepdims=True)


def train_baseline(net, U, labels, epochs=10, batch_size=64, learning_rate=0.1, seed=0):
    """Mini-batch SGD on softmax cross-entropy; returns a new net.

    Deterministic for a fixed seed: the epoch shuffles come from
    dedicated counter streams.  Zero epochs returns a copy of the
    initialisation.
    """
    U = as_matrix(U, "U")
    labels = np.asarray(labels, dtype=np.int64)
    m = U.shape[1]
    if labels.shape != (m,):
        raise ValueError("one label per input column")
    if labels.size and (labels.min() < 0 or labels.max() >= net.out_dim):
        raise ValueError("label out of range")
    if epochs < 0 or batch_size < 1 or learning_rate <= 0:
        raise ValueError("bad training hyperparameters")
    weights = [w.copy() for w in net.weights]
    biases = [b.copy() for b in net.biases]
    phi = net.activation
    for epoch in range(epochs):
        order = derive_rng(seed, STREAM_BASELINE_SHUFFLE, epoch).permutation(m)
        for start in range(0, m, batch_size):
            batch = order[start : start + batch_size]
            ub, yb = U[:, batch], labels[batch]
            zs, xs = [], []
            x = ub
            for w, b in zip(weights[:-1], biases[:-1]):
                z = w @ x + b[:, None]
                x = phi(z)
                zs.append(z)
                xs.append(x)
            scores = weights[-1] @ x + biases[-1][:, None]
            delta = _softmax(scores)
            delta[yb, np.arange(len(yb))] -= 1.0
            delta /= len(yb)
            grads_w, grads_b = [], []
            for layer in range(len(weights) - 1, -1, -1):
                below = xs[layer - 1] if layer > 0 else ub
                grads_w.append(delta @ below.T)
                grads_b.append(delta.sum(axis=1))
                if layer > 0:
                    delta = (weights[layer].T @ delta) * phi.derivative(zs[layer - 1])
            for layer, (gw, gb) in enumerate(zip(reversed(grads_w), reversed(grads_b))):
                weights[layer] -= learning_rate * gw
                if net.use_bias:
                    biases[layer] -= learning_rate * gb
    return LayeredNet(weights, biases, net.activation, net.use_bias)


def input_gradient(net, u, label):
    """Gradient of per-sample cross-entropy with respect to the input.

    Accepts a single input vector with an integer label or a matrix of
    input columns with a label array; the per-column gradients do not
    depend on how columns are batched.
    """
    u_arr = np.asarray(u, dtype=np.float64)
    single = u_arr.ndim == 1
    U = u_arr[:, None] if single else u_arr
    labels = np.atleast_1d(np.asarray(label, dtype=np.int64))
    if labels.shape != (U.shape[1],):
        raise ValueError("one label per input column")
    zs, _, scores = forward(net, U)
    delta = _softmax(scores)
    delta[labels, np.arange(U.shape[1])] -= 1.0
    phi = net.activation
    for layer in range(len(net.weights) - 1, 0, -1):
        delta = (net.weights[layer].T @ delta) * phi.derivative(zs[layer - 1])
    grad = net.weights[0].T @ delta
    return grad[:, 0] if single else grad


@dataclass(eq=False)
class StateBundle:
    """Design matrices for the row problems: inputs, states, outputs."""

    U: np.ndarray
    X: np.ndarray
    Z: np.ndarray
    Yhat: np.ndarray

    def __post_init__(self):
        self.U = as_matrix(self.U, "U")
        self.X = as_matrix(self.X, "X")
        self.Z = as_matrix(self.Z, "Z")
        self.Yhat = as_matrix(self.Yhat, "Yhat")
        m = self.U.shape[1]
        if self.X.shape[1] != m or self.Z.shape[1] != m or self.Yhat.shape[1] != m:
            raise ValueError("all blocks must share the column count")
        if self.X.shape[0] != self.Z.shape[0]:
            raise ValueError("X and Z must have matching row counts")

    @property
    def n_state(self):
        return self.X.shape[0]

    @property
    def n_columns(self):
        return self.U.shape[1]


def augment_inputs(net, U):
    """Append the all-ones row iff the net uses biases."""
    U = as_matrix(U, "U")
    if U.shape[0] != net.in_dim:
        raise ValueError(f"inputs must have {net.in_dim} rows, got {U.shape[0]}")
    if not net.use_bias:
        return U.copy()
    return np.vstack([U, np.ones((1, U.shape[1]))])


def extract_states(net, U_design):
    """Collect (U, X, Z, Yhat) with the last layer stacked on top.

    ``U_design`` must already be augmented for a biased net (ones in
    the final row).
    """
    U_design = as_matrix(U_design, "U_design")
    expected = net.in_dim + 1 if net.use_bias else net.in_dim
    if U_design.shape[0] != expected:
        raise ValueError(f"design inputs must have {expected} rows")
    if net.use_bias and not np.all(U_design[-1] == 1.0):
        raise ValueError("augmented inputs need an all-ones final row")
    raw = U_design[:-1] if net.use_bias else U_design
    z_list, x_list, yhat = forward(net, raw)
    if z_list:
        Z = np.vstack(z_list[::-1])
        X = np.vstack(x_list[::-1])
    else:
        Z = np.zeros((0, raw.shape[1]))
        X = np.zeros((0, raw.shape[1]))
    return StateBundle(U_design.copy(), X, Z, yhat)


def embed_implicit(net):
    """Exact equilibrium-model embedding of a layered net.

    The stacked state ordering matches extract_states; Picard iteration
    rebuilds the layers bottom-up, one per pass, so it converges in at
    most depth+1 iterations.
    """
    widths = net.hidden_widths
    n = net.n_states
    p = net.in_dim + 1 if net.use_bias else net.in_dim
    q = net.out_dim
    L = len(widths)
    # offsets[k] is the first stacked row of hidden layer k+1 (layer L sits on top)
    offsets = np.concatenate([[0], np.cumsum(widths[::-1])])[:-1][::-1]
    A = np.zeros((n, n))
    B = np.zeros((n, p))
    C = np.zeros((q, n))
    D = np.zeros((q, p))
    if L:
        for layer in range(2, L + 1):
            r = offsets[layer - 1]
            c = offsets[layer - 2]
            w = net.weights[layer - 1]
            A[r : r + widths[layer - 1], c : c + widths[layer - 2]] = w
            if net.use_bias:
                B[r : r + widths[layer - 1], -1] = net.biases[layer - 1]
        r1 = offsets[0]
        B[r1 : r1 + widths[0], : net.in_dim] = net.weights[0]
        if net.use_bias:
            B[r1 : r1 + widths[0], -1] = net.biases[0]
        top = offsets[L - 1]
        C[:, top : top + widths[L - 1]] = net.weights[-1]
    else:
        D[:, : net.in_dim] = net.weights[0]
    if net.use_bias:
        D[:, -1] = net.biases[-1]
    return ImplicitModel(A, B, C, D, net.activation)


def rescale_layers(net, gamma=1.5):
    """Divide every weight matrix by gamma times the largest layer norm.

    Only valid for bias-free nets, where positive homogeneity turns the
    division into a pure output scaling that preserves argmax; the
    embedded A then has inf_norm at most 1/gamma.
    """
    if gamma <= 0:
        raise ValueError("gamma must be positive")
    if any(np.any(b) for b in net.biases):
        raise ValueError("rescale_layers requires a bias-free net")
    nu = gamma * max(inf_norm(w) for w in net.weights)
    if nu == 0.0:
        raise ValueError("all-zero weights cannot be rescaled")
    weights = [w / nu for w in net.weights]
    biases = [b.copy() for b in net.biases]
    return LayeredNet(weights, biases, net.activation, net.use_bias)


def net_nnz(net):
    """Exact nonzero parameter count over all weights and biases."""
    total = sum(int(np.count_nonzero(w)) for w in net.weights)
    total += sum(int(np.count_nonzero(b)) for b in net.biases)
    if total == 0:
        raise ValueError("net has no nonzero parameters")
    return total


def net_to_bytes(net):
    parts = [
        NET_MAGIC,
        struct.pack("<QB", len(net.weights), 1 if net.use_bias else 0),
        _act_to_wire(net.activation),
    ]
    for w, b in zip(net.weights, net.biases):
        parts.append(csr_to_bytes(to_csr(w)))
        parts.append(struct.pack("<Q", b.size) + b.astype("<f8").tobytes())
    return b"".join(parts)


def net_from_bytes(blob):
    if blob[:7] != NET_MAGIC:
        raise ValueError("bad magic: not a net file")
    count, bias_flag = struct.unpack_from("<QB", blob, 7)
    activation, offset = _act_from_wire(blob, 16)
    weights, biases = [], []
    for _ in range(count):
        mat, offset = csr_from_bytes(blob, offset)
        weights.append(to_dense(mat))
        (blen,) = struct.unpack_from("<Q", blob, offset)
        offset += 8
        biases.append(np.frombuffer(blob, dtype="<f8", count=blen, offset=offset).copy())
        offset += 8 * blen
    if offset != len(blob):
        raise ValueError("trailing bytes after net blocks")
    return LayeredNet(weights, biases, activation, bool(bias_flag))


def save_net(net, path):
    with open(path, "wb") as fh:
        fh.write(net_to_bytes(net))


def load_net(path):
    with open(path, "rb") as fh:
        return net_from_bytes(fh.read())


def _write_dense(parts, arr):
    parts.append(struct.pack("<QQ", arr.shape[0], arr.shape[1]))
    parts.append(np.ascontiguousarray(arr, dtype="<f8").tobytes())


def _read_dense(blob, offset):
    rows, cols = struct.unpack_from("<QQ", blob, offset)
    offset += 16
    arr = np.frombuffer(blob, dtype="<f8", count=rows * cols, offset=offset)
    return arr.reshape(rows, cols).copy(), offset + 8 * rows * cols


def bundle_to_bytes(bundle, rescale_mode="none", kappa=0.0):
    """U, X, Z, Yhat plus a record of how states were rescaled."""
    if rescale_mode not in _RESCALE_MODES:
        raise ValueError(f"unknown rescale mode {rescale_mode!r}")
    parts = [
        BUNDLE_MAGIC,
        struct.pack("<Bd", _RESCALE_MODES.index(rescale_mode), float(kappa)),
    ]
    for arr in (bundle.U, bundle.X, bundle.Z, bundle.Yhat):
        _write_dense(parts, arr)
    return b"".join(parts)


def bundle_from_bytes(blob):
    """Returns ``(bundle, rescale_mode, kappa)``."""
    if blob[:7] != BUNDLE_MAGIC:
        raise ValueError("bad magic: not a bundle file")
    mode_code, kappa = struct.unpack_from("<Bd", blob, 7)
    if mode_code >= len(_RESCALE_MODES):
        raise ValueError(f"unknown rescale mode code {mode_code}")
    offset = 16
    blocks = []
    for _ in range(4):
        arr, offset = _read_dense(blob, offset)
        blocks.append(arr)
    if offset != len(blob):
        raise ValueError("trailing bytes after bundle blocks")
    bundle = StateBundle(*blocks)
    return bundle, _RESCALE_MODES[mode_code], kappa


def save_bundle(bundle, path, rescale_mode="none", kappa=0.0):
    with open(path, "wb") as fh:
        fh.write(bundle_to_bytes(bundle, rescale_mode, kappa))


def load_bundle(path):
    with open(path, "rb") as fh:
        return bundle_from_bytes(fh.read())


def _open_maybe_gzip(path):
    with open(path, "rb") as fh:
        head = fh.read(2)
    if head == b"\x1f\x8b":
        return gzip.open(path, "rb")
    return open(path, "rb")


def load_idx_images(path):
    """Big-endian IDX image file to a (pixels, count) array in [0, 1]."""
    with _open_maybe_gzip(path) as fh:
        blob = fh.read()
    if len(blob) < 16:
        raise ValueError("truncated IDX image file")
    magic, count, rows, cols = struct.unpack_from(">IIII", blob, 0)
    if magic != 0x00000803:
        raise ValueError(f"bad IDX image magic 0x{magic:08x}")
    pixels = rows * cols
    data = np.frombuffer(blob, dtype=np.uint8, count=count * pixels, offset=16)
    if data.size != count * pixels:
        raise ValueError("truncated IDX image payload")
    return data.reshape(count, pixels).T.astype(np.float64) / 255.0


def load_idx_labels(path):
    with _open_maybe_gzip(path) as fh:
        blob = fh.read()
    if len(blob) < 8:
        raise ValueError("truncated IDX label file")
    magic, count = struct.unpack_from(">II", blob, 0)
    if magic != 0x00000801:
        raise ValueError(f"bad IDX label magic 0x{magic:08x}")
    data = np.frombuffer(blob, dtype=np.uint8, count=count, offset=8)
    if data.size != count:
        raise ValueError("truncated IDX label payload")
    return data.astype(np.int64)


def load_dataset_idx(data_dir, split="train"):
    """Standard IDX pair under ``data_dir`` (gzipped files accepted)."""
    prefix = {"train": "train", "test": "t10k"}.get(split)
    if prefix is None:
        raise ValueError("split must be 'train' or 'test'")
    base = Path(data_dir)
    images = labels = None
    for suffix in ("", ".gz"):
        img = base / f"{prefix}-images-idx3-ubyte{suffix}"
        lab = base / f"{prefix}-labels-idx1-ubyte{suffix}"
        if img.exists() and lab.exists():
            images, labels = img, lab
            break
    if images is None:
        raise FileNotFoundError(f"no {split} IDX pair under {base}")
    U = load_idx_images(images)
    y = load_idx_labels(labels)
    if U.shape[1] != y.shape[0]:
        raise ValueError("image and label counts differ")
    return U, y


def load_dataset_csv(path):
    """CSV with a 'label' column; remaining columns are pixels in 0..255."""
    with open(path, "r", newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None:
            raise ValueError("empty CSV file")
        header = [h.strip().lower() for h in header]
        if "label" not in header:
            raise ValueError("CSV needs a 'label' column")
        label_col = header.index("label")
        rows = []
        labels = []
        for line in reader:
            if not line:
                continue
            labels.append(int(line[label_col]))
            rows.append([float(v) for i, v in enumerate(line) if i != label_col])
    if not rows:
        raise ValueError("CSV has no data rows")
    U = np.asarray(rows, dtype=np.float64).T / 255.0
    return U, np.asarray(labels, dtype=np.int64)
