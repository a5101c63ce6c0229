"""Attentive LSTM decoder: per-step label prediction and max-pool aggregation.

The decoder unrolls a fixed number of steps. Each step draws a dynamic
context from local attention (or the plain region mean when local attention
is disabled), feeds it into the LSTM alongside the embedded previous label,
and emits per-class sigmoid scores. The final per-class score is the max
over steps. Also home to the binary checkpoint format.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field

import numpy as np

from . import autograd as ag
from . import attention as attn
from .autograd import Tensor

CHECKPOINT_MAGIC = b"C2FW"
CHECKPOINT_VERSION = 1


class CheckpointError(Exception):
    """Malformed checkpoint file."""


@dataclass
class LabelSet:
    """Binary target vector plus the decoder's supervision order."""

    y: np.ndarray  # (C,) of {0, 1}
    step_targets: tuple  # positive class indices, one per supervised step

    def __post_init__(self):
        self.y = np.asarray(self.y, dtype=np.uint8)
        positives = set(np.flatnonzero(self.y).tolist())
        listed = list(self.step_targets)
        if len(listed) != len(set(listed)) or set(listed) != positives:
            raise ValueError(
                "LabelSet: step_targets must list each positive class exactly once"
            )
        self.step_targets = tuple(int(i) for i in listed)

    @property
    def num_classes(self):
        return len(self.y)

    @property
    def cardinality(self):
        return len(self.step_targets)

    @classmethod
    def from_labels(cls, y, class_order=None):
        """Order the positives by a global class priority (lower rank first).

        ``class_order`` maps class index -> rank; ties inside the ordering
        fall back to the lower class index. Without an order, plain index
        order is used.
        """
        y = np.asarray(y, dtype=np.uint8)
        pos = np.flatnonzero(y).tolist()
        if class_order is not None:
            pos.sort(key=lambda j: (class_order[j], j))
        return cls(y=y, step_targets=tuple(pos))


def frequency_order(label_matrix):
    """Class ranks by descending frequency over a training set; ties to lower index."""
    counts = np.asarray(label_matrix).sum(axis=0)
    ranked = sorted(range(len(counts)), key=lambda j: (-counts[j], j))
    order = np.empty(len(counts), dtype=np.int64)
    for rank, j in enumerate(ranked):
        order[j] = rank
    return order


class DecoderParams:
    """LSTM gate weights, the label embedding table, and the prediction head.

    The embedding table has one extra row (index C) for the start token.
    """

    GATES = ("g", "i", "f", "o")

    def __init__(self, num_classes, channels, hidden=64, emb=32, seed=0, x_dim=None):
        rng = np.random.default_rng([seed, 0xD])
        self.num_classes = num_classes
        self.hidden = hidden
        self.emb = emb
        self.x_dim = emb if x_dim is None else x_dim
        self.embedding = ag.parameter(
            rng.standard_normal((num_classes + 1, emb)) * 0.1
        )
        self.w_x = {}
        self.w_h = {}
        self.w_z = {}
        self.b = {}
        for gate in self.GATES:
            self.w_x[gate] = ag.parameter(_glorot(rng, (self.x_dim, hidden), self.x_dim, hidden))
            self.w_h[gate] = ag.parameter(_glorot(rng, (hidden, hidden), hidden, hidden))
            self.w_z[gate] = ag.parameter(_glorot(rng, (channels, hidden), channels, hidden))
            self.b[gate] = ag.parameter(np.zeros(hidden))
        # positive forget bias keeps early memory from washing out
        self.b["f"].values += 1.0
        self.w_head = ag.parameter(_glorot(rng, (hidden, num_classes), hidden, num_classes))
        self.b_head = ag.parameter(np.zeros(num_classes))

    @property
    def start_token(self):
        return self.num_classes

    def tensors(self):
        named = {"decoder/embedding": self.embedding}
        for gate in self.GATES:
            named[f"decoder/w_x{gate}"] = self.w_x[gate]
            named[f"decoder/w_h{gate}"] = self.w_h[gate]
            named[f"decoder/w_z{gate}"] = self.w_z[gate]
            named[f"decoder/b_{gate}"] = self.b[gate]
        named["decoder/w_head"] = self.w_head
        named["decoder/b_head"] = self.b_head
        return named


def _glorot(rng, shape, fan_in, fan_out):
    bound = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-bound, bound, size=shape)


def lstm_step(y_in, h_prev, c_prev, z_t, params):
    """One LSTM step with the dynamic context as a third input stream."""

    def gate(name, activation):
        pre = ag.add(
            ag.add(
                ag.add(ag.matmul(y_in, params.w_x[name]), ag.matmul(h_prev, params.w_h[name])),
                ag.matmul(z_t, params.w_z[name]),
            ),
            params.b[name],
        )
        return activation(pre)

    g = gate("g", ag.tanh)
    i = gate("i", ag.sigmoid)
    f = gate("f", ag.sigmoid)
    o = gate("o", ag.sigmoid)
    c_t = ag.add(ag.mul(f, c_prev), ag.mul(i, g))
    h_t = ag.mul(o, ag.tanh(c_t))
    return h_t, c_t


def predict_step(h_t, params):
    """Per-class sigmoid scores from one hidden state."""
    return ag.sigmoid(ag.add(ag.matmul(h_t, params.w_head), params.b_head))


def embed(token, params):
    """Embedding row lookup as a one-hot product so gradients reach the table."""
    onehot = np.zeros(params.num_classes + 1)
    onehot[token] = 1.0
    return ag.matmul(ag.constant(onehot), params.embedding)


@dataclass
class UnrollTrace:
    """Intermediates kept for visualization, ablation checks, and tests."""

    global_map: attn.AttentionMap | None = None
    init_c: Tensor | None = None
    init_h: Tensor | None = None
    local_maps: list = field(default_factory=list)
    contexts: list = field(default_factory=list)
    fed_tokens: list = field(default_factory=list)
    hiddens: list = field(default_factory=list)


class PredictionMatrix:
    """T x C sigmoid scores, one row per decoder step."""

    def __init__(self, tensor, trace=None):
        v = tensor.values
        if v.ndim != 2:
            raise ValueError(f"PredictionMatrix: expected 2-d scores, got {v.shape}")
        if v.min() < 0.0 or v.max() > 1.0:
            raise ValueError("PredictionMatrix: scores must lie in [0, 1]")
        self.tensor = tensor
        self.trace = trace

    @property
    def steps(self):
        return self.tensor.values.shape[0]

    @property
    def num_classes(self):
        return self.tensor.values.shape[1]

    @property
    def values(self):
        return self.tensor.values


def unroll(
    grid,
    params,
    global_params,
    local_params,
    steps,
    supervision=None,
    use_global=True,
    use_local=True,
    global_feature=None,
):
    """Run the full decoding sweep and return the per-step PredictionMatrix.

    Teacher forcing (``supervision`` given): step 1 is fed the start token,
    step t>1 the (t-1)-th supervised target, padded with the start token past
    the positive count. Inference: each step feeds the highest-scoring class
    of the previous step not fed yet (ties to the lowest index).

    ``use_global=False`` zero-initializes the states; ``use_local=False``
    replaces the dynamic context with the unweighted region mean.
    ``global_feature`` (a GlobalFeature) is concatenated to the step-1 input
    when the decoder was built with the widened input.
    """
    if steps < 1:
        raise ValueError("unroll: need at least one step")
    if supervision is not None and supervision.cardinality > steps:
        raise ValueError(
            f"unroll: {supervision.cardinality} supervised targets exceed {steps} steps"
        )
    trace = UnrollTrace()
    hidden = params.hidden
    if use_global:
        gmap, context = attn.global_attention(grid, global_params)
        c, h = attn.init_states(context, grid.regions, global_params)
        trace.global_map = gmap
    else:
        c = ag.constant(np.zeros(hidden))
        h = ag.constant(np.zeros(hidden))
    trace.init_c, trace.init_h = c, h

    fc_width = params.x_dim - params.emb
    if fc_width and (global_feature is None or global_feature.dim != fc_width):
        raise ValueError("unroll: decoder expects a global feature of width %d" % fc_width)

    fed = set()
    prev_scores = None
    rows = []
    for t in range(steps):
        if supervision is not None:
            if t == 0:
                token = params.start_token
            elif t - 1 < supervision.cardinality:
                token = supervision.step_targets[t - 1]
            else:
                token = params.start_token
        else:
            if t == 0:
                token = params.start_token
            else:
                masked = prev_scores.copy()
                if fed:
                    masked[sorted(fed)] = -np.inf
                token = int(np.argmax(masked))
                fed.add(token)
        trace.fed_tokens.append(token)
        y_in = embed(token, params)
        if fc_width:
            extra = global_feature.data if t == 0 else ag.constant(np.zeros(fc_width))
            y_in = ag.concat([y_in, extra])

        if use_local:
            lmap, z = attn.local_attention(grid, h, local_params)
            trace.local_maps.append(lmap)
        else:
            z = ag.mean_along(grid.data, axis=0)
            trace.local_maps.append(None)
        trace.contexts.append(z)

        h, c = lstm_step(y_in, h, c, z, params)
        p = predict_step(h, params)
        trace.hiddens.append(h)
        rows.append(p)
        prev_scores = p.values

    return PredictionMatrix(ag.stack_rows(rows), trace=trace)


def aggregate(pm):
    """Final per-class scores: columnwise max over the decoding steps."""
    if pm.steps < 1:
        raise ValueError("aggregate: need at least one step")
    return ag.amax(pm.tensor, axis=0)


# ---------------------------------------------------------------------------
# checkpoint format (binary, little-endian)
# ---------------------------------------------------------------------------

def save_checkpoint(named, path):
    """Write named tensors as float32 sections, sorted by name."""
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(struct.pack("<I", CHECKPOINT_VERSION))
        for name in sorted(named):
            tensor = named[name]
            values = tensor.values if isinstance(tensor, Tensor) else np.asarray(tensor)
            encoded = name.encode("utf-8")
            fh.write(struct.pack("<H", len(encoded)))
            fh.write(encoded)
            fh.write(struct.pack("<I", values.ndim))
            for extent in values.shape:
                fh.write(struct.pack("<I", extent))
            fh.write(np.ascontiguousarray(values, dtype="<f4").tobytes())


def load_checkpoint(path):
    """Read a checkpoint into a dict of float32 arrays."""
    with open(path, "rb") as fh:
        raw = fh.read()
    if len(raw) < 8:
        raise CheckpointError(f"{path}: truncated header")
    if raw[:4] != CHECKPOINT_MAGIC:
        raise CheckpointError(f"{path}: bad magic {raw[:4]!r}")
    (version,) = struct.unpack("<I", raw[4:8])
    if version != CHECKPOINT_VERSION:
        raise CheckpointError(f"{path}: unsupported version {version}")
    sections = {}
    off = 8
    n = len(raw)
    while off < n:
        if off + 2 > n:
            raise CheckpointError(f"{path}: truncated section name length")
        (name_len,) = struct.unpack_from("<H", raw, off)
        off += 2
        if off + name_len + 4 > n:
            raise CheckpointError(f"{path}: truncated section header")
        name = raw[off : off + name_len].decode("utf-8")
        off += name_len
        (rank,) = struct.unpack_from("<I", raw, off)
        off += 4
        if off + 4 * rank > n:
            raise CheckpointError(f"{path}: truncated shape for {name}")
        shape = struct.unpack_from(f"<{rank}I", raw, off) if rank else ()
        off += 4 * rank
        count = int(np.prod(shape)) if rank else 1
        if off + 4 * count > n:
            raise CheckpointError(f"{path}: truncated payload for {name}")
        values = np.frombuffer(raw, dtype="<f4", count=count, offset=off).reshape(shape)
        off += 4 * count
        sections[name] = values.copy()
    return sections
