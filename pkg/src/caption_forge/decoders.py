"""Three decoder families behind one stepwise-decoding contract.

* arnn: input-feeding LSTM with a pluggable attention mechanism. Each step
  consumes [embedding ; previous attentional vector (; global descriptor)],
  advances the LSTM stack, attends over the encoder states, and fuses
  hidden state and context into the attentional vector read by the output
  layer.
* transformer: stacked blocks of causally-masked self-attention, encoder
  attention, and a ReLU feed-forward net, each sublayer followed by
  dropout, a residual add, and layer norm (post-norm).
* fcn: stacked causal convolutions with GLU activations; each layer's
  output attends over the encoder states with a single head and is combined
  residually with the context at 1/sqrt(2).

Encoder states V always carry the global descriptor as an extra final row.
All families expose a full-sequence teacher-forced forward (training) and a
value-semantics DecoderState for stepwise decoding (beam branching).
"""

from __future__ import annotations

import json
import math
import struct
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Optional, Union

import numpy as np

from .attention import (
    AttentionOutput,
    MLPAttentionParams,
    MultiHeadParams,
    attend_dot,
    attend_mlp,
    attend_multihead,
    attend_multihead_pooled,
    attend_none,
    causal_mask,
)
from .errors import ConfigError, DimensionError, FormatError, VocabularyError
from .features import EncodedImage, FeatureGrid, project
from .tensor import (
    Tensor,
    add,
    add_rowvec,
    concat,
    dropout,
    embedding_lookup,
    layer_norm,
    log_softmax_np,
    matmul,
    multiply,
    relu,
    reshape,
    scale,
    sigmoid,
    slice_axis,
    tanh,
    transpose,
    weight_norm_matrix,
)

FAMILIES = ("arnn", "transformer", "fcn")
ATTENTION_KINDS = ("none", "dot", "mlp", "multihead")
INV_SQRT2 = 1.0 / math.sqrt(2.0)


@dataclass
class DecoderConfig:
    family: str = "arnn"
    hidden: int = 512
    layers: Optional[int] = None       # arnn 1, transformer 1 block, fcn 3
    heads: int = 8
    ffn_inner: int = 2048
    kernel_width: int = 3
    attention_kind: str = "mlp"
    concat_global: bool = False
    embed_dim: Optional[int] = None    # defaults to hidden
    dropout_rate: Optional[float] = None  # arnn 0.0, transformer/fcn 0.1
    positional: str = "fixed"          # fixed sinusoidal | learned table
    enc_dim: int = 512                 # d', encoder projection width
    feature_dim: int = 2048            # d, raw feature width
    max_positions: int = 64            # learned positional table size
    attention_hidden: Optional[int] = None  # MLP attention a, defaults to enc_dim

    def __post_init__(self):
        if self.layers is None:
            self.layers = 3 if self.family == "fcn" else 1
        if self.embed_dim is None:
            self.embed_dim = self.hidden
        if self.dropout_rate is None:
            self.dropout_rate = 0.0 if self.family == "arnn" else 0.1
        if self.attention_hidden is None:
            self.attention_hidden = self.enc_dim
        self.validate()

    def validate(self):
        if self.family not in FAMILIES:
            raise ConfigError(f"unknown decoder family {self.family!r}")
        if self.attention_kind not in ATTENTION_KINDS:
            raise ConfigError(f"unknown attention kind {self.attention_kind!r}")
        if self.positional not in ("fixed", "learned"):
            raise ConfigError(f"positional must be fixed|learned, got {self.positional!r}")
        for name in ("hidden", "layers", "heads", "ffn_inner", "kernel_width",
                     "embed_dim", "enc_dim", "feature_dim", "max_positions",
                     "attention_hidden"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be positive")
        if not 0.0 <= self.dropout_rate < 1.0:
            raise ConfigError(f"dropout_rate must be in [0, 1), got {self.dropout_rate}")
        if self.family == "transformer":
            if self.hidden % self.heads:
                raise ConfigError(f"heads={self.heads} must divide hidden={self.hidden}")
            if self.embed_dim != self.hidden:
                raise ConfigError("transformer needs embed_dim == hidden "
                                  f"({self.embed_dim} != {self.hidden})")
        if self.family == "arnn" and self.attention_kind == "multihead":
            if self.enc_dim % self.heads:
                raise ConfigError(f"heads={self.heads} must divide enc_dim={self.enc_dim}")


class ModelParameters:
    """Named learnable tensors with weight-norm-aware matrix access.

    A matrix stored under ``name`` is returned directly; one stored as the
    pair ``name.v`` / ``name.g`` is materialized as g * v / ||v||_row so the
    reparameterization participates in the tape.
    """

    def __init__(self, tensors: dict[str, Tensor]):
        self._tensors = dict(tensors)

    def __getitem__(self, name: str) -> Tensor:
        return self._tensors[name]

    def __contains__(self, name: str) -> bool:
        return name in self._tensors

    def matrix(self, name: str) -> Tensor:
        if name in self._tensors:
            return self._tensors[name]
        if f"{name}.v" in self._tensors:
            return weight_norm_matrix(self._tensors[f"{name}.v"],
                                      self._tensors[f"{name}.g"])
        raise KeyError(name)

    def names(self) -> list[str]:
        return sorted(self._tensors)

    def items(self):
        return [(n, self._tensors[n]) for n in self.names()]

    def replace(self, name: str, tensors: dict[str, Tensor]) -> None:
        del self._tensors[name]
        self._tensors.update(tensors)

    def total_parameters(self) -> int:
        return sum(t.size for t in self._tensors.values())

    def zero_grads(self) -> None:
        for t in self._tensors.values():
            t.zero_grad()


@dataclass
class Model:
    config: DecoderConfig
    params: ModelParameters
    vocab_size: int


def _glorot(rng: np.random.Generator, rows: int, cols: int) -> Tensor:
    bound = math.sqrt(6.0 / (rows + cols))
    return Tensor(rng.uniform(-bound, bound, size=(rows, cols)), requires_grad=True)


def _glorot_vec(rng: np.random.Generator, n: int) -> Tensor:
    bound = math.sqrt(6.0 / (n + 1))
    return Tensor(rng.uniform(-bound, bound, size=n), requires_grad=True)


def _glorot_conv(rng: np.random.Generator, width: int, cin: int, cout: int) -> Tensor:
    bound = math.sqrt(6.0 / (width * cin + width * cout))
    return Tensor(rng.uniform(-bound, bound, size=(width, cin, cout)),
                  requires_grad=True)


def _zeros(n: int) -> Tensor:
    return Tensor(np.zeros(n), requires_grad=True)


def _ones(n: int) -> Tensor:
    return Tensor(np.ones(n), requires_grad=True)


def _attention_param_specs(config: DecoderConfig) -> list[tuple]:
    """(name, kind, dims) for the recurrent decoder's attention weights."""
    specs = []
    d_enc, hid = config.enc_dim, config.hidden
    if config.attention_kind in ("dot", "multihead") and hid != d_enc:
        specs.append(("att.bridge", "matrix", (hid, d_enc)))
    if config.attention_kind == "mlp":
        a = config.attention_hidden
        specs += [("att.w_v", "matrix", (a, d_enc)),
                  ("att.w_h", "matrix", (a, hid)),
                  ("att.w_score", "vector", (a,))]
    elif config.attention_kind == "multihead":
        specs += [("att.w_q", "matrix", (d_enc, d_enc)),
                  ("att.w_k", "matrix", (d_enc, d_enc)),
                  ("att.w_l", "matrix", (d_enc, d_enc)),
                  ("att.w_out", "matrix", (d_enc, d_enc))]
    return specs


def _parameter_specs(config: DecoderConfig, vocab_size: int) -> list[tuple]:
    """Deterministic (name, kind, dims) list covering every learnable tensor."""
    c = config
    specs = [("embed.tokens", "matrix", (vocab_size, c.embed_dim)),
             ("encoder.w_f", "matrix", (c.enc_dim, c.feature_dim)),
             ("encoder.w_g", "matrix", (c.enc_dim, c.feature_dim))]
    if c.family == "arnn":
        in_width = c.embed_dim + c.hidden + (c.enc_dim if c.concat_global else 0)
        for layer in range(c.layers):
            width = in_width if layer == 0 else c.hidden
            specs += [(f"arnn.l{layer}.w", "matrix", (width + c.hidden, 4 * c.hidden)),
                      (f"arnn.l{layer}.b", "zeros", (4 * c.hidden,))]
        specs += _attention_param_specs(c)
        specs.append(("arnn.w_hbar", "matrix", (c.hidden + c.enc_dim, c.hidden)))
    elif c.family == "transformer":
        for b in range(c.layers):
            p = f"tf.b{b}"
            specs += [(f"{p}.self.w_q", "matrix", (c.hidden, c.hidden)),
                      (f"{p}.self.w_k", "matrix", (c.hidden, c.hidden)),
                      (f"{p}.self.w_l", "matrix", (c.hidden, c.hidden)),
                      (f"{p}.self.w_out", "matrix", (c.hidden, c.hidden)),
                      (f"{p}.self.ln_gain", "ones", (c.hidden,)),
                      (f"{p}.self.ln_bias", "zeros", (c.hidden,)),
                      (f"{p}.enc.w_q", "matrix", (c.hidden, c.hidden)),
                      (f"{p}.enc.w_k", "matrix", (c.enc_dim, c.hidden)),
                      (f"{p}.enc.w_l", "matrix", (c.enc_dim, c.hidden)),
                      (f"{p}.enc.w_out", "matrix", (c.hidden, c.hidden)),
                      (f"{p}.enc.ln_gain", "ones", (c.hidden,)),
                      (f"{p}.enc.ln_bias", "zeros", (c.hidden,)),
                      (f"{p}.ffn.w1", "matrix", (c.hidden, c.ffn_inner)),
                      (f"{p}.ffn.b1", "zeros", (c.ffn_inner,)),
                      (f"{p}.ffn.w2", "matrix", (c.ffn_inner, c.hidden)),
                      (f"{p}.ffn.b2", "zeros", (c.hidden,)),
                      (f"{p}.ffn.ln_gain", "ones", (c.hidden,)),
                      (f"{p}.ffn.ln_bias", "zeros", (c.hidden,))]
    else:  # fcn
        for layer in range(c.layers):
            cin = c.embed_dim if layer == 0 else c.hidden
            p = f"fcn.l{layer}"
            specs += [(f"{p}.kernel", "conv", (c.kernel_width, cin, 2 * c.hidden)),
                      (f"{p}.bias", "zeros", (2 * c.hidden,)),
                      (f"{p}.att.w_q", "matrix", (c.hidden, c.hidden)),
                      (f"{p}.att.w_k", "matrix", (c.enc_dim, c.hidden)),
                      (f"{p}.att.w_l", "matrix", (c.enc_dim, c.hidden)),
                      (f"{p}.att.w_out", "matrix", (c.hidden, c.hidden))]
    if c.family in ("transformer", "fcn") and c.positional == "learned":
        specs.append(("pos.table", "matrix", (c.max_positions, c.embed_dim)))
    specs.append(("out.w", "matrix", (vocab_size, c.hidden)))
    specs.append(("out.b", "zeros", (vocab_size,)))
    return specs


def init_parameters(config: DecoderConfig, vocab_size: int,
                    rng: np.random.Generator) -> ModelParameters:
    """Glorot-uniform matrices, zero biases, unit layer-norm gains."""
    tensors = {}
    for name, kind, dims in _parameter_specs(config, vocab_size):
        if kind == "matrix":
            tensors[name] = _glorot(rng, *dims)
        elif kind == "vector":
            tensors[name] = _glorot_vec(rng, dims[0])
        elif kind == "conv":
            tensors[name] = _glorot_conv(rng, *dims)
        elif kind == "zeros":
            tensors[name] = _zeros(dims[0])
        else:
            tensors[name] = _ones(dims[0])
    return ModelParameters(tensors)


def parameter_count(config: DecoderConfig, vocab_size: int) -> int:
    """Learnable scalar count as a pure function of the configuration."""
    return sum(int(np.prod(dims)) for _, _, dims in
               _parameter_specs(config, vocab_size))


def build_model(config: DecoderConfig, vocab_size: int,
                rng: np.random.Generator) -> Model:
    return Model(config=config, params=init_parameters(config, vocab_size, rng),
                 vocab_size=vocab_size)


# ---------------------------------------------------------------------------
# positional encodings


def sinusoidal_positions(t_len: int, dim: int) -> np.ndarray:
    pos = np.arange(t_len)[:, None]
    idx = np.arange(0, dim, 2)
    angles = pos / np.power(10000.0, idx / dim)[None, :]
    table = np.zeros((t_len, dim))
    table[:, 0::2] = np.sin(angles)
    table[:, 1::2] = np.cos(angles)[:, : table[:, 1::2].shape[1]]
    return table


def _positions(model: Model, t_len: int) -> Tensor:
    c = model.config
    if c.positional == "fixed":
        return Tensor(sinusoidal_positions(t_len, c.embed_dim))
    if t_len > c.max_positions:
        raise DimensionError(f"prefix length {t_len} exceeds the learned "
                             f"positional table ({c.max_positions})")
    return slice_axis(model.params["pos.table"], 0, 0, t_len)


# ---------------------------------------------------------------------------
# encoder-state preparation


@dataclass
class EncoderStates:
    """Projected image plus the attention matrix (global row appended)."""

    encoded: EncodedImage
    v_full: Tensor  # [K+1, enc_dim]

    @property
    def location_count(self) -> int:
        return self.v_full.shape[0]


def prepare_encoding(model: Model,
                     image: Union[FeatureGrid, EncodedImage, EncoderStates]) -> EncoderStates:
    """Project a grid (taped, so W_f/W_g train) and append the global row."""
    if isinstance(image, EncoderStates):
        return image
    if isinstance(image, FeatureGrid):
        enc = project(image, model.params.matrix("encoder.w_f"),
                      model.params.matrix("encoder.w_g"))
    else:
        enc = image
    global_row = reshape(enc.v_global, (1, enc.v_global.shape[0]))
    return EncoderStates(encoded=enc, v_full=concat([enc.states, global_row], axis=0))


# ---------------------------------------------------------------------------
# shared pieces


def _lstm_cell(x_row: Tensor, h: Tensor, c: Tensor, w: Tensor, b: Tensor):
    """One LSTM step on row vectors; gate order i, f, g, o."""
    hid = h.shape[1]
    z = add_rowvec(matmul(concat([x_row, h], axis=1), w), b)
    i = sigmoid(slice_axis(z, 1, 0, hid))
    f = sigmoid(slice_axis(z, 1, hid, 2 * hid))
    g = tanh(slice_axis(z, 1, 2 * hid, 3 * hid))
    o = sigmoid(slice_axis(z, 1, 3 * hid, 4 * hid))
    c_new = add(multiply(f, c), multiply(i, g))
    h_new = multiply(o, tanh(c_new))
    return h_new, c_new


def _mlp_attention_params(params: ModelParameters) -> MLPAttentionParams:
    return MLPAttentionParams(w_v=params.matrix("att.w_v"),
                              w_h=params.matrix("att.w_h"),
                              w_score=params["att.w_score"])


def _multihead_params(params: ModelParameters, prefix: str,
                      heads: int) -> MultiHeadParams:
    return MultiHeadParams(w_q=params.matrix(f"{prefix}.w_q"),
                           w_k=params.matrix(f"{prefix}.w_k"),
                           w_l=params.matrix(f"{prefix}.w_l"),
                           w_out=params.matrix(f"{prefix}.w_out"),
                           heads=heads)


def _output_logits(states: Tensor, params: ModelParameters) -> Tensor:
    return add_rowvec(matmul(states, transpose(params.matrix("out.w"))),
                      params["out.b"])


def _arnn_attend(model: Model, enc: EncoderStates, h_vec: Tensor) -> AttentionOutput:
    kind = model.config.attention_kind
    p = model.params
    if kind == "none":
        return attend_none(enc.encoded.v_global, enc.location_count)
    bridge = p.matrix("att.bridge") if "att.bridge" in p or "att.bridge.v" in p else None
    if kind == "dot":
        return attend_dot(enc.v_full, h_vec, bridge=bridge)
    if kind == "mlp":
        return attend_mlp(enc.v_full, h_vec, _mlp_attention_params(p))
    return attend_multihead_pooled(enc.v_full, h_vec,
                                   _multihead_params(p, "att", model.config.heads),
                                   bridge=bridge)


# ---------------------------------------------------------------------------
# attentional RNN


@dataclass(frozen=True)
class ArnnState:
    hidden: tuple      # per layer [1, hidden]
    cell: tuple        # per layer [1, hidden]
    hbar: Tensor       # [1, hidden]


def arnn_initial_state(model: Model) -> ArnnState:
    hid = model.config.hidden
    zeros = lambda: Tensor(np.zeros((1, hid)))  # noqa: E731
    return ArnnState(hidden=tuple(zeros() for _ in range(model.config.layers)),
                     cell=tuple(zeros() for _ in range(model.config.layers)),
                     hbar=zeros())


def arnn_step(y_prev: int, state: ArnnState, enc, model: Model,
              training: bool = False, rng=None):
    """Advance one step; returns (logits [|V|], new state, attention output)."""
    c = model.config
    p = model.params
    enc = prepare_encoding(model, enc)
    if not 0 <= y_prev < model.vocab_size:
        raise VocabularyError(f"token id {y_prev} outside vocabulary "
                              f"of size {model.vocab_size}")
    emb = embedding_lookup(p["embed.tokens"], [y_prev])      # [1, e]
    parts = [emb, state.hbar]
    if c.concat_global:
        parts.append(reshape(enc.encoded.v_global, (1, c.enc_dim)))
    x = concat(parts, axis=1)
    new_h, new_c = [], []
    for layer in range(c.layers):
        h, cell = _lstm_cell(x, state.hidden[layer], state.cell[layer],
                             p.matrix(f"arnn.l{layer}.w"), p[f"arnn.l{layer}.b"])
        new_h.append(h)
        new_c.append(cell)
        x = h
    h_top = new_h[-1]
    att = _arnn_attend(model, enc, reshape(h_top, (c.hidden,)))
    fused = concat([h_top, reshape(att.context, (1, att.context.shape[0]))], axis=1)
    hbar = tanh(matmul(fused, p.matrix("arnn.w_hbar")))
    logits = reshape(_output_logits(hbar, p), (model.vocab_size,))
    new_state = ArnnState(hidden=tuple(new_h), cell=tuple(new_c), hbar=hbar)
    return logits, new_state, att


def _arnn_forward(prefix: list[int], enc: EncoderStates, model: Model,
                  training: bool, rng) -> Tensor:
    state = arnn_initial_state(model)
    rows = []
    for tok in prefix:
        logits, state, _ = arnn_step(tok, state, enc, model, training, rng)
        rows.append(reshape(logits, (1, model.vocab_size)))
    return concat(rows, axis=0)


# ---------------------------------------------------------------------------
# transformer


def transformer_forward(prefix: list[int], enc, model: Model,
                        training: bool = False, rng=None,
                        att_trace: Optional[list] = None) -> Tensor:
    """Teacher-forced logits [T, |V|] for a BOS-led prefix."""
    c = model.config
    p = model.params
    enc = prepare_encoding(model, enc)
    t_len = len(prefix)
    if t_len < 1:
        raise DimensionError("transformer prefix must contain at least BOS")
    x = add(embedding_lookup(p["embed.tokens"], prefix), _positions(model, t_len))
    mask = causal_mask(t_len)

    def post(stream, sub_out, ln_prefix):
        dropped = dropout(sub_out, c.dropout_rate, training, rng)
        return layer_norm(add(stream, dropped),
                          p[f"{ln_prefix}_gain"], p[f"{ln_prefix}_bias"])

    for b in range(c.layers):
        pre = f"tf.b{b}"
        sa = attend_multihead(x, x, x, _multihead_params(p, f"{pre}.self", c.heads),
                              mask=mask)
        x = post(x, sa, f"{pre}.self.ln")
        trace = att_trace if (att_trace is not None and b == c.layers - 1) else None
        ea = attend_multihead(x, enc.v_full, enc.v_full,
                              _multihead_params(p, f"{pre}.enc", c.heads),
                              weights_out=trace)
        x = post(x, ea, f"{pre}.enc.ln")
        inner = relu(add_rowvec(matmul(x, p.matrix(f"{pre}.ffn.w1")),
                                p[f"{pre}.ffn.b1"]))
        ff = add_rowvec(matmul(inner, p.matrix(f"{pre}.ffn.w2")), p[f"{pre}.ffn.b2"])
        x = post(x, ff, f"{pre}.ffn.ln")
    return _output_logits(x, p)


# ---------------------------------------------------------------------------
# fully-convolutional decoder


def fcn_forward(prefix: list[int], enc, model: Model,
                training: bool = False, rng=None,
                att_trace: Optional[list] = None) -> Tensor:
    """Teacher-forced logits [T, |V|] for a BOS-led prefix."""
    c = model.config
    p = model.params
    enc = prepare_encoding(model, enc)
    t_len = len(prefix)
    if t_len < 1:
        raise DimensionError("fcn prefix must contain at least BOS")
    x = add(embedding_lookup(p["embed.tokens"], prefix), _positions(model, t_len))
    for layer in range(c.layers):
        pre = f"fcn.l{layer}"
        z = slice_and_glu = None  # noqa: F841  (names below tell the story)
        conv = __import__("caption_forge.tensor", fromlist=["conv1d_causal"])
        z = conv.conv1d_causal(x, p[f"{pre}.kernel"], p[f"{pre}.bias"])
        half = c.hidden
        glu = multiply(slice_axis(z, 1, 0, half),
                       sigmoid(slice_axis(z, 1, half, 2 * half)))
        glu = dropout(glu, c.dropout_rate, training, rng)
        trace = att_trace if (att_trace is not None and layer == c.layers - 1) else None
        context = attend_multihead(glu, enc.v_full, enc.v_full,
                                   _multihead_params(p, f"{pre}.att", 1),
                                   weights_out=trace)
        x = scale(add(glu, context), INV_SQRT2)
    return _output_logits(x, p)


def forward_sequence(prefix: list[int], enc, model: Model,
                     training: bool = False, rng=None) -> Tensor:
    """Family-dispatching teacher-forced forward: logits [T, |V|]."""
    enc = prepare_encoding(model, enc)
    if model.config.family == "arnn":
        return _arnn_forward(prefix, enc, model, training, rng)
    if model.config.family == "transformer":
        return transformer_forward(prefix, enc, model, training, rng)
    return fcn_forward(prefix, enc, model, training, rng)


# ---------------------------------------------------------------------------
# stepwise decoding


class DecodeSession:
    """Inference-side stepwise decoding over one image.

    States have value semantics: advancing a state never mutates it, so beam
    hypotheses can branch from a shared origin safely.
    """

    def __init__(self, model: Model, image):
        self.model = model
        self.enc = prepare_encoding(model, image)

    def initial_state(self):
        if self.model.config.family == "arnn":
            return arnn_initial_state(self.model)
        return ()

    def step(self, y_prev: int, state):
        """Feed one token: (log-prob row [|V|], new state, weights [heads, K+1])."""
        model = self.model
        if model.config.family == "arnn":
            logits, new_state, att = arnn_step(y_prev, state, self.enc, model)
            return log_softmax_np(logits.data), new_state, att.weights
        prefix = state + (y_prev,)
        trace: list = []
        if model.config.family == "transformer":
            logits = transformer_forward(list(prefix), self.enc, model,
                                         att_trace=trace)
        else:
            logits = fcn_forward(list(prefix), self.enc, model, att_trace=trace)
        weights = np.stack([w[-1] for w in trace], axis=0)
        return log_softmax_np(logits.data[-1]), prefix, weights


# ---------------------------------------------------------------------------
# checkpoints


def save_checkpoint(model: Model, vocab_tokens: list[str], path) -> None:
    """Header JSON + newline + u64 payload length + float32 payloads."""
    entries = []
    payload = bytearray()
    for name, t in model.params.items():
        entries.append({"name": name, "shape": list(t.shape),
                        "offset": len(payload)})
        payload.extend(t.data.astype("<f4").tobytes())
    header = {"config": asdict(model.config), "vocab": list(vocab_tokens),
              "tensors": entries}
    blob = json.dumps(header, sort_keys=True, separators=(",", ":")).encode()
    with open(path, "wb") as fh:
        fh.write(blob)
        fh.write(b"\n")
        fh.write(struct.pack("<Q", len(payload)))
        fh.write(bytes(payload))


def load_checkpoint(path) -> tuple[Model, list[str]]:
    raw = Path(path).read_bytes()
    nl = raw.find(b"\n")
    if nl < 0:
        raise FormatError(f"{path}: header newline terminator missing")
    try:
        header = json.loads(raw[:nl])
    except json.JSONDecodeError as exc:
        raise FormatError(f"{path}: bad header JSON: {exc}") from exc
    if len(raw) < nl + 9:
        raise FormatError(f"{path}: truncated length prefix at byte {nl + 1}")
    (payload_len,) = struct.unpack_from("<Q", raw, nl + 1)
    start = nl + 9
    if len(raw) != start + payload_len:
        raise FormatError(f"{path}: payload ends at byte {len(raw)}, "
                          f"expected {start + payload_len}")
    config = DecoderConfig(**header["config"])
    tensors = {}
    vocab_size = None
    for entry in header["tensors"]:
        shape = tuple(entry["shape"])
        count = int(np.prod(shape)) if shape else 1
        off = start + entry["offset"]
        data = np.frombuffer(raw, dtype="<f4", count=count, offset=off)
        tensors[entry["name"]] = Tensor(data.astype(np.float64).reshape(shape),
                                        requires_grad=True)
        if entry["name"] == "out.b":
            vocab_size = shape[0]
    if vocab_size is None:
        raise FormatError(f"{path}: checkpoint lacks the output layer")
    model = Model(config=config, params=ModelParameters(tensors),
                  vocab_size=vocab_size)
    return model, list(header["vocab"])
