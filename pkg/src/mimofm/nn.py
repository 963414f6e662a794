"""Set-transformer precoding model with precoder and energy heads.

Input layout per CSI snapshot: one token per user holding [Re(h_u), Im(h_u)],
plus one context token carrying the rate request, in that order. There are no
positional encodings; users form a set, and permuting users (rows of H
together with request entries) permutes the predicted precoder columns
identically. To keep that exact while still letting the model route per-user
targets, the request enters twice:

* the context token embeds the total requested rate (its affine map is
  weight-tied across users, hence permutation-invariant), and
* each user token's embedding is shifted by its own target times a learned
  injection vector (permutation-equivariant).

A shared encoder produces per-token features. Site-specific heads map user
features to precoder columns (then one global power normalization) and the
pooled sequence feature through a sigmoid to n_tx antenna on/off decisions
plus the transmit-power fraction gamma. Antenna decisions are binarized with
a straight-through threshold at 0.5.
"""

import struct
from dataclasses import dataclass

import numpy as np

from .autodiff import Tensor, as_tensor, concat, layer_norm, straight_through
from .core import PrecodingSolution
from .errors import (
    BadMagicError,
    DatasetFormatError,
    DimensionMismatchError,
    NumericalFailureError,
    TruncatedPayloadError,
    VersionMismatchError,
)

CHECKPOINT_MAGIC = b"MMFM"
CHECKPOINT_VERSION = 1

# "give this user everything" request level; rate-ascent training and the
# max-rate evaluation protocol must agree on it so evaluation stays
# in-distribution
SATURATING_REQUEST = 1e3

# requests enter the encoder as log1p(R) / log1p(SATURATING_REQUEST): unit
# scale at saturation, so request shifts stay comparable to CSI embeddings
_REQUEST_SCALE = float(np.log1p(SATURATING_REQUEST))


@dataclass
class ModelHyper:
    """Architecture hyperparameters; token_dim and seq_len are derived."""

    embed_dim: int = 128
    ffn_dim: int = 1024
    n_heads: int = 2
    n_layers: int = 4
    dropout: float = 0.05
    n_tx: int = 64
    n_users: int = 4

    def __post_init__(self):
        if self.embed_dim % self.n_heads != 0:
            raise ValueError("embed_dim must be divisible by n_heads")
        if not 0.0 <= self.dropout < 1.0:
            raise ValueError("dropout must lie in [0, 1)")
        if min(self.embed_dim, self.ffn_dim, self.n_layers, self.n_tx, self.n_users) < 1:
            raise ValueError("dimensions must be positive")

    @property
    def token_dim(self):
        return 2 * self.n_tx

    @property
    def seq_len(self):
        return self.n_users + 1


def _uniform(rng, fan_in, shape):
    bound = 1.0 / np.sqrt(fan_in)
    return rng.uniform(-bound, bound, size=shape)


def _param(data):
    return Tensor(np.asarray(data, dtype=np.float64), requires_grad=True)


class FeatureExtractorParams:
    """Shared encoder parameters: embeddings plus transformer blocks."""

    def __init__(self, hyper, rng=0):
        rng = np.random.default_rng(rng)
        d = hyper.embed_dim
        self.hyper = hyper
        self.csi_w = _param(_uniform(rng, hyper.token_dim, (hyper.token_dim, d)))
        self.csi_b = _param(np.zeros(d))
        # weight-tied across users: the context token sees the total request
        self.rate_w = _param(_uniform(rng, 1, (d,)))
        self.rate_b = _param(np.zeros(d))
        self.rate_inject = _param(_uniform(rng, 1, (d,)))
        self.blocks = []
        for _ in range(hyper.n_layers):
            blk = {
                "wq": _param(_uniform(rng, d, (d, d))),
                "bq": _param(np.zeros(d)),
                "wk": _param(_uniform(rng, d, (d, d))),
                "bk": _param(np.zeros(d)),
                "wv": _param(_uniform(rng, d, (d, d))),
                "bv": _param(np.zeros(d)),
                "wo": _param(_uniform(rng, d, (d, d))),
                "bo": _param(np.zeros(d)),
                "ln1_g": _param(np.ones(d)),
                "ln1_b": _param(np.zeros(d)),
                "ffn_w1": _param(_uniform(rng, d, (d, hyper.ffn_dim))),
                "ffn_b1": _param(np.zeros(hyper.ffn_dim)),
                "ffn_w2": _param(_uniform(rng, hyper.ffn_dim, (hyper.ffn_dim, d))),
                "ffn_b2": _param(np.zeros(d)),
                "ln2_g": _param(np.ones(d)),
                "ln2_b": _param(np.zeros(d)),
            }
            self.blocks.append(blk)

    def named(self):
        yield "csi_w", self.csi_w
        yield "csi_b", self.csi_b
        yield "rate_w", self.rate_w
        yield "rate_b", self.rate_b
        yield "rate_inject", self.rate_inject
        for i, blk in enumerate(self.blocks):
            for key, val in blk.items():
                yield f"block{i}.{key}", val


class OutputHead:
    """Site-specific head: per-user precoder map plus pooled energy map."""

    def __init__(self, hyper, rng=0):
        rng = np.random.default_rng(rng)
        d = hyper.embed_dim
        self.hyper = hyper
        self.prec_w = _param(_uniform(rng, d, (d, 2 * hyper.n_tx)))
        self.prec_b = _param(np.zeros(2 * hyper.n_tx))
        self.energy_w = _param(_uniform(rng, d, (d, hyper.n_tx + 1)))
        # start near all-antennas-on, full power: rate learning begins at the
        # full-power operating point and energy pressure prunes from there
        self.energy_b = _param(np.full(hyper.n_tx + 1, 2.0))

    def named(self):
        yield "prec_w", self.prec_w
        yield "prec_b", self.prec_b
        yield "energy_w", self.energy_w
        yield "energy_b", self.energy_b

    def copy(self):
        dup = OutputHead(self.hyper)
        dup.prec_w = _param(self.prec_w.data.copy())
        dup.prec_b = _param(self.prec_b.data.copy())
        dup.energy_w = _param(self.energy_w.data.copy())
        dup.energy_b = _param(self.energy_b.data.copy())
        return dup


@dataclass
class ModelOutput:
    """Decoded decision for one CSI snapshot plus the raw sigmoid levels."""

    solution: PrecodingSolution
    pre_threshold: np.ndarray


def tokenize(H, request, hyper):
    """Split a CSI matrix into per-user tokens plus the rate context token.

    Returns a list of n_users arrays of length 2*n_tx ([Re(h_u), Im(h_u)])
    followed by one array of length n_users (the request), users in row
    order, rate token last.
    """
    rows = np.asarray(getattr(H, "rows", H), dtype=np.complex128)
    if rows.shape != (hyper.n_users, hyper.n_tx):
        raise DimensionMismatchError(
            f"channel shape {rows.shape} != ({hyper.n_users}, {hyper.n_tx})"
        )
    request = getattr(request, "targets", request)
    request = np.asarray(request, dtype=np.float64).reshape(-1)
    if request.shape != (hyper.n_users,):
        raise DimensionMismatchError(
            f"request length {request.shape[0]} != n_users {hyper.n_users}"
        )
    tokens = [
        np.concatenate([rows[u].real, rows[u].imag]) for u in range(hyper.n_users)
    ]
    tokens.append(request.copy())
    return tokens


def _dropout(x, p, rng):
    if p <= 0.0 or rng is None:
        return x
    keep = (rng.random(x.shape) >= p) / (1.0 - p)
    return x * Tensor(keep)


def _encode(params, Hr, Hi, R, mode="eval", rng=None):
    """Run embeddings and transformer blocks; returns (B, S, D) features."""
    hyper = params.hyper
    drop = hyper.dropout if mode == "train" else 0.0
    n_heads = hyper.n_heads
    d_head = hyper.embed_dim // n_heads
    scale = 1.0 / np.sqrt(d_head)

    user_in = as_tensor(np.concatenate([Hr, Hi], axis=2))
    R_t = as_tensor(np.log1p(R) / _REQUEST_SCALE)
    x_users = (
        user_in @ params.csi_w
        + params.csi_b
        + R_t.reshape(R.shape[0], R.shape[1], 1) * params.rate_inject
    )
    total = R_t.sum(axis=1).reshape(R.shape[0], 1, 1)
    rate_tok = total * params.rate_w + params.rate_b
    x = concat([x_users, rate_tok], axis=1)

    n_batch, seq, dim = x.shape
    for i, blk in enumerate(params.blocks):
        q = (x @ blk["wq"] + blk["bq"]).reshape(n_batch, seq, n_heads, d_head)
        k = (x @ blk["wk"] + blk["bk"]).reshape(n_batch, seq, n_heads, d_head)
        v = (x @ blk["wv"] + blk["bv"]).reshape(n_batch, seq, n_heads, d_head)
        q = q.swapaxes(1, 2)
        k = k.swapaxes(1, 2)
        v = v.swapaxes(1, 2)
        attn = (q @ k.swapaxes(-1, -2)) * scale
        attn = attn.softmax(axis=-1)
        ctx = (attn @ v).swapaxes(1, 2).reshape(n_batch, seq, dim)
        ctx = _dropout(ctx @ blk["wo"] + blk["bo"], drop, rng)
        x = layer_norm(x + ctx, blk["ln1_g"], blk["ln1_b"])
        ffn = (x @ blk["ffn_w1"] + blk["ffn_b1"]).relu() @ blk["ffn_w2"] + blk["ffn_b2"]
        x = layer_norm(x + _dropout(ffn, drop, rng), blk["ln2_g"], blk["ln2_b"])
        if not np.all(np.isfinite(x.data)):
            raise NumericalFailureError(
                f"non-finite activations after block {i}", layer=i
            )
    return x


def forward_batch(params, head, Hr, Hi, R, cfg, mode="eval", rng=None, st_override=None):
    """Batched graph-building forward pass.

    Hr/Hi: (B, n_users, n_tx) float64 halves of the channel rows; R: (B,
    n_users) requests. Returns a dict of graph tensors: precoder halves
    ('w_re', 'w_im', power-normalized), antenna 'mask', power fraction
    'gamma', sigmoid levels 'pre_threshold', and 'pooled' sequence features.

    st_override, used by gradient checking, freezes the threshold at a base
    point: pass (binary0, s0) and the mask becomes binary0 + (s - s0), a
    smooth surrogate that matches the straight-through value and gradient at
    the base point.
    """
    hyper = params.hyper
    n_tx = hyper.n_tx
    x = _encode(params, Hr, Hi, R, mode=mode, rng=rng)
    user_feats = x[:, : hyper.n_users, :]
    pooled = x.mean(axis=1)

    raw = user_feats @ head.prec_w + head.prec_b
    w_re = raw[:, :, :n_tx].swapaxes(1, 2)
    w_im = raw[:, :, n_tx:].swapaxes(1, 2)
    power = (w_re * w_re).sum(axis=(1, 2), keepdims=True) + (w_im * w_im).sum(
        axis=(1, 2), keepdims=True
    )
    if np.any(power.data == 0.0):
        raise NumericalFailureError("precoder head produced an all-zero precoder")
    scale = (power / cfg.p_tx) ** -0.5
    w_re = w_re * scale
    w_im = w_im * scale

    levels = (pooled @ head.energy_w + head.energy_b).sigmoid()
    soft_mask = levels[:, :n_tx]
    gamma = levels[:, n_tx:]
    if st_override is None:
        mask = straight_through(soft_mask)
    else:
        binary0, s0 = st_override
        mask = as_tensor(np.asarray(binary0) - np.asarray(s0)) + soft_mask
    return {
        "w_re": w_re,
        "w_im": w_im,
        "mask": mask,
        "gamma": gamma,
        "pre_threshold": levels,
        "pooled": pooled,
    }


def forward(params, head, H, request, cfg, mode="eval", rng=None):
    """Single-snapshot forward pass returning a decoded ModelOutput."""
    hyper = params.hyper
    tokens = tokenize(H, request, hyper)
    rows = np.asarray(getattr(H, "rows", H), dtype=np.complex128)
    Hr = rows.real[None, :, :]
    Hi = rows.imag[None, :, :]
    R = np.asarray(tokens[-1], dtype=np.float64)[None, :]
    out = forward_batch(params, head, Hr, Hi, R, cfg, mode=mode, rng=rng)
    precoder = out["w_re"].data[0] + 1j * out["w_im"].data[0]
    solution = PrecodingSolution(
        precoder=precoder,
        mask=out["mask"].data[0],
        gamma=float(out["gamma"].data[0, 0]),
    )
    return ModelOutput(solution=solution, pre_threshold=out["pre_threshold"].data[0])


def extract_features(params, H_list):
    """Mean-pooled final-layer features with an all-zero rate request.

    Accepts a list of CSI matrices; returns (len(H_list), embed_dim).
    """
    hyper = params.hyper
    rows = np.stack(
        [np.asarray(getattr(H, "rows", H), dtype=np.complex128) for H in H_list]
    )
    R = np.zeros((rows.shape[0], hyper.n_users))
    x = _encode(params, rows.real, rows.imag, R, mode="eval")
    return x.data.mean(axis=1)


# -- checkpoint serialization ----------------------------------------------


def _pack_params(named):
    chunks = []
    count = 0
    for name, tensor in named:
        data = np.ascontiguousarray(tensor.data, dtype="<f8")
        name_b = name.encode("utf-8")
        chunks.append(struct.pack("<H", len(name_b)))
        chunks.append(name_b)
        chunks.append(struct.pack("<B", data.ndim))
        chunks.append(struct.pack(f"<{data.ndim}I", *data.shape))
        chunks.append(data.tobytes())
        count += 1
    return count, b"".join(chunks)


class _Reader:
    def __init__(self, blob, path):
        self.blob = blob
        self.path = path
        self.pos = 0

    def take(self, n):
        if self.pos + n > len(self.blob):
            raise TruncatedPayloadError(f"{self.path}: checkpoint truncated")
        out = self.blob[self.pos : self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))


def _read_params(reader):
    (count,) = reader.unpack("<I")
    out = {}
    order = []
    for _ in range(count):
        (name_len,) = reader.unpack("<H")
        name = reader.take(name_len).decode("utf-8")
        (ndim,) = reader.unpack("<B")
        shape = reader.unpack(f"<{ndim}I") if ndim else ()
        n_items = int(np.prod(shape)) if shape else 1
        data = np.frombuffer(reader.take(8 * n_items), dtype="<f8").reshape(shape)
        out[name] = data.copy()
        order.append(name)
    return out, order


def save_checkpoint(path, params, heads):
    """Serialize the extractor plus a dict of heads keyed by env_id."""
    hyper = params.hyper
    header = CHECKPOINT_MAGIC + struct.pack(
        "<IIIIIdII",
        CHECKPOINT_VERSION,
        hyper.embed_dim,
        hyper.ffn_dim,
        hyper.n_heads,
        hyper.n_layers,
        hyper.dropout,
        hyper.n_tx,
        hyper.n_users,
    )
    count, body = _pack_params(params.named())
    parts = [header, struct.pack("<I", count), body]
    parts.append(struct.pack("<I", len(heads)))
    for env_id in sorted(heads):
        env_b = env_id.encode("utf-8")
        parts.append(struct.pack("<H", len(env_b)))
        parts.append(env_b)
        h_count, h_body = _pack_params(heads[env_id].named())
        parts.append(struct.pack("<I", h_count))
        parts.append(h_body)
    with open(path, "wb") as fh:
        fh.write(b"".join(parts))


def _apply_named(obj, values, order, path, kind):
    expected = dict(obj.named())
    if list(expected.keys()) != order:
        raise VersionMismatchError(
            f"{path}: {kind} parameter list does not match this architecture"
        )
    for name, tensor in expected.items():
        data = values[name]
        if data.shape != tensor.data.shape:
            raise DimensionMismatchError(
                f"{path}: {kind} tensor {name!r} has shape {data.shape}, "
                f"expected {tensor.data.shape}"
            )
        tensor.data = data.astype(np.float64)


def load_checkpoint(path):
    """Read a checkpoint; returns (hyper, FeatureExtractorParams, heads)."""
    with open(path, "rb") as fh:
        blob = fh.read()
    if blob[:4] != CHECKPOINT_MAGIC:
        raise BadMagicError(f"{path}: not a model checkpoint (bad magic)")
    reader = _Reader(blob, path)
    reader.take(4)
    version, embed, ffn, heads_n, layers, dropout, n_tx, n_users = reader.unpack(
        "<IIIIIdII"
    )
    if version != CHECKPOINT_VERSION:
        raise VersionMismatchError(
            f"{path}: checkpoint version {version}, expected {CHECKPOINT_VERSION}"
        )
    hyper = ModelHyper(
        embed_dim=embed,
        ffn_dim=ffn,
        n_heads=heads_n,
        n_layers=layers,
        dropout=dropout,
        n_tx=n_tx,
        n_users=n_users,
    )
    params = FeatureExtractorParams(hyper, rng=0)
    values, order = _read_params(reader)
    _apply_named(params, values, order, path, "extractor")
    (n_heads_entries,) = reader.unpack("<I")
    heads = {}
    for _ in range(n_heads_entries):
        (env_len,) = reader.unpack("<H")
        env_id = reader.take(env_len).decode("utf-8")
        head = OutputHead(hyper, rng=0)
        values, order = _read_params(reader)
        _apply_named(head, values, order, path, f"head {env_id!r}")
        heads[env_id] = head
    if reader.pos != len(blob):
        raise DatasetFormatError(
            f"{path}: {len(blob) - reader.pos} trailing bytes after checkpoint"
        )
    return hyper, params, heads
