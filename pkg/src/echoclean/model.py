"""Weight file loading and quantized block-sparse inference.

Weights are int8 codes with a fixed global scale of 1/256, so every decoded
weight lies in [-0.5, 127/256]. Sparse matrices store nonzero 16x4 blocks
only. The network topology (layer kinds, sizes, connections) is entirely
data-driven from the file; the engine hardcodes nothing about Fig-level
architecture beyond "the last two layers are the gain and strength heads".

File format "PNW1", little-endian:

  magic            4 bytes  b"PNW1"
  version          u32      1
  rate_mode        u32      sample rate the normalization was computed at
  norm offsets     100 f32  feature normalization: (f - offset) * scale
  norm scales      100 f32  (slots beyond the input dim are ignored)
  layer_count      u32
  per layer:
    kind           u8       0=conv 1=gru 2=dense
    activation     u8       0=none 1=tanh 2=sigmoid
    src_count      u8
    sources        u16 each 0xFFFF = the feature input, else a layer index
    in_dim         u32
    out_dim        u32
    kernel_width   u8       1 unless conv
    sparse         u8
    if sparse:     block_count u32, then (row_block u16, col_block u16) pairs,
                   then int8 payload, 64 bytes per block (16x4, row-major)
    else:          int8 payload, rows*cols row-major
    biases         f32 * out_dim (3*out_dim for gru: z, r, h order)
  crc32            u32      of all preceding bytes

The weight matrix has rows = out_dim (conv/dense; cols = in_dim*kernel_width
for conv with the oldest frame first) or rows = 3*out_dim for gru over
columns [x | h], gate rows ordered update, reset, candidate.
"""

from __future__ import annotations

import struct
import zlib

import numpy as np

from . import kernels

MAGIC = b"PNW1"
VERSION = 1
NORM_SLOTS = 100
WEIGHT_SCALE = 1.0 / 256.0
BLOCK_ROWS = 16
BLOCK_COLS = 4

KINDS = ("conv", "gru", "dense")
ACTIVATIONS = ("none", "tanh", "sigmoid")
INPUT_SOURCE = 0xFFFF


class WeightFormatError(ValueError):
    """Malformed or inconsistent weight file."""


def _sigmoid(x):
    return 1.0 / (1.0 + np.exp(-x))


_ACT_FN = {"none": lambda x: x, "tanh": np.tanh, "sigmoid": _sigmoid}


class _Matvec:
    """int8 matrix with a dense or 16x4 block-sparse representation."""

    def __init__(self, rows, cols, dense=None, blocks=None):
        self.rows = rows
        self.cols = cols
        if dense is not None:
            # explicit copy: buffers from frombuffer are read-only, which the
            # typed kernels reject
            self.dense = np.array(dense, dtype=np.int8, order="C")
            self.indptr = None
            self.weight_count = rows * cols
        else:
            coords, payload = blocks
            order = np.lexsort((coords[:, 1], coords[:, 0]))
            coords = coords[order]
            payload = payload[order]
            nrb = rows // BLOCK_ROWS
            self.indptr = np.zeros(nrb + 1, dtype=np.int64)
            np.add.at(self.indptr, coords[:, 0] + 1, 1)
            self.indptr = np.cumsum(self.indptr)
            self.colblocks = coords[:, 1].astype(np.int64)
            # lane-transposed for the kernel: (nb, 4, 16)
            self.blocks = np.ascontiguousarray(payload.transpose(0, 2, 1))
            self.dense = None
            self.weight_count = payload.shape[0] * BLOCK_ROWS * BLOCK_COLS

    def apply(self, x):
        out = np.empty(self.rows, dtype=x.dtype)
        if x.dtype == np.float32:
            if self.dense is not None:
                kernels.dense_matvec_i8_f32(self.dense, x, out)
            else:
                kernels.bsr_matvec_i8_f32(self.indptr, self.colblocks,
                                          self.blocks, x, out)
        elif self.dense is not None:
            kernels.dense_matvec_i8(self.dense, x, out)
        else:
            kernels.bsr_matvec_i8(self.indptr, self.colblocks, self.blocks, x, out)
        return out

    def to_dense_codes(self):
        if self.dense is not None:
            return np.array(self.dense, dtype=np.int8)
        out = np.zeros((self.rows, self.cols), dtype=np.int8)
        payload = self.blocks.transpose(0, 2, 1)
        nrb = self.rows // BLOCK_ROWS
        for rb in range(nrb):
            for bi in range(self.indptr[rb], self.indptr[rb + 1]):
                cb = int(self.colblocks[bi])
                out[rb * 16:rb * 16 + 16, cb * 4:cb * 4 + 4] = payload[bi]
        return out

    def row_slice(self, lo, hi):
        """Sub-matrix over a row range; block rows must align to the range."""
        if self.dense is not None:
            return _Matvec(hi - lo, self.cols, dense=self.dense[lo:hi])
        sel = []
        payload = self.blocks.transpose(0, 2, 1)
        nrb = self.rows // BLOCK_ROWS
        coords = []
        for rb in range(nrb):
            for bi in range(self.indptr[rb], self.indptr[rb + 1]):
                r0 = rb * BLOCK_ROWS
                if lo <= r0 < hi:
                    coords.append(((r0 - lo) // BLOCK_ROWS, int(self.colblocks[bi])))
                    sel.append(bi)
        coords = np.array(coords, dtype=np.int64).reshape(-1, 2)
        return _Matvec(hi - lo, self.cols,
                       blocks=(coords, payload[sel].astype(np.int8)))

class Layer:
    def __init__(self, index, kind, activation, sources, in_dim, out_dim,
                 kernel_width, sparse, mat: _Matvec, biases):
        self.index = index
        self.kind = kind
        self.activation = activation
        self.sources = sources
        self.in_dim = in_dim
        self.out_dim = out_dim
        self.kernel_width = kernel_width
        self.sparse = sparse
        self.mat = mat
        self.biases = biases
        if kind == "gru":
            u = out_dim
            self._zr = mat.row_slice(0, 2 * u)
            self._h = mat.row_slice(2 * u, 3 * u)
            self._b_zr = biases[: 2 * u]
            self._b_h = biases[2 * u:]

    @property
    def weight_count(self):
        return self.mat.weight_count

    def gate_densities(self):
        """(update, reset, candidate) densities; gru layers only."""
        if self.kind != "gru":
            return None
        u = self.out_dim
        cols = self.mat.cols
        if self.mat.dense is not None:
            return (1.0, 1.0, 1.0)
        per_rb = np.diff(self.mat.indptr)
        nrb_gate = u // BLOCK_ROWS
        return tuple(per_rb[g * nrb_gate:(g + 1) * nrb_gate].sum() * 64 / (u * cols)
                     for g in range(3))


class RuntimeState:
    """Per-stream buffers: conv rings and gru hidden vectors (float32, like
    the streaming inference path)."""

    def __init__(self, weights: "ModelWeights"):
        self.conv = {}
        self.hidden = {}
        for layer in weights.layers:
            if layer.kind == "conv":
                self.conv[layer.index] = np.zeros((layer.kernel_width, layer.in_dim),
                                                  dtype=np.float32)
            elif layer.kind == "gru":
                self.hidden[layer.index] = np.zeros(layer.out_dim, dtype=np.float32)

    def reset(self):
        for buf in self.conv.values():
            buf[:] = 0.0
        for h in self.hidden.values():
            h[:] = 0.0


class ModelWeights:
    """Immutable after load; shareable across streams."""

    def __init__(self, layers, norm_offset, norm_scale, rate_mode):
        self.layers = layers
        self.norm_offset = norm_offset
        self.norm_scale = norm_scale
        self.rate_mode = rate_mode
        self.input_dim = 0
        for layer in layers:
            if INPUT_SOURCE in layer.sources:
                others = sum(layers[s].out_dim for s in layer.sources
                             if s != INPUT_SOURCE)
                self.input_dim = layer.in_dim - others
                break
        self.num_bands = layers[-1].out_dim if layers else 0

    def weight_count(self):
        return sum(layer.weight_count for layer in self.layers)

    def macs_per_frame(self):
        """Multiply-accumulates per frame: every stored weight fires once."""
        return self.weight_count()

    def create_state(self):
        return RuntimeState(self)

    def normalize(self, features):
        d = features.shape[0]
        return (features - self.norm_offset[:d]) * self.norm_scale[:d]

    def forward(self, state: RuntimeState, features: np.ndarray):
        """One frame through the network; returns (gains, strengths).

        Runs in float32: int8 codes are exact in f32 and the narrower lanes
        roughly double matvec throughput.
        """
        x0 = self.normalize(np.asarray(features, dtype=float)).astype(np.float32)
        outputs = [None] * len(self.layers)

        for layer in self.layers:
            srcs = layer.sources
            if len(srcs) == 1:
                s = srcs[0]
                x = x0 if s == INPUT_SOURCE else outputs[s]
            else:
                x = np.concatenate(
                    [x0 if s == INPUT_SOURCE else outputs[s] for s in srcs])
            if layer.kind == "conv":
                buf = state.conv[layer.index]
                buf[:-1] = buf[1:]
                buf[-1] = x
                raw = layer.mat.apply(buf.reshape(-1))
                y = _ACT_FN[layer.activation](raw * WEIGHT_SCALE + layer.biases)
            elif layer.kind == "gru":
                h = state.hidden[layer.index]
                xh = np.empty(layer.in_dim + layer.out_dim, dtype=np.float32)
                xh[: layer.in_dim] = x
                xh[layer.in_dim:] = h
                zr = _sigmoid(layer._zr.apply(xh) * WEIGHT_SCALE + layer._b_zr)
                z = zr[: layer.out_dim]
                r = zr[layer.out_dim:]
                xh[layer.in_dim:] = r * h
                hcand = np.tanh(layer._h.apply(xh) * WEIGHT_SCALE + layer._b_h)
                h = (1.0 - z) * h + z * hcand
                state.hidden[layer.index] = h
                y = h
            else:
                raw = layer.mat.apply(np.ascontiguousarray(x, dtype=np.float32))
                y = _ACT_FN[layer.activation](raw * WEIGHT_SCALE + layer.biases)
            outputs[layer.index] = y

        gains = outputs[self.layers[-2].index].astype(float)
        strengths = outputs[self.layers[-1].index].astype(float)
        return gains, strengths


class IdentityModel:
    """Stub producing unit gains and zero strengths (pure pass-through)."""

    def __init__(self, num_bands=32):
        self.num_bands = num_bands
        self.input_dim = 0

    def weight_count(self):
        return 0

    def macs_per_frame(self):
        return 0

    def create_state(self):
        return None

    def forward(self, state, features):
        return np.ones(self.num_bands), np.zeros(self.num_bands)


def _rows_cols(kind, in_dim, out_dim, kernel_width):
    if kind == "conv":
        return out_dim, in_dim * kernel_width
    if kind == "gru":
        return 3 * out_dim, in_dim + out_dim
    return out_dim, in_dim


def load_weights(path) -> ModelWeights:
    with open(path, "rb") as fh:
        data = fh.read()
    if len(data) < 4 + 4 + 4 + NORM_SLOTS * 8 + 4 + 4:
        raise WeightFormatError("file too short")
    if data[:4] != MAGIC:
        raise WeightFormatError(f"bad magic {data[:4]!r}")
    stored_crc = struct.unpack("<I", data[-4:])[0]
    if zlib.crc32(data[:-4]) & 0xFFFFFFFF != stored_crc:
        raise WeightFormatError("CRC mismatch")
    pos = 4
    version, rate_mode = struct.unpack_from("<II", data, pos)
    pos += 8
    if version != VERSION:
        raise WeightFormatError(f"unsupported version {version}")
    norm_offset = np.frombuffer(data, dtype="<f4", count=NORM_SLOTS, offset=pos).astype(float)
    pos += NORM_SLOTS * 4
    norm_scale = np.frombuffer(data, dtype="<f4", count=NORM_SLOTS, offset=pos).astype(float)
    pos += NORM_SLOTS * 4
    (layer_count,) = struct.unpack_from("<I", data, pos)
    pos += 4

    layers = []
    for li in range(layer_count):
        where = f"layer {li}"
        try:
            kind_b, act_b, src_count = struct.unpack_from("<BBB", data, pos)
            pos += 3
            sources = list(struct.unpack_from(f"<{src_count}H", data, pos))
            pos += 2 * src_count
            in_dim, out_dim = struct.unpack_from("<II", data, pos)
            pos += 8
            kernel_width, sparse = struct.unpack_from("<BB", data, pos)
            pos += 2
        except struct.error as exc:
            raise WeightFormatError(f"{where}: truncated header") from exc
        if kind_b >= len(KINDS):
            raise WeightFormatError(f"{where}: unknown kind {kind_b}")
        if act_b >= len(ACTIVATIONS):
            raise WeightFormatError(f"{where}: unknown activation {act_b}")
        kind = KINDS[kind_b]
        where = f"layer {li} ({kind})"
        for s in sources:
            if s != INPUT_SOURCE and s >= li:
                raise WeightFormatError(f"{where}: source {s} is not an earlier layer")
        src_dim = sum(0 if s == INPUT_SOURCE else layers[s].out_dim for s in sources)
        has_input = INPUT_SOURCE in sources
        if (not has_input and src_dim != in_dim) or (has_input and src_dim >= in_dim):
            raise WeightFormatError(
                f"{where}: in_dim {in_dim} inconsistent with source dims {src_dim}")
        rows, cols = _rows_cols(kind, in_dim, out_dim, kernel_width)
        if sparse:
            if rows % BLOCK_ROWS or cols % BLOCK_COLS:
                raise WeightFormatError(
                    f"{where}: sparse shape {rows}x{cols} not block-aligned")
            (block_count,) = struct.unpack_from("<I", data, pos)
            pos += 4
            coords = np.frombuffer(data, dtype="<u2", count=2 * block_count,
                                   offset=pos).reshape(-1, 2).astype(np.int64)
            pos += 4 * block_count
            if coords.size:
                if coords[:, 0].max() >= rows // BLOCK_ROWS or \
                        coords[:, 1].max() >= cols // BLOCK_COLS:
                    raise WeightFormatError(f"{where}: block index out of range")
                keys = coords[:, 0] * (cols // BLOCK_COLS) + coords[:, 1]
                if np.unique(keys).size != keys.size:
                    raise WeightFormatError(f"{where}: duplicate block")
            payload = np.frombuffer(data, dtype=np.int8, count=64 * block_count,
                                    offset=pos).reshape(-1, BLOCK_ROWS, BLOCK_COLS)
            pos += 64 * block_count
            mat = _Matvec(rows, cols, blocks=(coords, payload.copy()))
        else:
            n = rows * cols
            if pos + n > len(data) - 4:
                raise WeightFormatError(f"{where}: truncated dense payload")
            mat = _Matvec(rows, cols,
                          dense=np.frombuffer(data, dtype=np.int8, count=n,
                                              offset=pos).reshape(rows, cols))
            pos += n
        nb = 3 * out_dim if kind == "gru" else out_dim
        biases = np.frombuffer(data, dtype="<f4", count=nb, offset=pos).astype(np.float32)
        pos += 4 * nb
        layers.append(Layer(li, kind, ACTIVATIONS[act_b], sources, in_dim, out_dim,
                            kernel_width, bool(sparse), mat, biases))

    if pos != len(data) - 4:
        raise WeightFormatError(f"trailing bytes after layer {layer_count - 1}")
    if layer_count < 2:
        raise WeightFormatError("need at least two layers (output heads)")
    g_head, r_head = layers[-2], layers[-1]
    if g_head.out_dim != r_head.out_dim:
        raise WeightFormatError("output heads disagree on band count")
    return ModelWeights(layers, norm_offset, norm_scale, rate_mode)


def write_weights(path, layers, *, rate_mode=16000, norm_offset=None, norm_scale=None):
    """Serialize layer dicts to the PNW1 format.

    Each dict: kind, activation, sources (-1 for the feature input), in_dim,
    out_dim, kernel_width, sparse, weights (int8 rows x cols), biases.
    Sparse layers store exactly the 16x4 blocks that contain any nonzero.
    """
    out = bytearray()
    out += MAGIC
    out += struct.pack("<II", VERSION, rate_mode)
    off = np.zeros(NORM_SLOTS, dtype="<f4")
    sc = np.ones(NORM_SLOTS, dtype="<f4")
    if norm_offset is not None:
        off[: len(norm_offset)] = norm_offset
    if norm_scale is not None:
        sc[: len(norm_scale)] = norm_scale
    out += off.tobytes() + sc.tobytes()
    out += struct.pack("<I", len(layers))
    for spec in layers:
        kind = spec["kind"]
        rows, cols = _rows_cols(kind, spec["in_dim"], spec["out_dim"],
                                spec.get("kernel_width", 1))
        w = np.asarray(spec["weights"], dtype=np.int8)
        if w.shape != (rows, cols):
            raise WeightFormatError(
                f"weights shape {w.shape} != expected {(rows, cols)} for {kind}")
        sources = [INPUT_SOURCE if s < 0 else s for s in spec["sources"]]
        out += struct.pack("<BBB", KINDS.index(kind),
                           ACTIVATIONS.index(spec["activation"]), len(sources))
        out += struct.pack(f"<{len(sources)}H", *sources)
        out += struct.pack("<II", spec["in_dim"], spec["out_dim"])
        out += struct.pack("<BB", spec.get("kernel_width", 1), int(spec["sparse"]))
        if spec["sparse"]:
            if rows % BLOCK_ROWS or cols % BLOCK_COLS:
                raise WeightFormatError(f"sparse shape {rows}x{cols} not block-aligned")
            grid = w.reshape(rows // BLOCK_ROWS, BLOCK_ROWS,
                             cols // BLOCK_COLS, BLOCK_COLS)
            mask = grid.any(axis=(1, 3))
            rb, cb = np.nonzero(mask)
            out += struct.pack("<I", rb.size)
            out += np.stack([rb, cb], axis=1).astype("<u2").tobytes()
            out += np.ascontiguousarray(
                grid[rb, :, cb, :]).astype(np.int8).tobytes()
        else:
            out += w.tobytes()
        nb = 3 * spec["out_dim"] if kind == "gru" else spec["out_dim"]
        biases = np.asarray(spec["biases"], dtype="<f4")
        if biases.shape != (nb,):
            raise WeightFormatError(f"biases shape {biases.shape} != ({nb},)")
        out += biases.tobytes()
    out += struct.pack("<I", zlib.crc32(bytes(out)) & 0xFFFFFFFF)
    with open(path, "wb") as fh:
        fh.write(bytes(out))


GATE_DENSITIES = {"update": 0.20, "reset": 0.10, "candidate": 0.40}
CONV2_DENSITY = 0.50


def _arch(units_cap):
    conv1 = min(320, units_cap)
    conv2 = min(256, units_cap)
    gru = min(512, units_cap)
    return conv1, conv2, gru


def _masked_random_codes(rng, rows, cols, density):
    """Random codes with an exact count of nonzero 16x4 blocks."""
    w = rng.integers(-64, 65, size=(rows, cols)).astype(np.int8)
    w[w == 0] = 1
    if density >= 1.0:
        return w
    nrb, ncb = rows // BLOCK_ROWS, cols // BLOCK_COLS
    keep = int(round(density * nrb * ncb))
    chosen = rng.choice(nrb * ncb, size=keep, replace=False)
    mask = np.zeros(nrb * ncb, dtype=bool)
    mask[chosen] = True
    mask = mask.reshape(nrb, ncb)
    grid = w.reshape(nrb, BLOCK_ROWS, ncb, BLOCK_COLS)
    grid *= mask[:, None, :, None]
    return grid.reshape(rows, cols)


def build_reference_model(path, variant="full", seed=0, num_features=100,
                          num_bands=32, rate_mode=16000):
    """Write a structurally faithful model file with random codes.

    Variants: "full" (dense, ~8M weights), "sparse" (~2.1M), "small"
    (256-unit layers, ~800k). Used for size/complexity/performance checks;
    trained weights come from the separate trainer.
    """
    rng = np.random.default_rng(seed)
    sparse = variant in ("sparse", "small")
    conv1, conv2, gru = _arch(256 if variant == "small" else 10 ** 9)

    def gru_weights(in_dim, out_dim):
        cols = in_dim + out_dim
        if not sparse:
            w = rng.integers(-64, 65, size=(3 * out_dim, cols)).astype(np.int8)
            w[w == 0] = 1
            return w
        parts = [
            _masked_random_codes(rng, out_dim, cols, GATE_DENSITIES["update"]),
            _masked_random_codes(rng, out_dim, cols, GATE_DENSITIES["reset"]),
            _masked_random_codes(rng, out_dim, cols, GATE_DENSITIES["candidate"]),
        ]
        return np.concatenate(parts, axis=0)

    def bias(n):
        return rng.normal(scale=0.05, size=n).astype(np.float32)

    layers = [
        dict(kind="conv", activation="tanh", sources=[-1], in_dim=num_features,
             out_dim=conv1, kernel_width=5, sparse=False,
             weights=_masked_random_codes(rng, conv1, 5 * num_features, 1.0),
             biases=bias(conv1)),
        dict(kind="conv", activation="tanh", sources=[0], in_dim=conv1,
             out_dim=conv2, kernel_width=3, sparse=sparse,
             weights=_masked_random_codes(rng, conv2, 3 * conv1,
                                          CONV2_DENSITY if sparse else 1.0),
             biases=bias(conv2)),
    ]
    prev_dim, prev_idx = conv2, 1
    for _ in range(5):
        layers.append(dict(kind="gru", activation="tanh", sources=[prev_idx],
                           in_dim=prev_dim, out_dim=gru, kernel_width=1,
                           sparse=sparse, weights=gru_weights(prev_dim, gru),
                           biases=bias(3 * gru)))
        prev_dim, prev_idx = gru, len(layers) - 1
    gru_indices = list(range(2, 7))
    head_in = 5 * gru
    for _ in range(2):
        layers.append(dict(kind="dense", activation="sigmoid", sources=gru_indices,
                           in_dim=head_in, out_dim=num_bands, kernel_width=1,
                           sparse=False,
                           weights=_masked_random_codes(rng, num_bands, head_in, 1.0),
                           biases=bias(num_bands)))
    write_weights(path, layers, rate_mode=rate_mode)
    return path
