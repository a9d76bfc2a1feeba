"""Dataset ingestion, checkpoint files and figure-data exports."""

from __future__ import annotations

import io
import logging
import math
import os
import struct
import tempfile
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import FormatError, IncompatibleVersionError, ShapeError
from .inference import ActiveMask, BetaPosteriorBank, q_lambda_batch
from .mathcore import Rng
from .model import HyperParams, ModelState
from .network import ACTIVATIONS, AdamState, MultiplexerNet
from .training import TrainState

log = logging.getLogger(__name__)

SCALINGS = ("unit_interval", "zero_mean", "raw")
IDX_IMAGES_MAGIC = 0x00000803
IDX_LABELS_MAGIC = 0x00000801


@dataclass
class Dataset:
    X: np.ndarray  # (D, N)
    labels: np.ndarray | None = None
    scaling: str = "raw"

    def __post_init__(self):
        if self.labels is not None and len(self.labels) != self.X.shape[1]:
            raise ShapeError(f"{len(self.labels)} labels for {self.X.shape[1]} data columns")

    @property
    def D(self) -> int:
        return self.X.shape[0]

    @property
    def N(self) -> int:
        return self.X.shape[1]

    def subset(self, n: int) -> Dataset:
        labels = None if self.labels is None else self.labels[:n]
        return Dataset(self.X[:, :n].copy(), labels, self.scaling)


def atomic_write(path, data: bytes):
    """Write to a temporary sibling and rename over ``path``."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def atomic_write_text(path, text: str):
    atomic_write(path, text.encode())


# -- IDX ----------------------------------------------------------------------


def _read_idx(path, magic: int, what: str) -> np.ndarray:
    raw = Path(path).read_bytes()
    if len(raw) < 4:
        raise FormatError(f"{path}: truncated {what} file, header ends at byte offset {len(raw)}")
    got = struct.unpack(">I", raw[:4])[0]
    if got != magic:
        raise FormatError(f"{path}: bad magic 0x{got:08x} at byte offset 0, expected 0x{magic:08x}")
    ndim = magic & 0xFF
    header = 4 + 4 * ndim
    if len(raw) < header:
        raise FormatError(f"{path}: truncated header, file ends at byte offset {len(raw)} before {header}")
    dims = struct.unpack(f">{ndim}I", raw[4:header])
    need = header + math.prod(dims)
    if len(raw) != need:
        raise FormatError(f"{path}: payload ends at byte offset {len(raw)}, header implies {need}")
    return np.frombuffer(raw, dtype=np.uint8, offset=header).reshape(dims)


def write_idx(path, array):
    """Write a uint8 array of 1 (labels) or 3 (images) dimensions in IDX format."""
    a = np.asarray(array)
    if a.ndim not in (1, 3) or a.dtype != np.uint8:
        raise ShapeError("IDX writer takes uint8 arrays with 1 or 3 dimensions")
    header = struct.pack(">I", 0x00000800 | a.ndim) + struct.pack(f">{a.ndim}I", *a.shape)
    atomic_write(path, header + a.tobytes())


def scale_pixels(X, scaling: str) -> np.ndarray:
    if scaling not in SCALINGS:
        raise ValueError(f"unknown scaling {scaling!r}; choose from {SCALINGS}")
    X = np.asarray(X, dtype=np.float64)
    if scaling == "raw":
        return X
    X = X / 255.0
    if scaling == "zero_mean":
        X = X - X.mean(axis=1, keepdims=True)
    return X


def load_idx(images_path, labels_path=None, scaling: str = "unit_interval") -> Dataset:
    """Load IDX images (one flattened image per column) and optional labels."""
    imgs = _read_idx(images_path, IDX_IMAGES_MAGIC, "image")
    n, rows, cols = imgs.shape
    X = scale_pixels(imgs.reshape(n, rows * cols).T, scaling)
    labels = None
    if labels_path is not None:
        labels = _read_idx(labels_path, IDX_LABELS_MAGIC, "label").astype(np.int64)
        if labels.shape[0] != n:
            raise FormatError(f"{labels_path}: {labels.shape[0]} labels (count at byte offset 4) "
                              f"but {n} images")
    return Dataset(np.ascontiguousarray(X), labels, scaling)


# seven-segment layout: a top, b upper right, c lower right, d bottom, e lower left, f upper left, g middle
_SEGMENTS = {
    0: "abcdef", 1: "bc", 2: "abdeg", 3: "abcdg", 4: "bcfg",
    5: "acdfg", 6: "acdefg", 7: "abc", 8: "abcdefg", 9: "abcdfg",
}


def synthetic_digits(n: int, rng: Rng, side: int = 28) -> tuple[np.ndarray, np.ndarray]:
    """MNIST-like stand-in: jittered seven-segment digits as uint8 images (n, side, side) and labels."""
    labels = (rng.substream(0).uniform(n) * 10).astype(np.int64)
    jit = rng.substream(1)
    noise = rng.substream(2)
    imgs = np.zeros((n, side, side))
    for i, d in enumerate(labels):
        dx, dy, thick = (jit.uniform(3) * [5, 5, 2]).astype(int) - [2, 2, 0]
        left, right = side // 4 + dx, 3 * side // 4 + dx
        top, mid, bot = side // 6 + dy, side // 2 + dy, 5 * side // 6 + dy
        w = 2 + thick
        boxes = {
            "a": (top, top + w, left, right), "g": (mid - w // 2, mid - w // 2 + w, left, right),
            "d": (bot - w, bot, left, right), "f": (top, mid, left, left + w),
            "b": (top, mid, right - w, right), "e": (mid, bot, left, left + w), "c": (mid, bot, right - w, right),
        }
        level = 0.7 + 0.3 * jit.uniform()
        for s in _SEGMENTS[int(d)]:
            r0, r1, c0, c1 = boxes[s]
            imgs[i, max(r0, 0):r1, max(c0, 0):c1] = level
    imgs += 0.05 * np.abs(noise.normal(imgs.shape))
    return np.round(np.clip(imgs, 0.0, 1.0) * 255).astype(np.uint8), labels


# -- checkpoints --------------------------------------------------------------

CKPT_MAGIC = b"BPDCCKPT"
CKPT_VERSION = 1


@dataclass
class Checkpoint:
    """Training state plus the master seed.

    Binary layout (all integers little-endian): 8-byte magic ``BPDCCKPT``,
    uint32 format_version, uint32 array count, then each array as a uint64
    element count followed by that many float64 values. Array order:

    0. hyper: alpha, gamma, sigma2, c, K, M, D, L_max, prune_threshold, nonneg_dict
    1. run: iteration, seed, activation index, number of layers
    2. layer dims [K, h_1, ..., M]
    3. per layer: weights (row-major, out x in), biases
    4. phi (row-major, D x M)
    5. bank a, bank b, active mask (0/1)
    6. adam: t, stepsize, beta1, beta2, eps; then first moments, then second
       moments, each in parameter order phi, W_0, b_0, W_1, b_1, ...
    """

    state: TrainState
    seed: int
    format_version: int = CKPT_VERSION

    @property
    def hyper(self) -> HyperParams:
        return self.state.model.hyper


def _encode(arrays) -> bytes:
    buf = io.BytesIO()
    buf.write(CKPT_MAGIC)
    buf.write(struct.pack("<II", CKPT_VERSION, len(arrays)))
    for a in arrays:
        a = np.ascontiguousarray(a, dtype="<f8").ravel()
        buf.write(struct.pack("<Q", a.size))
        buf.write(a.tobytes())
    return buf.getvalue()


def save_checkpoint(path, ckpt: Checkpoint):
    s = ckpt.state
    h = s.model.hyper
    if not 0 <= ckpt.seed < 2 ** 53:
        raise ValueError("seed must be below 2**53 to be stored exactly")
    net = s.model.net
    arrays = [
        [h.alpha, h.gamma, h.sigma2, h.c, h.K, h.M, h.D, h.L_max, h.prune_threshold, float(h.nonneg_dict)],
        [s.iteration, ckpt.seed, ACTIVATIONS.index(net.activation), len(net.weights)],
        net.layer_dims,
    ]
    for w, b in zip(net.weights, net.biases):
        arrays += [w, b]
    arrays += [s.model.phi, s.bank.a, s.bank.b, s.mask.active.astype(np.float64)]
    ad = s.adam
    arrays.append([ad.t, ad.stepsize, ad.beta1, ad.beta2, ad.eps])
    arrays += ad.m + ad.v
    atomic_write(path, _encode(arrays))


def load_checkpoint(path) -> Checkpoint:
    raw = Path(path).read_bytes()
    if len(raw) < 16:
        raise FormatError(f"{path}: truncated checkpoint header ({len(raw)} bytes)")
    if raw[:8] != CKPT_MAGIC:
        raise FormatError(f"{path}: not a checkpoint (bad magic at byte offset 0)")
    version, count = struct.unpack("<II", raw[8:16])
    if version != CKPT_VERSION:
        raise IncompatibleVersionError(f"{path}: checkpoint format version {version}, this build reads {CKPT_VERSION}")
    arrays, off = [], 16
    for i in range(count):
        if off + 8 > len(raw):
            raise FormatError(f"{path}: array {i} length prefix cut at byte offset {off}")
        (size,) = struct.unpack("<Q", raw[off:off + 8])
        off += 8
        end = off + 8 * size
        if end > len(raw):
            raise FormatError(f"{path}: array {i} needs {size} values, file ends at byte offset {len(raw)}")
        arrays.append(np.frombuffer(raw, dtype="<f8", count=size, offset=off).astype(np.float64))
        off = end
    if off != len(raw):
        raise FormatError(f"{path}: {len(raw) - off} trailing bytes after byte offset {off}")
    try:
        return _decode(arrays)
    except (IndexError, ValueError) as exc:
        raise FormatError(f"{path}: inconsistent checkpoint contents ({exc})") from exc


def _decode(arrays) -> Checkpoint:
    it = iter(arrays)

    def take(shape=None):
        a = next(it)
        if shape is not None:
            if a.size != math.prod(shape):
                raise ValueError(f"array of {a.size} values where shape {shape} was expected")
            a = a.reshape(shape)
        return a

    hv = take((10,))
    hyper = HyperParams(alpha=hv[0], gamma=hv[1], sigma2=hv[2], c=hv[3], K=int(hv[4]), M=int(hv[5]),
                        D=int(hv[6]), L_max=int(hv[7]), prune_threshold=hv[8], nonneg_dict=bool(hv[9]))
    iteration, seed, act, n_layers = (int(v) for v in take((4,)))
    dims = [int(d) for d in take((n_layers + 1,))]
    weights, biases = [], []
    for din, dout in zip(dims[:-1], dims[1:]):
        weights.append(take((dout, din)))
        biases.append(take((dout,)))
    net = MultiplexerNet(weights, biases, ACTIVATIONS[act])
    phi = take((hyper.D, hyper.M))
    bank = BetaPosteriorBank(take((hyper.K,)), take((hyper.K,)))
    mask = ActiveMask(take((hyper.K,)) != 0.0)
    t, stepsize, b1, b2, eps = take((5,))
    model = ModelState(phi, net, hyper)
    shapes = [p.shape for p in model.params()]
    m = [take(s) for s in shapes]
    v = [take(s) for s in shapes]
    if next(it, None) is not None:
        raise ValueError("extra arrays at end of checkpoint")
    adam = AdamState(m, v, stepsize, b1, b2, eps, int(t))
    return Checkpoint(TrainState(model, bank, mask, adam, iteration), seed)


# -- figure exports -----------------------------------------------------------


def image_shape(D: int) -> tuple[int, int]:
    side = math.isqrt(D)
    return (side, side) if side * side == D else (1, D)


def pgm_bytes(img) -> bytes:
    """Binary PGM (P5) with values in [0, 1] mapped to 0..255."""
    img = np.asarray(img, dtype=np.float64)
    h, w = img.shape
    pix = np.round(np.clip(img, 0.0, 1.0) * 255).astype(np.uint8)
    return f"P5\n{w} {h}\n255\n".encode() + pix.tobytes()


def _codes_matrix(codes, K: int) -> np.ndarray:
    if isinstance(codes, np.ndarray):
        return codes.astype(np.float64)
    return np.stack([c.z for c in codes]).astype(np.float64) if codes else np.zeros((0, K))


def factor_sharing(Z, labels) -> tuple[np.ndarray, np.ndarray]:
    """Expected shared-factor count between classes, normalized by its maximum.

    Returns (class labels, matrix). sharing[d1, d2] = sum_k u[d1, k] u[d2, k], with
    u[d, k] the frequency of bit k among codes labelled d. A matrix that is
    identically zero is returned unnormalized.
    """
    classes = np.unique(labels)
    U = np.stack([Z[labels == d].mean(axis=0) for d in classes])
    S = U @ U.T
    top = S.max()
    return classes, (S / top if top > 0 else S)


def top_bit_table(model: ModelState, bank: BetaPosteriorBank, n_bits: int = 5, n_out: int = 4):
    """Network outputs for every on/off pattern of the highest-E[pi] bits.

    Returns (bit indices, rows); each row is (pattern bits, [(output index, value)] * n_out).
    """
    K = model.hyper.K
    n_bits = min(n_bits, K)
    n_out = min(n_out, model.hyper.M)
    epi = bank.expected_pi()
    bits = np.lexsort((np.arange(K), -epi))[:n_bits]
    patterns = (np.arange(1 << n_bits)[:, None] >> np.arange(n_bits)[::-1]) & 1
    Z = np.zeros((patterns.shape[0], K))
    Z[:, bits] = patterns
    xi = model.net.forward(Z)
    rows = []
    for p, out in zip(patterns, xi):
        order = np.lexsort((np.arange(out.size), -out))[:n_out]
        rows.append((p.tolist(), [(int(j), float(out[j])) for j in order]))
    return bits, rows


def export_reconstructions(model: ModelState, dataset: Dataset, Z, out: Path, n_recon: int = 10) -> dict[str, Path]:
    """Paired original/reconstruction PGM images, a side-by-side grid and the raw CSV."""
    n_recon = min(n_recon, Z.shape[0], dataset.N)
    X = dataset.X[:, :n_recon]
    F = model.phi @ model.net.forward(Z[:n_recon]).T
    means, _ = q_lambda_batch(X, F, model.hyper)
    R = means * F
    shape = image_shape(dataset.D)
    lines = ["index,kind," + ",".join(f"p{i}" for i in range(dataset.D))]
    tiles_o, tiles_r = [], []
    for n in range(n_recon):
        lo = min(X[:, n].min(), R[:, n].min())
        span = max(X[:, n].max(), R[:, n].max()) - lo or 1.0
        img_o = ((X[:, n] - lo) / span).reshape(shape)
        img_r = ((R[:, n] - lo) / span).reshape(shape)
        tiles_o.append(img_o)
        tiles_r.append(img_r)
        atomic_write(out / f"recon_{n:03d}_orig.pgm", pgm_bytes(img_o))
        atomic_write(out / f"recon_{n:03d}_recon.pgm", pgm_bytes(img_r))
        lines.append(f"{n},orig," + ",".join(repr(float(v)) for v in X[:, n]))
        lines.append(f"{n},recon," + ",".join(repr(float(v)) for v in R[:, n]))
    atomic_write_text(out / "reconstructions.csv", "\n".join(lines) + "\n")
    written = {"reconstructions": out / "reconstructions.csv"}
    if n_recon:
        # originals in the left block, reconstructions in the right block
        grid = np.concatenate([np.concatenate(tiles_o, axis=1), np.concatenate(tiles_r, axis=1)], axis=1)
        atomic_write(out / "recon_grid.pgm", pgm_bytes(grid))
        written["recon_grid"] = out / "recon_grid.pgm"
    return written


def export_factor_sharing(Z, labels, out: Path) -> Path:
    classes, S = factor_sharing(Z, np.asarray(labels)[: Z.shape[0]])
    lines = ["label," + ",".join(str(c) for c in classes)]
    lines += [f"{c}," + ",".join(repr(float(v)) for v in row) for c, row in zip(classes, S)]
    atomic_write_text(out / "factor_sharing.csv", "\n".join(lines) + "\n")
    return out / "factor_sharing.csv"


def export_top_bits(model: ModelState, bank: BetaPosteriorBank, out: Path) -> Path:
    bits, rows = top_bit_table(model, bank)
    n_out = len(rows[0][1])
    header = [f"bit{int(b)}" for b in bits]
    header += [f"{kind}{r}" for r in range(1, n_out + 1) for kind in ("out_idx", "out_val")]
    lines = ["pattern," + ",".join(header)]
    for i, (pattern, tops) in enumerate(rows):
        cells = [str(v) for v in pattern] + [x for j, v in tops for x in (str(j), repr(v))]
        lines.append(f"{i}," + ",".join(cells))
    atomic_write_text(out / "top_bits.csv", "\n".join(lines) + "\n")
    return out / "top_bits.csv"


def export_pi_trace(pi_trace, out: Path, name: str = "pi_trace.csv") -> Path:
    K = len(pi_trace[0][1])
    lines = ["iter," + ",".join(f"pi{k}" for k in range(K))]
    lines += [f"{t}," + ",".join(repr(float(v)) for v in epi) for t, epi in pi_trace]
    atomic_write_text(out / name, "\n".join(lines) + "\n")
    return out / name


def export_figures(model: ModelState, bank: BetaPosteriorBank, dataset: Dataset, codes, out_dir,
                   pi_trace=None, n_recon: int = 10) -> dict[str, Path]:
    """Write reconstructions, factor sharing, the top-bit table and the E[pi] trace."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    Z = _codes_matrix(codes, model.hyper.K)
    written = export_reconstructions(model, dataset, Z, out, n_recon)
    if dataset.labels is None:
        log.warning("dataset has no labels; factor-sharing export skipped")
    else:
        written["factor_sharing"] = export_factor_sharing(Z, dataset.labels, out)
    written["top_bits"] = export_top_bits(model, bank, out)
    if pi_trace:
        written["pi_trace"] = export_pi_trace(pi_trace, out)
    return written


def read_pi_trace(path) -> list[tuple[int, np.ndarray]]:
    rows = np.loadtxt(path, delimiter=",", skiprows=1, ndmin=2)
    return [(int(r[0]), r[1:].copy()) for r in rows]


def save_matrix_csv(path, rows, header=None):
    """One matrix row per line; floats written with full round-trip precision."""
    rows = np.atleast_2d(np.asarray(rows))
    lines = [] if header is None else [",".join(header)]
    lines += [",".join(repr(v.item()) for v in row) for row in rows]
    atomic_write_text(path, "\n".join(lines) + "\n")


def load_data(path, labels_path=None, scaling: str = "unit_interval") -> Dataset:
    """IDX image files, or CSV with one datum per row (no header, no scaling applied)."""
    path = Path(path)
    if path.suffix.lower() == ".csv":
        X = np.loadtxt(path, delimiter=",", ndmin=2).T
        labels = None
        if labels_path is not None:
            labels = np.loadtxt(labels_path, delimiter=",", ndmin=1).astype(np.int64)
        return Dataset(np.ascontiguousarray(X), labels, "raw")
    return load_idx(path, labels_path, scaling)
