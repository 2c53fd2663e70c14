"""Binary volume/field files, score CSVs and run configuration.

GPV1 layout (all integers unsigned 32-bit little-endian)::

    "GPV1" nx ny nz nvol | mask: nx*ny*nz bytes (0/1) | nvol x float32 LE volumes

GPH1 is identical with magic "GPH1" and ``p`` (= 3) in place of ``nvol``;
its volumes hold the three log-hyperparameter components.  Voxel order is
x fastest, then y, then z.  Masked-out voxels are stored as one canonical
quiet NaN.
"""

import csv
import io
import math
import os
import struct
import tempfile
from dataclasses import dataclass, fields

import numpy as np

from .errors import ConfigError, FormatError
from .gp_core import KernelKind
from .optimize import OptimizerOptions
from .spatial_field import CarConfig, CouplingMode, HyperField, Lattice
from .volume_model import EMPIRICAL, ScoreMap

HEADER = struct.Struct("<4sIIII")
CANONICAL_NAN = np.frombuffer(b"\x00\x00\xc0\x7f", dtype="<f4")[0]
GPH1_P = 3


def expected_length(dims, nvol):
    nx, ny, nz = dims
    return HEADER.size + nx * ny * nz * (1 + 4 * nvol)


def atomic_write(path, data):
    """Write bytes to ``path`` via a temporary file in the same directory."""
    path = os.fspath(path)
    directory = os.path.dirname(os.path.abspath(path))
    fd, tmp = tempfile.mkstemp(dir=directory, prefix=".tmp-", suffix=os.path.basename(path))
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def _encode(magic, mask, volumes):
    mask = np.asarray(mask, dtype=bool)
    volumes = np.asarray(volumes, dtype=np.float64)
    if volumes.ndim != 4 or volumes.shape[1:] != mask.shape:
        raise ValueError(f"volumes of shape {volumes.shape} do not match mask {mask.shape}")
    nx, ny, nz = mask.shape
    out = volumes.astype("<f4")
    out[:, ~mask] = CANONICAL_NAN
    out[np.isnan(out)] = CANONICAL_NAN
    parts = [HEADER.pack(magic, nx, ny, nz, volumes.shape[0]),
             mask.reshape(-1, order="F").astype(np.uint8).tobytes()]
    parts += [v.reshape(-1, order="F").tobytes() for v in out]
    return b"".join(parts)


def _decode(magic, blob):
    if len(blob) < HEADER.size:
        raise FormatError(f"file truncated inside the header at byte {len(blob)}", len(blob))
    got, nx, ny, nz, nvol = HEADER.unpack_from(blob)
    if got != magic:
        raise FormatError(f"bad magic {got!r} at byte 0, expected {magic!r}", 0)
    if min(nx, ny, nz) < 1:
        raise FormatError("zero dimension in header at byte 4", 4)
    want = expected_length((nx, ny, nz), nvol)
    if len(blob) != want:
        offset = min(len(blob), want)
        raise FormatError(
            f"length {len(blob)} bytes, expected {want}; first offending byte offset {offset}", offset
        )
    nvox = nx * ny * nz
    mask_bytes = np.frombuffer(blob, dtype=np.uint8, count=nvox, offset=HEADER.size)
    bad = np.flatnonzero(mask_bytes > 1)
    if bad.size:
        offset = HEADER.size + int(bad[0])
        raise FormatError(f"mask byte {mask_bytes[bad[0]]} at byte offset {offset} is not 0/1", offset)
    dims = (nx, ny, nz)
    mask = mask_bytes.astype(bool).reshape(dims, order="F")
    data = np.frombuffer(blob, dtype="<f4", count=nvox * nvol, offset=HEADER.size + nvox)
    vols = data.reshape(nvol, nvox).reshape((nvol,) + dims, order="F")
    return mask, vols.astype(np.float32)


@dataclass
class VolumeFile:
    mask: np.ndarray  # bool, (nx, ny, nz)
    volumes: np.ndarray  # float32, (nvol, nx, ny, nz)

    @property
    def dims(self):
        return self.mask.shape

    @property
    def lattice(self):
        return Lattice(self.dims, self.mask)


def encode_gpv(mask, volumes):
    return _encode(b"GPV1", mask, volumes)


def decode_gpv(blob):
    return VolumeFile(*_decode(b"GPV1", blob))


def write_gpv(path, mask, volumes):
    atomic_write(path, encode_gpv(mask, volumes))


def read_gpv(path):
    with open(path, "rb") as fh:
        return decode_gpv(fh.read())


def encode_gph(field):
    vols = np.stack([field.component_volume(i) for i in range(GPH1_P)])
    return _encode(b"GPH1", field.lattice.mask, vols)


def decode_gph(blob):
    mask, vols = _decode(b"GPH1", blob)
    if vols.shape[0] != GPH1_P:
        raise FormatError(f"GPH1 must hold p={GPH1_P} components, header says {vols.shape[0]} (byte 16)", 16)
    lattice = Lattice(mask.shape, mask)
    values = np.stack([lattice.from_volume(v) for v in vols], axis=1).astype(np.float64)
    if not np.all(np.isfinite(values)):
        raise FormatError("non-finite hyperparameter inside the mask")
    return HyperField(lattice, values)


def write_gph(path, field):
    atomic_write(path, encode_gph(field))


def read_gph(path):
    with open(path, "rb") as fh:
        return decode_gph(fh.read())


# -- scores CSV ---------------------------------------------------------------

def format_scores_csv(scores):
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["subject", "score"])
    for i, s in enumerate(scores):
        w.writerow([i, repr(float(s))])
    return buf.getvalue()


def write_scores_csv(path, scores):
    atomic_write(path, format_scores_csv(scores).encode("utf-8"))


def read_scores_csv(path):
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.DictReader(fh)
        if reader.fieldnames is None or [f.strip() for f in reader.fieldnames] != ["subject", "score"]:
            raise FormatError(f"{path}: expected header 'subject,score'", 0)
        try:
            return np.array([float(row["score"]) for row in reader])
        except (TypeError, ValueError) as exc:
            raise FormatError(f"{path}: bad score value ({exc})") from None


# -- run configuration -------------------------------------------------------

@dataclass
class RunConfig:
    """Plain-text ``key=value`` settings for a batch run."""

    kernel: str = "se"
    rho1: float = 1.0
    rho2: float = 1.0
    rho3: float = 1.0
    t1: float = 0.5
    t2: float = 0.5
    t3: float = 0.5
    sweeps: int = 5
    seed: int = 0
    jitter: float = 1e-10
    coupling: str = "diagonal"
    mean: object = 0.0
    opt_max_iter: int = 100
    opt_tol: float = 1e-5
    score_min: float = float("nan")
    score_max: float = float("nan")

    @property
    def kind(self):
        return KernelKind.parse(self.kernel)

    def car_config(self):
        return CarConfig(
            rho=(self.rho1, self.rho2, self.rho3),
            t=(self.t1, self.t2, self.t3),
            coupling_mode=CouplingMode.parse(self.coupling),
            sweeps=self.sweeps,
            seed=self.seed,
        )

    def optimizer_options(self):
        return OptimizerOptions(max_iter=self.opt_max_iter, gtol=self.opt_tol, jitter=self.jitter)

    def score_map(self, scores):
        """Declared score range, filling unset ends from the observed scores."""
        lo = self.score_min if math.isfinite(self.score_min) else float(np.min(scores))
        hi = self.score_max if math.isfinite(self.score_max) else float(np.max(scores))
        return ScoreMap(lo, hi)


_INT_KEYS = {"sweeps", "seed", "opt_max_iter"}
_FLOAT_KEYS = {"rho1", "rho2", "rho3", "t1", "t2", "t3", "jitter", "opt_tol", "score_min", "score_max"}


def _parse_float(key, text):
    # float() accepts only '.' decimals regardless of locale
    try:
        value = float(text)
    except ValueError:
        raise ConfigError(f"{key}: not a number: {text!r}") from None
    if math.isnan(value) or math.isinf(value):
        raise ConfigError(f"{key}: must be finite")
    return value


def parse_run_config(text):
    cfg = RunConfig()
    known = {f.name for f in fields(RunConfig)}
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected key=value, got {raw!r}")
        key, value = (p.strip() for p in line.split("=", 1))
        if key not in known:
            raise ConfigError(f"line {lineno}: unknown key {key!r}")
        if key in _INT_KEYS:
            try:
                parsed = int(value)
            except ValueError:
                raise ConfigError(f"line {lineno}: {key} must be an integer") from None
        elif key in _FLOAT_KEYS:
            parsed = _parse_float(key, value)
        elif key == "kernel":
            try:
                parsed = KernelKind.parse(value).value
            except ValueError as exc:
                raise ConfigError(f"line {lineno}: {exc}") from None
        elif key == "coupling":
            if value.lower() not in ("diagonal", "fullrow"):
                raise ConfigError(f"line {lineno}: coupling must be diagonal or fullrow")
            parsed = value.lower()
        else:  # mean
            parsed = EMPIRICAL if value.lower() == EMPIRICAL else _parse_float(key, value)
        setattr(cfg, key, parsed)
    try:
        cfg.car_config()
        cfg.optimizer_options()
    except ValueError as exc:
        raise ConfigError(str(exc)) from None
    return cfg


def read_run_config(path):
    with open(path, encoding="utf-8") as fh:
        return parse_run_config(fh.read())


def parse_bins(text):
    """Parse ``"upper:rep,upper:rep,..."`` into ``[(upper, rep), ...]``."""
    segments = []
    for part in text.split(","):
        part = part.strip()
        if not part:
            continue
        try:
            upper, rep = (float(p) for p in part.split(":"))
        except ValueError:
            raise ConfigError(f"malformed bin segment {part!r}; expected upper:representative") from None
        segments.append((upper, rep))
    if not segments:
        raise ConfigError("empty bins specification")
    return segments
