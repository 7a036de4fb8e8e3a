"""Binary volume/checkpoint formats, key=value configs, run manifests and graymaps.

F4D volume container (all little-endian)::

    magic  b"F4DV"
    u32    version (1)
    u32    kind (0 velocity, 1 magnitude, 2 mask, 3 complex, 4 patch set)
    u32 x5 nx, ny, nz, nt, ncomp
    f64    spacing (mm)
    f64    dt (ms)
    payload in (t, z, y, x, component) order: float32, uint8 for masks,
    float32 (re, im) pairs for complex data

A patch set stores a length-prefixed UTF-8 manifest after the header, then
``count`` records of ``i32 x4 origin (t, z, y, x)``, float32 LR patch,
float32 HR patch and uint8 HR labels.

F4DW checkpoint::

    magic b"F4DW", u32 version (1), u32 entry count, then per entry
    u16 name length, UTF-8 name, u8 dtype code (0 = float32), u8 ndim, u32 x ndim shape;
    raw float32 data per entry follows in manifest order.
"""

from __future__ import annotations

import datetime as _dt
import enum
import os
import struct
from pathlib import Path

import numpy as np
import torch

from .errors import ConfigError, ValidationError
from .patching import HR_PATCH, LR_PATCH, PatchPair
from .volume import MagnitudeVolume, VelocityVolume

__version__ = "0.1.0"

F4D_MAGIC = b"F4DV"
F4DW_MAGIC = b"F4DW"
VERSION = 1
_HEADER = struct.Struct("<4sII5Idd")


class Kind(enum.IntEnum):
    VELOCITY = 0
    MAGNITUDE = 1
    MASK = 2
    COMPLEX = 3
    PATCHSET = 4


_DTYPES = {
    Kind.VELOCITY: np.dtype("<f4"),
    Kind.MAGNITUDE: np.dtype("<f4"),
    Kind.MASK: np.dtype("u1"),
    Kind.COMPLEX: np.dtype("<c8"),
}


def _write_header(f, kind, nx, ny, nz, nt, ncomp, spacing, dt):
    f.write(_HEADER.pack(F4D_MAGIC, VERSION, int(kind), nx, ny, nz, nt, ncomp, float(spacing), float(dt)))


def _read_header(f, path):
    raw = f.read(_HEADER.size)
    if len(raw) != _HEADER.size:
        raise ValidationError(f"{path}: truncated F4D header")
    magic, version, kind, nx, ny, nz, nt, ncomp, spacing, dt = _HEADER.unpack(raw)
    if magic != F4D_MAGIC:
        raise ValidationError(f"{path}: bad magic {magic!r}, expected {F4D_MAGIC!r}")
    if version != VERSION:
        raise ValidationError(f"{path}: unsupported F4D version {version}")
    try:
        kind = Kind(kind)
    except ValueError:
        raise ValidationError(f"{path}: unknown F4D kind {kind}") from None
    return kind, (nx, ny, nz, nt, ncomp), spacing, dt


def write_f4d(path, data, kind, spacing=1.0, dt=1.0):
    """Write an array shaped ``(nt, nz, ny, nx, ncomp)`` (lower ranks are promoted)."""
    kind = Kind(kind)
    if kind is Kind.PATCHSET:
        raise ValidationError("use write_patchset for patch sets")
    arr = np.asarray(data)
    if arr.ndim == 3:
        arr = arr[None, ..., None]
    elif arr.ndim == 4:
        arr = arr[None]
    if arr.ndim != 5:
        raise ValidationError(f"cannot store array of shape {arr.shape}")
    nt, nz, ny, nx, ncomp = arr.shape
    payload = np.ascontiguousarray(arr, dtype=_DTYPES[kind])
    with open(path, "wb") as f:
        _write_header(f, kind, nx, ny, nz, nt, ncomp, spacing, dt)
        f.write(payload.tobytes())


def read_f4d(path, expect=None):
    """Return ``(kind, data, spacing, dt)`` with data shaped ``(nt, nz, ny, nx, ncomp)``."""
    with open(path, "rb") as f:
        kind, (nx, ny, nz, nt, ncomp), spacing, dt = _read_header(f, path)
        if expect is not None and kind != Kind(expect):
            raise ValidationError(f"{path}: expected {Kind(expect).name} data, found {kind.name}")
        if kind is Kind.PATCHSET:
            raise ValidationError(f"{path}: is a patch set; use read_patchset")
        dtype = _DTYPES[kind]
        count = nt * nz * ny * nx * ncomp
        raw = f.read()
    if len(raw) != count * dtype.itemsize:
        raise ValidationError(f"{path}: payload is {len(raw)} bytes, expected {count * dtype.itemsize}")
    data = np.frombuffer(raw, dtype=dtype).reshape(nt, nz, ny, nx, ncomp).copy()
    return kind, data, spacing, dt


def save_velocity(path, v):
    write_f4d(path, v.data, Kind.VELOCITY, v.spacing, v.dt)


def load_velocity(path):
    _, data, spacing, dt = read_f4d(path, Kind.VELOCITY)
    if data.shape[-1] != 3:
        raise ValidationError(f"{path}: velocity must have 3 components")
    return VelocityVolume(data.astype(np.float64), spacing, dt)


def save_magnitude(path, m, spacing=1.0):
    write_f4d(path, m.data, Kind.MAGNITUDE, spacing, 1.0)


def load_magnitude(path):
    _, data, _, _ = read_f4d(path, Kind.MAGNITUDE)
    return MagnitudeVolume(data[0, ..., 0].astype(np.float64))


def save_mask(path, mask, spacing=1.0):
    write_f4d(path, np.asarray(mask, dtype=np.uint8), Kind.MASK, spacing, 1.0)


def load_mask(path):
    _, data, _, _ = read_f4d(path, Kind.MASK)
    return data[0, ..., 0].astype(bool)


# ----------------------------------------------------------------------------
# patch sets

_ORIGIN = struct.Struct("<4i")


def write_patchset(path, pairs, manifest=None):
    manifest = dict(manifest or {})
    manifest.setdefault("count", len(pairs))
    manifest.setdefault("lr_shape", f"{LR_PATCH}x{LR_PATCH}x{LR_PATCH}x3")
    manifest.setdefault("hr_shape", f"{HR_PATCH}x{HR_PATCH}x{HR_PATCH}x3")
    text = "".join(f"{k}={v}\n" for k, v in manifest.items()).encode("utf-8")
    with open(path, "wb") as f:
        _write_header(f, Kind.PATCHSET, HR_PATCH, HR_PATCH, HR_PATCH, len(pairs), 3, 1.0, 1.0)
        f.write(struct.pack("<I", len(text)))
        f.write(text)
        for p in pairs:
            f.write(_ORIGIN.pack(*p.origin))
            f.write(np.ascontiguousarray(p.x_lr, dtype="<f4").tobytes())
            f.write(np.ascontiguousarray(p.x_hr, dtype="<f4").tobytes())
            f.write(np.ascontiguousarray(p.labels_hr, dtype="u1").tobytes())


def read_patchset(path):
    """Return ``(pairs, manifest)``."""
    n_lr, n_hr = LR_PATCH**3 * 3, HR_PATCH**3 * 3
    with open(path, "rb") as f:
        kind, (_, _, _, count, _), _, _ = _read_header(f, path)
        if kind is not Kind.PATCHSET:
            raise ValidationError(f"{path}: expected a patch set, found {kind.name}")
        (mlen,) = struct.unpack("<I", f.read(4))
        text = f.read(mlen).decode("utf-8").splitlines()
        manifest = {k: v for k, (v, _) in parse_config(text, str(path)).items()}
        pairs = []
        rec = _ORIGIN.size + 4 * (n_lr + n_hr) + HR_PATCH**3
        for _ in range(count):
            raw = f.read(rec)
            if len(raw) != rec:
                raise ValidationError(f"{path}: truncated patch record")
            origin = _ORIGIN.unpack_from(raw, 0)
            off = _ORIGIN.size
            x_lr = np.frombuffer(raw, "<f4", n_lr, off).reshape((LR_PATCH,) * 3 + (3,))
            off += 4 * n_lr
            x_hr = np.frombuffer(raw, "<f4", n_hr, off).reshape((HR_PATCH,) * 3 + (3,))
            off += 4 * n_hr
            labels = np.frombuffer(raw, "u1", HR_PATCH**3, off).reshape((HR_PATCH,) * 3)
            pairs.append(PatchPair(x_hr.copy(), x_lr.copy(), tuple(origin), labels.copy()))
        if f.read(1):
            raise ValidationError(f"{path}: trailing bytes after {count} records")
    return pairs, manifest


# ----------------------------------------------------------------------------
# checkpoints

_DTYPE_CODES = {0: np.dtype("<f4")}


def save_checkpoint(path, params):
    """Write a ParamSet as F4DW; values are stored as float32."""
    with open(path, "wb") as f:
        f.write(F4DW_MAGIC)
        f.write(struct.pack("<II", VERSION, len(params)))
        for name, t in params.items():
            enc = name.encode("utf-8")
            shape = tuple(t.shape)
            f.write(struct.pack("<H", len(enc)))
            f.write(enc)
            f.write(struct.pack("<BB", 0, len(shape)))
            f.write(struct.pack(f"<{len(shape)}I", *shape))
        for t in params.values():
            f.write(np.ascontiguousarray(t.detach().cpu().numpy(), dtype="<f4").tobytes())


def load_checkpoint(path, dtype=torch.float32):
    with open(path, "rb") as f:
        raw = f.read()
    if raw[:4] != F4DW_MAGIC:
        raise ValidationError(f"{path}: bad magic {raw[:4]!r}, expected {F4DW_MAGIC!r}")
    version, n = struct.unpack_from("<II", raw, 4)
    if version != VERSION:
        raise ValidationError(f"{path}: unsupported F4DW version {version}")
    off = 12
    entries = []
    try:
        for _ in range(n):
            (ln,) = struct.unpack_from("<H", raw, off)
            off += 2
            name = raw[off : off + ln].decode("utf-8")
            off += ln
            code, ndim = struct.unpack_from("<BB", raw, off)
            off += 2
            shape = struct.unpack_from(f"<{ndim}I", raw, off)
            off += 4 * ndim
            if code not in _DTYPE_CODES:
                raise ValidationError(f"{path}: unknown dtype code {code}")
            entries.append((name, shape, _DTYPE_CODES[code]))
        params = {}
        for name, shape, dt in entries:
            count = int(np.prod(shape, dtype=np.int64))
            arr = np.frombuffer(raw, dt, count, off).reshape(shape)
            off += count * dt.itemsize
            params[name] = torch.tensor(arr.copy(), dtype=dtype).requires_grad_(True)
    except struct.error as exc:
        raise ValidationError(f"{path}: truncated checkpoint ({exc})") from None
    except ValueError as exc:
        raise ValidationError(f"{path}: truncated checkpoint ({exc})") from None
    if off != len(raw):
        raise ValidationError(f"{path}: {len(raw) - off} trailing bytes")
    return params


# ----------------------------------------------------------------------------
# key=value configs


def parse_config(lines, source="<config>"):
    """Parse ``key = value`` lines; ``#`` starts a comment.

    Returns ``{key: (value, line_number)}``.
    """
    out = {}
    for lineno, raw in enumerate(lines, 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{source}: expected key=value, got {raw.strip()!r}", line=lineno)
        key, value = (s.strip() for s in line.split("=", 1))
        if not key:
            raise ConfigError(f"{source}: empty key", line=lineno)
        if key in out:
            raise ConfigError(f"{source}: duplicate key {key!r}", line=lineno, key=key)
        out[key] = (value, lineno)
    return out


def read_config(path):
    """Read a config file into ``{key: (value, line)}``."""
    with open(path, encoding="utf-8") as f:
        return parse_config(f.read().splitlines(), source=str(path))


class ConfigReader:
    """Typed access to a parsed config with line-numbered errors."""

    def __init__(self, entries, source="<config>"):
        self.entries = {k: v if isinstance(v, tuple) else (str(v), None) for k, v in entries.items()}
        self.source = source
        self.used = set()

    def _raw(self, key, default, required):
        if key not in self.entries:
            if required:
                raise ConfigError(f"{self.source}: missing required key {key!r}", key=key)
            return None, None
        self.used.add(key)
        return self.entries[key]

    def get(self, key, conv, default=None, required=False):
        value, line = self._raw(key, default, required)
        if value is None:
            return default
        try:
            return conv(value)
        except (ValueError, TypeError) as exc:
            raise ConfigError(f"{self.source}: bad value for {key!r}: {value!r} ({exc})", line=line, key=key) from None

    def unknown(self):
        return sorted(set(self.entries) - self.used)

    def check_unknown(self):
        extra = self.unknown()
        if extra:
            line = self.entries[extra[0]][1]
            raise ConfigError(f"{self.source}: unknown key {extra[0]!r}", line=line, key=extra[0])


def floats(value):
    return tuple(float(x) for x in value.replace(",", " ").split())


def ints(value):
    return tuple(int(x) for x in value.replace(",", " ").split())


def boolean(value):
    v = value.strip().lower()
    if v in ("1", "true", "yes", "on"):
        return True
    if v in ("0", "false", "no", "off"):
        return False
    raise ValueError("expected a boolean")


# ----------------------------------------------------------------------------
# manifests and images


def write_manifest(directory, command, config=None, seeds=None, inputs=None, outputs=None, argv=None):
    """Record what is needed to replay a command in ``directory/manifest.txt``."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    lines = [
        f"command={command}",
        f"version={__version__}",
        f"timestamp={_dt.datetime.now(_dt.timezone.utc).isoformat(timespec='seconds')}",
    ]
    if argv is not None:
        lines.append("argv=" + " ".join(argv))
    for prefix, items in (("config", config), ("seed", seeds), ("input", inputs), ("output", outputs)):
        for k, v in (items or {}).items():
            lines.append(f"{prefix}.{k}={v}")
    path = directory / "manifest.txt"
    path.write_text("\n".join(lines) + "\n", encoding="utf-8")
    return path


def write_pgm(path, image, vmin=None, vmax=None):
    """Write a 2-D array as an 8-bit binary portable graymap, linearly scaled."""
    img = np.asarray(image, dtype=np.float64)
    if img.ndim != 2:
        raise ValidationError("graymap needs a 2-D array")
    lo = float(img.min()) if vmin is None else float(vmin)
    hi = float(img.max()) if vmax is None else float(vmax)
    scale = 255.0 / (hi - lo) if hi > lo else 0.0
    pix = np.clip(np.round((img - lo) * scale), 0, 255).astype(np.uint8)
    h, w = pix.shape
    with open(path, "wb") as f:
        f.write(f"P5\n{w} {h}\n255\n".encode("ascii"))
        f.write(pix.tobytes())


def read_pgm(path):
    with open(path, "rb") as f:
        raw = f.read()
    parts = raw.split(maxsplit=4)
    if parts[0] != b"P5":
        raise ValidationError(f"{path}: not a binary graymap")
    w, h, maxval = int(parts[1]), int(parts[2]), int(parts[3])
    if maxval != 255:
        raise ValidationError(f"{path}: only 8-bit graymaps are supported")
    return np.frombuffer(parts[4][: w * h], np.uint8).reshape(h, w)


def default_threads():
    """Thread count from ``FLOWSR_THREADS`` (unset: leave torch's default)."""
    value = os.environ.get("FLOWSR_THREADS")
    return int(value) if value else None
