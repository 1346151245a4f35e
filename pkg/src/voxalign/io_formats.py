"""Readers and writers: MetaImage volumes, transform JSON, landmark CSV and
PGM slice previews."""

import csv
import json
import logging
import math
from dataclasses import dataclass, field

import numpy as np

from .errors import IndexOutOfRange, IoError, ParseError, ValidationError
from .transforms import AffineTransform, BSplineTransform, CompositeTransform
from .volume import Volume

log = logging.getLogger(__name__)

ELEMENT_TYPES = {
    "MET_SHORT": np.dtype("<i2"),
    "MET_USHORT": np.dtype("<u2"),
    "MET_FLOAT": np.dtype("<f4"),
    "MET_DOUBLE": np.dtype("<f8"),
    # readable but not writable
    "MET_UCHAR": np.dtype("u1"),
    "MET_CHAR": np.dtype("i1"),
    "MET_INT": np.dtype("<i4"),
    "MET_UINT": np.dtype("<u4"),
}
WRITABLE_TYPES = ("MET_UCHAR", "MET_SHORT", "MET_USHORT", "MET_FLOAT", "MET_DOUBLE")

_KNOWN_KEYS = {
    "ObjectType",
    "NDims",
    "DimSize",
    "ElementType",
    "ElementSpacing",
    "Offset",
    "Origin",
    "Position",
    "TransformMatrix",
    "ElementDataFile",
    "BinaryData",
    "BinaryDataByteOrderMSB",
    "ElementByteOrderMSB",
    "CompressedData",
}


# --------------------------------------------------------------------------
# MetaImage


def _numbers(value, count, key, lineno, kind=float):
    parts = value.split()
    if len(parts) != count:
        raise ParseError(f"{key} expects {count} values, got {len(parts)}", f"line {lineno}")
    try:
        return [kind(p) for p in parts]
    except ValueError:
        raise ParseError(f"{key} has a non-numeric value {value!r}", f"line {lineno}") from None


def _is_true(value):
    return value.strip().lower() in ("true", "1")


def read_metaimage(path):
    """Read a single-file (``ElementDataFile = LOCAL``) MetaImage volume."""
    try:
        with open(path, "rb") as fh:
            raw = fh.read()
    except OSError as exc:
        raise IoError(f"cannot read {path}: {exc}") from exc

    header = {}
    pos = 0
    lineno = 0
    while True:
        end = raw.find(b"\n", pos)
        if end < 0:
            raise ParseError("header ended without ElementDataFile", f"byte {pos}")
        lineno += 1
        try:
            line = raw[pos:end].decode("ascii").strip()
        except UnicodeDecodeError:
            raise ParseError("non-ASCII header line", f"line {lineno}, byte {pos}") from None
        pos = end + 1
        if not line:
            continue
        if "=" not in line:
            raise ParseError(f"expected 'Key = Value', got {line!r}", f"line {lineno}")
        key, value = (s.strip() for s in line.split("=", 1))
        header[key] = (value, lineno)
        if key not in _KNOWN_KEYS:
            log.warning("ignoring MetaImage key %s (line %d)", key, lineno)
        if key == "ElementDataFile":
            break

    def get(key, default=None):
        return header[key] if key in header else (default, None)

    obj, ln = get("ObjectType", "Image")
    if obj != "Image":
        raise ParseError(f"unsupported ObjectType {obj!r}", f"line {ln}")
    ndims, ln = get("NDims")
    if ndims is None:
        raise ParseError("missing NDims", f"line {lineno}")
    if ndims.strip() != "3":
        raise ParseError(f"only NDims = 3 is supported, got {ndims}", f"line {ln}")
    dims_s, ln = get("DimSize")
    if dims_s is None:
        raise ParseError("missing DimSize", f"line {lineno}")
    dims = _numbers(dims_s, 3, "DimSize", ln, int)
    if min(dims) < 1:
        raise ParseError(f"DimSize must be positive, got {dims}", f"line {ln}")
    etype, ln = get("ElementType")
    if etype is None:
        raise ParseError("missing ElementType", f"line {lineno}")
    if etype not in ELEMENT_TYPES:
        raise ParseError(f"unsupported ElementType {etype!r}", f"line {ln}")
    for key in ("BinaryDataByteOrderMSB", "ElementByteOrderMSB"):
        value, ln = get(key, "False")
        if _is_true(value):
            raise ParseError(f"big-endian payloads are not supported ({key} = {value})", f"line {ln}")
    value, ln = get("CompressedData", "False")
    if _is_true(value):
        raise ParseError("compressed payloads are not supported", f"line {ln}")
    datafile, ln = get("ElementDataFile")
    if datafile != "LOCAL":
        raise ParseError(f"only ElementDataFile = LOCAL is supported, got {datafile!r}", f"line {ln}")

    spacing = [1.0, 1.0, 1.0]
    if "ElementSpacing" in header:
        value, ln = header["ElementSpacing"]
        spacing = _numbers(value, 3, "ElementSpacing", ln)
    origin = [0.0, 0.0, 0.0]
    for key in ("Offset", "Origin", "Position"):
        if key in header:
            value, ln = header[key]
            origin = _numbers(value, 3, key, ln)
            break
    direction = np.eye(3)
    if "TransformMatrix" in header:
        value, ln = header["TransformMatrix"]
        direction = np.array(_numbers(value, 9, "TransformMatrix", ln)).reshape(3, 3)

    dtype = ELEMENT_TYPES[etype]
    count = dims[0] * dims[1] * dims[2]
    nbytes = count * dtype.itemsize
    payload = raw[pos:]
    if len(payload) < nbytes:
        raise ParseError(f"truncated payload: expected {nbytes} bytes, found {len(payload)}", f"byte {pos}")
    if len(payload) > nbytes:
        log.warning("ignoring %d trailing bytes after payload", len(payload) - nbytes)
    data = np.frombuffer(payload[:nbytes], dtype=dtype).astype(np.float64)
    if not np.all(np.isfinite(data)):
        raise ParseError("payload contains non-finite samples", f"byte {pos}")
    try:
        return Volume(data.reshape(dims, order="F"), spacing, origin, direction)
    except ValidationError as exc:
        raise ParseError(str(exc), f"line {lineno}") from exc


def _fmt(values):
    return " ".join(repr(float(v)) for v in np.ravel(values))


def _convert(data, element_type):
    dtype = ELEMENT_TYPES[element_type]
    if dtype.kind in "iu":
        info = np.iinfo(dtype)
        # np.rint rounds half to even
        return np.clip(np.rint(data), info.min, info.max).astype(dtype)
    return data.astype(dtype)


def write_metaimage(v, path, element_type="MET_FLOAT"):
    """Write ``v`` as a ``.mha`` file (header + little-endian payload).

    Integer element types round half to even and saturate at the type range.
    """
    if element_type not in WRITABLE_TYPES:
        raise ValidationError(f"element_type must be one of {WRITABLE_TYPES}, got {element_type!r}")
    header = [
        "ObjectType = Image",
        "NDims = 3",
        "BinaryData = True",
        "BinaryDataByteOrderMSB = False",
        "CompressedData = False",
        f"TransformMatrix = {_fmt(v.direction)}",
        f"Offset = {_fmt(v.origin)}",
        f"ElementSpacing = {_fmt(v.spacing)}",
        "DimSize = {} {} {}".format(*v.dims),
        f"ElementType = {element_type}",
        "ElementDataFile = LOCAL",
    ]
    payload = _convert(v.data.ravel(order="F"), element_type).tobytes()
    try:
        with open(path, "wb") as fh:
            fh.write(("\n".join(header) + "\n").encode("ascii"))
            fh.write(payload)
    except OSError as exc:
        raise IoError(f"cannot write {path}: {exc}") from exc


# --------------------------------------------------------------------------
# transform JSON


@dataclass
class TransformRecord:
    """Serializable form of an affine, B-spline or composite transform."""

    kind: str
    affine: AffineTransform = None
    bspline: BSplineTransform = None
    metadata: dict = field(default_factory=dict)

    @classmethod
    def from_transform(cls, t, metadata=None):
        metadata = dict(metadata or {})
        if isinstance(t, AffineTransform):
            return cls("affine", affine=t, metadata=metadata)
        if isinstance(t, BSplineTransform):
            return cls("bspline", bspline=t, metadata=metadata)
        if isinstance(t, CompositeTransform):
            return cls("composite", affine=t.global_transform, bspline=t.local_transform, metadata=metadata)
        raise TypeError(f"cannot serialize {type(t).__name__}")

    def to_transform(self):
        if self.kind == "affine":
            return self.affine
        if self.kind == "bspline":
            return self.bspline
        return CompositeTransform(self.affine, self.bspline)

    def to_dict(self):
        out = {"kind": self.kind}
        if self.affine is not None:
            out["affine"] = {
                "matrix": self.affine.matrix.tolist(),
                "offset": self.affine.offset.tolist(),
                "center": self.affine.center.tolist(),
            }
        if self.bspline is not None:
            b = self.bspline
            out["bspline"] = {
                "grid_cells": list(b.grid_cells),
                "grid_origin": b.domain_origin.tolist(),
                "grid_spacing": b.grid_spacing.tolist(),
                "coefficients": b.parameters.tolist(),
            }
        out["metadata"] = {str(k): str(v) for k, v in self.metadata.items()}
        return out

    @classmethod
    def from_dict(cls, doc):
        if not isinstance(doc, dict):
            raise ParseError("transform document must be a JSON object")
        kind = doc.get("kind")
        if kind not in ("affine", "bspline", "composite"):
            raise ParseError(f"unknown transform kind {kind!r}", "key 'kind'")
        affine = bspline = None
        try:
            if kind in ("affine", "composite"):
                a = doc["affine"]
                matrix = np.array(a["matrix"], dtype=float)
                if matrix.shape != (3, 3):
                    raise ParseError("affine matrix must be 3x3", "key 'affine.matrix'")
                affine = AffineTransform(matrix, _vec3(a["offset"], "affine.offset"), _vec3(a.get("center", [0, 0, 0]), "affine.center"))
            if kind in ("bspline", "composite"):
                b = doc["bspline"]
                cells = [int(c) for c in b["grid_cells"]]
                if len(cells) != 3 or min(cells) < 1:
                    raise ParseError("grid_cells must be three integers >= 1", "key 'bspline.grid_cells'")
                coeffs = np.array(b["coefficients"], dtype=float)
                expected = 3 * int(np.prod([c + 3 for c in cells]))
                if coeffs.size != expected:
                    raise ParseError(f"expected {expected} coefficients, got {coeffs.size}", "key 'bspline.coefficients'")
                bspline = BSplineTransform(cells, _vec3(b["grid_origin"], "bspline.grid_origin"), _vec3(b["grid_spacing"], "bspline.grid_spacing"), coeffs)
        except KeyError as exc:
            raise ParseError(f"missing key {exc.args[0]!r}") from None
        except (TypeError, ValueError) as exc:
            raise ParseError(f"bad numeric field: {exc}") from None
        metadata = doc.get("metadata", {})
        if not isinstance(metadata, dict):
            raise ParseError("metadata must be an object", "key 'metadata'")
        return cls(kind, affine, bspline, {str(k): str(v) for k, v in metadata.items()})


def _vec3(value, key):
    arr = np.array(value, dtype=float)
    if arr.shape != (3,) or not np.all(np.isfinite(arr)):
        raise ParseError("expected three finite numbers", f"key {key!r}")
    return arr


def dumps_transform(record):
    # json emits floats via repr, the shortest round-tripping decimal form
    return json.dumps(record.to_dict(), indent=2) + "\n"


def write_transform_json(record, path):
    if not isinstance(record, TransformRecord):
        record = TransformRecord.from_transform(record)
    try:
        with open(path, "w", encoding="utf-8") as fh:
            fh.write(dumps_transform(record))
    except OSError as exc:
        raise IoError(f"cannot write {path}: {exc}") from exc


def read_transform_json(path):
    try:
        with open(path, encoding="utf-8") as fh:
            doc = json.load(fh)
    except OSError as exc:
        raise IoError(f"cannot read {path}: {exc}") from exc
    except json.JSONDecodeError as exc:
        raise ParseError(f"invalid JSON: {exc.msg}", f"line {exc.lineno}") from None
    return TransformRecord.from_dict(doc)


# --------------------------------------------------------------------------
# landmarks


@dataclass
class LandmarkSet:
    fixed: np.ndarray
    moving: np.ndarray
    labels: list

    def __post_init__(self):
        self.fixed = np.array(self.fixed, dtype=float).reshape(-1, 3)
        self.moving = np.array(self.moving, dtype=float).reshape(-1, 3)
        self.labels = [str(s) for s in self.labels]
        if len(self.fixed) < 1 or len(self.fixed) != len(self.moving) or len(self.labels) != len(self.fixed):
            raise ValidationError("landmark set needs >= 1 pair with matching fixed/moving/label counts")
        if not (np.all(np.isfinite(self.fixed)) and np.all(np.isfinite(self.moving))):
            raise ValidationError("landmark coordinates must be finite")

    def __len__(self):
        return len(self.labels)


LANDMARK_HEADER = ["label", "fx", "fy", "fz", "mx", "my", "mz"]


def read_landmarks_csv(path):
    try:
        with open(path, newline="", encoding="utf-8") as fh:
            rows = list(csv.reader(fh))
    except OSError as exc:
        raise IoError(f"cannot read {path}: {exc}") from exc
    if not rows:
        raise ParseError("empty landmark file", "row 1")
    if [c.strip().lower() for c in rows[0]] != LANDMARK_HEADER:
        raise ParseError(f"header must be {','.join(LANDMARK_HEADER)}", "row 1")
    labels, fixed, moving = [], [], []
    for rowno, row in enumerate(rows[1:], start=2):
        if not row or all(not c.strip() for c in row):
            continue
        if len(row) != 7:
            raise ParseError(f"expected 7 fields, got {len(row)}", f"row {rowno}")
        try:
            vals = [float(c) for c in row[1:]]
        except ValueError:
            raise ParseError("non-numeric coordinate", f"row {rowno}") from None
        if not all(math.isfinite(x) for x in vals):
            raise ParseError("non-finite coordinate", f"row {rowno}")
        labels.append(row[0].strip())
        fixed.append(vals[:3])
        moving.append(vals[3:])
    if not labels:
        raise ParseError("no landmark rows", "row 2")
    return LandmarkSet(fixed, moving, labels)


def write_landmarks_csv(landmarks, path):
    try:
        with open(path, "w", newline="", encoding="utf-8") as fh:
            writer = csv.writer(fh, lineterminator="\n")
            writer.writerow(LANDMARK_HEADER)
            for label, f, m in zip(landmarks.labels, landmarks.fixed, landmarks.moving):
                writer.writerow([label] + [repr(float(x)) for x in f] + [repr(float(x)) for x in m])
    except OSError as exc:
        raise IoError(f"cannot write {path}: {exc}") from exc


# --------------------------------------------------------------------------
# PGM


def window_to_uint8(values, lo, hi):
    scaled = (np.asarray(values, dtype=float) - lo) * (255.0 / (hi - lo))
    return np.clip(np.rint(scaled), 0, 255).astype(np.uint8)


def write_pgm_slice(v, axis, index, window, path):
    """Write one slice of ``v`` as an 8-bit binary PGM with linear windowing."""
    lo, hi = (float(w) for w in window)
    if not lo < hi:
        raise ValidationError(f"window must satisfy lo < hi, got ({lo}, {hi})")
    if axis not in (0, 1, 2):
        raise ValidationError(f"axis must be 0, 1 or 2, got {axis}")
    if not 0 <= index < v.dims[axis]:
        raise IndexOutOfRange(f"slice {index} outside [0, {v.dims[axis]}) along axis {axis}")
    plane = np.take(v.data, index, axis=axis)
    # rows run along the second remaining axis, columns along the first
    img = window_to_uint8(plane.T, lo, hi)
    height, width = img.shape
    try:
        with open(path, "wb") as fh:
            fh.write(f"P5\n{width} {height}\n255\n".encode("ascii"))
            fh.write(img.tobytes())
    except OSError as exc:
        raise IoError(f"cannot write {path}: {exc}") from exc


def read_pgm(path):
    """Minimal binary PGM reader (used to check previews)."""
    with open(path, "rb") as fh:
        raw = fh.read()
    tokens = []
    pos = 0
    while len(tokens) < 4:
        while raw[pos : pos + 1].isspace():
            pos += 1
        start = pos
        while not raw[pos : pos + 1].isspace():
            pos += 1
        tokens.append(raw[start:pos].decode("ascii"))
    if tokens[0] != "P5":
        raise ParseError("not a binary PGM", "byte 0")
    width, height = int(tokens[1]), int(tokens[2])
    pos += 1
    return np.frombuffer(raw[pos : pos + width * height], dtype=np.uint8).reshape(height, width)
