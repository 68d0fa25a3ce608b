"""Minimal binary array container used for every on-disk array.

Layout: a 16-byte ASCII decimal prefix holding the byte length of the
JSON header, the header itself, then the raw little-endian row-major
payload. The header is strict JSON with keys shape, dtype, layout,
byte_order and semantic. Three dtypes are supported: f64, c128, u8.
"""

import json
import numpy as np

from .errors import DataError

_PREFIX_LEN = 16

_DTYPES = {
    "f64": np.dtype("<f8"),
    "c128": np.dtype("<c16"),
    "u8": np.dtype("<u1"),
}
_DTYPE_TAGS = {v: k for k, v in _DTYPES.items()}


def dtype_tag(arr):
    """Return the format tag for a numpy array, or raise DataError."""
    dt = np.dtype(arr.dtype).newbyteorder("<")
    if dt not in _DTYPE_TAGS:
        raise DataError(f"unsupported dtype {arr.dtype}; use f64, c128 or u8")
    return _DTYPE_TAGS[dt]


def write_array(path, arr, semantic=""):
    """Write `arr` to `path` in the container format.

    The header is serialized with sorted keys and no extra whitespace so
    that identical arrays always produce identical bytes.
    """
    arr = np.ascontiguousarray(arr)
    tag = dtype_tag(arr)
    header = {
        "byte_order": "little-endian",
        "dtype": tag,
        "layout": "row-major",
        "semantic": semantic,
        "shape": list(arr.shape),
    }
    blob = json.dumps(header, sort_keys=True, separators=(",", ":")).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(b"%016d" % len(blob))
        fh.write(blob)
        fh.write(arr.astype(_DTYPES[tag], copy=False).tobytes())


def read_array(path):
    """Read an array written by :func:`write_array`.

    Returns (array, semantic). Raises DataError on any malformed input.
    """
    with open(path, "rb") as fh:
        prefix = fh.read(_PREFIX_LEN)
        if len(prefix) != _PREFIX_LEN or not prefix.isdigit():
            raise DataError(f"{path}: bad header prefix")
        hlen = int(prefix)
        blob = fh.read(hlen)
        if len(blob) != hlen:
            raise DataError(f"{path}: truncated header")
        try:
            header = json.loads(blob.decode("utf-8"))
        except (UnicodeDecodeError, json.JSONDecodeError) as exc:
            raise DataError(f"{path}: header is not valid JSON: {exc}") from exc
        for key in ("shape", "dtype", "layout", "byte_order"):
            if key not in header:
                raise DataError(f"{path}: header missing '{key}'")
        if header["dtype"] not in _DTYPES:
            raise DataError(f"{path}: unknown dtype '{header['dtype']}'")
        if header["layout"] != "row-major":
            raise DataError(f"{path}: unsupported layout '{header['layout']}'")
        if header["byte_order"] != "little-endian":
            raise DataError(f"{path}: unsupported byte order")
        shape = tuple(int(s) for s in header["shape"])
        dt = _DTYPES[header["dtype"]]
        payload = fh.read()
    expected = int(np.prod(shape, dtype=np.int64)) * dt.itemsize
    if len(payload) != expected:
        raise DataError(
            f"{path}: payload is {len(payload)} bytes, expected {expected}"
        )
    arr = np.frombuffer(payload, dtype=dt).reshape(shape)
    return arr.copy(), header.get("semantic", "")


def array_to_text(in_path, out_path):
    """Dump a container file as plain text for interop.

    First line is the JSON header; following lines hold one value each
    (complex as "re im" pairs), 17 significant digits.
    """
    arr, semantic = read_array(in_path)
    header = {
        "byte_order": "little-endian",
        "dtype": dtype_tag(arr),
        "layout": "row-major",
        "semantic": semantic,
        "shape": list(arr.shape),
    }
    with open(out_path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write(json.dumps(header, sort_keys=True, separators=(",", ":")))
        fh.write("\n")
        flat = arr.ravel()
        if np.iscomplexobj(flat):
            for v in flat:
                fh.write(f"{v.real:.17g} {v.imag:.17g}\n")
        else:
            for v in flat:
                fh.write(f"{v:.17g}\n")


def text_to_array(in_path, out_path):
    """Inverse of :func:`array_to_text`."""
    with open(in_path, "r", encoding="utf-8") as fh:
        try:
            header = json.loads(fh.readline())
        except json.JSONDecodeError as exc:
            raise DataError(f"{in_path}: bad text header: {exc}") from exc
        shape = tuple(int(s) for s in header["shape"])
        tag = header["dtype"]
        if tag not in _DTYPES:
            raise DataError(f"{in_path}: unknown dtype '{tag}'")
        values = []
        for line in fh:
            parts = line.split()
            if not parts:
                continue
            if tag == "c128":
                values.append(complex(float(parts[0]), float(parts[1])))
            else:
                values.append(float(parts[0]))
    arr = np.asarray(values, dtype=_DTYPES[tag]).reshape(shape)
    write_array(out_path, arr, semantic=header.get("semantic", ""))
