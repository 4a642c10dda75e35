"""Binary model archives.

Layout (all integers little-endian)::

    magic "SUMTREES" | u16 format version | u16 section count
    repeated: 4-byte tag | u64 payload length | payload | u32 CRC-32 of payload
    32-byte SHA-256 of everything before it

Sections: META (canonical JSON), FRAM (training data), TREE (flat preorder
node arrays), DRAW (sigma^2 draws), TRAC (per-chain diagnostics).
Arrays are stored as a dtype code, shape, and raw little-endian bytes.
"""

from __future__ import annotations

import hashlib
import io
import json
import math
import struct
import zlib
from pathlib import Path

import numpy as np

from .dataset import FrameSchema, ModelFrame
from .ensemble import PosteriorEnsemble, TraceSegment
from .priors import CalibratedPriors, Hyperparameters

MAGIC = b"SUMTREES"
FORMAT_VERSION = 1
_HEADER = struct.Struct("<8sHH")
_SECTION = struct.Struct("<4sQ")
_DTYPES = {"f8": np.dtype("<f8"), "i4": np.dtype("<i4"), "i8": np.dtype("<i8"), "i1": np.dtype("<i1")}


class ArchiveError(ValueError):
    pass


class VersionMismatch(ArchiveError):
    pass


def _pack_arrays(arrays: list[tuple[str, np.ndarray]]) -> bytes:
    out = io.BytesIO()
    out.write(struct.pack("<I", len(arrays)))
    for code, arr in arrays:
        arr = np.ascontiguousarray(arr, dtype=_DTYPES[code])
        out.write(code.encode())
        out.write(struct.pack("<B", arr.ndim))
        out.write(struct.pack(f"<{arr.ndim}Q", *arr.shape))
        out.write(arr.tobytes())
    return out.getvalue()


def _unpack_arrays(payload: bytes) -> list[np.ndarray]:
    view = memoryview(payload)
    (count,) = struct.unpack_from("<I", view, 0)
    pos = 4
    out = []
    for _ in range(count):
        code = bytes(view[pos:pos + 2]).decode()
        (ndim,) = struct.unpack_from("<B", view, pos + 2)
        shape = struct.unpack_from(f"<{ndim}Q", view, pos + 3)
        pos += 3 + 8 * ndim
        dt = _DTYPES[code]
        size = int(np.prod(shape, dtype=np.int64)) * dt.itemsize
        out.append(np.frombuffer(bytes(view[pos:pos + size]), dtype=dt).reshape(shape).astype(dt.newbyteorder("=")))
        pos += size
    return out


def _canonical_json(obj) -> bytes:
    return json.dumps(obj, sort_keys=True, separators=(",", ":"), allow_nan=False).encode()


def _metadata(ens: PosteriorEnsemble) -> dict:
    fr = ens.frame
    schema = None
    if fr.schema is not None:
        schema = {
            "source_names": fr.schema.source_names,
            "levels": fr.schema.levels,
            "missing_dummy_sources": fr.schema.missing_dummy_sources,
            "use_missing_data": fr.schema.use_missing_data,
        }
    pri = ens.priors
    return {
        "hyper": ens.hyper.to_dict(),
        "priors": {"mu_mu": pri.mu_mu, "sigma_mu": pri.sigma_mu, "lam": pri.lam,
                   "sigsq_hat": pri.sigsq_hat, "classification": pri.classification},
        "frame": {
            "column_names": fr.column_names,
            "task": fr.task,
            "dummy_groups": fr.dummy_groups,
            "missing_dummy_columns": fr.missing_dummy_columns,
            "positive_level": fr.positive_level,
            "response_levels": fr.response_levels,
            "response_name": fr.response_name,
            "schema": schema,
        },
        "num_trees": ens.num_trees,
        "chain_sizes": ens.chain_sizes,
        "seeds": ens.seeds,
        "trace_burn_in": [t.burn_in for t in ens.traces],
    }


def encode(ens: PosteriorEnsemble) -> bytes:
    sections = [
        (b"META", _canonical_json(_metadata(ens))),
        (b"FRAM", _pack_arrays([("f8", ens.frame.matrix), ("f8", ens.frame.response)])),
        (b"TREE", _pack_arrays([("i4", ens.feat), ("f8", ens.split), ("i1", ens.mia), ("i4", ens.right),
                                ("f8", ens.leaf), ("i8", ens.offsets)])),
        (b"DRAW", _pack_arrays([("f8", ens.sigma_sq)])),
        (b"TRAC", _pack_arrays([("f8", getattr(t, name)) for t in ens.traces
                                for name in ("sigma_sq", "acceptance", "mean_leaves", "mean_depth")])),
    ]
    out = io.BytesIO()
    out.write(_HEADER.pack(MAGIC, FORMAT_VERSION, len(sections)))
    for tag, payload in sections:
        out.write(_SECTION.pack(tag, len(payload)))
        out.write(payload)
        out.write(struct.pack("<I", zlib.crc32(payload)))
    body = out.getvalue()
    return body + hashlib.sha256(body).digest()


def decode(data: bytes) -> PosteriorEnsemble:
    if len(data) < _HEADER.size:
        raise ArchiveError("archive is truncated (no header)")
    magic, version, count = _HEADER.unpack_from(data, 0)
    if magic != MAGIC:
        raise ArchiveError("not a sumtrees model archive")
    if version != FORMAT_VERSION:
        raise VersionMismatch(f"archive format version {version} is not supported (expected {FORMAT_VERSION})")
    if len(data) < _HEADER.size + 32 or hashlib.sha256(data[:-32]).digest() != data[-32:]:
        raise ArchiveError("archive checksum mismatch (truncated or corrupted file)")
    pos = _HEADER.size
    sections: dict[bytes, bytes] = {}
    for _ in range(count):
        tag, length = _SECTION.unpack_from(data, pos)
        pos += _SECTION.size
        payload = data[pos:pos + length]
        pos += length
        (crc,) = struct.unpack_from("<I", data, pos)
        pos += 4
        if zlib.crc32(payload) != crc:
            raise ArchiveError(f"section {tag.decode()} failed its checksum")
        sections[tag] = payload
    missing = {b"META", b"FRAM", b"TREE", b"DRAW", b"TRAC"} - set(sections)
    if missing:
        raise ArchiveError(f"archive lacks sections {sorted(t.decode() for t in missing)}")

    meta = json.loads(sections[b"META"])
    fm = meta["frame"]
    matrix, response = _unpack_arrays(sections[b"FRAM"])
    schema = FrameSchema(**fm["schema"]) if fm["schema"] is not None else None
    frame = ModelFrame(matrix, fm["column_names"], response, fm["task"], fm["dummy_groups"],
                       fm["missing_dummy_columns"], fm["positive_level"], fm["response_levels"], schema,
                       fm["response_name"])
    feat, split, mia, right, leaf, offsets = _unpack_arrays(sections[b"TREE"])
    (sigma_sq,) = _unpack_arrays(sections[b"DRAW"])
    tr = _unpack_arrays(sections[b"TRAC"])
    traces = [TraceSegment(*tr[4 * c: 4 * c + 4], burn_in=b) for c, b in enumerate(meta["trace_burn_in"])]
    return PosteriorEnsemble(
        feat=feat, split=split, mia=mia, right=right, leaf=leaf, offsets=offsets,
        num_trees=meta["num_trees"], sigma_sq=sigma_sq,
        hyper=Hyperparameters.from_dict(meta["hyper"]),
        priors=CalibratedPriors(**meta["priors"]),
        frame=frame, traces=traces, chain_sizes=meta["chain_sizes"], seeds=meta["seeds"],
    )


def save_model(ens: PosteriorEnsemble, path: str | Path) -> int:
    """Write the archive; returns its size in bytes."""
    data = encode(ens)
    Path(path).write_bytes(data)
    return len(data)


def load_model(path: str | Path) -> PosteriorEnsemble:
    try:
        data = Path(path).read_bytes()
    except OSError as exc:
        raise ArchiveError(f"cannot read model archive: {exc}") from exc
    return decode(data)


def _json_floats(arr: np.ndarray) -> list:
    return [None if math.isnan(v) else v for v in arr.tolist()]


def to_json(ens: PosteriorEnsemble) -> dict:
    """Lossless JSON rendering (NaN becomes null); floats keep their shortest repr."""
    return {
        "format_version": FORMAT_VERSION,
        "metadata": _metadata(ens),
        "training": {"matrix": [_json_floats(row) for row in ens.frame.matrix],
                     "response": ens.frame.response.tolist()},
        "trees": {"feat": ens.feat.tolist(), "split": _json_floats(ens.split), "mia": ens.mia.tolist(),
                  "right": ens.right.tolist(), "leaf": ens.leaf.tolist(), "offsets": ens.offsets.tolist()},
        "sigma_sq": ens.sigma_sq.tolist(),
        "traces": [{"sigma_sq": t.sigma_sq.tolist(), "acceptance": t.acceptance.tolist(),
                    "mean_leaves": t.mean_leaves.tolist(), "mean_depth": t.mean_depth.tolist(),
                    "burn_in": t.burn_in} for t in ens.traces],
    }


def from_json(doc: dict) -> PosteriorEnsemble:
    """Inverse of :func:`to_json`."""
    if doc.get("format_version") != FORMAT_VERSION:
        raise VersionMismatch(f"JSON export version {doc.get('format_version')} is not supported "
                              f"(expected {FORMAT_VERSION})")

    def arr(values, dtype=float):
        return np.array([np.nan if v is None else v for v in values], dtype=dtype)

    payload = {
        "matrix": np.array([arr(r) for r in doc["training"]["matrix"]]).reshape(
            len(doc["training"]["matrix"]), -1),
        "response": arr(doc["training"]["response"]),
    }
    t = doc["trees"]
    meta = doc["metadata"]
    fm = meta["frame"]
    schema = FrameSchema(**fm["schema"]) if fm["schema"] is not None else None
    frame = ModelFrame(payload["matrix"], fm["column_names"], payload["response"], fm["task"], fm["dummy_groups"],
                       fm["missing_dummy_columns"], fm["positive_level"], fm["response_levels"], schema,
                       fm["response_name"])
    traces = [TraceSegment(arr(x["sigma_sq"]), arr(x["acceptance"]), arr(x["mean_leaves"]),
                           arr(x["mean_depth"]), x["burn_in"]) for x in doc["traces"]]
    return PosteriorEnsemble(
        feat=np.array(t["feat"], np.int32), split=arr(t["split"]), mia=np.array(t["mia"], np.int8),
        right=np.array(t["right"], np.int32), leaf=arr(t["leaf"]), offsets=np.array(t["offsets"], np.int64),
        num_trees=meta["num_trees"], sigma_sq=arr(doc["sigma_sq"]),
        hyper=Hyperparameters.from_dict(meta["hyper"]), priors=CalibratedPriors(**meta["priors"]),
        frame=frame, traces=traces, chain_sizes=meta["chain_sizes"], seeds=meta["seeds"],
    )


def export_json(ens: PosteriorEnsemble, path: str | Path) -> None:
    Path(path).write_text(json.dumps(to_json(ens), sort_keys=True, allow_nan=False))
