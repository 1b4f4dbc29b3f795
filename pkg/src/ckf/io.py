"""Text and binary file formats.

* observations: CSV ``user,item,time,rating`` (user/item zero-based, time one-based)
* model: JSON document with a ``format_version`` field, matrices as
  row-major nested lists, every number written with 17 significant digits
* states: CSV ``user,time,f0,...,f{K-1}`` for ``t = 0..T``
* preference tensor: 16-byte header (``b"CKFT"`` + uint32 N, M, T) followed by
  little-endian float64 values in (user, item, time) row-major order
"""

from __future__ import annotations

import csv
import json
import math
import struct
from pathlib import Path

import numpy as np

from .model import FULL, Dims, ModelParams, ObservationSet

FORMAT_VERSION = 1
TENSOR_MAGIC = b"CKFT"
_TENSOR_HEADER = struct.Struct("<4sIII")


class FormatError(ValueError):
    """A file could not be parsed as the expected format."""


def fmt(x: float) -> str:
    x = float(x)
    if not math.isfinite(x):
        raise ValueError(f"cannot serialize non-finite value {x!r}")
    return format(x, ".17g")


def _matrix(M: np.ndarray, indent: str) -> str:
    rows = [indent + "  [" + ", ".join(fmt(v) for v in row) + "]" for row in np.atleast_2d(M)]
    return "[\n" + ",\n".join(rows) + "\n" + indent + "]"


def dumps_model(params: ModelParams) -> str:
    d = params.dims
    parts = [
        f'  "format_version": {FORMAT_VERSION}',
        '  "dims": {' + ", ".join(f'"{k}": {v}' for k, v in d.as_dict().items()) + "}",
        f'  "cov_mode": {json.dumps(params.cov_mode)}',
        f'  "sigma_u2": {fmt(params.sigma_u2)}',
        f'  "sigma_q2": {fmt(params.sigma_q2)}',
        f'  "sigma_r2": {fmt(params.sigma_r2)}',
        f'  "A": {_matrix(params.A, "  ")}',
        f'  "V": {_matrix(params.V, "  ")}',
    ]
    for name in ("Sigma0", "Q"):
        value = getattr(params, name)
        parts.append(f'  "{name}": ' + ("null" if value is None else _matrix(value, "  ")))
    if params.meta:
        parts.append('  "meta": ' + json.dumps(params.meta, sort_keys=True))
    return "{\n" + ",\n".join(parts) + "\n}\n"


def serialize_model(params: ModelParams) -> bytes:
    return dumps_model(params).encode("utf-8")


def loads_model(text: str) -> ModelParams:
    try:
        doc = json.loads(text)
    except json.JSONDecodeError as exc:
        raise FormatError(f"malformed model document: {exc}") from exc
    if not isinstance(doc, dict):
        raise FormatError("model document must be a JSON object")
    version = doc.get("format_version")
    if version != FORMAT_VERSION:
        raise FormatError(f"unsupported model format_version {version!r} (expected {FORMAT_VERSION})")
    try:
        dims = Dims(**doc["dims"])
        K = dims.num_factors

        def mat(name, shape):
            value = doc.get(name)
            if value is None:
                return None
            arr = np.array(value, dtype=float)
            if arr.shape != shape:
                raise FormatError(f"{name} has shape {arr.shape}, expected {shape}")
            return arr

        return ModelParams(
            dims=dims,
            A=mat("A", (K, K)),
            V=mat("V", (dims.num_items, K)),
            sigma_u2=float(doc["sigma_u2"]),
            sigma_q2=float(doc["sigma_q2"]),
            sigma_r2=float(doc["sigma_r2"]),
            cov_mode=doc.get("cov_mode", "isotropic"),
            Sigma0=mat("Sigma0", (K, K)),
            Q=mat("Q", (K, K)),
            meta=dict(doc.get("meta") or {}),
        )
    except FormatError:
        raise
    except (KeyError, TypeError, ValueError) as exc:
        raise FormatError(f"invalid model document: {exc!r}") from exc


def deserialize_model(data: bytes) -> ModelParams:
    try:
        text = data.decode("utf-8")
    except UnicodeDecodeError as exc:
        raise FormatError("model document is not valid UTF-8") from exc
    model = loads_model(text)
    if model.A is None or model.V is None:
        raise FormatError("model document is missing A or V")
    if model.cov_mode == FULL and (model.Sigma0 is None or model.Q is None):
        raise FormatError("full covariance model requires Sigma0 and Q")
    return model


def write_model(path, params: ModelParams) -> None:
    Path(path).write_bytes(serialize_model(params))


def read_model(path) -> ModelParams:
    return deserialize_model(Path(path).read_bytes())


def _read_rows(path, header: list[str]):
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        try:
            first = next(reader)
        except StopIteration:
            raise FormatError(f"{path}: empty file (expected header {','.join(header)})")
        if [h.strip() for h in first] != header:
            raise FormatError(f"{path}: expected header {','.join(header)}, got {','.join(first)}")
        for lineno, row in enumerate(reader, start=2):
            if not row:
                continue
            if len(row) != len(header):
                raise FormatError(f"{path}:{lineno}: expected {len(header)} fields, got {len(row)}")
            yield lineno, row


OBS_HEADER = ["user", "item", "time", "rating"]


def write_observations(path, obs: ObservationSet) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(OBS_HEADER)
        for u, j, t, y in obs.triplets():
            w.writerow([u, j, t, fmt(y)])


def read_observations(path, dims: Dims | None = None, num_factors: int = 1) -> ObservationSet:
    """Load a ratings file.  Without ``dims`` the sizes are inferred from the largest indices."""
    users, items, times, ratings = [], [], [], []
    for lineno, row in _read_rows(path, OBS_HEADER):
        try:
            users.append(int(row[0]))
            items.append(int(row[1]))
            times.append(int(row[2]))
            ratings.append(float(row[3]))
        except ValueError as exc:
            raise FormatError(f"{path}:{lineno}: {exc}") from exc
    if dims is None:
        if not users:
            raise FormatError(f"{path}: cannot infer dimensions from an empty file")
        dims = Dims(max(users) + 1, max(items) + 1, max(times), num_factors)
    return ObservationSet(dims, users, items, times, ratings)


def states_header(K: int) -> list[str]:
    return ["user", "time"] + [f"f{k}" for k in range(K)]


def write_states(path, states: np.ndarray) -> None:
    N, T1, K = states.shape
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(states_header(K))
        for i in range(N):
            for t in range(T1):
                w.writerow([i, t] + [fmt(v) for v in states[i, t]])


def read_states(path, dims: Dims) -> np.ndarray:
    N, T, K = dims.num_users, dims.num_steps, dims.num_factors
    out = np.full((N, T + 1, K), np.nan)
    for lineno, row in _read_rows(path, states_header(K)):
        try:
            i, t = int(row[0]), int(row[1])
            out[i, t] = [float(v) for v in row[2:]]
        except (ValueError, IndexError) as exc:
            raise FormatError(f"{path}:{lineno}: {exc}") from exc
    if np.isnan(out).any():
        raise FormatError(f"{path}: missing state rows for {dims}")
    return out


def write_tensor(path, tensor: np.ndarray) -> None:
    N, M, T = tensor.shape
    with open(path, "wb") as fh:
        fh.write(_TENSOR_HEADER.pack(TENSOR_MAGIC, N, M, T))
        fh.write(np.ascontiguousarray(tensor, dtype="<f8").tobytes())


def read_tensor(path) -> np.ndarray:
    data = Path(path).read_bytes()
    if len(data) < _TENSOR_HEADER.size:
        raise FormatError(f"{path}: truncated tensor header")
    magic, N, M, T = _TENSOR_HEADER.unpack_from(data)
    if magic != TENSOR_MAGIC:
        raise FormatError(f"{path}: bad tensor magic {magic!r}")
    body = data[_TENSOR_HEADER.size:]
    if len(body) != 8 * N * M * T:
        raise FormatError(f"{path}: expected {N * M * T} values, found {len(body) / 8:g}")
    return np.frombuffer(body, dtype="<f8").reshape(N, M, T).copy()


QUERY_HEADER = ["user", "item", "time"]


def read_queries(path) -> list[tuple[int, int, int, int]]:
    """Query rows as ``(lineno, user, item, time)``."""
    out = []
    for lineno, row in _read_rows(path, QUERY_HEADER):
        try:
            out.append((lineno, int(row[0]), int(row[1]), int(row[2])))
        except ValueError as exc:
            raise FormatError(f"{path}:{lineno}: {exc}") from exc
    return out
