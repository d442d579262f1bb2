"""Asset file (.nolf): versioned little-endian sections with checksums.

Layout: magic "NOLF", u16 version, u16 section count, then a table of
(name[16], offset u64, length u64, crc32 u32) entries, then the raw section
bytes.  Array shapes and scalar parameters travel in the JSON "meta"
section; binary sections are raw little-endian arrays.
"""

from __future__ import annotations

import json
import struct
import zlib
from pathlib import Path

import numpy as np

from .atlas import CubeAtlas
from .core import Aabb
from .encoding import HashGridEncoder, PshReport, PshTable
from .errors import DataError
from .lightfield import LightFieldAsset, MarchParams, ModelWiring
from .neural import Mlp

MAGIC = b"NOLF"
VERSION = 1
_NAME_LEN = 16


def _pack_sections(sections: dict[str, bytes]) -> bytes:
    names = list(sections)
    header_len = 8 + len(names) * (_NAME_LEN + 8 + 8 + 4)
    table = b""
    blobs = b""
    offset = header_len
    for name in names:
        blob = sections[name]
        raw = name.encode("ascii")
        if len(raw) > _NAME_LEN:
            raise DataError(f"section name too long: {name}")
        table += raw.ljust(_NAME_LEN, b"\0")
        table += struct.pack("<QQI", offset, len(blob), zlib.crc32(blob))
        blobs += blob
        offset += len(blob)
    return MAGIC + struct.pack("<HH", VERSION, len(names)) + table + blobs


def _unpack_sections(data: bytes) -> dict[str, bytes]:
    if data[:4] != MAGIC:
        raise DataError("not an asset file (bad magic)")
    version, count = struct.unpack_from("<HH", data, 4)
    if version != VERSION:
        raise DataError(f"unsupported asset version {version}")
    sections = {}
    pos = 8
    for _ in range(count):
        name = data[pos : pos + _NAME_LEN].rstrip(b"\0").decode("ascii")
        offset, length, crc = struct.unpack_from("<QQI", data, pos + _NAME_LEN)
        pos += _NAME_LEN + 20
        blob = data[offset : offset + length]
        if len(blob) != length:
            raise DataError(f"section {name} truncated")
        if zlib.crc32(blob) != crc:
            raise DataError(f"section {name} failed its checksum")
        sections[name] = blob
    return sections


def _arr_bytes(a: np.ndarray) -> bytes:
    return np.ascontiguousarray(a).astype(a.dtype.newbyteorder("<")).tobytes()


def _arr_from(blob: bytes, dtype, shape) -> np.ndarray:
    a = np.frombuffer(blob, dtype=np.dtype(dtype).newbyteorder("<"))
    return a.reshape(shape).astype(dtype)


def _mlp_meta(mlp: Mlp) -> dict:
    return {
        "widths": [mlp.weights[0].shape[1]] + [w.shape[0] for w in mlp.weights],
        "heads": [[a, w] for a, w in mlp.heads],
    }


def write_asset(asset: LightFieldAsset, path) -> None:
    if asset.density_atlas is None:
        raise DataError("analytic assets have no serialized form")
    meta = {
        "name": asset.name,
        "march": {
            "step": asset.march.step,
            "t_stop": asset.march.t_stop,
            "alpha_floor": asset.march.alpha_floor,
        },
        "wiring": {
            "use_hit_point": asset.wiring.use_hit_point,
            "use_opacity": asset.wiring.use_opacity,
            "refine_opacity": asset.wiring.refine_opacity,
            "use_tint": asset.wiring.use_tint,
            "use_diffuse_color": asset.wiring.use_diffuse_color,
        },
        "proxy": {"min": asset.proxy.min.tolist(), "max": asset.proxy.max.tolist()},
        "transform": np.asarray(asset.object_to_world, dtype=np.float64).reshape(-1).tolist(),
        "density_atlas": {
            "b": asset.density_atlas.base_resolution,
            "r": asset.density_atlas.cube_resolution,
            "cubes": asset.density_atlas.cube_count,
        },
        "psh": {
            "resolution": asset.psh.resolution,
            "table_size": asset.psh.table_size,
            "offset_size": asset.psh.offset_size,
            "primes_h0": asset.psh.primes_h0.astype(np.uint64).tolist(),
            "primes_h1": asset.psh.primes_h1.astype(np.uint64).tolist(),
            "features": asset.psh_features.shape[1],
            "report": {
                "load_factor": asset.psh.report.load_factor,
                "adjacency_score": asset.psh.report.adjacency_score,
                "attempts": asset.psh.report.attempts,
            },
        },
        "diffuse_encoder": {
            "levels": asset.diffuse_encoder.levels,
            "base_resolution": asset.diffuse_encoder.base_resolution,
            "growth": asset.diffuse_encoder.growth,
            "table_size": asset.diffuse_encoder.table_size,
            "features_per_level": asset.diffuse_encoder.features_per_level,
        },
        "specular_mlp": _mlp_meta(asset.specular_mlp),
        "diffuse_mlp": _mlp_meta(asset.diffuse_mlp),
        "has_diffuse_atlas": asset.diffuse_atlas is not None,
    }
    if asset.diffuse_atlas is not None:
        meta["diffuse_atlas"] = {
            "b": asset.diffuse_atlas.base_resolution,
            "r": asset.diffuse_atlas.cube_resolution,
            "cubes": asset.diffuse_atlas.cube_count,
        }

    sections: dict[str, bytes] = {
        "meta": json.dumps(meta).encode("utf-8"),
        "psh_offsets": _arr_bytes(asset.psh.offsets.astype(np.int64)),
        "psh_features": _arr_bytes(asset.psh_features.astype(np.float32)),
        "den_index": _arr_bytes(asset.density_atlas.index.astype(np.int32)),
        "den_cubes": _arr_bytes(asset.density_atlas.cubes.astype(np.float32)),
    }
    if asset.diffuse_atlas is not None:
        sections["dif_index"] = _arr_bytes(asset.diffuse_atlas.index.astype(np.int32))
        sections["dif_cubes"] = _arr_bytes(asset.diffuse_atlas.cubes.astype(np.float32))
    for i, f in enumerate(asset.diffuse_features):
        sections[f"ed_feat_{i}"] = _arr_bytes(f.astype(np.float32))
    for tag, mlp in (("fs", asset.specular_mlp), ("fd", asset.diffuse_mlp)):
        for i, w in enumerate(mlp.weights):
            sections[f"{tag}_w{i}"] = _arr_bytes(w.astype(np.float32))
        for i, b in enumerate(mlp.biases):
            sections[f"{tag}_b{i}"] = _arr_bytes(b.astype(np.float32))

    Path(path).write_bytes(_pack_sections(sections))


def _read_mlp(meta: dict, sections: dict, tag: str) -> Mlp:
    widths = meta["widths"]
    heads = tuple((a, int(w)) for a, w in meta["heads"])
    weights = []
    biases = []
    for i in range(len(widths) - 1):
        weights.append(
            _arr_from(sections[f"{tag}_w{i}"], np.float32, (widths[i + 1], widths[i]))
        )
        biases.append(_arr_from(sections[f"{tag}_b{i}"], np.float32, (widths[i + 1],)))
    return Mlp(weights=weights, biases=biases, heads=heads)


def read_asset(path) -> LightFieldAsset:
    sections = _unpack_sections(Path(path).read_bytes())
    try:
        meta = json.loads(sections["meta"].decode("utf-8"))
    except (KeyError, json.JSONDecodeError) as e:
        raise DataError(f"bad asset meta section: {e}") from e

    pm = meta["psh"]
    psh = PshTable(
        resolution=pm["resolution"],
        table_size=pm["table_size"],
        offset_size=pm["offset_size"],
        offsets=_arr_from(sections["psh_offsets"], np.int64, (pm["offset_size"],)),
        report=PshReport(
            load_factor=pm["report"]["load_factor"],
            adjacency_score=pm["report"]["adjacency_score"],
            attempts=pm["report"]["attempts"],
            table_size=pm["table_size"],
            offset_size=pm["offset_size"],
        ),
        primes_h0=np.array(pm["primes_h0"], dtype=np.uint64),
        primes_h1=np.array(pm["primes_h1"], dtype=np.uint64),
    )
    psh_features = _arr_from(
        sections["psh_features"], np.float32, (pm["table_size"], pm["features"])
    )

    dm = meta["density_atlas"]
    density_atlas = CubeAtlas(
        base_resolution=dm["b"],
        cube_resolution=dm["r"],
        channels=1,
        index=_arr_from(sections["den_index"], np.int32, (dm["b"],) * 3),
        cubes=_arr_from(
            sections["den_cubes"], np.float32,
            (dm["cubes"], dm["r"] + 1, dm["r"] + 1, dm["r"] + 1, 1),
        ),
    )
    diffuse_atlas = None
    if meta.get("has_diffuse_atlas"):
        am = meta["diffuse_atlas"]
        diffuse_atlas = CubeAtlas(
            base_resolution=am["b"],
            cube_resolution=am["r"],
            channels=4,
            index=_arr_from(sections["dif_index"], np.int32, (am["b"],) * 3),
            cubes=_arr_from(
                sections["dif_cubes"], np.float32,
                (am["cubes"], am["r"] + 1, am["r"] + 1, am["r"] + 1, 4),
            ),
        )

    em = meta["diffuse_encoder"]
    encoder = HashGridEncoder(
        levels=em["levels"],
        base_resolution=em["base_resolution"],
        growth=em["growth"],
        table_size=em["table_size"],
        features_per_level=em["features_per_level"],
    )
    diffuse_features = [
        _arr_from(sections[f"ed_feat_{i}"], np.float32, (rows, em["features_per_level"]))
        for i, rows in enumerate(encoder.row_counts)
    ]

    wm = meta["wiring"]
    mm = meta["march"]
    return LightFieldAsset(
        density_atlas=density_atlas,
        psh=psh,
        psh_features=psh_features,
        diffuse_encoder=encoder,
        diffuse_features=diffuse_features,
        specular_mlp=_read_mlp(meta["specular_mlp"], sections, "fs"),
        diffuse_mlp=_read_mlp(meta["diffuse_mlp"], sections, "fd"),
        march=MarchParams(step=mm["step"], t_stop=mm["t_stop"], alpha_floor=mm["alpha_floor"]),
        proxy=Aabb(min=np.array(meta["proxy"]["min"]), max=np.array(meta["proxy"]["max"])),
        object_to_world=np.array(meta["transform"], dtype=np.float64).reshape(4, 4),
        diffuse_atlas=diffuse_atlas,
        wiring=ModelWiring(**wm),
        name=meta.get("name", "asset"),
    )
