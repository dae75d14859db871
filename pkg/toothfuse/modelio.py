"""Binary model and latent files.

Model (``IFSD``), little-endian::

    magic "IFSD" | u32 version | u32 latent_dim | u32 hidden | u32 layers
    | u32 skip_layer | u32 n_params | f32[n_params] theta
    | u32 n_latents | f32[n_latents * latent_dim] latents

Next to every model a ``<name>.manifest.txt`` records the training settings
and loss trace as ``key=value`` lines.

Latent (``IFSZ``), little-endian::

    magic "IFSZ" | u32 version | u32 dim | f64[3] center | f64 scale | f64[dim] z
"""

from __future__ import annotations

import logging
import struct
from dataclasses import fields
from pathlib import Path

import numpy as np
import numpy.typing as npt

from toothfuse.errors import ModelFormatError
from toothfuse.geometry import FloatArray
from toothfuse.implicit import NetworkShape, SdfNetwork, TrainConfig, TrainedModel
from toothfuse.meshio import file_digest
from toothfuse.sdf import NormalizationInfo

log = logging.getLogger(__name__)

MODEL_MAGIC = b"IFSD"
LATENT_MAGIC = b"IFSZ"
FORMAT_VERSION = 1

_MODEL_HEADER = struct.Struct("<4s6I")
_COUNT = struct.Struct("<I")
_LATENT_HEADER = struct.Struct("<4s2I4d")


def manifest_path(model_path: str | Path) -> Path:
    p = Path(model_path)
    return p.with_name(p.name + ".manifest.txt")


# ---------------------------------------------------------------------------
# Model files
# ---------------------------------------------------------------------------


def _manifest_lines(model: TrainedModel, digest: str) -> list[str]:
    cfg = model.config
    shape = model.network.shape
    lines = [
        "format=IFSD",
        f"version={FORMAT_VERSION}",
        f"sha256={digest}",
        f"shapes={len(model.latents)}",
    ]
    lines += [f"network.{f.name}={getattr(shape, f.name)}" for f in fields(shape)]
    lines += [
        f"train.{f.name}={getattr(cfg, f.name)!r}"
        for f in fields(cfg)
        if f.name != "network"
    ]
    lines.append("loss_trace=" + ",".join(repr(v) for v in model.loss_trace))
    return lines


def save_model(path: str | Path, model: TrainedModel) -> Path:
    """Write the model file and its manifest; parameters are stored as float32."""
    p = Path(path)
    shape = model.network.shape
    header = _MODEL_HEADER.pack(
        MODEL_MAGIC,
        FORMAT_VERSION,
        shape.latent_dim,
        shape.hidden,
        shape.layers,
        shape.skip_layer,
        shape.n_params,
    )
    blob = b"".join(
        [
            header,
            model.network.theta.astype("<f4").tobytes(),
            _COUNT.pack(len(model.latents)),
            model.latents.astype("<f4").tobytes(),
        ]
    )
    p.write_bytes(blob)
    manifest_path(p).write_text(
        "\n".join(_manifest_lines(model, file_digest(p))) + "\n", encoding="utf-8"
    )
    log.info(
        "Saved model (%d parameters, %d latents) to %s", shape.n_params, len(model.latents), p
    )
    return p


def _read_manifest(path: Path) -> dict[str, str]:
    mp = manifest_path(path)
    if not mp.exists():
        return {}
    out: dict[str, str] = {}
    for line in mp.read_text(encoding="utf-8").splitlines():
        key, sep, value = line.partition("=")
        if sep:
            out[key.strip()] = value.strip()
    return out


def _train_config(manifest: dict[str, str], shape: NetworkShape) -> TrainConfig:
    kwargs: dict[str, object] = {"network": shape}
    for f in fields(TrainConfig):
        raw = manifest.get(f"train.{f.name}")
        if raw is None or f.name == "network":
            continue
        try:
            kwargs[f.name] = float(raw) if "." in raw or "e" in raw.lower() else int(raw)
        except ValueError as e:
            raise ModelFormatError(f"manifest value train.{f.name}={raw!r} is not a number") from e
    try:
        return TrainConfig(**kwargs)  # type: ignore[arg-type]
    except (TypeError, ValueError) as e:
        raise ModelFormatError(f"manifest training settings are invalid: {e}") from e


def load_model(path: str | Path) -> TrainedModel:
    p = Path(path)
    data = p.read_bytes()
    if len(data) < _MODEL_HEADER.size:
        raise ModelFormatError(f"{p}: file too short for a model header")
    magic, version, latent_dim, hidden, layers, skip, n_params = _MODEL_HEADER.unpack_from(data)
    if magic != MODEL_MAGIC:
        raise ModelFormatError(f"{p}: bad magic {magic!r}, expected {MODEL_MAGIC!r}")
    if version != FORMAT_VERSION:
        raise ModelFormatError(f"{p}: unsupported model version {version}")
    try:
        shape = NetworkShape(latent_dim, hidden, layers, skip)
    except ValueError as e:
        raise ModelFormatError(f"{p}: invalid architecture header: {e}") from e
    if shape.n_params != n_params:
        raise ModelFormatError(
            f"{p}: header declares {n_params} parameters, architecture needs {shape.n_params}"
        )
    offset = _MODEL_HEADER.size
    theta_end = offset + 4 * n_params
    if len(data) < theta_end + _COUNT.size:
        raise ModelFormatError(f"{p}: truncated parameter blob")
    theta = np.frombuffer(data, dtype="<f4", count=n_params, offset=offset).astype(np.float64)
    (n_latents,) = _COUNT.unpack_from(data, theta_end)
    lat_start = theta_end + _COUNT.size
    expected = lat_start + 4 * n_latents * latent_dim
    if len(data) != expected:
        raise ModelFormatError(f"{p}: expected {expected} bytes, found {len(data)}")
    latents = np.frombuffer(data, dtype="<f4", count=n_latents * latent_dim, offset=lat_start)
    try:
        network = SdfNetwork(shape, theta)
    except ValueError as e:
        raise ModelFormatError(f"{p}: {e}") from e

    manifest = _read_manifest(p)
    config = _train_config(manifest, shape)
    trace_raw = manifest.get("loss_trace", "")
    trace = tuple(float(v) for v in trace_raw.split(",") if v)
    return TrainedModel(network, latents.astype(np.float64), config, trace)


# ---------------------------------------------------------------------------
# Latent files
# ---------------------------------------------------------------------------


def save_latent(
    path: str | Path, z: npt.ArrayLike, info: NormalizationInfo | None = None
) -> Path:
    """Write z* with the normalization that maps its surface back to millimetres."""
    p = Path(path)
    latent = np.asarray(z, dtype=np.float64).reshape(-1)
    info = info or NormalizationInfo.identity()
    header = _LATENT_HEADER.pack(
        LATENT_MAGIC, FORMAT_VERSION, len(latent), *info.center, info.scale
    )
    p.write_bytes(header + latent.astype("<f8").tobytes())
    return p


def load_latent(path: str | Path) -> tuple[FloatArray, NormalizationInfo]:
    p = Path(path)
    data = p.read_bytes()
    if len(data) < _LATENT_HEADER.size:
        raise ModelFormatError(f"{p}: file too short for a latent header")
    magic, version, dim, cx, cy, cz, scale = _LATENT_HEADER.unpack_from(data)
    if magic != LATENT_MAGIC:
        raise ModelFormatError(f"{p}: bad magic {magic!r}, expected {LATENT_MAGIC!r}")
    if version != FORMAT_VERSION:
        raise ModelFormatError(f"{p}: unsupported latent version {version}")
    if len(data) != _LATENT_HEADER.size + 8 * dim:
        raise ModelFormatError(f"{p}: expected {dim} latent entries")
    if not scale > 0:
        raise ModelFormatError(f"{p}: normalization scale must be positive")
    z = np.frombuffer(data, dtype="<f8", count=dim, offset=_LATENT_HEADER.size).astype(np.float64)
    return z, NormalizationInfo((cx, cy, cz), scale)
