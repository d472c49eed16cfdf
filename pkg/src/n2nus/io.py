"""File formats: RF containers, checkpoints and B-mode exports.

RF container (``<stem>.rfc``)
    UTF-8 JSON header::

        {"version": 1, "kind": "channel" | "beamformed", "rows": R, "cols": C,
         "frames": F, "probe": {...}, "noise_sigma": s, "dtype": "f32le",
         "data_file": "<stem>.rfc.f32", "grid": {...} | null,
         "medium_id": "...", "shifts": [[dz, dx], ...]}

    plus the raw data file named in ``data_file``: F*R*C little-endian
    float32 values, frame-major then row-major. The clean reference of a
    stack is stored the same way under ``<stem>.clean`` (header, one frame)
    with data in ``<stem>.clean.f32``.

Checkpoint (``.n2n``)
    ``b"N2NUS001"``, a little-endian uint32 byte length, that many bytes of
    JSON metadata, then float32 LE parameters in :func:`nn_core.layer_specs`
    order (weight then bias per layer), then the AdamW first and second
    moment buffers (float32 LE, same length). Metadata holds the network
    config, epoch, validation loss, seed, normalisation, frame kind and the
    optimiser scalars.
"""

from __future__ import annotations

import json
import struct
from pathlib import Path
from typing import Optional, Union

import numpy as np

from n2nus.n2n_train import Checkpoint
from n2nus.nn_core import ModelParams, OptimizerState, UNetConfig
from n2nus.rf_sim import BeamformGrid, FrameKind, FrameStack, ProbeConfig, RFFrame

MAGIC = b"N2NUS001"
RFC_VERSION = 1

PathLike = Union[str, Path]


class FormatError(ValueError):
    """Malformed or incompatible file."""


def _dumps(obj) -> str:
    return json.dumps(obj, sort_keys=True, indent=1)


def _write_container(header_path: Path, frames: np.ndarray, kind: FrameKind, probe: ProbeConfig,
                     noise_sigma: float, grid: Optional[BeamformGrid], medium_id: str,
                     shifts=None):
    frames = np.asarray(frames, dtype="<f4")
    if frames.ndim == 2:
        frames = frames[None]
    data_name = header_path.name + ".f32"
    header = {
        "version": RFC_VERSION,
        "kind": FrameKind(kind).value,
        "rows": int(frames.shape[1]),
        "cols": int(frames.shape[2]),
        "frames": int(frames.shape[0]),
        "probe": probe.to_dict(),
        "noise_sigma": float(noise_sigma),
        "dtype": "f32le",
        "data_file": data_name,
        "grid": grid.to_dict() if grid is not None else None,
        "medium_id": medium_id,
        "shifts": [list(map(float, s)) for s in (shifts or [])],
    }
    header_path.write_text(_dumps(header) + "\n", encoding="utf-8")
    (header_path.parent / data_name).write_bytes(np.ascontiguousarray(frames).tobytes())


def _read_container(header_path: Path) -> tuple:
    try:
        header = json.loads(Path(header_path).read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise FormatError(f"{header_path}: invalid JSON header ({exc})") from None
    if header.get("version") != RFC_VERSION:
        raise FormatError(f"{header_path}: unsupported version {header.get('version')!r}")
    if header.get("dtype") != "f32le":
        raise FormatError(f"{header_path}: unsupported dtype {header.get('dtype')!r}")
    raw = (Path(header_path).parent / header["data_file"]).read_bytes()
    n, r, c = header["frames"], header["rows"], header["cols"]
    if len(raw) != 4 * n * r * c:
        raise FormatError(f"{header_path}: data file holds {len(raw)} bytes, expected {4 * n * r * c}")
    data = np.frombuffer(raw, dtype="<f4").reshape(n, r, c).astype(np.float32)
    return header, data


def _frame_from(header, samples) -> RFFrame:
    grid = BeamformGrid.from_dict(header["grid"]) if header.get("grid") else None
    return RFFrame(samples, FrameKind(header["kind"]), ProbeConfig.from_dict(header["probe"]),
                   header["noise_sigma"], grid)


def clean_path(rfc_path: PathLike) -> Path:
    p = Path(rfc_path)
    return p.with_suffix(".clean")


def write_stack(path: PathLike, stack: FrameStack) -> Path:
    """Write ``stack`` as ``<stem>.rfc`` (+ ``<stem>.clean`` if it has a reference)."""
    path = Path(path).with_suffix(".rfc")
    first = stack.frames[0]
    _write_container(path, stack.as_array(), first.kind, first.probe, first.noise_sigma,
                     first.grid, stack.medium_id, stack.shifts)
    if stack.clean is not None:
        _write_container(clean_path(path), stack.clean.samples, stack.clean.kind, stack.clean.probe,
                         0.0, stack.clean.grid, stack.medium_id)
    return path


def read_stack(path: PathLike) -> FrameStack:
    path = Path(path)
    header, data = _read_container(path)
    frames = [_frame_from(header, d) for d in data]
    clean = None
    cp = clean_path(path)
    if cp.exists():
        ch, cd = _read_container(cp)
        clean = _frame_from(ch, cd[0])
    shifts = [tuple(s) for s in header.get("shifts", [])]
    return FrameStack(frames, clean, header.get("medium_id", path.stem), shifts)


def write_frame(path: PathLike, frame: RFFrame, medium_id: str = "frame") -> Path:
    path = Path(path).with_suffix(".rfc")
    _write_container(path, frame.samples, frame.kind, frame.probe, frame.noise_sigma,
                     frame.grid, medium_id)
    return path


def read_header(path: PathLike) -> dict:
    return json.loads(Path(path).read_text(encoding="utf-8"))


# -- checkpoints ---------------------------------------------------------------

def save_checkpoint(path: PathLike, ckpt: Checkpoint) -> Path:
    path = Path(path)
    opt = ckpt.optimizer
    meta = {
        "config": ckpt.params.config.to_dict(),
        "epoch": ckpt.epoch,
        "validation_loss": ckpt.validation_loss,
        "seed": ckpt.seed,
        "normalization": ckpt.normalization,
        "kind": ckpt.kind,
        "param_count": ckpt.params.size,
        "optimizer": {"lr": opt.lr, "weight_decay": opt.weight_decay, "beta1": opt.beta1,
                      "beta2": opt.beta2, "epsilon": opt.epsilon, "step": opt.step},
        "extra": ckpt.extra,
    }
    blob = json.dumps(meta, sort_keys=True).encode("utf-8")
    n = ckpt.params.size
    m = opt.m if opt.m is not None else np.zeros(n)
    v = opt.v if opt.v is not None else np.zeros(n)
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<I", len(blob)))
        fh.write(blob)
        for arr in (ckpt.params.data, m, v):
            fh.write(np.asarray(arr, dtype="<f4").tobytes())
    return path


def load_checkpoint(path: PathLike) -> Checkpoint:
    raw = Path(path).read_bytes()
    if raw[:8] != MAGIC:
        raise FormatError(f"{path}: not an .n2n checkpoint")
    (size,) = struct.unpack("<I", raw[8:12])
    meta = json.loads(raw[12:12 + size].decode("utf-8"))
    config = UNetConfig(**meta["config"])
    n = meta["param_count"]
    body = np.frombuffer(raw[12 + size:], dtype="<f4")
    if body.size != 3 * n:
        raise FormatError(f"{path}: expected {3 * n} float32 values, found {body.size}")
    params = ModelParams(config, body[:n].astype(np.float32))
    o = meta["optimizer"]
    opt = OptimizerState(o["lr"], o["weight_decay"], o["beta1"], o["beta2"], o["epsilon"], o["step"],
                         body[n:2 * n].astype(np.float32), body[2 * n:].astype(np.float32))
    return Checkpoint(meta["epoch"], params, opt, meta["validation_loss"], meta["seed"],
                      meta["normalization"], meta["kind"], meta.get("extra", {}))


# -- B-mode exports --------------------------------------------------------------

def write_pgm(path: PathLike, pixels) -> Path:
    """16-bit binary PGM (P5, big-endian samples) of an image in [0, 1]."""
    px = np.clip(np.asarray(pixels, dtype=np.float64), 0.0, 1.0)
    h, w = px.shape
    data = np.round(px * 65535).astype(">u2")
    path = Path(path)
    with open(path, "wb") as fh:
        fh.write(f"P5\n{w} {h}\n65535\n".encode("ascii"))
        fh.write(data.tobytes())
    return path


def read_pgm(path: PathLike) -> np.ndarray:
    raw = Path(path).read_bytes()
    parts = raw.split(maxsplit=4)
    if parts[0] != b"P5":
        raise FormatError(f"{path}: not a binary PGM")
    w, h, maxval = int(parts[1]), int(parts[2]), int(parts[3])
    if maxval != 65535:
        raise FormatError(f"{path}: expected 16-bit PGM")
    data = np.frombuffer(parts[4][: 2 * w * h], dtype=">u2").reshape(h, w)
    return data.astype(np.float64) / 65535.0


def write_csv_image(path: PathLike, pixels) -> Path:
    np.savetxt(path, np.asarray(pixels, dtype=np.float64), delimiter=",", fmt="%.6f")
    return Path(path)
