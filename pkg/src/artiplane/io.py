"""On-disk formats: JSON pose/skeleton/camera/scene files, the binary tensor
checkpoint container, PNG/raw image output, and run manifests.

Checkpoint byte layout (all multi-byte values little-endian):

    bytes 0..7    magic "ATPLCKP1"
    bytes 8..11   uint32 n = length of the UTF-8 JSON header
    bytes 12..11+n  JSON header: {"meta": {...}, "tensors": [{"name", "dtype",
                   "shape", "offset", "nbytes"}, ...]}
    remainder     raw tensor payloads at the stated offsets (relative to the
                  end of the header), C-order

Tri-plane payloads use float32 with shape (3, res, res, channels): plane
index (xy, xz, yz) first, then row (second projected axis), column (first
projected axis), channel.
"""

from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np
from PIL import Image

from .errors import ValidationError
from .kinematics import Camera, CanonicalPose, PoseConfig, PosePart, RigidTransform, Skeleton

_MAGIC = b"ATPLCKP1"


# ------------------------------------------------------------------ JSON IO

def pose_to_dict(pose: PoseConfig) -> dict:
    return {
        "parts": [
            {
                "length": float(p.length),
                "rotation": [float(v) for v in p.transform.rotation.reshape(9)],
                "translation": [float(v) for v in p.transform.translation],
            }
            for p in pose.parts
        ]
    }


def pose_from_dict(d: dict) -> PoseConfig:
    try:
        parts = tuple(
            PosePart(
                length=float(p["length"]),
                transform=RigidTransform(
                    np.asarray(p["rotation"], dtype=np.float64).reshape(3, 3),
                    np.asarray(p["translation"], dtype=np.float64),
                ),
            )
            for p in d["parts"]
        )
    except (KeyError, TypeError) as e:
        raise ValidationError(f"malformed pose record: {e}") from e
    return PoseConfig(parts)


def canonical_to_dict(canon: CanonicalPose) -> dict:
    d = pose_to_dict(canon.as_pose())
    d["centers"] = [[float(v) for v in c] for c in canon.centers]
    return d


def canonical_from_dict(d: dict) -> CanonicalPose:
    pose = pose_from_dict(d)
    centers = np.asarray(d["centers"], dtype=np.float64) if "centers" in d else None
    return CanonicalPose(pose.parts, centers=centers)


def skeleton_to_dict(sk: Skeleton) -> dict:
    return {"parent": list(sk.parent)}


def skeleton_from_dict(d: dict) -> Skeleton:
    return Skeleton(tuple(d["parent"]))


def camera_to_dict(cam: Camera) -> dict:
    return {
        "rotation": [float(v) for v in cam.extrinsic.rotation.reshape(9)],
        "translation": [float(v) for v in cam.extrinsic.translation],
        "focal": cam.focal,
        "cx": cam.cx,
        "cy": cam.cy,
        "width": cam.width,
        "height": cam.height,
        "near": cam.near,
        "far": cam.far,
    }


def camera_from_dict(d: dict) -> Camera:
    return Camera(
        extrinsic=RigidTransform(
            np.asarray(d["rotation"], dtype=np.float64).reshape(3, 3),
            np.asarray(d["translation"], dtype=np.float64),
        ),
        focal=float(d["focal"]), cx=float(d["cx"]), cy=float(d["cy"]),
        width=int(d["width"]), height=int(d["height"]),
        near=float(d["near"]), far=float(d["far"]),
    )


def save_json(path, obj: dict):
    Path(path).write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n")


def load_json(path) -> dict:
    return json.loads(Path(path).read_text())


# -------------------------------------------------------------- checkpoints

def save_checkpoint(path, tensors: dict, meta: dict | None = None):
    """Write named float arrays plus a JSON meta block (see module docstring)."""
    entries = []
    payloads = []
    offset = 0
    for name, arr in tensors.items():
        a = np.ascontiguousarray(arr)
        if a.dtype.byteorder == ">":
            a = a.astype(a.dtype.newbyteorder("<"))
        entries.append({
            "name": name,
            "dtype": a.dtype.name,
            "shape": list(a.shape),
            "offset": offset,
            "nbytes": a.nbytes,
        })
        payloads.append(a.tobytes())
        offset += a.nbytes
    header = json.dumps({"meta": meta or {}, "tensors": entries}, sort_keys=True).encode()
    with open(path, "wb") as f:
        f.write(_MAGIC)
        f.write(struct.pack("<I", len(header)))
        f.write(header)
        for p in payloads:
            f.write(p)


def load_checkpoint(path):
    """Read a checkpoint; returns (tensors dict, meta dict)."""
    blob = Path(path).read_bytes()
    if blob[:8] != _MAGIC:
        raise ValidationError(f"{path}: not a checkpoint file")
    (hlen,) = struct.unpack("<I", blob[8:12])
    header = json.loads(blob[12:12 + hlen].decode())
    base = 12 + hlen
    tensors = {}
    for e in header["tensors"]:
        start = base + e["offset"]
        raw = blob[start:start + e["nbytes"]]
        tensors[e["name"]] = np.frombuffer(raw, dtype=np.dtype(e["dtype"])).reshape(e["shape"]).copy()
    return tensors, header.get("meta", {})


# ------------------------------------------------------------------ images

def save_png(path, rgb: np.ndarray):
    """RGB in [0,1], shape (H, W, 3) or grayscale (H, W), to 8-bit PNG."""
    arr = np.clip(np.asarray(rgb, dtype=np.float64), 0.0, 1.0)
    u8 = np.round(arr * 255.0).astype(np.uint8)
    Image.fromarray(u8).save(path)


def save_raw(path, arr: np.ndarray):
    """Raw float32 array in .npy container (channel order H, W[, C])."""
    np.save(path, np.asarray(arr, dtype=np.float32))


def load_raw(path) -> np.ndarray:
    return np.load(path)
