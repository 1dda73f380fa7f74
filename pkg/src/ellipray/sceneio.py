"""File formats: scene documents, images, checkpoints, and datasets.

Scene document (JSON, human readable):
    {
      "background": [r, g, b],
      "sh_degree": <active SH degree>,
      "primitives": [
        {"mean": [x, y, z], "quat": [w, x, y, z], "scale": [sx, sy, sz],
         "alpha": a, "sh": [[r, g, b], ...]},   # (L+1)^2 coefficient rows
        ...
      ],
      "cameras": [ ... ]                         # optional manifest
    }
Floats are written with repr-level precision, so a load/dump round trip is
lossless at 17 significant digits.

Camera entry: {"kind": "pinhole"|"fisheye_equidistant"|"thin_lens",
"pose": 3x4 row-major world-from-camera, "fx", "fy", "cx", "cy",
"width", "height", plus "focal" (fisheye, pixels) and
"aperture_radius"/"focus_distance" (thin lens, world units); optional
"image" (dataset float dump path) and "split" ("train"|"test").

Float image dump (binary, little endian): uint32 width, uint32 height,
then height*width*3 float32 RGB samples in row-major order, top row first.

PPM output is 8-bit P6 after clamping to [0, 1] and gamma 1/2.2 encoding.

Checkpoint sidecar (binary): magic "ELRYOPT1", uint32 version, uint32 step,
then named float32 arrays (uint16 name length, utf-8 name, uint8 rank,
uint32 dims, data) holding the optimizer moments.
"""

import json
import struct
from pathlib import Path

import numpy as np

from .geometry import CameraModel
from .scene import EllipsoidPrimitive, Scene

CHECKPOINT_MAGIC = b"ELRYOPT1"
CHECKPOINT_VERSION = 1
GAMMA = 2.2


def _vec(x):
    return [float(v) for v in np.asarray(x).reshape(-1)]


def camera_to_dict(camera: CameraModel, image: str | None = None, split: str | None = None):
    pose = np.concatenate([camera.rotation, camera.translation[:, None]], axis=1)
    doc = {
        "kind": camera.kind,
        "pose": [_vec(row) for row in pose],
        "fx": camera.fx,
        "fy": camera.fy,
        "cx": camera.cx,
        "cy": camera.cy,
        "width": camera.width,
        "height": camera.height,
    }
    if camera.kind == "fisheye_equidistant":
        doc["focal"] = camera.focal
    if camera.kind == "thin_lens":
        doc["aperture_radius"] = camera.aperture_radius
        doc["focus_distance"] = camera.focus_distance
    if image is not None:
        doc["image"] = image
    if split is not None:
        doc["split"] = split
    return doc


def camera_from_dict(doc: dict) -> CameraModel:
    pose = np.asarray(doc["pose"], dtype=np.float64).reshape(3, 4)
    return CameraModel(
        kind=doc["kind"],
        rotation=pose[:, :3],
        translation=pose[:, 3],
        fx=float(doc["fx"]),
        fy=float(doc["fy"]),
        cx=float(doc["cx"]),
        cy=float(doc["cy"]),
        width=int(doc["width"]),
        height=int(doc["height"]),
        focal=float(doc.get("focal", 0.0)),
        aperture_radius=float(doc.get("aperture_radius", 0.0)),
        focus_distance=float(doc.get("focus_distance", 1.0)),
    )


def scene_to_dict(scene: Scene, cameras: list | None = None) -> dict:
    doc = {
        "background": _vec(scene.background),
        "sh_degree": scene.sh_degree_active,
        "primitives": [
            {
                "mean": _vec(p.mean),
                "quat": _vec(p.rotation),
                "scale": _vec(p.scale),
                "alpha": float(p.alpha),
                "sh": [_vec(row) for row in p.sh_coeffs],
            }
            for p in scene.primitives
        ],
    }
    if cameras:
        doc["cameras"] = cameras
    return doc


def scene_from_dict(doc: dict) -> Scene:
    prims = [
        EllipsoidPrimitive(
            mean=np.asarray(p["mean"], dtype=np.float64),
            rotation=np.asarray(p["quat"], dtype=np.float64),
            scale=np.asarray(p["scale"], dtype=np.float64),
            alpha=float(p["alpha"]),
            sh_coeffs=np.asarray(p["sh"], dtype=np.float64),
        )
        for p in doc.get("primitives", [])
    ]
    return Scene(prims, np.asarray(doc["background"], dtype=np.float64), int(doc["sh_degree"]))


def save_scene(path, scene: Scene, cameras: list | None = None):
    Path(path).write_text(json.dumps(scene_to_dict(scene, cameras), indent=1))


def load_scene(path) -> Scene:
    return scene_from_dict(json.loads(Path(path).read_text()))


def load_cameras(path) -> list:
    doc = json.loads(Path(path).read_text())
    if isinstance(doc, dict) and "cameras" in doc:
        entries = doc["cameras"]
    elif isinstance(doc, list):
        entries = doc
    else:
        entries = [doc]
    return [(camera_from_dict(e), e) for e in entries]


def write_ppm(path, image: np.ndarray):
    """8-bit binary PPM after clamp to [0, 1] and gamma 1/2.2 encoding."""
    img = np.clip(np.asarray(image, dtype=np.float64), 0.0, 1.0)
    encoded = np.round(np.power(img, 1.0 / GAMMA) * 255.0).astype(np.uint8)
    h, w = encoded.shape[:2]
    with open(path, "wb") as f:
        f.write(f"P6\n{w} {h}\n255\n".encode())
        f.write(encoded.tobytes())


def write_float_image(path, image: np.ndarray):
    image = np.asarray(image)
    h, w = image.shape[:2]
    with open(path, "wb") as f:
        f.write(struct.pack("<II", w, h))
        f.write(image.astype("<f4").tobytes())


def read_float_image(path) -> np.ndarray:
    with open(path, "rb") as f:
        header = f.read(8)
        if len(header) != 8:
            raise ValueError(f"{path}: truncated float image header")
        w, h = struct.unpack("<II", header)
        data = np.frombuffer(f.read(w * h * 3 * 4), dtype="<f4")
    if data.size != w * h * 3:
        raise ValueError(f"{path}: truncated float image payload")
    return data.reshape(h, w, 3).astype(np.float64)


def save_checkpoint(path, scene: Scene, step: int, moment_arrays: dict):
    """Scene JSON plus a binary sidecar with the optimizer moments.

    moment_arrays maps name -> float array; stored as float32.
    """
    path = Path(path)
    save_scene(path, scene)
    with open(path.with_suffix(path.suffix + ".opt"), "wb") as f:
        f.write(CHECKPOINT_MAGIC)
        f.write(struct.pack("<II", CHECKPOINT_VERSION, step))
        f.write(struct.pack("<I", len(moment_arrays)))
        for name, arr in moment_arrays.items():
            arr = np.asarray(arr)
            encoded = name.encode()
            f.write(struct.pack("<H", len(encoded)))
            f.write(encoded)
            f.write(struct.pack("<B", arr.ndim))
            for d in arr.shape:
                f.write(struct.pack("<I", d))
            f.write(arr.astype("<f4").tobytes())


def load_checkpoint(path):
    """Returns (scene, step, moment_arrays)."""
    path = Path(path)
    scene = load_scene(path)
    moments = {}
    with open(path.with_suffix(path.suffix + ".opt"), "rb") as f:
        if f.read(8) != CHECKPOINT_MAGIC:
            raise ValueError(f"{path}: bad checkpoint magic")
        version, step = struct.unpack("<II", f.read(8))
        if version != CHECKPOINT_VERSION:
            raise ValueError(f"{path}: unsupported checkpoint version {version}")
        (count,) = struct.unpack("<I", f.read(4))
        for _ in range(count):
            (name_len,) = struct.unpack("<H", f.read(2))
            name = f.read(name_len).decode()
            (rank,) = struct.unpack("<B", f.read(1))
            shape = tuple(struct.unpack("<I", f.read(4))[0] for _ in range(rank))
            n = int(np.prod(shape)) if shape else 1
            moments[name] = np.frombuffer(f.read(n * 4), dtype="<f4").reshape(shape).astype(
                np.float64
            )
    return scene, step, moments


def save_dataset(out_dir, scene: Scene, cameras: list, images: list, splits: list):
    """Write a posed-image dataset: float dumps plus a camera manifest."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    entries = []
    for i, (cam, img, split) in enumerate(zip(cameras, images, splits)):
        name = f"view_{i:03d}.flt"
        write_float_image(out_dir / name, img)
        entries.append(camera_to_dict(cam, image=name, split=split))
    save_scene(out_dir / "manifest.json", scene, cameras=entries)


def load_dataset(path):
    """Returns (gt_scene, [(camera, image, split), ...])."""
    path = Path(path)
    manifest = path / "manifest.json" if path.is_dir() else path
    doc = json.loads(Path(manifest).read_text())
    scene = scene_from_dict(doc)
    views = []
    for entry in doc.get("cameras", []):
        cam = camera_from_dict(entry)
        img = read_float_image(manifest.parent / entry["image"]) if "image" in entry else None
        views.append((cam, img, entry.get("split", "train")))
    return scene, views
