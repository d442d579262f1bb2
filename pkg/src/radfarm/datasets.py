"""Dataset loading and writing: a directory of RGBA PNGs plus one JSON of
cameras (intrinsics and camera-to-world per image)."""

from __future__ import annotations

import json
from pathlib import Path

import numpy as np
from PIL import Image

from .core import Camera
from .errors import DataError
from .scenes import BUILTIN_SCENES, get_scene, make_dataset


def load_dataset(path: str | Path):
    """Returns (images (N,H,W,3) float32 premultiplied, alphas (N,H,W), cameras)."""
    root = Path(path)
    cams_file = root / "cameras.json"
    if not cams_file.is_file():
        raise DataError(f"missing cameras.json in {root}")
    try:
        meta = json.loads(cams_file.read_text())
    except json.JSONDecodeError as e:
        raise DataError(f"bad cameras.json: {e}") from e
    frames = meta.get("frames")
    if not frames:
        raise DataError("cameras.json has no frames")

    images, alphas, cameras = [], [], []
    for entry in frames:
        img_path = root / entry["file"]
        if not img_path.is_file():
            raise DataError(f"missing image {entry['file']}")
        try:
            with Image.open(img_path) as im:
                rgba = np.asarray(im.convert("RGBA"), dtype=np.float32) / 255.0
        except OSError as e:
            raise DataError(f"corrupt image {entry['file']}: {e}") from e
        h, w = rgba.shape[:2]
        try:
            pose = np.asarray(entry["camera_to_world"], dtype=np.float64).reshape(4, 4)
            cam = Camera(
                pose=pose,
                fx=float(entry["fx"]),
                fy=float(entry["fy"]),
                cx=float(entry["cx"]),
                cy=float(entry["cy"]),
                width=w,
                height=h,
            )
        except (KeyError, ValueError) as e:
            raise DataError(f"bad camera for {entry['file']}: {e}") from e
        alpha = rgba[..., 3]
        images.append(rgba[..., :3] * alpha[..., None])  # premultiply over black
        alphas.append(alpha)
        cameras.append(cam)
    shape = images[0].shape
    if any(im.shape != shape for im in images):
        raise DataError("all dataset images must share one resolution")
    return np.stack(images), np.stack(alphas), cameras


def save_dataset(path: str | Path, images, alphas, cameras) -> None:
    root = Path(path)
    root.mkdir(parents=True, exist_ok=True)
    frames = []
    for i, cam in enumerate(cameras):
        name = f"view_{i:03d}.png"
        rgba = np.concatenate([images[i], alphas[i][..., None]], axis=2)
        straight = rgba.copy()
        nz = rgba[..., 3] > 0
        straight[nz, :3] = rgba[nz, :3] / rgba[nz, 3:4]  # un-premultiply for PNG
        Image.fromarray(
            np.clip(np.round(straight * 255), 0, 255).astype(np.uint8)
        ).save(root / name)
        frames.append(
            {
                "file": name,
                "camera_to_world": cam.pose.reshape(-1).tolist(),
                "fx": cam.fx,
                "fy": cam.fy,
                "cx": cam.cx,
                "cy": cam.cy,
            }
        )
    (root / "cameras.json").write_text(json.dumps({"frames": frames}, indent=1))


def resolve_scene(name_or_dir: str, n_views: int, size: int, seed: int):
    """Built-in analytic scene (rendered to data) or an on-disk dataset."""
    if name_or_dir in BUILTIN_SCENES:
        scene = get_scene(name_or_dir)
        return make_dataset(scene, n_views, size=size, seed=seed)
    return load_dataset(name_or_dir)
