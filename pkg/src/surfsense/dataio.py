"""On-disk formats: dataset directories, PFM/PNG images and binary PLY meshes.

Dataset layout::

    scene.json          intrinsics, per-view 4x4 world-from-camera (row-major),
                        image size, scene scale (metres per unit), bounds
    rgb/NNNN.png        8-bit RGB
    depth/NNNN.pfm      little-endian float32 camera-space z (0 = missing)
    normal/NNNN.pfm     little-endian float32 world-frame unit normals
    gt_mesh.ply         optional reference mesh (binary little-endian)
"""

from __future__ import annotations

import json
import re
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from PIL import Image

from .camera import Camera, View

SCENE_FORMAT = "surfsense-scene"
SCENE_VERSION = 1


class DatasetError(Exception):
    pass


# ----------------------------------------------------------------------------
# images


def write_pfm(path, data: np.ndarray) -> None:
    data = np.asarray(data, dtype=np.float32)
    if data.ndim == 2:
        header = b"Pf"
    elif data.ndim == 3 and data.shape[2] == 3:
        header = b"PF"
    else:
        raise ValueError(f"PFM needs (H, W) or (H, W, 3), got {data.shape}")
    h, w = data.shape[:2]
    with open(path, "wb") as fh:
        fh.write(header + b"\n")
        fh.write(f"{w} {h}\n".encode())
        fh.write(b"-1.0\n")
        fh.write(np.ascontiguousarray(np.flipud(data), dtype="<f4").tobytes())


def read_pfm(path) -> np.ndarray:
    with open(path, "rb") as fh:
        header = fh.readline().strip()
        if header not in (b"PF", b"Pf"):
            raise DatasetError(f"{path}: not a PFM file")
        dims = fh.readline()
        while dims.startswith(b"#"):
            dims = fh.readline()
        m = re.match(rb"^\s*(\d+)\s+(\d+)\s*$", dims)
        if not m:
            raise DatasetError(f"{path}: malformed PFM size line")
        w, h = int(m.group(1)), int(m.group(2))
        scale = float(fh.readline().strip())
        dtype = "<f4" if scale < 0 else ">f4"
        channels = 3 if header == b"PF" else 1
        raw = np.frombuffer(fh.read(), dtype=dtype)
    if raw.size != w * h * channels:
        raise DatasetError(f"{path}: PFM payload has {raw.size} values, expected {w * h * channels}")
    shape = (h, w, 3) if channels == 3 else (h, w)
    return np.flipud(raw.reshape(shape)).astype(np.float32)


def write_png(path, rgb: np.ndarray) -> None:
    img = np.clip(np.round(np.asarray(rgb, dtype=np.float64) * 255.0), 0, 255).astype(np.uint8)
    Image.fromarray(img).save(path)


def read_png(path) -> np.ndarray:
    with Image.open(path) as im:
        return np.asarray(im.convert("RGB"), dtype=np.float64) / 255.0


# ----------------------------------------------------------------------------
# PLY


def write_ply(path, vertices, faces=None, normals=None) -> None:
    """Binary little-endian PLY with float32 vertices, optional normals and triangles."""
    v = np.asarray(vertices, dtype="<f4").reshape(-1, 3)
    lines = ["ply", "format binary_little_endian 1.0", f"element vertex {len(v)}",
             "property float x", "property float y", "property float z"]
    cols = [v]
    if normals is not None:
        lines += ["property float nx", "property float ny", "property float nz"]
        cols.append(np.asarray(normals, dtype="<f4").reshape(-1, 3))
    f = None if faces is None else np.asarray(faces, dtype=np.int64).reshape(-1, 3)
    if f is not None:
        lines += [f"element face {len(f)}", "property list uchar int vertex_indices"]
    lines.append("end_header")
    with open(path, "wb") as fh:
        fh.write(("\n".join(lines) + "\n").encode("ascii"))
        fh.write(np.ascontiguousarray(np.concatenate(cols, axis=1), dtype="<f4").tobytes())
        if f is not None:
            rec = np.zeros(len(f), dtype=[("n", "u1"), ("idx", "<i4", (3,))])
            rec["n"] = 3
            rec["idx"] = f
            fh.write(rec.tobytes())


_PLY_TYPES = {"char": "i1", "uchar": "u1", "short": "i2", "ushort": "u2", "int": "i4",
              "uint": "u4", "float": "f4", "double": "f8", "int8": "i1", "uint8": "u1",
              "int16": "i2", "uint16": "u2", "int32": "i4", "uint32": "u4",
              "float32": "f4", "float64": "f8"}


def read_ply(path):
    """Returns ``(vertices, faces or None, normals or None)`` from a binary little-endian PLY."""
    with open(path, "rb") as fh:
        if fh.readline().strip() != b"ply":
            raise DatasetError(f"{path}: not a PLY file")
        elements = []
        fmt = None
        while True:
            line = fh.readline()
            if not line:
                raise DatasetError(f"{path}: unterminated PLY header")
            tok = line.decode("ascii").split()
            if not tok or tok[0] in ("comment", "obj_info"):
                continue
            if tok[0] == "format":
                fmt = tok[1]
            elif tok[0] == "element":
                elements.append({"name": tok[1], "count": int(tok[2]), "props": []})
            elif tok[0] == "property":
                elements[-1]["props"].append(tok[1:])
            elif tok[0] == "end_header":
                break
        if fmt != "binary_little_endian":
            raise DatasetError(f"{path}: only binary_little_endian PLY is supported")
        body = fh.read()
    pos = 0
    verts = faces = normals = None
    for el in elements:
        if el["name"] == "vertex":
            dt = np.dtype([(p[1], "<" + _PLY_TYPES[p[0]]) for p in el["props"]])
            arr = np.frombuffer(body, dtype=dt, count=el["count"], offset=pos)
            pos += dt.itemsize * el["count"]
            verts = np.stack([arr["x"], arr["y"], arr["z"]], axis=1).astype(np.float64)
            if "nx" in dt.names:
                normals = np.stack([arr["nx"], arr["ny"], arr["nz"]], axis=1).astype(np.float64)
        elif el["name"] == "face":
            prop = el["props"][0]
            if prop[0] != "list":
                raise DatasetError(f"{path}: face element without list property")
            ct, it = "<" + _PLY_TYPES[prop[1]], "<" + _PLY_TYPES[prop[2]]
            dt = np.dtype([("n", ct), ("idx", it, (3,))])
            arr = np.frombuffer(body, dtype=dt, count=el["count"], offset=pos)
            if el["count"] and np.any(arr["n"] != 3):
                raise DatasetError(f"{path}: only triangle faces are supported")
            pos += dt.itemsize * el["count"]
            faces = arr["idx"].astype(np.int64)
        else:
            raise DatasetError(f"{path}: unsupported PLY element {el['name']!r}")
    if verts is None:
        raise DatasetError(f"{path}: no vertex element")
    return verts, faces, normals


# ----------------------------------------------------------------------------
# datasets


@dataclass
class Dataset:
    views: list
    meta: dict = field(default_factory=dict)
    root: Path | None = None

    @property
    def scene_scale(self) -> float:
        return float(self.meta.get("scene_scale", 1.0))

    @property
    def bbox(self) -> np.ndarray:
        return np.asarray(self.meta["bbox"], dtype=np.float64)

    @property
    def bound_radius(self) -> float:
        if "bound_radius" in self.meta:
            return float(self.meta["bound_radius"])
        return float(np.linalg.norm(np.abs(self.bbox).max(axis=0)))

    def neighbors(self, index: int, k: int = 8) -> list:
        """Views with the closest camera centres, excluding ``index`` itself."""
        c = np.stack([v.camera.center for v in self.views])
        d = np.linalg.norm(c - c[index], axis=1)
        order = [i for i in np.argsort(d, kind="stable") if i != index]
        return order[:k]


def _view_name(i: int) -> str:
    return f"{i:04d}"


def save_dataset(root, views, meta: dict) -> None:
    root = Path(root)
    for sub in ("rgb", "depth", "normal"):
        (root / sub).mkdir(parents=True, exist_ok=True)
    if not views:
        raise DatasetError("no views to write")
    cam0 = views[0].camera
    doc = {
        "format": SCENE_FORMAT,
        "version": SCENE_VERSION,
        "width": cam0.width,
        "height": cam0.height,
        "intrinsics": {"fx": cam0.fx, "fy": cam0.fy, "cx": cam0.cx, "cy": cam0.cy},
        "depth_convention": "z",
        "normal_frame": "world",
        "views": [],
    }
    doc.update(meta)
    for i, view in enumerate(views):
        name = view.name or _view_name(i)
        doc["views"].append({"name": name,
                             "world_from_camera": view.camera.world_from_camera.ravel().tolist()})
        write_png(root / "rgb" / f"{name}.png", view.rgb)
        write_pfm(root / "depth" / f"{name}.pfm", view.depth)
        write_pfm(root / "normal" / f"{name}.pfm", view.normal)
    with open(root / "scene.json", "w") as fh:
        json.dump(doc, fh, indent=2)


def load_dataset(root) -> Dataset:
    root = Path(root)
    try:
        with open(root / "scene.json") as fh:
            doc = json.load(fh)
    except (OSError, json.JSONDecodeError) as exc:
        raise DatasetError(f"cannot read {root / 'scene.json'}: {exc}") from exc
    if doc.get("format") != SCENE_FORMAT:
        raise DatasetError(f"{root}: unknown scene format {doc.get('format')!r}")
    try:
        W, H = int(doc["width"]), int(doc["height"])
        views = []
        for entry in doc["views"]:
            name = entry["name"]
            cam = Camera.from_matrix(entry.get("intrinsics", doc["intrinsics"]),
                                     entry["world_from_camera"], W, H)
            rgb = read_png(root / "rgb" / f"{name}.png")
            depth = read_pfm(root / "depth" / f"{name}.pfm")
            normal = read_pfm(root / "normal" / f"{name}.pfm")
            if rgb.shape[:2] != (H, W) or depth.shape != (H, W) or normal.shape != (H, W, 3):
                raise DatasetError(f"{root}: view {name} has inconsistent image sizes")
            views.append(View(cam, rgb, depth, normal, name=name))
    except (KeyError, ValueError, OSError) as exc:
        raise DatasetError(f"{root}: {exc}") from exc
    meta = {k: v for k, v in doc.items() if k != "views"}
    return Dataset(views, meta, root)
