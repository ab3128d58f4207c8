"""Scene, checkpoint, image and mesh I/O.

Scenes are a JSON manifest plus image files. Checkpoints are binary
little-endian PLY point clouds with custom per-vertex attributes and a
JSON sidecar for the classifier head. Label maps are 8-bit single
channel PNGs whose byte values are object IDs.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from PIL import Image

from .camera import Camera
from .errors import CheckpointError, SceneFormatError
from .model import IDENTITY_DIM, NUM_CLASSES, SplatModel
from .seghead import SegHead

CHECKPOINT_VERSION = 1

_PLY_TYPES = {
    "char": "i1", "uchar": "u1", "short": "i2", "ushort": "u2",
    "int": "i4", "uint": "u4", "float": "f4", "double": "f8",
    "int8": "i1", "uint8": "u1", "int16": "i2", "uint16": "u2",
    "int32": "i4", "uint32": "u4", "float32": "f4", "float64": "f8",
}


# ---------------------------------------------------------------- scenes

@dataclass
class SceneView:
    image: str
    camera: Camera
    labels: str | None = None


@dataclass
class SceneManifest:
    views: list
    bounds_min: np.ndarray
    bounds_max: np.ndarray
    base_dir: Path
    points: str | None = None

    @property
    def cameras(self):
        return [v.camera for v in self.views]

    def image_path(self, i):
        return self.base_dir / self.views[i].image

    def labels_path(self, i):
        lbl = self.views[i].labels
        return None if lbl is None else self.base_dir / lbl

    def load_image(self, i):
        return load_image(self.image_path(i))

    def load_labels(self, i):
        p = self.labels_path(i)
        return None if p is None else load_label_map(p)

    def load_points(self):
        if self.points is None:
            return None
        return load_points(self.base_dir / self.points)


def load_manifest(path):
    path = Path(path)
    if not path.exists():
        raise SceneFormatError(f"manifest not found: {path}")
    try:
        data = json.loads(path.read_text())
    except json.JSONDecodeError as e:
        raise SceneFormatError(f"manifest is not valid JSON: {e}") from e
    if not isinstance(data, dict) or "views" not in data:
        raise SceneFormatError("manifest missing required key 'views'")
    if "bounds" not in data:
        raise SceneFormatError("manifest missing required key 'bounds'")
    raw_views = data["views"]
    if not raw_views:
        raise SceneFormatError("empty scene: manifest has no views")
    views = []
    for i, rv in enumerate(raw_views):
        try:
            if "image" not in rv:
                raise SceneFormatError("view missing 'image'")
            if "camera" not in rv:
                raise SceneFormatError("view missing 'camera'")
            cam = Camera.from_dict(rv["camera"])
        except SceneFormatError as e:
            raise SceneFormatError(f"view {i}: {e}") from e
        views.append(SceneView(image=rv["image"], camera=cam,
                               labels=rv.get("labels")))
    bounds = data["bounds"]
    for key in ("min", "max"):
        if key not in bounds or len(bounds[key]) != 3:
            raise SceneFormatError(f"bounds.{key} must be a 3-vector")
    return SceneManifest(
        views=views,
        bounds_min=np.asarray(bounds["min"], dtype=np.float64),
        bounds_max=np.asarray(bounds["max"], dtype=np.float64),
        base_dir=path.parent,
        points=data.get("points"))


def save_manifest(manifest, path):
    path = Path(path)
    data = {
        "views": [
            {"image": v.image, "camera": v.camera.to_dict(),
             **({"labels": v.labels} if v.labels is not None else {})}
            for v in manifest.views
        ],
        "bounds": {"min": [float(x) for x in manifest.bounds_min],
                   "max": [float(x) for x in manifest.bounds_max]},
    }
    if manifest.points is not None:
        data["points"] = manifest.points
    path.write_text(json.dumps(data, indent=1))


# ---------------------------------------------------------------- rasters

def load_image(path):
    """8-bit RGB file -> (H, W, 3) float64 in [0, 1]."""
    with Image.open(path) as im:
        arr = np.asarray(im.convert("RGB"), dtype=np.float64)
    return arr / 255.0


def save_image(path, img):
    """(H, W, 3) floats in [0, 1] -> 8-bit RGB file."""
    arr = np.clip(np.rint(np.asarray(img) * 255.0), 0, 255).astype(np.uint8)
    Image.fromarray(arr, mode="RGB").save(path)


def load_label_map(path):
    """8-bit single-channel file -> (H, W) uint8 of object IDs."""
    with Image.open(path) as im:
        if im.mode != "L":
            raise SceneFormatError(
                f"label map {path} must be 8-bit single-channel, got mode {im.mode}")
        return np.asarray(im, dtype=np.uint8).copy()


def save_label_map(path, labels):
    labels = np.asarray(labels)
    if labels.dtype != np.uint8:
        if labels.min() < 0 or labels.max() > 255:
            raise SceneFormatError("label values must fit in [0, 255]")
        labels = labels.astype(np.uint8)
    Image.fromarray(labels, mode="L").save(path)


# ---------------------------------------------------------------- ply core

def read_ply(path):
    """Minimal PLY reader: binary little-endian or ascii.

    Returns {element_name: {"count": n, "data": structured array or
    dict of arrays, "lists": {prop: list-arrays}}, "comments": [...]}.
    """
    path = Path(path)
    with open(path, "rb") as f:
        magic = f.readline().strip()
        if magic != b"ply":
            raise SceneFormatError(f"{path} is not a polygon file")
        fmt = None
        comments = []
        elements = []  # (name, count, [(prop_name, kind)]) kind: dtype or ("list", ct, it)
        while True:
            line = f.readline()
            if not line:
                raise SceneFormatError(f"{path}: unexpected end of header")
            tok = line.decode("ascii").strip().split()
            if not tok:
                continue
            if tok[0] == "format":
                fmt = tok[1]
            elif tok[0] == "comment":
                comments.append(" ".join(tok[1:]))
            elif tok[0] == "element":
                elements.append((tok[1], int(tok[2]), []))
            elif tok[0] == "property":
                if tok[1] == "list":
                    elements[-1][2].append((tok[4], ("list", _PLY_TYPES[tok[2]],
                                                     _PLY_TYPES[tok[3]])))
                else:
                    elements[-1][2].append((tok[2], _PLY_TYPES[tok[1]]))
            elif tok[0] == "end_header":
                break
        if fmt not in ("binary_little_endian", "ascii"):
            raise SceneFormatError(f"{path}: unsupported format {fmt}")
        out = {"comments": comments}
        for name, count, props in elements:
            has_list = any(isinstance(k, tuple) for _, k in props)
            if not has_list:
                dt = np.dtype([(p, "<" + k) for p, k in props])
                if fmt == "ascii":
                    rows = [f.readline().split() for _ in range(count)]
                    arr = np.zeros(count, dtype=dt)
                    for j, (p, k) in enumerate(props):
                        col = [r[j] for r in rows]
                        arr[p] = np.asarray(col, dtype="<" + k)
                else:
                    raw = f.read(dt.itemsize * count)
                    if len(raw) != dt.itemsize * count:
                        raise SceneFormatError(
                            f"{path}: truncated element '{name}'")
                    arr = np.frombuffer(raw, dtype=dt).copy()
                out[name] = {"count": count, "data": arr}
            else:
                lists = {p: [] for p, k in props if isinstance(k, tuple)}
                scalars = {p: [] for p, k in props if not isinstance(k, tuple)}
                for _ in range(count):
                    if fmt == "ascii":
                        vals = f.readline().split()
                        pos = 0
                        for p, k in props:
                            if isinstance(k, tuple):
                                n_items = int(vals[pos]); pos += 1
                                lists[p].append(np.asarray(
                                    vals[pos:pos + n_items], dtype="<" + k[2]))
                                pos += n_items
                            else:
                                scalars[p].append(float(vals[pos])); pos += 1
                    else:
                        for p, k in props:
                            if isinstance(k, tuple):
                                cdt = np.dtype("<" + k[1])
                                n_items = int(np.frombuffer(f.read(cdt.itemsize),
                                                            dtype=cdt)[0])
                                idt = np.dtype("<" + k[2])
                                lists[p].append(np.frombuffer(
                                    f.read(idt.itemsize * n_items), dtype=idt).copy())
                            else:
                                sdt = np.dtype("<" + k)
                                scalars[p].append(
                                    np.frombuffer(f.read(sdt.itemsize), dtype=sdt)[0])
                out[name] = {"count": count, "lists": lists, "scalars": scalars}
        return out


def _write_ply_header(f, fmt, comments, elements):
    f.write(b"ply\n")
    f.write(f"format {fmt} 1.0\n".encode())
    for c in comments:
        f.write(f"comment {c}\n".encode())
    for name, count, props in elements:
        f.write(f"element {name} {count}\n".encode())
        for line in props:
            f.write(f"property {line}\n".encode())
    f.write(b"end_header\n")


# ------------------------------------------------------------- checkpoints

def _checkpoint_attr_names(sh_degree):
    names = ["x", "y", "z", "rot_0", "rot_1", "rot_2", "rot_3",
             "log_s_u", "log_s_v", "opacity_logit"]
    k = (sh_degree + 1) ** 2
    names += [f"sh_{i}" for i in range(3 * k)]
    names += [f"id_{i}" for i in range(IDENTITY_DIM)]
    return names


def save_checkpoint(model, head, path):
    """Write the model as a point cloud with custom attributes.

    The head goes to a JSON sidecar next to the file. Floats keep the
    model's own precision so a load is bit-exact.
    """
    path = Path(path)
    model.validate()
    n = len(model)
    kind = "double" if model.dtype == np.float64 else "float"
    code = "f8" if kind == "double" else "f4"
    names = _checkpoint_attr_names(model.sh_degree)
    cols = np.concatenate([
        model.centers,
        model.quats,
        model.log_scales,
        model.opacity_logits[:, None],
        model.sh.reshape(n, -1),
        model.identities,
    ], axis=1) if n else np.zeros((0, len(names)), dtype=model.dtype)
    rec = np.zeros(n, dtype=np.dtype([(nm, "<" + code) for nm in names]))
    for j, nm in enumerate(names):
        rec[nm] = cols[:, j]
    with open(path, "wb") as f:
        _write_ply_header(
            f, "binary_little_endian",
            [f"disksplat checkpoint v{CHECKPOINT_VERSION}",
             f"sh_degree {model.sh_degree}"],
            [("vertex", n, [f"{kind} {nm}" for nm in names])])
        f.write(rec.tobytes())
    sidecar = path.with_suffix(path.suffix + ".head.json")
    sidecar.write_text(json.dumps({
        "version": CHECKPOINT_VERSION,
        "weights": [[float(w) for w in row] for row in head.weights],
        "biases": [float(b) for b in head.biases],
    }))


def load_checkpoint(path):
    """Read (SplatModel, SegHead) back, bit-exact."""
    path = Path(path)
    if not path.exists():
        raise CheckpointError(f"checkpoint not found: {path}")
    ply = read_ply(path)
    version = None
    sh_degree = None
    for c in ply["comments"]:
        if c.startswith("disksplat checkpoint v"):
            version = int(c.rsplit("v", 1)[1])
        elif c.startswith("sh_degree"):
            sh_degree = int(c.split()[1])
    if version is None:
        raise CheckpointError(f"{path} is not a disksplat checkpoint")
    if version != CHECKPOINT_VERSION:
        raise CheckpointError(
            f"checkpoint version {version} unsupported "
            f"(expected {CHECKPOINT_VERSION})")
    if "vertex" not in ply:
        raise CheckpointError(f"{path} has no vertex element")
    data = ply["vertex"]["data"]
    fields = data.dtype.names
    n_id = sum(1 for f in fields if f.startswith("id_"))
    if n_id != IDENTITY_DIM:
        raise CheckpointError(
            f"checkpoint has {n_id} identity attributes, expected {IDENTITY_DIM}")
    n_sh = sum(1 for f in fields if f.startswith("sh_"))
    if sh_degree is None:
        k = n_sh // 3
        sh_degree = int(np.sqrt(k)) - 1
    if n_sh != 3 * (sh_degree + 1) ** 2:
        raise CheckpointError(
            f"checkpoint has {n_sh} sh attributes, expected "
            f"{3 * (sh_degree + 1) ** 2} for degree {sh_degree}")
    names = _checkpoint_attr_names(sh_degree)
    missing = [nm for nm in names if nm not in fields]
    if missing:
        raise CheckpointError(f"checkpoint missing attributes: {missing[:4]}")
    n = ply["vertex"]["count"]
    k = (sh_degree + 1) ** 2
    stack = np.stack([data[nm] for nm in names], axis=1) if n else \
        np.zeros((0, len(names)), dtype=data.dtype[0] if fields else np.float64)
    model = SplatModel(
        centers=stack[:, 0:3],
        quats=stack[:, 3:7],
        log_scales=stack[:, 7:9],
        opacity_logits=stack[:, 9],
        sh=stack[:, 10:10 + 3 * k].reshape(n, k, 3),
        identities=stack[:, 10 + 3 * k:],
        sh_degree=sh_degree)

    sidecar = path.with_suffix(path.suffix + ".head.json")
    if not sidecar.exists():
        raise CheckpointError(f"head sidecar not found: {sidecar}")
    meta = json.loads(sidecar.read_text())
    if meta.get("version") != CHECKPOINT_VERSION:
        raise CheckpointError("head sidecar version mismatch")
    weights = np.asarray(meta["weights"], dtype=np.float64)
    biases = np.asarray(meta["biases"], dtype=np.float64)
    if weights.shape != (NUM_CLASSES, IDENTITY_DIM) or biases.shape != (NUM_CLASSES,):
        raise CheckpointError("head sidecar has wrong shapes")
    return model, SegHead(weights, biases)


# ---------------------------------------------------------------- meshes

def export_mesh(mesh, path):
    """Write a triangle mesh as a binary polygon file."""
    verts = np.asarray(mesh.vertices, dtype=np.float32).reshape(-1, 3)
    tris = np.asarray(mesh.triangles, dtype=np.int32).reshape(-1, 3)
    if tris.size and (tris.min() < 0 or tris.max() >= len(verts)):
        raise SceneFormatError("mesh has out-of-range triangle indices")
    if not np.all(np.isfinite(verts)):
        raise SceneFormatError("mesh has non-finite vertices")
    with open(path, "wb") as f:
        _write_ply_header(
            f, "binary_little_endian", ["disksplat mesh"],
            [("vertex", len(verts), ["float x", "float y", "float z"]),
             ("face", len(tris), ["list uchar int vertex_indices"])])
        f.write(verts.astype("<f4").tobytes())
        if len(tris):
            face = np.zeros(len(tris),
                            dtype=np.dtype([("n", "u1"), ("idx", "<i4", (3,))]))
            face["n"] = 3
            face["idx"] = tris
            f.write(face.tobytes())


def load_mesh(path):
    from .tsdf import TriangleMesh

    ply = read_ply(path)
    if "vertex" not in ply:
        raise SceneFormatError(f"{path} has no vertex element")
    vd = ply["vertex"]["data"]
    verts = np.stack([vd["x"], vd["y"], vd["z"]], axis=1).astype(np.float64)
    tris = np.zeros((0, 3), dtype=np.int64)
    if "face" in ply and ply["face"]["count"]:
        rows = ply["face"]["lists"]["vertex_indices"]
        tris = np.stack([r.astype(np.int64) for r in rows])
        if tris.shape[1] != 3:
            raise SceneFormatError("mesh faces must be triangles")
    return TriangleMesh(vertices=verts, triangles=tris)


def load_points(path):
    """Point cloud positions (N, 3) and optional colors (N, 3) in [0,1]."""
    ply = read_ply(path)
    if "vertex" not in ply:
        raise SceneFormatError(f"{path} has no vertex element")
    vd = ply["vertex"]["data"]
    pts = np.stack([vd["x"], vd["y"], vd["z"]], axis=1).astype(np.float64)
    names = vd.dtype.names
    colors = None
    if all(c in names for c in ("red", "green", "blue")):
        colors = np.stack([vd["red"], vd["green"], vd["blue"]],
                          axis=1).astype(np.float64) / 255.0
    return pts, colors


def save_points(path, points, colors=None):
    pts = np.asarray(points, dtype=np.float32).reshape(-1, 3)
    props = ["float x", "float y", "float z"]
    cols = None
    if colors is not None:
        cols = np.clip(np.rint(np.asarray(colors) * 255.0), 0, 255).astype(np.uint8)
        props += ["uchar red", "uchar green", "uchar blue"]
    with open(path, "wb") as f:
        _write_ply_header(f, "binary_little_endian", [],
                          [("vertex", len(pts), props)])
        if cols is None:
            f.write(pts.astype("<f4").tobytes())
        else:
            rec = np.zeros(len(pts), dtype=np.dtype(
                [("x", "<f4"), ("y", "<f4"), ("z", "<f4"),
                 ("red", "u1"), ("green", "u1"), ("blue", "u1")]))
            rec["x"], rec["y"], rec["z"] = pts[:, 0], pts[:, 1], pts[:, 2]
            rec["red"], rec["green"], rec["blue"] = cols[:, 0], cols[:, 1], cols[:, 2]
            f.write(rec.tobytes())
