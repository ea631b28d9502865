"""Binary tensor files, parameter checkpoints and COCO keypoint JSON."""
from __future__ import annotations

import json
import os
import struct
from pathlib import Path

import numpy as np

from .core import COCO_KEYPOINT_NAMES, NUM_KEYPOINTS, GtInstance, PoseSet
from .errors import HeaderError, NonFiniteError, ParseError, PayloadLengthError

MAGIC = b"LGCT"
VERSION = 1
_DTYPES = {0: np.dtype("<f8"), 1: np.dtype("<f4")}
_CODES = {np.dtype("<f8"): 0, np.dtype("<f4"): 1}


def encode_tensor(tensor, dtype="f64") -> bytes:
    arr = np.asarray(tensor)
    target = np.dtype("<f4") if dtype in ("f32", np.float32) else np.dtype("<f8")
    arr = np.array(arr, dtype=target, order="C")  # keeps 0-d shapes, unlike ascontiguousarray
    if not np.all(np.isfinite(arr)):
        raise NonFiniteError("tensor contains non-finite values")
    if arr.ndim > 255:
        raise HeaderError("too many dimensions")
    head = MAGIC + struct.pack("<IBB", VERSION, _CODES[target], arr.ndim)
    head += struct.pack(f"<{arr.ndim}Q", *arr.shape)
    return head + arr.tobytes(order="C")


def decode_tensor(buf: bytes) -> np.ndarray:
    if len(buf) < 10 or buf[:4] != MAGIC:
        raise HeaderError("bad magic, not an LGCT tensor")
    version, code, ndim = struct.unpack_from("<IBB", buf, 4)
    if version != VERSION:
        raise HeaderError(f"unsupported version {version}")
    if code not in _DTYPES:
        raise HeaderError(f"unknown dtype code {code}")
    off = 10
    if len(buf) < off + 8 * ndim:
        raise HeaderError("truncated dimension table")
    dims = struct.unpack_from(f"<{ndim}Q", buf, off)
    off += 8 * ndim
    dt = _DTYPES[code]
    expected = int(np.prod(dims, dtype=np.int64)) * dt.itemsize
    if len(buf) - off != expected:
        raise PayloadLengthError(
            f"payload length mismatch: header implies {expected} bytes, found {len(buf) - off}")
    arr = np.frombuffer(buf, dtype=dt, offset=off).reshape(dims)
    if not np.all(np.isfinite(arr)):
        raise NonFiniteError("tensor payload contains non-finite values")
    return arr.astype(np.float64) if code == 1 else arr.copy()


def save_tensor(tensor, path, dtype="f64"):
    Path(path).write_bytes(encode_tensor(tensor, dtype))


def load_tensor(path) -> np.ndarray:
    return decode_tensor(Path(path).read_bytes())


def save_named_tensors(tensors: dict, directory, manifest: dict):
    """Write one tensor file per entry plus ``manifest.json``."""
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    for name in sorted(tensors):
        save_tensor(tensors[name], d / f"{name}.lgct")
    body = dict(manifest, tensors={k: list(np.shape(v)) for k, v in sorted(tensors.items())})
    (d / "manifest.json").write_text(json.dumps(body, indent=2, sort_keys=True) + "\n")


def load_named_tensors(directory):
    d = Path(directory)
    manifest = json.loads((d / "manifest.json").read_text())
    tensors = {name: load_tensor(d / f"{name}.lgct") for name in manifest["tensors"]}
    return tensors, manifest


def write_json_atomic(obj, path):
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_text(json.dumps(obj, indent=1, sort_keys=True) + "\n")
    os.replace(tmp, path)


# -- COCO keypoints ---------------------------------------------------------

def _record_name(rec, i):
    return f"annotation #{i} (id={rec.get('id', '?')})" if isinstance(rec, dict) else f"annotation #{i}"


def parse_gt_annotation(rec, i=0) -> GtInstance:
    if not isinstance(rec, dict):
        raise ParseError(f"{_record_name(rec, i)}: not an object")
    for key in ("keypoints", "area", "image_id"):
        if key not in rec:
            raise ParseError(f"{_record_name(rec, i)}: missing field '{key}'")
    kps = rec["keypoints"]
    if not isinstance(kps, list) or len(kps) != 3 * NUM_KEYPOINTS:
        raise ParseError(f"{_record_name(rec, i)}: keypoints must have 51 values")
    try:
        return GtInstance(np.array(kps, dtype=np.float64).reshape(NUM_KEYPOINTS, 3),
                          float(rec["area"]), int(rec.get("id", i)))
    except (TypeError, ValueError) as exc:
        raise ParseError(f"{_record_name(rec, i)}: {exc}") from exc


def load_coco_keypoints(path):
    """Return ``[(image_id, [GtInstance, ...]), ...]`` sorted by image id.

    Images listed under ``images`` but without annotations appear with an
    empty instance list.
    """
    try:
        doc = json.loads(Path(path).read_text())
    except json.JSONDecodeError as exc:
        raise ParseError(f"{path}: invalid JSON ({exc})") from exc
    if isinstance(doc, list):
        doc = {"annotations": doc}
    anns = doc.get("annotations")
    if anns is None:
        raise ParseError(f"{path}: missing 'annotations'")
    by_image = {int(im["id"]): [] for im in doc.get("images", [])}
    for i, rec in enumerate(anns):
        inst = parse_gt_annotation(rec, i)
        by_image.setdefault(int(rec["image_id"]), []).append(inst)
    return sorted(by_image.items())


def gt_to_coco(images) -> dict:
    """Build a COCO keypoint document from ``[(image_id, gts, (h, w)), ...]``."""
    out_images, anns = [], []
    for image_id, gts, (h, w) in images:
        out_images.append({"id": int(image_id), "height": int(h), "width": int(w)})
        for g in gts:
            x0, y0, x1, y1 = g.bbox()
            anns.append({
                "id": int(g.id), "image_id": int(image_id), "category_id": 1,
                "keypoints": [float(v) for v in g.keypoints.reshape(-1)],
                "num_keypoints": g.num_visible, "area": g.area,
                "bbox": [x0, y0, x1 - x0, y1 - y0], "iscrowd": 0,
            })
    return {
        "images": out_images,
        "annotations": anns,
        "categories": [{"id": 1, "name": "person", "keypoints": list(COCO_KEYPOINT_NAMES)}],
    }


def results_to_coco(per_image) -> list:
    """Serialise ``[(image_id, PoseSet), ...]`` into the COCO results array.

    Keypoints with score <= 0 are written as zeros.  The decoded center is
    kept as an extra ``center`` field.
    """
    out = []
    for image_id, poses in per_image:
        for n in range(len(poses)):
            kp = np.array(poses.keypoints[n])
            kp[kp[:, 2] <= 0] = 0.0
            out.append({
                "image_id": int(image_id),
                "category_id": 1,
                "keypoints": [float(v) for v in kp.reshape(-1)],
                "score": float(poses.scores[n]),
                "center": [float(v) for v in poses.centers[n]],
            })
    return out


def save_results(per_image, path):
    write_json_atomic(results_to_coco(per_image), path)


def load_results(path) -> dict:
    """Parse a results file into ``{image_id: PoseSet}``."""
    try:
        doc = json.loads(Path(path).read_text())
    except json.JSONDecodeError as exc:
        raise ParseError(f"{path}: invalid JSON ({exc})") from exc
    if not isinstance(doc, list):
        raise ParseError(f"{path}: results must be a JSON array")
    grouped = {}
    for i, rec in enumerate(doc):
        where = f"{path}: result #{i}"
        if not isinstance(rec, dict):
            raise ParseError(f"{where}: not an object")
        for key in ("image_id", "keypoints", "score"):
            if key not in rec:
                raise ParseError(f"{where}: missing field '{key}'")
        if len(rec["keypoints"]) != 3 * NUM_KEYPOINTS:
            raise ParseError(f"{where}: keypoints must have 51 values")
        kp = np.array(rec["keypoints"], dtype=np.float64).reshape(NUM_KEYPOINTS, 3)
        center = rec.get("center")
        if center is None:
            center = [*kp[:, :2].mean(axis=0), rec["score"]]
        grouped.setdefault(int(rec["image_id"]), []).append((center, kp, float(rec["score"])))
    out = {}
    for image_id, items in sorted(grouped.items()):
        out[image_id] = PoseSet(np.array([c for c, _, _ in items]),
                                np.array([k for _, k, _ in items]),
                                np.array([s for _, _, s in items]))
    return out
