"""File formats and serialization.

All JSON files are written atomically (temp file + rename) with sorted
keys, so identical inputs produce byte-identical files. Heatmaps use a
small binary format: a 16-byte header (magic ``HMAP``, then little-endian
u32 count, width, height) followed by ``count * width * height`` float32
values in row-major order.
"""

from __future__ import annotations

import json
import os
import struct
from pathlib import Path

import numpy as np

from .crf import PairwiseSet, UnaryPrediction
from .evaluation import EvalReport
from .model import DeformParams, ShapeModel3D
from .training import TrainSample

__all__ = [
    "save_json",
    "load_json",
    "save_shape_model",
    "load_shape_model",
    "save_unary",
    "load_unary",
    "save_pairwise",
    "load_pairwise",
    "save_deform_params",
    "load_deform_params",
    "save_ground_truth",
    "load_ground_truth",
    "save_prediction",
    "load_prediction",
    "save_manifest",
    "load_manifest",
    "write_heatmaps",
    "read_heatmaps",
    "save_eval_report",
    "write_ced_csv",
    "write_dataset",
    "load_dataset",
]

_HEATMAP_MAGIC = b"HMAP"


def _atomic_write_bytes(path: Path, payload: bytes) -> None:
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_bytes(payload)
    os.replace(tmp, path)


def save_json(obj, path) -> None:
    path = Path(path)
    text = json.dumps(obj, sort_keys=True, indent=2) + "\n"
    _atomic_write_bytes(path, text.encode("utf-8"))


def load_json(path):
    with open(path, "r", encoding="utf-8") as fh:
        return json.load(fh)


def save_shape_model(model: ShapeModel3D, path) -> None:
    save_json(
        {
            "n": model.num_landmarks,
            "k": model.num_bases,
            "mean": model.mean_shape.tolist(),
            "bases": model.bases.tolist(),
        },
        path,
    )


def load_shape_model(path) -> ShapeModel3D:
    doc = load_json(path)
    mean = np.asarray(doc["mean"], dtype=float)
    bases = np.asarray(doc["bases"], dtype=float)
    if bases.size == 0:
        bases = np.zeros((0,) + mean.shape)
    model = ShapeModel3D(mean_shape=mean, bases=bases)
    if model.num_landmarks != doc["n"] or model.num_bases != doc["k"]:
        raise ValueError(f"{path}: declared n/k do not match the stored arrays")
    return model


def save_unary(unaries: UnaryPrediction, path) -> None:
    save_json(
        {
            "n": unaries.num_landmarks,
            "landmarks": [
                {"mu": mu.tolist(), "sigma": sig.tolist()}
                for mu, sig in zip(unaries.means, unaries.covariances)
            ],
        },
        path,
    )


def load_unary(path) -> UnaryPrediction:
    doc = load_json(path)
    marks = doc["landmarks"]
    if len(marks) != doc["n"]:
        raise ValueError(f"{path}: declared n does not match the landmark list")
    means = np.array([m["mu"] for m in marks], dtype=float)
    covs = np.array([m["sigma"] for m in marks], dtype=float)
    return UnaryPrediction(means=means, covariances=covs)


def save_pairwise(pairs: PairwiseSet, path) -> None:
    save_json(
        {
            "n": pairs.num_landmarks,
            "pairs": [
                {"i": int(i), "j": int(j), "l": fac.tolist()}
                for (i, j), fac in zip(pairs.indices, pairs.factors)
            ],
        },
        path,
    )


def load_pairwise(path) -> PairwiseSet:
    doc = load_json(path)
    entries = doc["pairs"]
    indices = np.array([[e["i"], e["j"]] for e in entries], dtype=int)
    factors = np.array([e["l"] for e in entries], dtype=float)
    return PairwiseSet(doc["n"], indices, factors)


def save_deform_params(params: DeformParams, path) -> None:
    save_json(deform_params_dict(params), path)


def deform_params_dict(params: DeformParams) -> dict:
    return {
        "sx": params.scale_x,
        "sy": params.scale_y,
        "pitch": params.pitch,
        "yaw": params.yaw,
        "roll": params.roll,
        "q": params.shape_coeffs.tolist(),
    }


def deform_params_from_dict(doc: dict) -> DeformParams:
    return DeformParams(
        doc["sx"],
        doc["sy"],
        doc["pitch"],
        doc["yaw"],
        doc["roll"],
        np.asarray(doc["q"], dtype=float),
    )


def load_deform_params(path) -> DeformParams:
    return deform_params_from_dict(load_json(path))


def save_ground_truth(landmarks: np.ndarray, bbox: tuple[float, float], path) -> None:
    pts = np.asarray(landmarks, dtype=float).reshape(-1, 2)
    save_json(
        {
            "n": pts.shape[0],
            "landmarks": pts.tolist(),
            "bbox": [float(bbox[0]), float(bbox[1])],
        },
        path,
    )


def load_ground_truth(path) -> tuple[np.ndarray, tuple[float, float]]:
    doc = load_json(path)
    pts = np.asarray(doc["landmarks"], dtype=float)
    if pts.shape != (doc["n"], 2):
        raise ValueError(f"{path}: landmark array does not match declared n")
    w, h = doc["bbox"]
    return pts, (float(w), float(h))


def save_prediction(
    landmarks: np.ndarray,
    params: DeformParams | None,
    iters: int,
    converged: bool,
    energy_trace: list[float],
    path,
) -> None:
    save_json(
        {
            "landmarks": np.asarray(landmarks, dtype=float).reshape(-1, 2).tolist(),
            "zeta": None if params is None else deform_params_dict(params),
            "iters": int(iters),
            "converged": bool(converged),
            "energy_trace": [float(e) for e in energy_trace],
        },
        path,
    )


def load_prediction(path) -> dict:
    doc = load_json(path)
    doc["landmarks"] = np.asarray(doc["landmarks"], dtype=float)
    if doc.get("zeta") is not None:
        doc["zeta"] = deform_params_from_dict(doc["zeta"])
    return doc


def save_manifest(ids: list[str], num_landmarks: int, path, spec: dict | None = None) -> None:
    doc = {"ids": list(ids), "n": int(num_landmarks)}
    if spec is not None:
        doc["spec"] = spec
    save_json(doc, path)


def load_manifest(path) -> dict:
    doc = load_json(path)
    if "ids" not in doc or "n" not in doc:
        raise ValueError(f"{path}: manifest must declare 'ids' and 'n'")
    return doc


def write_heatmaps(maps: np.ndarray, path) -> None:
    """Write an (N, W, H) stack of heatmaps to the binary HMAP format."""
    arr = np.asarray(maps, dtype=np.float32)
    if arr.ndim != 3:
        raise ValueError(f"expected an (N, W, H) stack, got shape {arr.shape}")
    count, width, height = arr.shape
    header = _HEATMAP_MAGIC + struct.pack("<III", count, width, height)
    _atomic_write_bytes(Path(path), header + arr.tobytes(order="C"))


def read_heatmaps(path) -> np.ndarray:
    raw = Path(path).read_bytes()
    if len(raw) < 16 or raw[:4] != _HEATMAP_MAGIC:
        raise ValueError(f"{path}: not a heatmap file (bad magic)")
    count, width, height = struct.unpack("<III", raw[4:16])
    expected = 16 + 4 * count * width * height
    if len(raw) != expected:
        raise ValueError(f"{path}: expected {expected} bytes, found {len(raw)}")
    data = np.frombuffer(raw, dtype="<f4", offset=16)
    return data.reshape(count, width, height).astype(float)


def save_eval_report(report: EvalReport, ids: list[str], path) -> None:
    save_json(
        {
            "ids": list(ids),
            "per_sample_nme": report.per_sample_nme,
            "auc": report.auc,
            "failure_rate": report.failure_rate,
            "threshold": report.threshold,
            "ced": [[t, f] for t, f in report.ced.pairs()],
        },
        path,
    )


def write_ced_csv(curve, path) -> None:
    lines = ["threshold,fraction"]
    lines += [f"{t!r},{f!r}" for t, f in curve.pairs()]
    _atomic_write_bytes(Path(path), ("\n".join(lines) + "\n").encode("utf-8"))


def write_dataset(directory, generated, spec_doc: dict | None = None) -> None:
    """Write generated samples as a dataset directory.

    Layout: ``manifest.json`` plus, per sample id, ``<id>.unary.json``,
    ``<id>.gt.json`` and ``<id>.zeta.json``.
    """
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    ids = []
    for item in generated:
        sid = item.sample.id
        ids.append(sid)
        save_unary(item.sample.unaries, directory / f"{sid}.unary.json")
        save_ground_truth(item.sample.y_gt, item.bbox, directory / f"{sid}.gt.json")
        save_deform_params(item.true_params, directory / f"{sid}.zeta.json")
    n = generated[0].sample.unaries.num_landmarks if generated else 0
    save_manifest(ids, n, directory / "manifest.json", spec=spec_doc)


def load_dataset(directory):
    """Load a dataset directory.

    Returns ``(samples, bboxes, manifest)`` where ``samples`` are
    :class:`TrainSample` values in manifest order and ``bboxes`` the
    matching ground-truth boxes.
    """
    directory = Path(directory)
    manifest = load_manifest(directory / "manifest.json")
    samples: list[TrainSample] = []
    bboxes: list[tuple[float, float]] = []
    for sid in manifest["ids"]:
        unaries = load_unary(directory / f"{sid}.unary.json")
        gt, bbox = load_ground_truth(directory / f"{sid}.gt.json")
        samples.append(TrainSample(unaries=unaries, y_gt=gt.reshape(-1), id=sid))
        bboxes.append(bbox)
    return samples, bboxes, manifest
