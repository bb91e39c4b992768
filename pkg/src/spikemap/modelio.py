"""Interchange format: JSON manifest plus a raw float64 blob.

The manifest is plain JSON describing structure and pointing into the blob
via byte offsets; the blob is the concatenation of all tensors as raw
little-endian IEEE-754 float64 in row-major order, each tensor 8-byte aligned.
The 64-bit blob checksum is the first 8 bytes of the blob's SHA-256, hex
encoded. Anything that can write JSON and raw doubles can produce models,
datasets, and converted networks for this package.

Manifests carry a `kind` of: relu_network, dataset, scaled_network, or
snn_network.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .convert import (
    SnnConv,
    SnnDense,
    SnnFlatten,
    SnnNetwork,
    SnnPool,
    SnnReadout,
)
from .layers import BatchNorm, Conv2d, Dense, Flatten, Pool2d, StructureError
from .network import ReluNetwork
from .preprocess import Hyper, ScaledNetwork
from .tensor import Tensor, TensorError

FORMAT_VERSION = 1


class ModelIOError(ValueError):
    """Malformed manifest/blob pair."""


def blob_checksum(blob: bytes) -> str:
    return hashlib.sha256(blob).hexdigest()[:16]


class _BlobWriter:
    def __init__(self):
        self.chunks: list[bytes] = []
        self.size = 0

    def put(self, arr: np.ndarray) -> dict:
        arr = np.ascontiguousarray(arr, dtype="<f8")
        ref = {"offset": self.size, "shape": list(arr.shape)}
        raw = arr.tobytes()
        self.chunks.append(raw)
        self.size += len(raw)
        return ref

    def bytes(self) -> bytes:
        return b"".join(self.chunks)


class _BlobReader:
    def __init__(self, blob: bytes):
        self.blob = blob
        self.seen: list[tuple[int, int]] = []

    def get(self, ref: dict, what: str) -> np.ndarray:
        try:
            offset = int(ref["offset"])
            shape = tuple(int(s) for s in ref["shape"])
        except (KeyError, TypeError) as exc:
            raise ModelIOError(f"{what}: malformed tensor reference") from exc
        count = int(np.prod(shape)) if shape else 1
        end = offset + 8 * count
        if offset % 8 or offset < 0 or end > len(self.blob):
            raise ModelIOError(
                f"{what}: offset {offset} (+{8 * count} bytes) invalid for "
                f"blob of {len(self.blob)} bytes"
            )
        for a, b in self.seen:
            if offset < b and a < end:
                raise ModelIOError(f"{what}: tensor overlaps another at offset {offset}")
        self.seen.append((offset, end))
        arr = np.frombuffer(self.blob, dtype="<f8", count=count, offset=offset)
        return arr.reshape(shape).astype(np.float64)


def _write_pair(manifest: dict, blob: bytes, manifest_path, blob_path):
    manifest = dict(manifest)
    manifest["format_version"] = FORMAT_VERSION
    manifest["blob_size"] = len(blob)
    manifest["blob_checksum"] = blob_checksum(blob)
    Path(blob_path).write_bytes(blob)
    Path(manifest_path).write_text(json.dumps(manifest, indent=1, sort_keys=True))


def _read_pair(manifest_path, blob_path, kind: str) -> tuple[dict, _BlobReader]:
    try:
        manifest = json.loads(Path(manifest_path).read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise ModelIOError(f"cannot read manifest {manifest_path}: {exc}") from exc
    try:
        blob = Path(blob_path).read_bytes()
    except OSError as exc:
        raise ModelIOError(f"cannot read blob {blob_path}: {exc}") from exc
    version = manifest.get("format_version")
    if version != FORMAT_VERSION:
        raise ModelIOError(f"unsupported format_version {version!r}")
    if manifest.get("kind") != kind:
        raise ModelIOError(f"expected kind {kind!r}, found {manifest.get('kind')!r}")
    if manifest.get("blob_checksum") != blob_checksum(blob):
        raise ModelIOError("blob checksum mismatch (truncated or corrupted blob?)")
    return manifest, _BlobReader(blob)


# -- ReLU networks ----------------------------------------------------------

def _layer_to_manifest(lay, writer: _BlobWriter) -> dict:
    if isinstance(lay, Dense):
        return {"kind": "dense", "relu": lay.relu,
                "weights": writer.put(lay.weights), "bias": writer.put(lay.bias)}
    if isinstance(lay, Conv2d):
        return {"kind": "conv2d", "relu": lay.relu, "stride": lay.stride,
                "padding": list(lay.padding),
                "weights": writer.put(lay.weights), "bias": writer.put(lay.bias)}
    if isinstance(lay, BatchNorm):
        return {"kind": "batchnorm", "position": lay.position, "epsilon": lay.epsilon,
                "mu": writer.put(lay.mu), "sigma_sq": writer.put(lay.sigma_sq),
                "gamma": writer.put(lay.gamma), "beta": writer.put(lay.beta)}
    if isinstance(lay, Pool2d):
        entry = {"kind": "pool", "window": lay.window, "stride": lay.stride}
        if lay.modes is not None:
            entry["modes"] = writer.put(lay.modes.astype(np.float64))
        return entry
    if isinstance(lay, Flatten):
        return {"kind": "flatten"}
    raise ModelIOError(f"cannot serialize layer {type(lay).__name__}")


def _layer_from_manifest(entry: dict, reader: _BlobReader, index: int):
    kind = entry.get("kind")
    what = f"layer {index}"
    try:
        if kind == "dense":
            return Dense(weights=reader.get(entry["weights"], f"{what} weights"),
                         bias=reader.get(entry["bias"], f"{what} bias"),
                         relu=bool(entry["relu"]))
        if kind == "conv2d":
            return Conv2d(weights=reader.get(entry["weights"], f"{what} weights"),
                          bias=reader.get(entry["bias"], f"{what} bias"),
                          stride=int(entry["stride"]),
                          padding=tuple(entry["padding"]),
                          relu=bool(entry["relu"]))
        if kind == "batchnorm":
            return BatchNorm(mu=reader.get(entry["mu"], f"{what} mu"),
                             sigma_sq=reader.get(entry["sigma_sq"], f"{what} sigma_sq"),
                             gamma=reader.get(entry["gamma"], f"{what} gamma"),
                             beta=reader.get(entry["beta"], f"{what} beta"),
                             epsilon=float(entry["epsilon"]),
                             position=str(entry["position"]))
        if kind == "pool":
            modes = None
            if "modes" in entry:
                modes = reader.get(entry["modes"], f"{what} modes").astype(np.int64)
            return Pool2d(window=int(entry["window"]), stride=int(entry["stride"]),
                          modes=modes)
        if kind == "flatten":
            return Flatten()
    except (StructureError, TensorError, KeyError, TypeError) as exc:
        raise ModelIOError(f"{what} ({kind}): {exc}") from exc
    raise ModelIOError(f"{what}: unknown layer kind {kind!r}")


def save_model(net: ReluNetwork, manifest_path, blob_path):
    """Write a network as manifest + blob; the pair round-trips bit-exactly."""
    writer = _BlobWriter()
    manifest = {
        "kind": "relu_network",
        "input_shape": list(net.input_shape),
        "input_range": list(net.input_range),
        "layers": [_layer_to_manifest(l, writer) for l in net.layers],
    }
    _write_pair(manifest, writer.bytes(), manifest_path, blob_path)


def load_model(manifest_path, blob_path) -> ReluNetwork:
    manifest, reader = _read_pair(manifest_path, blob_path, "relu_network")
    layers = [_layer_from_manifest(e, reader, i)
              for i, e in enumerate(manifest.get("layers", []))]
    try:
        return ReluNetwork(
            layers=layers,
            input_shape=tuple(manifest["input_shape"]),
            input_range=tuple(manifest["input_range"]),
        )
    except (StructureError, KeyError) as exc:
        raise ModelIOError(f"invalid network: {exc}") from exc


# -- datasets ---------------------------------------------------------------

@dataclass
class Dataset:
    images: np.ndarray                 # [N, *input_shape]
    labels: np.ndarray | None = None   # [N] int, optional

    def __len__(self):
        return self.images.shape[0]

    def records(self) -> list[tuple[Tensor, int | None]]:
        out = []
        for i in range(len(self)):
            label = int(self.labels[i]) if self.labels is not None else None
            out.append((Tensor.from_array(self.images[i]), label))
        return out


def save_dataset(ds: Dataset, manifest_path, blob_path):
    writer = _BlobWriter()
    manifest = {
        "kind": "dataset",
        "input_shape": list(ds.images.shape[1:]),
        "n_records": int(ds.images.shape[0]),
        "images": writer.put(ds.images),
    }
    if ds.labels is not None:
        manifest["labels"] = writer.put(np.asarray(ds.labels, dtype=np.float64))
    _write_pair(manifest, writer.bytes(), manifest_path, blob_path)


def load_dataset(manifest_path, blob_path) -> Dataset:
    manifest, reader = _read_pair(manifest_path, blob_path, "dataset")
    images = reader.get(manifest["images"], "images")
    shape = tuple(manifest["input_shape"])
    n = int(manifest["n_records"])
    if images.shape != (n,) + shape:
        raise ModelIOError(
            f"images shaped {images.shape}, expected {(n,) + shape}"
        )
    for i in range(n):
        if not np.all(np.isfinite(images[i])):
            raise ModelIOError(f"record {i}: non-finite values")
    labels = None
    if "labels" in manifest:
        raw = reader.get(manifest["labels"], "labels")
        if raw.shape != (n,):
            raise ModelIOError(f"labels shaped {raw.shape}, expected ({n},)")
        labels = raw.astype(np.int64)
    return Dataset(images=images, labels=labels)


# -- scaled networks --------------------------------------------------------

def save_scaled(scaled: ScaledNetwork, manifest_path, blob_path):
    writer = _BlobWriter()
    manifest = {
        "kind": "scaled_network",
        "input_shape": list(scaled.net.input_shape),
        "input_range": list(scaled.net.input_range),
        "source_range": list(scaled.source_range),
        "hyper": {"delta": scaled.hyper.delta, "b_low": scaled.hyper.b_low,
                  "zeta": scaled.hyper.zeta, "window_floor": scaled.hyper.window_floor},
        "layer_max": scaled.layer_max,
        "layers": [_layer_to_manifest(l, writer) for l in scaled.net.layers],
        "scale_factors": [writer.put(f) for f in scaled.scale_factors],
    }
    _write_pair(manifest, writer.bytes(), manifest_path, blob_path)


def load_scaled(manifest_path, blob_path) -> ScaledNetwork:
    manifest, reader = _read_pair(manifest_path, blob_path, "scaled_network")
    layers = [_layer_from_manifest(e, reader, i)
              for i, e in enumerate(manifest.get("layers", []))]
    try:
        net = ReluNetwork(
            layers=layers,
            input_shape=tuple(manifest["input_shape"]),
            input_range=tuple(manifest["input_range"]),
        )
        hyper = Hyper(**manifest["hyper"])
    except (StructureError, ValueError, KeyError) as exc:
        raise ModelIOError(f"invalid scaled network: {exc}") from exc
    factors = [reader.get(ref, f"scale_factors[{i}]")
               for i, ref in enumerate(manifest.get("scale_factors", []))]
    layer_max = manifest.get("layer_max")
    return ScaledNetwork(
        net=net,
        scale_factors=factors,
        hyper=hyper,
        source_range=tuple(manifest["source_range"]),
        layer_max=list(layer_max) if layer_max is not None else None,
    )


# -- spiking networks -------------------------------------------------------

def save_snn(snn: SnnNetwork, manifest_path, blob_path):
    writer = _BlobWriter()
    entries = []
    for lay in snn.layers:
        if isinstance(lay, SnnDense):
            entries.append({
                "kind": "dense", "t_start": lay.t_start,
                "t_min": lay.t_min, "t_max": lay.t_max,
                "weights": writer.put(lay.weights), "theta": writer.put(lay.theta),
                "alpha": writer.put(lay.alpha),
            })
        elif isinstance(lay, SnnConv):
            entries.append({
                "kind": "conv2d", "t_start": lay.t_start,
                "t_min": lay.t_min, "t_max": lay.t_max,
                "stride": lay.stride, "padding": list(lay.padding),
                "in_hw": list(lay.in_hw),
                "kernel": writer.put(lay.kernel), "jscale": writer.put(lay.jscale),
                "theta": writer.put(lay.theta), "alpha": writer.put(lay.alpha),
                "wsum": writer.put(lay.wsum),
            })
        elif isinstance(lay, SnnPool):
            entries.append({
                "kind": "pool", "window": lay.window, "stride": lay.stride,
                "theta": lay.theta, "t_min": lay.t_min, "t_max": lay.t_max,
                "modes": writer.put(lay.modes.astype(np.float64)),
                "k": writer.put(lay.k),
            })
        elif isinstance(lay, SnnFlatten):
            entries.append({"kind": "flatten"})
        elif isinstance(lay, SnnReadout):
            entries.append({
                "kind": "readout", "t_min": lay.t_min, "t_max": lay.t_max,
                "weights": writer.put(lay.weights), "alpha": writer.put(lay.alpha),
            })
        else:
            raise ModelIOError(f"cannot serialize snn layer {type(lay).__name__}")
    manifest = {
        "kind": "snn_network",
        "variant": snn.variant,
        "input_shape": list(snn.input_shape),
        "t_input": list(snn.t_input),
        "layers": entries,
    }
    _write_pair(manifest, writer.bytes(), manifest_path, blob_path)


def load_snn(manifest_path, blob_path) -> SnnNetwork:
    manifest, reader = _read_pair(manifest_path, blob_path, "snn_network")
    layers = []
    for i, e in enumerate(manifest.get("layers", [])):
        kind = e.get("kind")
        what = f"snn layer {i}"
        try:
            if kind == "dense":
                layers.append(SnnDense(
                    weights=reader.get(e["weights"], what),
                    theta=reader.get(e["theta"], what),
                    alpha=reader.get(e["alpha"], what),
                    t_start=float(e["t_start"]), t_min=float(e["t_min"]),
                    t_max=float(e["t_max"])))
            elif kind == "conv2d":
                layers.append(SnnConv(
                    kernel=reader.get(e["kernel"], what),
                    jscale=reader.get(e["jscale"], what),
                    theta=reader.get(e["theta"], what),
                    alpha=reader.get(e["alpha"], what),
                    stride=int(e["stride"]), padding=tuple(e["padding"]),
                    in_hw=tuple(e["in_hw"]),
                    t_start=float(e["t_start"]), t_min=float(e["t_min"]),
                    t_max=float(e["t_max"]),
                    wsum=reader.get(e["wsum"], what)))
            elif kind == "pool":
                layers.append(SnnPool(
                    window=int(e["window"]), stride=int(e["stride"]),
                    modes=reader.get(e["modes"], what).astype(np.int64),
                    k=reader.get(e["k"], what), theta=float(e["theta"]),
                    t_min=float(e["t_min"]), t_max=float(e["t_max"])))
            elif kind == "flatten":
                layers.append(SnnFlatten())
            elif kind == "readout":
                layers.append(SnnReadout(
                    weights=reader.get(e["weights"], what),
                    alpha=reader.get(e["alpha"], what),
                    t_min=float(e["t_min"]), t_max=float(e["t_max"])))
            else:
                raise ModelIOError(f"{what}: unknown kind {kind!r}")
        except (KeyError, TypeError) as exc:
            raise ModelIOError(f"{what} ({kind}): {exc}") from exc
    return SnnNetwork(
        layers=layers,
        input_shape=tuple(manifest["input_shape"]),
        variant=str(manifest["variant"]),
        t_input=tuple(manifest["t_input"]),
    )
