"""Dataset directory format.

    <dir>/manifest.json       class names, records, split, shapes, checksums
    <dir>/opt/shard_NNNNN.bin raw little-endian float32, (n, 3, H, W)
    <dir>/sar/shard_NNNNN.bin raw little-endian float32, (n, C_s, H, W)
    <dir>/masks/shard_NNNNN.bin optional cloud alpha, (n, H, W)
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from ..errors import ChecksumError, DataError, MissingFileError, VersionMismatchError
from .dataset import CLOUD_KINDS, SPLITS, PairedDataset

FORMAT_VERSION = 1
SHARD_SIZE = 256
_DTYPE = np.dtype("<f4")


@dataclass
class DatasetManifest:
    class_names: list[str]
    records: list[dict]
    shapes: dict
    checksums: dict[str, str]
    meta: dict
    format_version: int = FORMAT_VERSION

    def to_dict(self) -> dict:
        return {
            "format_version": self.format_version,
            "class_names": self.class_names,
            "shapes": self.shapes,
            "checksums": self.checksums,
            "meta": self.meta,
            "records": self.records,
        }


def _sha256(path: Path) -> str:
    return hashlib.sha256(path.read_bytes()).hexdigest()


def save_dataset(dataset: PairedDataset, directory: str | Path) -> DatasetManifest:
    root = Path(directory)
    n = len(dataset)
    arrays = {"opt": dataset.optical, "sar": dataset.sar}
    if dataset.masks is not None:
        arrays["masks"] = dataset.masks
    checksums: dict[str, str] = {}
    records = []
    for shard, start in enumerate(range(0, n, SHARD_SIZE)):
        stop = min(start + SHARD_SIZE, n)
        name = f"shard_{shard:05d}.bin"
        for sub, arr in arrays.items():
            (root / sub).mkdir(parents=True, exist_ok=True)
            path = root / sub / name
            path.write_bytes(np.ascontiguousarray(arr[start:stop], dtype=_DTYPE).tobytes())
            checksums[f"{sub}/{name}"] = _sha256(path)
        for i in range(start, stop):
            records.append({
                "id": i,
                "shard": name,
                "offset": i - start,
                "label": int(dataset.labels[i]),
                "cloud_coverage": float(dataset.cloud_coverage[i]),
                "cloud_kind": CLOUD_KINDS[int(dataset.cloud_kind[i])],
                "split": None if dataset.split is None else SPLITS[int(dataset.split[i])],
            })
    manifest = DatasetManifest(
        class_names=list(dataset.class_names),
        records=records,
        shapes={
            "optical": list(dataset.optical.shape[1:]),
            "sar": list(dataset.sar.shape[1:]),
            "sar_present": len(dataset.sar) > 0,
            "masks": dataset.masks is not None,
            "dtype": "float32-le",
        },
        checksums=checksums,
        meta=dataset.meta,
    )
    (root / "manifest.json").write_text(json.dumps(manifest.to_dict(), indent=1, sort_keys=True) + "\n")
    return manifest


def load_dataset(directory: str | Path) -> PairedDataset:
    root = Path(directory)
    mpath = root / "manifest.json"
    if not mpath.exists():
        raise MissingFileError(str(mpath))
    raw = json.loads(mpath.read_text())
    if raw.get("format_version") != FORMAT_VERSION:
        raise VersionMismatchError(
            f"{mpath}: format version {raw.get('format_version')} unsupported (expected {FORMAT_VERSION})"
        )
    records = raw["records"]
    shapes = raw["shapes"]
    checksums = raw["checksums"]
    subs = ["opt", "sar"] + (["masks"] if shapes.get("masks") else [])
    item_shape = {"opt": shapes["optical"], "sar": shapes["sar"], "masks": shapes["optical"][1:]}

    by_shard: dict[str, list[dict]] = {}
    for rec in records:
        by_shard.setdefault(rec["shard"], []).append(rec)
    arrays = {s: {} for s in subs}
    for shard, recs in by_shard.items():
        for sub in subs:
            rel = f"{sub}/{shard}"
            path = root / rel
            if rel not in checksums or not path.exists():
                raise MissingFileError(str(path), sample_id=recs[0]["id"])
            actual = _sha256(path)
            if actual != checksums[rel]:
                raise ChecksumError(str(path), checksums[rel], actual)
            per = int(np.prod(item_shape[sub]))
            flat = np.frombuffer(path.read_bytes(), dtype=_DTYPE)
            if per and flat.size % per:
                raise DataError(f"{path}: size is not a multiple of the item shape {item_shape[sub]}")
            arrays[sub][shard] = flat.reshape(-1, *item_shape[sub]) if per else flat.reshape(0, *item_shape[sub])

    n = len(records)
    if sorted(r["id"] for r in records) != list(range(n)):
        raise DataError(f"{mpath}: record ids must be 0..N-1")
    records = sorted(records, key=lambda r: r["id"])

    def gather(sub: str) -> np.ndarray:
        shape = item_shape[sub]
        out = np.empty((n, *shape), dtype=np.float32)
        for r in records:
            src = arrays[sub][r["shard"]]
            if r["offset"] >= len(src):
                raise DataError(f"{sub}/{r['shard']}: sample {r['id']} offset {r['offset']} out of range")
            out[r["id"]] = src[r["offset"]]
        return out

    optical = gather("opt")
    sar = gather("sar") if shapes.get("sar_present", True) else np.empty((0, *shapes["sar"]), np.float32)
    masks = gather("masks") if "masks" in subs else None
    splits = [r["split"] for r in records]
    if any(s is None for s in splits) and not all(s is None for s in splits):
        raise DataError(f"{mpath}: split assignment must cover every sample or none")
    split = None if splits[0] is None else np.array([SPLITS.index(s) for s in splits], dtype=np.int8)

    ds = PairedDataset(
        optical=optical,
        sar=sar,
        labels=np.array([r["label"] for r in records], dtype=np.int64),
        class_names=raw["class_names"],
        cloud_coverage=np.array([r["cloud_coverage"] for r in records], dtype=np.float64),
        cloud_kind=np.array([CLOUD_KINDS.index(r["cloud_kind"]) for r in records], dtype=np.int8),
        split=split,
        masks=masks,
        meta=raw.get("meta", {}),
    )
    _validate(ds, mpath)
    return ds


def _validate(ds: PairedDataset, mpath: Path) -> None:
    covered = ds.cloud_coverage > 0
    if np.any(covered != (ds.cloud_kind != 0)):
        raise DataError(f"{mpath}: cloud_kind must be 'none' exactly when cloud_coverage is 0")
    if ds.split is not None:
        want = ds.meta.get("split", {}).get("labeled_per_class")
        if want is not None:
            lab = ds.labels[ds.split == 0]
            counts = np.bincount(lab, minlength=ds.num_classes)
            if np.any(counts != want):
                raise DataError(f"{mpath}: labeled-per-class counts {counts.tolist()} != {want}")
