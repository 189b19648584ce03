"""On-disk corpus layout and lossless round-trip I/O.

Layout::

    <root>/
      manifest.json
      images/<id>.png          # 16-bit grayscale
      masks/<id>/<k>.png       # 1-bit per structure

``manifest.json`` fields: ``format_version``, ``image_size``, ``class_counts``
and ``samples``, a list of ``{id, class_id, seed, image_path, mask_paths,
image_size, sha256}``. All arrays are row-major with origin at the top-left.
Images are quantized to the 16-bit grid at generation time, so write->read
reproduces every array bit-exactly.
"""

from __future__ import annotations

import hashlib
import json
from pathlib import Path

import numpy as np
from PIL import Image

from .phantom import PhantomSample

MANIFEST_NAME = "manifest.json"
FORMAT_VERSION = 1


class CorpusError(RuntimeError):
    """Raised for unreadable, inconsistent, or missing corpus data."""


def _sha256(path: Path) -> str:
    h = hashlib.sha256()
    h.update(path.read_bytes())
    return h.hexdigest()


def _save_image16(path: Path, image: np.ndarray):
    arr = np.round(np.clip(image, 0.0, 1.0) * 65535.0).astype(np.uint16)
    Image.fromarray(arr).save(path)  # uint16 -> 16-bit grayscale PNG


def _load_image16(path: Path) -> np.ndarray:
    with Image.open(path) as im:
        arr = np.array(im, dtype=np.uint16)
    return arr.astype(np.float64) / 65535.0


def _save_mask1(path: Path, mask: np.ndarray):
    Image.fromarray(mask.astype(bool)).save(path, bits=1)


def _load_mask1(path: Path) -> np.ndarray:
    with Image.open(path) as im:
        return np.array(im.convert("1"), dtype=bool)


def write_corpus(samples, root, overwrite: bool = False) -> Path:
    """Write samples + manifest under ``root``; refuses a non-empty target."""
    root = Path(root)
    if root.exists() and any(root.iterdir()) and not overwrite:
        raise CorpusError(f"target directory {root} is not empty (pass overwrite)")
    (root / "images").mkdir(parents=True, exist_ok=True)
    (root / "masks").mkdir(parents=True, exist_ok=True)

    entries = []
    class_counts: dict = {}
    for i, sample in enumerate(samples):
        sid = f"{i:06d}"
        image_rel = f"images/{sid}.png"
        _save_image16(root / image_rel, sample.image)
        mask_dir = root / "masks" / sid
        mask_dir.mkdir(parents=True, exist_ok=True)
        mask_rels = []
        for k, mask in enumerate(sample.masks):
            rel = f"masks/{sid}/{k}.png"
            _save_mask1(root / rel, mask)
            mask_rels.append(rel)
        digest = hashlib.sha256()
        digest.update((root / image_rel).read_bytes())
        for rel in mask_rels:
            digest.update((root / rel).read_bytes())
        entries.append({
            "id": sid,
            "class_id": int(sample.class_id),
            "seed": int(sample.seed),
            "image_path": image_rel,
            "mask_paths": mask_rels,
            "image_size": int(sample.image.shape[0]),
            "sha256": digest.hexdigest(),
        })
        key = str(int(sample.class_id))
        class_counts[key] = class_counts.get(key, 0) + 1

    manifest = {
        "format_version": FORMAT_VERSION,
        "image_size": entries[0]["image_size"] if entries else 0,
        "class_counts": class_counts,
        "samples": entries,
    }
    (root / MANIFEST_NAME).write_text(json.dumps(manifest, indent=2))
    return root


def read_manifest(root) -> dict:
    root = Path(root)
    path = root / MANIFEST_NAME
    if not path.exists():
        raise CorpusError(f"no {MANIFEST_NAME} in {root}")
    try:
        manifest = json.loads(path.read_text())
    except json.JSONDecodeError as exc:
        raise CorpusError(f"unparseable manifest {path}: {exc}") from exc
    for key in ("format_version", "image_size", "samples"):
        if key not in manifest:
            raise CorpusError(f"manifest {path} missing field {key!r}")
    required = ("id", "class_id", "seed", "image_path", "mask_paths", "image_size")
    for entry in manifest["samples"]:
        for key in required:
            if key not in entry:
                raise CorpusError(
                    f"manifest entry {entry.get('id', '?')!r} missing field {key!r}")
    return manifest


def read_corpus(root, verify_checksums: bool = True):
    """Yield PhantomSample objects for every manifest entry, validating files."""
    root = Path(root)
    manifest = read_manifest(root)
    for entry in manifest["samples"]:
        image_path = root / entry["image_path"]
        if not image_path.exists():
            raise CorpusError(f"sample {entry['id']}: missing image file {image_path}")
        mask_paths = [root / rel for rel in entry["mask_paths"]]
        for p in mask_paths:
            if not p.exists():
                raise CorpusError(f"sample {entry['id']}: missing mask file {p}")
        if verify_checksums and "sha256" in entry:
            digest = hashlib.sha256()
            digest.update(image_path.read_bytes())
            for p in mask_paths:
                digest.update(p.read_bytes())
            if digest.hexdigest() != entry["sha256"]:
                raise CorpusError(f"sample {entry['id']}: checksum mismatch")
        yield PhantomSample(
            image=_load_image16(image_path),
            masks=[_load_mask1(p) for p in mask_paths],
            class_id=int(entry["class_id"]),
            seed=int(entry["seed"]),
        )


def load_corpus(root, verify_checksums: bool = True) -> list:
    return list(read_corpus(root, verify_checksums=verify_checksums))
