"""
Artifact Storage Service
========================

Reads and writes every on-disk artifact of a run inside one working directory
and keeps a SHA-256 manifest of what was written.

Formats:
- Images: binary PPM (P6, maxval 255, gamma 2.2 encoded) through Pillow
- Depth: "FGDP" header (magic, u32 width, u32 height, u32 reserved) + little-endian f32 grid;
  invalid (infinite) depth is stored as 0
- Gaussian scenes: "FGGS" header (magic, u32 version, u32 count) + 14 f32 per Gaussian
- Refiner weights: "FGDN" header (magic, u32 version, u32 architecture hash) + f32 weights
  in parameter declaration order
- JSON documents and JSON lines
"""

import hashlib
import json
import logging
import struct
from io import BytesIO
from pathlib import Path
from typing import Any, Dict, Iterable, List, Optional, Union

import numpy as np
import torch
from PIL import Image
from pydantic import BaseModel

from ..exceptions import IoError
from .diffusion_refiner import GeometryAwareDenoiser
from .gaussian_model import PARAMS_PER_GAUSSIAN, GaussianScene

logger = logging.getLogger(__name__)

GAMMA = 2.2
DEPTH_MAGIC = b"FGDP"
SCENE_MAGIC = b"FGGS"
REFINER_MAGIC = b"FGDN"
SCENE_VERSION = 1
REFINER_VERSION = 1
HEADER = struct.Struct("<4sIII")
CHECKPOINT_HEADER = struct.Struct("<4sII")

PathLike = Union[str, Path]


def sha256_bytes(data: bytes) -> str:
    return hashlib.sha256(data).hexdigest()


def encode_ppm(image: np.ndarray) -> bytes:
    """Linear [0, 1] RGB -> gamma-encoded binary PPM bytes."""
    img = np.clip(np.asarray(image, dtype=np.float64), 0.0, 1.0)
    encoded = np.round(np.power(img, 1.0 / GAMMA) * 255.0).astype(np.uint8)
    buf = BytesIO()
    Image.fromarray(encoded).save(buf, format="PPM")
    return buf.getvalue()


def decode_ppm(data: bytes) -> np.ndarray:
    with Image.open(BytesIO(data)) as img:
        arr = np.asarray(img.convert("RGB"), dtype=np.float64) / 255.0
    return np.power(arr, GAMMA)


def encode_depth(depth: np.ndarray) -> bytes:
    depth = np.asarray(depth, dtype=np.float64)
    h, w = depth.shape
    stored = np.where(np.isfinite(depth) & (depth > 0), depth, 0.0).astype("<f4")
    return HEADER.pack(DEPTH_MAGIC, w, h, 0) + stored.tobytes()


def decode_depth(data: bytes) -> np.ndarray:
    """Depth grid with +inf restored where the stored value is 0."""
    if len(data) < HEADER.size:
        raise IoError("Depth file truncated")
    magic, w, h, _ = HEADER.unpack_from(data)
    if magic != DEPTH_MAGIC:
        raise IoError(f"Bad depth magic {magic!r}")
    grid = np.frombuffer(data, dtype="<f4", offset=HEADER.size)
    if grid.size != w * h:
        raise IoError(f"Depth payload has {grid.size} values, header says {w}x{h}")
    depth = grid.reshape(h, w).astype(np.float64)
    return np.where(depth > 0, depth, np.inf)


def encode_scene(scene: GaussianScene) -> bytes:
    raw = scene.raw().detach().cpu().numpy().astype("<f4")
    return CHECKPOINT_HEADER.pack(SCENE_MAGIC, SCENE_VERSION, len(scene)) + raw.tobytes()


def decode_scene(data: bytes) -> GaussianScene:
    magic, version, count = CHECKPOINT_HEADER.unpack_from(data)
    if magic != SCENE_MAGIC or version != SCENE_VERSION:
        raise IoError(f"Not a scene checkpoint (magic {magic!r}, version {version})")
    raw = np.frombuffer(data, dtype="<f4", offset=CHECKPOINT_HEADER.size)
    if raw.size != count * PARAMS_PER_GAUSSIAN:
        raise IoError(f"Scene checkpoint holds {raw.size} values for {count} Gaussians")
    return GaussianScene.from_raw(torch.from_numpy(raw.reshape(count, PARAMS_PER_GAUSSIAN).astype(np.float64)))


def encode_refiner(model: GeometryAwareDenoiser) -> bytes:
    chunks = [CHECKPOINT_HEADER.pack(REFINER_MAGIC, REFINER_VERSION, model.architecture_hash())]
    for p in model.state_dict().values():
        chunks.append(p.detach().cpu().numpy().astype("<f4").tobytes())
    return b"".join(chunks)


def decode_refiner_into(data: bytes, model: GeometryAwareDenoiser) -> GeometryAwareDenoiser:
    """Load FGDN weights into a model of matching architecture."""
    magic, version, arch = CHECKPOINT_HEADER.unpack_from(data)
    if magic != REFINER_MAGIC or version != REFINER_VERSION:
        raise IoError(f"Not a refiner checkpoint (magic {magic!r}, version {version})")
    if arch != model.architecture_hash():
        raise IoError(f"Refiner architecture hash {arch:#010x} != model {model.architecture_hash():#010x}")
    flat = np.frombuffer(data, dtype="<f4", offset=CHECKPOINT_HEADER.size)
    state = model.state_dict()
    expected = sum(t.numel() for t in state.values())
    if flat.size != expected:
        raise IoError(f"Refiner checkpoint holds {flat.size} weights, model has {expected}")
    offset = 0
    loaded = {}
    for name, t in state.items():
        n = t.numel()
        loaded[name] = torch.from_numpy(flat[offset : offset + n].copy()).reshape(t.shape).to(t.dtype)
        offset += n
    model.load_state_dict(loaded)
    return model


def _jsonable(data: Any) -> Any:
    if isinstance(data, BaseModel):
        return data.model_dump(mode="json")
    if isinstance(data, (list, tuple)):
        return [_jsonable(d) for d in data]
    if isinstance(data, dict):
        return {k: _jsonable(v) for k, v in data.items()}
    return data


class ArtifactStore:
    """
    File-backed artifact store rooted at a working directory.

    Every write is hashed and remembered until write_manifest() records the set.
    """

    def __init__(self, workdir: PathLike, create: bool = False):
        self.root = Path(workdir)
        if create:
            try:
                self.root.mkdir(parents=True, exist_ok=True)
            except OSError as e:
                raise IoError(f"Cannot create workdir {self.root}: {e}") from e
        if not self.root.is_dir():
            raise IoError(f"Workdir {self.root} does not exist")
        self.written: Dict[str, str] = {}

    def path(self, rel: PathLike) -> Path:
        return self.root / rel

    def exists(self, rel: PathLike) -> bool:
        return self.path(rel).exists()

    def write_bytes(self, rel: PathLike, data: bytes) -> Path:
        target = self.path(rel)
        try:
            target.parent.mkdir(parents=True, exist_ok=True)
            target.write_bytes(data)
        except OSError as e:
            raise IoError(f"Cannot write {target}: {e}") from e
        self.written[Path(rel).as_posix()] = sha256_bytes(data)
        logger.debug(f"Wrote {target} ({len(data)} bytes)")
        return target

    def read_bytes(self, rel: PathLike) -> bytes:
        target = self.path(rel)
        try:
            return target.read_bytes()
        except OSError as e:
            raise IoError(f"Cannot read {target}: {e}") from e

    # Images and depth

    def write_ppm(self, rel: PathLike, image: np.ndarray) -> Path:
        return self.write_bytes(rel, encode_ppm(image))

    def read_ppm(self, rel: PathLike) -> np.ndarray:
        try:
            return decode_ppm(self.read_bytes(rel))
        except (OSError, ValueError) as e:
            raise IoError(f"Cannot decode image {self.path(rel)}: {e}") from e

    def write_depth(self, rel: PathLike, depth: np.ndarray) -> Path:
        return self.write_bytes(rel, encode_depth(depth))

    def read_depth(self, rel: PathLike) -> np.ndarray:
        return decode_depth(self.read_bytes(rel))

    # Checkpoints

    def write_scene(self, rel: PathLike, scene: GaussianScene) -> Path:
        path = self.write_bytes(rel, encode_scene(scene))
        logger.info(f"Saved {len(scene)} Gaussians to {path}")
        return path

    def read_scene(self, rel: PathLike) -> GaussianScene:
        try:
            return decode_scene(self.read_bytes(rel))
        except struct.error as e:
            raise IoError(f"Truncated scene checkpoint {self.path(rel)}") from e

    def write_refiner(self, rel: PathLike, model: GeometryAwareDenoiser) -> Path:
        path = self.write_bytes(rel, encode_refiner(model))
        logger.info(f"Saved refiner weights to {path}")
        return path

    def read_refiner(self, rel: PathLike, model: GeometryAwareDenoiser) -> GeometryAwareDenoiser:
        try:
            return decode_refiner_into(self.read_bytes(rel), model)
        except struct.error as e:
            raise IoError(f"Truncated refiner checkpoint {self.path(rel)}") from e

    # JSON

    def write_json(self, rel: PathLike, data: Any) -> Path:
        text = json.dumps(_jsonable(data), indent=2, sort_keys=True)
        return self.write_bytes(rel, (text + "\n").encode("utf-8"))

    def read_json(self, rel: PathLike) -> Any:
        try:
            return json.loads(self.read_bytes(rel).decode("utf-8"))
        except (UnicodeDecodeError, json.JSONDecodeError) as e:
            raise IoError(f"Invalid JSON in {self.path(rel)}: {e}") from e

    def write_jsonl(self, rel: PathLike, rows: Iterable[Any]) -> Path:
        lines = [json.dumps(_jsonable(r), sort_keys=True) for r in rows]
        return self.write_bytes(rel, "".join(line + "\n" for line in lines).encode("utf-8"))

    def read_jsonl(self, rel: PathLike) -> List[Any]:
        text = self.read_bytes(rel).decode("utf-8")
        try:
            return [json.loads(line) for line in text.splitlines() if line.strip()]
        except json.JSONDecodeError as e:
            raise IoError(f"Invalid JSON line in {self.path(rel)}: {e}") from e

    # Manifests

    def write_manifest(self, name: str = "manifest.json", meta: Optional[Dict[str, Any]] = None) -> Path:
        """Record hashes of everything written since the previous manifest."""
        doc = {"files": dict(sorted(self.written.items())), "meta": _jsonable(meta or {})}
        text = json.dumps(doc, indent=2, sort_keys=True) + "\n"
        target = self.path(name)
        try:
            target.write_text(text, encoding="utf-8")
        except OSError as e:
            raise IoError(f"Cannot write manifest {target}: {e}") from e
        logger.info(f"Manifest {target} lists {len(self.written)} files")
        self.written = {}
        return target

    def verify_manifest(self, name: str = "manifest.json") -> Dict[str, Any]:
        """
        Re-hash every file a manifest lists.

        Raises:
            IoError: naming the first missing file or mismatching hash
        """
        if not self.exists(name):
            raise IoError(f"Manifest {self.path(name)} not found")
        doc = self.read_json(name)
        for rel, expected in doc.get("files", {}).items():
            actual = sha256_bytes(self.read_bytes(rel))
            if actual != expected:
                raise IoError(f"Hash mismatch for {self.path(rel)}: manifest {expected}, file {actual}")
        return doc
