"""Artifact registry, image cache, manifests, and live edit sessions.

A workspace is a directory owning everything a command produces:
checkpoints under fixed names, PNG images keyed by the hash of their
bytes, and one manifest per command. Manifests contain no timestamps and
hash every input and output file, so rerunning a command with the same
flags must reproduce them byte for byte; files that legitimately vary
between runs (training logs with wall times) are listed under
``excluded`` instead of being hashed.

Edit sessions are runtime-only state for the HTTP service: each one pins
an uploaded source image, its inverted code, and a single edit vector.
Sessions expire after a configurable idle time and tuned generator
copies are capped LRU-style, so an abandoned browser tab cannot pin
memory forever.
"""

from __future__ import annotations

import hashlib
import io
import json
import os
import threading
import time
import uuid
from dataclasses import dataclass, field
from pathlib import Path

import torch
from PIL import Image

from .directions import (
    DirectionMatrix,
    PoseStats,
    load_pose_stats,
    save_pose_stats,
)
from .errors import ContractViolation, MissingCheckpoint
from .estimator import FrozenEmbedder, PoseRegressor
from .checkpoint import Checkpoint
from .inversion import Encoder, RealAnalogCorpus, load_corpus, save_corpus
from .toygen import CONTROL_DIM, IMAGE_SIZE, ToyGenerator

ROOT_ENV_VAR = "LATENTPOSE_WORKSPACE"

# Registry slots: fixed file names under checkpoints/. Direction matrices
# are qualified by their training scheme.
_CHECKPOINT_FILES = {
    "generator": "generator.ckpt",
    "regressor": "regressor.ckpt",
    "embedder": "embedder.ckpt",
    "encoder": "encoder.ckpt",
    "pose_stats": "pose_stats.ckpt",
    "corpus": "corpus.ckpt",
    "directions-synthetic": "directions-synthetic.ckpt",
    "directions-mixed": "directions-mixed.ckpt",
    "directions-paired": "directions-paired.ckpt",
}


def image_to_png(image: torch.Tensor) -> bytes:
    """Quantize a (3, 64, 64) float image to 8-bit PNG bytes."""
    if image.shape != (3, IMAGE_SIZE, IMAGE_SIZE):
        raise ContractViolation(f"expected a (3, {IMAGE_SIZE}, {IMAGE_SIZE}) image, got {tuple(image.shape)}")
    u8 = (image.detach().clamp(0.0, 1.0) * 255.0).round().to(torch.uint8)
    buf = io.BytesIO()
    Image.fromarray(u8.permute(1, 2, 0).numpy(), "RGB").save(buf, format="PNG")
    return buf.getvalue()


def png_to_image(data: bytes) -> torch.Tensor:
    """Decode PNG bytes to a (3, 64, 64) float64 image in [0, 1]."""
    try:
        with Image.open(io.BytesIO(data)) as img:
            rgb = img.convert("RGB")
            if rgb.size != (IMAGE_SIZE, IMAGE_SIZE):
                raise ContractViolation(
                    f"expected a {IMAGE_SIZE}x{IMAGE_SIZE} image, got {rgb.size[0]}x{rgb.size[1]}"
                )
            raw = torch.frombuffer(bytearray(rgb.tobytes()), dtype=torch.uint8)
    except ContractViolation:
        raise
    except Exception as exc:
        raise ContractViolation(f"not a decodable image: {exc}") from exc
    chw = raw.reshape(IMAGE_SIZE, IMAGE_SIZE, 3).permute(2, 0, 1)
    return chw.to(torch.float64) / 255.0


def file_digest(path: Path) -> str:
    return "sha256:" + hashlib.sha256(path.read_bytes()).hexdigest()


@dataclass
class EditSession:
    """One uploaded image being edited; all fields live in memory only.

    ``delta`` is the whole edit state: the current frame is always the
    render of ``w_inv + A @ delta``, never an accumulation of images.
    """

    session_id: str
    source_hash: str
    source_image: torch.Tensor  # (3, 64, 64) float64
    w_inv: torch.Tensor  # (8, 64) float64
    source_params: torch.Tensor  # (15,) raw attribute units
    delta: torch.Tensor  # (15,) rescaled attribute space
    last_access: float
    lock: threading.Lock = field(default_factory=threading.Lock, repr=False)
    tuned: ToyGenerator | None = None


class Workspace:
    """Directory-rooted artifact store plus the in-memory session table."""

    def __init__(
        self,
        root: str | Path | None = None,
        session_ttl: float = 1800.0,
        tuned_cap: int = 4,
        clock=time.monotonic,
    ):
        if root is None:
            root = os.environ.get(ROOT_ENV_VAR, "workspace")
        self.root = Path(root)
        self.session_ttl = session_ttl
        self.tuned_cap = tuned_cap
        self.clock = clock
        for sub in ("checkpoints", "images", "manifests", "reports"):
            (self.root / sub).mkdir(parents=True, exist_ok=True)
        self._sessions: dict[str, EditSession] = {}
        self._tuned_order: list[str] = []  # session ids, least recently used first
        self._table_lock = threading.Lock()

    # --- checkpoint registry ---

    def checkpoint_path(self, name: str) -> Path:
        if name not in _CHECKPOINT_FILES:
            raise ContractViolation(f"unknown checkpoint slot '{name}'")
        return self.root / "checkpoints" / _CHECKPOINT_FILES[name]

    def has(self, name: str) -> bool:
        return self.checkpoint_path(name).exists()

    def require(self, *names: str) -> None:
        """Resolve every reference up front; commands call this first."""
        for name in names:
            path = self.checkpoint_path(name)
            if not path.exists():
                raise MissingCheckpoint(name, str(path))

    def save_generator(self, generator: ToyGenerator) -> Path:
        path = self.checkpoint_path("generator")
        generator.save(path)
        return path

    def load_generator(self) -> ToyGenerator:
        self.require("generator")
        return ToyGenerator.load(self.checkpoint_path("generator"))

    def save_regressor(self, regressor: PoseRegressor) -> Path:
        path = self.checkpoint_path("regressor")
        regressor.save(path)
        return path

    def load_regressor(self) -> PoseRegressor:
        self.require("regressor")
        return PoseRegressor.load(self.checkpoint_path("regressor"))

    def save_embedder(self, embedder: FrozenEmbedder) -> Path:
        path = self.checkpoint_path("embedder")
        tensors = {name: t.detach().numpy() for name, t in embedder.state_dict().items()}
        Checkpoint("embedder", meta={"seed": embedder.seed}, tensors=tensors).save(path)
        return path

    def load_embedder(self) -> FrozenEmbedder:
        self.require("embedder")
        ckpt = Checkpoint.load(self.checkpoint_path("embedder"), expect_kind="embedder")
        model = FrozenEmbedder(seed=int(ckpt.meta["seed"]))
        model.load_state_dict({name: torch.from_numpy(a) for name, a in ckpt.tensors.items()})
        return model

    def save_encoder(self, encoder: Encoder) -> Path:
        path = self.checkpoint_path("encoder")
        encoder.save(path)
        return path

    def load_encoder(self) -> Encoder:
        self.require("encoder")
        return Encoder.load(self.checkpoint_path("encoder"))

    def save_stats(self, stats: PoseStats) -> Path:
        path = self.checkpoint_path("pose_stats")
        save_pose_stats(stats, path)
        return path

    def load_stats(self) -> PoseStats:
        self.require("pose_stats")
        return load_pose_stats(self.checkpoint_path("pose_stats"))

    def save_corpus(self, corpus: RealAnalogCorpus) -> Path:
        path = self.checkpoint_path("corpus")
        save_corpus(corpus, path)
        return path

    def load_corpus(self) -> RealAnalogCorpus:
        self.require("corpus")
        return load_corpus(self.checkpoint_path("corpus"))

    def save_directions(self, scheme: str, model: DirectionMatrix) -> Path:
        path = self.checkpoint_path(f"directions-{scheme.lower()}")
        model.save(path)
        return path

    def load_directions(self, scheme: str) -> DirectionMatrix:
        name = f"directions-{scheme.lower()}"
        self.require(name)
        return DirectionMatrix.load(self.checkpoint_path(name))

    # --- image cache ---

    def store_image(self, image: torch.Tensor) -> str:
        """Write the PNG encoding and return its content hash."""
        data = image_to_png(image)
        digest = hashlib.sha256(data).hexdigest()
        path = self.root / "images" / f"{digest}.png"
        if not path.exists():
            path.write_bytes(data)
        return digest

    def store_image_bytes(self, data: bytes) -> str:
        digest = hashlib.sha256(data).hexdigest()
        path = self.root / "images" / f"{digest}.png"
        if not path.exists():
            path.write_bytes(data)
        return digest

    def image_bytes(self, digest: str) -> bytes | None:
        path = self.root / "images" / f"{digest}.png"
        return path.read_bytes() if path.exists() else None

    # --- manifests ---

    def write_manifest(
        self,
        command: str,
        arguments: dict,
        inputs: dict[str, Path],
        outputs: dict[str, Path],
        excluded: tuple[str, ...] = (),
    ) -> Path:
        """One JSON manifest per command, reproducible byte for byte."""
        payload = {
            "command": command,
            "arguments": {key: arguments[key] for key in sorted(arguments)},
            "inputs": {name: file_digest(path) for name, path in sorted(inputs.items())},
            "outputs": {name: file_digest(path) for name, path in sorted(outputs.items())},
            "excluded": sorted(excluded),
        }
        path = self.root / "manifests" / f"{command}.json"
        path.write_text(json.dumps(payload, indent=1, sort_keys=True) + "\n")
        return path

    # --- sessions ---

    def create_session(
        self,
        source_image: torch.Tensor,
        w_inv: torch.Tensor,
        source_params: torch.Tensor,
        source_hash: str,
    ) -> EditSession:
        session = EditSession(
            session_id=uuid.uuid4().hex,
            source_hash=source_hash,
            source_image=source_image,
            w_inv=w_inv,
            source_params=source_params.reshape(CONTROL_DIM).clone(),
            delta=torch.zeros(CONTROL_DIM, dtype=torch.float64),
            last_access=self.clock(),
        )
        with self._table_lock:
            self._sweep()
            self._sessions[session.session_id] = session
        return session

    def session(self, session_id: str) -> EditSession | None:
        """Look up and touch a session; expired ones are gone for good."""
        with self._table_lock:
            self._sweep()
            session = self._sessions.get(session_id)
            if session is None:
                return None
            session.last_access = self.clock()
            if session.tuned is not None:
                self._tuned_order.remove(session.session_id)
                self._tuned_order.append(session.session_id)
            return session

    def drop_session(self, session_id: str) -> bool:
        with self._table_lock:
            self._sweep()
            session = self._sessions.pop(session_id, None)
            if session is not None and session.session_id in self._tuned_order:
                self._tuned_order.remove(session.session_id)
            return session is not None

    def attach_tuned(self, session: EditSession, tuned: ToyGenerator) -> None:
        """Hand a session its private generator copy, evicting LRU overflow."""
        with self._table_lock:
            session.tuned = tuned
            if session.session_id in self._tuned_order:
                self._tuned_order.remove(session.session_id)
            self._tuned_order.append(session.session_id)
            while len(self._tuned_order) > self.tuned_cap:
                evicted = self._tuned_order.pop(0)
                victim = self._sessions.get(evicted)
                if victim is not None:
                    victim.tuned = None

    def session_count(self) -> int:
        with self._table_lock:
            self._sweep()
            return len(self._sessions)

    def _sweep(self) -> None:
        now = self.clock()
        dead = [
            sid
            for sid, session in self._sessions.items()
            if now - session.last_access > self.session_ttl
        ]
        for sid in dead:
            self._sessions.pop(sid)
            if sid in self._tuned_order:
                self._tuned_order.remove(sid)
