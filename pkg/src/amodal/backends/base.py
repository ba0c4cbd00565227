"""Abstract model interfaces consumed by the pipeline.

Every model the method depends on (diffusion inpainter, grounded segmenter,
pairwise depth orderer, removal inpainter, perceptual metrics) sits behind
one of the classes below. Rasters crossing these interfaces are numpy arrays
(see :mod:`amodal.core`).

Most calls take an ``origin`` keyword: the position of the raster's top-left
pixel in the coordinates of the run's source image. Real models ignore it;
the scripted mock uses it to look up its scene.
"""

from __future__ import annotations

import abc
import enum
import threading
from dataclasses import dataclass
from typing import Any, Dict, List, Optional, Sequence, Tuple

import numpy as np

Origin = Tuple[int, int]


class BackendError(RuntimeError):
    """Base class for backend failures."""


class BackendTransportError(BackendError):
    """The backend could not be reached; the call may be retried."""


class BackendContractError(BackendError):
    """The backend was reached but the call violated its contract."""


class DepthVerdict(str, enum.Enum):
    FIRST_CLOSER = "first_closer"
    SECOND_CLOSER = "second_closer"
    UNKNOWN = "unknown"

    def swapped(self) -> "DepthVerdict":
        if self is DepthVerdict.FIRST_CLOSER:
            return DepthVerdict.SECOND_CLOSER
        if self is DepthVerdict.SECOND_CLOSER:
            return DepthVerdict.FIRST_CLOSER
        return self


@dataclass
class Instance:
    mask: np.ndarray
    category: str
    score: float = 1.0


InstanceSet = List[Instance]


@dataclass
class NoisyState:
    """A partially denoised image owned by a diffusion backend.

    ``pixels`` is the backend's pixel-space view of the state; compositing
    happens on it. ``handle`` carries anything else the backend needs and is
    dropped by compositing, after which the backend re-encodes from pixels.
    """

    pixels: np.ndarray
    timestep: int
    handle: Any = None

    @property
    def shape(self) -> Tuple[int, int]:
        return self.pixels.shape[:2]


class DiffusionBackend(abc.ABC):
    total_steps: int = 50
    single_flight: bool = False

    @abc.abstractmethod
    def diffuse_range(self, image_or_state, inpaint_mask: np.ndarray, prompt: str,
                      s: int, e: int, *, seed: int = 0,
                      origin: Origin = (0, 0)) -> NoisyState:
        """Run inpainting denoising from timestep ``s`` to ``e``."""

    @abc.abstractmethod
    def add_noise(self, image: np.ndarray, k: int, *, seed: int = 0,
                  origin: Origin = (0, 0)) -> NoisyState:
        ...

    @abc.abstractmethod
    def extract_decoder_features(self, state: NoisyState, layer: int) -> np.ndarray:
        """Return an ``(h_f, w_f, d)`` feature grid for ``state``."""

    def decode(self, state: NoisyState) -> np.ndarray:
        if state.timestep != self.total_steps:
            raise BackendContractError(
                f"state at timestep {state.timestep} is not fully denoised")
        return state.pixels

    def check_range(self, image_or_state, s: int, e: int) -> None:
        if not 0 <= s < e <= self.total_steps:
            raise BackendContractError(f"invalid timestep range {s}->{e}")
        if s == 0 and isinstance(image_or_state, NoisyState) and image_or_state.timestep != 0:
            raise BackendContractError("s=0 requires a clean image")
        if s > 0:
            if not isinstance(image_or_state, NoisyState):
                raise BackendContractError("s>0 requires a NoisyState")
            if image_or_state.timestep != s:
                raise BackendContractError(
                    f"state is at timestep {image_or_state.timestep}, expected {s}")

    def identity(self) -> Dict[str, str]:
        return {"name": type(self).__name__, "version": "0"}


class Segmenter(abc.ABC):
    single_flight: bool = False

    @abc.abstractmethod
    def segment_instances(self, image: np.ndarray, vocabulary: Sequence[str], *,
                          origin: Origin = (0, 0)) -> InstanceSet:
        ...

    def identity(self) -> Dict[str, str]:
        return {"name": type(self).__name__, "version": "0"}


class DepthOrderer(abc.ABC):
    single_flight: bool = False

    @abc.abstractmethod
    def order_depth(self, image: np.ndarray, mask_a: np.ndarray, mask_b: np.ndarray, *,
                    origin: Origin = (0, 0)) -> DepthVerdict:
        ...

    def identity(self) -> Dict[str, str]:
        return {"name": type(self).__name__, "version": "0"}


class Remover(abc.ABC):
    single_flight: bool = False

    @abc.abstractmethod
    def remove_objects(self, image: np.ndarray, mask: np.ndarray, *,
                       origin: Origin = (0, 0)) -> np.ndarray:
        ...

    def identity(self) -> Dict[str, str]:
        return {"name": type(self).__name__, "version": "0"}


class MetricBackend(abc.ABC):
    """Perceptual similarity metrics computed by external models."""

    names: Tuple[str, ...] = ("clip", "dreamsim", "lpips")

    @abc.abstractmethod
    def score(self, prediction: np.ndarray, target: np.ndarray,
              category: str) -> Dict[str, float]:
        ...

    def identity(self) -> Dict[str, str]:
        return {"name": type(self).__name__, "version": "0"}


class _Serialized:
    """Proxy that serializes calls to a single-flight backend."""

    def __init__(self, inner):
        self._inner = inner
        self._lock = threading.Lock()

    def __getattr__(self, name):
        attr = getattr(self._inner, name)
        if not callable(attr):
            return attr

        def call(*args, **kwargs):
            with self._lock:
                return attr(*args, **kwargs)
        return call


@dataclass
class Backends:
    diffusion: DiffusionBackend
    segmenter: Segmenter
    depth: DepthOrderer
    remover: Remover
    metrics: Optional[MetricBackend] = None

    def serialized(self) -> "Backends":
        """Wrap single-flight backends so concurrent callers take turns.

        Backends shared between roles get a single proxy.
        """
        proxies: Dict[int, Any] = {}

        def wrap(b):
            if b is None or not getattr(b, "single_flight", False):
                return b
            return proxies.setdefault(id(b), _Serialized(b))

        return Backends(wrap(self.diffusion), wrap(self.segmenter), wrap(self.depth),
                        wrap(self.remover), wrap(self.metrics))

    def identities(self) -> Dict[str, Dict[str, str]]:
        out = {}
        for role in ("diffusion", "segmenter", "depth", "remover", "metrics"):
            b = getattr(self, role)
            if b is not None:
                out[role] = b.identity()
        return out
