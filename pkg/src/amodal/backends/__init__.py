from .base import (BackendContractError, BackendError, Backends, BackendTransportError,
                   DepthOrderer, DepthVerdict, DiffusionBackend, Instance, MetricBackend,
                   NoisyState, Remover, Segmenter)
from .mock import Layer, MockBackend, RecordingBackend, SceneBuilder, ScriptedScene, mock_backends

__all__ = ["BackendContractError", "BackendError", "BackendTransportError", "Backends",
           "DepthOrderer", "DepthVerdict", "DiffusionBackend", "Instance", "Layer",
           "MetricBackend", "MockBackend", "NoisyState", "RecordingBackend", "Remover",
           "SceneBuilder", "ScriptedScene", "Segmenter", "mock_backends"]
