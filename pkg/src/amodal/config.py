"""Run configuration: one JSON document with pipeline settings and backend endpoints.

Example::

    {"pipeline": {"composite_step": 20, "clean_background": "gray"},
     "backends": {"kind": "remote", "url": "http://localhost:8700",
                  "urls": {"metrics": "http://localhost:8701"},
                  "timeout": 120, "retries": 1}}

or ``{"backends": {"kind": "mock", "scene": "path/to/scene"}}``.

Precedence is flags > environment > file > defaults. Environment variables
only override endpoints: ``AMODAL_BACKEND_URL`` (all roles) and
``AMODAL_<ROLE>_URL`` for a single role.
"""

from __future__ import annotations

import json
import os
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, Mapping, Optional

from .backends.base import Backends
from .core import PipelineConfig

ROLES = ("diffusion", "segmenter", "depth", "remover", "metrics")
ENV_URL = "AMODAL_BACKEND_URL"


def role_env(role: str) -> str:
    return f"AMODAL_{role.upper()}_URL"


@dataclass
class BackendSettings:
    kind: Optional[str] = None          # "mock" | "remote" | None (unconfigured)
    scene: Optional[str] = None
    url: Optional[str] = None
    urls: Dict[str, str] = field(default_factory=dict)
    timeout: float = 120.0
    retries: int = 0

    def to_dict(self) -> dict:
        return {"kind": self.kind, "scene": self.scene, "url": self.url,
                "urls": dict(sorted(self.urls.items())), "timeout": self.timeout,
                "retries": self.retries}


@dataclass
class RunConfig:
    pipeline: PipelineConfig = field(default_factory=PipelineConfig)
    backends: BackendSettings = field(default_factory=BackendSettings)

    def to_dict(self) -> dict:
        return {"pipeline": self.pipeline.to_dict(), "backends": self.backends.to_dict()}


class ConfigError(ValueError):
    pass


def load_config(path=None, env: Optional[Mapping[str, str]] = None,
                pipeline_overrides: Optional[dict] = None,
                backend_overrides: Optional[dict] = None) -> RunConfig:
    """Resolve the effective configuration.

    ``pipeline_overrides`` and ``backend_overrides`` come from command-line
    flags; ``None`` values are ignored.
    """
    env = os.environ if env is None else env
    doc = {}
    if path is not None:
        try:
            doc = json.loads(Path(path).read_text())
        except (OSError, json.JSONDecodeError) as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from exc
        unknown = set(doc) - {"pipeline", "backends"}
        if unknown:
            raise ConfigError(f"unknown config sections {sorted(unknown)}")

    p = dict(doc.get("pipeline", {}))
    p.update({k: v for k, v in (pipeline_overrides or {}).items() if v is not None})
    try:
        pipeline = PipelineConfig.from_dict(p)
    except (TypeError, ValueError) as exc:
        raise ConfigError(str(exc)) from exc

    b = dict(doc.get("backends", {}))
    unknown = set(b) - {"kind", "scene", "url", "urls", "timeout", "retries"}
    if unknown:
        raise ConfigError(f"unknown backend keys {sorted(unknown)}")
    settings = BackendSettings(kind=b.get("kind"), scene=b.get("scene"), url=b.get("url"),
                               urls=dict(b.get("urls", {})),
                               timeout=float(b.get("timeout", 120.0)),
                               retries=int(b.get("retries", 0)))
    if settings.scene and path is not None and not Path(settings.scene).is_absolute():
        settings.scene = str(Path(path).parent / settings.scene)

    # environment: endpoints only
    if env.get(ENV_URL):
        settings.url = env[ENV_URL]
        settings.kind = "remote"
    for role in ROLES:
        if env.get(role_env(role)):
            settings.urls[role] = env[role_env(role)]
            if role != "metrics":
                settings.kind = "remote"

    # flags
    for k, v in (backend_overrides or {}).items():
        if v is None:
            continue
        if k == "url":
            settings.url, settings.kind = v, "remote"
        elif k == "scene":
            settings.scene, settings.kind = v, "mock"
        else:
            setattr(settings, k, v)

    if settings.kind not in (None, "mock", "remote"):
        raise ConfigError(f"unknown backend kind {settings.kind!r}")
    return RunConfig(pipeline, settings)


def make_backends(settings: BackendSettings, total_steps: int = 50) -> Backends:
    """Instantiate the configured backends (a fresh mock state per call)."""
    if settings.kind == "mock":
        from .backends.mock import MockBackend, ScriptedScene
        if not settings.scene:
            raise ConfigError("mock backends need a scene directory")
        b = MockBackend(ScriptedScene.load(settings.scene), total_steps=total_steps).backends()
        if settings.urls.get("metrics"):
            from .backends.remote import RemoteBackend
            b.metrics = RemoteBackend(settings.urls["metrics"], timeout=settings.timeout,
                                      retries=settings.retries)
        return b
    if settings.kind == "remote":
        from .backends.remote import remote_backends
        return remote_backends(settings.url, settings.urls, timeout=settings.timeout,
                               retries=settings.retries, total_steps=total_steps)
    raise ConfigError("no backends configured: pass --scene or --backend-url, set "
                      f"{ENV_URL}, or give a config file")
