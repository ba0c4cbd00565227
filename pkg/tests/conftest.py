import threading

import numpy as np
import pytest

import scenes
from amodal.backends.mock import mock_backends
from amodal.backends.remote import make_server


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def one_occluder():
    return scenes.one_occluder_scene()


@pytest.fixture
def two_occluders():
    return scenes.two_occluder_scene()


@pytest.fixture
def serve():
    """Start an HTTP backend server around the given backends; yields a factory."""
    servers = []

    def start(backends):
        srv = make_server(backends)
        threading.Thread(target=srv.serve_forever, daemon=True).start()
        servers.append(srv)
        host, port = srv.server_address[:2]
        return f"http://{host}:{port}"

    yield start
    for srv in servers:
        srv.shutdown()
        srv.server_close()


@pytest.fixture
def mock_server(serve, one_occluder):
    return serve(mock_backends(one_occluder))
