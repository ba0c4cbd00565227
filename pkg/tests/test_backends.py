import json
import socket
import threading
import urllib.request

import numpy as np
import pytest

from amodal.backends.base import (BackendContractError, BackendTransportError, Backends,
                                  DepthVerdict, NoisyState)
from amodal.backends.mock import MockBackend, ScriptedScene, SceneBuilder, mock_backends
from amodal.backends.remote import (PROTOCOL, RemoteBackend, decode_array, encode_array,
                                    remote_backends)


@pytest.fixture
def mock(one_occluder):
    return MockBackend(one_occluder)


def test_timestep_contract(mock, one_occluder):
    img = one_occluder.photo()
    m = np.zeros(img.shape[:2], bool)
    with pytest.raises(BackendContractError):
        mock.diffuse_range(img, m, "x", 20, 10)
    with pytest.raises(BackendContractError):
        mock.diffuse_range(img, m, "x", 20, 50)          # s > 0 needs a state
    st = mock.diffuse_range(img, m, "x", 0, 20)
    assert st.timestep == 20
    with pytest.raises(BackendContractError):
        mock.diffuse_range(st, m, "x", 30, 50)           # wrong resume point
    with pytest.raises(BackendContractError):
        mock.decode(st)
    done = mock.diffuse_range(st, m, "x", 20, 50)
    assert np.array_equal(mock.decode(done), img)


def test_features_only_mid_denoise(mock, one_occluder):
    img = one_occluder.photo()
    with pytest.raises(BackendContractError):
        mock.extract_decoder_features(NoisyState(img, 50), 3)
    with pytest.raises(BackendContractError):
        mock.extract_decoder_features(NoisyState(img, 20), 0)
    f = mock.extract_decoder_features(mock.add_noise(img, 20), 3)
    assert f.shape[:2] == img.shape[:2]
    assert np.all(f.sum(axis=-1) == 1)                   # one-hot


def test_feature_cell_downsamples(one_occluder):
    m = MockBackend(one_occluder, feature_cell=8)
    f = m.extract_decoder_features(m.add_noise(one_occluder.photo(), 20), 3)
    assert f.shape[:2] == (20, 25)


def test_inpainting_reveals_the_prompt_object(mock, one_occluder):
    img = one_occluder.photo()
    occ = one_occluder.layer_mask("kid")
    st = mock.diffuse_range(img, occ, "surfboard", 0, 50)
    out = mock.decode(st)
    expected = one_occluder.render(["board"])
    assert np.array_equal(out[occ], expected[occ])
    assert np.array_equal(out[~occ], img[~occ])


def test_segmentation_respects_vocabulary(mock, one_occluder):
    img = one_occluder.photo()
    insts = mock.segment_instances(img, ["surfboard", "person"])
    assert sorted(i.category for i in insts) == ["person", "surfboard"]
    board = [i for i in insts if i.category == "surfboard"][0]
    assert np.array_equal(board.mask, one_occluder.visible_mask("board"))
    assert [i.category for i in mock.segment_instances(img, ["person"])] == ["person"]


def test_depth_order_and_unknown_pairs(one_occluder):
    img = one_occluder.photo()
    kid, board = one_occluder.visible_mask("kid"), one_occluder.visible_mask("board")
    m = MockBackend(one_occluder)
    assert m.order_depth(img, kid, board) is DepthVerdict.FIRST_CLOSER
    assert m.order_depth(img, board, kid) is DepthVerdict.SECOND_CLOSER
    assert DepthVerdict.FIRST_CLOSER.swapped() is DepthVerdict.SECOND_CLOSER
    scene = ScriptedScene(one_occluder.background, one_occluder.layers, one_occluder.viewport,
                          depth_unknown=[("kid", "board")])
    assert MockBackend(scene).order_depth(img, kid, board) is DepthVerdict.UNKNOWN


def test_removal_restores_background(mock, one_occluder):
    img = one_occluder.photo()
    m = one_occluder.layer_mask("kid")
    out = mock.remove_objects(img, m)
    assert np.array_equal(out[m], one_occluder.render([])[m])


def test_scene_builder_rejects_reserved_colours():
    b = SceneBuilder(20, 20)
    with pytest.raises(ValueError):
        b.add_rect("a", "cup", 0, 0, 5, 5, (128, 128, 128), z=1)
    with pytest.raises(ValueError):
        b.add_rect("a", "cup", 0, 0, 5, 5, (10, 10, 40), z=1)


def test_scene_save_load(tmp_path, two_occluders):
    two_occluders.save(tmp_path / "s")
    back = ScriptedScene.load(tmp_path / "s")
    assert back.fingerprint() == two_occluders.fingerprint()
    assert np.array_equal(back.photo(), two_occluders.photo())


def test_serialized_proxy_shares_one_lock(one_occluder):
    m = MockBackend(one_occluder)
    m.single_flight = True
    s = Backends(m, m, m, m).serialized()
    assert s.diffusion is s.segmenter
    assert s.diffusion.total_steps == 50


# --- remote adapter --------------------------------------------------------

def test_array_codec_round_trip(rng):
    a = rng.random((3, 4, 5)).astype(np.float32)
    assert np.array_equal(decode_array(encode_array(a)), a)


def test_remote_matches_in_process(mock_server, one_occluder):
    local = MockBackend(one_occluder)
    remote = RemoteBackend(mock_server)
    img = one_occluder.photo()
    occ = one_occluder.layer_mask("kid")
    st_l = local.diffuse_range(img, occ, "surfboard", 0, 20, origin=(0, 0))
    st_r = remote.diffuse_range(img, occ, "surfboard", 0, 20, origin=(0, 0))
    assert st_r.timestep == 20 and np.array_equal(st_l.pixels, st_r.pixels)
    assert np.array_equal(local.extract_decoder_features(st_l, 3),
                          remote.extract_decoder_features(st_r, 3))
    done = remote.diffuse_range(st_r, occ, "surfboard", 20, 50)
    assert np.array_equal(remote.decode(done), local.decode(local.diffuse_range(st_l, occ, "s", 20, 50)))
    insts = remote.segment_instances(img, ["surfboard", "person"])
    assert sorted(i.category for i in insts) == ["person", "surfboard"]
    kid, board = one_occluder.visible_mask("kid"), one_occluder.visible_mask("board")
    assert remote.order_depth(img, kid, board) is DepthVerdict.FIRST_CLOSER
    assert np.array_equal(remote.remove_objects(img, kid), local.remove_objects(img, kid))
    assert remote.identity()["version"] == "mock-1"


def test_ping_and_protocol_field(mock_server):
    with urllib.request.urlopen(mock_server + "/v1/ping") as r:
        body = json.loads(r.read())
    assert body["protocol"] == PROTOCOL
    assert "backend_version" in body and "diffuse_range" in body["ops"]


def test_contract_errors_are_distinct(mock_server, one_occluder):
    remote = RemoteBackend(mock_server)
    img = one_occluder.photo()
    with pytest.raises(BackendContractError):
        remote._request("POST", "no_such_op", {})
    with pytest.raises(BackendContractError):
        remote.extract_decoder_features(NoisyState(img, 50), 3)
    with pytest.raises(BackendContractError):
        remote.score(img, img, "cup")                     # server has no metric backend


def test_unreachable_server_is_transport_error():
    with socket.socket() as s:
        s.bind(("127.0.0.1", 0))
        port = s.getsockname()[1]
    remote = RemoteBackend(f"http://127.0.0.1:{port}", timeout=2, retries=1)
    with pytest.raises(BackendTransportError):
        remote.ping()


def test_remote_backends_per_role_urls(mock_server):
    b = remote_backends(urls={"diffusion": mock_server, "segmenter": mock_server,
                              "depth": mock_server, "remover": mock_server})
    assert b.diffusion is b.depth
    with pytest.raises(ValueError):
        remote_backends(urls={"diffusion": mock_server})


def test_metric_backend_over_http(serve, one_occluder):
    class Const:
        def score(self, p, t, c):
            return {"clip": 0.5, "dreamsim": 0.25, "lpips": 0.125}

        def identity(self):
            return {"name": "const", "version": "1"}

    b = mock_backends(one_occluder)
    b.metrics = Const()
    url = serve(b)
    img = one_occluder.photo()
    assert RemoteBackend(url).score(img, img, "cup") == {"clip": 0.5, "dreamsim": 0.25,
                                                         "lpips": 0.125}


def test_concurrent_remote_calls(mock_server, one_occluder):
    remote = RemoteBackend(mock_server)
    img = one_occluder.photo()
    results = []

    def work():
        results.append(len(remote.segment_instances(img, ["surfboard", "person"])))

    threads = [threading.Thread(target=work) for _ in range(6)]
    for t in threads:
        t.start()
    for t in threads:
        t.join()
    assert results == [2] * 6
