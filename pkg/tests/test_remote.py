import threading

import numpy as np
import pytest

from amodalkit import engine
from amodalkit.backends import FullRequest, OracleBackend
from amodalkit.graph import occluders_of
from amodalkit.masks import iou
from amodalkit.remote import RemoteBackend, RemoteBackendError, make_backend_server
from amodalkit.scenes import SceneConfig, derive_graph, instance_id, sample_scene


@pytest.fixture(scope="module")
def oracle_server():
    scene = sample_scene(SceneConfig(), 3)
    backend = OracleBackend.from_scene(scene)
    server = make_backend_server(backend, port=0)
    thread = threading.Thread(target=server.serve_forever, daemon=True)
    thread.start()
    url = f"http://127.0.0.1:{server.server_address[1]}"
    yield scene, backend, url
    server.shutdown()


class TestWireProtocol:
    def test_partial_round_trip_bit_exact(self, oracle_server):
        scene, local, url = oracle_server
        remote = RemoteBackend(url)
        g = derive_graph(scene)
        x = scene.composite()
        checked = 0
        for k in range(len(scene.layers)):
            iid = instance_id(k)
            inst = g.instances[iid]
            occ = occluders_of(g, iid)
            if not occ or inst.modal.is_empty:
                continue
            masks = [g.instances[o].modal for o in occ]
            res_remote = engine.infer_stepwise(x, inst.modal, masks, remote)
            res_local = engine.infer_stepwise(x, inst.modal, masks, local)
            assert res_remote.mask == res_local.mask
            assert res_remote.rgba == res_local.rgba
            assert iou(res_remote.mask, scene.layers[k].amodal) == 1.0
            checked += 1
        assert checked > 0

    def test_full_round_trip(self, oracle_server):
        scene, local, url = oracle_server
        remote = RemoteBackend(url)
        g = derive_graph(scene)
        x = scene.composite()
        for k in range(len(scene.layers)):
            iid = instance_id(k)
            inst = g.instances[iid]
            if inst.modal.is_empty:
                continue
            req = FullRequest(image=x, instance_mask=inst.modal, text="whatever", seed=5)
            assert remote.complete_full(req).mask == local.complete_full(req).mask
            break

    def test_unreachable_server_is_connection_error(self):
        remote = RemoteBackend("http://127.0.0.1:9", timeout=0.5)
        scene = sample_scene(SceneConfig(), 1)
        g = derive_graph(scene)
        inst = next(iter(g.instances.values()))
        with pytest.raises(RemoteBackendError, match="unreachable"):
            remote.complete_full(FullRequest(image=scene.composite(), instance_mask=inst.modal))

    def test_server_error_surfaces_status(self, oracle_server):
        scene, _, url = oracle_server
        remote = RemoteBackend(url)
        # a query mask matching no instance makes the oracle raise -> 500
        from amodalkit.masks import BinaryMask

        w, h = scene.canvas
        bogus = BinaryMask(np.ones((h, w), dtype=bool))
        with pytest.raises(RemoteBackendError, match="500"):
            remote.complete_full(FullRequest(image=scene.composite(), instance_mask=bogus))
