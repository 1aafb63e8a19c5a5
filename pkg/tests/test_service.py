import json
import threading
import urllib.error
import urllib.request

import pytest

from amodalkit.backends import IdentityBackend, OracleBackend
from amodalkit.cosynth import CosynthStore
from amodalkit.scenes import SceneConfig, emit_dataset, load_record, sample_scene
from amodalkit.service import CosynthService, make_server

CFG = SceneConfig(canvas=(32, 32), layer_range=(2, 3), size_range=(10, 22))


def http(method, url, body=None, actor="tester"):
    data = json.dumps(body).encode() if body is not None else None
    req = urllib.request.Request(
        url, data=data, method=method,
        headers={"Content-Type": "application/json", "X-Actor": actor},
    )
    try:
        with urllib.request.urlopen(req, timeout=10) as resp:
            return resp.status, json.loads(resp.read().decode())
    except urllib.error.HTTPError as exc:
        return exc.code, json.loads(exc.read().decode())


@pytest.fixture
def live(tmp_path):
    scenes_list = [sample_scene(CFG, s) for s in range(6)]
    manifest = emit_dataset(scenes_list, tmp_path / "ds")
    usable = [r for r in manifest.occluded if not r.fully_occluded]
    if len(usable) < 2:
        pytest.skip("fixture needs occluded instances")
    store = CosynthStore(tmp_path / "store")
    store.enqueue(manifest)
    oracle = OracleBackend.from_records([load_record(manifest, r) for r in manifest.occluded])
    service = CosynthService(
        store,
        {"oracle": oracle, "identity": IdentityBackend()},
        default_backend="oracle",
        export_dir=tmp_path / "export",
    )
    server = make_server(service, port=0)
    thread = threading.Thread(target=server.serve_forever, daemon=True)
    thread.start()
    base = f"http://127.0.0.1:{server.server_address[1]}"
    yield base, store, usable
    server.shutdown()


class TestQueueAndItems:
    def test_queue_lists_pending(self, live):
        base, store, usable = live
        status, doc = http("GET", f"{base}/queue")
        assert status == 200
        assert len(doc["items"]) == len(store.items())
        status, doc = http("GET", f"{base}/queue?state=pending")
        assert all(i["state"] == "pending" for i in doc["items"])

    def test_item_detail_and_blobs(self, live):
        base, store, usable = live
        status, doc = http("GET", f"{base}/items/{usable[0].id}")
        assert status == 200
        assert doc["state"] == "pending"
        blob_url = f"{base}/blobs/{doc['modal']}"
        with urllib.request.urlopen(blob_url, timeout=10) as resp:
            raw = resp.read()
        assert raw[:8] == b"\x89PNG\r\n\x1a\n"

    def test_missing_item_404(self, live):
        base, _, _ = live
        status, doc = http("GET", f"{base}/items/ghost")
        assert status == 404

    def test_unknown_route_404(self, live):
        base, _, _ = live
        status, doc = http("GET", f"{base}/nonsense")
        assert status == 404


class TestWorkflowOverHttp:
    def test_full_review_cycle(self, live):
        base, store, usable = live
        iid = usable[0].id
        status, doc = http("POST", f"{base}/items/{iid}/run", {})
        assert status == 200 and doc["state"] == "initial"
        status, doc = http("POST", f"{base}/items/{iid}/refine", {"seeds": 2, "refiner": "identity"})
        assert status == 200 and doc["state"] == "variants_ready"
        assert len(doc["variants"]) == 6
        variant = doc["variants"][1]["id"]
        status, doc = http(
            "POST", f"{base}/items/{iid}/decision",
            {"kind": "select", "variant": variant, "expect_version": doc["version"]},
            actor="alice",
        )
        assert status == 200 and doc["state"] == "selected"
        status, doc = http("POST", f"{base}/items/{iid}/annotate", {})
        assert status == 200 and doc["state"] == "annotated"
        status, doc = http("GET", f"{base}/export")
        assert status == 200 and doc["pairs"] == 1
        # the acting human is recorded in the event log
        events = [json.loads(l) for l in store.events_path.read_text().splitlines()[1:]]
        assert any(e["actor"] == "alice" and e["transition"] == "selected" for e in events)

    def test_illegal_transition_is_409(self, live):
        base, store, usable = live
        iid = usable[0].id
        status, doc = http("POST", f"{base}/items/{iid}/annotate", {})
        assert status == 409
        assert "pending" in doc["error"]

    def test_version_conflict_is_409_with_current(self, live):
        base, store, usable = live
        iid = usable[0].id
        status, doc = http(
            "POST", f"{base}/items/{iid}/decision",
            {"kind": "mark_failed", "expect_version": 41},
        )
        assert status == 409
        assert doc["current_version"] == 0

    def test_order_correction_roundtrip(self, live):
        base, store, usable = live
        iid = usable[0].id
        _, before = http("GET", f"{base}/items/{iid}")
        instances = [e["id"] for e in before["instances"]]
        new_order = [i for i in instances if i != iid.split(".")[-1]][:1]
        status, doc = http(
            "POST", f"{base}/items/{iid}/order",
            {"occluders": new_order, "expect_version": before["version"]},
        )
        assert status == 200
        assert doc["state"] == "pending"
        assert [o["id"] for o in doc["occluders"]] == new_order

    def test_stats_counts(self, live):
        base, store, usable = live
        status, doc = http("GET", f"{base}/stats")
        assert status == 200
        assert doc["items"] == len(store.items())
        assert doc["by_state"]["pending"] == len(store.items("pending"))

    def test_unknown_backend_404(self, live):
        base, store, usable = live
        status, doc = http("POST", f"{base}/items/{usable[0].id}/run", {"backend": "sd3"})
        assert status == 404
        assert "unknown backend" in doc["error"]

    def test_cors_preflight(self, live):
        base, _, _ = live
        req = urllib.request.Request(f"{base}/queue", method="OPTIONS")
        with urllib.request.urlopen(req, timeout=10) as resp:
            assert resp.status == 204
            assert resp.headers["Access-Control-Allow-Origin"] == "*"
