#!/usr/bin/env python3
"""Spin up a populated review service for poking at the workflow or the
browser frontend:

    python scripts/run_review_demo.py --port 8765
    # then, in frontend/:  npm run dev  and open the printed URL

The demo enqueues a synthetic dataset and registers the oracle (exact),
heuristic, and identity backends.
"""

import argparse
import tempfile
from pathlib import Path

from amodalkit import scenes
from amodalkit.backends import HeuristicBackend, IdentityBackend, OracleBackend
from amodalkit.cosynth import CosynthStore
from amodalkit.service import CosynthService, serve_forever


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--port", type=int, default=8765)
    ap.add_argument("--host", default="127.0.0.1")
    ap.add_argument("--scenes", type=int, default=10)
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--data", help="store directory (default: a temp dir)")
    args = ap.parse_args()

    data = Path(args.data) if args.data else Path(tempfile.mkdtemp(prefix="review-demo-"))
    cfg = scenes.SceneConfig(canvas=(64, 64), layer_range=(2, 4), size_range=(16, 40))
    scene_list = [scenes.sample_scene(cfg, args.seed + i) for i in range(args.scenes)]
    manifest = scenes.emit_dataset(scene_list, data / "dataset")
    store = CosynthStore(data / "store")
    added = store.enqueue(manifest)
    loaded = [scenes.load_record(manifest, r) for r in manifest.occluded]
    backends = {
        "oracle": OracleBackend.from_records(loaded),
        "heuristic": HeuristicBackend(),
        "identity": IdentityBackend(),
    }
    print(f"data dir: {data}")
    print(f"enqueued {added} review items")
    print(f"frontend: cd frontend && npm run dev -- --open '/?api=http://{args.host}:{args.port}'")
    service = CosynthService(store, backends, default_backend="oracle")
    serve_forever(service, args.host, args.port)


if __name__ == "__main__":
    main()
