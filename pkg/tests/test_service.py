import json

import numpy as np
import pytest
from fastapi.testclient import TestClient

from granseg.hierarchy import labels_to_json, save_labels
from granseg.masks import rle_decode
from granseg.service import create_app, load_state


@pytest.fixture()
def data_dir(tmp_path, three_instance_labels):
    save_labels(three_instance_labels, tmp_path / "fixture.labels.json")
    other = three_instance_labels
    save_labels(other, tmp_path / "second.labels.json")
    return tmp_path


@pytest.fixture()
def client(data_dir):
    return TestClient(create_app(load_state(data_dir)))


def test_load_state_empty_dir(tmp_path):
    with pytest.raises(ValueError, match="no label files"):
        load_state(tmp_path)


def test_load_state_missing_dir(tmp_path):
    with pytest.raises(FileNotFoundError):
        load_state(tmp_path / "nope")


def test_load_state_corrupt_file_enumerated(tmp_path, three_instance_labels):
    save_labels(three_instance_labels, tmp_path / "good.labels.json")
    (tmp_path / "bad.labels.json").write_text("{not json")
    with pytest.raises(ValueError, match="bad.labels.json"):
        load_state(tmp_path)


def test_load_state_invariants_enforced(tmp_path, three_instance_labels):
    doc = json.loads(labels_to_json(three_instance_labels))
    doc["hierarchies"][0]["root"]["granularity"] = 0.5
    (tmp_path / "broken.labels.json").write_text(json.dumps(doc))
    with pytest.raises(ValueError, match="granularity"):
        load_state(tmp_path)


def test_list_images(client):
    r = client.get("/api/images")
    assert r.status_code == 200
    body = r.json()
    assert len(body) == 2
    assert body[0]["id"] == "fixture" and body[0]["width"] == 96


def test_hierarchy_passthrough(client, three_instance_labels):
    r = client.get("/api/images/fixture/hierarchy")
    assert r.status_code == 200
    assert r.text == labels_to_json(three_instance_labels)


def test_unknown_image_404(client):
    assert client.get("/api/images/nope/hierarchy").status_code == 404
    assert client.get("/api/images/nope/mask", params={"x": 0, "y": 0, "g": 0.5}).status_code == 404


def test_mask_query_matches_stored(client, three_instance_labels):
    root = three_instance_labels.hierarchies[0].root
    px = root.pixels()
    ys, xs = np.nonzero(px)
    r = client.get("/api/images/fixture/mask", params={"x": int(xs[0]), "y": int(ys[0]), "g": 1.0})
    assert r.status_code == 200
    body = r.json()
    assert body["granularity"] == 1.0
    assert body["mask"] == root.mask  # byte-identical RLE passthrough


def test_mask_query_background_null(client, three_instance_labels):
    r = client.get("/api/images/fixture/mask", params={"x": 95, "y": 95, "g": 0.5})
    assert r.status_code == 200
    assert r.json() == {"mask": None, "granularity": None, "instance_id": None}


def test_mask_query_out_of_range(client):
    assert client.get("/api/images/fixture/mask", params={"x": 0, "y": 0, "g": 0.05}).status_code == 422
    assert client.get("/api/images/fixture/mask", params={"x": 500, "y": 0, "g": 0.5}).status_code == 422


def test_refine_excludes_sibling(client, three_instance_labels):
    h = three_instance_labels.hierarchies[0]
    child = h.children[-1]
    cpx = child.pixels()
    root_px = h.root.pixels()
    ys, xs = np.nonzero(cpx)
    cx, cy = int(xs[len(xs) // 2]), int(ys[len(ys) // 2])
    ys2, xs2 = np.nonzero(root_px & ~cpx)
    ox, oy = int(xs2[0]), int(ys2[0])
    r = client.post(
        "/api/images/fixture/refine",
        json={"clicks": [{"x": cx, "y": cy, "positive": True}, {"x": ox, "y": oy, "positive": False}], "g": 1.0},
    )
    assert r.status_code == 200
    body = r.json()
    assert body["mask"] is not None
    got = rle_decode(body["mask"])
    assert got[cy, cx] and not got[oy, ox]


def test_refine_validation(client):
    r = client.post("/api/images/fixture/refine", json={"clicks": [], "g": 0.5})
    assert r.status_code == 422
    r = client.post(
        "/api/images/fixture/refine",
        json={"clicks": [{"x": 1, "y": 1, "positive": False}], "g": 0.5},
    )
    assert r.status_code == 422


def test_same_request_byte_identical(client):
    a = client.get("/api/images/fixture/mask", params={"x": 20, "y": 20, "g": 0.7})
    b = client.get("/api/images/fixture/mask", params={"x": 20, "y": 20, "g": 0.7})
    assert a.content == b.content


def test_raw_image_served(data_dir, three_instance_labels):
    png = bytes.fromhex("89504e470d0a1a0a") + b"\x00" * 8
    (data_dir / "fixture.png").write_bytes(png)
    client = TestClient(create_app(load_state(data_dir)))
    r = client.get("/api/images/fixture/raw")
    assert r.status_code == 200
    assert r.content == png
    assert r.headers["content-type"] == "image/png"
    assert client.get("/api/images/second/raw").status_code == 404
