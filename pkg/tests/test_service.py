"""HTTP facade: endpoints, wire formats, caching and session lifecycle."""

import base64

import numpy as np
import pytest
from fastapi.testclient import TestClient

from gnrf.field import GearedModel, ModelConfig
from gnrf.sceneio import (SPHERE_ID, decode_ppm, decode_tensor, preset_by_name,
                          synth_scene)
from gnrf.semantic import Mask
from gnrf.service import create_app, gear_to_rgb, rle_payload
from gnrf.train import TrainConfig, train


@pytest.fixture(scope="module")
def service(tmp_path_factory):
    preset = preset_by_name("two-objects", frames=3, image_size=32,
                            camera_count=3, holdout_count=1, traj_period=24)
    scene = synth_scene(preset, tmp_path_factory.mktemp("scene"))
    cfg = ModelConfig(n_gear=2, m=16, d_feat=scene.d_feat, spatial_res=24,
                      frames=scene.frames, bbox_min=tuple(scene.bbox_min),
                      bbox_max=tuple(scene.bbox_max), hidden_width=32, dir_freqs=2)
    model = GearedModel.create(cfg, np.random.default_rng(4))
    tcfg = TrainConfig(epochs_per_cycle=2, final_epochs=5, max_cycles=2,
                       rays_per_batch=2048, n_samples=16, probe_views=2,
                       probe_times=2, patch_size=8, v_stop=1e-6, workers=2, seed=4)
    model, _ = train(model, scene, tcfg)
    app = create_app(model=model, scene=scene, n_samples=16)
    return TestClient(app), scene, model


class TestSceneMeta:
    def test_metadata_fields(self, service):
        client, scene, model = service
        meta = client.get("/scene").json()
        assert meta["frames"] == scene.frames
        assert meta["n_gear"] == model.config.n_gear
        assert meta["d_feat"] == model.config.d_feat
        assert len(meta["cameras"]) == len(scene.cameras)


class TestRender:
    def test_render_by_view_id(self, service):
        client, scene, model = service
        r = client.post("/render", json={"pose": {"view": "cam00"}, "time": 0,
                                         "layers": ["rgb", "depth"]})
        assert r.status_code == 200
        payload = r.json()
        rgb = decode_ppm(base64.b64decode(payload["layers"]["rgb"]))
        assert rgb.shape == (32, 32, 3)
        depth = decode_tensor(base64.b64decode(payload["layers"]["depth"]))
        assert depth.shape == (32, 32)

    def test_matches_direct_render(self, service):
        from gnrf.render import render_layers
        from gnrf.sceneio import encode_ppm
        client, scene, model = service
        r = client.post("/render", json={"pose": {"view": "cam01"}, "time": 1,
                                         "layers": ["rgb"]})
        direct = render_layers(model, scene.camera("cam01"), 1, layers=("rgb",),
                               n_samples=16)
        assert base64.b64decode(r.json()["layers"]["rgb"]) == encode_ppm(direct.rgb)

    def test_explicit_pose(self, service):
        client, scene, model = service
        cam = scene.camera("cam00")
        pose = {"rotation": cam.rotation.reshape(-1).tolist(),
                "translation": cam.position.tolist(),
                "fx": cam.fx, "fy": cam.fy, "cx": cam.cx, "cy": cam.cy,
                "width": 16, "height": 16}
        r = client.post("/render", json={"pose": pose, "time": 0, "layers": ["rgb"]})
        assert r.status_code == 200

    def test_bad_rotation_400(self, service):
        client, scene, model = service
        pose = {"rotation": [2, 0, 0, 0, 1, 0, 0, 0, 1], "translation": [0, 0, 0],
                "fx": 10, "fy": 10, "cx": 8, "cy": 8, "width": 16, "height": 16}
        r = client.post("/render", json={"pose": pose, "time": 0})
        assert r.status_code == 400

    def test_unknown_view_400(self, service):
        client, _, _ = service
        r = client.post("/render", json={"pose": {"view": "nope"}, "time": 0})
        assert r.status_code == 400

    def test_unknown_layer_400(self, service):
        client, _, _ = service
        r = client.post("/render", json={"pose": {"view": "cam00"}, "layers": ["x"]})
        assert r.status_code == 400

    def test_oversize_image_413(self, service):
        client, scene, _ = service
        cam = scene.camera("cam00")
        pose = {"rotation": cam.rotation.reshape(-1).tolist(),
                "translation": cam.position.tolist(),
                "fx": 10, "fy": 10, "cx": 8, "cy": 8, "width": 4096, "height": 4096}
        r = client.post("/render", json={"pose": pose, "time": 0})
        assert r.status_code == 413

    def test_concurrent_equals_serial(self, service):
        import concurrent.futures
        client, _, _ = service
        body = {"pose": {"view": "cam00"}, "time": 0, "layers": ["rgb"], "stride": 2}
        serial = client.post("/render", json=body).json()["layers"]["rgb"]
        with concurrent.futures.ThreadPoolExecutor(4) as ex:
            results = list(ex.map(lambda _: client.post("/render", json=body)
                                  .json()["layers"]["rgb"], range(4)))
        assert all(r == serial for r in results)


class TestTrack:
    def _click(self, scene, cam_id="cam00", t=0):
        ids = scene.object_ids(cam_id, t)
        ys, xs = np.nonzero(ids == SPHERE_ID)
        k = len(xs) // 2
        return int(xs[k]), int(ys[k])

    def test_click_query_delete_flow(self, service):
        client, scene, _ = service
        u, v = self._click(scene)
        r = client.post("/track/click", json={"pose": {"view": "cam00"},
                                              "time": 0, "pixel": [u, v]})
        if r.status_code == 422:
            pytest.skip("micro model: no surface under click")
        assert r.status_code == 200
        body = r.json()
        tid = body["track_id"]
        mask = Mask.from_rle([tuple(x) for x in body["mask"]["runs"]],
                             body["mask"]["width"], body["mask"]["height"])
        assert mask.values.shape == (32, 32)
        q = client.post("/track/query", json={"track_id": tid,
                                              "pose": {"view": "cam00"}, "time": 0})
        assert q.status_code == 200
        assert q.json()["mask"] == body["mask"]
        assert client.delete(f"/track/{tid}").status_code == 200
        q2 = client.post("/track/query", json={"track_id": tid,
                                               "pose": {"view": "cam00"}, "time": 0})
        assert q2.status_code == 404

    def test_no_surface_click_422(self, service, monkeypatch):
        from gnrf import track as track_mod
        client, scene, _ = service
        monkeypatch.setattr(track_mod, "click_to_point", lambda *a, **k: (None, None))
        r = client.post("/track/click", json={"pose": {"view": "cam00"},
                                              "time": 0, "pixel": [1, 1]})
        assert r.status_code == 422
        assert r.json()["detail"]["status"] == "no-surface"

    def test_unknown_track_404(self, service):
        client, _, _ = service
        r = client.post("/track/query", json={"track_id": "nope",
                                              "pose": {"view": "cam00"}, "time": 0})
        assert r.status_code == 404

    def test_bad_pixel_400(self, service):
        client, _, _ = service
        r = client.post("/track/click", json={"pose": {"view": "cam00"},
                                              "time": 0, "pixel": [99, 0]})
        assert r.status_code == 400

    def test_cached_query_never_rerenders(self, service):
        client, scene, _ = service
        u, v = self._click(scene)
        r = client.post("/track/click", json={"pose": {"view": "cam00"},
                                              "time": 0, "pixel": [u, v]})
        if r.status_code == 422:
            pytest.skip("micro model: no surface under click")
        tid = r.json()["track_id"]
        body = {"track_id": tid, "pose": {"view": "cam00"}, "time": 0}
        client.post("/track/query", json=body)
        before = client.get("/stats").json()
        client.post("/track/query", json=body)
        after = client.get("/stats").json()
        assert after["decode_calls"] == before["decode_calls"]
        assert after["cache_hits"] == before["cache_hits"] + 1

    def test_session_lru_eviction(self, service):
        from gnrf import service as svc
        client, scene, _ = service
        u, v = self._click(scene)
        first = client.post("/track/click", json={"pose": {"view": "cam00"},
                                                  "time": 0, "pixel": [u, v]})
        if first.status_code == 422:
            pytest.skip("micro model: no surface under click")
        first_id = first.json()["track_id"]
        original_cap = svc.SESSION_CAP
        svc.SESSION_CAP = 3
        try:
            for _ in range(4):
                r = client.post("/track/click", json={"pose": {"view": "cam00"},
                                                      "time": 0, "pixel": [u, v]})
                assert r.status_code == 200
        finally:
            svc.SESSION_CAP = original_cap
        q = client.post("/track/query", json={"track_id": first_id,
                                              "pose": {"view": "cam00"}, "time": 0})
        assert q.status_code == 404


class TestRle:
    def test_encoder_reproduces_golden_vectors(self):
        # the same vectors pin the viewer's decoder (frontend/golden)
        import json
        from pathlib import Path
        golden = json.loads(Path(__file__).parent.parent
                            .joinpath("frontend/golden/rle_vectors.json").read_text())
        assert len(golden) >= 10
        for vec in golden:
            bits = np.array([c == "1" for c in vec["bits"]])
            mask = Mask(bits.reshape(vec["height"], vec["width"]))
            assert [[s, l] for s, l in mask.rle()] == vec["runs"]

    def test_payload_round_trip_property(self):
        rng = np.random.default_rng(5)
        for _ in range(1000):
            h, w = rng.integers(1, 65, size=2)
            values = rng.random((h, w)) < rng.uniform(0.05, 0.95)
            payload = rle_payload(Mask(values))
            back = Mask.from_rle([tuple(r) for r in payload["runs"]],
                                 payload["width"], payload["height"])
            np.testing.assert_array_equal(back.values, values)

    def test_gear_palette_shape(self):
        img = gear_to_rgb(np.array([[0, 1], [2, 4]]))
        assert img.shape == (2, 2, 3)
        np.testing.assert_array_equal(img[0, 0], [0, 0, 0])
