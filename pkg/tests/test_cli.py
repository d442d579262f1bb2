import json
from pathlib import Path

import numpy as np
import pytest
from PIL import Image

from radfarm import assetio
from radfarm.cli import main
from radfarm.datasets import load_dataset, save_dataset
from radfarm.errors import DataError
from radfarm.scenes import make_dataset, sphere_scene


SMOKE = [
    "--set", "density_steps=10", "--set", "lightfield_steps=5",
    "--set", "train_views=4", "--set", "test_views=2",
    "--set", "image_size=32", "--set", "atlas_base=16", "--set", "atlas_cube=4",
    "--set", "shell_cameras=12", "--set", "shell_image_size=12",
    "--set", "psh_resolution=16", "--set", "density_samples=32",
    "--set", "lightfield_batch=512", "--set", "density_batch=512",
]


class TestTrainCommand:
    def test_zero_step_budget_still_writes_a_renderable_asset(self, tmp_path):
        out = tmp_path / "run"
        code = main(
            ["train", "--scene", "sphere", "--out", str(out)]
            + SMOKE[:2]  # density_steps=10 still needed for geometry
            + ["--set", "lightfield_steps=0"]
            + SMOKE[4:]
        )
        assert code == 0
        asset = assetio.read_asset(out / "sphere.nolf")
        from radfarm.pipeline import render_asset_frame
        from radfarm.scenes import orbit_camera

        frame = render_asset_frame(asset, orbit_camera(0.3, 0.2, size=24))
        frame.validate()
        manifest = json.loads((out / "manifest.json").read_text())
        assert manifest["config"]["lightfield_steps"] == 0
        assert "config_hash" in manifest

    def test_unknown_config_key_is_exit_2(self, tmp_path):
        code = main(["train", "--scene", "sphere", "--out", str(tmp_path),
                     "--set", "bogus_key=1"])
        assert code == 2

    def test_unknown_scene_is_exit_3(self, tmp_path):
        code = main(["train", "--scene", "/nonexistent/dir", "--out", str(tmp_path)])
        assert code == 3

    def test_corrupt_image_is_exit_3(self, tmp_path):
        data_dir = tmp_path / "data"
        images, alphas, cameras = make_dataset(sphere_scene(), 3, size=16, seed=0)
        save_dataset(data_dir, images, alphas, cameras)
        (data_dir / "view_001.png").write_bytes(b"not a png")
        code = main(["train", "--scene", str(data_dir), "--out", str(tmp_path / "o")] + SMOKE)
        assert code == 3


class TestDatasetRoundTrip:
    def test_save_and_load(self, tmp_path):
        images, alphas, cameras = make_dataset(sphere_scene(), 3, size=24, seed=0)
        save_dataset(tmp_path / "d", images, alphas, cameras)
        li, la, lc = load_dataset(tmp_path / "d")
        assert li.shape == images.shape
        # premultiplied round trip through 8-bit PNG
        assert np.abs(li - images).max() < 2 / 255
        assert np.abs(la - alphas).max() < 1.5 / 255
        np.testing.assert_allclose(lc[0].pose, cameras[0].pose)

    def test_dataset_command(self, tmp_path):
        code = main(["dataset", "--scene", "box", "--views", "2", "--size", "16",
                     "--out", str(tmp_path / "ds")])
        assert code == 0
        assert (tmp_path / "ds" / "cameras.json").is_file()


@pytest.fixture(scope="module")
def trained_dir(tmp_path_factory, toy_asset):
    out = tmp_path_factory.mktemp("assets")
    assetio.write_asset(toy_asset, out / "toy.nolf")
    return out


class TestRenderCommand:
    def test_single_frame_outputs(self, trained_dir, tmp_path):
        out = tmp_path / "r"
        code = main(["render", "--asset", str(trained_dir / "toy.nolf"),
                     "--path", "orbit:frames=1,size=32", "--out", str(out)])
        assert code == 0
        assert (out / "frame_000.png").is_file()
        assert (out / "depth_000.png").is_file()
        rows = (out / "timing.csv").read_text().strip().splitlines()
        assert len(rows) == 2  # header + one frame

    def test_same_seed_renders_identical_images(self, trained_dir, tmp_path):
        outs = []
        for name in ("a", "b"):
            out = tmp_path / name
            main(["render", "--asset", str(trained_dir / "toy.nolf"),
                  "--path", "orbit:frames=2,size=24", "--out", str(out)])
            outs.append(np.asarray(Image.open(out / "frame_001.png")))
        np.testing.assert_array_equal(outs[0], outs[1])

    def test_scene_json_composes_multiple_assets(self, trained_dir, tmp_path):
        shifted = np.eye(4)
        shifted[:3, 3] = [0.2, 0.0, 0.0]
        scene = {
            "assets": [
                {"file": "toy.nolf"},
                {"file": "toy.nolf", "transform": shifted.reshape(-1).tolist()},
            ]
        }
        scene_file = trained_dir / "scene.json"
        scene_file.write_text(json.dumps(scene))
        out = tmp_path / "multi"
        code = main(["render", "--scene-json", str(scene_file),
                     "--path", "orbit:frames=1,size=32", "--out", str(out)])
        assert code == 0
        sidecar = json.loads((out / "render.json").read_text())
        assert sidecar["frames"] == 1
        assert sidecar["total_fs_evals"] >= sidecar["total_hit_pixels"] > 0

    def test_render_without_inputs_is_exit_2(self, tmp_path):
        assert main(["render", "--out", str(tmp_path), "--path", "orbit:frames=1"]) == 2

    def test_zoom_path_produces_monotone_hits(self, trained_dir, tmp_path):
        out = tmp_path / "z"
        code = main(["render", "--asset", str(trained_dir / "toy.nolf"),
                     "--path", "zoom:frames=4,size=48,start=4.0,end=1.2",
                     "--out", str(out)])
        assert code == 0
        import csv as csvmod

        with open(out / "timing.csv") as f:
            hits = [int(r["hit_pixels"]) for r in csvmod.DictReader(f)]
        assert hits[-1] > hits[0]


class TestSimulateCommand:
    def test_runs_and_writes_outputs(self, tmp_path):
        workload = {
            "tick_ms": 5.0,
            "duration_ticks": 300,
            "farm": {"heavy_slots": 2, "light_workers": 2, "rays_per_tick": 8192},
            "model": {"bandwidth_bytes_per_s": 1e9, "compose_s": 0.001, "bytes_per_ray": 6},
            "users": [
                {"id": "u0", "target_fps": 20, "join_tick": 0, "asset": "toy",
                 "tiles_per_frame": 2, "rays_per_tile": 1024,
                 "render_s_per_tile": 0.002, "pose_cell_ticks": 30},
            ],
        }
        wfile = tmp_path / "w.json"
        wfile.write_text(json.dumps(workload))
        out = tmp_path / "sim"
        code = main(["simulate", "--workload", str(wfile), "--out", str(out)])
        assert code == 0
        metrics = json.loads((out / "metrics.json").read_text())
        assert metrics["frames_total"]["u0"] > 0
        assert (out / "trace.csv").is_file()

    def test_schema_violation_is_exit_2(self, tmp_path):
        wfile = tmp_path / "w.json"
        wfile.write_text(json.dumps({"duration_ticks": 10, "users": [], "junk": 1}))
        assert main(["simulate", "--workload", str(wfile), "--out", str(tmp_path / "o")]) == 2


class TestBenchCommand:
    def test_encoder_mode(self, trained_dir, tmp_path):
        out = tmp_path / "b"
        code = main(["bench", "--mode", "encoder",
                     "--asset", str(trained_dir / "toy.nolf"), "--out", str(out)])
        assert code == 0
        report = json.loads((out / "bench.json").read_text())
        assert report["throughput"]["psh_points_per_s"] > 0
        assert "psh_mean_slot_delta" in report["slot_trace"]
