"""Command-line interface: exit codes, artifact contracts, overrides, and
byte-identical reruns."""

import json
import subprocess
import sys
from pathlib import Path

import jsonschema
import pytest

from semsdf.cli import METRICS_SCHEMA, main


def write_config(tmp_path, name, payload):
    p = tmp_path / name
    p.write_text(json.dumps(payload))
    return str(p)


def read_bytes_map(root):
    return {p.relative_to(root): p.read_bytes() for p in sorted(Path(root).rglob("*")) if p.is_file()}


class TestRenderCommand:
    def test_four_views_write_image_mask_normal_triples(self, tmp_path, capsys):
        cfg = write_config(tmp_path, "r.json", {
            "scene": "two-sphere",
            "cameras": [{"yaw_deg": y} for y in (-30.0, 0.0, 30.0, 60.0)],
            "resolution": 16, "samples_per_ray": 16,
            "out_dir": str(tmp_path / "out"),
        })
        assert main(["render", "--config", cfg]) == 0
        out = tmp_path / "out"
        for i in range(4):
            for kind in ("image", "mask", "normal"):
                assert (out / f"view{i:02d}_{kind}.png").is_file()
        assert (out / "resolved_config.json").is_file()
        assert "4 view(s)" in capsys.readouterr().out

    def test_same_seed_twice_is_byte_identical(self, tmp_path):
        runs = []
        for tag in ("a", "b"):
            cfg = write_config(tmp_path, f"{tag}.json", {
                "scene": "two-sphere", "resolution": 12, "samples_per_ray": 12,
                "seed": 7, "out_dir": str(tmp_path / tag),
            })
            assert main(["render", "--config", cfg]) == 0
            files = read_bytes_map(tmp_path / tag)
            del files[Path("resolved_config.json")]  # embeds out_dir
            runs.append(files)
        assert runs[0] == runs[1]

    def test_flag_overrides_echo_into_the_resolved_config(self, tmp_path):
        cfg = write_config(tmp_path, "r.json", {
            "scene": "sphere", "resolution": 8, "samples_per_ray": 8,
            "out_dir": str(tmp_path / "ignored"),
        })
        out = tmp_path / "chosen"
        assert main(["render", "--config", cfg, "--resolution", "64",
                     "--samples", "96", "--seed", "5", "--out", str(out)]) == 0
        resolved = json.loads((out / "resolved_config.json").read_text())
        assert resolved["resolution"] == 64
        assert resolved["samples_per_ray"] == 96
        assert resolved["seed"] == 5
        assert resolved["command"] == "render"

    def test_optional_artifacts(self, tmp_path):
        cfg = write_config(tmp_path, "r.json", {
            "scene": "sphere", "resolution": 8, "samples_per_ray": 8,
            "write_depth": True, "write_ppm": True, "mesh_resolution": 16,
            "out_dir": str(tmp_path / "out"),
        })
        assert main(["render", "--config", cfg]) == 0
        out = tmp_path / "out"
        assert (out / "view00_depth.raw").is_file()
        assert (out / "view00_image.ppm").is_file()
        assert (out / "scene_mesh.obj").stat().st_size > 0

    def test_module_entry_point(self, tmp_path):
        cfg = write_config(tmp_path, "r.json", {
            "scene": "sphere", "resolution": 8, "samples_per_ray": 8,
            "with_normals": False, "out_dir": str(tmp_path / "out"),
        })
        proc = subprocess.run([sys.executable, "-m", "semsdf", "render", "--config", cfg],
                              capture_output=True, text=True)
        assert proc.returncode == 0, proc.stderr
        assert (tmp_path / "out" / "view00_image.png").is_file()


class TestUsageErrors:
    def test_missing_config_file(self, tmp_path, capsys):
        assert main(["render", "--config", str(tmp_path / "absent.json")]) == 2
        assert "error:" in capsys.readouterr().err

    def test_invalid_json(self, tmp_path, capsys):
        p = tmp_path / "bad.json"
        p.write_text("{not json")
        assert main(["render", "--config", str(p)]) == 2
        assert "valid JSON" in capsys.readouterr().err

    def test_unknown_config_key(self, tmp_path, capsys):
        cfg = write_config(tmp_path, "r.json", {"scene": "sphere", "rezolution": 8})
        assert main(["render", "--config", cfg]) == 2
        assert "rezolution" in capsys.readouterr().err

    def test_unknown_scene(self, tmp_path, capsys):
        cfg = write_config(tmp_path, "r.json", {"scene": "teapot", "out_dir": str(tmp_path / "o")})
        assert main(["render", "--config", cfg]) == 2
        assert "teapot" in capsys.readouterr().err

    def test_ablation_flag_rejected_where_unsupported(self, tmp_path, capsys):
        cfg = write_config(tmp_path, "r.json", {"scene": "sphere", "out_dir": str(tmp_path / "o")})
        assert main(["render", "--config", cfg, "--ablate", "anything"]) == 2
        assert "does not support" in capsys.readouterr().err

    def test_unknown_ablation_arm(self, tmp_path, capsys):
        cfg = write_config(tmp_path, "f.json", {"steps": 1, "out_dir": str(tmp_path / "o")})
        assert main(["fit", "--config", cfg, "--ablate", "no-gravity"]) == 2
        assert "no-gravity" in capsys.readouterr().err

    def test_bad_worker_override(self, tmp_path, capsys, monkeypatch):
        monkeypatch.setenv("SEMSDF_WORKERS", "three")
        cfg = write_config(tmp_path, "r.json", {"scene": "sphere", "out_dir": str(tmp_path / "o")})
        assert main(["render", "--config", cfg]) == 2
        assert "SEMSDF_WORKERS" in capsys.readouterr().err


def tiny_fit_payload(tmp_path, **overrides):
    payload = {
        "scene": "sphere", "steps": 1, "plane_resolution": 5, "plane_features": 4,
        "shape_hidden": 8, "probes_per_step": 32, "rays_per_step": 8,
        "resolution": 8, "samples_per_ray": 8, "reference_views": 1,
        "out_dir": str(tmp_path / "out"),
    }
    payload.update(overrides)
    return payload


class TestFitCommand:
    def test_writes_checkpoint_log_and_summary(self, tmp_path, capsys):
        cfg = write_config(tmp_path, "f.json", tiny_fit_payload(tmp_path, steps=2))
        assert main(["fit", "--config", cfg]) == 0
        out = tmp_path / "out"
        assert (out / "fitted.ckpt").is_file()
        assert (out / "loss_log.jsonl").is_file()
        assert json.loads((out / "fit_summary.json").read_text())["steps"] == 2
        assert "front mIoU" in capsys.readouterr().out

    def test_divergence_exits_3_and_keeps_the_last_good_checkpoint(self, tmp_path, capsys):
        cfg = write_config(tmp_path, "f.json", tiny_fit_payload(
            tmp_path, steps=30, lr=1e200, grad_clip=0.0, lr_decay=0.0, snapshot_every=0))
        assert main(["fit", "--config", cfg]) == 3
        assert "numerical failure" in capsys.readouterr().err
        from semsdf.triplane import load_checkpoint
        import torch
        pair = load_checkpoint(tmp_path / "out" / "fitted.ckpt")
        assert all(bool(torch.isfinite(t).all()) for t in pair.state_dict().values())

    def test_steps_flag_overrides_the_config(self, tmp_path):
        cfg = write_config(tmp_path, "f.json", tiny_fit_payload(tmp_path, steps=50))
        assert main(["fit", "--config", cfg, "--steps", "0"]) == 0
        resolved = json.loads((tmp_path / "out" / "resolved_config.json").read_text())
        assert resolved["steps"] == 0
        assert (tmp_path / "out" / "loss_log.jsonl").read_text() == ""

    def test_consistency_ablation_is_recorded(self, tmp_path):
        cfg = write_config(tmp_path, "f.json", tiny_fit_payload(tmp_path, steps=1))
        assert main(["fit", "--config", cfg, "--ablate", "no-sdf-consistency"]) == 0
        resolved = json.loads((tmp_path / "out" / "resolved_config.json").read_text())
        assert resolved["ablate"] == "no-sdf-consistency"


def tiny_edit_payload(tmp_path, **overrides):
    payload = {
        "checkpoint": "two-sphere", "target_scene": "two-sphere", "y": "edit",
        "steps": 2, "resolution": 16, "samples_per_ray": 8, "log_every": 1,
        "eval_mesh_resolution": 16, "eval_mesh_samples": 500,
        "out_dir": str(tmp_path / "out"),
    }
    payload.update(overrides)
    return payload


class TestEditCommand:
    def test_writes_log_metrics_and_views(self, tmp_path, capsys):
        cfg = write_config(tmp_path, "e.json", tiny_edit_payload(tmp_path))
        assert main(["edit", "--config", cfg]) == 0
        out = tmp_path / "out"
        metrics = json.loads((out / "edit_metrics.json").read_text())
        assert metrics["steps"] == 2
        assert 0.0 <= metrics["front_miou"] <= 1.0
        assert (out / "edit_log.jsonl").is_file()
        assert (out / "target_mask.png").is_file()
        assert list((out / "views").glob("final_*_image.png"))
        assert "locality ratio" in capsys.readouterr().out

    def test_seeded_rerun_reproduces_the_metrics_exactly(self, tmp_path):
        blobs = []
        for tag in ("a", "b"):
            cfg = write_config(tmp_path, f"{tag}.json",
                               tiny_edit_payload(tmp_path, out_dir=str(tmp_path / tag)))
            assert main(["edit", "--config", cfg]) == 0
            blobs.append((tmp_path / tag / "edit_metrics.json").read_bytes())
        assert blobs[0] == blobs[1]

    def test_ablation_arms_parse_and_run(self, tmp_path):
        for arm in ("no-condition-update", "no-gradient-combination"):
            cfg = write_config(tmp_path, f"{arm}.json", tiny_edit_payload(
                tmp_path, steps=1, out_dir=str(tmp_path / arm)))
            assert main(["edit", "--config", cfg, "--ablate", arm]) == 0
            resolved = json.loads((tmp_path / arm / "resolved_config.json").read_text())
            assert resolved["ablate"] == arm

    def test_missing_target_is_a_usage_error(self, tmp_path, capsys):
        cfg = write_config(tmp_path, "e.json", {"checkpoint": "two-sphere",
                                                "out_dir": str(tmp_path / "o")})
        assert main(["edit", "--config", cfg]) == 2
        assert "target" in capsys.readouterr().err


def metrics_payload(tmp_path, **overrides):
    payload = {
        "scene_a": "two-sphere", "scene_b": "two-sphere",
        "grid_resolution": 32, "num_samples": 2000,
        "resolution": 32, "samples_per_ray": 24,
        "out_dir": str(tmp_path / "out"),
    }
    payload.update(overrides)
    return payload


class TestMetricsCommand:
    def test_scene_vs_itself_is_perfect(self, tmp_path, capsys):
        cfg = write_config(tmp_path, "m.json", metrics_payload(tmp_path))
        assert main(["metrics", "--config", cfg]) == 0
        metrics = json.loads(capsys.readouterr().out)
        assert metrics["chamfer_l1"] == 0.0
        assert metrics["normal_consistency"] >= 1.0 - 1e-12
        assert metrics["miou"] == 1.0

    def test_union_of_locals_matches_the_global_surface(self, tmp_path):
        cfg = write_config(tmp_path, "m.json", metrics_payload(tmp_path, which_b="union"))
        assert main(["metrics", "--config", cfg]) == 0
        metrics = json.loads((tmp_path / "out" / "metrics.json").read_text())
        cell_diag = 4.0 / (32 - 1) * 3 ** 0.5
        assert metrics["chamfer_l1"] < 2 * cell_diag
        assert metrics["normal_consistency"] > 0.95

    def test_report_validates_against_the_schema(self, tmp_path):
        cfg = write_config(tmp_path, "m.json", metrics_payload(tmp_path))
        assert main(["metrics", "--config", cfg]) == 0
        payload = json.loads((tmp_path / "out" / "metrics.json").read_text())
        jsonschema.validate(payload, METRICS_SCHEMA)

    def test_empty_mesh_exits_4(self, tmp_path, capsys):
        cfg = write_config(tmp_path, "m.json", metrics_payload(
            tmp_path, scene_a="sphere@radius=10.0", scene_b="sphere@radius=10.0"))
        assert main(["metrics", "--config", cfg]) == 4
        assert "metric undefined" in capsys.readouterr().err

    def test_class_count_mismatch_is_a_usage_error(self, tmp_path, capsys):
        cfg = write_config(tmp_path, "m.json", metrics_payload(tmp_path, scene_b="sphere"))
        assert main(["metrics", "--config", cfg]) == 2
        assert "class count" in capsys.readouterr().err
