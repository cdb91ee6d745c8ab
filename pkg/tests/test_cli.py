import json
import math
import shutil
from pathlib import Path

import numpy as np
import pytest

from shrinkdeconv.admm import ModelConfig, init_model
from shrinkdeconv.cli import main, nonmonotone_target, parse_target, replay_sidecar, run_ablation
from shrinkdeconv.imgproc import read_image, synthetic_image, write_image, write_kernel
from shrinkdeconv.modelio import save_model

FIXTURES = Path(__file__).parent / "fixtures"


@pytest.fixture
def scene(tmp_path):
    path = tmp_path / "scene.pfm"
    write_image(path, synthetic_image(48, 40, seed=2))
    return path


@pytest.fixture
def delta(tmp_path):
    path = tmp_path / "delta.txt"
    k = np.zeros((3, 3))
    k[1, 1] = 1.0
    write_kernel(path, k)
    return path


def _simulate(scene, out, *extra):
    return main(["simulate", str(scene), "--out", str(out), *extra])


class TestSimulate:
    def test_delta_lossless(self, scene, delta, tmp_path):
        assert _simulate(scene, tmp_path / "o", "--kernel", str(delta), "--sigma", "0") == 0
        np.testing.assert_array_equal(read_image(tmp_path / "o" / "scene.pfm"), read_image(scene))

    def test_same_seed_identical_bytes(self, scene, tmp_path):
        for d in ("a", "b"):
            assert _simulate(scene, tmp_path / d, "--random-kernel", "--seed", "5") == 0
        for name in ("scene.pfm", "scene.kernel.txt"):
            assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()

    def test_sidecar_replay(self, scene, tmp_path):
        _simulate(scene, tmp_path / "o", "--random-kernel", "--kernel-size", "9", "--sigma", "0.02", "--seed", "3")
        meta = json.loads((tmp_path / "o" / "scene.json").read_text())
        assert meta["sigma"] == 0.02 and meta["seed"] == 3 and meta["kernel_shape"] == [9, 9]
        again = replay_sidecar(tmp_path / "o" / "scene.json")
        np.testing.assert_array_equal(np.float32(again), read_image(tmp_path / "o" / "scene.pfm"))

    def test_input_untouched(self, scene, tmp_path):
        before = scene.read_bytes()
        _simulate(scene, tmp_path / "o", "--random-kernel")
        assert scene.read_bytes() == before

    def test_png(self, scene, tmp_path):
        assert _simulate(scene, tmp_path / "o", "--random-kernel", "--format", "png") == 0
        assert (tmp_path / "o" / "scene.png").exists()

    def test_missing_image(self, tmp_path):
        assert _simulate(tmp_path / "nope.png", tmp_path / "o", "--random-kernel") == 2

    def test_negative_sigma(self, scene, tmp_path):
        assert _simulate(scene, tmp_path / "o", "--random-kernel", "--sigma", "-1") == 3

    def test_bad_flag(self, scene, tmp_path):
        with pytest.raises(SystemExit) as exc:
            _simulate(scene, tmp_path / "o", "--random-kernel", "--format", "gif")
        assert exc.value.code == 3


class TestDeblur:
    def test_identity_delta(self, scene, delta, tmp_path, capsys):
        _simulate(scene, tmp_path / "o", "--kernel", str(delta), "--sigma", "0")
        out = tmp_path / "r.pfm"
        assert main(["deblur", str(tmp_path / "o" / "scene.pfm"), "--prior", "identity", "--out", str(out)]) == 0
        np.testing.assert_allclose(read_image(out), read_image(scene), atol=1e-6)
        err = capsys.readouterr().err
        assert "stages=" in err and "cg_iterations=" in err and "wall=" in err

    def test_cg_matches_fft_periodic(self, scene, tmp_path):
        _simulate(scene, tmp_path / "o", "--random-kernel", "--kernel-size", "7", "--sigma", "0",
                  "--boundary", "periodic")
        blurry = str(tmp_path / "o" / "scene.pfm")
        outs = {}
        for solver in ("cg", "fft"):
            outs[solver] = tmp_path / f"{solver}.pfm"
            assert main(["deblur", blurry, "--prior", "l1", "--solver", solver, "--boundary", "periodic",
                         "--out", str(outs[solver])]) == 0
        a, b = read_image(outs["cg"]), read_image(outs["fft"])
        assert np.linalg.norm(a - b) / np.linalg.norm(b) <= 1e-4

    def test_kernel_mismatch(self, scene, delta, tmp_path):
        _simulate(scene, tmp_path / "o", "--random-kernel", "--kernel-size", "5")
        code = main(["deblur", str(tmp_path / "o" / "scene.pfm"), str(delta), "--out", str(tmp_path / "r.pfm")])
        assert code == 3

    def test_no_kernel_no_sidecar(self, scene, tmp_path):
        assert main(["deblur", str(scene), "--out", str(tmp_path / "r.pfm")]) == 3

    def test_missing_blurry(self, tmp_path, delta):
        assert main(["deblur", str(tmp_path / "x.pfm"), str(delta), "--out", str(tmp_path / "r.pfm")]) == 2

    def test_model_file(self, scene, delta, tmp_path):
        path = tmp_path / "m.dsdm"
        save_model(init_model(ModelConfig(T=1, N=2, M=2), seed=0), path)
        assert main(["deblur", str(scene), str(delta), "--model", str(path), "--out", str(tmp_path / "r.pfm")]) == 0

    def test_corrupt_model(self, scene, delta, tmp_path):
        path = tmp_path / "m.dsdm"
        path.write_bytes(b"garbage")
        assert main(["deblur", str(scene), str(delta), "--model", str(path), "--out", str(tmp_path / "r.pfm")]) == 3

    def test_numerical_failure(self, scene, delta, tmp_path):
        m = init_model(ModelConfig(T=1, N=2, M=2), seed=0)
        p = m.params()
        p["stages.0.shrink_v.a1"] = np.full_like(p["stages.0.shrink_v.a1"], 1e308)
        path = tmp_path / "m.dsdm"
        save_model(m.with_params(p), path)
        with np.errstate(all="ignore"):
            code = main(["deblur", str(scene), str(delta), "--model", str(path), "--out", str(tmp_path / "r.pfm")])
        assert code == 4


class TestEvaluate:
    def test_identical_dirs(self, tmp_path, capsys):
        d = tmp_path / "gt"
        d.mkdir()
        for i in range(2):
            write_image(d / f"im{i}.pfm", synthetic_image(24, 24, seed=i))
        assert main(["evaluate", str(d), str(d), "--report", "json"]) == 0
        rows = json.loads(capsys.readouterr().out)
        assert [r["image"] for r in rows] == ["im0", "im1", "mean"]
        assert all(r["ssim"] == pytest.approx(1.0, abs=1e-12) for r in rows)
        assert all(math.isinf(r["psnr"]) for r in rows)

    def test_golden(self, tmp_path):
        ev = FIXTURES / "evaluate"
        out = tmp_path / "report.csv"
        assert main(["evaluate", str(ev / "restored"), str(ev / "gt"), "--out", str(out)]) == 0
        assert out.read_text() == (ev / "golden.csv").read_text()

    def test_golden_flat_row_analytic(self):
        row = (FIXTURES / "evaluate" / "golden.csv").read_text().splitlines()[1].split(",")
        # 0.5 against 0.75 everywhere: MSE 1/16, and SSIM reduces to the luminance term
        assert float(row[1]) == pytest.approx(10 * math.log10(16), abs=1e-6)
        assert float(row[2]) == pytest.approx((0.75 + 1e-4) / (0.8125 + 1e-4), abs=1e-6)

    def test_missing_file(self, tmp_path, capsys):
        ev = FIXTURES / "evaluate"
        restored = tmp_path / "restored"
        shutil.copytree(ev / "restored", restored)
        (restored / "scene.pfm").unlink()
        assert main(["evaluate", str(restored), str(ev / "gt")]) == 3
        assert "scene" in capsys.readouterr().err

    def test_jobs(self, tmp_path):
        ev = FIXTURES / "evaluate"
        out = tmp_path / "report.csv"
        assert main(["evaluate", str(ev / "restored"), str(ev / "gt"), "--jobs", "2", "--out", str(out)]) == 0
        assert out.read_text() == (ev / "golden.csv").read_text()

    def test_not_a_directory(self, tmp_path):
        assert main(["evaluate", str(tmp_path / "a"), str(tmp_path / "b")]) == 2


class TestAblate:
    def test_periodic_noise_free_equivalence(self):
        imgs = [(f"im{i}", synthetic_image(48, 48, seed=i)) for i in range(2)]
        per_image, table = run_ablation(imgs, ("cg", "fft"), prior="l1", sigma=0.0, kernel_size=9,
                                        boundary="periodic")
        rows = {r["variant"]: r for r in table}
        assert rows["cg"]["psnr"] == pytest.approx(rows["fft"]["psnr"], abs=1e-3)

    def test_replicate_taper_helps(self):
        imgs = [(f"im{i}", synthetic_image(64, 64, seed=20 + i)) for i in range(5)]
        per_image, _ = run_ablation(imgs, ("fft", "fft+edgetaper"), kernel_size=13, boundary="replicate")
        wins = sum(r["fft+edgetaper:psnr"] >= r["fft:psnr"] for r in per_image)
        assert wins >= 0.8 * len(per_image)

    def test_cli_table(self, tmp_path):
        out = tmp_path / "t.csv"
        code = main(["ablate", "--synthetic", "1", "--size", "32", "--kernel-size", "5",
                     "--variants", "cg,fft", "--out", str(out), "--per-image", str(tmp_path / "p.csv")])
        assert code == 0
        lines = out.read_text().splitlines()
        assert lines[0] == "variant,psnr,ssim,seconds"
        assert [ln.split(",")[0] for ln in lines[1:]] == ["blurry", "cg", "fft"]
        assert (tmp_path / "p.csv").exists()

    def test_deterministic(self, tmp_path):
        args = ["ablate", "--synthetic", "1", "--size", "32", "--kernel-size", "5", "--variants", "fft",
                "--report", "json"]
        main(args + ["--per-image", str(tmp_path / "a.json"), "--out", str(tmp_path / "sa.json")])
        main(args + ["--per-image", str(tmp_path / "b.json"), "--out", str(tmp_path / "sb.json")])
        a = json.loads((tmp_path / "a.json").read_text())
        b = json.loads((tmp_path / "b.json").read_text())
        assert a[0]["fft:psnr"] == b[0]["fft:psnr"]

    def test_bad_variant(self):
        assert main(["ablate", "--synthetic", "1", "--variants", "cg,lu"]) == 3

    def test_no_input(self):
        assert main(["ablate"]) == 3


class TestFitProx:
    def test_soft(self, tmp_path, capsys):
        out = tmp_path / "fit.json"
        assert main(["fit-prox", "--target", "soft:0.1", "--K", "4", "--out", str(out)]) == 0
        report = json.loads(out.read_text())
        assert report["max_residual"] <= 1e-3
        assert set(report["params"]) == {"a1", "b1", "a2", "b2"}
        assert "max_residual=" in capsys.readouterr().out

    def test_bad_target(self):
        assert main(["fit-prox", "--target", "cubic:2"]) == 3

    def test_parse_target(self):
        t = np.array([-0.5, 0.05, 0.3])
        np.testing.assert_allclose(parse_target("soft:0.1")(t), [-0.4, 0.0, 0.2])
        np.testing.assert_allclose(parse_target("hard:0.2")(t), [-0.5, 0.0, 0.3])
        assert parse_target("nonmono") is nonmonotone_target

    def test_nonmonotone(self):
        t = np.linspace(0, 1, 1001)
        assert np.any(np.diff(nonmonotone_target(t)) < 0)
        assert nonmonotone_target(np.array([0.0]))[0] == 0.0


class TestTrainCommand:
    def _config(self):
        return {
            "model": {"T": 1, "N": 2, "M": 2, "solver": "fft", "boundary": "periodic"},
            "train": {"steps": 2, "batch_size": 1, "patch_size": 16},
            "data": {"n_train": 2, "kernel_sizes": [3, 5]},
        }

    def test_runs(self, tmp_path):
        cfg = tmp_path / "c.json"
        cfg.write_text(json.dumps(self._config()))
        assert main(["train", str(cfg), "--out", str(tmp_path / "run")]) == 0
        for name in ("model.dsdm", "metrics.csv", "train_config.json"):
            assert (tmp_path / "run" / name).exists()

    def test_schema_rejects_unknown_key(self, tmp_path, capsys):
        c = self._config()
        c["train"]["learning_rate"] = 0.1
        cfg = tmp_path / "c.json"
        cfg.write_text(json.dumps(c))
        assert main(["train", str(cfg), "--out", str(tmp_path / "run")]) == 3
        assert "train" in capsys.readouterr().err

    def test_schema_rejects_bad_type(self, tmp_path):
        c = self._config()
        c["train"]["steps"] = "many"
        cfg = tmp_path / "c.json"
        cfg.write_text(json.dumps(c))
        assert main(["train", str(cfg), "--out", str(tmp_path / "run")]) == 3

    def test_invalid_json(self, tmp_path):
        cfg = tmp_path / "c.json"
        cfg.write_text("{")
        assert main(["train", str(cfg), "--out", str(tmp_path / "run")]) == 3

    def test_missing_config(self, tmp_path):
        assert main(["train", str(tmp_path / "none.json"), "--out", str(tmp_path / "run")]) == 2
