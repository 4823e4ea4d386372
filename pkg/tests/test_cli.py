"""Command-line surface tests (direct main() invocations)."""

import numpy as np
import pytest

from opblend.blocks import DsanConfig, bind_dsan, dsan_forward, init_dsan_params
from opblend.autodiff import Tensor
from opblend.cli import main
from opblend.data import read_image, to_nchw
from opblend.metrics import psnr, ssim, ssim_db
from opblend.weights import interpolate, load_archive, save_archive

from test_data import write_pgm

CFG = DsanConfig(channels=3, in_channels=1)


@pytest.fixture(scope="module")
def models(tmp_path_factory):
    d = tmp_path_factory.mktemp("models")
    a, b = d / "a.cei", d / "b.cei"
    save_archive(init_dsan_params(CFG, seed=0), a)
    save_archive(init_dsan_params(CFG, seed=1), b)
    return a, b


@pytest.fixture(scope="module")
def image(tmp_path_factory):
    d = tmp_path_factory.mktemp("img")
    p = d / "input.pgm"
    rng = np.random.default_rng(2)
    write_pgm(p, rng.integers(0, 256, size=(16, 16), dtype=np.uint8))
    return p


@pytest.fixture(scope="module")
def dataset(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli_ds")
    inputs = root / "inputs"
    inputs.mkdir()
    rng = np.random.default_rng(3)
    for i in range(6):
        write_pgm(inputs / f"i{i}.pgm", rng.integers(0, 256, size=(24, 24), dtype=np.uint8))
    assert main(["gen-data", "--inputs", str(inputs), "--out", str(root / "ds"),
                 "--strength", "1.0", "--seed", "0"]) == 0
    return root / "ds" / "manifest.tsv"


class TestBlend:
    def test_interpolate_endpoint_bit_identical(self, models, tmp_path):
        a, b = models
        out = tmp_path / "blend.cei"
        assert main(["blend", "--model-a", str(a), "--model-b", str(b),
                     "--mode", "i", "--coeff", "1.0", "--out", str(out)]) == 0
        assert out.read_bytes() == a.read_bytes()

    def test_twostep_endpoint_is_model_b(self, models, tmp_path):
        a, b = models
        out = tmp_path / "blend.cei"
        assert main(["blend", "--model-a", str(a), "--model-b", str(b),
                     "--mode", "fts", "--coeff", "1.0", "--out", str(out)]) == 0
        assert out.read_bytes() == b.read_bytes()

    def test_formula_printed(self, models, tmp_path, capsys):
        a, b = models
        assert main(["blend", "--model-a", str(a), "--model-b", str(b),
                     "--mode", "f", "--coeff", "0.5", "--out", str(tmp_path / "o.cei")]) == 0
        out = capsys.readouterr().out
        assert "(A - (1-a)*B)/a" in out and "0.5" in out

    def test_coefficient_below_floor_errors_naming_floor(self, models, tmp_path, capsys):
        a, b = models
        code = main(["blend", "--model-a", str(a), "--model-b", str(b),
                     "--mode", "f", "--coeff", "0.01", "--out", str(tmp_path / "o.cei")])
        assert code == 1
        assert "0.05" in capsys.readouterr().err

    def test_incompatible_models_error_with_diff(self, models, tmp_path, capsys):
        a, _ = models
        other = tmp_path / "wide.cei"
        save_archive(init_dsan_params(DsanConfig(channels=5, in_channels=1), seed=0), other)
        code = main(["blend", "--model-a", str(a), "--model-b", str(other),
                     "--mode", "i", "--coeff", "0.5", "--out", str(tmp_path / "o.cei")])
        assert code == 1
        err = capsys.readouterr().err
        assert "ifi.w" in err

    def test_unknown_mode_rejected(self, models, tmp_path, capsys):
        a, b = models
        assert main(["blend", "--model-a", str(a), "--model-b", str(b),
                     "--mode", "zig", "--coeff", "0.5", "--out", str(tmp_path / "o.cei")]) == 1


class TestPredict:
    def test_writes_output_image(self, models, image, tmp_path):
        a, _ = models
        out = tmp_path / "pred.pgm"
        assert main(["predict", "--model", str(a), "--input", str(image), "--out", str(out)]) == 0
        img = read_image(out)
        assert img.values.shape == (16, 16, 1)

    def test_odd_input_auto_padded(self, models, tmp_path):
        a, _ = models
        p = tmp_path / "odd.pgm"
        write_pgm(p, np.random.default_rng(0).integers(0, 256, size=(15, 17), dtype=np.uint8))
        out = tmp_path / "pred.pgm"
        assert main(["predict", "--model", str(a), "--input", str(p), "--out", str(out)]) == 0
        assert read_image(out).values.shape == (15, 17, 1)

    def test_blend_then_predict_equals_in_memory(self, models, image, tmp_path):
        a, b = models
        blended_path = tmp_path / "half.cei"
        assert main(["blend", "--model-a", str(a), "--model-b", str(b),
                     "--mode", "i", "--coeff", "0.5", "--out", str(blended_path)]) == 0
        out = tmp_path / "pred.pgm"
        assert main(["predict", "--model", str(blended_path), "--input", str(image),
                     "--out", str(out)]) == 0
        from_cli = read_image(out).values

        blended = interpolate(load_archive(a), load_archive(b), 0.5)
        x = Tensor(to_nchw(read_image(image)))
        direct = dsan_forward(bind_dsan(blended, CFG), x).data
        direct_img = np.clip(direct[0, 0], 0, 1)
        quantized = np.round(direct_img * 255) / 255
        np.testing.assert_allclose(from_cli[:, :, 0], quantized, atol=1e-6)

    def test_missing_model_file_errors(self, image, tmp_path, capsys):
        assert main(["predict", "--model", str(tmp_path / "nope.cei"),
                     "--input", str(image), "--out", str(tmp_path / "o.pgm")]) == 1


class TestSweep:
    def test_file_counts_and_table(self, models, image, tmp_path, capsys):
        a, b = models
        out_dir = tmp_path / "sweep"
        assert main(["sweep", "--model-a", str(a), "--model-b", str(b), "--mode", "i",
                     "--coeffs", "0,0.25,0.5,0.75,1", "--input", str(image),
                     "--out-dir", str(out_dir)]) == 0
        outs = sorted(out_dir.glob("out_*.pgm"))
        residuals = sorted(out_dir.glob("residual_*.pgm"))
        assert len(outs) == 5 and len(residuals) == 5
        assert (out_dir / "sheet.pgm").exists()
        table = (out_dir / "sweep.tsv").read_text().splitlines()
        assert table[0] == "coeff\ttv\tpsnr_vs_input"
        assert len(table) == 6

    def test_sheet_width_tiles_all_coefficients(self, models, image, tmp_path):
        a, b = models
        out_dir = tmp_path / "sweep"
        assert main(["sweep", "--model-a", str(a), "--model-b", str(b), "--mode", "i",
                     "--coeffs", "0,1", "--input", str(image), "--out-dir", str(out_dir)]) == 0
        sheet = read_image(out_dir / "sheet.pgm")
        assert sheet.height == 16 + 12
        assert sheet.width == 2 * 16 + 2

    def test_bad_coeff_list_errors(self, models, image, tmp_path):
        a, b = models
        assert main(["sweep", "--model-a", str(a), "--model-b", str(b), "--mode", "i",
                     "--coeffs", "0,zap", "--input", str(image),
                     "--out-dir", str(tmp_path / "s")]) == 1


class TestTrainCli:
    def test_a2b2a_writes_expected_archives(self, dataset, tmp_path):
        out = tmp_path / "run"
        code = main(["train", "--data-a", str(dataset), "--data-b", str(dataset),
                     "--strategy", "a2b2a", "--out-dir", str(out), "--channels", "2",
                     "--epochs", "1", "--batch", "2", "--patch", "16",
                     "--steps-per-epoch", "1", "--phi", "0", "--seed", "4"])
        assert code == 0
        assert sorted(p.name for p in out.glob("*.cei")) == [
            "modelA.cei", "modelA0.cei", "modelB.cei",
        ]
        assert sorted(p.name for p in out.glob("trace_*.txt")) == [
            "trace_modelA.txt", "trace_modelA0.txt", "trace_modelB.txt",
        ]
        trace = (out / "trace_modelA0.txt").read_text().strip().splitlines()
        assert len(trace) == 1 and trace[0].count(",") == 2

    def test_single_strategy_writes_effect_and_identity(self, dataset, tmp_path):
        out = tmp_path / "run"
        code = main(["train", "--data-a", str(dataset), "--strategy", "single",
                     "--out-dir", str(out), "--channels", "2", "--epochs", "1",
                     "--batch", "2", "--patch", "16", "--steps-per-epoch", "1",
                     "--phi", "0", "--seed", "4"])
        assert code == 0
        assert sorted(p.name for p in out.glob("*.cei")) == [
            "modelEffect.cei", "modelIdentity.cei",
        ]

    def test_rerun_same_seed_identical_archives(self, dataset, tmp_path):
        args = ["train", "--data-a", str(dataset), "--strategy", "single",
                "--channels", "2", "--epochs", "2", "--batch", "2", "--patch", "16",
                "--steps-per-epoch", "2", "--phi", "0", "--seed", "9"]
        out1, out2 = tmp_path / "r1", tmp_path / "r2"
        assert main(args + ["--out-dir", str(out1)]) == 0
        assert main(args + ["--out-dir", str(out2)]) == 0
        for name in ("modelEffect.cei", "modelIdentity.cei"):
            assert (out1 / name).read_bytes() == (out2 / name).read_bytes()

    def test_a2b2a_without_data_b_errors(self, dataset, tmp_path, capsys):
        assert main(["train", "--data-a", str(dataset), "--strategy", "a2b2a",
                     "--out-dir", str(tmp_path / "x")]) == 1
        assert "--data-b" in capsys.readouterr().err

    def test_config_file_with_unknown_key_errors(self, dataset, tmp_path, capsys):
        cfg_path = tmp_path / "cfg.json"
        cfg_path.write_text('{"warp_speed": 9}')
        assert main(["train", "--data-a", str(dataset), "--strategy", "single",
                     "--out-dir", str(tmp_path / "x"), "--config", str(cfg_path)]) == 1
        assert "warp_speed" in capsys.readouterr().err

    def test_config_file_applies(self, dataset, tmp_path):
        cfg_path = tmp_path / "cfg.json"
        cfg_path.write_text(
            '{"epochs": 1, "batch": 2, "patch": 16, "steps_per_epoch": 1, "seed": 3,'
            ' "loss": {"phi": 0.0}}'
        )
        out = tmp_path / "run"
        assert main(["train", "--data-a", str(dataset), "--strategy", "single",
                     "--out-dir", str(out), "--channels", "2",
                     "--config", str(cfg_path)]) == 0
        assert (out / "modelEffect.cei").exists()


class TestEval:
    def test_self_labels_hit_caps(self, models, tmp_path, capsys):
        # a manifest whose labels are the model's own written outputs:
        # metrics run on the 8-bit image domain, so both land on the cap
        a, _ = models
        rng = np.random.default_rng(5)
        img_dir = tmp_path / "imgs"
        img_dir.mkdir()
        inp = img_dir / "x.pgm"
        write_pgm(inp, rng.integers(0, 256, size=(16, 16), dtype=np.uint8))
        pred = tmp_path / "pred.pgm"
        assert main(["predict", "--model", str(a), "--input", str(inp), "--out", str(pred)]) == 0
        manifest = tmp_path / "man.tsv"
        manifest.write_text(f"#effect gaussian 1\n{inp}\t{pred}\tval\n")
        assert main(["eval", "--model", str(a), "--data", str(manifest)]) == 0
        out = capsys.readouterr().out
        mean_row = [l for l in out.splitlines() if l.startswith("MEAN")][0]
        assert float(mean_row.split("\t")[1]) == 120.0
        assert float(mean_row.split("\t")[3]) == 120.0

    def test_report_matches_unit_metrics_on_one_pair(self, models, dataset, tmp_path, capsys):
        a, _ = models
        assert main(["eval", "--model", str(a), "--data", str(dataset), "--split", "val"]) == 0
        lines = capsys.readouterr().out.splitlines()
        row = lines[1].split("\t")
        params = load_archive(a)
        from opblend.data import from_nchw, load_manifest

        rec = load_manifest(dataset).split_records("val")[0]
        x = to_nchw(read_image(rec.input_path))
        y = to_nchw(read_image(rec.label_path))
        pred = to_nchw(from_nchw(dsan_forward(bind_dsan(params, CFG), Tensor(x)).data))
        pred = np.round(pred * 255.0) / np.float32(255.0)
        assert float(row[1]) == pytest.approx(psnr(pred, y), abs=0.005)
        s = ssim(pred, y)
        assert float(row[2]) == pytest.approx(s, abs=5e-7)
        assert float(row[3]) == pytest.approx(ssim_db(s), abs=0.005)

    def test_empty_split_nonzero_exit(self, models, tmp_path, capsys):
        a, _ = models
        manifest = tmp_path / "man.tsv"
        manifest.write_text("#effect gaussian 1\n")
        assert main(["eval", "--model", str(a), "--data", str(manifest)]) == 1
        assert "empty" in capsys.readouterr().err


class TestGradcheckCmd:
    def test_passes_and_reports(self, capsys):
        assert main(["gradcheck", "--seed", "0"]) == 0
        out = capsys.readouterr().out
        assert "conv2d" in out and "dsan_8x8" in out
        assert "FAIL" not in out

    def test_fixed_seed_identical_report(self, capsys):
        assert main(["gradcheck", "--seed", "3"]) == 0
        first = capsys.readouterr().out
        assert main(["gradcheck", "--seed", "3"]) == 0
        assert capsys.readouterr().out == first

    def test_corrupted_backward_rule_fails_naming_op(self, capsys, monkeypatch):
        import opblend.autodiff as ad

        original = ad._d_tanh
        monkeypatch.setattr(ad, "_d_tanh", lambda y: 1.1 * original(y))
        assert main(["gradcheck", "--seed", "0"]) == 1
        out = capsys.readouterr().out
        assert any("FAIL" in line and "tanh" in line for line in out.splitlines())


class TestParser:
    def test_unknown_flag_rejected(self, models, tmp_path):
        a, b = models
        with pytest.raises(SystemExit) as exc:
            main(["blend", "--model-a", str(a), "--model-b", str(b),
                  "--mode", "i", "--coeff", "0.5", "--out", str(tmp_path / "o.cei"),
                  "--frobnicate"])
        assert exc.value.code == 2

    def test_command_required(self):
        with pytest.raises(SystemExit) as exc:
            main([])
        assert exc.value.code == 2
