from pathlib import Path

import numpy as np
import pytest

from sdlss import cli
from sdlss.evaluate import EvaluateCommand
from sdlss.lib.command import EXIT_FAILURE, EXIT_OK, EXIT_USAGE, int_list, m_values, switch
from sdlss.lib.config import MANIFEST_NAME, read_kv_file
from sdlss.lib.data import DATA_DIR_ENV, read_pnm
from sdlss.lib.errors import ConfigError
from sdlss.lib.reporting import CsvSchema, read_csv
from sdlss.reconstruct import ReconstructCommand
from sdlss.train import TrainCommand
from sdlss.verify import VerifyCommand


def make_images(directory: Path) -> Path:
    path = directory / "images.npy"
    rng = np.random.default_rng(0)
    np.save(path, rng.integers(0, 256, size=(40, 4, 4), dtype=np.uint8))
    return path


def train_argv(images: Path, output: Path) -> list[str]:
    return [
        "--dataset", "raw",
        "--data-path", str(images),
        "--k", "4",
        "--hidden", "6",
        "--s", "2",
        "--m", "3",
        "--epochs", "2",
        "--batch-size", "8",
        "--train-size", "32",
        "--val-size", "8",
        "--output-dir", str(output),
    ]


@pytest.fixture(scope="module")
def trained(tmp_path_factory) -> tuple[Path, Path]:
    """A tiny checkpoint trained on 4×4 random images."""
    directory = tmp_path_factory.mktemp("trained")
    images = make_images(directory)
    output = directory / "train"
    assert TrainCommand(train_argv(images, output)).run() == EXIT_OK
    return images, output


def test_train_writes_epochs_checkpoint_and_manifest(trained):
    _, output = trained
    rows = read_csv(output / "epochs.csv")
    assert 1 <= len(rows) <= 2
    assert list(rows[0]) == list(CsvSchema.TrainEpochs)
    assert rows[0]["s"] == "2"
    assert rows[0]["val_psnr"] != ""
    assert (output / "checkpoint.sdls").is_file()

    manifest = read_kv_file(output / MANIFEST_NAME)
    assert manifest["command"] == "train"
    assert manifest["k"] == "4"
    assert "artifact.checkpoint.sdls" in manifest
    assert "stream.latent" in manifest


def test_reconstruct_from_dataset_images(trained, tmp_path):
    images, output = trained
    argv = [
        "--checkpoint", str(output / "checkpoint.sdls"),
        "--dataset", "raw",
        "--data-path", str(images),
        "--count", "5",
        "--output-dir", str(tmp_path),
    ]
    assert ReconstructCommand(argv).run() == EXIT_OK
    rows = read_csv(tmp_path / "reconstruction.csv")
    assert len(rows) == 5
    assert all(row["psnr"] != "" for row in rows)
    assert all(int(row["nnz"]) <= 2 for row in rows)
    assert read_pnm(tmp_path / "reconstructions.pgm").shape == (2 * 4 + 2, 3 * 4 + 2 * 2)
    assert (tmp_path / "originals.pgm").is_file()


def test_colour_reconstructions_are_written_as_ppm(tmp_path):
    images = tmp_path / "colour.npy"
    rng = np.random.default_rng(2)
    np.save(images, rng.integers(0, 256, size=(40, 4, 4, 3), dtype=np.uint8))
    assert TrainCommand(train_argv(images, tmp_path / "train")).run() == EXIT_OK

    argv = [
        "--checkpoint", str(tmp_path / "train" / "checkpoint.sdls"),
        "--dataset", "raw",
        "--data-path", str(images),
        "--count", "5",
        "--output-dir", str(tmp_path / "out"),
    ]
    assert ReconstructCommand(argv).run() == EXIT_OK
    out = tmp_path / "out"
    assert read_pnm(out / "reconstructions.ppm").shape == (2 * 4 + 2, 3 * 4 + 2 * 2, 3)
    assert read_pnm(out / "originals.ppm").shape == (2 * 4 + 2, 3 * 4 + 2 * 2, 3)
    assert not list(out.glob("*.pgm"))


def test_reconstruct_from_bare_measurements(trained, tmp_path):
    _, output = trained
    measurements = tmp_path / "y.npy"
    np.save(measurements, np.random.default_rng(1).standard_normal((3, 3)))
    argv = [
        "--checkpoint", str(output / "checkpoint.sdls"),
        "--measurements", str(measurements),
        "--output-dir", str(tmp_path / "out"),
    ]
    assert ReconstructCommand(argv).run() == EXIT_OK
    rows = read_csv(tmp_path / "out" / "reconstruction.csv")
    assert len(rows) == 3
    assert all(row["psnr"] == row["ssim"] == row["re"] == "" for row in rows)
    assert not (tmp_path / "out" / "originals.pgm").exists()


def test_measurements_of_the_wrong_width_fail(trained, tmp_path):
    _, output = trained
    measurements = tmp_path / "y.npy"
    np.save(measurements, np.zeros((2, 5)))
    argv = [
        "--checkpoint", str(output / "checkpoint.sdls"),
        "--measurements", str(measurements),
        "--output-dir", str(tmp_path / "out"),
    ]
    assert ReconstructCommand(argv).run() == EXIT_FAILURE


def test_evaluate_reports_batch_and_full_scopes(trained, tmp_path, capsys):
    images, output = trained
    argv = [
        "--checkpoints", str(output / "checkpoint.sdls"),
        "--dataset", "raw",
        "--data-path", str(images),
        "--test-size", "8",
        "--batch-size", "4",
        "--eval-steps", "3",
        "--restarts", "1",
        "--output-dir", str(tmp_path),
    ]
    assert EvaluateCommand(argv).run() == EXIT_OK
    rows = read_csv(tmp_path / "evaluation.csv")
    assert [row["scope"] for row in rows] == ["batch", "full"]
    assert [row["n_images"] for row in rows] == ["4", "8"]
    assert rows[0]["m"] == "3"
    assert "PSNR" in capsys.readouterr().out


def test_reproducing_a_manifest_gives_identical_artifacts(trained):
    _, output = trained
    assert TrainCommand(["--reproduce", str(output / MANIFEST_NAME)]).run() == EXIT_OK
    again = output / "reproduce"
    for name in ("epochs.csv", "checkpoint.sdls"):
        assert (again / name).read_bytes() == (output / name).read_bytes()


def test_tampered_manifest_fails_reproduction(trained, tmp_path):
    _, output = trained
    manifest = (output / MANIFEST_NAME).read_text(encoding="utf-8")
    lines = [
        "artifact.epochs.csv=" + "0" * 64 if line.startswith("artifact.epochs.csv=") else line
        for line in manifest.splitlines()
    ]
    tampered = tmp_path / MANIFEST_NAME
    tampered.write_text("\n".join(lines) + "\n", encoding="utf-8")
    assert TrainCommand(["--reproduce", str(tampered)]).run() == EXIT_FAILURE


def test_missing_dataset_is_a_usage_error(tmp_path, monkeypatch):
    monkeypatch.delenv(DATA_DIR_ENV, raising=False)
    assert TrainCommand(["--output-dir", str(tmp_path)]).run() == EXIT_USAGE


def test_non_positive_step_size_is_a_usage_error(tmp_path):
    images = make_images(tmp_path)
    argv = train_argv(images, tmp_path / "out") + ["--alpha", "0"]
    assert TrainCommand(argv).run() == EXIT_USAGE


def test_unknown_flag_exits_with_usage():
    with pytest.raises(SystemExit) as info:
        TrainCommand(["--sparsity", "3"])
    assert info.value.code == EXIT_USAGE


def test_corrupted_checkpoint_names_the_error(tmp_path, caplog):
    bad = tmp_path / "bad.sdls"
    bad.write_bytes(b"NOPE" + bytes(32))
    argv = ["--checkpoint", str(bad), "--measurements", str(bad), "--output-dir", str(tmp_path)]
    assert ReconstructCommand(argv).run() == EXIT_FAILURE
    assert "FormatError" in caplog.text


def test_verify_regions_prints_the_count(tmp_path, capsys):
    argv = ["regions", "--k", "2", "--h", "4", "--output-dir", str(tmp_path)]
    assert VerifyCommand(argv).run() == EXIT_OK
    out = capsys.readouterr().out
    assert "11 regions" in out
    assert out.strip().endswith("PASS")
    rows = read_csv(tmp_path / "regions.csv")
    assert rows[0]["count"] == rows[0]["expected"] == "11"


def test_verify_restricted_regions(tmp_path):
    argv = ["regions", "--k", "3", "--h", "3", "--s", "2", "--output-dir", str(tmp_path)]
    assert VerifyCommand(argv).run() == EXIT_OK
    assert read_csv(tmp_path / "regions.csv")[0]["expected"] == "21"


def test_verify_needs_a_kind(tmp_path):
    assert VerifyCommand(["--output-dir", str(tmp_path)]).run() == EXIT_USAGE


def test_verify_refuses_an_oversized_count(tmp_path):
    argv = ["regions", "--k", "4", "--h", "13", "--output-dir", str(tmp_path)]
    assert VerifyCommand(argv).run() == EXIT_FAILURE


def test_verify_srec_writes_one_row_per_m(tmp_path):
    argv = [
        "srec", "--k", "4", "--s", "2", "--hidden", "8", "--n", "16",
        "--m-list", "2,16", "--trials", "200", "--output-dir", str(tmp_path),
    ]
    assert VerifyCommand(argv).run() == EXIT_OK
    rows = read_csv(tmp_path / "srec.csv")
    assert [row["m"] for row in rows] == ["2", "16"]
    assert all(row["trials"] == "200" for row in rows)


def test_verify_srec_reproduces(tmp_path):
    argv = [
        "srec", "--k", "4", "--s", "2", "--hidden", "8", "--n", "16",
        "--m-sweep", "2:8", "--trials", "100", "--threads", "2",
        "--output-dir", str(tmp_path),
    ]
    assert VerifyCommand(argv).run() == EXIT_OK
    assert VerifyCommand(["--reproduce", str(tmp_path / MANIFEST_NAME)]).run() == EXIT_OK
    assert (tmp_path / "reproduce" / "srec.csv").read_bytes() == (tmp_path / "srec.csv").read_bytes()


def test_verify_sweep(tmp_path):
    argv = [
        "sweep", "--k", "6", "--s", "2", "--n", "12", "--hidden", "8",
        "--instances", "5", "--m-list", "2,12", "--eval-steps", "20", "--restarts", "1",
        "--output-dir", str(tmp_path),
    ]
    assert VerifyCommand(argv).run() == EXIT_OK
    rows = read_csv(tmp_path / "sweep.csv")
    assert list(rows[0]) == list(CsvSchema.Sweep)
    assert [row["m"] for row in rows] == ["2", "12"]
    assert (tmp_path / "planted.sdls").is_file()


def test_verify_sweep_reuses_written_planted_instances(tmp_path):
    common = ["--m-list", "3,12", "--eval-steps", "20", "--restarts", "1"]
    first = tmp_path / "first"
    argv = ["sweep", "--k", "6", "--s", "2", "--n", "12", "--hidden", "8", "--instances", "4"]
    assert VerifyCommand(argv + common + ["--output-dir", str(first)]).run() == EXIT_OK

    again = tmp_path / "again"
    argv = ["sweep", "--planted", str(first / "planted.sdls"), "--output-dir", str(again)]
    assert VerifyCommand(argv + common).run() == EXIT_OK
    assert (again / "sweep.csv").read_bytes() == (first / "sweep.csv").read_bytes()
    assert (again / "planted.sdls").read_bytes() == (first / "planted.sdls").read_bytes()


def test_verify_sweep_with_missing_planted_file_is_a_usage_error(tmp_path):
    argv = ["sweep", "--planted", str(tmp_path / "nope.sdls"), "--output-dir", str(tmp_path)]
    assert VerifyCommand(argv).run() == EXIT_USAGE


def test_dispatch_through_the_top_level_command(tmp_path, capsys):
    argv = ["verify", "regions", "--k", "2", "--h", "3", "--output-dir", str(tmp_path)]
    assert cli.run(argv) == EXIT_OK
    assert "7 regions" in capsys.readouterr().out


def test_unknown_subcommand_exits_with_usage():
    with pytest.raises(SystemExit) as info:
        cli.run(["fit"])
    assert info.value.code == EXIT_USAGE


def test_argument_helpers():
    assert int_list("500,500") == [500, 500]
    assert int_list("") == []
    with pytest.raises(ConfigError):
        int_list("a,b")
    assert m_values("2:20", None) == [2, 4, 8, 16]
    assert m_values(None, "1,5") == [1, 5]
    assert m_values(None, None, 7) == [7]
    with pytest.raises(ConfigError):
        m_values("20:2", None)
    with pytest.raises(ConfigError):
        m_values(None, None)
    assert switch("on") and not switch("off")
    with pytest.raises(ConfigError):
        switch("yes")
