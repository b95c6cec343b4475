import json
from pathlib import Path

import numpy as np
import pytest

from blur2vid.cli import main


@pytest.fixture(scope="module")
def dataset(tmp_path_factory):
    root = tmp_path_factory.mktemp("data") / "ds"
    rc = main(["synth", "--count", "2", "--frames", "3", "--size", "32",
               "--seed", "7", "--out", str(root)])
    assert rc == 0
    return root


def test_synth_layout_contract(dataset):
    manifest = json.loads((dataset / "manifest.json").read_text())
    assert manifest["count"] == 2
    assert manifest["frames"] == 3
    for i in range(2):
        seq = dataset / f"seq_{i:05d}"
        frames = sorted(seq.glob("frame_*.png"))
        assert len(frames) == 3
        assert (seq / "blur.png").exists()


def test_usage_error_exit_code_1():
    assert main(["synth", "--nonsense-flag", "x"]) == 1
    assert main(["train-ae"]) == 1


def test_runtime_error_exit_code_2(tmp_path):
    rc = main(["train-ae", "--dataset", str(tmp_path / "missing"),
               "--out", str(tmp_path / "o.ck"), "--iters", "1"])
    assert rc == 2


def test_params_lists_all_models(capsys):
    assert main(["params", "--frames", "3", "--size", "32"]) == 0
    out = capsys.readouterr().out
    for key in ("rve", "rvd", "bie", "dm"):
        assert key in out
    assert "config:" in out


def test_gradcheck_subcommand_filter(capsys):
    assert main(["gradcheck", "--seeds", "1", "--only", "scalar-scale"]) == 0
    out = capsys.readouterr().out
    assert "PASS" in out and "scalar-scale" in out


def test_gradcheck_unknown_filter():
    assert main(["gradcheck", "--only", "quaternion"]) == 2


@pytest.fixture(scope="module")
def trained(tmp_path_factory, dataset):
    out = tmp_path_factory.mktemp("ck")
    ae = out / "ae.ck"
    bie = out / "bie.ck"
    dm = out / "dm.ck"
    assert main(["train-ae", "--dataset", str(dataset), "--out", str(ae),
                 "--iters", "3", "--batch", "1", "--seed", "1"]) == 0
    assert main(["train-bie", "--dataset", str(dataset), "--stage1", str(ae),
                 "--out", str(bie), "--iters", "3", "--batch", "1",
                 "--seed", "1"]) == 0
    assert main(["train-dm", "--dataset", str(dataset), "--out", str(dm),
                 "--iters", "3", "--batch", "1", "--seed", "1"]) == 0
    return {"ae": ae, "bie": bie, "dm": dm}


def test_training_writes_checkpoint_and_log(trained):
    for key in ("ae", "bie", "dm"):
        assert trained[key].exists()
        log = Path(str(trained[key]) + ".log")
        assert log.exists()
        assert log.read_text().startswith("# iter loss lr")


def test_infer_outputs_and_bit_determinism(tmp_path, dataset, trained):
    blurred = dataset / "seq_00000" / "blur.png"
    out_a = tmp_path / "a"
    out_b = tmp_path / "b"
    for out in (out_a, out_b):
        rc = main(["infer", "--blurred", str(blurred), "--dm",
                   str(trained["dm"]), "--bie", str(trained["bie"]),
                   "--out", str(out)])
        assert rc == 0
    frames_a = sorted(out_a.glob("frame_*.png"))
    assert len(frames_a) == 3  # N from the BIE checkpoint config
    assert (out_a / "deblurred.png").exists()
    for fa in frames_a + [out_a / "deblurred.png"]:
        fb = out_b / fa.name
        assert fa.read_bytes() == fb.read_bytes()


def test_infer_rejects_wrong_checkpoint_stage(tmp_path, dataset, trained):
    blurred = dataset / "seq_00000" / "blur.png"
    rc = main(["infer", "--blurred", str(blurred), "--dm", str(trained["ae"]),
               "--bie", str(trained["bie"]), "--out", str(tmp_path / "x")])
    assert rc == 2


def test_eval_reports_metrics(capsys, dataset, trained):
    rc = main(["eval", "--dataset", str(dataset), "--bie",
               str(trained["bie"]), "--dm", str(trained["dm"])])
    assert rc == 0
    out = capsys.readouterr().out
    assert "ordering-invariant error" in out
    assert "PSNR" in out
