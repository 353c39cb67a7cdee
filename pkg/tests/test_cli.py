import json

import numpy as np
import pytest

from deformreg.cli import main
from deformreg.translator import identity_lut, save_translator
from deformreg.volume import load_volume, save_volume


@pytest.fixture(scope="module")
def synth_dir(tmp_path_factory):
    d = tmp_path_factory.mktemp("synth")
    assert main(["synth", "--dims", "16", "16", "16", "--seed", "2", "--noise", "0.01", "--out-dir", str(d)]) == 0
    return d


@pytest.fixture
def fast_config(tmp_path):
    p = tmp_path / "cfg.json"
    p.write_text(json.dumps({"registration": {"levels": [2, 1], "iterations": 6, "translator_kind": "lut"}}))
    return p


def test_synth_writes_pair_and_manifest(synth_dir):
    m = json.loads((synth_dir / "manifest.json").read_text())
    assert m["seed"] == 2 and m["dims"] == [16, 16, 16]
    for key in ("ref", "flo", "gt", "mask_ref", "mask_flo"):
        assert (synth_dir / m[key]).exists()


def test_synth_is_deterministic(synth_dir, tmp_path):
    assert main(["synth", "--dims", "16", "16", "16", "--seed", "2", "--noise", "0.01", "--out-dir", str(tmp_path)]) == 0
    for name in ("ref.raw", "flo.raw", "gt.raw"):
        assert (tmp_path / name).read_bytes() == (synth_dir / name).read_bytes()


def test_register_and_eval(synth_dir, fast_config, tmp_path, capsys):
    rc = main(["register", "--ref", str(synth_dir / "ref.raw"), "--float", str(synth_dir / "flo.raw"),
               "--config", str(fast_config), "--mode", "lg_only", "--out-dir", str(tmp_path / "reg")])
    assert rc == 0
    out = json.loads(capsys.readouterr().out)
    assert out["rmse_reference"] == "ref" and (tmp_path / "reg" / "field.raw").exists()
    rc = main(["eval", str(synth_dir / "manifest.json"), "--config", str(fast_config),
               "--out-dir", str(tmp_path / "ev")])
    assert rc == 0
    out = json.loads(capsys.readouterr().out)
    assert out["method"] == "full_alternating" and out["rmse_reference"] == "warped_by_gt"


def test_translate_and_slice(synth_dir, tmp_path):
    save_translator(identity_lut(), tmp_path / "t.json")
    rc = main(["translate", "--translator", str(tmp_path / "t.json"), "--float", str(synth_dir / "flo.raw"),
               "--out", str(tmp_path / "out.raw")])
    assert rc == 0
    assert np.allclose(np.asarray(load_volume(tmp_path / "out.raw")), np.asarray(load_volume(synth_dir / "flo.raw")))
    assert main(["slice", "--input", str(synth_dir / "ref.raw"), "--out", str(tmp_path / "s.pgm")]) == 0
    assert (tmp_path / "s.pgm").read_bytes().startswith(b"P5")


def test_gradcheck_passes(capsys):
    assert main(["gradcheck", "--probes", "5"]) == 0
    assert "FAIL" not in capsys.readouterr().out


def test_missing_input_is_io_error(tmp_path, capsys):
    rc = main(["register", "--ref", str(tmp_path / "nope.raw"), "--float", str(tmp_path / "nope.raw"),
               "--out-dir", str(tmp_path)])
    assert rc == 4
    assert "error [load]" in capsys.readouterr().err


def test_unwritable_output_is_io_error(synth_dir, fast_config, tmp_path):
    blocker = tmp_path / "file"
    blocker.write_text("x")
    rc = main(["register", "--ref", str(synth_dir / "ref.raw"), "--float", str(synth_dir / "flo.raw"),
               "--config", str(fast_config), "--mode", "lg_only", "--out-dir", str(blocker / "sub")])
    assert rc == 4


def test_bad_config_is_config_error(synth_dir, tmp_path, capsys):
    bad = tmp_path / "bad.json"
    bad.write_text(json.dumps({"iterations": 0}))
    rc = main(["register", "--ref", str(synth_dir / "ref.raw"), "--float", str(synth_dir / "flo.raw"),
               "--config", str(bad), "--out-dir", str(tmp_path)])
    assert rc == 2
    assert "error [config]" in capsys.readouterr().err
    bad.write_text("{not json")
    assert main(["eval", str(synth_dir / "manifest.json"), "--config", str(bad), "--out-dir", str(tmp_path)]) == 2


def test_shape_mismatch_is_config_error(synth_dir, tmp_path):
    save_volume(np.zeros((8, 8, 8)), tmp_path / "small.raw")
    rc = main(["register", "--ref", str(synth_dir / "ref.raw"), "--float", str(tmp_path / "small.raw"),
               "--out-dir", str(tmp_path)])
    assert rc == 2


def test_divergence_exit_code(synth_dir, tmp_path, monkeypatch):
    from deformreg import registration
    from deformreg.errors import DivergenceError

    def boom(*a, **k):
        raise DivergenceError("registration loss is not finite")

    monkeypatch.setattr(registration, "registration_loss", boom)
    rc = main(["register", "--ref", str(synth_dir / "ref.raw"), "--float", str(synth_dir / "flo.raw"),
               "--mode", "lg_only", "--out-dir", str(tmp_path)])
    assert rc == 3
