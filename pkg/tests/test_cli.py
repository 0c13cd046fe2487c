import csv
import json
import subprocess
import sys

import numpy as np
import pytest

from predcode import imageio, weights_io
from predcode.cli import main

from conftest import natural_like

SMALL = ["--context-size", "5", "--channels", "4", "--units", "1", "--patches", "2000"]


def corpus(path, seed, n=4, shape=(24, 32)):
    path.mkdir()
    rng = np.random.default_rng(seed)
    for i in range(n):
        imageio.write_png(natural_like(rng, *shape), path / f"img{i}.png")
    return path


@pytest.fixture(scope="module")
def trained(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    s = corpus(root / "s", 1)
    sp = corpus(root / "sp", 2)
    out = {}
    for obj, steps in (("l1", 500), ("l2", 50), ("linf", 50)):
        path = root / f"{obj}.pnw"
        assert main(["train", "--objective", obj, "--data", str(s), "--out", str(path), "--steps", str(steps), *SMALL]) == 0
        out[obj] = path
    ref = root / "refine.pnw"
    assert main(["refine", "--weights", str(out["l1"]), str(out["l2"]), str(out["linf"]), "--data", str(sp),
                 "--out", str(ref), "--steps", "50", "--patches", "500"]) == 0
    out.update(refine=ref, s=s, sp=sp, root=root)
    return out


def test_train_outputs(trained):
    w = weights_io.load_weights(trained["l1"])
    assert w.config.objective == "l1" and w.config.context_size == 5
    with open(str(trained["l1"]) + ".loss.csv") as fh:
        rows = list(csv.DictReader(fh))
    assert len(rows) == 500 and list(rows[0]) == ["step", "loss", "penalty"]
    echoed = json.loads(trained["l1"].with_name("l1.pnw.config.json").read_text())
    assert echoed["train"]["steps"] == 500 and echoed["model"]["channels"] == 4


def test_linf_flag_recorded(trained):
    assert weights_io.load_weights(trained["linf"]).config.objective == "lp8"
    meta = json.loads(trained["linf"].with_name("linf.pnw.json").read_text())
    assert meta["objective_flag"] == "linf"


def test_invalid_objective_exits_2(tmp_path):
    with pytest.raises(SystemExit) as exc:
        main(["train", "--objective", "l3", "--data", str(tmp_path), "--out", str(tmp_path / "x")])
    assert exc.value.code == 2


def test_unknown_config_key_exits_2(tmp_path, trained):
    cfg = tmp_path / "c.json"
    cfg.write_text(json.dumps({"train": {"stepz": 3}}))
    assert main(["train", "--objective", "l1", "--config", str(cfg), "--data", str(trained["s"]), "--out", str(tmp_path / "w")]) == 2


def test_refine_same_dir_rejected(trained, tmp_path):
    rc = main(["refine", "--weights", str(trained["l1"]), str(trained["l2"]), str(trained["linf"]),
               "--data", str(trained["s"]), "--out", str(tmp_path / "r.pnw"), "--steps", "5"])
    assert rc == 2


def test_refine_metadata(trained):
    meta = json.loads(trained["refine"].with_name("refine.pnw.json").read_text())
    sums = [s["checksum"] for s in meta["sources"]]
    assert sums == [f"{weights_io.checksum(weights_io.load_weights(trained[k])):016x}" for k in ("l1", "l2", "linf")]


def test_metrics_csv(trained, tmp_path):
    out = tmp_path / "m.csv"
    assert main(["metrics", "--dir", str(trained["sp"]), "--predictor", "gap", "--csv", str(out)]) == 0
    rows = list(csv.DictReader(out.open()))
    assert len(rows) == 5 and rows[-1]["image"] == "mean"
    assert abs(float(rows[-1]["l1"]) - np.mean([float(r["l1"]) for r in rows[:-1]])) < 1e-4


def test_metrics_constant_image_entropy_zero(tmp_path, capsys):
    imageio.write_pgm(np.full((20, 20), 9, np.uint8), tmp_path / "c.pgm")
    assert main(["metrics", "--image", str(tmp_path / "c.pgm"), "--predictor", "left"]) == 0
    rows = list(csv.DictReader(capsys.readouterr().out.splitlines()))
    # column 0 is predicted 128, so only the rest of the image is constant
    assert float(rows[0]["entropy"]) < 0.5
    imageio.write_pgm(np.full((20, 20), 128, np.uint8), tmp_path / "d.pgm")
    assert main(["metrics", "--image", str(tmp_path / "d.pgm"), "--predictor", "left"]) == 0
    rows = list(csv.DictReader(capsys.readouterr().out.splitlines()))
    assert float(rows[0]["entropy"]) == 0.0


def test_metrics_prednet_r_json(trained, tmp_path):
    out = tmp_path / "m.json"
    w = [str(trained[k]) for k in ("l1", "l2", "linf", "refine")]
    assert main(["metrics", "--dir", str(trained["sp"]), "--predictor", "prednet-r", "--weights", *w, "--json", str(out)]) == 0
    doc = json.loads(out.read_text())
    assert len(doc["rows"]) == 4 and doc["rows"][0]["predictor"] == "prednet-r"


def test_weights_count_checked(trained, tmp_path):
    assert main(["metrics", "--image", str(trained["sp"] / "img0.png"), "--predictor", "prednet-r",
                 "--weights", str(trained["l1"])]) == 2
    assert main(["metrics", "--image", str(trained["sp"] / "img0.png"), "--predictor", "prednet"]) == 2


@pytest.mark.parametrize("pred", ["gap", "left", "prednet"])
def test_encode_decode_roundtrip(trained, tmp_path, capsys, pred):
    src = trained["sp"] / "img1.png"
    extra = ["--weights", str(trained["l1"])] if pred == "prednet" else []
    assert main(["encode", "--in", str(src), "--out", str(tmp_path / "a.prc"), "--predictor", pred, *extra]) == 0
    printed = capsys.readouterr().out
    size = (tmp_path / "a.prc").stat().st_size
    assert f"{size} bytes" in printed
    assert main(["decode", "--in", str(tmp_path / "a.prc"), "--out", str(tmp_path / "b.pgm"), "--predictor", pred, *extra]) == 0
    np.testing.assert_array_equal(imageio.read_image(tmp_path / "b.pgm"), imageio.read_image(src))


def test_corrupt_stream_exits_4(trained, tmp_path):
    src = trained["sp"] / "img0.png"
    assert main(["encode", "--in", str(src), "--out", str(tmp_path / "a.prc"), "--predictor", "gap"]) == 0
    data = (tmp_path / "a.prc").read_bytes()
    (tmp_path / "t.prc").write_bytes(data[:-7])
    assert main(["decode", "--in", str(tmp_path / "t.prc"), "--out", str(tmp_path / "o.pgm"), "--predictor", "gap"]) == 4
    (tmp_path / "m.prc").write_bytes(b"JUNK" + data[4:])
    assert main(["decode", "--in", str(tmp_path / "m.prc"), "--out", str(tmp_path / "o.pgm"), "--predictor", "gap"]) == 4
    assert main(["decode", "--in", str(tmp_path / "a.prc"), "--out", str(tmp_path / "o.pgm"), "--predictor", "left"]) == 4


def test_module_entry_gradcheck():
    proc = subprocess.run([sys.executable, "-m", "predcode", "gradcheck", "--seeds", "3"], capture_output=True, text=True)
    assert proc.returncode == 0, proc.stderr
    assert proc.stdout.strip().endswith("PASS")
