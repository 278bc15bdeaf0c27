import json
import sys
import textwrap
from pathlib import Path

import numpy as np
import pytest
from conftest import SMALL_SCENE, make_frame

from lidaraugment.cli import EXIT_CONFIG, EXIT_FAILED, EXIT_OK, EXIT_WARNING, main
from lidaraugment.core import VEHICLE, Box3D, Frame, Points, RngStream, points_in_box
from lidaraugment.io import (
    FrameFormatError,
    dumps_bank,
    dumps_frame,
    dumps_image,
    loads_bank,
    loads_frame,
    loads_image,
    read_bank,
    read_frame,
    write_frame,
)
from lidaraugment.ops import extract_exemplars
from lidaraugment.policy import default_policy_text
from lidaraugment.rangeview import RangeGeometry
from lidaraugment.synth import dump_scene_config, generate_frame, generate_frames

from test_rangeview import random_image
from test_tune import candidate_grids


def tree_bytes(directory):
    return {p.name: p.read_bytes() for p in sorted(Path(directory).iterdir())}


@pytest.fixture(scope="module")
def frames_dir(tmp_path_factory):
    d = tmp_path_factory.mktemp("frames")
    for f in generate_frames(SMALL_SCENE, 6, "f"):
        write_frame(d / f"{f.frame_id}.laf", f)
    return d


@pytest.fixture(scope="module")
def bank_file(tmp_path_factory, frames_dir):
    path = tmp_path_factory.mktemp("bank") / "bank.lab"
    assert main(["build-bank", str(frames_dir), str(path)]) == EXIT_OK
    return path


def test_frame_roundtrip_bit_exact(scene_frame):
    again = loads_frame(dumps_frame(scene_frame))
    assert again.equals(scene_frame)
    assert dumps_frame(again) == dumps_frame(scene_frame)


def test_frame_roundtrip_awkward_floats():
    xyz = np.array([[0.1, -0.0, 1e-300], [1 / 3, 2**0.5, -123456.789]])
    frame = Frame("odd", Points.from_arrays(xyz, [0.0, 1.0], [0.5, 0.25]))
    assert loads_frame(dumps_frame(frame)).points.xyz.tobytes() == xyz.tobytes()


def test_trailing_token_is_error(scene_frame):
    lines = dumps_frame(scene_frame).splitlines()
    lines[3] += " 7"
    with pytest.raises(FrameFormatError, match=r"f\.laf:4:"):
        loads_frame("\n".join(lines), "f.laf")


def test_trailing_record_is_error(scene_frame):
    with pytest.raises(FrameFormatError, match="trailing"):
        loads_frame(dumps_frame(scene_frame) + "1 2 3\n")


def test_truncated_file_is_error(scene_frame):
    text = dumps_frame(scene_frame)
    with pytest.raises(FrameFormatError, match="end of file"):
        loads_frame(text[: len(text) // 2].rsplit("\n", 1)[0])


def test_bad_box_reports_line():
    frame = make_frame(n=2, n_boxes=1)
    text = dumps_frame(frame).replace(f" {VEHICLE} 0", f" {VEHICLE} zero")
    with pytest.raises(FrameFormatError, match=":25:"):
        loads_frame(text)


def test_bank_roundtrip(scene_frame):
    bank = extract_exemplars(scene_frame)
    again = loads_bank(dumps_bank(bank))
    assert len(again) == len(bank)
    for a, b in zip(bank, again):
        assert a.box == b.box and a.points.equals(b.points) and a.source_frame_id == b.source_frame_id


def test_image_roundtrip():
    img = random_image(np.random.default_rng(0), rows=4, cols=9)
    ident, again = loads_image(dumps_image(img, "img"))
    assert ident == "img" and again.equals(img)


def test_apply_identity_at_zero(tmp_path, frames_dir):
    out = tmp_path / "out"
    assert main(["apply", str(frames_dir), str(out), "--m", "0", "--p", "0", "--seed", "1"]) == EXIT_OK
    for path in sorted(frames_dir.iterdir()):
        assert (out / path.name).read_bytes() == path.read_bytes()
    manifest = json.loads((out / "manifest.json").read_text())
    assert manifest["frames"] == 6 and all(v == 0 for v in manifest["fire_counts"].values())


def test_apply_deterministic_and_parallel(tmp_path, frames_dir, bank_file):
    args = [str(frames_dir), "--m", "5", "--p", "0.5", "--seed", "7", "--bank", str(bank_file), "--partners", str(frames_dir)]
    assert main(["apply", args[0], str(tmp_path / "a"), *args[1:]]) == EXIT_OK
    assert main(["apply", args[0], str(tmp_path / "b"), *args[1:]]) == EXIT_OK
    assert main(["apply", args[0], str(tmp_path / "c"), *args[1:], "--jobs", "2"]) == EXIT_OK
    a = tree_bytes(tmp_path / "a")
    assert a == tree_bytes(tmp_path / "b") == tree_bytes(tmp_path / "c")
    manifest = json.loads(a["manifest.json"])
    assert manifest["policy_sha256"] and manifest["seed"] == 7
    assert set(manifest["fire_counts"]) >= {"GlobalRot", "DropBox/VEHICLE", "PasteBox/PEDESTRIAN"}
    changed = sum(a[p.name] != p.read_bytes() for p in frames_dir.iterdir())
    assert changed > 0


def test_apply_seed_from_environment(tmp_path, frames_dir, bank_file, monkeypatch):
    common = ["--m", "3", "--p", "0.5", "--bank", str(bank_file), "--partners", str(frames_dir)]
    monkeypatch.setenv("LIDARAUG_SEED", "7")
    assert main(["apply", str(frames_dir), str(tmp_path / "env"), *common]) == EXIT_OK
    assert main(["apply", str(frames_dir), str(tmp_path / "flag"), *common, "--seed", "7"]) == EXIT_OK
    assert tree_bytes(tmp_path / "env") == tree_bytes(tmp_path / "flag")


def test_apply_without_bank_is_config_error(tmp_path, frames_dir, capsys):
    assert main(["apply", str(frames_dir), str(tmp_path / "x"), "--m", "5", "--p", "0.5"]) == EXIT_CONFIG
    assert "bank" in capsys.readouterr().err


def test_apply_bad_frame_reports_failure(tmp_path, frames_dir):
    src = tmp_path / "in"
    src.mkdir()
    (src / "a.laf").write_bytes((frames_dir / "f-00000.laf").read_bytes())
    (src / "b.laf").write_text("LAF1\nframe b 1 0 0 0\n1 2 3\n")
    assert main(["apply", str(src), str(tmp_path / "out"), "--m", "0", "--p", "0"]) == EXIT_FAILED
    manifest = json.loads((tmp_path / "out" / "manifest.json").read_text())
    assert manifest["frames"] == 1 and len(manifest["failed"]) == 1


def test_build_bank_counts_and_membership(tmp_path):
    boxes = tuple(Box3D(10.0 * i, 5.0, 0.0, 4.0, 2.0, 1.5, 0.2 * i, VEHICLE, i) for i in range(1, 4))
    gen = np.random.default_rng(0)
    inside = np.concatenate([b.to_world(gen.uniform(-0.45, 0.45, (12, 3)) * b.size) for b in boxes])
    src = tmp_path / "in"
    src.mkdir()
    write_frame(src / "one.laf", Frame("one", Points.from_arrays(inside), boxes))
    bank = tmp_path / "bank.lab"
    assert main(["build-bank", str(src), str(bank)]) == EXIT_OK
    exemplars = read_bank(bank)
    assert [e.box.class_id for e in exemplars] == [VEHICLE] * 3
    for e in exemplars:
        assert len(e.points) == 12
        assert points_in_box(e.world_points().xyz, e.box).all()
    again = tmp_path / "again.lab"
    main(["build-bank", str(src), str(again)])
    assert bank.read_bytes() == again.read_bytes()


def test_build_bank_empty_is_warning(tmp_path, frames_dir):
    out = tmp_path / "bank.lab"
    assert main(["build-bank", str(frames_dir), str(out), "--classes", "TRUCK"]) == EXIT_WARNING
    assert read_bank(out) == []


def test_project_roundtrip(tmp_path, frames_dir, capsys):
    src = frames_dir / "f-00000.laf"
    img = tmp_path / "img.txt"
    assert main(["project", str(src), str(img), "--roundtrip"]) == EXIT_OK
    out = capsys.readouterr().out
    assert "roundtrip: PASS" in out and "occluded: 0" in out
    back = tmp_path / "back.laf"
    assert main(["project", str(img), str(back), "--reverse"]) == EXIT_OK
    assert len(read_frame(back).points) == len(read_frame(src).points)


def test_project_reports_conflicts(tmp_path, capsys):
    # three returns on one ray; two are hidden
    xyz = [[10.0, 0.0, 0.0], [20.0, 0.0, 0.0], [30.0, 0.0, 0.0], [0.0, 15.0, 0.0]]
    frame = Frame("conflict", Points.from_arrays(xyz), rows=8, cols=64)
    path = tmp_path / "c.laf"
    write_frame(path, frame)
    assert main(["project", str(path), str(tmp_path / "c.img"), "--roundtrip"]) == EXIT_OK
    out = capsys.readouterr().out
    assert "occluded: 2" in out and "roundtrip: PASS" in out


def test_project_empty_frame(tmp_path, capsys):
    path = tmp_path / "e.laf"
    write_frame(path, Frame("empty", Points.empty(), rows=4, cols=8))
    assert main(["project", str(path), str(tmp_path / "e.img"), "--roundtrip"]) == EXIT_OK
    assert "cells: 0" in capsys.readouterr().out
    _, img = loads_image((tmp_path / "e.img").read_text())
    assert not img.filled.any()


PEAKED = textwrap.dedent(
    """
    def peaked(spec, m, p, seed):
        return -((m - 5) ** 2) - 100 * (p - 0.5) ** 2
    """
)


@pytest.fixture
def evaluator_module(tmp_path, monkeypatch):
    (tmp_path / "evalmod.py").write_text(PEAKED)
    monkeypatch.syspath_prepend(str(tmp_path))
    return "py:evalmod:peaked"


def test_search_cli_peaked(tmp_path, evaluator_module, capsys):
    table = tmp_path / "t.tsv"
    assert main(["search", "--evaluator", evaluator_module, "--table", str(table)]) == EXIT_OK
    assert "best m=5.0 p=0.5" in capsys.readouterr().out
    assert len(table.read_text().splitlines()) == 101


def test_search_cli_single_cell(tmp_path, evaluator_module, capsys):
    table = tmp_path / "t.tsv"
    assert main(["search", "--evaluator", evaluator_module, "--grid-m", "2", "--grid-p", "0.3", "--table", str(table)]) == 0
    assert table.read_text().splitlines()[1:] == ["2.0\t0.3\t-13.0\tok"]


def test_align_cli_reproduces_default_policy(tmp_path, monkeypatch):
    grids = candidate_grids()
    (tmp_path / "grids.json").write_text(json.dumps({op: {"prob": p, "mag": m} for op, (p, m) in grids.items()}))
    monkeypatch.syspath_prepend(str(Path(__file__).parent))
    out = tmp_path / "aligned.txt"
    report = tmp_path / "report.json"
    rc = main(
        ["align", "--grids", str(tmp_path / "grids.json"), "--evaluator", "py:test_tune:table_stub",
         "--out", str(out), "--report", str(report)]
    )
    assert rc == EXIT_OK
    assert out.read_text() == default_policy_text()
    assert json.loads(report.read_text())["ops"]["GlobalTranslate"]["coefficients"]["stdev"] == "33/50"


def test_external_command_evaluator(tmp_path, capsys):
    script = tmp_path / "ev.py"
    script.write_text(
        "import os, sys\n"
        "assert open(os.environ['LIDARAUG_POLICY']).read().startswith('#')\n"
        "m, p = float(sys.argv[1]), float(sys.argv[2])\n"
        "print(-((m - 2) ** 2) - (p - 0.4) ** 2)\n"
    )
    cmd = f"cmd:{sys.executable} {script}"
    rc = main(["search", "--evaluator", cmd, "--grid-m", "1,2,3", "--grid-p", "0.2,0.4"])
    assert rc == EXIT_OK
    assert "best m=2.0 p=0.4" in capsys.readouterr().out


def test_external_command_failure_marks_cells(tmp_path, capsys):
    cmd = f"cmd:{sys.executable} -c 'import sys; sys.exit(4)'"
    assert main(["search", "--evaluator", cmd, "--grid-m", "1", "--grid-p", "0.5"]) == EXIT_FAILED


def test_unknown_evaluator_is_config_error():
    assert main(["search", "--evaluator", "nope"]) == EXIT_CONFIG


def test_generate_cli(tmp_path):
    cfg = tmp_path / "scene.cfg"
    cfg.write_text(dump_scene_config(SMALL_SCENE))
    out = tmp_path / "gen"
    assert main(["generate", str(out), "--count", "2", "--config", str(cfg), "--objects", "3"]) == EXIT_OK
    frames = sorted(out.iterdir())
    assert [p.name for p in frames] == ["synth-00000.laf", "synth-00001.laf"]
    assert len(read_frame(frames[0]).boxes) == 3
    again = tmp_path / "gen2"
    main(["generate", str(again), "--count", "2", "--config", str(cfg), "--objects", "3"])
    assert tree_bytes(out) == tree_bytes(again)


def test_generated_frame_survives_file_roundtrip(tmp_path):
    frame = generate_frame(SMALL_SCENE, RngStream(5), "x")
    write_frame(tmp_path / "x.laf", frame)
    assert read_frame(tmp_path / "x.laf").equals(frame)


def test_geometry_of_default_image_size():
    g = RangeGeometry.uniform(64, 2650)
    assert g.rows == 64 and g.cols == 2650
