import json

import numpy as np
import pytest

from radarocc.cli import main
from radarocc.geometry import GridSpec
from radarocc.occupancy import BACKGROUND, FOREGROUND, FREE, OccupancyGrid, load_grid, save_grid
from radarocc.radar_signal import load_4drt
from radarocc.scenes import LabeledSweepSequence
from radarocc.volume_reduction import load_sparse_rt

TINY = {"grid": [0, 6.4, -3.2, 3.2, -2.0, 1.2, 0.4], "n_r": 8, "embed": 8, "rwa_layers": 1,
        "enc_channels": [8, 8, 8, 8], "feat_dim": 8, "deform_points": 2, "deform_layers": 1, "mlp_hidden": [16]}
SCENE = {"objects": [{"track_id": 4, "center": [8.0, 1.0, -0.9], "size": [4.0, 1.8, 1.6],
                      "velocity": [2.0, 0.0, 0.0]}], "ego_velocity": [1.0, 0.0, 0.0]}


def write_json(path, obj):
    path.write_text(json.dumps(obj))
    return str(path)


def files(root):
    return {p.relative_to(root).as_posix(): p.read_bytes() for p in sorted(root.rglob("*")) if p.is_file()}


def read_ppm(path):
    raw = path.read_bytes()
    magic, dims, maxval, rest = raw.split(b"\n", 3)
    w, h = map(int, dims.split())
    assert magic == b"P6" and maxval == b"255"
    return np.frombuffer(rest, dtype=np.uint8).reshape(h, w, 3)


@pytest.fixture(scope="module")
def sim(tmp_path_factory):
    root = tmp_path_factory.mktemp("sim")
    scene = write_json(root / "scene.json", SCENE)
    assert main(["simulate", "--scene", scene, "--frames", "8", "--out", str(root / "a")]) == 0
    return root


@pytest.fixture(scope="module")
def trained(tmp_path_factory):
    root = tmp_path_factory.mktemp("train")
    cfg = write_json(root / "run.json", {"steps": 2, "n_train": 2, "n_val": 1, "model": TINY, "seed": 1})
    assert main(["train", "--config", cfg, "--out", str(root / "a")]) == 0
    return root, cfg


# ---------------------------------------------------------------- simulate / reduce / gt

def test_simulate_empty_frame_is_zero(tmp_path):
    scene = write_json(tmp_path / "s.json", {"ground_z": None})
    radar = write_json(tmp_path / "r.json", {"noise_power": 0.0})
    assert main(["simulate", "--scene", scene, "--frames", "1", "--radar-config", radar,
                 "--out", str(tmp_path / "o")]) == 0
    assert not load_4drt(tmp_path / "o" / "frame_0000.4drt").power.any()


def test_simulate_scene_writes_frames_with_stable_ids(sim):
    out = sim / "a"
    assert sorted(p.name for p in out.glob("*.4drt")) == [f"frame_{k:04d}.4drt" for k in range(8)]
    seq = LabeledSweepSequence.load(out / "sweeps.seq")
    assert len(seq) == 8 and all(list(f.track_ids) == [4] for f in seq.frames)
    assert [f.frame_id for f in seq.frames] == list(range(8))


def test_simulate_rerun_is_byte_identical(sim, tmp_path):
    assert main(["simulate", "--scene", str(sim / "scene.json"), "--frames", "8", "--out", str(tmp_path)]) == 0
    assert files(tmp_path) == files(sim / "a")


def test_reduce_gt_viz_are_byte_identical(sim, tmp_path):
    frame, seq = str(sim / "a" / "frame_0003.4drt"), str(sim / "a" / "sweeps.seq")
    for run in ("x", "y"):
        d = tmp_path / run
        d.mkdir()
        assert main(["reduce", frame, "--nr", "16", "--out", str(d / "f.sprt")]) == 0
        assert main(["gt", "--sequence", seq, "--target", "3", "--out", str(d / "f.grid")]) == 0
        for src in ("f.sprt", "f.grid"):
            assert main(["viz", str(d / src), "--out", str(d / (src + ".ppm"))]) == 0
        assert main(["viz", frame, "--out", str(d / "f.4drt.ppm")]) == 0
    assert files(tmp_path / "x") == files(tmp_path / "y")
    g = load_grid(tmp_path / "x" / "f.grid")
    assert (g.labels == FOREGROUND).any() and (g.labels == BACKGROUND).any()
    assert load_sparse_rt(tmp_path / "x" / "f.sprt").per_range_counts().tolist() == [16] * 64


def test_reduce_percentile_count(sim, tmp_path):
    frame = str(sim / "a" / "frame_0000.4drt")
    assert main(["reduce", frame, "--mode", "percentile", "--keep-fraction", "0.01",
                 "--out", str(tmp_path / "p.sprt")]) == 0
    R, A, E, _ = load_4drt(frame).shape
    assert len(load_sparse_rt(tmp_path / "p.sprt")) == round(0.01 * R * A * E)


# ---------------------------------------------------------------- viz

def test_viz_all_free_is_black(tmp_path):
    g = GridSpec((0, 4.0), (-1.2, 1.2), (0, 0.8), 0.4)      # L = 10, W = 6
    save_grid(tmp_path / "e.grid", OccupancyGrid(np.full(g.shape, FREE), g))
    assert main(["viz", str(tmp_path / "e.grid"), "--out", str(tmp_path / "e.ppm")]) == 0
    img = read_ppm(tmp_path / "e.ppm")
    assert img.shape == (10, 6, 3) and not img.any()


def test_viz_single_foreground_voxel(tmp_path):
    g = GridSpec((0, 4.0), (-1.2, 1.2), (0, 0.8), 0.4)
    lab = np.full(g.shape, FREE)
    lab[1, 4, 2] = FOREGROUND      # z = 1, y index 4, x index 2
    lab[0, 4, 2] = BACKGROUND      # hidden under the foreground voxel
    save_grid(tmp_path / "f.grid", OccupancyGrid(lab, g))
    assert main(["viz", str(tmp_path / "f.grid"), "--out", str(tmp_path / "f.ppm")]) == 0
    img = read_ppm(tmp_path / "f.ppm")
    lit = np.argwhere(img.any(axis=-1))
    # far x at the top, +y on the left
    assert lit.tolist() == [[10 - 1 - 2, 6 - 1 - 4]]
    assert img[7, 1].tolist() == [255, 140, 0]


def test_viz_rejects_unknown_suffix(tmp_path):
    (tmp_path / "x.txt").write_text("hi")
    assert main(["viz", str(tmp_path / "x.txt"), "--out", str(tmp_path / "x.ppm")]) == 2


# ---------------------------------------------------------------- train / eval

def test_train_rerun_is_byte_identical(trained, tmp_path):
    root, cfg = trained
    assert main(["train", "--config", cfg, "--out", str(tmp_path)]) == 0
    a, b = files(tmp_path), files(root / "a")
    # the echoed config names the output directory; everything else matches byte for byte
    assert a.pop("train.log").replace(str(tmp_path).encode(), b"OUT") == \
        b.pop("train.log").replace(str(root / "a").encode(), b"OUT")
    assert a == b
    assert {"loss.csv", "final.ckpt", "best.ckpt", "train.log"} <= set(files(tmp_path))


def test_eval_is_byte_identical(trained, tmp_path, capsys):
    root, _ = trained
    data = tmp_path / "data"
    assert main(["simulate", "--random", "2", "--grid", write_json(tmp_path / "g.json", TINY["grid"]),
                 "--seed", "9", "--out", str(data)]) == 0
    outs = []
    for k in range(2):
        assert main(["eval", "--checkpoint", str(root / "a" / "final.ckpt"), "--data", str(data),
                     "--out", str(tmp_path / f"m{k}.csv")]) == 0
        outs.append(capsys.readouterr().out)
    assert outs[0] == outs[1] and "@51.2 m" in outs[0]
    assert (tmp_path / "m0.csv").read_bytes() == (tmp_path / "m1.csv").read_bytes()
    assert main(["eval", "--oracle", "--model-config", write_json(tmp_path / "m.json", TINY),
                 "--data", str(data), "--out", str(tmp_path / "o.csv")]) == 0
    vals = [line.split(",")[2] for line in (tmp_path / "o.csv").read_text().splitlines()[1:]]
    assert all(v in ("1.000000", "") for v in vals) and "1.000000" in vals


def test_seed_env_override(tmp_path, monkeypatch):
    scene = write_json(tmp_path / "s.json", SCENE)
    for name, env in (("a", None), ("b", "0"), ("c", "5")):
        if env is None:
            monkeypatch.delenv("ROCC_SEED", raising=False)
        else:
            monkeypatch.setenv("ROCC_SEED", env)
        assert main(["simulate", "--scene", scene, "--frames", "1", "--seed", "0", "--out", str(tmp_path / name)]) == 0
    a, b, c = (load_4drt(tmp_path / n / "frame_0000.4drt").power for n in "abc")
    assert np.array_equal(a, b) and not np.array_equal(a, c)
    monkeypatch.setenv("ROCC_SEED", "x")
    assert main(["simulate", "--scene", scene, "--frames", "1", "--out", str(tmp_path / "d")]) == 2


def test_exit_codes(tmp_path):
    bad = write_json(tmp_path / "bad.json", {"learning_rate": 1.0})
    assert main(["train", "--config", bad, "--out", str(tmp_path / "t")]) == 2
    assert main(["reduce", str(tmp_path / "missing.4drt"), "--out", str(tmp_path / "x.sprt")]) == 2
    assert main(["gt", "--sequence", str(tmp_path / "bad.json"), "--out", str(tmp_path / "x.grid")]) == 2
    with pytest.raises(SystemExit) as e:
        main(["bogus"])
    assert e.value.code == 2


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_train_exit_code_3_on_nan(tmp_path):
    cfg = write_json(tmp_path / "run.json", {"steps": 3, "n_train": 1, "n_val": 0, "model": TINY, "lr": 1e300})
    # step 0 has lr 0; the step-1 update with an absurd rate makes the step-2 loss non-finite
    assert main(["train", "--config", cfg, "--out", str(tmp_path / "t")]) == 3


def test_ablate_rows(tmp_path, capsys):
    cfg = write_json(tmp_path / "run.json", {"steps": 1, "n_train": 1, "n_val": 1, "model": TINY})
    assert main(["ablate", "--config", cfg, "--out", str(tmp_path / "abl"), "--toggles", "RWA,DBD"]) == 0
    lines = (tmp_path / "abl" / "ablation.csv").read_text().splitlines()
    assert lines[0].startswith("row,rwa,dbd,sss,sfe,IoU@12.8,mIoU@12.8")
    assert [line.split(",")[0] for line in lines[1:]] == ["Ours", "w/o DBD", "w/o RWA"]
    assert lines[2].split(",")[1:5] == ["1", "0", "sidelobe", "spherical"]
    assert lines[3].split(",")[1:5] == ["0", "1", "sidelobe", "spherical"]
    assert {"ours", "dbd", "rwa"} <= {p.name for p in (tmp_path / "abl").iterdir()}
    assert capsys.readouterr().out.splitlines() == lines
    assert main(["ablate", "--config", cfg, "--out", str(tmp_path / "x"), "--toggles", "XYZ"]) == 2
