import csv
import statistics
import struct
import subprocess
import sys

import numpy as np
import pytest
import torch
from PIL import Image

import oracles
from tilemark import artifacts
from tilemark.blocks import ImprovedUNetConfig
from tilemark.cli import main
from tilemark.data import SynthSceneConfig, line_geometry
from tilemark.models import build_model
from tilemark.training import Checkpoint, load_checkpoint, save_checkpoint


def tree_bytes(root):
    return {p.relative_to(root).as_posix(): p.read_bytes() for p in sorted(root.rglob("*")) if p.is_file()}


# ---------------------------------------------------------------- synth

def test_synth_writes_pairs_deterministically(tmp_path):
    args = ["synth", "--count", "8", "--size", "64", "--seed", "1"]
    assert main(args + ["--out", str(tmp_path / "a")]) == 0
    assert main(args + ["--out", str(tmp_path / "b")]) == 0
    a, b = tree_bytes(tmp_path / "a"), tree_bytes(tmp_path / "b")
    assert a == b
    assert len([k for k in a if k.startswith("images/")]) == 8
    assert len([k for k in a if k.startswith("masks/")]) == 8
    assert len((tmp_path / "a" / "manifest.txt").read_text().split()) == 8


def test_synth_rejects_size_60(tmp_path, capsys):
    assert main(["synth", "--out", str(tmp_path), "--size", "60"]) == 2
    assert "16" in capsys.readouterr().err


def test_synth_unwritable_directory(tmp_path):
    blocker = tmp_path / "file"
    blocker.write_text("x")
    assert main(["synth", "--out", str(blocker / "sub"), "--count", "1"]) == 2


def candidate_phases(normal, size=64, spacing=16, width=2):
    """Offsets covering every distinct rasterization of one line family.

    The mask only changes when the offset crosses some pixel's band edge, so
    one midpoint between each pair of consecutive edges (mod spacing) suffices.
    """
    rr, cc = np.mgrid[0:size, 0:size] - (size - 1) / 2
    d = (rr * normal[0] + cc * normal[1]).ravel()
    edges = np.unique(np.round(np.concatenate([d - width / 2, d + width / 2]) % spacing, 9))
    upper = np.append(edges[1:], edges[0] + spacing)
    return (edges + upper) / 2


def test_synth_herringbone_matches_line_equations(tmp_path):
    assert main(["synth", "--out", str(tmp_path), "--count", "2", "--size", "64",
                 "--pattern", "herringbone", "--orientation", "0", "--seed", "3"]) == 0
    cfg = SynthSceneConfig(size=64, pattern="herringbone")
    rows = np.arange(64)[:, None] - 31.5
    for p in sorted((tmp_path / "masks").glob("*.png")):
        mask = np.asarray(Image.open(p)) >= 128
        # main drain along the centre rows, laterals at +/-45 degrees on either side
        assert mask[31].all() and mask[32].all()
        upper, lower = mask & (rows < -1), mask & (rows > 1)
        assert upper.any() and lower.any()
        # the phase is not written out; find one that reproduces both lateral families
        matches = []
        for phase in candidate_phases(line_geometry(cfg, 0.0)[1][0]):
            _, pos, neg = line_geometry(cfg, phase)
            below = oracles.line_distance_mask(64, pos[0], pos[1], 16, 2).astype(bool) & (rows > 1)
            if not np.array_equal(lower, below):
                continue
            above = oracles.line_distance_mask(64, neg[0], neg[1], 16, 2).astype(bool) & (rows < -1)
            matches.append(np.array_equal(upper, above))
        assert any(matches)
        # the two lateral families run along different diagonals
        ru, cu = np.nonzero(upper)
        rl, cl = np.nonzero(lower)
        assert np.sign(np.polyfit(cu, ru, 1)[0]) != np.sign(np.polyfit(cl, rl, 1)[0])


# ---------------------------------------------------------------- train

@pytest.fixture(scope="module")
def dataset(tmp_path_factory):
    root = tmp_path_factory.mktemp("data")
    assert main(["synth", "--out", str(root), "--count", "6", "--size", "32", "--spacing", "8",
                 "--seed", "4"]) == 0
    return root


def test_train_tiny_preset(dataset, tmp_path):
    out = tmp_path / "run" / "model.tmck"
    assert main(["train", "--preset", "tiny", "--data", str(dataset), "--out", str(out)]) == 0
    with open(out.parent / "train_log.csv") as fh:
        rows = list(csv.DictReader(fh))
    assert [int(r["epoch"]) for r in rows] == [0, 1]
    assert load_checkpoint(out).model_config["base_channels"] == 2


def test_train_is_byte_identical(dataset, tmp_path):
    for name in ("a", "b"):
        assert main(["train", "--preset", "tiny", "--data", str(dataset),
                     "--out", str(tmp_path / name / "m.tmck"), "--seed", "3"]) == 0
    assert tree_bytes(tmp_path / "a") == tree_bytes(tmp_path / "b")


def test_train_with_config_file(dataset, tmp_path):
    cfg = tmp_path / "run.ini"
    cfg.write_text("[train]\npreset = tiny\nmax_epochs = 1\n[data]\nval_fraction = 0.34\n")
    assert main(["train", "--config", str(cfg), "--data", str(dataset),
                 "--out", str(tmp_path / "m.tmck")]) == 0
    assert len((tmp_path / "train_log.csv").read_text().splitlines()) == 2


def test_train_errors(dataset, tmp_path):
    cfg = tmp_path / "bad.ini"
    cfg.write_text("[train]\nwarmup = 3\n")
    assert main(["train", "--config", str(cfg), "--data", str(dataset), "--out", str(tmp_path / "m")]) == 2
    no_masks = tmp_path / "nomasks"
    (no_masks / "images").mkdir(parents=True)
    assert main(["train", "--preset", "tiny", "--data", str(no_masks), "--out", str(tmp_path / "m")]) == 2
    assert main(["train", "--preset", "nonsense", "--data", str(dataset), "--out", str(tmp_path / "m")]) == 2
    with pytest.raises(SystemExit) as info:
        main(["train", "--data", str(dataset), "--out", str(tmp_path / "m")])
    assert info.value.code == 2


def test_train_nan_exits_3(dataset, tmp_path):
    cfg = tmp_path / "nan.ini"
    # an absurd learning rate with plain SGD drives the weights to overflow
    cfg.write_text("[train]\npreset = tiny\nmax_epochs = 2\noptimizer = sgd\nlr = 1e30\n"
                   "schedule = constant\nloss = bce\n")
    assert main(["train", "--config", str(cfg), "--data", str(dataset), "--out", str(tmp_path / "m")]) == 3


# ---------------------------------------------------------------- predict

def constant_half_checkpoint(path):
    config = ImprovedUNetConfig(base_channels=2, aspp_dilation_rates=[1, 2])
    model = build_model(config)
    with torch.no_grad():
        model.head.weight.zero_()
        model.head.bias.zero_()
    params = {k: v.numpy().copy() for k, v in model.state_dict().items()}
    save_checkpoint(Checkpoint(config.to_dict(), params), path)


def test_predict_constant_half_gives_128(dataset, tmp_path):
    constant_half_checkpoint(tmp_path / "half.tmck")
    out = tmp_path / "pred"
    assert main(["predict", "--ckpt", str(tmp_path / "half.tmck"), "--images", str(dataset),
                 "--out", str(out)]) == 0
    pngs = sorted(out.glob("*.png"))
    assert len(pngs) == 6
    for p in pngs:
        assert np.all(np.asarray(Image.open(p)) == 128)
        raw = p.with_suffix(".dpred").read_bytes()
        assert raw[:6] == b"DPRED1" and struct.unpack("<II", raw[6:14]) == (32, 32)
        assert np.all(np.frombuffer(raw[14:], "<f4") == 0.5)


def test_predict_png_and_raw_agree(dataset, tmp_path):
    out = tmp_path / "run" / "m.tmck"
    main(["train", "--preset", "tiny", "--data", str(dataset), "--out", str(out)])
    assert main(["predict", "--ckpt", str(out), "--images", str(dataset / "images"),
                 "--out", str(tmp_path / "pred")]) == 0
    for p in sorted((tmp_path / "pred").glob("*.png")):
        png = np.asarray(Image.open(p)).astype(np.float64) / 255
        raw = artifacts.read_raw(p.with_suffix(".dpred")).astype(np.float64)
        assert np.max(np.abs(png - raw)) <= 0.5 / 255 + 1e-7


def test_predict_no_raw_and_size_mismatch(dataset, tmp_path, capsys):
    constant_half_checkpoint(tmp_path / "half.tmck")
    assert main(["predict", "--ckpt", str(tmp_path / "half.tmck"), "--images", str(dataset),
                 "--out", str(tmp_path / "p"), "--no-raw"]) == 0
    assert not list((tmp_path / "p").glob("*.dpred"))
    odd = tmp_path / "odd"
    odd.mkdir()
    Image.fromarray(np.zeros((20, 20, 3), np.uint8)).save(odd / "bad_one.png")
    Image.fromarray(np.zeros((32, 32, 3), np.uint8)).save(odd / "fine.png")
    assert main(["predict", "--ckpt", str(tmp_path / "half.tmck"), "--images", str(odd),
                 "--out", str(tmp_path / "q")]) == 2
    assert "bad_one" in capsys.readouterr().err


def test_raw_round_trip(tmp_path):
    prob = np.random.default_rng(0).random((5, 7)).astype(np.float32)
    artifacts.write_raw(prob, tmp_path / "x.dpred")
    assert np.array_equal(artifacts.read_raw(tmp_path / "x.dpred"), prob)


def test_quantize_rounds_half_up():
    assert artifacts.quantize(np.array([0.5, 0.0, 1.0, 1 / 255, 0.5 / 255])).tolist() == [128, 0, 255, 1, 1]


# ---------------------------------------------------------------- eval

def write_masks(root, masks):
    root.mkdir(parents=True, exist_ok=True)
    for name, m in masks.items():
        Image.fromarray((np.asarray(m) * 255).astype(np.uint8)).save(root / f"{name}.png")


def test_eval_perfect_predictions(dataset, tmp_path, capsys):
    report = tmp_path / "report.csv"
    assert main(["eval", "--pred", str(dataset / "masks"), "--gt", str(dataset), "--report", str(report)]) == 0
    sweep = artifacts.read_sweep_csv(report)
    assert len(sweep.thresholds) == 18
    assert sweep.dice == 1.0 and sweep.iou == 1.0
    patches = artifacts.read_patch_report(tmp_path / "report_patches.csv")
    cm = patches["confusion"]
    assert np.count_nonzero(cm - np.diag(np.diag(cm))) == 0 and cm.sum() == 9 * 6
    assert "derived grade thresholds" in capsys.readouterr().out


def test_eval_all_zero_predictions(dataset, tmp_path):
    pred = tmp_path / "pred"
    pred.mkdir()
    for p in (dataset / "masks").glob("*.png"):
        artifacts.write_raw(np.zeros((32, 32), np.float32), pred / f"{p.stem}.dpred")
    report = tmp_path / "r.csv"
    assert main(["eval", "--pred", str(pred), "--gt", str(dataset), "--report", str(report),
                 "--grade-thresholds", "0.1,0.3"]) == 0
    cm = artifacts.read_patch_report(tmp_path / "r_patches.csv")["confusion"]
    assert cm[:, 1:].sum() == 0 and cm[:, 0].sum() == 9 * 6


def test_eval_unmatched_ids(tmp_path):
    write_masks(tmp_path / "gt", {"a": np.ones((9, 9)), "b": np.ones((9, 9))})
    write_masks(tmp_path / "pred", {"a": np.ones((9, 9)), "c": np.ones((9, 9))})
    assert main(["eval", "--pred", str(tmp_path / "pred"), "--gt", str(tmp_path / "gt"),
                 "--report", str(tmp_path / "r.csv")]) == 2


def toy_pairs():
    """Three handcrafted 16x16 ground-truth masks with probability maps."""
    yy, xx = np.mgrid[0:16, 0:16]
    gt1 = ((yy >= 2) & (yy < 5)).astype(np.uint8)
    gt2 = (np.abs(yy - xx) <= 1).astype(np.uint8)
    gt3 = np.zeros((16, 16), np.uint8)
    gt3[10:16, 0:7] = 1
    gt3[0:2, 12:16] = 1
    p1 = np.where(gt1, 0.8, 0.1)
    p1[2, :8] = 0.45
    p1[8, :] = 0.6
    p2 = np.clip(1 - np.abs(yy - xx) / 4.0, 0, 1)
    p3 = np.where(gt3, 0.9, 0.05)
    p3[10:16, 0:3] = 0.3
    p3[5, 5] = 0.97
    return {"t1": (p1, gt1), "t2": (p2, gt2), "t3": (p3, gt3)}


def brute_force_patch_report(pairs, pixel_t):
    """Every patch statistic by explicit loops over the 6/5/5 bands of a 16-pixel side."""
    bands = [(0, 6), (6, 11), (11, 16)]

    def fractions(mask):
        out = []
        for r0, r1 in bands:
            row = []
            for c0, c1 in bands:
                pos = sum(int(mask[r][c]) for r in range(r0, r1) for c in range(c0, c1))
                row.append(pos / ((r1 - r0) * (c1 - c0)))
            out.append(row)
        return out

    nonzero = [f for _, gt in pairs for row in fractions(gt) for f in row if f > 0]
    mu, sigma = statistics.fmean(nonzero), statistics.pstdev(nonzero)
    t2 = min(mu + sigma, 1.0)
    t1 = mu - sigma if 0 < mu - sigma < t2 else mu / 2

    def grade(f):
        if f == 0:
            return 0
        if f <= t1:
            return 1
        if f <= t2:
            return 2
        return 3

    pred_grids, gt_grids = [], []
    for prob, gt in pairs:
        binary = [[1 if prob[r][c] >= pixel_t else 0 for c in range(16)] for r in range(16)]
        pred_grids.append([[grade(f) for f in row] for row in fractions(binary)])
        gt_grids.append([[grade(f) for f in row] for row in fractions(gt)])
    return (t1, t2), oracles.tally(pred_grids, gt_grids)


def test_eval_toy_directory_matches_brute_force(tmp_path):
    pairs = toy_pairs()
    (tmp_path / "pred").mkdir()
    for name, (prob, gt) in pairs.items():
        arr = prob.astype("<f4")
        (tmp_path / "pred" / f"{name}.dpred").write_bytes(b"DPRED1" + struct.pack("<II", 16, 16) + arr.tobytes())
    write_masks(tmp_path / "gt", {k: gt for k, (_, gt) in pairs.items()})
    report = tmp_path / "toy.csv"
    assert main(["eval", "--pred", str(tmp_path / "pred"), "--gt", str(tmp_path / "gt"),
                 "--report", str(report)]) == 0

    probs32 = [pairs[k][0].astype(np.float32).tolist() for k in sorted(pairs)]
    gts = [pairs[k][1].tolist() for k in sorted(pairs)]
    thresholds, dice_rows, iou_rows, mean_dice, mean_iou = oracles.sweep(probs32, gts)
    sweep = artifacts.read_sweep_csv(report)
    assert sweep.thresholds == thresholds
    np.testing.assert_allclose(sweep.mean_dice, dice_rows, rtol=0, atol=1e-12)
    np.testing.assert_allclose(sweep.mean_iou, iou_rows, rtol=0, atol=1e-12)
    with open(report) as fh:
        last = list(csv.reader(fh))[-1]
    assert last[0] == "mean"
    assert abs(float(last[1]) - mean_dice) < 1e-12 and abs(float(last[2]) - mean_iou) < 1e-12

    (t1, t2), counts = brute_force_patch_report([(p, g) for p, g in zip(probs32, gts)], 0.5)
    patches = artifacts.read_patch_report(tmp_path / "toy_patches.csv")
    assert patches["thresholds"] == pytest.approx((t1, t2), abs=1e-12)
    np.testing.assert_array_equal(patches["confusion"], counts)
    for k, name in enumerate(["none", "low", "middle", "high"]):
        col, row = counts[:, k].sum(), counts[k].sum()
        assert patches["precision"][name] == (counts[k, k] / col if col else None)
        assert patches["recall"][name] == (counts[k, k] / row if row else None)


def test_module_entry_point(tmp_path):
    result = subprocess.run([sys.executable, "-m", "tilemark", "synth", "--out", str(tmp_path),
                             "--size", "60"], capture_output=True, text=True)
    assert result.returncode == 2
    result = subprocess.run([sys.executable, "-m", "tilemark", "eval"], capture_output=True, text=True)
    assert result.returncode == 2
