"""Independent oracles and shared fixtures for the test suite."""

import json

import numpy as np


def naive_counts(smap, gt, theta, region=None):
    tp = fp = fn = tn = 0
    h, w = gt.shape
    for i in range(h):
        for j in range(w):
            if region is not None and not region[i][j]:
                continue
            p = smap[i][j] > theta
            g = bool(gt[i][j])
            if p and g:
                tp += 1
            elif p:
                fp += 1
            elif g:
                fn += 1
            else:
                tn += 1
    return tp, fp, fn, tn


def naive_pr(tp, fp, fn):
    p = 1.0 if tp + fp == 0 else tp / (tp + fp)
    r = 1.0 if tp + fn == 0 else tp / (tp + fn)
    return p, r


def naive_f(p, r):
    den = 0.3 * p + r
    return 0.0 if den == 0 else 1.3 * p * r / den


def naive_band(gt, w):
    h, wd = gt.shape

    def val(i, j):
        return 0 <= i < h and 0 <= j < wd and gt[i][j]

    band = np.zeros_like(gt, dtype=bool)
    for i in range(h):
        for j in range(wd):
            neigh = [val(i + a, j + b) for a in range(-w, w + 1) for b in range(-w, w + 1)]
            band[i, j] = any(neigh) and not all(neigh)
    return band


def random_pair(rng, n=8):
    smap = rng.random((n, n))
    if rng.random() < 0.3:
        smap = np.round(smap * 255) / 255  # exercise exact threshold hits
    gt = rng.random((n, n)) < rng.uniform(0.1, 0.6)
    return smap, gt


def naive_mae(smap, gt):
    h, w = gt.shape
    total = 0.0
    for i in range(h):
        for j in range(w):
            total += abs(float(smap[i][j]) - float(bool(gt[i][j])))
    return total / (h * w)


def bright_square(seed, size=64):
    """uint8 RGB image: value-noise background with one bright square, plus its mask."""
    from saliex import dataio

    rng = np.random.default_rng(seed)
    img = 0.25 + 0.2 * dataio.value_noise((size, size, 3), 3, rng)
    side = int(rng.integers(16, 29))
    top, left = (int(v) for v in rng.integers(4, size - side - 4, 2))
    mask = np.zeros((size, size), bool)
    mask[top : top + side, left : left + side] = True
    img[mask] = 0.85
    return dataio.quantize(img), mask


# ---------------------------------------------------------------------------
# CLI pipeline

SMALL_RUN = {
    "encoder": {"num_stages": 2, "stage_channels": [4, 8], "fusion_channels": 4, "input_size": [16, 16]},
    "train": {"epochs": 1, "lr": 0.01},
}


def synth(main, root, name="data", count=3, seed=1):
    spec = root / "spec.json"
    spec.write_text(json.dumps({"size": [16, 16], "noise_radius": 1}))
    out = root / name
    assert main(["synth", "--spec", str(spec), "--out", str(out), "--count", str(count), "--seed", str(seed)]) == 0
    return out / "manifest.txt"


def run_pipeline(root, seed=5):
    """synth -> train -> predict -> explain -> eval -> report inside ``root``."""
    from saliex import dataio
    from saliex.cli import main

    root.mkdir()
    cfg = root / "run.json"
    cfg.write_text(json.dumps(SMALL_RUN))
    train = synth(main, root, "train", 3, seed)
    test = synth(main, root, "test", 2, seed + 1)
    ckpt = root / "model.ckpt"
    assert main(["train", "--config", str(cfg), "--data", str(train), "--val", str(test),
                 "--out", str(ckpt), "--seed", str(seed)]) == 0
    assert main(["predict", "--ckpt", str(ckpt), "--manifest", str(test), "--out", str(root / "pred")]) == 0
    first = dataio.read_manifest(test)[0][0]
    assert main(["predict", "--ckpt", str(ckpt), "--image", str(first), "--out", str(root / "one.pgm")]) == 0
    assert main(["explain", "--ckpt", str(ckpt), "--image", str(first), "--preset", "desk",
                 "--seed", str(seed), "--out", str(root / "expl")]) == 0
    assert main(["eval", "--pred", str(root / "pred"), "--gt", str(test), "--widths", "1,2",
                 "--out", str(root / "report.csv")]) == 0
    assert main(["report", "--eval", str(root / "report.csv"), "--labels", "run",
                 "--out", str(root / "table.csv")]) == 0
    return root


def tree_bytes(root):
    return {str(p.relative_to(root)): p.read_bytes() for p in sorted(root.rglob("*")) if p.is_file()}
