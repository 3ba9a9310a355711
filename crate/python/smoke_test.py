"""Smoke test for the `weedmap` Python extension.

Build and install it first, e.g.

    pip install maturin
    maturin develop --release -m crates/py/Cargo.toml

then run `python python/smoke_test.py`. Exits nonzero on the first failure.
"""

import json
import math
import os
import sys
import tempfile

import weedmap


def check(name, cond):
    print(f"{'ok  ' if cond else 'FAIL'} {name}")
    if not cond:
        sys.exit(1)


def main():
    check("miou 2x2", abs(weedmap.miou([1, 0, 0, 0], [1, 1, 0, 0], 2) - 7 / 12) < 1e-12)

    p, r, f = weedmap.precision_recall_f1([0, 1, 2, 3], 2, 1)
    check("precision/recall/f1", (p, r) == (0.75, 0.6) and abs(f - 2 / 3) < 1e-12)
    check("undefined precision is None", weedmap.precision_recall_f1([1, 0, 1, 0], 2, 1)[0] is None)

    acc, mae, rmse = weedmap.density_errors([(0.5, 0.4), (0.2, 0.2)])
    check("density errors", abs(acc - 0.9) < 1e-12 and abs(mae - 0.05) < 1e-12 and abs(rmse - math.sqrt(0.005)) < 1e-12)

    loss = weedmap.weighted_cross_entropy([[0.0, 0.0]], [1])
    check("weighted loss at zero logits", abs(loss - 0.67 * math.log(2)) < 1e-12)

    w, h, rgb, mask, classes = weedmap.synth_field(96, 7)
    check("synthetic field shapes", len(rgb) == w * h * 3 and len(mask) == w * h == len(classes))
    check("mask matches classes", all((m == 1) == (c != 0) for m, c in zip(mask, classes)))

    cfg = "image_side = 100\ntile_side = 25\n[segmentation]\nn_superpixels = 64\nmax_iters = 10\n"
    seg = weedmap.segment(w, h, rgb, cfg)
    check("segmentation mask", len(seg) == w * h and set(seg) <= {0, 1})

    with tempfile.TemporaryDirectory() as tmp:
        from PIL import Image

        image = os.path.join(tmp, "field.png")
        Image.frombytes("RGB", (w, h), rgb).save(image)
        try:
            weedmap.run_pipeline(image, cfg + "[classifier]\nmodel_path = 'nope.safetensors'\n")
        except FileNotFoundError:
            check("missing model raises FileNotFoundError", True)
        else:
            check("missing model raises FileNotFoundError", False)

    with tempfile.TemporaryDirectory() as tmp:
        path = os.path.join(tmp, "density.json")
        with open(path, "w") as fh:
            json.dump({"source_id": "x", "tile_side": 2, "rows": 1, "cols": 2, "records": [
                {"row": 0, "col": 0, "label": "weed", "cluster_rate": 0.5, "vegetation_pixels": 2},
                {"row": 0, "col": 1, "label": "crop", "cluster_rate": 0.25, "vegetation_pixels": 1},
            ]}, fh)
        check("weed tiles from density map", weedmap.weed_tiles(path) == [(0, 0, 0.5)])

    print("all smoke checks passed")


if __name__ == "__main__":
    main()
