"""Train the tiny digit CNN used by the test suite and write it as an FGM file.

Digits come from scikit-learn's bundled 8x8 handwritten digit set, upscaled and
pasted at random positions on a 28x28 canvas so every image has a well defined
ink bounding box. Everything is seeded; rerunning reproduces the fixtures.

    python3 scripts/make_tiny_fixture.py crates/core/tests/fixtures
"""

import json
import struct
import sys
import zlib
from pathlib import Path

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F
from PIL import Image
from sklearn.datasets import load_digits

SEED = 20240501
CANVAS = 28
MEAN = [0.1307]
STD = [0.3081]
INK_THRESHOLD = 0.2
FIXTURE_COUNT = 20


def place(digit8, size, top, left):
    d = torch.tensor(digit8, dtype=torch.float32)[None, None] / 16.0
    d = F.interpolate(d, size=(size, size), mode="bilinear", align_corners=False)[0, 0]
    canvas = torch.zeros(CANVAS, CANVAS)
    canvas[top : top + size, left : left + size] = d.clamp(0, 1)
    # quantize exactly like a PNG round trip
    return torch.round(canvas * 255.0) / 255.0


def synth(images, labels, copies, rng):
    xs, ys = [], []
    for img, lab in zip(images, labels):
        for _ in range(copies):
            size = int(rng.integers(13, 19))
            top = int(rng.integers(0, CANVAS - size + 1))
            left = int(rng.integers(0, CANVAS - size + 1))
            xs.append(place(img, size, top, left))
            ys.append(int(lab))
    return torch.stack(xs)[:, None], torch.tensor(ys)


class TinyCnn(nn.Module):
    def __init__(self):
        super().__init__()
        self.conv1 = nn.Conv2d(1, 8, 3, padding=1)
        self.conv2 = nn.Conv2d(8, 16, 3, padding=1)
        self.bn2 = nn.BatchNorm2d(16)
        self.conv3 = nn.Conv2d(16, 32, 3, padding=1)
        self.fc = nn.Linear(32, 10)

    def forward(self, x):
        x = F.max_pool2d(F.relu(self.conv1(x)), 2)
        x = F.max_pool2d(F.relu(self.bn2(self.conv2(x))), 2)
        x = F.relu(self.conv3(x))
        x = F.avg_pool2d(x, 7)
        return self.fc(torch.flatten(x, 1))


def normalize(x):
    return (x - MEAN[0]) / STD[0]


def write_fgm(model, path):
    sd = {k: v.detach().cpu().numpy().astype("<f4") for k, v in model.state_dict().items()}
    blobs = bytearray()

    def blob(key):
        arr = np.ascontiguousarray(sd[key])
        raw = arr.tobytes()
        entry = {
            "shape": list(arr.shape),
            "offset": len(blobs),
            "length": len(raw),
            "crc32": zlib.crc32(raw) & 0xFFFFFFFF,
        }
        blobs.extend(raw)
        return entry

    layers = [
        {"name": "conv1", "kind": "conv2d", "stride": [1, 1], "padding": [1, 1],
         "blobs": {"weight": blob("conv1.weight"), "bias": blob("conv1.bias")}},
        {"name": "relu1", "kind": "relu"},
        {"name": "pool1", "kind": "maxpool2d", "kernel": [2, 2], "stride": [2, 2]},
        {"name": "conv2", "kind": "conv2d", "stride": [1, 1], "padding": [1, 1],
         "blobs": {"weight": blob("conv2.weight"), "bias": blob("conv2.bias")}},
        {"name": "bn2", "kind": "batchnorm2d", "eps": model.bn2.eps,
         "blobs": {"gamma": blob("bn2.weight"), "beta": blob("bn2.bias"),
                   "running_mean": blob("bn2.running_mean"),
                   "running_var": blob("bn2.running_var")}},
        {"name": "relu2", "kind": "relu"},
        {"name": "pool2", "kind": "maxpool2d", "kernel": [2, 2], "stride": [2, 2]},
        {"name": "conv3", "kind": "conv2d", "stride": [1, 1], "padding": [1, 1],
         "blobs": {"weight": blob("conv3.weight"), "bias": blob("conv3.bias")}},
        {"name": "relu3", "kind": "relu"},
        {"name": "gap", "kind": "avgpool2d", "kernel": [7, 7], "stride": [7, 7]},
        {"name": "flatten", "kind": "flatten"},
        {"name": "fc", "kind": "linear",
         "blobs": {"weight": blob("fc.weight"), "bias": blob("fc.bias")}},
    ]
    header = {
        "format": "fgm",
        "version": 1,
        "input_shape": [1, CANVAS, CANVAS],
        "class_count": 10,
        "preprocessing": {"mean": MEAN, "std": STD},
        "layers": layers,
    }
    with open(path, "wb") as f:
        f.write(json.dumps(header, indent=1).encode("utf-8"))
        f.write(b"FGCAMv01")
        f.write(bytes(blobs))


def main():
    out = Path(sys.argv[1] if len(sys.argv) > 1 else "crates/core/tests/fixtures")
    (out / "images").mkdir(parents=True, exist_ok=True)
    torch.manual_seed(SEED)
    rng = np.random.default_rng(SEED)

    digits = load_digits()
    n_train = 1500
    xtr, ytr = synth(digits.images[:n_train], digits.target[:n_train], 8, rng)
    xte, yte = synth(digits.images[n_train:], digits.target[n_train:], 2, rng)

    model = TinyCnn()
    opt = torch.optim.Adam(model.parameters(), lr=2e-3)
    for epoch in range(10):
        model.train()
        perm = torch.randperm(len(xtr))
        for i in range(0, len(xtr), 64):
            idx = perm[i : i + 64]
            loss = F.cross_entropy(model(normalize(xtr[idx])), ytr[idx])
            opt.zero_grad()
            loss.backward()
            opt.step()
        model.eval()
        with torch.no_grad():
            acc = (model(normalize(xte)).argmax(1) == yte).float().mean().item()
        print(f"epoch {epoch} test accuracy {acc:.4f}")

    write_fgm(model, out / "tiny-cnn.fgm")

    # fixtures: held-out, correctly classified, box covers at most half the image
    records, golden = [], []
    model.eval()
    with torch.no_grad():
        logits = model(normalize(xte))
    for i in range(len(xte)):
        if len(records) == FIXTURE_COUNT:
            break
        label = int(yte[i])
        if int(logits[i].argmax()) != label:
            continue
        img = xte[i, 0]
        ys, xs = torch.nonzero(img > INK_THRESHOLD, as_tuple=True)
        bbox = [int(xs.min()), int(ys.min()), int(xs.max()) + 1, int(ys.max()) + 1]
        area = (bbox[2] - bbox[0]) * (bbox[3] - bbox[1])
        if area > CANVAS * CANVAS // 2:
            continue
        name = f"digit_{len(records):02d}.png"
        Image.fromarray((img.numpy() * 255).round().astype(np.uint8), mode="L").save(out / "images" / name)
        records.append({"path": f"images/{name}", "class": label, "bbox": bbox})
        golden.append({"path": f"images/{name}", "logits": [float(v) for v in logits[i]]})

    with open(out / "list.jsonl", "w") as f:
        for r in records:
            f.write(json.dumps(r) + "\n")
    with open(out / "golden.json", "w") as f:
        json.dump({"model": "tiny-cnn.fgm", "images": golden}, f, indent=1)
    print(f"wrote {len(records)} fixtures to {out}")


if __name__ == "__main__":
    main()
