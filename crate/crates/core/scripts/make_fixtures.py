#!/usr/bin/env python3
"""Regenerates the bundled fixtures under crates/core/fixtures/.

One-off script; its outputs are committed. Requires numpy, Pillow and torch.

  tiny_cnn.rfpw                 trained 3x32x32, 10-class victim
  classify/img_XXX.png          100 correctly classified fixture images
  classify/labels.json          file name -> true label
  tiny_cnn_golden.json          float64 reference probabilities for classify/img_000.png
  policy_fixture.rfpw/.raw      random policy parameters + a 3x8x8 observation
  policy_golden.json            float64 reference policy head outputs
  detect/scene_XXX.png          3x64x64 scenes with 4-8 bright cells
  linear_vuln.rfpw              linear victim flipped by writing one pixel
  remote_transcript.json        request/response bodies for the remote protocol

Weights use the flat little-endian format documented in src/weights.rs.
"""

import json
import os
import struct
import sys

import numpy as np
from PIL import Image

HERE = os.path.dirname(os.path.abspath(__file__))
OUT = os.path.join(HERE, "..", "fixtures")


def write_weights(path, tensors):
    with open(path, "wb") as f:
        f.write(b"RFPW")
        f.write(struct.pack("<II", 1, len(tensors)))
        for name, arr in tensors:
            arr = np.asarray(arr, dtype="<f4")
            nb = name.encode()
            f.write(struct.pack("<I", len(nb)))
            f.write(nb)
            f.write(struct.pack("<I", arr.ndim))
            for d in arr.shape:
                f.write(struct.pack("<I", d))
            f.write(arr.tobytes(order="C"))


def save_png(path, chw):
    """chw float in [0,1] -> 8-bit PNG; returns the quantized float image."""
    q = np.clip(np.round(chw * 255.0), 0, 255).astype(np.uint8)
    if q.shape[0] == 1:
        Image.fromarray(q[0], mode="L").save(path)
    else:
        Image.fromarray(np.transpose(q, (1, 2, 0)), mode="RGB").save(path)
    return q.astype(np.float64) / 255.0


def save_raw(path, chw):
    q = np.clip(np.round(chw * 255.0), 0, 255).astype(np.uint8)
    with open(path, "wb") as f:
        f.write(("%d %d %d\n" % q.shape).encode())
        f.write(q.tobytes(order="C"))
    return q.astype(np.float64) / 255.0


# ---------------------------------------------------------------- classifier

N_CLASSES = 10
C, H, W = 3, 32, 32
FILTERS = 8
PROTO_CONTRAST = float(os.environ.get("PROTO_CONTRAST", "0.35"))


def class_prototypes(rng):
    yy, xx = np.meshgrid(np.arange(H), np.arange(W), indexing="ij")
    protos = []
    for _ in range(N_CLASSES):
        img = np.zeros((C, H, W))
        for c in range(C):
            for _ in range(3):
                fy, fx = rng.uniform(-0.35, 0.35, size=2)
                ph = rng.uniform(0, 2 * np.pi)
                img[c] += rng.uniform(0.3, 1.0) * np.sin(fy * yy + fx * xx + ph)
        img = (img - img.min()) / (img.max() - img.min())
        protos.append(0.5 + PROTO_CONTRAST * (img - 0.5))
    return np.stack(protos)


def sample_images(rng, protos, n):
    labels = rng.integers(0, N_CLASSES, size=n)
    xs = np.empty((n, C, H, W))
    for i, y in enumerate(labels):
        img = np.roll(protos[y], shift=tuple(rng.integers(-3, 4, size=2)), axis=(1, 2))
        img = 0.5 + rng.uniform(0.7, 1.1) * (img - 0.5)
        img = img + rng.normal(0, 0.08, size=img.shape)
        xs[i] = np.clip(img, 0, 1)
    xs = np.round(xs * 255) / 255
    return xs, labels


def numpy_cnn_probs(params, x):
    """Independent float64 forward pass of the tiny CNN."""
    cw, cb, fw, fb = params
    pad = np.pad(x, ((0, 0), (1, 1), (1, 1)))
    conv = np.zeros((cw.shape[0], H, W))
    for f in range(cw.shape[0]):
        acc = np.full((H, W), cb[f])
        for c in range(C):
            for dr in range(3):
                for dk in range(3):
                    acc = acc + cw[f, c, dr, dk] * pad[c, dr:dr + H, dk:dk + W]
        conv[f] = acc
    conv = np.maximum(conv, 0)
    pooled = conv.reshape(cw.shape[0], H // 2, 2, W // 2, 2).max(axis=(2, 4))
    logits = fb + fw @ pooled.reshape(-1)
    e = np.exp(logits - logits.max())
    return e / e.sum()


def train_classifier():
    import torch
    import torch.nn as nn

    torch.manual_seed(0)
    torch.set_num_threads(1)
    rng = np.random.default_rng(1234)
    protos = class_prototypes(rng)
    xtr, ytr = sample_images(rng, protos, 6000)
    xte, yte = sample_images(rng, protos, 1000)

    net = nn.Sequential(
        nn.Conv2d(C, FILTERS, 3, padding=1),
        nn.ReLU(),
        nn.MaxPool2d(2),
        nn.Flatten(),
        nn.Linear(FILTERS * (H // 2) * (W // 2), N_CLASSES),
    )
    opt = torch.optim.Adam(net.parameters(), lr=2e-3)
    xt = torch.tensor(xtr, dtype=torch.float32)
    yt = torch.tensor(ytr)
    for epoch in range(4):
        perm = torch.randperm(len(xt))
        for i in range(0, len(xt), 64):
            idx = perm[i:i + 64]
            opt.zero_grad()
            loss = nn.functional.cross_entropy(net(xt[idx]), yt[idx])
            loss.backward()
            opt.step()
    with torch.no_grad():
        acc = (net(torch.tensor(xte, dtype=torch.float32)).argmax(1).numpy() == yte).mean()
    print("tiny_cnn held-out accuracy: %.3f" % acc, file=sys.stderr)

    params = [p.detach().numpy().astype(np.float32) for p in net.parameters()]
    cw, cb, fw, fb = params
    write_weights(
        os.path.join(OUT, "tiny_cnn.rfpw"),
        [
            ("input_shape", np.array([C, H, W], dtype=np.float32)),
            ("conv.weight", cw),
            ("conv.bias", cb),
            ("fc.weight", fw),
            ("fc.bias", fb),
        ],
    )
    p64 = [p.astype(np.float64) for p in params]

    # 10 correctly classified held-out images per class
    os.makedirs(os.path.join(OUT, "classify"), exist_ok=True)
    chosen = {k: [] for k in range(N_CLASSES)}
    for x, y in zip(xte, yte):
        if len(chosen[y]) < 10 and numpy_cnn_probs(p64, x).argmax() == y:
            chosen[y].append(x)
    labels = {}
    idx = 0
    golden = None
    for k in range(N_CLASSES):
        assert len(chosen[k]) == 10, "class %d has too few correct images" % k
    for j in range(10):
        for k in range(N_CLASSES):
            name = "img_%03d.png" % idx
            q = save_png(os.path.join(OUT, "classify", name), chosen[k][j])
            labels[name] = int(k)
            if idx == 0:
                golden = numpy_cnn_probs(p64, q)
            idx += 1
    with open(os.path.join(OUT, "classify", "labels.json"), "w") as f:
        json.dump(labels, f, indent=1, sort_keys=True)
        f.write("\n")
    with open(os.path.join(OUT, "tiny_cnn_golden.json"), "w") as f:
        json.dump({"image": "classify/img_000.png", "probs": golden.tolist()}, f, indent=1)
        f.write("\n")


# ---------------------------------------------------------------- policy

def policy_fixture():
    rng = np.random.default_rng(77)
    c, h, w, slots = 3, 8, 8, 2
    hw = 4 + c
    t = {
        "policy.conv1.weight": rng.uniform(-0.5, 0.5, (8, c, 3, 3)),
        "policy.conv1.bias": rng.uniform(-0.5, 0.5, (8,)),
        "policy.conv2.weight": rng.uniform(-0.5, 0.5, (16, 8, 3, 3)),
        "policy.conv2.bias": rng.uniform(-0.5, 0.5, (16,)),
        "policy.head.weight": rng.uniform(-0.5, 0.5, (slots, hw, 16)),
        "policy.head.bias": rng.uniform(-0.5, 0.5, (slots, hw)),
    }
    t = {k: v.astype(np.float32) for k, v in t.items()}
    write_weights(
        os.path.join(OUT, "policy_fixture.rfpw"),
        [("policy.shape", np.array([c, h, w, slots], dtype=np.float32))] + list(t.items()),
    )
    x = save_raw(os.path.join(OUT, "policy_fixture.raw"), rng.uniform(0, 1, (c, h, w)))
    g = {k: v.astype(np.float64) for k, v in t.items()}

    def conv_s2(inp, wt, b):
        ic, ih, iw = inp.shape
        oh, ow = (ih - 1) // 2 + 1, (iw - 1) // 2 + 1
        pad = np.pad(inp, ((0, 0), (1, 1), (1, 1)))
        out = np.zeros((wt.shape[0], oh, ow))
        for f in range(wt.shape[0]):
            for r in range(oh):
                for k in range(ow):
                    out[f, r, k] = b[f] + np.sum(wt[f] * pad[:, 2 * r:2 * r + 3, 2 * k:2 * k + 3])
        return out

    h1 = np.maximum(conv_s2(x, g["policy.conv1.weight"], g["policy.conv1.bias"]), 0)
    h2 = np.maximum(conv_s2(h1, g["policy.conv2.weight"], g["policy.conv2.bias"]), 0)
    pooled = h2.mean(axis=(1, 2))
    z = g["policy.head.bias"] + g["policy.head.weight"] @ pooled
    sig = lambda v: 1 / (1 + np.exp(-v))
    slots_out = []
    for s in range(slots):
        slots_out.append({
            "mu_row": sig(z[s, 0]),
            "sigma_row": float(np.exp(np.clip(z[s, 1], -7, 1))),
            "mu_col": sig(z[s, 2]),
            "sigma_col": float(np.exp(np.clip(z[s, 3], -7, 1))),
            "brightness_logits": z[s, 4:].tolist(),
        })
    with open(os.path.join(OUT, "policy_golden.json"), "w") as f:
        json.dump({"slots": slots_out}, f, indent=1)
        f.write("\n")


# ---------------------------------------------------------------- detection

def detection_scenes(n=12):
    rng = np.random.default_rng(4321)
    os.makedirs(os.path.join(OUT, "detect"), exist_ok=True)
    cell = 8
    for i in range(n):
        img = rng.uniform(0.0, 0.2, (3, 64, 64))
        k = int(rng.integers(4, 9))
        cells = rng.choice(64, size=k, replace=False)
        for cidx in cells:
            r0, c0 = (cidx // 8) * cell, (cidx % 8) * cell
            ch = int(rng.integers(0, 3))
            level = rng.uniform(0.56, 0.64)
            img[ch, r0:r0 + cell, c0:c0 + cell] = np.clip(
                level + rng.normal(0, 0.03, (cell, cell)), 0, 1)
        save_png(os.path.join(OUT, "detect", "scene_%03d.png" % i), img)


# ---------------------------------------------------------------- linear

def linear_vulnerable():
    """3x32x32 linear victim: class 1 wins only if channel 0 at (13, 21) is written."""
    c, h, w = 3, 32, 32
    weight = np.zeros((2, c * h * w), dtype=np.float32)
    weight[1, 0 * h * w + 13 * w + 21] = 4.0
    bias = np.array([3.0, 0.0], dtype=np.float32)
    write_weights(
        os.path.join(OUT, "linear_vuln.rfpw"),
        [("input_shape", np.array([c, h, w], dtype=np.float32)), ("weight", weight), ("bias", bias)],
    )


# ---------------------------------------------------------------- remote

def remote_request(task, path):
    import base64
    q = np.asarray(Image.open(path), dtype=np.uint8)
    chw = q[None] if q.ndim == 2 else np.transpose(q, (2, 0, 1))
    c, h, w = chw.shape
    data = base64.b64encode(np.ascontiguousarray(chw).tobytes()).decode()
    return json.dumps({"task": task, "c": c, "h": h, "w": w, "data_b64": data}, separators=(",", ":"))


def remote_transcript():
    golden = json.load(open(os.path.join(OUT, "tiny_cnn_golden.json")))
    transcript = {
        "classify": {
            "image": "classify/img_000.png",
            "request": remote_request("classify", os.path.join(OUT, "classify", "img_000.png")),
            "response": json.dumps({"probs": golden["probs"]}, separators=(",", ":")),
        },
        "detect": {
            "image": "detect/scene_000.png",
            "request": remote_request("detect", os.path.join(OUT, "detect", "scene_000.png")),
            "response": json.dumps({"detections": [
                {"box": [8.0, 16.0, 16.0, 24.0], "class_id": 1, "confidence": 0.875},
                {"box": [40.0, 0.0, 48.0, 8.0], "class_id": 0, "confidence": 0.25},
            ]}, separators=(",", ":")),
        },
    }
    with open(os.path.join(OUT, "remote_transcript.json"), "w") as f:
        json.dump(transcript, f, indent=1)
        f.write("\n")


if __name__ == "__main__":
    os.makedirs(OUT, exist_ok=True)
    what = sys.argv[1:] or ["classifier", "policy", "detect", "linear", "remote"]
    if "classifier" in what:
        train_classifier()
    if "policy" in what:
        policy_fixture()
    if "detect" in what:
        detection_scenes()
    if "linear" in what:
        linear_vulnerable()
    if "remote" in what:
        remote_transcript()
