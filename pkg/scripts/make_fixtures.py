#!/usr/bin/env python3
"""Generate the committed fixture corpus.

Writes:
  fixtures/emoji/img/*.png + manifest.jsonl   64 RGBA emoji-style glyphs
  fixtures/seg/*.png                          hard-edged segmentation cases
                                              with analytically-known golden
                                              masks and a golden RGBA compose

Masks here come straight from the analytic shape indicators, never from the
package's segmentation code, so they can serve as oracles for it.
"""

import json
from pathlib import Path

import numpy as np
from PIL import Image

ROOT = Path(__file__).resolve().parent.parent
SIDE = 64
SS = 4  # supersampling factor for soft-edged emoji glyphs

SHAPES = ("heart", "star", "circle", "square", "triangle", "ring")
NOUNS = {
    "heart": ("сердце", "n"),
    "star": ("звезда", "f"),
    "circle": ("круг", "m"),
    "square": ("квадрат", "m"),
    "triangle": ("треугольник", "m"),
    "ring": ("кольцо", "n"),
}
COLORS = (
    ({"m": "красный", "f": "красная", "n": "красное"}, (214, 45, 48)),
    ({"m": "синий", "f": "синяя", "n": "синее"}, (52, 98, 211)),
    ({"m": "зелёный", "f": "зелёная", "n": "зелёное"}, (58, 166, 77)),
    ({"m": "жёлтый", "f": "жёлтая", "n": "жёлтое"}, (238, 198, 46)),
    ({"m": "оранжевый", "f": "оранжевая", "n": "оранжевое"}, (239, 136, 31)),
    ({"m": "фиолетовый", "f": "фиолетовая", "n": "фиолетовое"}, (146, 66, 199)),
    ({"m": "розовый", "f": "розовая", "n": "розовое"}, (233, 110, 166)),
)


def shape_hit(shape, x, y, r):
    """Boolean indicator on centered coordinates (y grows upward)."""
    if shape == "heart":
        xs, ys = x / r, y / r + 0.1
        return (xs**2 + ys**2 - 1.0) ** 3 - xs**2 * ys**3 <= 0.0
    if shape == "star":
        ang = np.arctan2(y, x)
        dist = np.sqrt(x * x + y * y)
        tooth = np.abs(np.cos((ang * 5.0 / 2.0) % np.pi))
        return dist <= r * (0.45 + 0.55 * tooth**1.8)
    if shape == "circle":
        return x * x + y * y <= r * r
    if shape == "square":
        return np.maximum(np.abs(x), np.abs(y)) <= r * 0.85
    if shape == "triangle":
        ang = np.pi / 2 + np.array([0.0, 2 * np.pi / 3, 4 * np.pi / 3])
        px, py = r * np.cos(ang), r * np.sin(ang)
        hit = np.ones_like(x, dtype=bool)
        for i in range(3):
            j = (i + 1) % 3
            hit &= (px[j] - px[i]) * (y - py[i]) - (py[j] - py[i]) * (x - px[i]) >= 0
        return hit
    if shape == "ring":
        d2 = x * x + y * y
        return (d2 <= r * r) & (d2 >= (0.55 * r) ** 2)
    raise ValueError(shape)


def coverage(shape, side, cx, cy, r):
    n = side * SS
    ys, xs = np.mgrid[0:n, 0:n]
    x = (xs + 0.5) / SS - cx
    y = cy - (ys + 0.5) / SS
    hit = shape_hit(shape, x, y, r)
    return hit.reshape(side, SS, side, SS).mean(axis=(1, 3))


def emoji_fixtures():
    out = ROOT / "fixtures" / "emoji"
    (out / "img").mkdir(parents=True, exist_ok=True)
    rng = np.random.default_rng(123)
    rows = []
    for i in range(64):
        shape = SHAPES[i % len(SHAPES)]
        adjectives, rgb = COLORS[(i // len(SHAPES)) % len(COLORS)]
        noun, gender = NOUNS[shape]
        caption = noun if i % 5 == 0 else f"{adjectives[gender]} {noun}"
        cx = SIDE / 2 + rng.uniform(-4, 4)
        cy = SIDE / 2 + rng.uniform(-4, 4)
        r = rng.uniform(0.30, 0.42) * SIDE
        frac = coverage(shape, SIDE, cx, cy, r)
        alpha = np.rint(frac * 255).astype(np.uint8)
        rgba = np.zeros((SIDE, SIDE, 4), np.uint8)
        rgba[..., :3] = np.where(frac[..., None] > 0, np.array(rgb, np.uint8), 255)
        rgba[..., 3] = alpha
        rel = f"img/{i:03d}_{shape}.png"
        Image.fromarray(rgba, "RGBA").save(out / rel)
        split = "val" if i % 7 == 3 else "train"
        rows.append({"image_path": rel, "caption": caption, "split": split})
    with open(out / "manifest.jsonl", "w", encoding="utf-8") as fh:
        for row in rows:
            fh.write(json.dumps(row, ensure_ascii=False) + "\n")
    print(f"wrote {len(rows)} emoji fixtures to {out}")


def seg_fixtures():
    out = ROOT / "fixtures" / "seg"
    out.mkdir(parents=True, exist_ok=True)
    ys, xs = np.mgrid[0:SIDE, 0:SIDE]

    def save_rgb(name, arr):
        Image.fromarray(arr, "RGB").save(out / f"{name}.png")

    def save_mask(name, mask):
        Image.fromarray(np.where(mask, 255, 0).astype(np.uint8), "L").save(out / f"{name}_mask.png")

    red, blue = (214, 45, 48), (52, 98, 211)

    # hard-edged disk on white
    d2 = (xs - 32.0) ** 2 + (ys - 32.0) ** 2
    disk = d2 <= 20.0**2
    img = np.full((SIDE, SIDE, 3), 255, np.uint8)
    img[disk] = red
    save_rgb("disk", img)
    save_mask("disk", disk)

    # ring with an enclosed white hole: hole stays opaque
    ring = (d2 <= 22.0**2) & (d2 >= 12.0**2)
    img = np.full((SIDE, SIDE, 3), 255, np.uint8)
    img[ring] = red
    save_rgb("ring", img)
    save_mask("ring", d2 <= 22.0**2)

    # shape touching the border: seeds on the border must respect color
    stripe = (xs <= 14) & (ys >= 10) & (ys <= 54)
    bump = (xs - 14.0) ** 2 + (ys - 32.0) ** 2 <= 14.0**2
    shape = stripe | bump
    img = np.full((SIDE, SIDE, 3), 255, np.uint8)
    img[shape] = blue
    save_rgb("border", img)
    save_mask("border", shape)

    # golden RGBA compose of the disk fixture (straight-line reference)
    img_disk = np.full((SIDE, SIDE, 3), 255, np.uint8)
    img_disk[disk] = red
    alpha = np.where(disk, 255, 0).astype(np.uint8)
    Image.fromarray(np.dstack([img_disk, alpha]), "RGBA").save(out / "disk_rgba_golden.png")
    print(f"wrote segmentation fixtures to {out}")


if __name__ == "__main__":
    emoji_fixtures()
    seg_fixtures()
