#!/usr/bin/env python3
"""Builds the golden end-to-end fixture.

Writes images, annotations, proposals, codebook, vocabulary, swap sets, an
embedding cache and a config, plus expected.json: the detections the run
must produce, derived here from the scene design rather than from the
engine. Crop ids are recomputed independently (fusion, size class, scale
plan, center scaling with clamping).

Usage: make_fixture.py [output_dir]
"""

import json
import os
import random
import struct
import sys
import zlib

W = H = 400
RESOLUTION = 0.5
DIM = 8

CATEGORIES = ["ship", "vehicle", "storage tank", "harbor"]
CAT_IDS = {name: i + 1 for i, name in enumerate(CATEGORIES)}
COLORS = {"ship": (40, 90, 200), "vehicle": (220, 60, 40),
          "storage tank": (200, 200, 200), "harbor": (120, 80, 40)}

# Snippets: category names on axes 0-3, attribute phrases on axes 4-7.
SNIPPETS = [
    ("cat.ship", "ship", "common_category"),
    ("cat.vehicle", "vehicle", "common_category"),
    ("cat.storage_tank", "storage tank", "common_category"),
    ("cat.harbor", "harbor", "common_category"),
    ("attr.hull", "Elongated hull with a pointed bow", "shape"),
    ("attr.rect", "Rectangular shape", "shape"),
    ("attr.tanks", "Cylindrical tanks arranged in rows", "appearance"),
    ("attr.piers", "Long piers extending into the water", "spatial"),
]
AXIS = {sid: i for i, (sid, _, _) in enumerate(SNIPPETS)}

# image id -> ground truth list of (category, [x1, y1, x2, y2])
GROUND_TRUTH = {
    1: [("ship", [50, 60, 90, 90]), ("vehicle", [200, 200, 210, 212]),
        ("storage tank", [300, 300, 380, 360])],
    2: [("harbor", [100, 100, 180, 160]), ("ship", [250, 250, 290, 280])],
    3: [("ship", [60, 60, 100, 90]), ("ship", [105, 60, 145, 90])],
    4: [("vehicle", [200, 100, 210, 112]), ("vehicle", [220, 100, 232, 110])],
    5: [("storage tank", [50, 50, 130, 110])],
}

# (image, source, box, score, top snippet of the primary view)
# The top snippet decides the mock model's answer. "fail" marks the object
# whose completion comes back empty.
PROPOSALS = [
    (1, "rpn", [50, 60, 90, 90], 0.95, "cat.ship"),
    (1, "sam", [52, 60, 92, 90], 0.90, "cat.ship"),          # fused away
    (1, "rpn", [200, 200, 210, 212], 0.80, "cat.vehicle"),   # answered via synonym
    (1, "sam", [300, 300, 380, 372], 0.85, "cat.storage_tank"),  # IoU 0.833
    (2, "rpn", [100, 100, 180, 160], 0.88, "cat.harbor"),
    (2, "rpn", [250, 250, 290, 280], 0.70, "cat.vehicle"),   # wrong class
    (2, "sam", [10, 10, 50, 40], 0.60, "cat.ship"),          # background
    (3, "rpn", [60, 60, 100, 90], 0.92, "cat.ship"),
    (3, "sam", [107, 62, 145, 90], 0.91, "cat.ship"),        # IoU 0.887
    (3, "rpn", [105, 60, 145, 90], 0.65, "cat.ship"),        # fused away
    (4, "rpn", [200, 100, 210, 112], 0.75, "attr.rect"),     # no category
    (4, "rpn", [220, 100, 232, 110], 0.74, "fail"),
    (5, "sam", [300, 300, 340, 330], 0.55, "cat.harbor"),    # no ground truth
]

FAIL_NEEDLE = "Bounding box: 12.0 x 10.0 pixels"
MOCK_ANSWERS = {"vehicle": "automobile", "storage tank": "A Storage-Tank."}
SYNONYMS = {"automobile": "vehicle"}

SWAP_SETS = {
    "texts-1": {"ship": "vessel", "vehicle": "car", "storage tank": "oil tank", "harbor": "port"},
    "texts-2": {"ship": "boat", "vehicle": "motor vehicle", "storage tank": "fuel tank",
                "harbor": "marina"},
    "texts-3": {"ship": "watercraft", "vehicle": "auto", "storage tank": "storage container",
                "harbor": "seaport"},
}

SMALL_BELOW, LARGE_ABOVE = 0.001, 0.02
SCALES = {
    "small": ([0.5, 0.7], [2.0, 4.0, 8.0]),
    "medium": ([0.5, 0.7, 0.9], [1.5, 2.5, 4.0]),
    "large": ([0.4, 0.6, 0.8], [1.3, 1.8]),
}
NMS_THRESHOLD = 0.5


def area(b):
    return (b[2] - b[0]) * (b[3] - b[1])


def iou(a, b):
    iw = min(a[2], b[2]) - max(a[0], b[0])
    ih = min(a[3], b[3]) - max(a[1], b[1])
    if iw <= 0 or ih <= 0:
        return 0.0
    inter = iw * ih
    return inter / (area(a) + area(b) - inter)


def fuse(props):
    """Greedy suppression over the pooled sources, best score first."""
    ranked = sorted(props, key=lambda p: (-p[3], p[1], tuple(p[2])))
    kept = []
    for p in ranked:
        if all(iou(p[2], k[2]) <= NMS_THRESHOLD for k in kept):
            kept.append(p)
    return kept


def size_level(box):
    frac = min(1.0, area(box) / float(W * H))
    if frac < SMALL_BELOW:
        return "small"
    if frac > LARGE_ABOVE:
        return "large"
    return "medium"


def scaled(box, f):
    cx = (box[0] + box[2]) / 2.0
    cy = (box[1] + box[3]) / 2.0
    hw = (box[2] - box[0]) / 2.0 * f
    hh = (box[3] - box[1]) / 2.0 * f
    clamp = lambda v, hi: min(max(v, 0.0), float(hi))
    return (clamp(cx - hw, W), clamp(cy - hh, H), clamp(cx + hw, W), clamp(cy + hh, H))


def crop_ids(image_id, box):
    zin, zout = SCALES[size_level(box)]
    plan = [("primary", 1.0)] + [("zoom_in", f) for f in zin] + [("zoom_out", f) for f in zout]
    anchor = ",".join("%g" % v for v in box)
    out, extents = [], []
    for role, f in plan:
        ext = scaled(box, f)
        if ext in extents:
            continue
        extents.append(ext)
        out.append((role, "%s/%s/%s@%g" % (image_id, anchor, role, f)))
    return out


def f32(v):
    return struct.unpack("<f", struct.pack("<f", v))[0]


def write_cache(path, entries):
    with open(path, "wb") as fh:
        fh.write(b"GWEMB1")
        fh.write(struct.pack("<HIQ", 1, DIM, len(entries)))
        for key, vec in entries:
            raw = key.encode()
            fh.write(struct.pack("<H", len(raw)))
            fh.write(raw)
            fh.write(struct.pack("<%df" % DIM, *vec))


def write_png(path, pixels):
    rows = b"".join(b"\x00" + bytes(row) for row in pixels)

    def chunk(tag, data):
        body = tag + data
        return struct.pack(">I", len(data)) + body + struct.pack(">I", zlib.crc32(body) & 0xFFFFFFFF)

    with open(path, "wb") as fh:
        fh.write(b"\x89PNG\r\n\x1a\n")
        fh.write(chunk(b"IHDR", struct.pack(">IIBBBBB", W, H, 8, 2, 0, 0, 0)))
        fh.write(chunk(b"IDAT", zlib.compress(rows, 9)))
        fh.write(chunk(b"IEND", b""))


def render_image(image_id):
    rng = random.Random(image_id)
    base = (30 + rng.randrange(20), 70 + rng.randrange(20), 60 + rng.randrange(20))
    pixels = [list(base) * W for _ in range(H)]
    for cat, (x1, y1, x2, y2) in GROUND_TRUTH[image_id]:
        for y in range(y1, y2):
            for x in range(x1, x2):
                pixels[y][3 * x:3 * x + 3] = COLORS[cat]
    return pixels


def dump(path, doc):
    with open(path, "w") as fh:
        json.dump(doc, fh, indent=2)
        fh.write("\n")


def main():
    out = sys.argv[1] if len(sys.argv) > 1 else os.path.dirname(os.path.abspath(__file__))
    os.makedirs(os.path.join(out, "images"), exist_ok=True)
    rng = random.Random(20240611)

    images, annotations = [], []
    for image_id in sorted(GROUND_TRUTH):
        name = "img%d.png" % image_id
        write_png(os.path.join(out, "images", name), render_image(image_id))
        images.append({"id": image_id, "file_name": name, "width": W, "height": H,
                       "resolution": RESOLUTION})
        for cat, (x1, y1, x2, y2) in GROUND_TRUTH[image_id]:
            annotations.append({"id": len(annotations) + 1, "image_id": image_id,
                                "category_id": CAT_IDS[cat], "bbox": [x1, y1, x2 - x1, y2 - y1]})
    dump(os.path.join(out, "annotations.json"),
         {"images": images, "annotations": annotations,
          "categories": [{"id": CAT_IDS[c], "name": c} for c in CATEGORIES]})

    with open(os.path.join(out, "proposals.jsonl"), "w") as fh:
        for image_id, source, box, score, _ in PROPOSALS:
            fh.write(json.dumps({"image_id": image_id, "bbox": box, "score": score,
                                 "source": source}) + "\n")

    dump(os.path.join(out, "codebook.json"),
         [{"id": sid, "text": text, "class": cls, "domain": "remote_sensing"}
          for sid, text, cls in SNIPPETS])
    dump(os.path.join(out, "vocabulary.json"), {"categories": CATEGORIES, "synonyms": SYNONYMS})
    for set_id, aliases in SWAP_SETS.items():
        dump(os.path.join(out, "swap_%s.json" % set_id), {"set_id": set_id, "aliases": aliases})

    entries = []
    for sid, _, _ in SNIPPETS:
        vec = [0.0] * DIM
        vec[AXIS[sid]] = 1.0
        entries.append((sid, vec))

    expected = []
    by_image = {}
    for p in PROPOSALS:
        by_image.setdefault(p[0], []).append(p)
    for image_id in sorted(by_image):
        for _, source, box, score, top in fuse(by_image[image_id]):
            for role, cid in crop_ids(image_id, box):
                vec = [round(rng.uniform(0.0, 0.1), 3) for _ in range(DIM)]
                if role == "primary":
                    axis = AXIS["cat.ship"] if top == "fail" else AXIS[top]
                    vec[axis] = 1.0
                    if axis < 4:
                        vec[axis + 4] += 0.5
                entries.append((cid, [f32(v) for v in vec]))
            if top == "fail":
                category = "unknown"
            elif top.startswith("cat."):
                category = SNIPPETS[AXIS[top]][1]
            else:
                category = "unknown"
            expected.append({"image_id": str(image_id), "bbox": box, "score": score,
                             "source": source, "category": category, "failed": top == "fail"})
    write_cache(os.path.join(out, "embeddings.gwemb"), entries)

    expected.sort(key=lambda d: (d["image_id"], d["bbox"], d["source"]))
    dump(os.path.join(out, "expected.json"),
         {"detections": expected,
          "counts": {"images": len(GROUND_TRUTH),
                     "proposals_in": len(PROPOSALS),
                     "proposals_out": len(expected),
                     "failures": sum(d["failed"] for d in expected),
                     "unknowns": sum(d["category"] == "unknown" for d in expected)}})

    dump(os.path.join(out, "config.json"), {
        "scene_kind": "remote_sensing",
        "codebook": "codebook.json",
        "vocabulary": "vocabulary.json",
        "swap_sets": ["swap_%s.json" % s for s in SWAP_SETS],
        "embedding": {"cache": ["embeddings.gwemb"]},
        "chat": {"retries": 0},
        "mock_llm": {"answers": MOCK_ANSWERS,
                     "overrides": [{"needle": FAIL_NEEDLE, "response": ""}]},
        "workers": 4,
        "output_dir": "out",
    })


if __name__ == "__main__":
    main()
