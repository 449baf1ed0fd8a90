"""Procedural garment-glyph dataset with ground-truth attributes and masks.

Each sample is a 64x64 RGB raster of a mannequin stick figure wearing a
garment whose geometry deterministically encodes the low-level attributes:
the lower edge row encodes clothing length, sleeve bands along the arms
encode sleeve length and type, and so on. High-level concepts map to the
fill palette and background tint. Every applicable attribute also gets an
analytic "oracle" mask bounding the pixels its value can influence, which is
what lets the editing pipeline be verified mechanically.
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import imageio, rle
from .conditioning import NULL_TOKEN, TokenVocabulary
from .prompts import PromptHierarchy

IMG_SIZE = 64

CATEGORIES = ("dress", "coat", "shirt", "sweater", "pants", "jumpsuit")

PALETTES = {
    "crimson": (0.72, 0.15, 0.20),
    "navy": (0.13, 0.20, 0.55),
    "olive": (0.35, 0.45, 0.15),
    "violet": (0.48, 0.18, 0.58),
}

OCCASIONS = {
    "office": (0.94, 0.94, 0.94),
    "party": (0.97, 0.92, 0.88),
    "sport": (0.88, 0.94, 0.97),
}

ATTRIBUTE_LEVELS = {
    "clothing_length": ("ultra_short", "short", "knee", "mid", "long"),
    "sleeve_length": ("sleeveless", "short", "elbow", "mid", "long"),
    "sleeve_type": ("straight", "puffed", "flared", "raglan"),
    "collar": ("round", "vneck", "square", "stand"),
    "hem": ("flat", "curved", "ruffle", "slit"),
    "waistline": ("natural", "low", "high", "elastic"),
}

# canonical garment-design order; pants drop the upper-body attributes
LOW_ORDER = ("clothing_length", "sleeve_length", "sleeve_type", "collar", "hem", "waistline")

MANNEQUIN_COLOR = (0.30, 0.30, 0.32)

KEYPOINT_NAMES = (
    "head", "neck",
    "shoulder_l", "shoulder_r",
    "elbow_l", "elbow_r",
    "wrist_l", "wrist_r",
    "hip_l", "hip_r",
    "knee_l", "knee_r",
    "ankle_l", "ankle_r",
)

_CANONICAL = {
    "head": (32, 6), "neck": (32, 11),
    "shoulder_l": (24, 14), "shoulder_r": (40, 14),
    "elbow_l": (20, 24), "elbow_r": (44, 24),
    "wrist_l": (17, 33), "wrist_r": (47, 33),
    "hip_l": (27, 35), "hip_r": (37, 35),
    "knee_l": (26, 46), "knee_r": (38, 46),
    "ankle_l": (25, 57), "ankle_r": (39, 57),
}

# fraction of the shoulder->wrist polyline covered by each sleeve length
_SLEEVE_EXTENT = {"sleeveless": 0.10, "short": 0.32, "elbow": 0.55, "mid": 0.78, "long": 1.0}


def applicable_attributes(category: str) -> tuple[str, ...]:
    if category == "pants":
        return ("clothing_length", "hem", "waistline")
    return ("clothing_length", "sleeve_length", "sleeve_type", "collar", "hem")


def build_vocabulary(embedding_dim: int = 64) -> TokenVocabulary:
    tokens = [NULL_TOKEN]
    tokens += [f"category:{c}" for c in CATEGORIES]
    tokens += [f"style:{p}" for p in PALETTES]
    tokens += [f"occasion:{o}" for o in OCCASIONS]
    for attr in LOW_ORDER:
        tokens += [f"{attr}:{v}" for v in ATTRIBUTE_LEVELS[attr]]
    return TokenVocabulary(tokens=tuple(tokens), embedding_dim=embedding_dim)


@dataclass(frozen=True)
class GlyphSpec:
    category: str
    style: str
    occasion: str
    attributes: dict
    seed: int

    def __post_init__(self):
        if self.category not in CATEGORIES:
            raise ValueError(f"unknown category {self.category!r}")
        if self.style not in PALETTES:
            raise ValueError(f"unknown style palette {self.style!r}")
        if self.occasion not in OCCASIONS:
            raise ValueError(f"unknown occasion {self.occasion!r}")
        want = set(applicable_attributes(self.category))
        got = set(self.attributes)
        if want != got:
            raise ValueError(
                f"{self.category} needs attributes {sorted(want)}, got {sorted(got)}"
            )
        for a, v in self.attributes.items():
            if v not in ATTRIBUTE_LEVELS[a]:
                raise ValueError(f"bad value {v!r} for attribute {a}")

    def hierarchy(self, interval_fraction: float = 0.15) -> PromptHierarchy:
        high = (
            f"category:{self.category}",
            f"style:{self.style}",
            f"occasion:{self.occasion}",
        )
        low = tuple(
            f"{a}:{self.attributes[a]}"
            for a in LOW_ORDER
            if a in self.attributes
        )
        return PromptHierarchy(high=high, low=low, interval_fraction=interval_fraction)

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "GlyphSpec":
        return cls(
            category=d["category"], style=d["style"], occasion=d["occasion"],
            attributes=dict(d["attributes"]), seed=int(d["seed"]),
        )


@dataclass
class GlyphSample:
    image: np.ndarray           # (64, 64, 3) float32 in [0,1], PNG-exact
    spec: GlyphSpec
    keypoints: dict             # name -> (x, y) ints
    oracle_masks: dict          # attribute -> (64, 64) uint8


def canonical_skeleton() -> dict:
    """Jitter-free mannequin joints; the anchor for masks on synthesized drafts."""
    return {name: tuple(_CANONICAL[name]) for name in KEYPOINT_NAMES}


def skeleton_for_seed(seed: int) -> dict:
    """Canonical mannequin joints with seeded jitter bounded by +/-2 px."""
    rng = np.random.default_rng(np.random.SeedSequence([0x5EED, seed & 0xFFFFFFFF]))
    gx, gy = rng.integers(-1, 2, size=2)
    kps = {}
    for name in KEYPOINT_NAMES:
        x, y = _CANONICAL[name]
        jx, jy = rng.integers(-1, 2, size=2)
        kps[name] = (int(x + gx + jx), int(y + gy + jy))
    return kps


# -- raster helpers ----------------------------------------------------------


def _grid():
    ys, xs = np.mgrid[0:IMG_SIZE, 0:IMG_SIZE]
    return xs.astype(np.float64), ys.astype(np.float64)


def _seg_dist(xs, ys, a, b):
    """Distance from every pixel to segment a->b, plus projection fraction."""
    ax, ay = a
    bx, by = b
    dx, dy = bx - ax, by - ay
    L2 = dx * dx + dy * dy
    if L2 == 0:
        return np.hypot(xs - ax, ys - ay), np.zeros_like(xs)
    t = np.clip(((xs - ax) * dx + (ys - ay) * dy) / L2, 0.0, 1.0)
    px, py = ax + t * dx, ay + t * dy
    return np.hypot(xs - px, ys - py), t


def _polyline_field(xs, ys, points):
    """Min distance to a polyline and are-length fraction of nearest point."""
    lens = [np.hypot(b[0] - a[0], b[1] - a[1]) for a, b in zip(points, points[1:])]
    total = sum(lens) or 1.0
    best_d = None
    best_s = None
    acc = 0.0
    for (a, b), L in zip(zip(points, points[1:]), lens):
        d, t = _seg_dist(xs, ys, a, b)
        s = (acc + t * L) / total
        if best_d is None:
            best_d, best_s = d, s
        else:
            closer = d < best_d
            best_s = np.where(closer, s, best_s)
            best_d = np.minimum(d, best_d)
        acc += L
    return best_d, best_s


def _paint(img, mask, color):
    img[mask] = color


def _bottom_anchor_rows(kp) -> list:
    hip = (kp["hip_l"][1] + kp["hip_r"][1]) / 2
    knee = (kp["knee_l"][1] + kp["knee_r"][1]) / 2
    ankle = (kp["ankle_l"][1] + kp["ankle_r"][1]) / 2
    return [
        int(round(hip + 2)),
        int(round((hip + knee) / 2 + 1)),
        int(round(knee)),
        int(round((knee + ankle) / 2)),
        int(round(ankle)),
    ]


def bottom_row_for(spec_level: int, kp) -> int:
    return _bottom_anchor_rows(kp)[spec_level]


_FLARE = {"dress": 0.22, "coat": 0.08, "shirt": 0.05, "sweater": 0.10, "jumpsuit": 0.06}


def _torso_half_width(category: str, kp, rows: np.ndarray) -> np.ndarray:
    shoulder_half = (kp["shoulder_r"][0] - kp["shoulder_l"][0]) / 2 + 1.0
    hip_row = (kp["hip_l"][1] + kp["hip_r"][1]) / 2
    flare = _FLARE[category]
    return shoulder_half - 0.5 + flare * np.maximum(0.0, rows - hip_row)


def _shade(color, f):
    return tuple(c * f for c in color)


def render(spec: GlyphSpec) -> GlyphSample:
    """Deterministic raster of a spec; pure function of spec (incl. its seed)."""
    kp = skeleton_for_seed(spec.seed)
    xs, ys = _grid()
    fill = PALETTES[spec.style]
    dark = _shade(fill, 0.55)
    img = np.empty((IMG_SIZE, IMG_SIZE, 3), dtype=np.float64)
    img[:, :] = OCCASIONS[spec.occasion]

    cx = kp["neck"][0]
    neck_row = kp["neck"][1]
    shoulder_row = (kp["shoulder_l"][1] + kp["shoulder_r"][1]) // 2
    hip_row = (kp["hip_l"][1] + kp["hip_r"][1]) // 2
    hip_cx = (kp["hip_l"][0] + kp["hip_r"][0]) / 2

    # mannequin: head disc plus stick limbs
    head = kp["head"]
    _paint(img, np.hypot(xs - head[0], ys - head[1]) <= 3.0, MANNEQUIN_COLOR)
    limbs = [
        (kp["neck"], ((kp["hip_l"][0] + kp["hip_r"][0]) / 2, hip_row)),
        (kp["shoulder_l"], kp["shoulder_r"]),
        (kp["shoulder_l"], kp["elbow_l"]), (kp["elbow_l"], kp["wrist_l"]),
        (kp["shoulder_r"], kp["elbow_r"]), (kp["elbow_r"], kp["wrist_r"]),
        (kp["hip_l"], kp["knee_l"]), (kp["knee_l"], kp["ankle_l"]),
        (kp["hip_r"], kp["knee_r"]), (kp["knee_r"], kp["ankle_r"]),
        (kp["hip_l"], kp["hip_r"]),
    ]
    for a, b in limbs:
        d, _ = _seg_dist(xs, ys, a, b)
        _paint(img, d <= 1.0, MANNEQUIN_COLOR)

    level = ATTRIBUTE_LEVELS["clothing_length"].index(spec.attributes["clothing_length"])
    bottom = bottom_row_for(level, kp)
    has_torso = spec.category != "pants"
    has_legs = spec.category in ("pants", "jumpsuit")

    garment = np.zeros((IMG_SIZE, IMG_SIZE), dtype=bool)
    torso_bottom = bottom if not has_legs else hip_row + 3
    if has_torso:
        hw = _torso_half_width(spec.category, kp, ys)
        torso = (
            (ys >= shoulder_row - 1)
            & (ys <= torso_bottom)
            & (np.abs(xs - cx) <= hw)
        )
        garment |= torso
    if has_legs:
        for side in ("l", "r"):
            pts = [
                (kp[f"hip_{side}"][0], hip_row + 1),
                kp[f"knee_{side}"],
                kp[f"ankle_{side}"],
            ]
            d, s = _polyline_field(xs, ys, pts)
            leg = (d <= 3.2) & (ys <= bottom) & (ys >= hip_row - 1)
            garment |= leg
        waistband = (
            (ys >= hip_row - 1)
            & (ys <= hip_row + 2)
            & (xs >= kp["hip_l"][0] - 4)
            & (xs <= kp["hip_r"][0] + 4)
        )
        garment |= waistband
    _paint(img, garment, fill)

    # category texture details
    if spec.category == "coat":
        line = garment & (np.abs(xs - cx) <= 0.6) & (ys >= shoulder_row + 2)
        _paint(img, line, dark)
    elif spec.category == "shirt":
        dots = garment & (np.abs(xs - cx) <= 0.5) & (ys % 4 == 1) & (ys >= shoulder_row + 2)
        _paint(img, dots, dark)
    elif spec.category == "sweater":
        knit = garment & ((ys.astype(int) - shoulder_row) % 4 == 2)
        _paint(img, knit, _shade(fill, 0.82))
    elif spec.category == "jumpsuit":
        line = garment & (np.abs(xs - cx) <= 0.6) & (ys >= shoulder_row + 2) & (ys <= hip_row)
        _paint(img, line, dark)

    # sleeves: band around each arm polyline, width profiled by sleeve type
    if has_torso:
        extent = _SLEEVE_EXTENT[spec.attributes["sleeve_length"]]
        stype = spec.attributes["sleeve_type"]
        for side in ("l", "r"):
            pts = [kp[f"shoulder_{side}"], kp[f"elbow_{side}"], kp[f"wrist_{side}"]]
            d, s = _polyline_field(xs, ys, pts)
            rel = np.clip(s / extent, 0.0, 1.0)
            if stype == "straight":
                hw_s = np.full_like(d, 2.4)
            elif stype == "puffed":
                hw_s = 2.2 + 2.3 * np.sin(np.pi * rel)
            elif stype == "flared":
                hw_s = 1.8 + 3.0 * rel
            else:  # raglan
                hw_s = 4.2 - 2.2 * rel
            sleeve = (d <= hw_s) & (s <= extent)
            _paint(img, sleeve, _shade(fill, 0.90))

    # collar glyph at the neck box
    if has_torso:
        collar = spec.attributes["collar"]
        if collar == "round":
            m = (np.hypot(xs - cx, ys - (neck_row + 2)) <= 4.2) & (ys >= neck_row)
        elif collar == "vneck":
            m = (np.abs(xs - cx) <= 0.9 * (ys - neck_row)) & (ys >= neck_row) & (
                ys <= neck_row + 6
            )
        elif collar == "square":
            m = (np.abs(xs - cx) <= 4) & (ys >= neck_row) & (ys <= neck_row + 4)
        else:  # stand
            m = (np.abs(xs - cx) <= 5) & (ys >= neck_row - 2) & (ys <= neck_row + 1)
        _paint(img, m, dark)

    # hem band at the garment's current lower edge
    hem = spec.attributes["hem"]
    if has_legs:
        hem_centers = [
            ((kp["knee_l"][0] + kp["ankle_l"][0]) / 2, 3.4),
            ((kp["knee_r"][0] + kp["ankle_r"][0]) / 2, 3.4),
        ]
    else:
        hw_bottom = float(_torso_half_width(spec.category, kp, np.array([bottom]))[0])
        hem_centers = [(cx, hw_bottom)]
    for hx, hhw in hem_centers:
        inband = np.abs(xs - hx) <= hhw
        if hem == "flat":
            m = inband & (ys >= bottom - 1) & (ys <= bottom)
        elif hem == "curved":
            dip = 2.0 * np.square((xs - hx) / max(hhw, 1.0))
            m = inband & (ys >= bottom - 1 - dip) & (ys <= bottom - dip)
        elif hem == "ruffle":
            tooth = ((xs.astype(int) // 2) % 2 == 0).astype(np.float64)
            m = inband & (ys >= bottom - 1 - tooth) & (ys <= bottom - tooth)
        else:  # slit
            m = inband & (ys >= bottom - 1) & (ys <= bottom)
            notch = (np.abs(xs - hx) <= 1.0) & (ys >= bottom - 4) & (ys <= bottom)
            _paint(img, notch, OCCASIONS[spec.occasion])
            m = m & ~notch
        _paint(img, m, dark)

    # waistline marker (pants only)
    if spec.category == "pants":
        waist = spec.attributes["waistline"]
        wl, wr = kp["hip_l"][0] - 4, kp["hip_r"][0] + 4
        span = (xs >= wl) & (xs <= wr)
        if waist == "natural":
            m = span & (ys == hip_row)
        elif waist == "low":
            m = span & (ys == hip_row + 3)
        elif waist == "high":
            m = span & (ys >= hip_row - 3) & (ys <= hip_row - 2)
        else:  # elastic
            m = span & (ys == hip_row) & ((xs.astype(int) // 2) % 2 == 0)
        _paint(img, m, dark)

    image = (np.round(np.clip(img, 0.0, 1.0) * 255.0) / 255.0).astype(np.float32)
    masks = oracle_masks(spec, kp)
    return GlyphSample(image=image, spec=spec, keypoints=kp, oracle_masks=masks)


def oracle_masks(spec: GlyphSpec, kp: dict) -> dict:
    """Analytic per-attribute bounds on the pixels each attribute can move."""
    xs, ys = _grid()
    hip_row = (kp["hip_l"][1] + kp["hip_r"][1]) // 2
    neck_row = kp["neck"][1]
    cx = kp["neck"][0]
    anchors = _bottom_anchor_rows(kp)
    level = ATTRIBUTE_LEVELS["clothing_length"].index(spec.attributes["clothing_length"])
    bottom = anchors[level]

    lo_bounds, hi_bounds = [], []
    if spec.category != "pants":
        hw_max = float(
            _torso_half_width(spec.category, kp, np.array([float(anchors[-1])]))[0]
        )
        lo_bounds.append(cx - hw_max)
        hi_bounds.append(cx + hw_max)
    if spec.category in ("pants", "jumpsuit"):
        leg_xs = [kp[f"{j}_{s}"][0] for j in ("hip", "knee", "ankle") for s in ("l", "r")]
        lo_bounds.append(min(leg_xs) - 5)
        hi_bounds.append(max(leg_xs) + 5)
    gmin, gmax = min(lo_bounds), max(hi_bounds)
    gcols = (xs >= gmin - 2) & (xs <= gmax + 2)

    masks = {}
    masks["clothing_length"] = (
        gcols & (ys >= anchors[0] - 6) & (ys <= anchors[-1] + 4)
    )
    if spec.category != "pants":
        arm = np.zeros((IMG_SIZE, IMG_SIZE), dtype=bool)
        for side in ("l", "r"):
            pts = [kp[f"shoulder_{side}"], kp[f"elbow_{side}"], kp[f"wrist_{side}"]]
            axs = [p[0] for p in pts]
            ayz = [p[1] for p in pts]
            arm |= (
                (xs >= min(axs) - 7) & (xs <= max(axs) + 7)
                & (ys >= min(ayz) - 6) & (ys <= max(ayz) + 7)
            )
        masks["sleeve_length"] = arm
        masks["sleeve_type"] = arm.copy()
        masks["collar"] = (
            (xs >= cx - 8) & (xs <= cx + 8) & (ys >= neck_row - 4) & (ys <= neck_row + 8)
        )
    masks["hem"] = gcols & (ys >= bottom - 7) & (ys <= bottom + 4)
    if spec.category == "pants":
        masks["waistline"] = (
            (xs >= kp["hip_l"][0] - 9) & (xs <= kp["hip_r"][0] + 9)
            & (ys >= hip_row - 5) & (ys <= hip_row + 5)
        )
    return {a: m.astype(np.uint8) for a, m in masks.items() if a in spec.attributes}


def sample_spec(rng: np.random.Generator, category: str, seed: int) -> GlyphSpec:
    attrs = {
        a: ATTRIBUTE_LEVELS[a][rng.integers(0, len(ATTRIBUTE_LEVELS[a]))]
        for a in applicable_attributes(category)
    }
    return GlyphSpec(
        category=category,
        style=list(PALETTES)[rng.integers(0, len(PALETTES))],
        occasion=list(OCCASIONS)[rng.integers(0, len(OCCASIONS))],
        attributes=attrs,
        seed=seed,
    )


def _sample_sidecar(sample: GlyphSample, split: str) -> dict:
    return {
        "spec": sample.spec.to_dict(),
        "keypoints": {k: list(v) for k, v in sample.keypoints.items()},
        "oracle_masks": {a: rle.encode(m) for a, m in sample.oracle_masks.items()},
        "split": split,
    }


def generate_corpus(n_per_category: int, seed: int, out_dir) -> dict:
    """Render a corpus to PNGs + JSON sidecars; returns the manifest."""
    if n_per_category < 1:
        raise ValueError("n_per_category must be >= 1")
    out = Path(out_dir)
    (out / "images").mkdir(parents=True, exist_ok=True)
    (out / "sidecars").mkdir(parents=True, exist_ok=True)

    items = []
    hasher = hashlib.sha256()
    for ci, category in enumerate(CATEGORIES):
        ss = np.random.SeedSequence([seed, ci])
        rng = np.random.default_rng(ss)
        sample_seeds = rng.integers(0, 2**31 - 1, size=n_per_category)
        # deterministic 80/10/10 split by position after a seeded shuffle
        order = rng.permutation(n_per_category)
        n_val = max(1, n_per_category // 10) if n_per_category >= 3 else 0
        n_test = n_val
        split_of = {}
        for pos, idx in enumerate(order):
            if pos < n_val:
                split_of[idx] = "val"
            elif pos < n_val + n_test:
                split_of[idx] = "test"
            else:
                split_of[idx] = "train"
        for i in range(n_per_category):
            spec = sample_spec(rng, category, int(sample_seeds[i]))
            sample = render(spec)
            name = f"{category}_{i:04d}"
            imageio.save_png(out / "images" / f"{name}.png", sample.image)
            sidecar = _sample_sidecar(sample, split_of.get(i, "train"))
            (out / "sidecars" / f"{name}.json").write_text(
                json.dumps(sidecar, sort_keys=True)
            )
            items.append(
                {
                    "name": name,
                    "image": f"images/{name}.png",
                    "sidecar": f"sidecars/{name}.json",
                    "category": category,
                    "split": sidecar["split"],
                }
            )
            hasher.update(json.dumps(sidecar, sort_keys=True).encode())
            hasher.update(sample.image.tobytes())

    vocab = build_vocabulary()
    (out / "vocabulary.json").write_text(vocab.to_json())
    manifest = {
        "seed": seed,
        "n_per_category": n_per_category,
        "resolution": IMG_SIZE,
        "categories": list(CATEGORIES),
        "vocabulary": "vocabulary.json",
        "content_hash": hasher.hexdigest(),
        "items": items,
    }
    (out / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True))
    return manifest


class Corpus:
    """In-memory view over a generated corpus directory."""

    def __init__(self, manifest_path):
        self.root = Path(manifest_path).parent
        self.manifest = json.loads(Path(manifest_path).read_text())
        self.vocab = TokenVocabulary.from_json(
            (self.root / self.manifest["vocabulary"]).read_text()
        )
        self._samples: dict[str, GlyphSample] = {}

    def items(self, split: str | None = None) -> list[dict]:
        return [
            it for it in self.manifest["items"] if split is None or it["split"] == split
        ]

    def load(self, item: dict) -> GlyphSample:
        name = item["name"]
        if name not in self._samples:
            sidecar = json.loads((self.root / item["sidecar"]).read_text())
            image = imageio.load_png(self.root / item["image"])
            self._samples[name] = GlyphSample(
                image=image,
                spec=GlyphSpec.from_dict(sidecar["spec"]),
                keypoints={k: tuple(v) for k, v in sidecar["keypoints"].items()},
                oracle_masks={
                    a: rle.decode(r) for a, r in sidecar["oracle_masks"].items()
                },
            )
        return self._samples[name]
