"""Synthetic ambiguous-scene dataset, case-level splits and augmentation.

Every scene holds 1-3 regions in distinct quadrants.  Regions are drawn on
a 2-pixel lattice (so the decoder's half-resolution output can represent
them exactly), keep a margin from the quadrant midlines, and sit where a
rotation of up to 20 degrees cannot move any mask pixel into another
quadrant (images of 32 pixels and up).  In an *ambiguous*
scene two regions are identical in shape, size and intensity and the
prompt names exactly one of them.
"""

from __future__ import annotations

import csv
import json
import math
from functools import lru_cache
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np
from scipy import ndimage

from .errors import ConfigError, DataError

QUADRANTS = ("upper left", "upper right", "lower left", "lower right")
KINDS = ("rect", "disc", "ring")
COUNT_WORDS = {1: "one", 2: "two", 3: "three"}
CELL = 2
MAX_ATTEMPTS = 100
MAX_ROT_DEG = 20.0
MARGIN_FRAC = 0.15
SPLITS = ("train", "val", "test")

# exact quadrant permutations for the lattice transforms
_ROT90 = {"upper left": "lower left", "lower left": "lower right",
          "lower right": "upper right", "upper right": "upper left"}
_HFLIP = {"upper left": "upper right", "upper right": "upper left",
          "lower left": "lower right", "lower right": "lower left"}
_VFLIP = {"upper left": "lower left", "lower left": "upper left",
          "upper right": "lower right", "lower right": "upper right"}


@dataclass
class SynthConfig:
    n_cases: int = 600
    slices_per_case: int = 1
    image_size: int = 32
    ambiguous_fraction: float = 0.5
    seed: int = 0

    def __post_init__(self):
        if self.image_size < 16 or self.image_size % 16:
            raise ConfigError(f"image size must be >= 16 and divisible by 16, got {self.image_size}")
        if self.n_cases < 1 or self.slices_per_case < 1:
            raise ConfigError("case and slice counts must be >= 1")
        # only 2- and 3-region scenes (two thirds of all cases) can be ambiguous
        if not 0.0 <= self.ambiguous_fraction <= 2.0 / 3.0:
            raise ConfigError(f"ambiguous_fraction must lie in [0, 2/3], got {self.ambiguous_fraction}")

    def region_sizes(self) -> tuple[int, int]:
        """Region side lengths in pixels (multiples of the lattice cell)."""
        half = self.image_size // 2
        largest = half - math.ceil(MARGIN_FRAC * half)
        largest -= largest % CELL
        base = self.image_size * 3 // 16
        a = min(max(CELL * 3, base - base % CELL), largest)
        return a, min(a + CELL, largest)


@dataclass
class Sample:
    image: np.ndarray          # (1, H, W) float32 in [0, 1]
    mask: np.ndarray           # (1, H, W) uint8 in {0, 1}
    prompt: str
    meta: dict
    case_id: str = ""
    slice_id: int = 0


@dataclass
class Case:
    case_id: str
    slices: list[Sample]
    stratum: str
    ambiguous: bool = False


@dataclass
class SplitSpec:
    ratios: tuple[float, float, float] = (0.7, 0.1, 0.2)
    seed: int = 0

    def __post_init__(self):
        if len(self.ratios) != 3 or abs(sum(self.ratios) - 1.0) > 1e-9 or min(self.ratios) < 0:
            raise ConfigError(f"split ratios must be three non-negative values summing to 1, got {self.ratios}")


# ------------------------------------------------------------- rendering

def shape_mask(kind: str, size: int) -> np.ndarray:
    """Boolean ``size x size`` footprint built from lattice cells."""
    n = size // CELL
    cells = np.ones((n, n), dtype=bool)
    if kind == "disc":
        cells[0, 0] = cells[0, -1] = cells[-1, 0] = cells[-1, -1] = False
    elif kind == "ring":
        inner = 1 if n <= 3 else n // 4 + (n % 4 > 0)
        cells[inner:n - inner, inner:n - inner] = False
    elif kind != "rect":
        raise DataError(f"unknown region kind {kind!r}")
    return np.kron(cells, np.ones((CELL, CELL), dtype=bool))


def quadrant_of(top: int, left: int, size: int, image_size: int) -> str:
    cy, cx = top + size / 2.0, left + size / 2.0
    half = image_size / 2.0
    return QUADRANTS[(2 if cy > half else 0) + (1 if cx > half else 0)]


def region_pixels(region: dict, image_size: int) -> np.ndarray:
    m = np.zeros((image_size, image_size), dtype=bool)
    t, l, s = region["top"], region["left"], region["size"]
    m[t:t + s, l:l + s] = shape_mask(region["kind"], s)
    return m


def _margin_ok(top: int, left: int, size: int, image_size: int) -> bool:
    half = image_size // 2
    margin = math.ceil(MARGIN_FRAC * half)
    for start in (top, left):
        if start < 0 or start + size > image_size:
            return False
        gap = half - (start + size) if start < half else start - half
        if gap < margin:
            return False
    return True


def _rotation_safe(top: int, left: int, size: int, image_size: int) -> bool:
    """True when no nearest-neighbour mask pixel can cross a midline under
    any rotation of at most MAX_ROT_DEG about the image centre.

    The footprint is the box of pixel squares; the signed distance of a box
    corner to a midline is sinusoidal in the angle, so checking the corners
    at both extreme angles covers the whole range.  A pixel only changes
    quadrant once its centre passes the midline by half a pixel.
    """
    c = (image_size - 1) / 2.0
    ys = (top - 0.5 - c, top + size - 0.5 - c)
    xs = (left - 0.5 - c, left + size - 0.5 - c)
    sy = 1.0 if ys[0] > 0 else -1.0
    sx = 1.0 if xs[0] > 0 else -1.0
    for deg in (-MAX_ROT_DEG, MAX_ROT_DEG):
        th = math.radians(deg)
        cos, sin = math.cos(th), math.sin(th)
        for y in ys:
            for x in xs:
                if sy * (cos * y - sin * x) <= -0.5 or sx * (sin * y + cos * x) <= -0.5:
                    return False
    return True


def _placement_ok(top: int, left: int, size: int, image_size: int, strict: bool = True) -> bool:
    """Margin of >= 15% of the quadrant side from both midlines and, when
    ``strict``, rotation safety."""
    if not _margin_ok(top, left, size, image_size):
        return False
    return not strict or _rotation_safe(top, left, size, image_size)


def _candidates(quadrant: str, size: int, image_size: int) -> list[tuple[int, int]]:
    half = image_size // 2
    qi = QUADRANTS.index(quadrant)
    r0 = half if qi >= 2 else 0
    c0 = half if qi % 2 else 0
    steps = range(0, half - size + 1, CELL)
    return [(r0 + a, c0 + b) for a in steps for b in steps]


@lru_cache(maxsize=None)
def rotation_safe_size(image_size: int) -> bool:
    """Whether every region size of this image size has a rotation-safe
    placement.  Below 32 pixels the guarantee is dropped and only the
    midline margin is enforced."""
    sizes = SynthConfig(image_size=image_size).region_sizes()
    return all(any(_placement_ok(t, l, s, image_size) for t, l in _candidates(QUADRANTS[0], s, image_size))
               for s in sizes)


def render_mask(meta: dict, image_size: int) -> np.ndarray:
    """Union of the targeted regions, re-derived from the descriptors."""
    m = np.zeros((image_size, image_size), dtype=bool)
    for reg in meta["regions"]:
        if reg["target"]:
            m |= region_pixels(reg, image_size)
    return m.astype(np.uint8)[None]


def render_prompt(meta: dict) -> str:
    quads = [q for q in QUADRANTS if any(r["target"] and r["quadrant"] == q for r in meta["regions"])]
    n = len(quads)
    noun = "region" if n == 1 else "regions"
    return f"{COUNT_WORDS[n]} target {noun}, " + " and ".join(quads)


# ------------------------------------------------------------ generation

def _place(rng, quadrant: str, size: int, image_size: int) -> tuple[int, int]:
    cands = _candidates(quadrant, size, image_size)
    strict = rotation_safe_size(image_size)
    for _ in range(MAX_ATTEMPTS):
        top, left = cands[int(rng.integers(len(cands)))]
        if _placement_ok(top, left, size, image_size, strict):
            return top, left
    raise DataError(f"could not place a {size}px region in the {quadrant} quadrant "
                    f"after {MAX_ATTEMPTS} attempts")


def _background(rng, size: int) -> np.ndarray:
    smooth = ndimage.gaussian_filter(rng.standard_normal((size, size)), sigma=2.0, mode="wrap")
    smooth = (smooth - smooth.min()) / (np.ptp(smooth) + 1e-12)
    return 0.05 + 0.3 * smooth


def _scene_layout(rng, cfg: SynthConfig, n_regions: int, ambiguous: bool) -> dict:
    sizes = cfg.region_sizes()
    quads = [QUADRANTS[i] for i in rng.permutation(4)[:n_regions]]
    looks: list[tuple[str, int, float]] = []
    if ambiguous:
        twin = (KINDS[rng.integers(3)], sizes[rng.integers(2)], round(float(rng.uniform(0.55, 0.95)), 3))
        looks = [twin, twin]
    combos = [(k, s) for k in KINDS for s in sizes]
    while len(looks) < n_regions:
        k, s = combos[rng.integers(len(combos))]
        if all((k, s) != (lk, ls) for lk, ls, _ in looks):
            looks.append((k, s, round(float(rng.uniform(0.55, 0.95)), 3)))
    regions = []
    for q, (kind, size, inten) in zip(quads, looks):
        top, left = _place(rng, q, size, cfg.image_size)
        regions.append({"kind": kind, "size": size, "intensity": inten,
                        "quadrant": q, "top": top, "left": left, "target": False})
    if ambiguous:
        regions[int(rng.integers(2))]["target"] = True
    else:
        k = int(rng.integers(1, min(2, n_regions) + 1))
        for j in rng.permutation(n_regions)[:k]:
            regions[j]["target"] = True
    return {"regions": regions, "ambiguous": ambiguous, "count": n_regions, "theta": 0.0}


def _render_image(rng, meta: dict, image_size: int) -> np.ndarray:
    img = _background(rng, image_size)
    for reg in meta["regions"]:
        img[region_pixels(reg, image_size)] = reg["intensity"]
    img = img + 0.02 * rng.standard_normal(img.shape)
    img = np.clip(img, 0.0, 1.0)
    # quantize so the on-disk 8-bit graymap round-trips exactly
    return (np.round(img * 255.0) / 255.0).astype(np.float32)[None]


def generate_case(cfg: SynthConfig, index: int) -> Case:
    rng = np.random.default_rng([cfg.seed, index])
    n_regions = index % 3 + 1
    p_amb = cfg.ambiguous_fraction * 1.5
    ambiguous = n_regions >= 2 and bool(rng.random() < p_amb)
    meta = _scene_layout(rng, cfg, n_regions, ambiguous)
    prompt = render_prompt(meta)
    mask = render_mask(meta, cfg.image_size)
    case_id = f"case{index:04d}"
    slices = []
    for k in range(cfg.slices_per_case):
        image = _render_image(rng, meta, cfg.image_size)
        slices.append(Sample(image=image, mask=mask.copy(), prompt=prompt,
                             meta=json.loads(json.dumps(meta)), case_id=case_id, slice_id=k))
    return Case(case_id=case_id, slices=slices, stratum=str(n_regions), ambiguous=ambiguous)


def generate_dataset(cfg: SynthConfig) -> list[Case]:
    """Deterministic given ``cfg``; each case uses its own derived seed."""
    return [generate_case(cfg, i) for i in range(cfg.n_cases)]


# ----------------------------------------------------------------- splits

def _apportion(n: int, ratios) -> list[int]:
    # largest-remainder rounding: every share is within one case of n*ratio
    exact = [n * r for r in ratios]
    counts = [math.floor(x) for x in exact]
    order = sorted(range(len(ratios)), key=lambda j: (-(exact[j] - counts[j]), j))
    for j in order[: n - sum(counts)]:
        counts[j] += 1
    return counts


def split_cases(cases: list[Case], spec: SplitSpec | None = None) -> dict[str, list[str]]:
    """Stratified case-level split; returns case ids per split."""
    spec = spec or SplitSpec()
    by_stratum: dict[str, list[str]] = {}
    for c in cases:
        by_stratum.setdefault(c.stratum, []).append(c.case_id)
    ids = [c.case_id for c in cases]
    if len(set(ids)) != len(ids):
        raise DataError("duplicate case ids")
    out = {s: [] for s in SPLITS}
    for k, stratum in enumerate(sorted(by_stratum)):
        members = sorted(by_stratum[stratum])
        if len(members) < 10:
            raise DataError(f"stratum {stratum!r} has {len(members)} cases; at least 10 required")
        rng = np.random.default_rng([spec.seed, k])
        order = [members[j] for j in rng.permutation(len(members))]
        n_tr, n_va, _ = _apportion(len(members), spec.ratios)
        out["train"] += order[:n_tr]
        out["val"] += order[n_tr:n_tr + n_va]
        out["test"] += order[n_tr + n_va:]
    return {s: sorted(v) for s, v in out.items()}


# ------------------------------------------------------------ augmentation

@dataclass
class AugParams:
    theta: float = 0.0
    k: int = 0
    hflip: bool = False
    vflip: bool = False

    @classmethod
    def draw(cls, rng) -> "AugParams":
        return cls(theta=float(rng.uniform(-MAX_ROT_DEG, MAX_ROT_DEG)), k=int(rng.integers(4)),
                   hflip=bool(rng.random() < 0.5), vflip=bool(rng.random() < 0.5))


def _move_regions(meta: dict, image_size: int, fn_box, fn_quad) -> dict:
    meta = json.loads(json.dumps(meta))
    for reg in meta["regions"]:
        reg["top"], reg["left"] = fn_box(reg["top"], reg["left"], reg["size"], image_size)
        reg["quadrant"] = fn_quad[reg["quadrant"]]
    return meta


def augment(s: Sample, rng=None, params: AugParams | None = None, training: bool = True) -> Sample:
    """Random rotation, k*90 rotation and flips; quadrant words follow the
    lattice transforms so prompt and mask stay consistent."""
    if not training:
        raise DataError("augmentation is only applied to the training split")
    if params is None:
        if rng is None:
            raise ValueError("augment needs an rng or explicit params")
        params = AugParams.draw(rng)
    image, mask, meta = s.image, s.mask, s.meta
    H = image.shape[-1]
    if params.theta != 0.0:
        image = ndimage.rotate(image, params.theta, axes=(-1, -2), reshape=False, order=1,
                               mode="nearest").astype(image.dtype)
        image = np.clip(image, 0.0, 1.0)
        mask = ndimage.rotate(mask, params.theta, axes=(-1, -2), reshape=False, order=0,
                              mode="constant", cval=0).astype(mask.dtype)
        meta = dict(meta, theta=meta.get("theta", 0.0) + params.theta)
    for _ in range(params.k % 4):
        image = np.rot90(image, 1, axes=(-2, -1))
        mask = np.rot90(mask, 1, axes=(-2, -1))
        meta = _move_regions(meta, H, lambda t, l, z, n: (n - l - z, t), _ROT90)
    if params.hflip:
        image, mask = image[..., ::-1], mask[..., ::-1]
        meta = _move_regions(meta, H, lambda t, l, z, n: (t, n - l - z), _HFLIP)
    if params.vflip:
        image, mask = image[..., ::-1, :], mask[..., ::-1, :]
        meta = _move_regions(meta, H, lambda t, l, z, n: (n - t - z, l), _VFLIP)
    if meta is s.meta:
        return s
    return replace(s, image=np.ascontiguousarray(image), mask=np.ascontiguousarray(mask),
                   prompt=render_prompt(meta), meta=meta)


# --------------------------------------------------------------------- I/O

def write_pgm(path, arr: np.ndarray) -> None:
    a = np.asarray(arr)
    if a.ndim == 3:
        a = a[0]
    if a.dtype != np.uint8:
        raise DataError(f"graymap data must be uint8, got {a.dtype}")
    h, w = a.shape
    with open(path, "wb") as fh:
        fh.write(f"P5\n{w} {h}\n255\n".encode("ascii"))
        fh.write(a.tobytes())


def read_pgm(path) -> np.ndarray:
    raw = Path(path).read_bytes()
    tokens: list[bytes] = []
    pos = 0
    while len(tokens) < 4:
        while raw[pos:pos + 1].isspace():
            pos += 1
        if raw[pos:pos + 1] == b"#":
            pos = raw.index(b"\n", pos) + 1
            continue
        end = pos
        while end < len(raw) and not raw[end:end + 1].isspace():
            end += 1
        tokens.append(raw[pos:end])
        pos = end
    magic, w, h, maxval = tokens[0], int(tokens[1]), int(tokens[2]), int(tokens[3])
    if maxval != 255:
        raise DataError(f"{path}: only maxval 255 is supported, got {maxval}")
    if magic == b"P5":
        data = np.frombuffer(raw[pos + 1:pos + 1 + w * h], dtype=np.uint8)
    elif magic == b"P2":
        data = np.array(raw[pos:].split(), dtype=np.int64).astype(np.uint8)
    else:
        raise DataError(f"{path}: unsupported graymap type {magic!r}")
    if data.size != w * h:
        raise DataError(f"{path}: expected {w * h} pixels, found {data.size}")
    return data.reshape(h, w).copy()


MANIFEST_COLUMNS = ("case_id", "slice_id", "image_path", "mask_path", "prompt", "stratum")


def write_dataset(cases: list[Case], root) -> Path:
    """images/ and masks/ graymaps plus manifest.tsv.

    Besides the required columns the manifest carries ``ambiguous`` and a
    JSON ``meta`` column so region descriptors survive the round trip.
    """
    root = Path(root)
    (root / "images").mkdir(parents=True, exist_ok=True)
    (root / "masks").mkdir(parents=True, exist_ok=True)
    with open(root / "manifest.tsv", "w", encoding="utf-8", newline="") as fh:
        w = csv.writer(fh, delimiter="\t", lineterminator="\n")
        w.writerow(MANIFEST_COLUMNS + ("ambiguous", "meta"))
        for c in cases:
            for s in c.slices:
                name = f"{c.case_id}_{s.slice_id:02d}.pgm"
                write_pgm(root / "images" / name, np.round(s.image * 255.0).astype(np.uint8))
                write_pgm(root / "masks" / name, (s.mask * 255).astype(np.uint8))
                w.writerow((c.case_id, s.slice_id, f"images/{name}", f"masks/{name}", s.prompt,
                            c.stratum, int(c.ambiguous), json.dumps(s.meta, separators=(",", ":"))))
    return root


def read_dataset(root) -> list[Case]:
    root = Path(root)
    manifest = root / "manifest.tsv"
    if not manifest.exists():
        raise FileNotFoundError(f"no manifest.tsv in {root}")
    cases: dict[str, Case] = {}
    with open(manifest, encoding="utf-8", newline="") as fh:
        for row in csv.DictReader(fh, delimiter="\t"):
            missing = [c for c in MANIFEST_COLUMNS if c not in row]
            if missing:
                raise DataError(f"{manifest}: missing columns {missing}")
            image = (read_pgm(root / row["image_path"]).astype(np.float32) / 255.0)[None]
            mask = (read_pgm(root / row["mask_path"]) > 127).astype(np.uint8)[None]
            meta = json.loads(row["meta"]) if row.get("meta") else {}
            s = Sample(image=image, mask=mask, prompt=row["prompt"], meta=meta,
                       case_id=row["case_id"], slice_id=int(row["slice_id"]))
            c = cases.get(row["case_id"])
            if c is None:
                c = cases[row["case_id"]] = Case(row["case_id"], [], row["stratum"],
                                                 bool(int(row.get("ambiguous") or 0)))
            elif c.stratum != row["stratum"]:
                raise DataError(f"case {c.case_id} has inconsistent strata")
            c.slices.append(s)
    return [cases[k] for k in sorted(cases)]


def write_splits(splits: dict[str, list[str]], path) -> None:
    with open(path, "w", encoding="utf-8", newline="") as fh:
        w = csv.writer(fh, delimiter="\t", lineterminator="\n")
        w.writerow(("case_id", "split"))
        for name in SPLITS:
            for cid in splits.get(name, []):
                w.writerow((cid, name))


def read_splits(path) -> dict[str, list[str]]:
    out: dict[str, list[str]] = {s: [] for s in SPLITS}
    with open(path, encoding="utf-8", newline="") as fh:
        for row in csv.DictReader(fh, delimiter="\t"):
            if row["split"] not in out:
                raise DataError(f"{path}: unknown split {row['split']!r}")
            out[row["split"]].append(row["case_id"])
    seen: dict[str, str] = {}
    for name, ids in out.items():
        for cid in ids:
            if cid in seen:
                raise DataError(f"case {cid} appears in both {seen[cid]} and {name}")
            seen[cid] = name
    return out


def select(cases: list[Case], ids) -> list[Case]:
    index = {c.case_id: c for c in cases}
    unknown = [i for i in ids if i not in index]
    if unknown:
        raise DataError(f"unknown case ids: {unknown[:5]}")
    return [index[i] for i in ids]
