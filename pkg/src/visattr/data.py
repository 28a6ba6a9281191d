"""Dataset manifests and the synthetic planted-palette generator.

Manifest grammar (UTF-8, whitespace separated, ``#`` comments):

    ITEM <id> <path> [category]
    OUTFIT <id> <item_id>+
    COMPAT <+|-> <item_id>+
    FITB <answer_idx> | <partial ids> | <4 candidate ids>
    RETR <query_id> <truth_id>+

The synthetic generator plants compatibility in color: every outfit draws
one palette and renders its items with random shapes and patterns in that
palette on a white background, so shared palette (color) is the ground
truth while shape carries no compatibility signal.
"""

from __future__ import annotations

import colorsys
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import ManifestError
from .imageops import compute_histogram, load_image, save_ppm
from .metrics import EmbeddingSet


@dataclass
class Item:
    path: str
    category: str | None = None


@dataclass
class CompatQuestion:
    label: bool  # True = compatible
    items: list[str]

    def __post_init__(self):
        if len(self.items) < 2:
            raise ManifestError("compatibility question needs at least 2 items")
        if len(set(self.items)) != len(self.items):
            raise ManifestError("compatibility question has duplicate items")


@dataclass
class FITBQuestion:
    answer_index: int
    partial: list[str]
    candidates: list[str]

    def __post_init__(self):
        if len(self.candidates) != 4 or len(set(self.candidates)) != 4:
            raise ManifestError("FITB question needs exactly 4 distinct candidates")
        if not 0 <= self.answer_index < 4:
            raise ManifestError(f"FITB answer index {self.answer_index} out of range")
        if not self.partial:
            raise ManifestError("FITB question needs a non-empty partial outfit")


@dataclass
class DatasetManifest:
    root: Path
    items: dict[str, Item] = field(default_factory=dict)
    outfits: dict[str, list[str]] = field(default_factory=dict)
    compat_questions: list[CompatQuestion] = field(default_factory=list)
    fitb_questions: list[FITBQuestion] = field(default_factory=list)
    retrieval: dict[str, list[str]] = field(default_factory=dict)

    def image_path(self, item_id: str) -> Path:
        item = self.items.get(item_id)
        if item is None:
            raise ManifestError(f"unknown item id {item_id!r}")
        return self.root / item.path

    def training_items(self) -> list[str]:
        """Items referenced by outfits, in first-appearance order."""
        seen: dict[str, None] = {}
        for members in self.outfits.values():
            for item_id in members:
                seen.setdefault(item_id)
        return list(seen)


def load_manifest(path: str | Path, validate_paths: bool = True) -> DatasetManifest:
    """Parse and fully validate a manifest; dangling references are errors."""
    path = Path(path)
    manifest = DatasetManifest(root=path.parent)
    referenced: list[tuple[str, int]] = []

    for lineno, raw in enumerate(path.read_text(encoding="utf-8").splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        tokens = line.split()
        kind = tokens[0]
        try:
            if kind == "ITEM":
                if len(tokens) not in (3, 4):
                    raise ManifestError("ITEM takes <id> <path> [category]")
                item_id = tokens[1]
                if item_id in manifest.items:
                    raise ManifestError(f"duplicate item id {item_id!r}")
                manifest.items[item_id] = Item(tokens[2], tokens[3] if len(tokens) == 4 else None)
            elif kind == "OUTFIT":
                if len(tokens) < 3:
                    raise ManifestError("OUTFIT takes <id> <item_id>+")
                if tokens[1] in manifest.outfits:
                    raise ManifestError(f"duplicate outfit id {tokens[1]!r}")
                manifest.outfits[tokens[1]] = tokens[2:]
                referenced += [(t, lineno) for t in tokens[2:]]
            elif kind == "COMPAT":
                if len(tokens) < 4 or tokens[1] not in ("+", "-"):
                    raise ManifestError("COMPAT takes <+|-> <item_id>+ (>= 2 items)")
                manifest.compat_questions.append(CompatQuestion(tokens[1] == "+", tokens[2:]))
                referenced += [(t, lineno) for t in tokens[2:]]
            elif kind == "FITB":
                fields = [f.split() for f in line[4:].split("|")]
                if len(fields) != 3 or len(fields[0]) != 1:
                    raise ManifestError("FITB takes <answer_idx> | <partial>+ | <4 candidates>")
                question = FITBQuestion(int(fields[0][0]), fields[1], fields[2])
                manifest.fitb_questions.append(question)
                referenced += [(t, lineno) for t in fields[1] + fields[2]]
            elif kind == "RETR":
                if len(tokens) < 3:
                    raise ManifestError("RETR takes <query_id> <truth_id>+")
                manifest.retrieval[tokens[1]] = tokens[2:]
                referenced += [(t, lineno) for t in tokens[1:]]
            else:
                raise ManifestError(f"unknown record type {kind!r}")
        except ManifestError as exc:
            raise ManifestError(f"{path}:{lineno}: {exc}") from None
        except ValueError as exc:
            raise ManifestError(f"{path}:{lineno}: {exc}") from None

    for item_id, lineno in referenced:
        if item_id not in manifest.items:
            raise ManifestError(f"{path}:{lineno}: dangling reference to item {item_id!r}")
    if validate_paths:
        for item_id in manifest.items:
            target = manifest.image_path(item_id)
            if not target.exists():
                raise FileNotFoundError(f"image for item {item_id!r} missing: {target}")
    return manifest


def write_manifest(manifest: DatasetManifest, path: str | Path) -> None:
    lines = []
    for item_id, item in manifest.items.items():
        suffix = f" {item.category}" if item.category else ""
        lines.append(f"ITEM {item_id} {item.path}{suffix}")
    for outfit_id, members in manifest.outfits.items():
        lines.append(f"OUTFIT {outfit_id} " + " ".join(members))
    for q in manifest.compat_questions:
        lines.append(f"COMPAT {'+' if q.label else '-'} " + " ".join(q.items))
    for q in manifest.fitb_questions:
        lines.append(f"FITB {q.answer_index} | " + " ".join(q.partial)
                     + " | " + " ".join(q.candidates))
    for query_id, truth in manifest.retrieval.items():
        lines.append(f"RETR {query_id} " + " ".join(truth))
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


# -- synthetic planted-palette dataset ---------------------------------------------


@dataclass
class SyntheticSpec:
    num_palettes: int = 6
    items_per_outfit: int = 4
    outfits: int = 200
    image_side: int = 64
    patterns: tuple[str, ...] = ("solid", "stripes", "checker")
    shapes: tuple[str, ...] = ("square", "circle", "triangle")
    noise_sigma: float = 0.02
    fitb_per_outfit: int = 5
    retrieval_views: bool = True
    disjoint: bool = False

    def __post_init__(self):
        if self.num_palettes < 2:
            raise ValueError("need at least 2 palettes")
        if self.outfits < 4:
            raise ValueError("need at least 4 outfits")


_COLOR_GRID = 10  # colors sit at intensity-bin centers of the default histogram


def _snap(rgb) -> np.ndarray:
    channels = np.clip(np.asarray(rgb), 0.0, 0.999)
    return (np.floor(channels * _COLOR_GRID) + 0.5) / _COLOR_GRID


def _palette_colors(palette: int, num_palettes: int, rng: np.random.Generator) -> np.ndarray:
    """2-3 colors per palette, snapped to bin centers so every item of the
    palette concentrates histogram mass on the same bins.

    Palettes form a hue x shade grid: adjacent palettes share a hue at a
    different brightness. Shade distinctions survive raw pixels but are
    erased by brightness/grayscale distortion, which is what makes the
    color-distortion contrast observable on this corpus.
    """
    hue_count = (num_palettes + 1) // 2
    hue = (palette // 2) / hue_count
    value = 0.78 if palette % 2 == 0 else 0.45
    primary = _snap(colorsys.hsv_to_rgb(hue, 0.9, value))
    secondary = _snap(colorsys.hsv_to_rgb(hue, 0.45, value))
    colors = [primary, secondary]
    if rng.random() < 0.5:
        colors.append(_snap(colorsys.hsv_to_rgb((hue + 0.5 / hue_count) % 1.0, 0.9, value)))
    return np.stack(colors)


def _shape_mask(shape: str, side: int, rng: np.random.Generator) -> np.ndarray:
    """Boolean foreground mask with jittered position and scale."""
    extent = rng.uniform(0.5, 0.8) * side
    cy = side / 2 + rng.uniform(-0.08, 0.08) * side
    cx = side / 2 + rng.uniform(-0.08, 0.08) * side
    yy, xx = np.mgrid[0:side, 0:side]
    if shape == "square":
        return (np.abs(yy - cy) <= extent / 2) & (np.abs(xx - cx) <= extent / 2)
    if shape == "circle":
        return (yy - cy) ** 2 + (xx - cx) ** 2 <= (extent / 2) ** 2
    if shape == "triangle":
        top, bottom = cy - extent / 2, cy + extent / 2
        frac = np.clip((yy - top) / max(bottom - top, 1e-9), 0.0, 1.0)
        return (yy >= top) & (yy <= bottom) & (np.abs(xx - cx) <= frac * extent / 2)
    raise ValueError(f"unknown shape {shape!r}")


def _render_item(side: int, shape: str, pattern: str, colors: np.ndarray,
                 noise_sigma: float, rng: np.random.Generator) -> np.ndarray:
    """One item image: pattern in palette colors inside the shape, white outside.

    Patterns always anchor on the palette's first color; per-item shade
    jitter stays inside one histogram bin so the palette signal survives.
    """
    canvas = np.ones((side, side, 3))
    mask = _shape_mask(shape, side, rng)
    jitter = 0.028
    primary = np.clip(colors[0] + rng.uniform(-jitter, jitter, 3), 0.0, 1.0)
    secondary = np.clip(colors[rng.integers(1, len(colors))]
                        + rng.uniform(-jitter, jitter, 3), 0.0, 1.0)
    fill = np.empty((side, side, 3))
    if pattern == "solid":
        fill[:] = primary
    elif pattern == "stripes":
        # primary-dominant duty cycle keeps palette mass on the primary bins
        band = max(2, side // 8)
        phase = int(rng.integers(0, 3 * band))
        axis = np.mgrid[0:side, 0:side][int(rng.integers(0, 2))]
        stripes = ((axis + phase) // band) % 3
        fill[:] = np.where(stripes[:, :, None] == 0, secondary, primary)
    elif pattern == "checker":
        block = max(2, side // 8)
        yy, xx = np.mgrid[0:side, 0:side]
        checks = (((yy // block) % 2) == 0) & (((xx // block) % 2) == 0)
        fill[:] = np.where(checks[:, :, None], secondary, primary)
    else:
        raise ValueError(f"unknown pattern {pattern!r}")
    canvas[mask] = fill[mask]
    if noise_sigma > 0:
        noise = rng.normal(0.0, noise_sigma, size=(side, side, 3))
        canvas[mask] = np.clip(canvas[mask] + noise[mask], 0.0, 1.0)
    return canvas


def generate_synthetic(spec: SyntheticSpec, seed: int, out_dir: str | Path) -> DatasetManifest:
    """Render the planted-palette corpus and write images plus manifest.

    Compatibility ground truth is the shared palette. Negative outfits and
    FITB distractors reuse the same shapes as the true items but draw from
    other palettes, so shape carries no answer signal. Retrieval queries
    are second renderings (new position/scale/phase) of existing items.
    """
    out_dir = Path(out_dir)
    (out_dir / "images").mkdir(parents=True, exist_ok=True)
    rng = np.random.default_rng(seed)

    palettes = [_palette_colors(p, spec.num_palettes, rng) for p in range(spec.num_palettes)]
    manifest = DatasetManifest(root=out_dir)

    # outfit -> palette assignment is balanced so every palette has items
    item_meta: dict[str, tuple[int, str, str, np.ndarray]] = {}  # palette, shape, pattern, colors
    outfit_palette: list[int] = []
    outfit_members: list[list[str]] = []
    counter = 0
    for o in range(spec.outfits):
        palette = o % spec.num_palettes
        members = []
        for _ in range(spec.items_per_outfit):
            item_id = f"i{counter:05d}"
            counter += 1
            shape = spec.shapes[rng.integers(0, len(spec.shapes))]
            pattern = spec.patterns[rng.integers(0, len(spec.patterns))]
            image = _render_item(spec.image_side, shape, pattern, palettes[palette],
                                 spec.noise_sigma, rng)
            rel = f"images/{item_id}.ppm"
            save_ppm(out_dir / rel, image)
            manifest.items[item_id] = Item(rel, category=shape)
            item_meta[item_id] = (palette, shape, pattern, palettes[palette])
            members.append(item_id)
        outfit_palette.append(palette)
        outfit_members.append(members)

    test_outfits = set()
    if spec.disjoint:
        n_test = max(1, spec.outfits // 4)
        test_outfits = set(int(i) for i in rng.choice(spec.outfits, size=n_test, replace=False))

    question_range = sorted(test_outfits) if spec.disjoint else range(spec.outfits)
    for o in range(spec.outfits):
        if o not in test_outfits:
            manifest.outfits[f"o{o:05d}"] = outfit_members[o]

    # distractor pools: with a disjoint split, questions may only reference
    # question-side items, otherwise the whole corpus is fair game
    question_items = {i for o in question_range for i in outfit_members[o]}
    by_shape_palette: dict[tuple[str, int], list[str]] = {}
    for item_id, (palette, shape, _, _) in item_meta.items():
        if item_id in question_items:
            by_shape_palette.setdefault((shape, palette), []).append(item_id)

    def sibling_of(palette: int) -> int | None:
        sibling = palette ^ 1  # same hue, other shade in the palette grid
        return sibling if sibling < spec.num_palettes else None

    def _sample(pool: list[str], want: int) -> list[str]:
        picks = rng.choice(len(pool), size=min(want, len(pool)), replace=False)
        return [pool[i] for i in picks]

    def foreign_same_shape(shape: str, banned_palette: int, exclude: set[str],
                           want: int, prefer_sibling: int = 0) -> list[str]:
        """Same-shape items from other palettes; up to ``prefer_sibling`` of
        them from the same-hue sibling palette so shade stays informative."""
        picks: list[str] = []
        sibling = sibling_of(banned_palette)
        if prefer_sibling and sibling is not None:
            pool = [i for i in by_shape_palette.get((shape, sibling), ())
                    if i not in exclude]
            picks.extend(_sample(pool, prefer_sibling))
        pool = [i for (s, p), ids in by_shape_palette.items() if s == shape and p != banned_palette
                for i in ids if i not in exclude and i not in picks]
        if len(pool) < want - len(picks):
            raise ManifestError("synthetic spec too small to draw shape-matched distractors")
        picks.extend(_sample(pool, want - len(picks)))
        return picks

    for o in question_range:
        members = outfit_members[o]
        palette = outfit_palette[o]
        manifest.compat_questions.append(CompatQuestion(True, list(members)))
        # negative: keep some own-palette items, swap the rest for same-shape
        # items from other palettes -> the set mixes >= 2 palettes
        negative = list(members)
        n_swap = int(rng.integers(1, len(members)))
        swap_at = rng.choice(len(members), size=n_swap, replace=False)
        for pos in swap_at:
            shape = item_meta[members[pos]][1]
            negative[pos] = foreign_same_shape(shape, palette, set(negative), 1,
                                               prefer_sibling=int(rng.random() < 0.5))[0]
        manifest.compat_questions.append(CompatQuestion(False, negative))

        for q in range(spec.fitb_per_outfit):
            hold = q % len(members)
            answer = members[hold]
            partial = [m for m in members if m != answer]
            shape = item_meta[answer][1]
            distractors = foreign_same_shape(shape, palette, set(members), 3,
                                             prefer_sibling=2)
            candidates = distractors + [answer]
            perm = rng.permutation(4)
            candidates = [candidates[i] for i in perm]
            manifest.fitb_questions.append(
                FITBQuestion(candidates.index(answer), partial, candidates))

    if spec.retrieval_views:
        base_ids = ([i for o in question_range for i in outfit_members[o]]
                    if spec.disjoint else list(item_meta))
        for item_id in base_ids:
            palette, shape, pattern, colors = item_meta[item_id]
            view = _render_item(spec.image_side, shape, pattern, colors,
                                spec.noise_sigma, rng)
            query_id = f"{item_id}q"
            rel = f"images/{query_id}.ppm"
            save_ppm(out_dir / rel, view)
            manifest.items[query_id] = Item(rel, category=shape)
            manifest.retrieval[query_id] = [item_id]

    write_manifest(manifest, out_dir / "manifest.txt")
    return manifest


# -- oracle features ------------------------------------------------------------------


def histogram_features(manifest: DatasetManifest, n_bins: int = 10,
                       exclude_background: bool = True) -> EmbeddingSet:
    """Concatenated per-channel histograms as embeddings (color-only oracle)."""
    vectors = {}
    labels = {}
    for item_id, item in manifest.items.items():
        image = load_image(manifest.image_path(item_id))
        hist = compute_histogram(image, n_bins, exclude_background)
        vectors[item_id] = hist.values.reshape(-1).copy()
        if item.category:
            labels[item_id] = item.category
    return EmbeddingSet(vectors, labels)


def load_training_images(manifest: DatasetManifest, side: int) -> tuple[list[str], np.ndarray]:
    """Outfit items in stable order, decoded and resized to [N, side, side, 3]."""
    ids = manifest.training_items()
    if not ids:
        raise ManifestError("manifest has no outfit items to train on")
    images = np.empty((len(ids), side, side, 3))
    for row, item_id in enumerate(ids):
        images[row] = load_image(manifest.image_path(item_id), side=side)
    return ids, images
