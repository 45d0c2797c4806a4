"""Synthetic word images rendered from a bitmap font.

Everything here is a pure function of its arguments and seeds, so a
dataset can be regenerated bit-for-bit from its manifest header.
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
import os
import shutil
import tempfile
from dataclasses import dataclass, field
from functools import lru_cache
from importlib import resources
from pathlib import Path

import numpy as np
from PIL import Image
from scipy import ndimage

from .charset import CHARSET, check_word

# ----------------------------------------------------------------------------
# fonts


@dataclass
class GlyphFont:
    bitmaps: dict[str, np.ndarray]
    cell_height: int
    cell_width: int
    name: str = "builtin-5x7"

    def __post_init__(self):
        missing = [c for c in CHARSET if c not in self.bitmaps]
        if missing:
            raise ValueError(f"font {self.name!r} lacks glyphs for {''.join(missing)!r}")
        seen = {}
        for ch, bm in self.bitmaps.items():
            if bm.shape != (self.cell_height, self.cell_width):
                raise ValueError(f"glyph {ch!r} has shape {bm.shape}")
            key = bm.tobytes()
            if key in seen:
                raise ValueError(f"glyphs {seen[key]!r} and {ch!r} are identical")
            seen[key] = ch


def parse_font(text: str, name: str = "custom") -> GlyphFont:
    """Parse the plain bitmap format: a ``cell W H`` line, then ``[c]`` blocks of '#'/'.' rows."""
    cell_w = cell_h = None
    bitmaps: dict[str, np.ndarray] = {}
    current, rows = None, []

    def flush():
        if current is not None:
            bitmaps[current] = np.array([[c == "#" for c in r] for r in rows], dtype=bool)

    for raw in text.splitlines():
        line = raw.strip()
        if not line or line.startswith("#") and not set(line) <= {"#", "."}:
            continue
        if line.startswith("cell"):
            _, w, h = line.split()
            cell_w, cell_h = int(w), int(h)
        elif line.startswith("[") and line.endswith("]"):
            flush()
            current, rows = line[1:-1], []
        else:
            rows.append(line)
    flush()
    if cell_w is None:
        raise ValueError("font file has no 'cell W H' line")
    return GlyphFont(bitmaps, cell_h, cell_w, name=name)


def load_font(path) -> GlyphFont:
    path = Path(path)
    return parse_font(path.read_text(encoding="utf-8"), name=path.stem)


@lru_cache(maxsize=1)
def default_font() -> GlyphFont:
    text = resources.files("vsdn").joinpath("data", "font5x7.txt").read_text(encoding="utf-8")
    return parse_font(text, name="builtin-5x7")


# ----------------------------------------------------------------------------
# rendering


@dataclass(frozen=True)
class Style:
    """Concrete distortion parameters for one image. The defaults render a clean word."""

    scale_y: int = 3
    scale_x: int = 2
    shift_x: float = 0.5  # position within horizontal slack, 0..1
    shift_y: float = 0.5
    spacing: int = 0  # extra pixels between glyphs
    shear: float = 0.0
    noise_sigma: float = 0.0
    blur_sigma: float = 0.0
    occlusion_prob: float = 0.0
    ink: float = 1.0
    background: float = 0.0


@dataclass(frozen=True)
class StyleRanges:
    """Closed ranges that per-image styles are drawn from."""

    scale_y: tuple[int, int] = (2, 4)
    scale_x: tuple[int, int] = (2, 2)  # scale 1 leaves long words on half the frames
    spacing: tuple[int, int] = (0, 2)
    shear: tuple[float, float] = (-0.15, 0.15)
    noise_sigma: tuple[float, float] = (0.0, 0.12)
    blur_sigma: tuple[float, float] = (0.0, 0.9)
    occlusion_prob: float = 0.15
    ink: tuple[float, float] = (0.7, 1.0)
    background: tuple[float, float] = (0.0, 0.3)

    def sample(self, rng: np.random.Generator) -> Style:
        return Style(
            scale_y=int(rng.integers(self.scale_y[0], self.scale_y[1] + 1)),
            scale_x=int(rng.integers(self.scale_x[0], self.scale_x[1] + 1)),
            shift_x=float(rng.uniform()),
            shift_y=float(rng.uniform()),
            spacing=int(rng.integers(self.spacing[0], self.spacing[1] + 1)),
            shear=float(rng.uniform(*self.shear)),
            noise_sigma=float(rng.uniform(*self.noise_sigma)),
            blur_sigma=float(rng.uniform(*self.blur_sigma)),
            occlusion_prob=self.occlusion_prob,
            ink=float(rng.uniform(*self.ink)),
            background=float(rng.uniform(*self.background)),
        )

    def to_dict(self) -> dict:
        return {k: list(v) if isinstance(v, tuple) else v for k, v in dataclasses.asdict(self).items()}

    @classmethod
    def from_dict(cls, d: dict) -> "StyleRanges":
        return cls(**{k: tuple(v) if isinstance(v, list) else v for k, v in d.items()})


@dataclass
class TextImage:
    pixels: np.ndarray  # H x W float32 in [0, 1]
    label: str
    meta: dict = field(default_factory=dict)


def _layout_width(n: int, font: GlyphFont, sx: int, spacing: int) -> int:
    return n * font.cell_width * sx + (n - 1) * (sx + spacing)


def render_word(
    word: str,
    font: GlyphFont | None = None,
    style: Style | None = None,
    seed: int = 0,
    height: int = 32,
    width: int = 96,
) -> TextImage:
    """Render `word` as light ink on a dark background.

    The horizontal scale drops (down to 1) and extra spacing is discarded
    when the word would not fit; a word that cannot fit at scale 1 raises.
    """
    if not word:
        raise ValueError("cannot render an empty word")
    check_word(word)
    font = font or default_font()
    style = style or Style()
    rng = np.random.default_rng(seed)
    n = len(word)

    sy = max(1, min(style.scale_y, height // font.cell_height))
    sx, spacing = style.scale_x, style.spacing
    while sx > 1 and _layout_width(n, font, sx, spacing) > width:
        sx -= 1
    if _layout_width(n, font, sx, spacing) > width:
        spacing = 0
    text_w = _layout_width(n, font, sx, spacing)
    if text_w > width or font.cell_height * sy > height:
        raise ValueError(f"word {word!r} does not fit a {height}x{width} image")
    text_h = font.cell_height * sy

    x0 = int(round(style.shift_x * (width - text_w)))
    y0 = int(round(style.shift_y * (height - text_h)))
    canvas = np.zeros((height, width), dtype=np.float64)
    x = x0
    for ch in word:
        glyph = np.kron(font.bitmaps[ch].astype(np.float64), np.ones((sy, sx)))
        canvas[y0:y0 + text_h, x:x + glyph.shape[1]] = glyph
        x += glyph.shape[1] + sx + spacing

    if style.shear:
        # x_in = x_out + shear * (y - centre)
        cy = height / 2.0
        matrix = np.array([[1.0, 0.0], [style.shear, 1.0]])
        offset = np.array([0.0, -style.shear * cy])
        canvas = ndimage.affine_transform(canvas, matrix, offset=offset, order=1, mode="constant")
    if style.blur_sigma > 0:
        canvas = ndimage.gaussian_filter(canvas, style.blur_sigma)

    pixels = style.background + (style.ink - style.background) * canvas
    occlusion = None
    if style.occlusion_prob > 0 and rng.uniform() < style.occlusion_prob:
        ow = int(rng.integers(2 * sx, 5 * sx + 1))
        oh = int(rng.integers(text_h // 2, text_h + 1))
        ox = int(rng.integers(x0, max(x0 + 1, x0 + text_w - ow)))
        oy = int(rng.integers(y0, y0 + text_h - oh + 1))
        pixels[oy:oy + oh, ox:ox + ow] = style.background
        occlusion = (oy, ox, oh, ow)
    if style.noise_sigma > 0:
        pixels = pixels + rng.normal(0.0, style.noise_sigma, size=pixels.shape)
    pixels = np.clip(pixels, 0.0, 1.0).astype(np.float32)

    meta = {
        "seed": int(seed),
        "style": dataclasses.asdict(style),
        "bbox": (y0, x0, text_h, text_w),
        "scale": (sy, sx),
        "occlusion": occlusion,
    }
    return TextImage(pixels, word, meta)


def to_uint8(pixels: np.ndarray) -> np.ndarray:
    return np.round(np.clip(pixels, 0.0, 1.0) * 255.0).astype(np.uint8)


def save_image(path, pixels: np.ndarray) -> None:
    """Write an 8-bit grayscale image; the format follows the suffix (.pgm, .png)."""
    arr = pixels if pixels.dtype == np.uint8 else to_uint8(pixels)
    Image.fromarray(arr, mode="L").save(path)


def load_image(path) -> np.ndarray:
    with Image.open(path) as im:
        return np.asarray(im.convert("L"), dtype=np.uint8).copy()


# ----------------------------------------------------------------------------
# vocabularies


@dataclass(frozen=True)
class Vocabulary:
    words: tuple[str, ...]
    source: str = ""

    def __post_init__(self):
        if len(set(self.words)) != len(self.words):
            raise ValueError("vocabulary contains duplicate words")
        for w in self.words:
            check_word(w)

    def __len__(self):
        return len(self.words)

    def __iter__(self):
        return iter(self.words)

    def __contains__(self, word):
        return word in self._lookup

    @property
    def _lookup(self):
        s = self.__dict__.get("_set")
        if s is None:
            s = frozenset(self.words)
            object.__setattr__(self, "_set", s)
        return s


def read_word_list(lines, min_len: int = 1, max_len: int = 64, source: str = "") -> Vocabulary:
    """Lowercase, drop blanks and out-of-charset words, de-duplicate keeping first occurrence."""
    seen, words = set(), []
    for line in lines:
        w = line.strip().lower()
        if not w or not (min_len <= len(w) <= max_len):
            continue
        if any(c not in CHARSET for c in w) or w in seen:
            continue
        seen.add(w)
        words.append(w)
    return Vocabulary(tuple(words), source)


def load_word_list(path, min_len: int = 1, max_len: int = 64) -> Vocabulary:
    with open(path, encoding="utf-8") as fh:
        return read_word_list(fh, min_len, max_len, source=str(path))


def bundled_words(min_len: int = 2, max_len: int = 10) -> Vocabulary:
    text = resources.files("vsdn").joinpath("data", "words.txt").read_text(encoding="utf-8")
    return read_word_list(text.splitlines(), min_len, max_len, source="bundled")


def random_digit_words(n: int, seed: int, min_len: int = 2, max_len: int = 6) -> Vocabulary:
    rng = np.random.default_rng(seed)
    seen, words = set(), []
    while len(words) < n:
        length = int(rng.integers(min_len, max_len + 1))
        w = "".join(str(d) for d in rng.integers(0, 10, size=length))
        if w not in seen:
            seen.add(w)
            words.append(w)
    return Vocabulary(tuple(words), source=f"digits(seed={seed})")


def merge_vocabularies(*vocabs: Vocabulary) -> Vocabulary:
    seen, words = set(), []
    for v in vocabs:
        for w in v:
            if w not in seen:
                seen.add(w)
                words.append(w)
    return Vocabulary(tuple(words), "+".join(v.source for v in vocabs))


def build_vocab_subset(base: Vocabulary, fraction: float, seed: int) -> Vocabulary:
    """Random subset of round(fraction * |base|) words, kept in base order."""
    if len(base) == 0:
        raise ValueError("base vocabulary is empty")
    if not 0 < fraction <= 1:
        raise ValueError(f"fraction must be in (0, 1], got {fraction}")
    k = int(round(fraction * len(base)))
    rng = np.random.default_rng(seed)
    idx = np.sort(rng.choice(len(base), size=k, replace=False))
    return Vocabulary(tuple(base.words[i] for i in idx), f"{base.source}[{fraction}@{seed}]")


# ----------------------------------------------------------------------------
# datasets


@dataclass(frozen=True)
class ManifestEntry:
    id: str
    label: str
    split: str


@dataclass
class DatasetManifest:
    entries: list[ManifestEntry]
    vocab: Vocabulary
    seed: int
    samples_per_word: int
    height: int = 32
    width: int = 96
    style_ranges: StyleRanges = field(default_factory=StyleRanges)
    font: str = "builtin-5x7"
    digest: str = ""

    def __post_init__(self):
        ids = [e.id for e in self.entries]
        if len(set(ids)) != len(ids):
            raise ValueError("manifest image ids are not unique")
        for e in self.entries:
            if e.split == "train" and e.label not in self.vocab:
                raise ValueError(f"training label {e.label!r} is not in the manifest vocabulary")

    def split(self, name: str) -> list[int]:
        return [i for i, e in enumerate(self.entries) if e.split == name]

    def header(self) -> dict:
        return {
            "format": "vsdn-manifest/1",
            "seed": self.seed,
            "samples_per_word": self.samples_per_word,
            "height": self.height,
            "width": self.width,
            "style_ranges": self.style_ranges.to_dict(),
            "font": self.font,
            "n_entries": len(self.entries),
            "vocab_size": len(self.vocab),
            "vocab_source": self.vocab.source,
            "digest": self.digest,
        }


@dataclass
class Dataset:
    manifest: DatasetManifest
    images: np.ndarray  # N x H x W uint8, manifest order

    def labels(self, split: str | None = None) -> list[str]:
        return [e.label for e in self.manifest.entries if split is None or e.split == split]

    def subset(self, split: str) -> tuple[np.ndarray, list[str]]:
        idx = self.manifest.split(split)
        return self.images[idx], [self.manifest.entries[i].label for i in idx]


def entry_seeds(seed: int, index: int) -> tuple[np.random.Generator, int]:
    """Style RNG and render seed for manifest entry `index`."""
    ss = np.random.SeedSequence([seed, index])
    style_ss, render_ss = ss.spawn(2)
    return np.random.default_rng(style_ss), int(render_ss.generate_state(1)[0])


def render_entry(label, index, seed, ranges, font, height, width) -> np.ndarray:
    style_rng, render_seed = entry_seeds(seed, index)
    style = ranges.sample(style_rng)
    return to_uint8(render_word(label, font, style, render_seed, height, width).pixels)


def dataset_digest(labels, images: np.ndarray) -> str:
    h = hashlib.sha256()
    for label, img in zip(labels, images):
        h.update(label.encode())
        h.update(b"\t")
        h.update(np.ascontiguousarray(img).tobytes())
    return h.hexdigest()


def synthesize_dataset(
    vocab: Vocabulary,
    samples_per_word: int,
    ranges: StyleRanges | None = None,
    seed: int = 0,
    height: int = 32,
    width: int = 96,
    font: GlyphFont | None = None,
    test_words=(),
    test_samples_per_word: int = 0,
) -> Dataset:
    """Render `samples_per_word` training images per vocabulary word, plus an optional test split.

    Entry i is rendered from seeds derived from (seed, i) only.
    """
    if samples_per_word < 1:
        raise ValueError("samples_per_word must be >= 1")
    ranges = ranges or StyleRanges()
    font = font or default_font()
    labels, splits = [], []
    for w in vocab:
        labels += [w] * samples_per_word
        splits += ["train"] * samples_per_word
    for w in test_words:
        labels += [w] * test_samples_per_word
        splits += ["test"] * test_samples_per_word

    images = np.empty((len(labels), height, width), dtype=np.uint8)
    for i, label in enumerate(labels):
        images[i] = render_entry(label, i, seed, ranges, font, height, width)
    entries = [ManifestEntry(f"{s}-{i:06d}", lab, s) for i, (lab, s) in enumerate(zip(labels, splits))]
    manifest = DatasetManifest(
        entries, vocab, seed, samples_per_word, height, width, ranges, font.name,
        digest=dataset_digest(labels, images),
    )
    return Dataset(manifest, images)


def reliance_dataset(base: Vocabulary, fraction: float, samples_per_word: int, seed: int = 0,
                     test_invoc: int = 0, test_outvoc: int = 0, test_samples_per_word: int = 2,
                     **render) -> Dataset:
    """Train on a `fraction` subset of `base`; test on seen and unseen base words.

    InVoc test words come from the training subset, OutVoc words from the
    rest of `base`. Test images use fresh render seeds (their entry indices
    follow the training ones), so no test image duplicates a training image.
    """
    sub = build_vocab_subset(base, fraction, seed)
    rest = [w for w in base if w not in sub]
    if test_invoc > len(sub) or test_outvoc > len(rest):
        raise ValueError(f"asked for {test_invoc}/{test_outvoc} test words, "
                         f"have {len(sub)} in / {len(rest)} out of vocabulary")
    rng = np.random.default_rng([seed, 1])
    inv = [sub.words[i] for i in np.sort(rng.choice(len(sub), test_invoc, replace=False))]
    outv = [rest[i] for i in np.sort(rng.choice(len(rest), test_outvoc, replace=False))]
    return synthesize_dataset(sub, samples_per_word, seed=seed, test_words=inv + outv,
                              test_samples_per_word=test_samples_per_word, **render)


def regenerate(manifest: DatasetManifest, font: GlyphFont | None = None) -> np.ndarray:
    font = font or default_font()
    out = np.empty((len(manifest.entries), manifest.height, manifest.width), dtype=np.uint8)
    for i, e in enumerate(manifest.entries):
        out[i] = render_entry(e.label, i, manifest.seed, manifest.style_ranges, font,
                              manifest.height, manifest.width)
    return out


def write_dataset(ds: Dataset, out_dir, image_format: str = "pgm") -> Path:
    """Write images, manifest.tsv, manifest.json and vocab.txt.

    Files go to a temporary sibling directory that replaces `out_dir` only
    once everything is written; on failure nothing is left behind.
    """
    out_dir = Path(out_dir)
    out_dir.parent.mkdir(parents=True, exist_ok=True)
    tmp = Path(tempfile.mkdtemp(prefix=f".{out_dir.name}.", dir=out_dir.parent))
    try:
        (tmp / "images").mkdir()
        for e, img in zip(ds.manifest.entries, ds.images):
            save_image(tmp / "images" / f"{e.id}.{image_format}", img)
        with open(tmp / "manifest.tsv", "w", encoding="utf-8") as fh:
            for e in ds.manifest.entries:
                fh.write(f"{e.id}\t{e.label}\t{e.split}\n")
        header = ds.manifest.header() | {"image_format": image_format}
        (tmp / "manifest.json").write_text(json.dumps(header, indent=2, sort_keys=True) + "\n")
        (tmp / "vocab.txt").write_text("".join(w + "\n" for w in ds.manifest.vocab))
        if out_dir.exists():
            shutil.rmtree(out_dir)
        os.replace(tmp, out_dir)
    except BaseException:
        shutil.rmtree(tmp, ignore_errors=True)
        raise
    return out_dir


def read_manifest(data_dir) -> DatasetManifest:
    data_dir = Path(data_dir)
    header = json.loads((data_dir / "manifest.json").read_text())
    entries = []
    with open(data_dir / "manifest.tsv", encoding="utf-8") as fh:
        for line in fh:
            if line.strip():
                id_, label, split = line.rstrip("\n").split("\t")
                entries.append(ManifestEntry(id_, label, split))
    vocab = load_word_list(data_dir / "vocab.txt")
    vocab = Vocabulary(vocab.words, header.get("vocab_source", ""))
    return DatasetManifest(
        entries, vocab, header["seed"], header["samples_per_word"], header["height"],
        header["width"], StyleRanges.from_dict(header["style_ranges"]), header["font"],
        header["digest"],
    )


def read_dataset(data_dir) -> Dataset:
    data_dir = Path(data_dir)
    manifest = read_manifest(data_dir)
    fmt = json.loads((data_dir / "manifest.json").read_text()).get("image_format", "pgm")
    images = np.empty((len(manifest.entries), manifest.height, manifest.width), dtype=np.uint8)
    for i, e in enumerate(manifest.entries):
        images[i] = load_image(data_dir / "images" / f"{e.id}.{fmt}")
    return Dataset(manifest, images)
