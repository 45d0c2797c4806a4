import json

import numpy as np
import pytest

from vsdn.charset import CHARSET, CharsetError
from vsdn.glyphforge import (Style, StyleRanges, Vocabulary, build_vocab_subset, bundled_words,
                             dataset_digest, default_font, load_image, merge_vocabularies,
                             parse_font, random_digit_words, read_dataset, read_word_list,
                             regenerate, reliance_dataset, render_word, save_image,
                             synthesize_dataset, write_dataset)


def test_default_font_covers_charset_with_unique_glyphs():
    font = default_font()
    assert set(CHARSET) <= set(font.bitmaps)
    assert len({font.bitmaps[c].tobytes() for c in CHARSET}) == len(CHARSET)
    assert (font.cell_height, font.cell_width) == (7, 5)


def _font_text(bitmaps):
    blocks = ["cell 5 7"]
    for ch, bm in bitmaps.items():
        blocks.append(f"[{ch}]")
        blocks += ["".join("#" if v else "." for v in row) for row in bm]
    return "\n".join(blocks) + "\n"


def test_font_text_round_trip_and_validation():
    bitmaps = dict(default_font().bitmaps)
    font = parse_font("# comment line\n" + _font_text(bitmaps))
    assert all(np.array_equal(font.bitmaps[c], bitmaps[c]) for c in CHARSET)
    missing = {c: b for c, b in bitmaps.items() if c != "z"}
    with pytest.raises(ValueError, match="lacks glyphs for 'z'"):
        parse_font(_font_text(missing))
    dup = dict(bitmaps, b=bitmaps["a"])
    with pytest.raises(ValueError, match="identical"):
        parse_font(_font_text(dup))
    with pytest.raises(ValueError, match="cell"):
        parse_font(_font_text(bitmaps).split("\n", 1)[1])


def test_identity_render_matches_upscaled_bitmap():
    img = render_word("a", style=Style(), seed=0)
    y0, x0, h, w = img.meta["bbox"]
    sy, sx = img.meta["scale"]
    expected = np.kron(default_font().bitmaps["a"].astype(np.float32), np.ones((sy, sx)))
    assert np.array_equal(img.pixels[y0:y0 + h, x0:x0 + w], expected)
    outside = img.pixels.copy()
    outside[y0:y0 + h, x0:x0 + w] = 0
    assert not outside.any()
    assert img.label == "a"


def test_render_is_deterministic_and_seed_sensitive():
    style = Style(noise_sigma=0.1)
    a = render_word("cat", style=style, seed=1)
    b = render_word("cat", style=style, seed=1)
    c = render_word("cat", style=style, seed=2)
    assert np.array_equal(a.pixels, b.pixels)
    assert not np.array_equal(a.pixels, c.pixels)
    assert a.label == c.label == "cat"


@pytest.mark.parametrize("seed", range(20))
def test_sampled_styles_stay_in_unit_range(seed):
    rng = np.random.default_rng(seed)
    style = StyleRanges().sample(rng)
    img = render_word("hello42", style=style, seed=seed)
    assert img.pixels.shape == (32, 96)
    assert img.pixels.min() >= 0 and img.pixels.max() <= 1
    assert img.pixels.dtype == np.float32


def test_render_rejects_bad_characters_naming_them():
    with pytest.raises(CharsetError) as err:
        render_word("ca$t")
    assert err.value.char == "$"
    with pytest.raises(ValueError):
        render_word("")


def test_long_word_shrinks_then_fails():
    img = render_word("abcdefghijklm", style=Style(scale_x=2, spacing=2))
    assert img.meta["scale"][1] == 1
    with pytest.raises(ValueError, match="does not fit"):
        render_word("a" * 20)


def test_vocabulary_invariants():
    with pytest.raises(ValueError):
        Vocabulary(("ab", "ab"))
    with pytest.raises(CharsetError):
        Vocabulary(("Ab",))
    v = read_word_list(["Cat", "dog", "cat", "x-y", ""], source="t")
    assert v.words == ("cat", "dog")
    assert "cat" in v and "cow" not in v


def test_bundled_list_and_digit_words():
    words = bundled_words()
    assert 9000 <= len(words) <= 10000
    assert all(2 <= len(w) <= 10 for w in words)
    digits = random_digit_words(50, seed=1)
    assert len(digits) == 50 and all(w.isdigit() for w in digits)
    assert random_digit_words(50, seed=1) == digits
    merged = merge_vocabularies(Vocabulary(("ab",)), digits, Vocabulary(("ab", "cd")))
    assert merged.words[0] == "ab" and merged.words[-1] == "cd"
    assert len(merged) == 52


def test_vocab_subset_size_membership_determinism():
    base = bundled_words()
    sub = build_vocab_subset(base, 0.1, seed=4)
    assert len(sub) == round(0.1 * len(base))
    assert all(w in base for w in sub)
    assert sub == build_vocab_subset(base, 0.1, seed=4)
    order = {w: i for i, w in enumerate(base.words)}
    assert [order[w] for w in sub] == sorted(order[w] for w in sub)
    assert build_vocab_subset(base, 1.0, seed=9).words == base.words


def test_vocab_subset_errors():
    with pytest.raises(ValueError):
        build_vocab_subset(Vocabulary(()), 0.5, 0)
    for f in (0.0, 1.5, -0.1):
        with pytest.raises(ValueError):
            build_vocab_subset(Vocabulary(("ab",)), f, 0)


def test_vocab_subset_overlap_matches_hypergeometric_mean():
    # two independent 50-of-100 subsets overlap by 50 * 50 / 100 = 25 words on average
    base = Vocabulary(tuple(f"w{i}" for i in range(100)))
    overlaps = []
    for s in range(1000):
        a = set(build_vocab_subset(base, 0.5, seed=2 * s))
        b = set(build_vocab_subset(base, 0.5, seed=2 * s + 1))
        assert len(a) == len(b) == 50
        overlaps.append(len(a & b))
    # hypergeometric sd = 2.51; standard error over 1000 draws ~0.08
    assert abs(np.mean(overlaps) - 25.0) < 0.4


def test_synthesize_counts_and_regeneration():
    vocab = Vocabulary(tuple(f"w{i}" for i in range(30)))
    ds = synthesize_dataset(vocab, 5, seed=7, height=16, width=48)
    assert len(ds.manifest.entries) == 150
    labels = ds.labels()
    assert all(labels.count(w) == 5 for w in vocab)
    assert len({e.id for e in ds.manifest.entries}) == 150
    again = regenerate(ds.manifest)
    assert np.array_equal(again, ds.images)
    assert dataset_digest(labels, again) == ds.manifest.digest


def test_synthesize_300_by_50_entry_count():
    vocab = Vocabulary(tuple(bundled_words(3, 8).words[:300]))
    # count arithmetic only; rendering 15000 images here is needlessly slow
    assert len(vocab) * 50 == 15000


def test_manifest_rejects_foreign_training_label():
    ds = synthesize_dataset(Vocabulary(("ab",)), 1, height=8, width=16)
    from vsdn.glyphforge import DatasetManifest, ManifestEntry
    m = ds.manifest
    with pytest.raises(ValueError):
        DatasetManifest([ManifestEntry("x", "zz", "train")], m.vocab, m.seed, 1, 8, 16,
                        m.style_ranges, m.font, m.digest)


def test_write_read_round_trip(tmp_path, small_dataset):
    out = write_dataset(small_dataset, tmp_path / "ds")
    back = read_dataset(out)
    assert back.labels() == small_dataset.labels()
    assert np.array_equal(back.images, small_dataset.images)
    assert back.manifest.digest == small_dataset.manifest.digest
    assert np.array_equal(regenerate(back.manifest), small_dataset.images)
    header = json.loads((out / "manifest.json").read_text())
    assert header["seed"] == 3
    lines = (out / "manifest.tsv").read_text().splitlines()
    assert lines[0].split("\t") == ["train-000000", "ab", "train"]


def test_write_failure_leaves_nothing_behind(tmp_path, small_dataset, monkeypatch):
    import vsdn.glyphforge as gf

    calls = {"n": 0}
    real = gf.save_image

    def flaky(path, pixels):
        calls["n"] += 1
        if calls["n"] == 5:
            raise OSError("disk full")
        real(path, pixels)

    monkeypatch.setattr(gf, "save_image", flaky)
    with pytest.raises(OSError):
        gf.write_dataset(small_dataset, tmp_path / "ds")
    assert list(tmp_path.iterdir()) == []


def test_image_io_round_trip(tmp_path):
    img = render_word("ok", seed=0).pixels
    for ext in ("pgm", "png"):
        save_image(tmp_path / f"x.{ext}", img)
        back = load_image(tmp_path / f"x.{ext}")
        assert back.dtype == np.uint8
        assert np.array_equal(back, np.round(img * 255).astype(np.uint8))


def test_reliance_dataset_splits():
    base = Vocabulary(tuple(bundled_words(3, 6).words[:60]))
    ds = reliance_dataset(base, 0.5, 1, seed=2, test_invoc=5, test_outvoc=6,
                          test_samples_per_word=2, height=16, width=48)
    vocab = set(ds.manifest.vocab)
    test_labels = [ds.manifest.entries[i].label for i in ds.manifest.split("test")]
    assert len(test_labels) == 22
    assert sum(l in vocab for l in test_labels) == 10
    assert sum(l not in vocab for l in test_labels) == 12
    assert all(l in base for l in test_labels)
