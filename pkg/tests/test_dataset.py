import numpy as np
import pytest
import torch
from PIL import Image

from apsnet.dataset import (
    SynthConfig, build_manifest, class_histogram, load_batch, read_manifest, resize_bilinear,
    synth_generate, write_histogram, zipf_counts,
)


def write_png(path, arr):
    path.parent.mkdir(parents=True, exist_ok=True)
    Image.fromarray(arr.astype(np.uint8), "RGB").save(path)


def make_corpus(root, counts, size=(20, 20)):
    rng = np.random.default_rng(0)
    for name, n in counts.items():
        for i in range(n):
            write_png(root / name / f"{i:03d}.png", rng.integers(0, 256, (*size, 3)))
    return root


def bilinear_oracle(src, out_h, out_w):
    """Half-pixel-centre bilinear interpolation evaluated point by point."""
    h, w = src.shape
    out = np.zeros((out_h, out_w))
    for i in range(out_h):
        for j in range(out_w):
            y = min(max((i + 0.5) * h / out_h - 0.5, 0.0), h - 1)
            x = min(max((j + 0.5) * w / out_w - 0.5, 0.0), w - 1)
            y0, x0 = int(np.floor(y)), int(np.floor(x))
            y1, x1 = min(y0 + 1, h - 1), min(x0 + 1, w - 1)
            dy, dx = y - y0, x - x0
            out[i, j] = ((1 - dy) * (1 - dx) * src[y0, x0] + (1 - dy) * dx * src[y0, x1]
                         + dy * (1 - dx) * src[y1, x0] + dy * dx * src[y1, x1])
    return out


def test_split_per_class_partition(tmp_path):
    m = build_manifest(make_corpus(tmp_path, {"a": 10, "b": 7}), 0.7, 1)
    assert m.class_names == ["a", "b"]
    hist = class_histogram(m)
    assert hist == [("a", 7, 3), ("b", 5, 2)]
    assert sorted(m.ids()) == sorted(set(m.ids()))
    for c in m.classes:
        ids = [s.id for s in m.samples if s.label == c.index]
        assert all(i.startswith(c.name + "/") for i in ids)


def test_single_image_class(tmp_path):
    m = build_manifest(make_corpus(tmp_path, {"only": 1}), 0.7, 0)
    assert class_histogram(m) == [("only", 1, 0)]
    assert read_manifest(tmp_path / "manifest.tsv").samples == m.samples


def test_manifest_deterministic_bytes(tmp_path):
    root = make_corpus(tmp_path, {"x": 9, "y": 4, "z": 6})
    build_manifest(root, 0.7, 5)
    first = (root / "manifest.tsv").read_bytes()
    build_manifest(root, 0.7, 5)
    assert (root / "manifest.tsv").read_bytes() == first
    build_manifest(root, 0.7, 6)
    assert (root / "manifest.tsv").read_bytes() != first


def test_manifest_format(tmp_path):
    m = build_manifest(make_corpus(tmp_path, {"b": 2, "a": 1}), 0.5, 0)
    lines = (tmp_path / "manifest.tsv").read_text(encoding="utf-8").splitlines()
    assert lines[0] == "# image_size=20"
    fields = lines[1].split("\t")
    assert fields[0] == "0" and fields[1] == "a" and fields[2] == "a/000.png" and fields[3] in ("train", "test")
    assert read_manifest(tmp_path).class_names == m.class_names


def test_empty_class_and_non_images(tmp_path):
    root = make_corpus(tmp_path, {"a": 3})
    (root / "a" / "notes.txt").write_text("not an image")
    m = build_manifest(root)
    assert m.skipped == 1 and len(m.samples) == 3
    (root / "empty").mkdir()
    with pytest.raises(ValueError, match="empty"):
        build_manifest(root)


def test_aps_sized_split_arithmetic(tmp_path):
    # 1724 Setaria italica images at 0.7; the APS corpus itself lists 1245 / 479
    m = build_manifest(make_corpus(tmp_path, {"Setaria italica": 1724}, (4, 4)), 0.7, 0)
    (_, train, test), = class_histogram(m)
    assert train + test == 1724 and abs(train - 1245) < 50 and train == 1207


def test_resize_identity_constant():
    x = torch.full((1, 3, 16, 16), 0.5)
    assert torch.equal(resize_bilinear(x, 16), x)


def test_checker_upsample_matches_oracle():
    checker = np.array([[0.0, 1.0], [1.0, 0.0]])
    out = resize_bilinear(torch.tensor(checker)[None, None], 4)[0, 0].numpy()
    expected = bilinear_oracle(checker, 4, 4)
    assert np.allclose(out, expected, atol=1e-12)
    # centre values by hand: f(y, x) = x + y - 2xy at y, x in {0.25, 0.75}
    assert out[1, 1] == pytest.approx(0.375) and out[1, 2] == pytest.approx(0.625)


def test_load_batch(tmp_path):
    checker = np.array([[0, 255], [255, 0]])[..., None].repeat(3, axis=2)
    write_png(tmp_path / "c" / "0.png", checker)
    write_png(tmp_path / "c" / "1.png", np.full((6, 6, 3), 255))
    m = build_manifest(tmp_path, 1.0)
    x, y = load_batch(m, ["c/1.png", "c/0.png"], 4)
    assert x.shape == (2, 3, 4, 4) and y.tolist() == [0, 0]
    assert torch.allclose(x[0], torch.ones(3, 4, 4))
    assert np.allclose(x[1, 0].numpy(), bilinear_oracle(checker[..., 0] / 255.0, 4, 4), atol=1e-6)
    assert 0 <= x.min() and x.max() <= 1


def test_load_batch_large_source(tmp_path):
    write_png(tmp_path / "big" / "0.png", np.random.default_rng(0).integers(0, 256, (369, 491, 3)))
    m = build_manifest(tmp_path)
    x, _ = load_batch(m, m.ids(), 64)
    assert x.shape == (1, 3, 64, 64) and torch.isfinite(x).all()


def test_load_batch_errors(tmp_path):
    write_png(tmp_path / "c" / "0.png", np.zeros((4, 4, 3)))
    m = build_manifest(tmp_path)
    with pytest.raises(ValueError):
        load_batch(m, [], 4)
    with pytest.raises(KeyError):
        load_batch(m, ["nope.png"], 4)
    (tmp_path / "c" / "0.png").write_bytes(b"garbage")
    with pytest.raises(OSError, match="0.png"):
        load_batch(m, ["c/0.png"], 4)


def test_synth_counts_and_determinism(tmp_path):
    counts = [30, 12, 5]
    cfg = SynthConfig(class_counts=counts, mean_radius=[8, 12, 16], image_size=48, rng_seed=4)
    m = synth_generate(cfg, tmp_path / "a")
    assert [tr + te for _, tr, te in class_histogram(m)] == counts
    synth_generate(cfg, tmp_path / "b")
    for s in m.samples:
        assert (tmp_path / "a" / s.id).read_bytes() == (tmp_path / "b" / s.id).read_bytes()
    assert (tmp_path / "a" / "manifest.tsv").read_bytes() == (tmp_path / "b" / "manifest.tsv").read_bytes()
    write_histogram(m, tmp_path / "h.csv")
    assert (tmp_path / "h.csv").read_text().splitlines()[0] == "class,train,test"


def test_synth_zipf_counts(tmp_path):
    counts = zipf_counts(6, 120, 10)
    assert counts[0] == 120 and counts[-1] == 10 and counts == sorted(counts, reverse=True)
    cfg = SynthConfig(class_counts=counts, mean_radius=[6] * 6, image_size=32)
    m = synth_generate(cfg, tmp_path)
    per_class = [0] * 6
    for d in sorted(p for p in tmp_path.iterdir() if p.is_dir()):
        per_class[m.class_names.index(d.name)] = len(list(d.glob("*.png")))
    assert per_class == counts


def test_synth_clean_images_identical(tmp_path):
    cfg = SynthConfig(class_counts=[4], mean_radius=[10], radius_jitter=[0.0], aspect_ratio=[1.0],
                      texture_frequency=[0.0], damage_prob=[0.0], noise_sigma=0.0, image_size=32)
    m = synth_generate(cfg, tmp_path)
    x, _ = load_batch(m, m.ids(), 32)
    assert all(torch.equal(x[0], x[i]) for i in range(1, 4))


def test_synth_size_encodes_class(size_only_corpus):
    x, y = load_batch(size_only_corpus, size_only_corpus.ids(), 64)
    area = (x.mean(1) > 0.2).float().sum((1, 2))
    small = size_only_corpus.class_names.index("small")
    assert area[y == small].max() < area[y != small].min()


def test_synth_config_errors():
    with pytest.raises(ValueError, match="class_counts"):
        SynthConfig(class_counts=[3, 3], mean_radius=[5])
    with pytest.raises(ValueError):
        SynthConfig(class_counts=[3], mean_radius=[40], image_size=64)
    with pytest.raises(ValueError):
        SynthConfig(class_counts=[0], mean_radius=[5])
