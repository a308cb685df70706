import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays
from PIL import Image
from scipy import ndimage

from xseg.data import (
    LABELS, DatasetManifest, MalformedImageError, ManifestEntry, ManifestError, MissingFileError, Sample, SynthSpec,
    UnknownLabelError, generate_synthetic, load_manifest, load_sample, read_image, read_mask, resize_bilinear,
    resize_for_network, rotate, save_manifest, synth_sample, synth_samples, write_image, write_mask,
)


def write_pair(root, name, img8, mask):
    (root / "images").mkdir(exist_ok=True)
    (root / "masks").mkdir(exist_ok=True)
    Image.fromarray(img8.astype(np.uint8)).save(root / "images" / f"{name}.png")
    Image.fromarray(mask.astype(np.uint8)).save(root / "masks" / f"{name}.png")


def manifest_text(*rows, provenance="general"):
    return "\n".join(["xseg-manifest 1", f"provenance {provenance}", *["\t".join(r) for r in rows]]) + "\n"


def test_normalization_endpoints(tmp_path):
    write_pair(tmp_path, "a", np.array([[0, 255], [128, 255]]), np.array([[0, 255], [255, 0]]))
    img = read_image(tmp_path / "images" / "a.png")
    assert img[0, 0] == 0.0 and img[0, 1] == 1.0
    mask = read_mask(tmp_path / "masks" / "a.png")
    assert set(np.unique(mask)) == {0, 1}
    np.testing.assert_array_equal(mask, [[0, 1], [1, 0]])


def test_sixteen_bit_and_pgm(tmp_path):
    arr = np.array([[0, 65535], [32768, 1000]], dtype=np.uint16)
    Image.fromarray(arr).save(tmp_path / "a.png")
    img = read_image(tmp_path / "a.png")
    assert img[0, 1] == 1.0 and img[1, 1] == 1000 / 65535
    Image.fromarray(np.array([[0, 255]], dtype=np.uint8)).save(tmp_path / "b.pgm")
    np.testing.assert_array_equal(read_image(tmp_path / "b.pgm"), [[0.0, 1.0]])


@pytest.mark.parametrize("bits", [8, 16])
def test_load_save_load_lossless(tmp_path, bits):
    rng = np.random.default_rng(bits)
    write_image(tmp_path / "x.png", rng.uniform(size=(9, 7)), bits)
    first = read_image(tmp_path / "x.png")
    write_image(tmp_path / "y.png", first, bits)
    np.testing.assert_array_equal(read_image(tmp_path / "y.png"), first)
    m = (rng.uniform(size=(5, 5)) > 0.5).astype(np.uint8)
    write_mask(tmp_path / "m.png", m)
    np.testing.assert_array_equal(read_mask(tmp_path / "m.png"), m)


def test_manifest_roundtrip(tmp_path):
    write_pair(tmp_path, "a", np.zeros((4, 4)), np.zeros((4, 4)))
    write_pair(tmp_path, "b", np.zeros((4, 4)), np.zeros((4, 4)))
    (tmp_path / "m.txt").write_text(manifest_text(
        ("images/a.png", "masks/a.png", "covid"), ("images/b.png", "masks/b.png", "normal")))
    m = load_manifest(tmp_path / "m.txt")
    assert m.labels() == ["covid", "normal"] and m.provenance == "general" and m.version == 1
    assert m.entries[0].image == tmp_path / "images" / "a.png"
    save_manifest(m, tmp_path / "copy.txt")
    assert (tmp_path / "copy.txt").read_text() == (tmp_path / "m.txt").read_text()
    s = load_sample(m.entries[0])
    assert s.image.shape == s.mask.shape == (4, 4) and s.label == "covid"


def test_unknown_label(tmp_path):
    (tmp_path / "m.txt").write_text(manifest_text(("a.png", "b.png", "covid19x")))
    with pytest.raises(UnknownLabelError, match="covid19x"):
        load_manifest(tmp_path / "m.txt")


def test_manifest_errors(tmp_path):
    with pytest.raises(MissingFileError):
        load_manifest(tmp_path / "nope.txt")
    (tmp_path / "bad.txt").write_text("something else\n")
    with pytest.raises(ManifestError):
        load_manifest(tmp_path / "bad.txt")
    (tmp_path / "dup.txt").write_text(manifest_text(("a.png", "m.png", "covid"), ("a.png", "n.png", "covid")))
    with pytest.raises(ManifestError, match="duplicate"):
        load_manifest(tmp_path / "dup.txt")
    (tmp_path / "prov.txt").write_text(manifest_text(provenance="mystery"))
    with pytest.raises(ManifestError):
        load_manifest(tmp_path / "prov.txt")
    (tmp_path / "v2.txt").write_text("xseg-manifest 2\nprovenance general\n")
    with pytest.raises(ManifestError):
        load_manifest(tmp_path / "v2.txt")


def test_missing_and_malformed_images_name_path(tmp_path):
    (tmp_path / "junk.png").write_bytes(b"not an image")
    with pytest.raises(MalformedImageError, match="junk.png"):
        read_image(tmp_path / "junk.png")
    with pytest.raises(MissingFileError, match="gone.png"):
        load_sample(ManifestEntry(tmp_path / "gone.png", tmp_path / "gone.png", "covid"))
    Image.fromarray(np.zeros((2, 2, 3), np.uint8)).save(tmp_path / "rgb.png")
    with pytest.raises(MalformedImageError):
        read_image(tmp_path / "rgb.png")


def test_error_kinds_distinct():
    kinds = {MissingFileError, MalformedImageError, UnknownLabelError, ManifestError}
    assert len(kinds) == 4


def test_sample_invariants():
    with pytest.raises(ValueError):
        Sample(np.zeros((4, 4)), np.zeros((4, 5)), "covid", "x")
    with pytest.raises(UnknownLabelError):
        Sample(np.zeros((4, 4)), np.zeros((4, 4)), "flu", "x")


# resizing


@given(c=st.floats(0, 1), size=st.sampled_from([4, 8, 16, 32]), h=st.integers(3, 20), w=st.integers(3, 20))
def test_constant_stays_constant(c, size, h, w):
    out = resize_bilinear(np.full((h, w), c), size)
    np.testing.assert_allclose(out, c, rtol=0, atol=1e-15)


def test_checkerboard_bilinear_average():
    board = np.indices((4, 4)).sum(axis=0) % 2
    np.testing.assert_allclose(resize_bilinear(board.astype(float), 2), 0.5, atol=1e-15)


@settings(max_examples=50)
@given(mask=arrays(np.uint8, (9, 13), elements=st.integers(0, 1)), size=st.sampled_from([4, 8, 16]))
def test_resize_for_network_properties(mask, size):
    img = np.random.default_rng(int(mask.sum())).uniform(size=mask.shape)
    out = resize_for_network(Sample(img, mask, "normal", "x"), size)
    assert out.image.shape == (3, size, size) and out.mask.shape == (size, size)
    assert set(np.unique(out.mask)) <= {0, 1}
    assert np.abs(out.image[0] - out.image[1]).max() == 0 and np.abs(out.image[1] - out.image[2]).max() == 0


def test_rotate_zero_and_fill():
    img = np.random.default_rng(0).uniform(size=(8, 8))
    np.testing.assert_allclose(rotate(img, 0.0), img, atol=1e-12)
    ones = rotate(np.ones((16, 16)), 10.0)
    assert ones[0, 0] < 1 and ones[8, 8] == pytest.approx(1.0)
    # quarter turn is exact for nearest neighbour
    m = (np.random.default_rng(1).uniform(size=(5, 5)) > 0.5).astype(np.uint8)
    np.testing.assert_array_equal(rotate(m, 90.0, nearest=True), np.rot90(m, -1))


# synthetic domains


def test_same_spec_byte_identical(tmp_path):
    spec = SynthSpec("portable", 2, 32, seed=5)
    generate_synthetic(spec, tmp_path / "a")
    generate_synthetic(spec, tmp_path / "b")
    files = sorted(p.relative_to(tmp_path / "a") for p in (tmp_path / "a").rglob("*") if p.is_file())
    assert len(files) == 2 * 6 + 1
    for f in files:
        assert (tmp_path / "a" / f).read_bytes() == (tmp_path / "b" / f).read_bytes()
    m = load_manifest(tmp_path / "a" / "manifest.txt")
    assert m.provenance == "portable" and len(m) == 6


def test_counts_and_labels():
    assert [s.label for s in synth_samples(SynthSpec("source", 3, 16))] == ["normal"] * 3
    general = synth_samples(SynthSpec("general", {"covid": 2, "pathological": 1}, 16))
    assert [s.label for s in general] == ["covid", "covid", "pathological"]
    with pytest.raises(ValueError):
        SynthSpec("general", 0)
    with pytest.raises(ValueError):
        SynthSpec("mri", 1)


def test_foreground_fraction_range():
    fracs = []
    for dom in ("source", "general", "portable"):
        spec = SynthSpec(dom, 1, 64, seed=21)
        for i in range(334):
            fracs.append(synth_sample(spec, i, LABELS[i % 3] if dom != "source" else "normal").mask.mean())
    assert len(fracs) >= 1000
    assert 0.05 <= min(fracs) and max(fracs) <= 0.6


def test_portable_is_blurrier_than_general():
    def sharpness(img):
        return np.abs(ndimage.laplace(img)).mean()

    for i in range(100):
        label = LABELS[i % 3]
        g = synth_sample(SynthSpec("general", 1, 64, seed=9), i, label)
        p = synth_sample(SynthSpec("portable", 1, 64, seed=9), i, label)
        np.testing.assert_array_equal(g.mask, p.mask)
        assert sharpness(p.image) < sharpness(g.image), i


def test_class_textures_differ():
    spec = SynthSpec("general", 1, 64, seed=2, noise=0.0)
    imgs = {lb: synth_sample(spec, 0, lb) for lb in LABELS}
    lung = imgs["normal"].mask.astype(bool)
    means = {lb: s.image[lung].mean() for lb, s in imgs.items()}
    assert means["covid"] > means["normal"] and means["pathological"] > means["normal"]


def test_manifest_subset_keeps_entries():
    m = DatasetManifest([ManifestEntry(__import__("pathlib").Path(f"/x/{i}.png"), __import__("pathlib").Path(f"/y/{i}.png"), "covid") for i in range(4)], "general")
    sub = m.subset([1, 3], "portable-heldout")
    assert len(sub) == 2 and sub.provenance == "portable-heldout"
