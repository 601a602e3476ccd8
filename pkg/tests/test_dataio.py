import numpy as np
import pytest

from omnispec import camera as cam
from omnispec.dataio import (SpectralImage, UNLABELED, load_checkpoint,
                             read_image, read_manifest, save_checkpoint,
                             write_image, write_manifest, CorpusEntry)
from omnispec.datagen import (build_variant_corpora, convert_image,
                              make_toy_scene, reference_spectra)
from omnispec.errors import (BadMagicError, PayloadError, TruncationError,
                             ValidationError, VersionError)
from omnispec.rng import stream


def random_image(rng, h=8, w=8, c=12, labels=True):
    data = rng.uniform(0, 1, size=(h, w, c)).astype(np.float32).astype(np.float64)
    wl = np.sort(rng.uniform(400, 1000, size=c))
    lab = rng.integers(0, 4, size=(h, w)).astype(np.uint16) if labels else None
    return SpectralImage(data=data, wavelengths_nm=wl, labels=lab)


class TestImageFormat:
    def test_round_trip_bitwise(self, rng, tmp_path):
        img = random_image(rng)
        write_image(tmp_path / "a.csp", img)
        back = read_image(tmp_path / "a.csp")
        np.testing.assert_array_equal(back.data, img.data)
        np.testing.assert_array_equal(back.labels, img.labels)
        # write again: identical bytes
        write_image(tmp_path / "b.csp", back)
        assert (tmp_path / "a.csp").read_bytes() == (tmp_path / "b.csp").read_bytes()

    def test_no_labels_round_trip(self, rng, tmp_path):
        img = random_image(rng, labels=False)
        write_image(tmp_path / "a.csp", img)
        assert read_image(tmp_path / "a.csp").labels is None

    def test_corrupted_magic(self, rng, tmp_path):
        write_image(tmp_path / "a.csp", random_image(rng))
        raw = bytearray((tmp_path / "a.csp").read_bytes())
        raw[:4] = b"XXXX"
        (tmp_path / "bad.csp").write_bytes(bytes(raw))
        with pytest.raises(BadMagicError):
            read_image(tmp_path / "bad.csp")

    def test_truncation_names_byte_counts(self, rng, tmp_path):
        write_image(tmp_path / "a.csp", random_image(rng))
        raw = (tmp_path / "a.csp").read_bytes()
        (tmp_path / "cut.csp").write_bytes(raw[:len(raw) // 2])
        with pytest.raises(TruncationError, match=str(len(raw))):
            read_image(tmp_path / "cut.csp")

    def test_unknown_version(self, rng, tmp_path):
        write_image(tmp_path / "a.csp", random_image(rng))
        raw = bytearray((tmp_path / "a.csp").read_bytes())
        raw[4] = 99
        (tmp_path / "v.csp").write_bytes(bytes(raw))
        with pytest.raises(VersionError):
            read_image(tmp_path / "v.csp")

    def test_nan_payload_rejected(self, rng, tmp_path):
        img = random_image(rng)
        img.data[0, 0, 0] = np.nan
        with pytest.raises(PayloadError):
            write_image(tmp_path / "a.csp", img)

    def test_non_monotone_wavelengths_rejected(self, rng, tmp_path):
        img = random_image(rng)
        img.wavelengths_nm[1] = img.wavelengths_nm[0]
        with pytest.raises(PayloadError):
            write_image(tmp_path / "a.csp", img)


class TestManifest:
    def test_round_trip(self, rng, tmp_path):
        write_image(tmp_path / "img.csp", random_image(rng))
        entries = [CorpusEntry("img.csp", "s00", "hsi", "train")]
        write_manifest(tmp_path / "m.manifest", entries)
        corpus = read_manifest(tmp_path / "m.manifest")
        assert len(corpus.entries) == 1
        assert corpus.entries[0].subject == "s00"
        assert corpus.split("train")[0].camera == "hsi"

    def test_unresolvable_entry(self, tmp_path):
        (tmp_path / "m.manifest").write_text("missing.csp\ts0\thsi\ttrain\n")
        with pytest.raises(PayloadError):
            read_manifest(tmp_path / "m.manifest")

    def test_bad_split_tag(self, rng, tmp_path):
        write_image(tmp_path / "img.csp", random_image(rng))
        (tmp_path / "m.manifest").write_text("img.csp\ts0\thsi\tdev\n")
        with pytest.raises(PayloadError):
            read_manifest(tmp_path / "m.manifest")


class TestCheckpointContainer:
    def test_round_trip_bitwise(self, rng, tmp_path):
        tensors = {"a.w": rng.normal(size=(3, 4)), "b": rng.normal(size=(7,)),
                   "scalar": np.array(3.25)}
        meta = {"kind": "test", "step": 17}
        save_checkpoint(tmp_path / "c.ckpt", meta, tensors)
        meta2, tensors2 = load_checkpoint(tmp_path / "c.ckpt")
        assert meta2 == meta
        assert set(tensors2) == set(tensors)
        for k in tensors:
            np.testing.assert_array_equal(tensors2[k], tensors[k])

    def test_bad_magic(self, tmp_path):
        (tmp_path / "c.ckpt").write_bytes(b"JUNKJUNKJUNK")
        with pytest.raises(BadMagicError):
            load_checkpoint(tmp_path / "c.ckpt")

    def test_truncated(self, rng, tmp_path):
        save_checkpoint(tmp_path / "c.ckpt", {}, {"w": rng.normal(size=(64,))})
        raw = (tmp_path / "c.ckpt").read_bytes()
        (tmp_path / "cut.ckpt").write_bytes(raw[:len(raw) - 40])
        with pytest.raises((TruncationError, ValueError)):
            load_checkpoint(tmp_path / "cut.ckpt")


class TestToyScenes:
    def test_class_spectra_pairwise_distinguishable(self):
        table = reference_spectra(8)
        for i in range(8):
            for j in range(i + 1, 8):
                assert np.linalg.norm(table[i] - table[j]) > 0.5

    def test_same_scene_same_labels_across_cameras(self):
        bank1 = cam.sample_camera(stream(0, "camera", 1))
        bank2 = cam.sample_camera(stream(0, "camera", 2))
        a = make_toy_scene(stream(5, "scene", "x", 0), camera=bank1)
        b = make_toy_scene(stream(5, "scene", "x", 0), camera=bank2)
        h = make_toy_scene(stream(5, "scene", "x", 0), camera="hsi")
        np.testing.assert_array_equal(a.labels, b.labels)
        np.testing.assert_array_equal(a.labels, h.labels)
        assert a.n_channels == bank1.n_channels
        assert h.n_channels == 100

    def test_noise_free_rendering_constant_within_region(self):
        bank = cam.sample_camera(stream(0, "camera", 3))
        img = make_toy_scene(stream(6, "scene", "y", 0), camera=bank, noise_sigma=0.0)
        for k in np.unique(img.labels):
            mask = img.labels == k
            pix = img.data[mask]
            assert np.max(np.abs(pix - pix[0])) < 1e-12

    def test_hsi_matches_reference_spectra_when_noise_free(self):
        img = make_toy_scene(stream(7, "scene", "z", 0), camera="hsi", noise_sigma=0.0)
        table = reference_spectra(4)
        np.testing.assert_allclose(img.data, table[img.labels], atol=1e-12)

    def test_convert_preserves_geometry(self, rng):
        bank = cam.sample_camera(stream(0, "camera", 4))
        img = make_toy_scene(stream(8, "scene", "w", 0), camera="hsi")
        out = convert_image(img, bank)
        assert out.data.shape[:2] == img.data.shape[:2]
        np.testing.assert_array_equal(out.labels, img.labels)


class TestVariantLadder:
    def test_ladder_structure(self, tmp_path):
        summary = build_variant_corpora(tmp_path, seed=3, n_subjects=4, n_variants=2,
                                        images_per_subject=2, size=16, n_classes=3)
        assert len(summary["manifests"]) == 3
        v0 = read_manifest(tmp_path / "variant_0.manifest")
        assert all(e.camera == "hsi" for e in v0.entries)
        for k in (1, 2):
            vk = read_manifest(tmp_path / f"variant_{k}.manifest")
            converted = {e.subject for e in vk.split("train") if e.camera != "hsi"}
            assert len(converted) == 2 * k
            # each converted subject sits under exactly one camera
            for subject in converted:
                cams = {e.camera for e in vk.split("train") if e.subject == subject}
                assert len(cams) == 1
            # evaluation split untouched: always hyperspectral
            assert all(e.camera == "hsi" for e in vk.split("val") + vk.split("test"))

    def test_geometry_preserved_across_variants(self, tmp_path):
        build_variant_corpora(tmp_path, seed=4, n_subjects=4, n_variants=2,
                              images_per_subject=2, size=16, n_classes=3)
        v0 = read_manifest(tmp_path / "variant_0.manifest")
        v2 = read_manifest(tmp_path / "variant_2.manifest")
        shapes0 = sorted((e.subject, e.path.split("/")[-1],
                          v0.load(e).data.shape[:2]) for e in v0.split("train"))
        shapes2 = sorted((e.subject, e.path.split("/")[-1],
                          v2.load(e).data.shape[:2]) for e in v2.split("train"))
        assert [(s, n) for s, n, _ in shapes0] == [(s, n) for s, n, _ in shapes2]
        assert all(a[2] == b[2] for a, b in zip(shapes0, shapes2))

    def test_labels_identical_across_variants(self, tmp_path):
        build_variant_corpora(tmp_path, seed=5, n_subjects=4, n_variants=2,
                              images_per_subject=1, size=16, n_classes=3)
        v0 = read_manifest(tmp_path / "variant_0.manifest")
        v2 = read_manifest(tmp_path / "variant_2.manifest")
        lab0 = {e.path.split("/")[-1]: v0.load(e).labels for e in v0.split("train")}
        lab2 = {e.path.split("/")[-1]: v2.load(e).labels for e in v2.split("train")}
        for name in lab0:
            np.testing.assert_array_equal(lab0[name], lab2[name])

    def test_too_few_subjects(self, tmp_path):
        with pytest.raises(ValidationError):
            build_variant_corpora(tmp_path, seed=0, n_subjects=3, n_variants=2)

    def test_pretrain_manifest_is_multicamera(self, tmp_path):
        build_variant_corpora(tmp_path, seed=6, n_subjects=4, n_variants=2,
                              images_per_subject=1, size=16, n_classes=3)
        pre = read_manifest(tmp_path / "pretrain.manifest")
        cameras = {e.camera for e in pre.entries}
        assert "hsi" in cameras and len(cameras) == 3
        assert all(e.split == "train" for e in pre.entries)

    def test_deterministic_generation(self, tmp_path):
        build_variant_corpora(tmp_path / "a", seed=9, n_subjects=4, n_variants=2,
                              images_per_subject=1, size=16, n_classes=3)
        build_variant_corpora(tmp_path / "b", seed=9, n_subjects=4, n_variants=2,
                              images_per_subject=1, size=16, n_classes=3)
        for rel in sorted(p.relative_to(tmp_path / "a")
                          for p in (tmp_path / "a").rglob("*") if p.is_file()):
            assert (tmp_path / "a" / rel).read_bytes() == \
                (tmp_path / "b" / rel).read_bytes(), rel
