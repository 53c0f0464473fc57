"""Synthetic generator, image container and manifest loader."""

import numpy as np
import pytest

from mmdg.data import (ATTACKS, PRESETS, CorruptionSpec, ManifestError, band_amplitude, export_dataset,
                       generate_domain, load_manifest, read_image, render_sample, with_corruption, write_image)
from mmdg.uem import MODALITIES


@pytest.fixture(scope="module")
def small():
    return generate_domain(PRESETS["c"], 6, 6, seed=3)


class TestGenerator:
    def test_counts(self, small):
        assert len(small) == 12
        assert (small.labels == 0).sum() == 6 and (small.labels == 1).sum() == 6

    def test_deterministic(self, small):
        again = generate_domain(PRESETS["c"], 6, 6, seed=3)
        assert all(np.array_equal(small.images[m], again.images[m]) for m in MODALITIES)

    def test_range_and_shape(self, small):
        for m in MODALITIES:
            assert small.images[m].shape == (12, 32, 32, 3)
            assert small.images[m].min() >= 0.0 and small.images[m].max() <= 1.0

    def test_zero_corruption_equals_clean(self):
        spec = with_corruption(PRESETS["w"], 0.0)
        for i in range(4):
            imgs, masks = render_sample(spec, 1, i, i % 2 == 1, "mask")
            clean, _ = render_sample(spec, 1, i, i % 2 == 1, "mask", corrupt=False)
            assert not any(mk.any() for mk in masks.values())
            assert all(np.array_equal(imgs[m], clean[m]) for m in MODALITIES)

    def test_corruption_is_local(self):
        spec = with_corruption(PRESETS["w"], 1.0)
        imgs, masks = render_sample(spec, 2, 5, True, "print")
        clean, _ = render_sample(spec, 2, 5, True, "print", corrupt=False)
        for m in ("D", "I"):
            assert masks[m].any()
            assert np.array_equal(imgs[m][~masks[m]], clean[m][~masks[m]])
            assert not np.array_equal(imgs[m][masks[m]], clean[m][masks[m]])

    def test_signature_band_energy(self):
        # no clipping, no corruption: the spoof-minus-live band amplitude equals the configured amplitude
        spec = with_corruption(PRESETS["s"], 0.0)
        for attack, mods in ATTACKS.items():
            for m in mods:
                freq, amp = spec.signature_freq[m], spec.signature_amp[m]
                diffs = []
                for i in range(8):
                    live, _ = render_sample(spec, 4, i, False, size=32, corrupt=False)
                    spoof, _ = render_sample(spec, 4, i, True, attack, size=32, corrupt=False)
                    diffs.append(band_amplitude(spoof[m] - live[m], freq))
                assert np.mean(diffs) == pytest.approx(amp, rel=0.1)

    def test_no_modality_sees_every_attack(self):
        for m in MODALITIES:
            assert not all(m in mods for mods in ATTACKS.values())

    def test_linear_probe_separates_domains(self):
        names = list(PRESETS)
        doms = [generate_domain(PRESETS[n], 20, 20, seed=0) for n in names]
        feats = np.concatenate([np.concatenate([d.images[m].mean(axis=(1, 2)) for m in MODALITIES], axis=1)
                                for d in doms])
        feats = (feats - feats.mean(0)) / (feats.std(0) + 1e-12)
        feats = np.hstack([feats, np.ones((len(feats), 1))])
        y = np.repeat(np.arange(len(names)), 40)
        idx = np.random.default_rng(0).permutation(len(y))
        tr, te = idx[:100], idx[100:]
        # one-vs-rest least squares probe
        w, *_ = np.linalg.lstsq(feats[tr], np.eye(len(names))[y[tr]], rcond=None)
        acc = np.mean(np.argmax(feats[te] @ w, axis=1) == y[te])
        assert acc >= 0.95

    def test_invalid_counts(self):
        with pytest.raises(ValueError):
            generate_domain(PRESETS["c"], 0, 3)

    def test_invalid_corruption(self):
        with pytest.raises(ValueError):
            CorruptionSpec(prob=1.5)


class TestManifest:
    def test_roundtrip(self, small, tmp_path):
        manifest = export_dataset(small, tmp_path)
        back = load_manifest(manifest).materialize()
        for m in MODALITIES:
            assert np.array_equal(back.images[m], small.images[m])
        np.testing.assert_array_equal(back.labels, small.labels)
        assert list(back.domain) == list(small.domain)

    def test_empty_manifest(self, tmp_path):
        (tmp_path / "m.tsv").write_text("")
        assert len(load_manifest(tmp_path / "m.tsv")) == 0

    def test_non_binary_label(self, small, tmp_path):
        manifest = export_dataset(small.subset([0]), tmp_path)
        manifest.write_text(manifest.read_text().replace("\tlive\t", "\treplay\t"))
        with pytest.raises(ManifestError, match=":1:"):
            load_manifest(manifest)

    def test_malformed_line_number(self, small, tmp_path):
        manifest = export_dataset(small.subset([0, 1]), tmp_path)
        manifest.write_text(manifest.read_text() + "only\ttwo\n")
        with pytest.raises(ManifestError, match=":3:"):
            load_manifest(manifest)

    def test_missing_file(self, small, tmp_path):
        manifest = export_dataset(small.subset([0]), tmp_path)
        first = manifest.read_text().split("\t")[0]
        (tmp_path / first).unlink()
        with pytest.raises(ManifestError, match="missing file"):
            load_manifest(manifest)

    def test_single_channel_replicated_and_resized(self, tmp_path):
        img = np.random.default_rng(0).uniform(size=(16, 16, 1))
        for tag in ("r", "d", "i"):
            write_image(tmp_path / f"{tag}.bin", img)
        (tmp_path / "m.tsv").write_text("r.bin\td.bin\ti.bin\tspoof\tx\t7\n")
        ds = load_manifest(tmp_path / "m.tsv", image_size=32).materialize()
        assert ds.images["D"].shape == (1, 32, 32, 3)
        assert np.array_equal(ds.images["D"][0, ..., 0], ds.images["D"][0, ..., 2])
        assert ds.labels[0] == 1

    def test_image_container(self, tmp_path):
        img = np.arange(24.0).reshape(2, 4, 3)
        write_image(tmp_path / "x.bin", img)
        assert np.array_equal(read_image(tmp_path / "x.bin"), img)
        raw = (tmp_path / "x.bin").read_bytes()
        assert int.from_bytes(raw[:8], "little") == 2

    def test_png_records(self, tmp_path):
        Image = pytest.importorskip("PIL.Image")
        px = (np.arange(64).reshape(8, 8) * 4).astype(np.uint8)
        for tag in ("r", "d", "i"):
            Image.fromarray(px).save(tmp_path / f"{tag}.png")
        (tmp_path / "m.tsv").write_text("r.png\td.png\ti.png\tlive\tx\t1\n")
        ds = load_manifest(tmp_path / "m.tsv", image_size=8).materialize()
        np.testing.assert_allclose(ds.images["I"][0, ..., 1], px / 255.0)
