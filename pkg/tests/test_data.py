import io

import numpy as np
import pytest
from PIL import Image

from tripletloop.data import (
    PATHOLOGIES,
    ImageDecodeError,
    ManifestRowError,
    ManifestSchemaError,
    PreprocessConfig,
    SyntheticSpec,
    generate_synthetic_dataset,
    load_dataset_dir,
    load_manifest,
    pathology_index,
    preprocess_array,
    preprocess_image,
    split_dataset,
    write_dataset,
)


def _png_bytes(size=64, value=128, mode="L"):
    arr = np.full((size, size), value, dtype=np.uint8)
    img = Image.fromarray(arr, mode="L")
    if mode == "RGB":
        img = img.convert("RGB")
    buf = io.BytesIO()
    img.save(buf, format="PNG")
    return buf.getvalue()


def _write_manifest(tmp_path, rows, columns=None):
    columns = columns or ["Path", *PATHOLOGIES]
    lines = [",".join(columns)]
    for row in rows:
        lines.append(",".join(row))
    path = tmp_path / "manifest.csv"
    path.write_text("\n".join(lines) + "\n")
    return path


class TestPathologies:
    def test_fourteen_distinct_names(self):
        assert len(PATHOLOGIES) == 14
        assert len(set(PATHOLOGIES)) == 14

    def test_index_aliases(self):
        assert pathology_index("Cardiomegaly") == 2
        assert pathology_index("P2") == 2
        with pytest.raises(KeyError):
            pathology_index("P99")
        with pytest.raises(KeyError):
            pathology_index("Flu")


class TestManifest:
    def _one_row_manifest(self, tmp_path, **labels):
        (tmp_path / "img.png").write_bytes(_png_bytes())
        values = {name: "" for name in PATHOLOGIES}
        values.update(labels)
        return _write_manifest(tmp_path, [["img.png"] + [values[n] for n in PATHOLOGIES]])

    def test_positive_label_maps_to_positive(self, tmp_path):
        path = self._one_row_manifest(tmp_path, Cardiomegaly="1.0")
        records = load_manifest(path, cfg=PreprocessConfig(resize_to=64, crop_to=64))
        assert records[0].labels[pathology_index("Cardiomegaly")] == 1

    def test_uncertain_maps_per_policy(self, tmp_path):
        path = self._one_row_manifest(tmp_path, Edema="-1.0")
        cfg = PreprocessConfig(resize_to=64, crop_to=64)
        assert load_manifest(path, cfg=cfg)[0].labels[pathology_index("Edema")] == 0
        assert load_manifest(path, "positive", cfg=cfg)[0].labels[pathology_index("Edema")] == 1

    def test_blank_cells_map_to_negative(self, tmp_path):
        path = self._one_row_manifest(tmp_path)
        records = load_manifest(path, cfg=PreprocessConfig(resize_to=64, crop_to=64))
        assert records[0].labels.sum() == 0

    def test_missing_column_is_schema_error(self, tmp_path):
        columns = ["Path"] + [n for n in PATHOLOGIES if n != "Fracture"]
        path = _write_manifest(tmp_path, [], columns=columns)
        with pytest.raises(ManifestSchemaError, match="Fracture"):
            load_manifest(path)

    def test_unparseable_cell_reports_row(self, tmp_path):
        (tmp_path / "img.png").write_bytes(_png_bytes())
        row = ["img.png"] + ["0.0"] * 14
        row[1 + pathology_index("Edema")] = "maybe"
        path = _write_manifest(tmp_path, [row])
        with pytest.raises(ManifestRowError) as err:
            load_manifest(path, cfg=PreprocessConfig(resize_to=64, crop_to=64))
        assert err.value.row == 0
        assert err.value.column == "Edema"

    def test_labels_always_fourteen_binary(self, tmp_path):
        (tmp_path / "img.png").write_bytes(_png_bytes())
        rows = [["img.png"] + ["1.0", "0.0", "-1.0", ""] * 3 + ["1.0", "0.0"]]
        path = _write_manifest(tmp_path, rows)
        rec = load_manifest(path, cfg=PreprocessConfig(resize_to=64, crop_to=64))[0]
        assert rec.labels.shape == (14,)
        assert set(np.unique(rec.labels)) <= {0, 1}


class TestPreprocess:
    def test_large_grayscale_to_default_crop(self):
        out = preprocess_image(_png_bytes(size=1024, value=90))
        assert out.shape == (3, 224, 224)
        assert out.min() >= 0.0 and out.max() <= 1.0
        assert np.allclose(out, 90 / 255.0, atol=1e-6)

    def test_grayscale_replicated_across_channels(self):
        out = preprocess_image(_png_bytes(size=300, value=40))
        assert np.array_equal(out[0], out[1]) and np.array_equal(out[1], out[2])

    def test_identity_size_preserves_content(self):
        rng = np.random.default_rng(3)
        arr = (rng.random((224, 224)) * 255).astype(np.uint8)
        buf = io.BytesIO()
        Image.fromarray(arr, mode="L").save(buf, format="PNG")
        cfg = PreprocessConfig(resize_to=224, crop_to=224)
        out = preprocess_image(buf.getvalue(), cfg)
        assert np.allclose(out[0], arr / 255.0, atol=1e-6)

    def test_invalid_crop_config_rejected(self):
        with pytest.raises(ValueError):
            PreprocessConfig(resize_to=224, crop_to=320)

    def test_undecodable_bytes(self):
        with pytest.raises(ImageDecodeError):
            preprocess_image(b"not an image at all")

    def test_array_preprocess_idempotent_at_fixed_size(self):
        rng = np.random.default_rng(5)
        pixels = rng.random((3, 64, 64)).astype(np.float32)
        cfg = PreprocessConfig(resize_to=64, crop_to=64)
        once = preprocess_array(pixels, cfg)
        twice = preprocess_array(once, cfg)
        assert np.max(np.abs(once - twice)) <= 1e-6
        assert np.max(np.abs(once - pixels)) <= 1e-6

    def test_non_finite_pixels_rejected(self):
        pixels = np.full((3, 8, 8), np.nan, dtype=np.float32)
        with pytest.raises(ValueError):
            preprocess_array(pixels, PreprocessConfig(resize_to=8, crop_to=8))


class TestSynthetic:
    def test_same_seed_is_byte_identical(self):
        spec = SyntheticSpec(seed=7)
        a = generate_synthetic_dataset(spec, 100)
        b = generate_synthetic_dataset(spec, 100)
        assert [r.image_id for r in a] == [r.image_id for r in b]
        for ra, rb in zip(a, b):
            assert ra.pixels.tobytes() == rb.pixels.tobytes()
            assert np.array_equal(ra.labels, rb.labels)

    def test_marker_brighter_than_background_without_noise(self):
        spec = SyntheticSpec(noise_sigma=0.0, prevalence=0.999, seed=1, n_pathologies=1)
        rec = next(r for r in generate_synthetic_dataset(spec, 10) if r.labels[0])
        size = spec.image_size
        cy, cx = int(size * 0.125), int(size * 0.125)
        assert rec.pixels[0, cy, cx] > rec.pixels[0, size - 1, size - 1]

    def test_prevalence_within_binomial_99_interval(self):
        # 99% central interval for Binomial(1000, 0.5), from its quantile function
        spec = SyntheticSpec(prevalence=0.5, seed=11)
        records = generate_synthetic_dataset(spec, 1000)
        positives = sum(int(r.labels[0]) for r in records)
        assert 459 <= positives <= 541

    def test_invalid_spec_rejected(self):
        with pytest.raises(ValueError):
            SyntheticSpec(n_pathologies=15)
        with pytest.raises(ValueError):
            SyntheticSpec(prevalence=0.0)
        with pytest.raises(ValueError):
            generate_synthetic_dataset(SyntheticSpec(), 0)

    def test_labels_consistent_with_markers(self):
        spec = SyntheticSpec(noise_sigma=0.0, seed=3, n_pathologies=2)
        size = spec.image_size
        for rec in generate_synthetic_dataset(spec, 40):
            for k in range(2):
                cy = int(size * 0.125)
                cx = int(size * (0.125 + 0.25 * k))
                lit = rec.pixels[0, cy, cx] > spec.background + 0.3
                assert lit == bool(rec.labels[k])


class TestSplit:
    def _records(self, n=30):
        spec = SyntheticSpec(seed=2)
        return generate_synthetic_dataset(spec, n)

    def test_same_seed_reproducible(self):
        records = self._records()
        a = split_dataset(records, (0.5, 0.5), seed=4)
        b = split_dataset(records, (0.5, 0.5), seed=4)
        assert [r.image_id for r in a[0]] == [r.image_id for r in b[0]]

    def test_degenerate_fractions(self):
        records = self._records()
        train, evaluation = split_dataset(records, (1.0, 0.0), seed=0)
        assert len(train) == len(records) and evaluation == []

    def test_input_order_does_not_matter(self):
        records = self._records()
        shuffled = list(reversed(records))
        a = split_dataset(records, (0.3, 0.7), seed=9)
        b = split_dataset(shuffled, (0.3, 0.7), seed=9)
        assert [r.image_id for r in a[0]] == [r.image_id for r in b[0]]
        assert [r.image_id for r in a[1]] == [r.image_id for r in b[1]]

    def test_disjoint_and_exhaustive(self):
        records = self._records()
        train, evaluation = split_dataset(records, (0.25, 0.75), seed=1)
        train_ids = {r.image_id for r in train}
        eval_ids = {r.image_id for r in evaluation}
        assert not train_ids & eval_ids
        assert train_ids | eval_ids == {r.image_id for r in records}

    def test_empty_input_and_bad_fractions(self):
        with pytest.raises(ValueError):
            split_dataset([], (0.5, 0.5), seed=0)
        with pytest.raises(ValueError):
            split_dataset(self._records(5), (0.5, 0.4), seed=0)


class TestDatasetDir:
    def test_round_trip_pixels_and_labels(self, tmp_path):
        spec = SyntheticSpec(seed=5, noise_sigma=0.05)
        records = generate_synthetic_dataset(spec, 12)
        write_dataset(records, tmp_path / "ds", spec=spec)
        loaded, meta = load_dataset_dir(tmp_path / "ds")
        assert meta["kind"] == "synthetic"
        assert len(loaded) == 12
        for orig, back in zip(records, loaded):
            assert back.image_id == f"images/{orig.image_id}.png"
            assert np.array_equal(orig.labels, back.labels)
            assert np.max(np.abs(orig.pixels - back.pixels)) == 0.0
