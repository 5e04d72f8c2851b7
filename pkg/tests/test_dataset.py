import json
import os
from collections import Counter

import numpy as np
import pytest

from mrverify.dataset import (
    COLLISION_IOU,
    AnnotatedImage,
    DatasetConfig,
    OverlayFilter,
    ShiftSpec,
    Split,
    alignment_grid,
    build_dataset,
    generate_pair,
    generate_samples,
    load_manifest,
    load_sources,
    rasterize_polygon,
    read_yolo_annotations,
    write_annotated_images,
)
from mrverify.errors import ChecksumMismatch, InsufficientSources, ManifestCorrupt, MissingFile, UnshiftableInstance
from mrverify.imaging import Frame, Mask, Region, binary_filter
from mrverify.segmentation import InstanceLabel
from mrverify.verification import iou
from tests.conftest import small_sources


def same_pair(a, b) -> bool:
    return (
        a.reference == b.reference
        and a.target == b.target
        and a.layer == b.layer
        and a.reference_mask == b.reference_mask
        and (a.step_class, a.step_index, a.ground_truth, a.model_id, a.instance_index, a.shift)
        == (b.step_class, b.step_index, b.ground_truth, b.model_id, b.instance_index, b.shift)
    )


class TestGeneration:
    def test_deterministic(self, sources):
        config = DatasetConfig(seed=21)
        first = generate_samples(sources, 10, Split.TEST, config)
        second = generate_samples(sources, 10, Split.TEST, config)
        assert all(same_pair(a, b) for a, b in zip(first, second))

    def test_splits_differ(self, sources):
        config = DatasetConfig(seed=21)
        val = generate_samples(sources, 10, Split.VAL, config)
        test = generate_samples(sources, 10, Split.TEST, config)
        assert not all(same_pair(a, b) for a, b in zip(val, test))

    def test_balanced(self, sources):
        pairs = generate_samples(sources, 30, Split.VAL, DatasetConfig(seed=2))
        assert sum(p.ground_truth for p in pairs) == 15
        assert [p.step_index for p in pairs] == list(range(30))
        per_class = Counter(p.step_class for p in pairs)
        assert max(per_class.values()) - min(per_class.values()) <= 1

    def test_positive_pairs(self, sources):
        for pair in generate_samples(sources, 12, Split.TEST, DatasetConfig(positive_fraction=1.0, seed=4)):
            instance = sources[pair.model_id].instances[pair.instance_index]
            assert pair.shift == (0, 0)
            assert pair.reference_mask == instance.mask
            assert binary_filter(pair.layer) == pair.reference_mask
            outside = ~pair.reference_mask.bits
            assert np.array_equal(pair.reference.pixels[outside], pair.target.pixels[outside])

    def test_negative_pairs(self, sources):
        for pair in generate_samples(sources, 12, Split.TEST, DatasetConfig(positive_fraction=0.0, seed=4)):
            source = sources[pair.model_id]
            assert pair.shift != (0, 0)
            assert binary_filter(pair.layer) == pair.reference_mask
            for other in source.instances:
                if other.class_id == pair.step_class:
                    assert iou(pair.reference_mask, other.mask) <= COLLISION_IOU

    def test_alignment_points(self, sources):
        pair = generate_samples(sources, 1, Split.TEST, DatasetConfig(alignment_points=6))[0]
        ref, tgt = pair.alignment_points
        assert ref.shape == (6, 2)
        assert np.array_equal(ref, tgt)

    def test_no_sources(self):
        with pytest.raises(InsufficientSources):
            generate_samples([], 4, Split.TEST, DatasetConfig())

    def test_source_without_instances(self):
        with pytest.raises(InsufficientSources):
            generate_samples([AnnotatedImage(Frame.blank(10, 10), (), "bare")], 4, Split.TEST, DatasetConfig())

    def test_unshiftable_instance(self):
        region = Region(2, 2, 16, 16)
        instance = InstanceLabel(0, Mask.from_region(20, 20, region), region)
        source = AnnotatedImage(Frame.blank(20, 20, (90, 90, 90)), (instance,), "big")
        with pytest.raises(UnshiftableInstance):
            generate_pair(source, instance, False, OverlayFilter(), ShiftSpec(), 0)
        assert generate_pair(source, instance, True, OverlayFilter(), ShiftSpec(), 0).ground_truth

    def test_crowded_same_class(self):
        """Every in-bounds shift lands on a twin instance."""

        a = Region(0, 0, 10, 10)
        b = Region(10, 10, 10, 10)
        labels = tuple(InstanceLabel(0, Mask.from_region(20, 20, r), r) for r in (a, b))
        source = AnnotatedImage(Frame.blank(20, 20, (90, 90, 90)), labels, "twins")
        with pytest.raises(UnshiftableInstance):
            generate_pair(source, labels[0], False, OverlayFilter(), ShiftSpec(1.0, 1.0), 0)

    def test_filter_bounds(self):
        with pytest.raises(ValueError):
            OverlayFilter(tint_alpha=1.5)
        with pytest.raises(ValueError):
            DatasetConfig(alignment_points=3)
        with pytest.raises(ValueError):
            ShiftSpec(0.0, 1.0)

    def test_alignment_grid(self):
        grid = alignment_grid((101, 51), 8)
        assert grid.shape == (8, 2)
        assert grid[0].tolist() == [20.0, 10.0]
        with pytest.raises(ValueError):
            alignment_grid((10, 10), 3)


class TestManifest:
    def test_roundtrip(self, manifests, sources):
        config = DatasetConfig(name="tiny", val_count=8, test_count=12, seed=11)
        manifest = load_manifest(os.path.join(manifests[Split.TEST].root, "test.json"))
        assert len(manifest) == 12
        assert manifest.split == Split.TEST
        expected = generate_samples(sources, 12, Split.TEST, config)
        for index, pair in enumerate(manifest.pairs()):
            assert same_pair(pair, expected[index]), f"sample {index}"

    def test_ground_truth(self, test_manifest, sources):
        labels = test_manifest.ground_truth()
        assert sorted(labels) == list(range(len(sources)))
        for model_id, instances in labels.items():
            assert [i.mask for i in instances] == [i.mask for i in sources[model_id].instances]

    @pytest.fixture
    def dataset(self, tmp_path):
        build_dataset(small_sources(2, seed=8), DatasetConfig(val_count=0, test_count=4, seed=1), str(tmp_path))
        return tmp_path

    def test_missing_file(self, dataset):
        os.remove(dataset / "test" / "0002_layer.png")
        with pytest.raises(MissingFile) as e:
            load_manifest(str(dataset / "test.json"))
        assert e.value.sample == 2

    def test_checksum_mismatch(self, dataset):
        path = dataset / "test" / "0001_reference.png"
        data = bytearray(path.read_bytes())
        data[-20] ^= 0xFF
        path.write_bytes(bytes(data))
        with pytest.raises(ChecksumMismatch) as e:
            load_manifest(str(dataset / "test.json"))
        assert e.value.sample == 1

    def test_corrupt_json(self, dataset):
        (dataset / "test.json").write_text("{not json")
        with pytest.raises(ManifestCorrupt):
            load_manifest(str(dataset / "test.json"))

    def test_schema_version(self, dataset):
        doc = json.loads((dataset / "test.json").read_text())
        doc["schema_version"] = 99
        (dataset / "test.json").write_text(json.dumps(doc))
        with pytest.raises(ManifestCorrupt):
            load_manifest(str(dataset / "test.json"))

    def test_missing_manifest(self, tmp_path):
        with pytest.raises(MissingFile):
            load_manifest(str(tmp_path / "absent.json"))


class TestIngestion:
    def test_polygon_roundtrip(self, tmp_path):
        original = small_sources(3, seed=5)
        write_annotated_images(original, str(tmp_path))
        loaded = load_sources(str(tmp_path))
        assert [s.source_id for s in loaded] == [s.source_id for s in original]
        for a, b in zip(loaded, original):
            assert a.image == b.image
            assert [(i.class_id, i.mask) for i in a.instances] == [(i.class_id, i.mask) for i in b.instances]

    def test_rasterize_triangle(self):
        mask = rasterize_polygon([(0, 0), (9, 0), (0, 9)], (10, 10))
        assert mask.bits[0].all() and mask.bits[:, 0].all()
        assert not mask.bits[9, 9]

    def test_yolo_labels(self, tmp_path):
        os.makedirs(tmp_path / "images")
        os.makedirs(tmp_path / "labels")
        Frame.blank(11, 11, (50, 60, 70)).to_image().save(tmp_path / "images" / "a.png")
        (tmp_path / "labels" / "a.txt").write_text("2 0 0 1 0 1 1 0 1\n\n")
        [source] = load_sources(str(tmp_path))
        assert source.source_id == "a"
        assert source.instances[0].class_id == 2
        assert source.instances[0].mask.count() == 121

    def test_yolo_bad_line(self, tmp_path):
        Frame.blank(8, 8).to_image().save(tmp_path / "b.png")
        (tmp_path / "b.txt").write_text("1 0.5 0.5\n")
        with pytest.raises(ManifestCorrupt):
            read_yolo_annotations(str(tmp_path / "b.png"), str(tmp_path / "b.txt"))

    def test_missing_directory(self, tmp_path):
        with pytest.raises(InsufficientSources):
            load_sources(str(tmp_path / "nowhere"))
        with pytest.raises(InsufficientSources):
            load_sources(str(tmp_path))
