import json

import numpy as np
import pytest

from gsadrive.data import (
    COLORS,
    DatasetError,
    DatasetManifest,
    FormatError,
    SceneObject,
    batches,
    build_split,
    generate_scene,
    generate_split,
    label_scene,
    read_dataset,
    read_regions,
    read_split,
    region_features_for,
    render_scene,
    synthesize,
    write_dataset,
)
from gsadrive.labels import EXPLANATIONS, N_ACTIONS, N_EXPLANATIONS, LabelPair
from gsadrive.network import Extractor, extract_features


def check_rules(image, patch=4):
    """Independent rule checker that reads the rendered pixels, not the object list."""
    size = image.shape[0]
    grid = size // patch
    centers = image[patch // 2::patch, patch // 2::patch]  # one pixel per patch

    def is_color(tag):
        return np.all(np.abs(centers - np.array(COLORS[tag])) < 0.06, axis=2)

    green = is_color("light_green")[:2].any()
    red = is_color("light_red")[:2].any()
    car, person = is_color("car"), is_color("person")
    ego_cols = np.flatnonzero(is_color("ego")[2:].all(axis=0))
    pivot = (ego_cols[0] + 0.5) if len(ego_cols) else grid / 2.0

    obstacle_cols = np.flatnonzero((car | person).any(axis=0))
    left = any(c + 0.5 < pivot for c in obstacle_cols)
    right = any(c + 0.5 > pivot for c in obstacle_cols)
    has_person, has_car = person.any(), car.any()

    actions = [
        int(not red and not has_person),
        int(red or has_person),
        int(not left),
        int(not right),
    ]
    reasons = [0] * 21
    reasons[0] = int(green)
    reasons[2] = int(green and not (has_car or has_person))
    reasons[3] = int(red)
    reasons[5] = int(has_car)
    reasons[6] = int(has_person)
    reasons[10] = int(left)
    reasons[16] = int(right)
    return actions, reasons


class TestLabelSchema:
    def test_table_cardinalities(self):
        assert N_ACTIONS == 4 and N_EXPLANATIONS == 21
        assert EXPLANATIONS[0] == "Traffic light is green"
        assert EXPLANATIONS[3] == "Traffic light is red"
        assert EXPLANATIONS[20] == "Front car turning right"
        assert EXPLANATIONS[13] == EXPLANATIONS[19] == "Traffic light allows"

    def test_bad_lengths(self):
        with pytest.raises(ValueError):
            LabelPair((1, 0, 0), (0,) * 21)
        with pytest.raises(ValueError):
            LabelPair((1, 0, 0, 2), (0,) * 21)


class TestRules:
    def test_green_only(self):
        lp = label_scene([SceneObject("light_green", (8, 0, 12, 8))], 32)
        assert list(lp.actions) == [1, 0, 1, 1]
        assert {i for i, b in enumerate(lp.explanations) if b} == {0, 2}

    def test_red_light(self):
        lp = label_scene([SceneObject("light_red", (8, 0, 12, 8))], 32)
        assert lp.actions[1] == 1 and lp.actions[0] == 0
        assert lp.explanations[3] == 1

    def test_red_light_implies_stop(self):
        for seed in range(500):
            scene = generate_scene(np.random.default_rng(seed))
            if scene.labels.explanations[3]:
                assert scene.labels.actions[1] == 1

    def test_relativity_flips_with_ego_column(self):
        obstacle = SceneObject("car", (12, 16, 20, 24))
        left_of_ego = label_scene([SceneObject("ego", (24, 8, 28, 32)), obstacle], 32)
        right_of_ego = label_scene([SceneObject("ego", (4, 8, 8, 32)), obstacle], 32)
        assert (left_of_ego.actions[2], left_of_ego.actions[3]) == (0, 1)
        assert (right_of_ego.actions[2], right_of_ego.actions[3]) == (1, 0)
        assert (left_of_ego.explanations[10], left_of_ego.explanations[16]) == (1, 0)
        assert (right_of_ego.explanations[10], right_of_ego.explanations[16]) == (0, 1)
        # identical obstacle pixels in both renderings
        a = render_scene([SceneObject("ego", (24, 8, 28, 32)), obstacle])
        b = render_scene([SceneObject("ego", (4, 8, 8, 32)), obstacle])
        np.testing.assert_array_equal(a[16:24, 12:20], b[16:24, 12:20])

    @pytest.mark.parametrize("family", ["basic", "relativity"])
    def test_independent_checker_agrees(self, family):
        for seed in range(5000):
            scene = generate_scene(np.random.default_rng([seed, 99]), family)
            actions, reasons = check_rules(scene.image)
            assert list(scene.labels.actions) == actions, seed
            assert list(scene.labels.explanations) == reasons, seed

    def test_objects_in_bounds(self):
        for seed in range(300):
            scene = generate_scene(np.random.default_rng(seed), "relativity")
            for obj in scene.objects:
                x0, y0, x1, y1 = obj.box
                assert 0 <= x0 < x1 <= 32 and 0 <= y0 < y1 <= 32
            assert 0.0 <= scene.image.min() and scene.image.max() <= 1.0

    def test_generator_is_deterministic(self):
        a = generate_scene(np.random.default_rng(4), "relativity")
        b = generate_scene(np.random.default_rng(4), "relativity")
        np.testing.assert_array_equal(a.image, b.image)
        assert a.labels == b.labels and a.objects == b.objects

    def test_unknown_family(self):
        with pytest.raises(ValueError):
            generate_scene(np.random.default_rng(0), "night")


class TestRegions:
    def test_empty_scene_has_whole_image_region(self):
        ex = Extractor.from_seed(0, 4, 8)
        scene = generate_scene(np.random.default_rng(0))
        scene.objects = []
        r = region_features_for(scene, ex)
        assert len(r) == 1
        assert r.boxes[0].tolist() == [0, 0, 32, 32]

    def test_whole_image_box_is_mean_of_rows(self):
        ex = Extractor.from_seed(0, 4, 8)
        scene = generate_scene(np.random.default_rng(1))
        r = region_features_for(scene, ex)
        np.testing.assert_allclose(r.features[-1], extract_features(scene.image, ex).mean(axis=0), rtol=1e-12)

    def test_disjoint_blocks_distinct_and_reproducible(self):
        ex = Extractor.from_seed(5, 4, 16)
        objs = [SceneObject("car", (0, 8, 8, 16)), SceneObject("person", (16, 16, 24, 24))]
        scene = generate_scene(np.random.default_rng(0))
        scene.objects = objs
        scene.image = render_scene(objs)
        a = region_features_for(scene, ex)
        b = region_features_for(scene, Extractor.from_seed(5, 4, 16))
        np.testing.assert_array_equal(a.features, b.features)
        assert not np.allclose(a.features[0], a.features[1])
        assert a.features.shape == (3, 16)


class TestBatches:
    def test_sizes(self):
        assert [len(b) for b in batches(25, 10, 0, 0)] == [10, 10, 5]

    def test_deterministic(self):
        a, b = batches(40, 7, 3, 2), batches(40, 7, 3, 2)
        assert all(np.array_equal(x, y) for x, y in zip(a, b))

    def test_epochs_differ(self):
        orders = {tuple(np.concatenate(batches(50, 10, 1, e))) for e in range(5)}
        assert len(orders) == 5

    def test_covers_every_index_once(self):
        assert sorted(np.concatenate(batches(23, 4, 0, 0)).tolist()) == list(range(23))

    def test_rejects_zero_batch(self):
        with pytest.raises(ValueError):
            batches(5, 0, 0, 0)


class TestPersistence:
    def make(self, tmp_path, n=(10, 3, 3), family="basic"):
        m = DatasetManifest(seed=3, family=family, splits=dict(zip(("train", "val", "test"), n)), feat=8)
        synthesize(tmp_path, m)
        return m

    def test_round_trip(self, tmp_path):
        m = self.make(tmp_path)
        scenes = generate_split(m, "train")
        split = read_split(tmp_path, "train")
        assert len(split) == 10
        for i, s in enumerate(scenes):
            assert split.actions[i].tolist() == list(s.labels.actions)
            assert split.explanations[i].tolist() == list(s.labels.explanations)
            assert np.abs(split.images[i] - s.image).max() <= 1 / 255

    def test_in_memory_split_matches_disk(self, tmp_path):
        m = self.make(tmp_path, family="relativity")
        disk = read_split(tmp_path, "val")
        mem = build_split(generate_split(m, "val"), m.extractor(), "val")
        assert disk.ids == mem.ids
        np.testing.assert_array_equal(disk.features, mem.features)
        for a, b in zip(disk.regions, mem.regions):
            np.testing.assert_array_equal(a.features, b.features)
            np.testing.assert_array_equal(a.boxes, b.boxes)

    def test_split_counts(self, tmp_path):
        m = DatasetManifest(seed=0, splits={"train": 20, "val": 5, "test": 5}, feat=4)
        synthesize(tmp_path, m)
        _, splits = read_dataset(tmp_path)
        assert {k: len(v) for k, v in splits.items()} == {"train": 20, "val": 5, "test": 5}

    def test_label_record_format(self, tmp_path):
        self.make(tmp_path)
        line = (tmp_path / "train" / "labels.jsonl").read_text().splitlines()[0]
        rec = json.loads(line)
        assert set(rec) == {"id", "image", "actions", "reasons"}
        assert len(rec["actions"]) == 4 and len(rec["reasons"]) == 21
        assert (tmp_path / "train" / rec["image"]).read_bytes().startswith(b"P6\n32 32\n255\n")

    def test_regeneration_is_identical(self, tmp_path):
        self.make(tmp_path / "a")
        self.make(tmp_path / "b")
        for split in ("train", "val", "test"):
            assert (tmp_path / "a" / split / "labels.jsonl").read_bytes() == \
                (tmp_path / "b" / split / "labels.jsonl").read_bytes()

    def test_malformed_line_reports_line_number(self, tmp_path):
        self.make(tmp_path)
        path = tmp_path / "train" / "labels.jsonl"
        lines = path.read_text().splitlines()
        lines[2] = lines[2][:-5]
        path.write_text("\n".join(lines) + "\n")
        with pytest.raises(FormatError, match=r"labels.jsonl:3"):
            read_split(tmp_path, "train")

    def test_truncated_region_file(self, tmp_path):
        self.make(tmp_path)
        path = tmp_path / "train" / "regions" / "train-00000.rgf"
        path.write_bytes(path.read_bytes()[:-3])
        with pytest.raises(FormatError, match="train-00000.rgf"):
            read_split(tmp_path, "train")

    def test_region_magic_mismatch(self, tmp_path):
        self.make(tmp_path)
        path = tmp_path / "val" / "regions" / "val-00001.rgf"
        path.write_bytes(b"XXXX" + path.read_bytes()[4:])
        with pytest.raises(FormatError, match="magic"):
            read_regions(path)

    def test_region_header_layout(self, tmp_path):
        self.make(tmp_path)
        raw = (tmp_path / "train" / "regions" / "train-00000.rgf").read_bytes()
        assert raw[:4] == b"RGF1"
        n, f = int.from_bytes(raw[4:8], "little"), int.from_bytes(raw[8:12], "little")
        assert f == 8 and len(raw) == 16 + n * (16 + 4 * f)

    def test_incompatible_manifest_refused(self, tmp_path):
        self.make(tmp_path)
        other = DatasetManifest(seed=4, splits={"train": 10, "val": 3, "test": 3}, feat=8)
        with pytest.raises(DatasetError):
            write_dataset(tmp_path, other, {})

    def test_missing_manifest(self, tmp_path):
        with pytest.raises(DatasetError):
            read_dataset(tmp_path)

    def test_manifest_validation(self):
        with pytest.raises(DatasetError):
            DatasetManifest(splits={"train": 0, "val": 1, "test": 1})
        with pytest.raises(DatasetError):
            DatasetManifest(image_size=30, patch=4)
