#!/usr/bin/env python3
"""
Test script for the synthetic scene generator

Tests:
1. A fixed seed reproduces annotations and pixels exactly
2. One person with one overlapping object gives one interactive pair
3. The crowded fraction follows the profile
4. Annotation files survive save -> load unchanged
5. Schema violations name the offending path
6. Hard-case tags follow their thresholds
7. Part boxes stay inside their person box
8. Impossible profiles are rejected
"""

import json
import sys
import tempfile
from pathlib import Path

import numpy as np
import pytest

# Add current directory to path for imports
sys.path.insert(0, str(Path(__file__).parent))

from mask_geometry import Box
from scene_synth import (
    CROWDED_PAIRS, Interaction, ObjectAnnotation, ProfileError, SceneAnnotation,
    SchemaError, SynthProfile, dumps_annotations, generate_dataset, generate_scene,
    load_annotations, make_person, parse_annotations, save_annotations, tag_hard_cases,
)
from utils import get_env_bool

SINGLE_PAIR_PROFILE = SynthProfile(min_persons=1, max_persons=1, max_objects=1,
                                   crowded_rate=0.0, sparse_pairs=(1, 1))


def test_determinism():
    """Test the same seed yields byte-identical annotations and images"""
    print("=" * 60)
    print("Test 1: Determinism")
    print("=" * 60)

    scene_a, image_a = generate_scene(123)
    scene_b, image_b = generate_scene(123)
    assert dumps_annotations([scene_a]) == dumps_annotations([scene_b])
    assert image_a.dtype == np.uint8
    assert image_a.shape == (scene_a.height, scene_a.width, 3)
    assert image_a.tobytes() == image_b.tobytes()

    other, _ = generate_scene(124, render=False)
    assert dumps_annotations([other]) != dumps_annotations([scene_a])

    serial = generate_dataset(6, root_seed=5)
    pooled = generate_dataset(6, root_seed=5, workers=2)
    assert dumps_annotations(serial) == dumps_annotations(pooled), "Worker count changed the dataset"
    assert [s.id for s in generate_dataset(3, root_seed=5, offset=10)] == [10, 11, 12]

    print("✓ Determinism test passed\n")


def test_single_interaction():
    """Test one person and one object placed on a part interact"""
    print("=" * 60)
    print("Test 2: Single Interaction")
    print("=" * 60)

    for seed in range(20):
        scene, _ = generate_scene(seed, SINGLE_PAIR_PROFILE, render=False)
        assert len(scene.persons) == 1
        assert len(scene.objects) == 1
        pairs = scene.interactive_pairs()
        assert len(pairs) == 1, f"seed {seed}: {len(pairs)} interactive pairs"
        assert pairs[0].verbs.count(1) >= 1
        assert any(pairs[0].part_labels)

    print("✓ Single interaction test passed\n")


def _crowded_fraction(count: int, root_seed: int) -> float:
    scenes = generate_dataset(count, root_seed=root_seed)
    return sum(len(s.interactive_pairs()) >= CROWDED_PAIRS for s in scenes) / count


def test_crowded_rate():
    """Test the share of crowded scenes tracks crowded_rate"""
    print("=" * 60)
    print("Test 3: Crowded Rate")
    print("=" * 60)

    rate = SynthProfile().crowded_rate
    fraction = _crowded_fraction(400, root_seed=0)
    print(f"Crowded fraction: {fraction:.3f} (profile {rate})")
    assert abs(fraction - rate) <= 0.08

    print("✓ Crowded rate test passed\n")


@pytest.mark.slow
@pytest.mark.skipif(not get_env_bool("PARTINT_RUN_SLOW"), reason="set PARTINT_RUN_SLOW=1")
def test_crowded_rate_large():
    """Test the crowded share over 1000 scenes stays within 5 points"""
    fraction = _crowded_fraction(1000, root_seed=1)
    assert abs(fraction - SynthProfile().crowded_rate) <= 0.05


def test_save_load_roundtrip():
    """Test load(save(scenes)) == scenes and the text is canonical"""
    print("=" * 60)
    print("Test 4: Save / Load")
    print("=" * 60)

    scenes = generate_dataset(8, root_seed=3)
    with tempfile.TemporaryDirectory() as tmpdir:
        path = save_annotations(scenes, Path(tmpdir) / "nested" / "train.json")
        loaded = load_annotations(path)
        assert loaded == scenes
        assert path.read_text(encoding="utf-8") == dumps_annotations(loaded)

        with pytest.raises(FileNotFoundError):
            load_annotations(Path(tmpdir) / "missing.json")

        broken = Path(tmpdir) / "broken.json"
        broken.write_text('{"schema": 1, "images": [')
        with pytest.raises(SchemaError, match="malformed JSON"):
            load_annotations(broken)

    print("✓ Save / load test passed\n")


def test_schema_errors():
    """Test violations are reported with their document path"""
    print("=" * 60)
    print("Test 5: Schema Errors")
    print("=" * 60)

    scene, _ = generate_scene(11, SINGLE_PAIR_PROFILE, render=False)
    clean = json.loads(dumps_annotations([scene]))

    doc = json.loads(json.dumps(clean))
    doc['images'][0]['persons'][0]['bbox'][1] = -1.0
    with pytest.raises(SchemaError) as excinfo:
        parse_annotations(doc)
    assert excinfo.value.path == "images[0].persons[0].bbox[1]"
    assert "images[0].persons[0].bbox[1]" in str(excinfo.value)

    doc = json.loads(json.dumps(clean))
    doc['schema'] = 2
    with pytest.raises(SchemaError, match="version mismatch"):
        parse_annotations(doc)

    doc = json.loads(json.dumps(clean))
    doc['images'][0]['objects'][0]['color'] = "red"
    with pytest.raises(SchemaError, match="unknown field"):
        parse_annotations(doc)

    doc = json.loads(json.dumps(clean))
    doc['images'][0]['interactions'][0]['interactive'] = False
    with pytest.raises(SchemaError, match="OR of the verbs"):
        parse_annotations(doc)

    doc = json.loads(json.dumps(clean))
    doc['images'][0]['interactions'][0]['object'] = 5
    with pytest.raises(SchemaError) as excinfo:
        parse_annotations(doc)
    assert excinfo.value.path == "images[0].interactions[0].object"

    for bad_id in ("11", 1.5, -1, True):
        doc = json.loads(json.dumps(clean))
        doc['images'][0]['id'] = bad_id
        with pytest.raises(SchemaError) as excinfo:
            parse_annotations(doc)
        assert excinfo.value.path == "images[0].id", f"id {bad_id!r}"

    print("✓ Schema error test passed\n")


def _tagged_scene(person_box: Box, pair_count: int, joint_confidence: float) -> SceneAnnotation:
    person = make_person(person_box, 100, 100)
    person.joint_confidence = joint_confidence
    objects = [ObjectAnnotation(Box(0.0, 0.0, 5.0, 5.0), 1) for _ in range(pair_count)]
    interactions = [Interaction(0, j, [1, 0, 0, 0], True) for j in range(pair_count)]
    return SceneAnnotation(0, 100, 100, [person], objects, interactions)


def test_hard_case_tags():
    """Test crowded, tiny and occlusion tags at their thresholds"""
    print("=" * 60)
    print("Test 6: Hard-Case Tags")
    print("=" * 60)

    big = Box(0.0, 0.0, 40.0, 100.0)

    tags = tag_hard_cases(_tagged_scene(big, 3, 1.0))
    assert tags.crowded is True
    assert tags.interactive_pair_count == 3
    assert tags.tiny is False

    assert tag_hard_cases(_tagged_scene(big, 2, 1.0)).crowded is False

    tiny = tag_hard_cases(_tagged_scene(Box(0.0, 0.0, 10.0, 50.0), 1, 1.0))
    assert tiny.min_area_ratio == pytest.approx(0.05)
    assert tiny.tiny is True

    assert tag_hard_cases(_tagged_scene(big, 1, 0.7)).occluded == "low"
    assert tag_hard_cases(_tagged_scene(big, 1, 0.4)).occluded == "mid"
    assert tag_hard_cases(_tagged_scene(big, 1, 0.1)).occluded == "high"

    empty = tag_hard_cases(_tagged_scene(big, 0, 1.0))
    assert empty.min_area_ratio is None
    assert empty.tiny is False
    assert set(empty.to_dict()) == {'crowded', 'tiny', 'occluded', 'person_count',
                                    'interactive_pair_count', 'min_area_ratio',
                                    'mean_joint_confidence'}

    nobody = tag_hard_cases(SceneAnnotation(4, 100, 100))
    assert nobody.occluded == "n/a" and nobody.mean_joint_confidence is None
    assert nobody.person_count == 0 and nobody.crowded is False

    print("✓ Hard-case tag test passed\n")


def test_parts_inside_person():
    """Test every generated part box lies inside its person box"""
    print("=" * 60)
    print("Test 7: Part Containment")
    print("=" * 60)

    for scene in generate_dataset(30, root_seed=9):
        for person in scene.persons:
            assert 0.0 <= person.joint_confidence <= 1.0
            for boxes in person.parts.values():
                for box in boxes:
                    assert person.bbox.contains(box), f"scene {scene.id}: {box} outside {person.bbox}"
        for it in scene.interactions:
            assert it.interactive == any(it.verbs)

    print("✓ Part containment test passed\n")


def test_profile_validation():
    """Test profiles that cannot produce a scene raise ProfileError"""
    print("=" * 60)
    print("Test 8: Profile Validation")
    print("=" * 60)

    with pytest.raises(ProfileError, match="Person range"):
        SynthProfile(min_persons=3, max_persons=2).validate()
    with pytest.raises(ProfileError, match="do not fit"):
        SynthProfile(width=64, height=64, min_person_height=80.0).validate()
    with pytest.raises(ProfileError, match="max_pairs"):
        SynthProfile(max_pairs=2).validate()
    with pytest.raises(ProfileError, match="Crowded scenes"):
        SynthProfile(max_objects=2).validate()
    with pytest.raises(ProfileError):
        generate_scene(0, SynthProfile(sparse_pairs=(2, 1)))

    SynthProfile(max_pairs=2, crowded_rate=0.0).validate()

    print("✓ Profile validation test passed\n")


def main():
    """Run all tests"""
    print("\n" + "=" * 60)
    print("partint Scene Synthesis Test Suite")
    print("=" * 60)
    print()

    try:
        test_determinism()
        test_single_interaction()
        test_crowded_rate()
        test_save_load_roundtrip()
        test_schema_errors()
        test_hard_case_tags()
        test_parts_inside_person()
        test_profile_validation()

        print("=" * 60)
        print("✓ All tests passed!")
        print("=" * 60)
        return 0

    except AssertionError as e:
        print(f"\n✗ Test failed: {e}")
        import traceback
        traceback.print_exc()
        return 1


if __name__ == '__main__':
    sys.exit(main())
