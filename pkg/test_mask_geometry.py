#!/usr/bin/env python3
"""
Test script for token-grid mask geometry

Tests:
1. Box rasterization on hand-checked grids
2. Rasterization agrees with a per-token predicate (property)
3. Part masks union every person's boxes
4. Instance masks from normalized proposal boxes
5. Progressive schedule values, and layer nesting on synthesized scenes
6. Merging selected parts and the empty-selection policy error
7. Border random drop frequencies
8. Mask variants and MaskStack serialization
"""

import sys
from pathlib import Path

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

# Add current directory to path for imports
sys.path.insert(0, str(Path(__file__).parent))

from mask_geometry import (
    Box, BodyPart, GridSpec, MaskPolicyError, MaskStack, MaskVariant, NUM_PARTS,
    border_random_drop, build_instance_masks, build_part_masks, build_progressive_masks,
    decode_mask, encode_mask, merge_masks, rasterize_box,
)
from scene_synth import PersonAnnotation, SceneAnnotation, SynthProfile, generate_scene

SMALL = GridSpec(H0=64, W0=64, H=2, W=2)


def person_with(part: BodyPart, box, bbox=(0, 0, 64, 64)) -> PersonAnnotation:
    return PersonAnnotation(bbox=Box(*bbox), parts={part.key: [Box(*box)]})


def test_rasterize_examples():
    """Test rasterization on the documented small cases"""
    print("=" * 60)
    print("Test 1: Rasterization")
    print("=" * 60)

    for spec in (SMALL, GridSpec(256, 256, 8, 8), GridSpec(96, 64, 3, 2)):
        full = rasterize_box([0, 0, spec.W0, spec.H0], spec)
        assert full.shape == spec.shape
        assert full.all(), f"Full-image box should cover {spec}"

    corner = rasterize_box([0, 0, 31, 31], SMALL)
    assert corner.tolist() == [[1, 0], [0, 0]]

    # Both bounds are inclusive: 32 lands on the second row
    edge = rasterize_box(Box(0, 0, 10, 32), SMALL)
    assert edge.tolist() == [[1, 0], [1, 0]]

    inverted = rasterize_box([40, 10, 20, 50], SMALL)
    assert not inverted.any(), "Box with w2 < w1 should be empty"
    outside = rasterize_box([-30, -30, -5, -5], SMALL)
    assert not outside.any(), "Box left of the image clamps to nothing"

    print("✓ Rasterization test passed\n")


coords = st.floats(min_value=-40.0, max_value=110.0, allow_nan=False, allow_infinity=False)


@settings(max_examples=1000, deadline=None)
@given(box=st.tuples(coords, coords, coords, coords), grid=st.sampled_from([1, 2, 4, 8]))
def test_rasterize_matches_predicate(box, grid):
    """Test every token against the inclusive clamped-box predicate"""
    spec = GridSpec(64, 64, grid, grid)
    mask = rasterize_box(list(box), spec)

    w1, h1, w2, h2 = (min(max(v, 0.0), 64.0) for v in box)
    for x in range(spec.H):
        for y in range(spec.W):
            inside = h1 <= x * spec.scale_h <= h2 and w1 <= y * spec.scale_w <= w2
            assert mask[x, y] == int(inside), f"token ({x}, {y}) of {box}"


def test_part_masks():
    """Test part masks are unions over persons"""
    print("=" * 60)
    print("Test 3: Part Masks")
    print("=" * 60)

    empty = SceneAnnotation(id=0, width=64, height=64)
    masks = build_part_masks(empty, SMALL)
    assert masks.shape == (NUM_PARTS, 2, 2)
    assert not masks.any(), "Zero persons should give six empty masks"

    legs = SceneAnnotation(id=1, width=64, height=64,
                           persons=[person_with(BodyPart.LEGS, (0, 0, 64, 64))])
    masks = build_part_masks(legs, SMALL)
    assert masks[BodyPart.LEGS].all()
    assert not np.delete(masks, BodyPart.LEGS, axis=0).any()

    two = SceneAnnotation(id=2, width=64, height=64, persons=[
        person_with(BodyPart.HANDS, (0, 0, 10, 10)),
        person_with(BodyPart.HANDS, (0, 30, 10, 40)),
    ])
    masks = build_part_masks(two, SMALL)
    assert masks[BodyPart.HANDS].tolist() == [[1, 0], [1, 0]]

    print("✓ Part masks test passed\n")


def test_instance_masks():
    """Test normalized proposal boxes rasterize on the pixel grid"""
    print("=" * 60)
    print("Test 4: Instance Masks")
    print("=" * 60)

    m_hum, m_obj = build_instance_masks([0, 0, 1, 1], [0, 0, 1, 1], SMALL)
    assert m_hum.all() and np.array_equal(m_hum, m_obj)

    m_hum, m_obj = build_instance_masks([0.0, 0.0, 0.2, 0.2], [0.45, 0.45, 0.9, 0.9], SMALL)
    assert m_hum.tolist() == [[1, 0], [0, 0]]
    assert m_obj.tolist() == [[0, 0], [0, 1]]

    batch_h, batch_o = build_instance_masks(np.zeros((5, 4)), np.ones((5, 4)), SMALL)
    assert batch_h.shape == (5, 2, 2) and batch_o.shape == (5, 2, 2)

    print("✓ Instance masks test passed\n")


def test_progressive_schedule():
    """Test the three layers on a hand-evaluated 2x2 case"""
    print("=" * 60)
    print("Test 5: Progressive Schedule")
    print("=" * 60)

    parts = np.zeros((NUM_PARTS, 2, 2), dtype=np.uint8)
    parts[0] = [[1, 0], [1, 0]]
    parts[1] = [[0, 1], [0, 0]]
    m_hum = np.array([[1, 0], [0, 0]], dtype=np.uint8)
    m_obj = np.array([[0, 0], [0, 1]], dtype=np.uint8)

    layered = build_progressive_masks(parts, m_hum, m_obj)
    assert layered.shape == (3, NUM_PARTS, 2, 2)
    assert layered[0, 0].tolist() == [[1, 1], [1, 1]]
    assert layered[1, 0].tolist() == [[1, 0], [1, 1]]
    assert layered[2, 0].tolist() == [[1, 0], [0, 1]]

    # One person equal to the target and no object: m1 = m2 = part
    solo = np.zeros((NUM_PARTS, 2, 2), dtype=np.uint8)
    solo[3] = [[1, 1], [0, 0]]
    hum = np.array([[1, 1], [0, 1]], dtype=np.uint8)
    layered = build_progressive_masks(solo, hum, np.zeros_like(hum))
    assert np.array_equal(layered[0, 3], solo[3])
    assert np.array_equal(layered[1, 3], solo[3])
    assert np.array_equal(layered[2, 3], np.minimum(solo[3], hum))

    ones = np.ones((NUM_PARTS, 2, 2), dtype=np.uint8)
    assert build_progressive_masks(ones, np.ones((2, 2), np.uint8), np.zeros((2, 2), np.uint8)).all()

    with pytest.raises(ValueError, match="Mask shapes differ"):
        build_progressive_masks(ones, np.ones((3, 3), np.uint8), np.ones((3, 3), np.uint8))

    print("✓ Progressive schedule test passed\n")


def _random_box(rng, profile) -> list:
    w1, w2 = sorted(rng.uniform(0, profile.width, 2))
    h1, h2 = sorted(rng.uniform(0, profile.height, 2))
    return [w1, h1, w2, h2]


def test_progressive_layers_nest():
    """Test m3 <= m2 <= m1 and object visibility on 1000 synthesized scenes"""
    print("=" * 60)
    print("Test 5b: Layer Nesting")
    print("=" * 60)

    profile = SynthProfile(crowded_rate=0.5)
    spec = GridSpec(profile.height, profile.width, 8, 8)
    scale = np.array([profile.width, profile.height, profile.width, profile.height], dtype=np.float64)
    checked = 0
    for seed in range(1000):
        scene, _ = generate_scene(seed, profile, scene_id=seed, render=False)
        rng = np.random.default_rng(seed)
        humans = [p.bbox.to_list() for p in scene.persons] + [_random_box(rng, profile)]
        objects = [o.bbox.to_list() for o in scene.objects] + [_random_box(rng, profile)]
        pairs = [(h, o) for h in humans for o in objects]
        human_boxes = np.array([h for h, _ in pairs]) / scale
        object_boxes = np.array([o for _, o in pairs]) / scale

        m_hum, m_obj = build_instance_masks(human_boxes, object_boxes, spec)
        layered = build_progressive_masks(build_part_masks(scene, spec), m_hum, m_obj)   # (P, 3, 6, H, W)
        m1, m2, m3 = layered[:, 0], layered[:, 1], layered[:, 2]
        assert np.all(m3 <= m2) and np.all(m2 <= m1), f"scene {seed}"
        assert np.all(m3 >= m_obj[:, None]), f"scene {seed}"
        checked += layered.shape[0] * NUM_PARTS
    print(f"Checked {checked} (proposal, part) schedules")

    print("✓ Layer nesting test passed\n")


def test_merge_masks():
    """Test per-layer union over selected parts"""
    print("=" * 60)
    print("Test 6: Merging")
    print("=" * 60)

    rng = np.random.default_rng(0)
    layered = rng.integers(0, 2, size=(3, NUM_PARTS, 2, 2)).astype(np.uint8)

    single = np.zeros(NUM_PARTS, dtype=np.uint8)
    single[BodyPart.HEAD] = 1
    assert np.array_equal(merge_masks(layered, single), layered[:, BodyPart.HEAD])

    layered = np.zeros((3, NUM_PARTS, 2, 2), dtype=np.uint8)
    layered[1, 0] = [[1, 0], [0, 0]]
    layered[1, 1] = [[0, 0], [0, 1]]
    pair = np.array([1, 1, 0, 0, 0, 0])
    assert merge_masks(layered, pair)[1].tolist() == [[1, 0], [0, 1]]

    assert merge_masks(np.ones_like(layered), np.ones(NUM_PARTS)).all()

    with pytest.raises(MaskPolicyError, match="empty part selection"):
        merge_masks(layered, np.zeros(NUM_PARTS))
    batch = np.stack([layered, layered])
    with pytest.raises(MaskPolicyError):
        merge_masks(batch, np.stack([pair, np.zeros(NUM_PARTS)]))

    print("✓ Merging test passed\n")


def test_border_random_drop():
    """Test keep probabilities follow fractional overlap"""
    print("=" * 60)
    print("Test 7: Border Random Drop")
    print("=" * 60)

    full = Box(0, 0, 64, 64)
    mask = rasterize_box(full, SMALL)
    for seed in range(20):
        assert np.array_equal(border_random_drop(mask, [full], SMALL, seed), mask)

    # Token (0, 0) is half covered, token (1, 0) only touches the box edge
    half = Box(0, 0, 16, 32)
    mask = rasterize_box(half, SMALL)
    assert mask.tolist() == [[1, 0], [1, 0]]

    trials = 10000
    kept = 0
    for seed in range(trials):
        dropped = border_random_drop(mask, [half], SMALL, seed)
        assert dropped[1, 0] == 0, "Zero-overlap token must always be dropped"
        kept += int(dropped[0, 0])
    frequency = kept / trials
    print(f"Half-covered token kept in {frequency:.3f} of trials")
    assert abs(frequency - 0.5) < 0.02

    print("✓ Border random drop test passed\n")


def test_variants_and_serialization():
    """Test ablation variants and the bit-packed MaskStack form"""
    print("=" * 60)
    print("Test 8: Variants and Serialization")
    print("=" * 60)

    scene = SceneAnnotation(id=3, width=64, height=64, persons=[
        person_with(BodyPart.HANDS, (0, 0, 20, 20), bbox=(0, 0, 30, 60)),
        person_with(BodyPart.FEET, (40, 40, 60, 60), bbox=(35, 0, 64, 64)),
    ])
    parts = build_part_masks(scene, SMALL)
    human = np.array([[0.0, 0.0, 0.5, 0.9], [0.5, 0.0, 1.0, 1.0]])
    obj = np.array([[0.1, 0.1, 0.3, 0.3], [0.7, 0.7, 0.9, 0.9]])

    stack = MaskStack.build(parts, human, obj, SMALL)
    assert stack.layered.shape == (2, 3, NUM_PARTS, 2, 2)
    assert stack.num_proposals == 2 and stack.grid_shape == (2, 2)

    flat = MaskStack.build(parts, human, obj, SMALL, MaskVariant.FLAT)
    for layer in range(3):
        assert np.array_equal(flat.layered[:, layer], stack.layered[:, 1])

    ones = MaskStack.build(parts, human, obj, SMALL, MaskVariant.ALL_ONES)
    assert ones.layered.all() and ones.part_masks.all()

    merged = stack.with_selection(np.eye(2, NUM_PARTS))
    assert merged.merged.shape == (2, 3, 2, 2)
    restored = MaskStack.from_dict(merged.to_dict())
    for name in ('part_masks', 'human', 'object', 'other_humans', 'layered', 'merged'):
        assert np.array_equal(getattr(restored, name), getattr(merged, name)), name
    assert restored.variant is MaskVariant.PROGRESSIVE

    odd = np.array([[1, 0, 1], [0, 1, 1], [1, 1, 0]], dtype=np.uint8)
    assert np.array_equal(decode_mask(encode_mask(odd)), odd)

    print("✓ Variants and serialization test passed\n")


def main():
    """Run all tests"""
    print("\n" + "=" * 60)
    print("partint Mask Geometry Test Suite")
    print("=" * 60)
    print()

    try:
        test_rasterize_examples()
        test_rasterize_matches_predicate()
        test_part_masks()
        test_instance_masks()
        test_progressive_schedule()
        test_progressive_layers_nest()
        test_merge_masks()
        test_border_random_drop()
        test_variants_and_serialization()

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
