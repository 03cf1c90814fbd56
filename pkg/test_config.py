#!/usr/bin/env python3
"""
Test script for configuration loading

Tests:
1. Defaults file matches the hardcoded fallbacks
2. Flat keys and overrides take precedence over files
3. Unknown keys and invalid values are rejected
4. PARTINT_SEED overrides the training seed
5. to_dict / from_dict preserve every section
"""

import os
import sys
import tempfile
from pathlib import Path

import pytest

# Add current directory to path for imports
sys.path.insert(0, str(Path(__file__).parent))

from config import Config, ConfigError


def test_defaults_match_fallbacks():
    """Test config.defaults.toml agrees with the dataclass defaults"""
    print("=" * 60)
    print("Test 1: Defaults")
    print("=" * 60)

    loaded = Config.load(use_project_file=False)
    fallback = Config()
    for section in ('model', 'masks', 'train', 'eval', 'synth', 'monitoring'):
        assert loaded.to_dict()[section] == fallback.to_dict()[section], f"[{section}] differs"

    assert loaded.train.lambda1 == 1.0
    assert loaded.train.lambda2 == 2.5
    assert loaded.train.lambda3 == 1.0
    assert loaded.train.alpha == 3.0
    assert loaded.eval.nis_threshold == 0.1
    print(f"Loaded: {loaded}")
    print("✓ Defaults test passed\n")


def test_precedence():
    """Test explicit file < overrides, flat keys land in their sections"""
    print("=" * 60)
    print("Test 2: Precedence")
    print("=" * 60)

    with tempfile.TemporaryDirectory() as tmpdir:
        path = Path(tmpdir) / "run.toml"
        path.write_text('alpha = 5.0\nnq = 16\n\n[train]\nlambda2 = 1.5\n')

        config = Config.load(path, use_project_file=False)
        assert config.train.alpha == 5.0
        assert config.model.nq == 16
        assert config.train.lambda2 == 1.5

        config = Config.load(path, overrides={'alpha': 2.0, 'masks': {'merge': False}},
                             use_project_file=False)
        assert config.train.alpha == 2.0, "Override should win over the file"
        assert config.masks.merge is False
        assert config.model.nq == 16

    print("✓ Precedence test passed\n")


def test_invalid_config():
    """Test unknown keys and constraint violations raise ConfigError"""
    print("=" * 60)
    print("Test 3: Invalid Configuration")
    print("=" * 60)

    with pytest.raises(ConfigError, match="lambda9"):
        Config.from_dict({'train': {'lambda9': 1.0}})
    with pytest.raises(ConfigError, match="Unknown config section"):
        Config.from_dict({'optimizer': {}})
    with pytest.raises(ConfigError, match="divisible"):
        Config.load(overrides={'dc': 30, 'heads': 4}, use_project_file=False)
    with pytest.raises(ConfigError, match="alpha"):
        Config.load(overrides={'alpha': 0.5}, use_project_file=False)
    with pytest.raises(ConfigError, match="does not exist"):
        Config.load("/nonexistent/partint.toml", use_project_file=False)

    with tempfile.TemporaryDirectory() as tmpdir:
        path = Path(tmpdir) / "broken.toml"
        path.write_text("[train\nalpha = ")
        with pytest.raises(ConfigError, match="Cannot parse"):
            Config.load(path, use_project_file=False)

    print("✓ Invalid configuration test passed\n")


def test_env_seed():
    """Test PARTINT_SEED replaces train.seed"""
    print("=" * 60)
    print("Test 4: PARTINT_SEED")
    print("=" * 60)

    previous = os.environ.get("PARTINT_SEED")
    os.environ["PARTINT_SEED"] = "41"
    try:
        config = Config.load(use_project_file=False)
        assert config.train.seed == 41
    finally:
        if previous is None:
            del os.environ["PARTINT_SEED"]
        else:
            os.environ["PARTINT_SEED"] = previous

    print("✓ Seed override test passed\n")


def test_dict_roundtrip():
    """Test a checkpoint-style dict rebuilds the same configuration"""
    print("=" * 60)
    print("Test 5: Dictionary Form")
    print("=" * 60)

    config = Config.from_dict({'model': {'dc': 32, 'heads': 2}, 'masks': {'progressive': False}})
    rebuilt = Config.from_dict(config.to_dict())
    assert rebuilt.to_dict() == config.to_dict()
    assert rebuilt.model.dc == 32
    assert rebuilt.masks.progressive is False

    print("✓ Dictionary form test passed\n")


def main():
    """Run all tests"""
    print("\n" + "=" * 60)
    print("partint Configuration Test Suite")
    print("=" * 60)
    print()

    try:
        test_defaults_match_fallbacks()
        test_precedence()
        test_invalid_config()
        test_env_seed()
        test_dict_roundtrip()

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
