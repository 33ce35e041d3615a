#!/usr/bin/env python3
"""
Test script to verify config files and environment variables are properly
loaded, validated and layered (CLI flags > config file > environment).
"""

import os
import sys
import tempfile
from pathlib import Path

from dotenv import load_dotenv

# Add project directory to path
project_dir = Path(__file__).parent
sys.path.insert(0, str(project_dir))

from config import parse_config, parse_config_text
from errors import ParseError, ValidationError
from rdd_service import progress_enabled

MINIMAL = """
# covariance study defaults
k=4
b=100
bandwidth=1.5
variogram_family=spherical
"""


def expect(error_type, fn, *args, **kwargs):
    try:
        fn(*args, **kwargs)
    except error_type as e:
        return e
    raise AssertionError(f"{fn.__name__} did not raise {error_type.__name__}")


def test_environment_variables():
    """Environment knobs are read with sensible defaults"""
    load_dotenv()
    saved = {k: os.environ.pop(k, None) for k in ("RDDMK_WORKERS", "RDDMK_OUT_DIR", "RDDMK_PROGRESS")}
    try:
        config = parse_config_text(MINIMAL)
        assert config.run.workers == 1
        assert config.out_dir == Path("rddmk_output")
        assert progress_enabled()

        os.environ["RDDMK_WORKERS"] = "3"
        os.environ["RDDMK_OUT_DIR"] = "from_env"
        os.environ["RDDMK_PROGRESS"] = "off"
        config = parse_config_text(MINIMAL)
        assert config.run.workers == 3
        assert config.out_dir == Path("from_env")
        assert not progress_enabled()

        os.environ["RDDMK_WORKERS"] = "many"
        e = expect(ValidationError, parse_config_text, MINIMAL)
        assert any("RDDMK_WORKERS" in v for v in e.violations)
    finally:
        for key, value in saved.items():
            os.environ.pop(key, None)
            if value is not None:
                os.environ[key] = value


def test_precedence():
    """Config values beat the environment, CLI overrides beat both"""
    os.environ["RDDMK_WORKERS"] = "3"
    try:
        config = parse_config_text(MINIMAL + "workers=2\nmaster_seed=5\nout_dir=cfg_out\n")
        assert config.run.workers == 2
        overridden = config.with_overrides(seed=9, workers=6, out_dir="cli_out")
        assert overridden.run.workers == 6
        assert overridden.run.master_seed == 9
        assert overridden.out_dir == Path("cli_out")
        assert config.run.master_seed == 5
        expect(ValidationError, config.with_overrides, workers=0)
    finally:
        os.environ.pop("RDDMK_WORKERS", None)


def test_minimal_config():
    config = parse_config_text(MINIMAL)
    assert config.run.k == 4 and config.run.b == 100
    assert config.run.kernel.bandwidth == 1.5
    assert str(config.run.manifold) == "SPD(2)"
    assert config.monte_carlo.k_values == (1, 2, 4, 6, 8, 10)
    assert config.domain.n_phi * config.domain.n_r == 1582
    assert config.explicit_keys == ["b", "bandwidth", "k", "variogram_family"]


def test_typed_values():
    text = (
        'kernel="tile_indicator"\n'
        "manifold=cholesky\n"
        "k_values=1, 2, 4\n"
        "keep_iterations=yes\n"
        "h_max=auto\n"
        "field_kind=corr\n"
        "resimulate_field=true\n"
    )
    config = parse_config_text(text)
    assert config.run.kernel.kind == "tile_indicator"
    assert config.run.manifold.tag == "cholesky"
    assert config.monte_carlo.k_values == (1, 2, 4)
    assert config.run.keep_iterations is True
    assert config.run.bins.h_max is None
    assert config.field_spec.kind == "corr"
    assert config.monte_carlo.resimulate_field is True


def test_k_zero_rejected():
    e = expect(ValidationError, parse_config_text, "k=0\n")
    assert any("1 ≤ K ≤ n" in v for v in e.violations)


def test_every_violation_reported():
    e = expect(ValidationError, parse_config_text, "k=0\nb=0\nkernel=boxcar\nn_bins=x\nr_min=1.0\n")
    text = " | ".join(e.violations)
    assert "1 ≤ K ≤ n" in text
    assert "B ≥ 1" in text
    assert "kernel must be one of" in text
    assert "line 4: n_bins" in text
    assert "r_min must be below r_max" in text
    assert e.to_dict()["code"] == "validation_error"


def test_unknown_key_suggestion():
    e = expect(ParseError, parse_config_text, "k=4\nbandwith=1.5\n")
    assert e.context["suggestion"] == "bandwidth"
    assert e.context["line"] == 2
    assert "did you mean 'bandwidth'" in e.message
    expect(ParseError, parse_config_text, "k=4\nk=5\n")


def test_required_keys_and_paths():
    with tempfile.TemporaryDirectory() as tmp:
        path = Path(tmp) / "run.env"
        path.write_text(MINIMAL + "sites_path=data/sites.csv\n", encoding="utf-8")
        config = parse_config(path)
        assert config.paths["sites_path"] == Path(tmp) / "data" / "sites.csv"
        assert config.paths["matrices_path"] is None
        e = expect(ValidationError, config.require, "krige")
        assert any("matrices_path" in v for v in e.violations)
        config.require("simulate")
        config.require("mc-study")

        path.write_text(MINIMAL + "sites_path=s.csv\nmatrices_path=m.csv\ndistance=precomputed\n", encoding="utf-8")
        e = expect(ValidationError, parse_config(path).require, "cv")
        assert any("distance_path" in v for v in e.violations)

    expect(ParseError, parse_config, "/nonexistent/run.env")


def main():
    """Main test function"""
    print("🔬 Environment Variables and Configuration Test")
    print("=" * 60)

    tests = [
        test_environment_variables,
        test_precedence,
        test_minimal_config,
        test_typed_values,
        test_k_zero_rejected,
        test_every_violation_reported,
        test_unknown_key_suggestion,
        test_required_keys_and_paths,
    ]
    success = True
    for test in tests:
        try:
            test()
            print(f"✅ {test.__name__}")
        except Exception as e:
            print(f"❌ {test.__name__}: {e!r}")
            success = False

    print("\n" + "=" * 60)
    if success:
        print("🎉 ALL TESTS PASSED! Environment configuration is working correctly.")
    else:
        print("❌ SOME TESTS FAILED! Please check the configuration.")
    return success


if __name__ == "__main__":
    success = main()
    sys.exit(0 if success else 1)
