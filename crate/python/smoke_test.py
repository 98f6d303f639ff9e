"""Smoke test for the Python extension.

Builds nothing itself: expects `cargo build --release -p paratool-py` to have
produced the shared library, copies it next to a temporary module path and
imports it.
"""

import json
import math
import pathlib
import shutil
import sys
import tempfile

ROOT = pathlib.Path(__file__).resolve().parent.parent


def load_module():
    for profile in ("release", "debug"):
        for name in ("libparatool_py.so", "libparatool_py.dylib", "paratool_py.dll"):
            lib = ROOT / "target" / profile / name
            if lib.exists():
                tmp = pathlib.Path(tempfile.mkdtemp())
                suffix = ".pyd" if name.endswith(".dll") else ".so"
                shutil.copy(lib, tmp / f"paratool{suffix}")
                sys.path.insert(0, str(tmp))
                import paratool

                return paratool
    raise SystemExit("build the extension first: cargo build --release -p paratool-py")


def main():
    pt = load_module()
    assert pt.__version__

    assert math.isclose(pt.gradient_bound(1.0, 0.0, [0.5, 0.5], 0.0), math.sqrt(0.5), rel_tol=1e-12)
    assert math.isclose(pt.radius_lower_bound(1.0, 1.0, 0.5), math.sqrt(2) - 1, rel_tol=1e-12)
    try:
        pt.gradient_bound(1.0, 0.0, [0.7, 0.7], 0.0)
    except ValueError:
        pass
    else:
        raise AssertionError("off-simplex weights accepted")

    linear, attention = pt.flops_transformer(1, 8, 3, 2, 16, 10)
    assert attention == 4 * 3 * 8
    assert linear > 0

    assert len(pt.tokenize("CALL add ARG 3 ARG 4 END")) == 7
    kept, weights = pt.top_n([3, 1, 2], [0.2, 0.5, 0.3], 2)
    assert kept == [1, 2]
    assert all(math.isclose(a, b) for a, b in zip(weights, [0.625, 0.375]))
    assert math.isclose(pt.entropy([0.5, 0.5]), math.log(2))

    tools, train, validation, test = json.loads(pt.synth_json(0, tools=4))
    assert len(tools) == 4 and train and validation and test
    assert "[stages]" in pt.config_toml("smoke")

    with tempfile.TemporaryDirectory() as root:
        table = pt.run_experiment(pt.config_toml("smoke"), root)
        rows = table.strip().splitlines()
        assert rows[0].startswith("seed\tstrategy")
        assert len(rows) == 1 + 5, table
    print("python smoke test passed")


if __name__ == "__main__":
    main()
