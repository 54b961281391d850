"""Smoke test for the segfilter_py extension.

Build first with `cargo build -p segfilter-python` (or `maturin develop`
inside crates/python), then run `python3 python/smoke_test.py`.
"""

import importlib.util
import json
import pathlib
import shutil
import sys
import tempfile

import jsonschema

ROOT = pathlib.Path(__file__).resolve().parents[1]
SCHEMA = ROOT / "crates" / "core" / "schema" / "report.schema.json"

TINY = {
    "scene": {"height": 32, "width": 32},
    "counts": {"labeled": 12, "unlabeled": 6, "quality": 6, "validation": 6},
    "labeled_fraction": 0.5,
    "rare_threshold": 10,
    "num_models": 2,
    "segnet": {"width": 4, "depth": 3},
    "ensemble_hyper": {"steps": 10},
    "target_hyper": {"steps": 10},
    "quality": {"hyper": {"steps": 10}},
}


def load_module(tmp):
    try:
        import segfilter_py

        return segfilter_py
    except ImportError:
        pass
    for profile in ("release", "debug"):
        lib = ROOT / "target" / profile / "libsegfilter_py.so"
        if lib.exists():
            dest = pathlib.Path(tmp) / "segfilter_py.so"
            shutil.copy(lib, dest)
            spec = importlib.util.spec_from_file_location("segfilter_py", dest)
            module = importlib.util.module_from_spec(spec)
            spec.loader.exec_module(module)
            return module
    sys.exit("segfilter_py not built; run `cargo build -p segfilter-python`")


def main():
    with tempfile.TemporaryDirectory() as tmp:
        sf = load_module(tmp)
        schema = json.loads(SCHEMA.read_text())
        config = json.dumps(TINY)

        defaults = json.loads(sf.default_config())
        assert defaults["scene"]["num_classes"] == 6
        assert len(sf.config_hash(config)) == 64
        assert sf.config_hash(config) == sf.config_hash(config)

        try:
            sf.config_hash('{"no_such_field": 1}')
        except ValueError:
            pass
        else:
            raise AssertionError("unknown config field accepted")

        # Maps are (C, H, W); member 1 prefers class 0 at pixel 0, member 2
        # prefers class 1 more strongly.
        probs = [0.6, 0.9, 0.4, 0.1] + [0.3, 0.8, 0.7, 0.2]
        assert list(sf.fuse(probs, 2, 2, 1, 2)) == [1, 0]

        per_class, miou = sf.iou([0, 1, 1, sf.IGNORE], [0, 1, 0, 1], 2, 2, 2)
        assert per_class == [0.5, 1 / 3] and abs(miou - 5 / 12) < 1e-12
        assert sf.annotation_precision([0, 1, 1, 1], [0, 1, 0, 255], 2, 2, 2) == [1.0, 0.5]

        ds = sf.Dataset.generate(config)
        assert len(ds.ids("unlabeled")) == 6
        shape, pixels = ds.image("labeled", 0)
        assert shape == [3, 32, 32] and len(pixels) == 3 * 32 * 32
        h, w, labels = ds.label("validation", 0)
        assert (h, w) == (32, 32) and len(labels) == h * w
        try:
            ds.label("unlabeled", 0)
        except ValueError:
            pass
        else:
            raise AssertionError("unlabeled ground truth exposed")
        ds.save(tmp + "/data")
        again = sf.Dataset.load(tmp + "/data")
        assert again.ids("labeled") == ds.ids("labeled")
        assert again.image("unlabeled", 2) == ds.image("unlabeled", 2)

        grads = json.loads(sf.grad_check(cases_per_layer=2))
        assert all(r["passed"] for r in grads["results"])

        report = json.loads(sf.run_experiment(config))
        jsonschema.validate(report, schema, cls=jsonschema.Draft202012Validator)
        names = [a["name"] for a in report["iterations"][0]["arms"]]
        assert names[:3] == ["labeled_only", "unfiltered", "filtered"], names
        assert report == json.loads(sf.run_experiment(config)), "not deterministic"

        sweep = json.loads(sf.run_sweep([1.0, 0.5], config))
        jsonschema.validate(sweep, schema, cls=jsonschema.Draft202012Validator)
        assert [e["fraction"] for e in sweep["entries"]] == [1.0, 0.5]

    print("python smoke test passed")


if __name__ == "__main__":
    main()
