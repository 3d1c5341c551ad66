"""Smoke test for the neupath extension module.

Build and install first, e.g. `maturin develop --release` inside crates/python,
or copy target/release/libneupath.so to neupath.so on PYTHONPATH.
"""

import json
import math
import tempfile
from pathlib import Path

import neupath


def check_formulas():
    assert neupath.token_f1([1, 2], [2, 3]) == 0.5
    kl = neupath.kl_divergence([0.5, 0.5], [0.9, 0.1])
    assert abs(kl - 0.5108) < 1e-4, kl
    assert abs(neupath.npo_term(1.0, 0.4) - 5.0 * math.log(2.0)) < 1e-12
    assert "mip_editor" in neupath.method_names()


def check_end_to_end():
    split = neupath.Split.generate(seed=7)
    assert split.forget_count > 0 and split.retain_count > 0
    model = neupath.Model(seed=7)
    assert model.parameter_count == 16384
    losses = model.train(split)
    assert losses[-1] < losses[0]
    assert model.accuracy(split, "retain") > 0.9

    paths = neupath.locate(model, split)
    assert len(paths) == split.forget_count
    prune = json.loads(paths.prune_set_json(4))
    assert all(len(layer) == 4 for layer in prune["textual"])
    score = neupath.attribute(model, split, 0, "textual", [(1, 0), (2, 0), (3, 0), (4, 0)])
    assert math.isfinite(score)

    edited = neupath.unlearn(model, split, "mip_editor", paths)
    report = json.loads(neupath.evaluate(model, edited, split))
    print("forgetting rate", report["forgetting_rate"])
    print("retention ratio", report["retention_ratio"])
    assert report["forgetting_rate"]["multimodal"] > 0.0

    with tempfile.TemporaryDirectory() as tmp:
        path = Path(tmp) / "model.json"
        edited.save(path)
        again = neupath.Model.load(path)
        assert again.predict(split) == edited.predict(split)


def check_pipeline():
    with tempfile.TemporaryDirectory() as tmp:
        cfg = json.loads(neupath.default_config(seed=7, out_dir=tmp))
        cfg["corpus"]["num_entities"] = 20
        cfg["train"]["epochs"] = 10
        text = json.dumps(cfg)
        try:
            neupath.run_stage(text, "eval")
        except FileNotFoundError as err:
            assert "corpus.jsonl" in str(err)
        else:
            raise AssertionError("eval without artifacts must fail")
        for stage in ["gen", "train", "locate", "unlearn", "eval"]:
            neupath.run_stage(text, stage)
        doc = json.loads((Path(tmp) / "report.json").read_text())
        assert doc["format_version"] == 1
        assert doc["config_hash"] == neupath.config_hash(text)
        print(neupath.run_stage(text, "report"))


if __name__ == "__main__":
    check_formulas()
    check_end_to_end()
    check_pipeline()
    print("smoke test passed")
