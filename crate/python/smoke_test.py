"""Smoke test for the aesm2py extension.

Build and install first:
    cd crates/py && maturin build --release -o dist && pip install dist/aesm2py-*.whl
Then run:
    python python/smoke_test.py
"""

import json
import math
import os
import tempfile

import aesm2py


def check(cond, msg):
    if not cond:
        raise SystemExit(f"FAIL: {msg}")
    print(f"ok   {msg}")


def main():
    spec = json.loads(aesm2py.default_spec_json())
    spec["samples"] = {"train": 2000, "val": 500, "test": 500}
    train, val, test = aesm2py.generate_splits(seed=1, spec_json=json.dumps(spec))
    check(len(train) == 2000 and len(test) == 500, "split sizes")
    check(train.n_scenarios == len(train.scenario_names()), "scenario names")

    again = aesm2py.Dataset.from_csv(train.to_csv(), train.schema_json())
    check(again.to_csv() == train.to_csv(), "csv round-trip")

    sel = aesm2py.select_experts([[0.7, 0.2, 0.1], [0.34, 0.33, 0.33], [0.1, 0.8, 0.1]], 0, 1, 1)
    check(sel.specific == [0] and sel.shared == [1], f"selection {sel}")
    check(sel.active() == [0, 1], "active union")
    check(abs(aesm2py.kl_divergence([1.0, 0.0], [0.9, 0.1]) - 0.105360516) < 1e-8, "kl value")
    check(aesm2py.auc([0.1, 0.4, 0.35, 0.8], [0, 0, 1, 1]) == 0.75, "auc value")
    w = aesm2py.masked_softmax([1.0, 2.0, 3.0], [0, 2])
    check(w[1] == 0.0 and math.isclose(sum(w), 1.0), "masked softmax")

    cfg = json.dumps({"scenario_experts": 4, "task_experts": 4, "expert_dim": 16, "tower_hidden": 16})
    for kind in aesm2py.MODEL_KINDS:
        m = aesm2py.Model(train, kind=kind, seed=0, config_json=cfg)
        check(m.kind == kind and m.parameter_count > 0, f"build {kind}")

    model = aesm2py.Model(train, kind="aesm2", seed=0, config_json=cfg)
    trained, best, ran = aesm2py.fit(model, train, val, epochs=2, seed=0)
    check(ran == 2 and best is not None, "fit runs")
    preds = trained.predict(test)
    check(all(0 < ctr < 1 and abs(ctcvr - ctr * cvr) < 1e-12 for ctr, cvr, ctcvr in preds), "prediction ranges")
    report = trained.evaluate(test)
    check("ALL" in report and report["ALL"][0] is not None, f"evaluate ALL={report['ALL']}")
    check(trained.utilization_csv(test).startswith("layer,branch,expert"), "utilization csv")

    with tempfile.TemporaryDirectory() as d:
        path = os.path.join(d, "model.json")
        trained.save(path)
        loaded = aesm2py.Model.load(path)
        check(loaded.checkpoint_json() == trained.checkpoint_json(), "checkpoint round-trip")
        check(loaded.predict(test) == preds, "loaded model predicts identically")

    try:
        aesm2py.Model(train, kind="dense")
    except ValueError as e:
        check("dense" in str(e), "unknown kind rejected")
    else:
        raise SystemExit("FAIL: unknown kind accepted")

    print("smoke test passed")


if __name__ == "__main__":
    main()
