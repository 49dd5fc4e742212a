"""Smoke test for the cdrf_fusion extension.

Run after `maturin develop`, or point CDRF_FUSION_PATH at a directory holding
the built `cdrf_fusion` shared library.
"""

import json
import math
import os
import sys
import tempfile

if os.environ.get("CDRF_FUSION_PATH"):
    sys.path.insert(0, os.environ["CDRF_FUSION_PATH"])

import cdrf_fusion as cf


def main():
    data = cf.simulate("gaussian", 400, seed=3)
    assert len(data) == 400
    assert set(data.s) <= {0, 1, 2, 3}
    assert all(0.0 <= a <= 1.0 for a in data.a)

    with tempfile.TemporaryDirectory() as tmp:
        path = os.path.join(tmp, "data.csv")
        data.to_csv(path)
        again = cf.Dataset.from_csv(path)
        assert again.y == data.y

    model = cf.fit(data, mode="fused", mu="uniform", seed=7)
    assert model.n2 == 200
    assert model.lambda_ > 0 and model.bandwidth > 0
    grid = [i / 10 for i in range(11)]
    curve = model.predict(grid)
    assert len(curve) == 11 and all(math.isfinite(v) for v in curve)
    assert model.predict(0.5) == curve[5]

    clone = cf.Model.from_json(model.to_json())
    assert clone.predict(grid) == curve

    r = cf.risk(model, "gaussian", m_eval=500, seed=1)
    assert 0.0 <= r < 0.1, r

    d = cf.diagnostics(2, 2, 1, 2, 2, 1)
    assert abs(d["lipschitz_fused"] - 144.81) < 5e-3
    assert d["bound_ratio"] == 1.0

    assert abs(cf.true_cdrf("gaussian", 0.5) - 0.5957691) < 1e-7

    small = json.dumps({"cv": {"folds": 3}})
    assert cf.fit(data, mode="nonfused", config=small).n2 > 0

    try:
        cf.simulate("unknown", 10)
    except ValueError:
        pass
    else:
        raise AssertionError("expected ValueError")

    print("smoke test passed: risk=%.4g, lambda=%g" % (r, model.lambda_))


if __name__ == "__main__":
    main()
