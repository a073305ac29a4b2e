"""Smoke test for the exmem_py extension module.

Build and install first:  pip install ./crates/python --no-build-isolation
Then run:                 python python/smoke_test.py
"""

import json
import math
import tempfile

import exmem_py as ex


def close(a, b, tol=1e-9):
    return abs(a - b) <= tol


def main():
    f = ex.l2_normalize([3.0, 4.0])
    assert close(f[0], 0.6) and close(f[1], 0.8)

    p = ex.softmax_temp([1.0, 2.0, 3.0], 0.05)
    assert close(sum(p), 1.0)
    assert ex.entropy(ex.softmax_temp([1.0, 2.0], 0.05)) < ex.entropy([0.5, 0.5])

    loss, grad = ex.source_ce([0.3, 0.3, 0.3, 0.3], 2)
    assert close(loss, math.log(4.0))
    assert close(sum(grad), 0.0, 1e-12)

    mem = ex.ExemplarMemory(4, 2)
    assert mem.values == [0, 1, 2, 3]
    keys = [[1.0, 0.0], [0.0, 1.0], ex.l2_normalize([1.0, 1.0]), [-1.0, 0.0]]
    for i, k in enumerate(keys):
        mem.update(i, k, 0.0)
    idx, sims = mem.knn(1, [1.0, 0.0], 3)
    assert idx == [1, 0, 2], idx
    assert close(sims[2], math.sqrt(0.5))

    t_loss, grad_f, own, nbr = ex.target_loss(mem, [1.0, 0.0], 0, 1, 0.05)
    assert nbr == 0.0 and close(t_loss, own)
    assert len(grad_f) == 2
    assert close(ex.total_loss(2.0, 1.0, 0.3), 0.7 * 2.0 + 0.3 * 1.0)

    r = ex.cmc_map(
        [[1.0, 0.0]],
        [(1, 0)],
        [[1.0, 0.0], [0.9, math.sqrt(1 - 0.81)], [0.8, 0.6], [0.0, 1.0]],
        [(1, 1), (2, 1), (1, 2), (3, 1)],
        4,
    )
    assert close(r["map"], (1.0 + 2.0 / 3.0) / 2.0)

    with tempfile.TemporaryDirectory() as tmp:
        gen = {"n_source_ids": 5, "n_target_ids": 5, "images_per_id_per_camera": 3, "obs_dim": 12}
        ex.generate_dataset(tmp + "/data", json.dumps(gen))
        cfg = {"epochs": 3, "warmup_epochs": 1, "hidden_dim": 16, "embed_dim": 8, "seed": 1}
        out = ex.run_experiment(tmp + "/data", json.dumps(cfg))
        assert out["mode"] == "E+C+N"
        assert len(out["losses"]) == 3
        assert 0.0 <= out["map"] <= 1.0
        assert ex.cli(["train", "--data", tmp + "/missing", "--out", tmp + "/r"]) == 2

    try:
        ex.ExemplarMemory(4, 2).update(9, [1.0, 0.0], 0.5)
    except ValueError:
        pass
    else:
        raise AssertionError("out-of-range slot accepted")

    print("exmem_py smoke test passed (version %s)" % ex.__version__)


if __name__ == "__main__":
    main()
