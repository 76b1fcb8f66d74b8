"""End-to-end smoke test of the advforge Python bindings.

Build and install first:  maturin develop -m crates/python/Cargo.toml
"""

import json
import os
import tempfile

import advforge


def main():
    ds = advforge.Dataset.synthetic(per_class=12, seed=1)
    train, val = ds.split(0.75, seed=1)
    assert len(train) + len(val) == len(ds) == 120
    assert train.image_shape == [1, 28, 28]

    models = []
    for seed in range(3):
        m = advforge.Model("minivgg", train.image_shape, train.num_classes, seed=seed, width=4, depth=2)
        report = json.loads(m.train(train, val, json.dumps({"epochs": 2, "batch_size": 30, "seed": seed})))
        assert len(report["epochs"]) == 2
        models.append(m)
    print("val accuracy", [round(m.accuracy(val), 3) for m in models])

    assert advforge.iteration_count(16) == 20
    x = val.head(8)
    adv = advforge.ensemble_attack(models[:2], x.images, x.labels, 8.0)
    worst = max(abs(a - b) for a, b in zip(adv.tolist(), x.images.tolist()))
    assert worst <= 8.0 and min(adv.tolist()) >= 0.0 and max(adv.tolist()) <= 255.0

    single = advforge.ensemble_attack(models[:1], x.images, x.labels, 8.0, step_size=8.0, iterations=1)
    assert single.tolist() == advforge.fgsm(models[0], x.images, x.labels, 8.0).tolist()

    with tempfile.TemporaryDirectory() as d:
        path = os.path.join(d, "m0.advf")
        models[0].save(path)
        assert advforge.Model.load(path).bit_eq(models[0])

        s = advforge.craft_set(models[:2], ["m0", "m1"], val, 16.0)
        manifest = os.path.join(d, "set.json")
        s.save(manifest)
        back = advforge.AdversarialSet.load(manifest)
        assert back.bit_eq(s) and back.ensemble_ids == ["m0", "m1"] and back.iterations == 20
        entry = json.loads(advforge.evaluate_transfer(models[2], "m2", s))
        print("set size", len(s), "holdout entry", entry)
        try:
            advforge.evaluate_transfer(models[1], "m1", s)
            raise AssertionError("holdout inside the ensemble must be rejected")
        except ValueError:
            pass

    first = val.head(1)
    grid = advforge.landscape(models[0], models[1], first.images, first.labels[0], step=4.0)
    assert grid.splitlines()[0] == "eps1,eps2,loss"
    curve = advforge.loss_curve(models[0], val.head(16), max_eps=16.0)
    assert len(curve.splitlines()) == 18
    print("ok")


if __name__ == "__main__":
    main()
