"""Smoke test for the pyoccbench extension.

Run after `maturin develop` (or installing the wheel):

    python crates/py/python/smoke_test.py [MNIST_DIR]

The MNIST part is skipped when no data directory is given or found.
"""

import json
import os
import sys
import tempfile

import pyoccbench as ob


def check(cond, what):
    if not cond:
        raise SystemExit(f"FAIL {what}")
    print(f"ok   {what}")


def main():
    check(ob.auroc([0.1, 0.4, 0.35, 0.8], [False, False, True, True]) == 0.75, "auroc")
    check(ob.auroc([1.0, 1.0], [True, False]) == 0.5, "auroc ties count one half")

    x = [0.5, 0.1, 0.9, 0.3]
    g = [-2.0, 1.0, 0.5, -0.1]
    check(ob.rank("grad_orig", x, g) == [0, 3, 2, 1], "grad_orig ranks most negative first")
    check(ob.attribute("grad_inp", x, g) == [a * b for a, b in zip(x, g)], "grad_inp is x * g")
    order = ob.rank("abs_grad", x, g)
    check(ob.occlude(x, order, 0.5, "highest", "constant:0") == [0.0, 0.0, 0.9, 0.3], "occlude highest half")
    check(ob.occlude(x, order, 0.5, "lowest", "input_max") == [0.5, 0.1, 0.9, 0.9], "occlude lowest half")
    try:
        ob.rank("saliency", x, g)
        check(False, "unknown method rejected")
    except ValueError:
        check(True, "unknown method rejected")

    model = ob.Model("mlp-small", 2, 0)
    pixels = [0.0] * 784
    probs = model.predict(pixels)
    check(len(probs) == 2 and abs(sum(probs) - 1.0) < 1e-6, "predict returns probabilities")
    check(len(model.loss_gradient(pixels, 1)) == 784, "loss gradient has one entry per pixel")
    with tempfile.TemporaryDirectory() as tmp:
        path = os.path.join(tmp, "m.ocbn")
        model.save(path)
        check(ob.Model.load(path).predict(pixels) == probs, "checkpoint round trip")

    outcomes = ob.selftest(50, 0)
    check(all(passed for _, passed, _ in outcomes), f"selftest ({len(outcomes)} checks)")

    cfg = json.loads(ob.default_config("mnist-2-sigmoid"))
    check(cfg["task"] == "mnist-2-sigmoid", "default config")

    data = sys.argv[1] if len(sys.argv) > 1 else os.environ.get("OCCBENCH_DATA", "data/mnist")
    if not os.path.isfile(os.path.join(data, "t10k-labels-idx1-ubyte")):
        print(f"skip MNIST checks, no data in {data}")
        return
    test = ob.Dataset.load(data, "test", [0, 1])
    check(len(test) == 2115, "binary test split has 2115 examples")
    train = ob.Dataset.load(data, "train", [0, 1])
    small = ob.Model("mlp-small", 2, 0)
    trained, losses = small.train(train, epochs=1)
    check(losses[0] < 0.1, f"one epoch of training, loss {losses[0]:.4f}")
    check(trained.accuracy(test) > 0.99, "trained accuracy above 0.99")

    with tempfile.TemporaryDirectory() as tmp:
        cfg.update(
            architecture="mlp-small",
            seeds=1,
            train_on_demand=True,
            test_limit=200,
            methods=["grad_orig"],
            fractions=[0.0, 0.5],
            train={"epochs": 1},
            paths={"data_dir": data, "out_dir": tmp},
        )
        records, summary = ob.run_sweep(json.dumps(cfg), export=True)
        check(records.splitlines()[0] == "task,seed,method,direction,fraction,strategy,metric,value", "sweep csv header")
        check(open(os.path.join(tmp, "results.csv")).read() == records, "sweep export matches")
    print("all smoke checks passed")


if __name__ == "__main__":
    main()
