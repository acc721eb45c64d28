"""Smoke test for the compmeta extension module.

Build first, then run from the repo root:

    cargo build --release -p compmeta-py
    python python/smoke_test.py

The script imports an installed `compmeta` if there is one, otherwise it
loads target/{release,debug}/libcompmeta_py.so directly.
"""

import importlib.machinery
import importlib.util
import math
import pathlib
import random
import sys
import tempfile

ROOT = pathlib.Path(__file__).resolve().parent.parent


def load_module():
    try:
        import compmeta

        return compmeta
    except ImportError:
        pass
    for profile in ("release", "debug"):
        lib = ROOT / "target" / profile / "libcompmeta_py.so"
        if lib.exists():
            loader = importlib.machinery.ExtensionFileLoader("compmeta", str(lib))
            spec = importlib.util.spec_from_file_location("compmeta", lib, loader=loader)
            module = importlib.util.module_from_spec(spec)
            loader.exec_module(module)
            return module
    sys.exit("compmeta extension not found; run `cargo build -p compmeta-py` first")


def check_bilevel(cm):
    for seed in range(3):
        task = cm.QuadraticTask(seed)
        theta, alpha, h = [0.3, -0.7], 0.1, 1e-5
        got = task.outer_grad(theta, alpha)
        fd = []
        for i in range(2):
            up, dn = list(theta), list(theta)
            up[i] += h
            dn[i] -= h
            fd.append((task.bilevel_loss(up, alpha) - task.bilevel_loss(dn, alpha)) / (2 * h))
        err = math.dist(got, fd) / max(math.hypot(*fd), 1e-12)
        assert err < 1e-4, (seed, got, fd)
        first = task.outer_grad(theta, alpha, first_order=True)
        assert math.dist(first, got) > 0, "first-order gradient should drop the Hessian term"


def check_gradcheck(cm):
    rows = cm.gradcheck(seed=3)
    assert rows, "no op cases"
    worst = max(rows, key=lambda r: max(r[1], r[2]))
    assert max(worst[1], worst[2]) < 1e-4, worst


def check_retrieval(cm):
    rng = random.Random(0)
    n, d = 40, 8
    keys = [[rng.gauss(0, 1) for _ in range(d)] for _ in range(n)]
    labels = [i % 5 for i in range(n)]
    roles = ["attr" if i % 2 == 0 else "obj" for i in range(n)]
    db = cm.ConceptDb(keys, labels, roles)
    assert len(db) == n and db.d == d

    def unit(v):
        s = math.sqrt(sum(x * x for x in v))
        return [x / s for x in v]

    units = [unit(k) for k in keys]
    for _ in range(20):
        q = unit([rng.gauss(0, 1) for _ in range(d)])
        scores = [sum(a * b for a, b in zip(q, u)) for u in units]
        brute = sorted(range(n), key=lambda i: (-scores[i], i))
        top = [e for e, _ in db.query_topk(q, 4)]
        assert top == brute[:4], (top, brute[:4])
        div = db.query_div_k(q, 4)
        div_labels = [labels[e] for e, _ in div]
        assert len(set(div_labels)) == len(div_labels)


def check_pipeline(cm):
    config = cm.ExperimentConfig.load(ROOT / "crates" / "core" / "presets" / "tiny.toml")
    try:
        bad = config.to_toml().replace("k = 4", "k = -1", 1)
        cm.ExperimentConfig.from_toml(bad).validate()
        raise AssertionError("negative k accepted")
    except ValueError as e:
        assert "retrieval.k" in str(e)

    with tempfile.TemporaryDirectory() as out:
        p = cm.Pipeline(config, out, seed=0)
        counts = p.gen_world()
        assert counts["train"] > 0 and counts["novel_pairs"] > 0
        p.train_retriever()
        p.build_db()
        db, provenance = cm.ConceptDb.load(pathlib.Path(out) / "db.bin")
        assert len(db) == 2 * counts["train"] and "config_hash" in provenance
        p.meta_train()
        first = p.evaluate()
        again = p.evaluate()
        assert first == again
        for split in ("seen", "novel"):
            m = first[split]
            assert m["pair"] <= min(m["attr"], m["obj"]) + 1e-12
        print("tiny pipeline:", {s: round(first[s]["pair"], 3) for s in first})


def main():
    cm = load_module()
    print("compmeta", cm.TOOL_VERSION)
    for check in (check_bilevel, check_gradcheck, check_retrieval, check_pipeline):
        check(cm)
        print("ok", check.__name__)


if __name__ == "__main__":
    main()
