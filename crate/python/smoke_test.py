"""Smoke test for the dygenc_py extension.

Works either with the module installed (maturin develop) or straight from a
cargo build: `cargo build -p dygenc-python && python python/smoke_test.py`.
"""
import glob
import importlib.util
import json
import os
import shutil
import sys
import tempfile

ROOT = os.path.dirname(os.path.dirname(os.path.abspath(__file__)))


def load():
    try:
        import dygenc_py
        return dygenc_py
    except ImportError:
        pass
    libs = glob.glob(os.path.join(ROOT, "target", "*", "libdygenc_py.so"))
    libs += glob.glob(os.path.join(ROOT, "target", "*", "libdygenc_py.dylib"))
    if not libs:
        sys.exit("dygenc_py not built; run `cargo build -p dygenc-python` first")
    lib = max(libs, key=os.path.getmtime)
    tmp = tempfile.mkdtemp()
    dst = os.path.join(tmp, "dygenc_py.so")
    shutil.copy(lib, dst)
    spec = importlib.util.spec_from_file_location("dygenc_py", dst)
    mod = importlib.util.module_from_spec(spec)
    spec.loader.exec_module(mod)
    return mod


def main():
    m = load()
    lines = m.generate_corpus(6, seed=3)
    assert lines and lines == m.generate_corpus(6, seed=3), "generation not deterministic"
    first = json.loads(lines[0])
    assert {"question", "answer", "template_id"} <= set(first)

    agree = sum(m.oracle_answer(l) == json.loads(l)["answer"] for l in lines)
    assert agree == len(lines), f"oracle disagrees on {len(lines) - agree} samples"

    kept = json.loads(m.retrieve(lines[0], 1))
    assert len(kept["frames"]) == 1

    try:
        m.retrieve(lines[0], 0)
        raise AssertionError("budget 0 accepted")
    except ValueError:
        pass

    cfg = "profile = 'desk'\nepochs = 1\npatience = 1\nbatch_size = 8\n"
    with tempfile.TemporaryDirectory() as out:
        val = m.train(cfg, lines, out)
        assert 0.0 <= val <= 1.0
        acc = m.evaluate(out, lines)
        assert 0.0 <= acc["all"] <= 1.0
    print(f"smoke ok: {len(lines)} samples, val {val:.3f}, all {acc['all']:.3f}")


if __name__ == "__main__":
    main()
