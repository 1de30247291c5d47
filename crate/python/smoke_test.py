#!/usr/bin/env python3
"""Smoke test for the ocrfuse_py extension module.

Builds nothing itself: expects the cdylib at target/{release,debug}/
(`cargo build -p ocrfuse-py --release`). Copies it next to a temp dir as
ocrfuse_py.so and imports it.
"""

import json
import math
import pathlib
import shutil
import sys
import tempfile

ROOT = pathlib.Path(__file__).resolve().parent.parent


def load_module():
    candidates = [
        ROOT / "target" / "release" / "libocrfuse_py.so",
        ROOT / "target" / "debug" / "libocrfuse_py.so",
    ]
    lib = next((c for c in candidates if c.exists()), None)
    if lib is None:
        sys.exit("build the extension first: cargo build -p ocrfuse-py --release")
    tmp = pathlib.Path(tempfile.mkdtemp(prefix="ocrfuse_py_"))
    shutil.copy(lib, tmp / "ocrfuse_py.so")
    sys.path.insert(0, str(tmp))
    import ocrfuse_py

    return ocrfuse_py


def main():
    m = load_module()
    failures = []

    def check(name, cond):
        print(f"{'PASS' if cond else 'FAIL'} {name}")
        if not cond:
            failures.append(name)

    # metrics
    check("edit_distance kitten/sitting == 3", m.edit_distance("kitten", "sitting") == 3)
    check("anls exact match == 1.0", m.anls("hello", "HELLO ") == 1.0)
    check("anls 12/120 == 2/3", abs(m.anls("12", "120") - (1 - 1 / 3)) < 1e-12)

    # character histogram and embeddings
    phoc = m.phoc_encode("beyond")
    check("phoc is 604-dim binary", len(phoc) == 604 and set(phoc) <= {0.0, 1.0})
    check("phoc deterministic", m.phoc_encode("beyond") == phoc)
    emb = m.word_embedding("token")
    check("embedding unit norm", abs(math.sqrt(sum(x * x for x in emb)) - 1) < 1e-9)
    check("embedding separates strings", m.word_embedding("inc") != m.word_embedding("ink"))

    # complexity reference values
    ours = m.complexity("ours", layers=8)
    m4c = m.complexity("m4c", layers=4)
    check("ours total 25488", ours["total_ops"] == 25488)
    check("ours block 400 / per-layer 3136", ours["attention_block_ops"] == 400 and ours["transformer_per_layer_ops"] == 3136)
    check("m4c total 115600", m4c["total_ops"] == 115600)
    ratio = m.empirical_count("ours", layers=8) / m.empirical_count("m4c", layers=4)
    check("empirical ratio < 0.25", ratio < 0.25)

    # gradient checks (sampled coordinates for speed)
    checks = m.grad_check(seed=0, max_coords=2)
    check("gradient checks pass", all(ok for (_, _, ok) in checks))

    # tiny end-to-end round trip: generate → train → evaluate
    with tempfile.TemporaryDirectory(prefix="ocrfuse_rt_") as td:
        td = pathlib.Path(td)
        spec = {
            "task": "copy_pointer",
            "n_instances": 4,
            "n_ocr": [2, 3],
            "n_obj": [1, 2],
            "seed": 5,
            "d_frcn": 16,
            "d_recog": 8,
        }
        n = m.gen_data(json.dumps(spec), td / "data.jsonl")
        check("gen_data wrote 4 instances", n == 4)
        cfg = {
            "learning_rate": 1e-3,
            "total_iterations": 8,
            "decay_points": [],
            "decay_factor": 0.1,
            "batch_size": 2,
            "seed": 0,
            "loss": {"alpha": 1.0, "pg_enabled": False},
            "encoder": {
                "num_layers": 1,
                "num_heads": 2,
                "d_model": 32,
                "d_ff": 64,
                "textcaps_mode": False,
                "max_decode_steps": 6,
                "vocab_size": 204,
                "d_frcn": 16,
                "d_recog": 8,
                "d_glob": 8,
                "l_max": 20,
                "n_max": 50,
                "m_max": 100,
                "blocks": "three_block",
            },
            "mode": "textvqa",
        }
        iters, loss, _ = m.train_model(json.dumps(cfg), td / "data.jsonl", td / "ckpt.bin")
        check("training ran 8 iterations", iters == 8)
        check("loss finite", math.isfinite(loss))
        report = m.evaluate(td / "ckpt.bin", td / "data.jsonl")
        check("evaluation returns 4 rows", len(report["rows"]) == 4)
        check("mean ANLS within [0,1]", 0.0 <= report["mean_anls"] <= 1.0)

    if failures:
        sys.exit(f"{len(failures)} smoke checks failed: {failures}")
    print("all smoke checks passed")


if __name__ == "__main__":
    main()
