"""Small on-disk fixtures shared by the CLI and acceptance tests."""

import json
import math

import numpy as np

from amoekit.formats import write_emb

# Hand-computed expectations for write_loss_fixture:
#   siglip2: image a has summary 1 - 1/sqrt(2) and patch 4.0, image b is exact.
#   dino:    image a has register loss 4.0, everything else exact.
#   ARKD (asymmetric) is 0 for both teachers: student distances never shrink.
SIGLIP_GLOBAL = (1 - 1 / math.sqrt(2) + 4.0) / 2
DINO_GLOBAL = 4.0 / 2
TOTAL = SIGLIP_GLOBAL + DINO_GLOBAL


def write_loss_fixture(root, perfect=False):
    root.mkdir(parents=True, exist_ok=True)
    ts = np.array([[1, 0], [-1, 0]], np.float32)
    ss = ts.copy() if perfect else np.array([[1, 1], [-1, 0]], np.float32)
    tp = np.zeros((3, 4), np.float32)  # a has 2 tokens, b has 1
    sp = tp.copy()
    if not perfect:
        sp[:2] = 1.0
    dts = np.array([[0, 0, 1], [0, 2, 0]], np.float32)
    treg = np.zeros((2, 3), np.float32)  # one register per image
    sreg = treg.copy()
    if not perfect:
        sreg[0] = [0, 2, 0]
    files = dict(ts=ts, ss=ss, tp=tp, sp=sp, dts=dts, dss=dts, dtp=tp, dsp=tp, treg=treg, sreg=sreg)
    for name, m in files.items():
        write_emb(root / f"{name}.emb", m)
    manifest = {
        "images": [{"id": "a", "num_tokens": 2}, {"id": "b", "num_tokens": 1}],
        "teachers": [
            {"name": "siglip2", "summary_dim": 2, "patch_dim": 4, "teacher_summary": "ts.emb",
             "student_summary": "ss.emb", "teacher_patches": "tp.emb", "student_patches": "sp.emb"},
            {"name": "dino", "summary_dim": 3, "patch_dim": 4, "num_registers": 1, "has_register_loss": True,
             "teacher_summary": "dts.emb", "student_summary": "dss.emb", "teacher_patches": "dtp.emb",
             "student_patches": "dsp.emb", "teacher_registers": "treg.emb", "student_registers": "sreg.emb"},
        ],
    }
    (root / "features.json").write_text(json.dumps(manifest))
    return root / "features.json"


def write_manifest(path, sizes):
    with open(path, "w") as fh:
        for i, (w, h) in enumerate(sizes):
            fh.write(json.dumps({"id": f"img{i}", "width": w, "height": h}) + "\n")
    return path


# Acceptance outcomes, filled by tests/test_acceptance.py and printed by the
# terminal-summary hook in conftest.py.
ACCEPTANCE_RESULTS: dict[int, str] = {}
